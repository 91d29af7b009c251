//! Paired-modality datasets, splitting and normalization.

mod formats;
mod synthetic;

pub use formats::{
    decode_hnim, encode_hnim, load_datacube, load_paired_images, read_datacube, read_hnim, read_manifest,
    write_datacube, write_hnim, write_manifest, Datacube, DatacubeHeader, DatacubeLayout, Manifest,
    ManifestEntry, DATACUBE_VERSION,
};
pub use synthetic::{generate_synthetic, SyntheticParams, SyntheticTask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Modality;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Paired samples `(x1ᵏ, x2ᵏ, yᵏ)` with labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    x: [Vec<Tensor>; 2],
    labels: Vec<usize>,
    num_classes: usize,
    shapes: [Vec<usize>; 2],
}

impl MultimodalDataset {
    pub fn new(x1: Vec<Tensor>, x2: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x1.len() != x2.len() || x1.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "modality 1 has {} samples, modality 2 has {}, labels {}",
                x1.len(),
                x2.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "sample {i} has label {l} >= {num_classes}"
            )));
        }
        let mut shapes: [Vec<usize>; 2] = Default::default();
        for (m, xs) in [&x1, &x2].into_iter().enumerate() {
            if let Some(first) = xs.first() {
                if let Some(i) = xs.iter().position(|t| t.shape() != first.shape()) {
                    return Err(Error::Dataset(format!(
                        "modality {} sample {i} has shape {:?}, expected {:?}",
                        m + 1,
                        xs[i].shape(),
                        first.shape()
                    )));
                }
                shapes[m] = first.shape().to_vec();
            }
        }
        Ok(MultimodalDataset {
            x: [x1, x2],
            labels,
            num_classes,
            shapes,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        MultimodalDataset {
            x: Default::default(),
            labels: Vec::new(),
            num_classes,
            shapes: Default::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape of one modality (empty for an empty dataset).
    pub fn shape(&self, m: Modality) -> &[usize] {
        &self.shapes[m.index()]
    }

    pub fn samples(&self, m: Modality) -> &[Tensor] {
        &self.x[m.index()]
    }

    pub fn sample(&self, m: Modality, i: usize) -> &Tensor {
        &self.x[m.index()][i]
    }

    /// Stacks the given samples of one modality into `batch × shape`.
    pub fn batch(&self, m: Modality, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.x[m.index()][i]).collect();
        Tensor::stack(&items)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Single-modality spectral pixels, as read from a datacube.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDataset {
    pub pixels: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub bands: usize,
}

impl SpectralDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Partitions each pixel's bands into `[0, cut)` and `[cut, bands)`.
pub fn band_split(dataset: &SpectralDataset, cut: usize) -> Result<MultimodalDataset> {
    if cut == 0 || cut >= dataset.bands {
        return Err(Error::config(
            "cut_index",
            format!("must satisfy 0 < cut < {}, got {cut}", dataset.bands),
        ));
    }
    let (mut x1, mut x2) = (
        Vec::with_capacity(dataset.len()),
        Vec::with_capacity(dataset.len()),
    );
    for px in &dataset.pixels {
        let (a, b) = px.data().split_at(cut);
        x1.push(Tensor::from_vec(a.to_vec()));
        x2.push(Tensor::from_vec(b.to_vec()));
    }
    MultimodalDataset::new(x1, x2, dataset.labels.clone(), dataset.num_classes)
}

/// Disjoint train / validation / test index lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split of a dataset; see [`stratified_split`].
pub fn split(
    dataset: &MultimodalDataset,
    train_ratio: f64,
    val_fraction: f64,
    rng: &mut RngState,
) -> Result<SplitIndices> {
    stratified_split(
        dataset.labels(),
        dataset.num_classes(),
        train_ratio,
        val_fraction,
        rng,
    )
}

/// Per class: `round(n·train_ratio)` samples go to the training portion,
/// of which `round(portion·val_fraction)` become validation; the rest are
/// test. Index lists come back sorted.
pub fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    train_ratio: f64,
    val_fraction: f64,
    rng: &mut RngState,
) -> Result<SplitIndices> {
    for (name, v) in [("train_ratio", train_ratio), ("val_fraction", val_fraction)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::config(name, format!("must lie in (0, 1), got {v}")));
        }
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = SplitIndices::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let portion = (n as f64 * train_ratio).round() as usize;
        let val = (portion as f64 * val_fraction).round() as usize;
        if portion == n || portion - val == 0 {
            return Err(Error::TooFewSamples { class, count: n });
        }
        rng.shuffle(&mut members);
        out.validation.extend_from_slice(&members[..val]);
        out.train.extend_from_slice(&members[val..portion]);
        out.test.extend_from_slice(&members[portion..]);
    }
    for (name, part) in [
        ("train", &out.train),
        ("validation", &out.validation),
        ("test", &out.test),
    ] {
        if part.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizePolicy {
    None,
    /// Per-channel (images) or per-band (vectors) standardization.
    #[default]
    Standardize,
}

/// Channel statistics for one modality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub modalities: [ChannelStats; 2],
}

/// Channel count and per-channel plane size for a sample shape. Rank-1
/// samples are spectral vectors: every element is its own band.
fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (*d, 1),
        [c, rest @ ..] => (*c, rest.iter().product()),
        [] => (0, 0),
    }
}

impl NormStats {
    /// Fits statistics on `indices` only.
    pub fn fit(dataset: &MultimodalDataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let mut stats = NormStats::default();
        for m in Modality::BOTH {
            let (channels, plane) = channel_layout(dataset.shape(m));
            let mut sum = vec![0.0f64; channels];
            let mut sq = vec![0.0f64; channels];
            for &i in indices {
                let data = dataset.sample(m, i).data();
                for c in 0..channels {
                    for &v in &data[c * plane..(c + 1) * plane] {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
            }
            let n = (indices.len() * plane) as f64;
            let s = &mut stats.modalities[m.index()];
            for c in 0..channels {
                let mean = sum[c] / n;
                let var = (sq[c] / n - mean * mean).max(0.0);
                let mut std = var.sqrt();
                if std < 1e-8 {
                    log::warn!("modality {m} channel {c} has zero variance; std clamped to 1");
                    std = 1.0;
                }
                s.mean.push(mean as f32);
                s.std.push(std as f32);
            }
        }
        Ok(stats)
    }

    pub fn apply(&self, dataset: &mut MultimodalDataset) {
        for m in Modality::BOTH {
            let (channels, plane) = channel_layout(&dataset.shapes[m.index()]);
            let s = &self.modalities[m.index()];
            if s.mean.len() != channels {
                continue;
            }
            for t in &mut dataset.x[m.index()] {
                let data = t.data_mut();
                for c in 0..channels {
                    for v in &mut data[c * plane..(c + 1) * plane] {
                        *v = (*v - s.mean[c]) / s.std[c];
                    }
                }
            }
        }
    }
}

/// Standardizes every sample with statistics from the `train` indices.
pub fn normalize(
    mut dataset: MultimodalDataset,
    policy: NormalizePolicy,
    train: &[usize],
) -> Result<(MultimodalDataset, NormStats)> {
    match policy {
        NormalizePolicy::None => Ok((dataset, NormStats::default())),
        NormalizePolicy::Standardize => {
            let stats = NormStats::fit(&dataset, train)?;
            stats.apply(&mut dataset);
            Ok((dataset, stats))
        }
    }
}
