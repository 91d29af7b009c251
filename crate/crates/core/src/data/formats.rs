//! On-disk containers: `HNIM` raw tensors, `HNDC` hyperspectral datacubes
//! and the tab-separated pair manifest. All integers are little-endian.
//!
//! ```text
//! HNIM: "HNIM" | rank: u8 | dims: u32 × rank | payload: f32 × Π dims
//! HNDC: "HNDC" | version: u16 | height: u32 | width: u32 | bands: u32
//!       | label_count: u32 | layout: u8 (0 = pixel-interleaved, 1 = band-sequential)
//!       | payload: f32 × height·width·bands | labels: u16 × label_count (0 = unlabeled)
//! manifest: "C=<int>" then one "path1<TAB>path2<TAB>label" line per sample
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{MultimodalDataset, SpectralDataset};
use crate::error::{Error, Result};
use crate::io::{put_f32s, read_file, write_atomic, Reader};
use crate::tensor::Tensor;

const HNIM_MAGIC: &[u8; 4] = b"HNIM";
const HNDC_MAGIC: &[u8; 4] = b"HNDC";
pub const DATACUBE_VERSION: u16 = 1;

pub fn encode_hnim(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(HNIM_MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(&mut out, t.data());
    out
}

pub fn decode_hnim(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path.display().to_string());
    if r.take(4).ok() != Some(HNIM_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "HNIM",
        });
    }
    let rank = r.u8()? as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<_>>()?;
    let n: u64 = dims.iter().map(|&d| d as u64).product();
    r.require(n * 4)?;
    let data = r.f32s(n as usize)?;
    if !r.at_end() {
        return Err(Error::Dataset(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Tensor::new(dims, data)
}

pub fn write_hnim(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_hnim(t))
}

pub fn read_hnim(path: &Path) -> Result<Tensor> {
    decode_hnim(&read_file(path)?, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatacubeLayout {
    /// `[pixel][band]`: each pixel's bands are contiguous.
    PixelInterleaved,
    /// `[band][pixel]`: one full image per band.
    BandSequential,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatacubeHeader {
    pub version: u16,
    pub height: u32,
    pub width: u32,
    pub bands: u32,
    pub label_count: u32,
    pub layout: DatacubeLayout,
}

impl DatacubeHeader {
    pub const LEN: usize = 4 + 2 + 4 * 4 + 1;

    pub fn pixels(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    /// Total file length implied by the header.
    pub fn file_len(&self) -> u64 {
        Self::LEN as u64 + self.pixels() * self.bands as u64 * 4 + self.label_count as u64 * 2
    }
}

/// A hyperspectral image with its per-pixel label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Datacube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Pixel-interleaved reflectances, `height·width·bands` values.
    pub values: Vec<f32>,
    /// Row-major labels, 0 = unlabeled, classes numbered from 1.
    pub labels: Vec<u16>,
}

impl Datacube {
    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.values[i * self.bands..(i + 1) * self.bands]
    }
}

pub fn write_datacube(path: &Path, cube: &Datacube, layout: DatacubeLayout) -> Result<()> {
    let pixels = cube.height * cube.width;
    if cube.values.len() != pixels * cube.bands || cube.labels.len() != pixels {
        return Err(Error::Dataset(
            "datacube payload does not match its dimensions".into(),
        ));
    }
    let mut out = Vec::with_capacity(DatacubeHeader::LEN + cube.values.len() * 4 + pixels * 2);
    out.extend_from_slice(HNDC_MAGIC);
    out.extend_from_slice(&DATACUBE_VERSION.to_le_bytes());
    for v in [cube.height, cube.width, cube.bands, pixels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match layout {
        DatacubeLayout::PixelInterleaved => {
            out.push(0);
            put_f32s(&mut out, &cube.values);
        }
        DatacubeLayout::BandSequential => {
            out.push(1);
            for b in 0..cube.bands {
                for p in 0..pixels {
                    out.extend_from_slice(&cube.values[p * cube.bands + b].to_le_bytes());
                }
            }
        }
    }
    for l in &cube.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    write_atomic(path, &out)
}

fn read_header(r: &mut Reader<'_>, path: &Path) -> Result<DatacubeHeader> {
    if r.take(4).ok() != Some(HNDC_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "HNDC",
        });
    }
    let version = r.u16()?;
    if version != DATACUBE_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "datacube",
            version,
        });
    }
    let (height, width, bands, label_count) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let layout = match r.u8()? {
        0 => DatacubeLayout::PixelInterleaved,
        1 => DatacubeLayout::BandSequential,
        other => {
            return Err(Error::Dataset(format!(
                "{}: unknown layout {other}",
                path.display()
            )))
        }
    };
    Ok(DatacubeHeader {
        version,
        height,
        width,
        bands,
        label_count,
        layout,
    })
}

pub fn read_datacube(path: &Path) -> Result<Datacube> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path.display().to_string());
    let h = read_header(&mut r, path)?;
    if h.label_count as u64 != h.pixels() {
        return Err(Error::Dataset(format!(
            "{}: label map has {} entries for {}x{} pixels",
            path.display(),
            h.label_count,
            h.height,
            h.width
        )));
    }
    if bytes.len() as u64 != h.file_len() {
        return Err(Error::Truncated {
            what: path.display().to_string(),
            expected: h.file_len(),
            actual: bytes.len() as u64,
        });
    }
    let pixels = h.pixels() as usize;
    let bands = h.bands as usize;
    let raw = r.f32s(pixels * bands)?;
    let values = match h.layout {
        DatacubeLayout::PixelInterleaved => raw,
        DatacubeLayout::BandSequential => {
            let mut v = vec![0.0; raw.len()];
            for b in 0..bands {
                for p in 0..pixels {
                    v[p * bands + b] = raw[b * pixels + p];
                }
            }
            v
        }
    };
    let labels = r.u16s(pixels)?;
    Ok(Datacube {
        height: h.height as usize,
        width: h.width as usize,
        bands,
        values,
        labels,
    })
}

/// Reads a datacube and keeps every labeled pixel as one sample; label `k`
/// becomes class `k - 1`.
pub fn load_datacube(path: &Path) -> Result<SpectralDataset> {
    let cube = read_datacube(path)?;
    let num_classes = cube.labels.iter().copied().max().unwrap_or(0) as usize;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in cube.labels.iter().enumerate() {
        if l > 0 {
            pixels.push(Tensor::from_vec(cube.pixel(i).to_vec()));
            labels.push(l as usize - 1);
        }
    }
    if labels.is_empty() {
        log::warn!("{}: no labeled pixels", path.display());
    }
    Ok(SpectralDataset {
        pixels,
        labels,
        num_classes,
        bands: cube.bands,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path1: PathBuf,
    pub path2: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason: "not UTF-8".into(),
    })?;
    let err = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Manifest::default());
    };
    let classes = header
        .trim()
        .strip_prefix("C=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| err(1, format!("expected `C=<int>` header, found `{header}`")))?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let [p1, p2, label] = fields.as_slice() else {
            return Err(err(
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| err(lineno, format!("bad label `{label}`")))?;
        if label >= classes {
            return Err(err(lineno, format!("label {label} outside 0..{classes}")));
        }
        if !seen.insert((p1.to_string(), p2.to_string())) {
            return Err(err(lineno, format!("duplicate sample `{p1}`, `{p2}`")));
        }
        entries.push(ManifestEntry {
            path1: PathBuf::from(p1),
            path2: PathBuf::from(p2),
            label,
        });
    }
    Ok(Manifest { classes, entries })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut s = format!("C={}\n", manifest.classes);
    for e in &manifest.entries {
        writeln!(s, "{}\t{}\t{}", e.path1.display(), e.path2.display(), e.label).unwrap();
    }
    write_atomic(path, s.as_bytes())
}

/// Loads every pair listed in a manifest. Relative paths resolve against
/// the manifest's directory.
pub fn load_paired_images(manifest_path: &Path) -> Result<MultimodalDataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut x = [Vec::new(), Vec::new()];
    let mut labels = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        for (m, p) in [&e.path1, &e.path2].into_iter().enumerate() {
            let full = base.join(p);
            let t = read_hnim(&full)?;
            if let Some(first) = x[m].first().map(|t: &Tensor| t.shape().to_vec()) {
                if t.shape() != first.as_slice() {
                    return Err(Error::Dataset(format!(
                        "{} has shape {:?}, expected {:?} for modality {}",
                        full.display(),
                        t.shape(),
                        first,
                        m + 1
                    )));
                }
            }
            x[m].push(t);
        }
        labels.push(e.label);
    }
    let [x1, x2] = x;
    MultimodalDataset::new(x1, x2, labels, manifest.classes)
}
