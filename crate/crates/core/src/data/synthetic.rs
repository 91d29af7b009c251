//! Synthetic paired-modality task with class information split across the
//! two modalities.
//!
//! Class `c` factors into a coarse group `c / (C/2)` and a fine index
//! `c % (C/2)`. Modality 1 always reveals the coarse group and reveals the
//! exact class only on a `leak` fraction of samples; modality 2 always
//! reveals the fine index and reveals the exact class on a `leak` fraction.
//! Revealing the exact class means emitting that class's prototype;
//! otherwise the modality emits the normalized mean of the prototypes of
//! every class it cannot tell apart. Prototypes are a random orthonormal
//! set, one per class per modality, and every sample gets isotropic
//! Gaussian noise on top.

use serde::{Deserialize, Serialize};

use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::networks::Modality;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub classes: usize,
    pub n_per_class: usize,
    pub d1: usize,
    pub d2: usize,
    pub noise_sigma: f32,
    pub leak: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            classes: 4,
            n_per_class: 500,
            d1: 16,
            d2: 16,
            noise_sigma: 0.05,
            leak: 0.3,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || !self.classes.is_multiple_of(2) {
            return Err(Error::config(
                "classes",
                format!("must be even and >= 2, got {}", self.classes),
            ));
        }
        for (field, d) in [("d1", self.d1), ("d2", self.d2)] {
            if d < self.classes {
                return Err(Error::config(
                    field,
                    format!("must be >= classes ({}), got {d}", self.classes),
                ));
            }
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::config(
                "leak",
                format!("must lie in [0, 1], got {}", self.leak),
            ));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    params: SyntheticParams,
    prototypes: [Vec<Vec<f32>>; 2],
}

fn orthonormal(count: usize, dim: usize, rng: &mut RngState) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal() as f64).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

impl SyntheticTask {
    pub fn new(params: SyntheticParams, rng: &mut RngState) -> Result<Self> {
        params.validate()?;
        let p1 = orthonormal(params.classes, params.d1, rng);
        let p2 = orthonormal(params.classes, params.d2, rng);
        Ok(SyntheticTask {
            params,
            prototypes: [p1, p2],
        })
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn class_prototypes(&self, m: Modality) -> &[Vec<f32>] {
        &self.prototypes[m.index()]
    }

    /// Classes that modality `m` cannot tell apart from `class` when it does
    /// not leak: same coarse group for modality 1, same fine index for
    /// modality 2.
    pub fn confusable(&self, m: Modality, class: usize) -> Vec<usize> {
        let half = self.params.classes / 2;
        match m {
            Modality::First => {
                let g = class / half;
                (g * half..(g + 1) * half).collect()
            }
            Modality::Second => {
                let f = class % half;
                vec![f, f + half]
            }
        }
    }

    fn group_prototype(&self, m: Modality, class: usize) -> Vec<f32> {
        let protos = &self.prototypes[m.index()];
        let members = self.confusable(m, class);
        let dim = protos[0].len();
        let mut v = vec![0.0f32; dim];
        for &c in &members {
            v.iter_mut().zip(&protos[c]).for_each(|(a, b)| *a += b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// Best achievable accuracy from modality `m` alone in the noiseless
    /// limit: exact on leaked samples, a uniform guess among the
    /// confusable classes otherwise.
    pub fn bayes_ceiling(&self, m: Modality) -> f64 {
        let group = self.confusable(m, 0).len() as f64;
        self.params.leak + (1.0 - self.params.leak) / group
    }

    /// Draws `n_per_class` samples per class, class-major.
    #[allow(clippy::needless_range_loop)]
    pub fn sample(&self, rng: &mut RngState) -> MultimodalDataset {
        let p = &self.params;
        let groups: [Vec<Vec<f32>>; 2] = [Modality::First, Modality::Second]
            .map(|m| (0..p.classes).map(|c| self.group_prototype(m, c)).collect());
        let n = p.classes * p.n_per_class;
        let (mut x1, mut x2, mut labels) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for class in 0..p.classes {
            for _ in 0..p.n_per_class {
                for (m, out) in [(Modality::First, &mut x1), (Modality::Second, &mut x2)] {
                    let base = if rng.bernoulli(p.leak) {
                        &self.prototypes[m.index()][class]
                    } else {
                        &groups[m.index()][class]
                    };
                    let v: Vec<f32> = base.iter().map(|&b| b + p.noise_sigma * rng.normal()).collect();
                    out.push(Tensor::from_vec(v));
                }
                labels.push(class);
            }
        }
        MultimodalDataset::new(x1, x2, labels, p.classes).expect("generator upholds dataset invariants")
    }
}

/// Builds a task from `rng` and samples one dataset from it.
pub fn generate_synthetic(params: &SyntheticParams, rng: &mut RngState) -> Result<MultimodalDataset> {
    let task = SyntheticTask::new(params.clone(), rng)?;
    Ok(task.sample(rng))
}
