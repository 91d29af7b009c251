//! Repeated seeded runs, ablation sweeps and their CSV aggregates.
//!
//! An experiment is described by a TOML document:
//!
//! ```toml
//! n_runs = 5
//! missing_modality = 2
//!
//! [dataset]
//! source = "synthetic"        # or "datacube" (path, cut) or "manifest" (path)
//! classes = 4
//! n_per_class = 500
//!
//! [distillation]
//! alpha = 0.5
//! seed = 7
//!
//! [sweep]                     # only read by `run_sweep`
//! param = "temperature"
//! values = [1, 5, 10, 15, 50, 100]
//! ```
//!
//! Run `k` uses seed `distillation.seed + k`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    band_split, generate_synthetic, load_datacube, load_paired_images, MultimodalDataset, SyntheticParams,
};
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::networks::{build_stream, reduce_depth, FusionLayer, LayerSpec, Modality, Model, TwoStreamNet};
use crate::pipeline::{
    default_spec, prepare, run_distillation, train_joint, DistillationConfig, NetworkName, PipelineArtifacts,
};
use crate::rng::RngState;

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticParams),
    /// Labeled datacube pixels split into two band blocks at `cut`.
    Datacube {
        path: PathBuf,
        #[serde(default = "default_cut")]
        cut: usize,
    },
    Manifest {
        path: PathBuf,
    },
}

fn default_cut() -> usize {
    52
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticParams::default())
    }
}

impl DatasetSource {
    /// Loads the dataset. Synthetic data is drawn from a stream keyed by
    /// `seed`, so every run sees a fresh sample of the same task.
    pub fn load(&self, seed: u64) -> Result<MultimodalDataset> {
        match self {
            DatasetSource::Synthetic(p) => generate_synthetic(p, &mut RngState::derive(seed, "data")),
            DatasetSource::Datacube { path, cut } => band_split(&load_datacube(path)?, *cut),
            DatasetSource::Manifest { path } => load_paired_images(path),
        }
    }

    fn path(&self) -> Option<&Path> {
        match self {
            DatasetSource::Synthetic(_) => None,
            DatasetSource::Datacube { path, .. } | DatasetSource::Manifest { path } => Some(path),
        }
    }

    fn path_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            DatasetSource::Synthetic(_) => None,
            DatasetSource::Datacube { path, .. } | DatasetSource::Manifest { path } => Some(path),
        }
    }
}

/// Layer stacks per modality. Unset streams get [`default_spec`] for their
/// sample shape. `depth_reduction` removes that many conv and hidden dense
/// layers from each stack.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub stream1: Option<Vec<LayerSpec>>,
    pub stream2: Option<Vec<LayerSpec>>,
    pub depth_reduction: usize,
}

impl ArchitectureConfig {
    pub fn specs(&self, data: &MultimodalDataset) -> Result<[Vec<LayerSpec>; 2]> {
        let pick = |given: &Option<Vec<LayerSpec>>, m: Modality| -> Result<Vec<LayerSpec>> {
            let spec = given
                .clone()
                .unwrap_or_else(|| default_spec(data.shape(m), data.num_classes()));
            reduce_depth(&spec, self.depth_reduction)
        };
        Ok([
            pick(&self.stream1, Modality::First)?,
            pick(&self.stream2, Modality::Second)?,
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Lambda,
    Temperature,
    Depth,
    TrainRatio,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Lambda => "lambda",
            SweepParam::Temperature => "temperature",
            SweepParam::Depth => "depth",
            SweepParam::TrainRatio => "train_ratio",
        }
    }

    /// Whether changing this parameter leaves Steps 1 and 2 untouched.
    fn distillation_only(self) -> bool {
        matches!(
            self,
            SweepParam::Alpha | SweepParam::Lambda | SweepParam::Temperature
        )
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("sweep.values", "must not be empty"));
        }
        for &v in &self.values {
            let ok = match self.param {
                SweepParam::Alpha | SweepParam::Lambda => (0.0..=1.0).contains(&v),
                SweepParam::Temperature => v > 0.0 && v.is_finite(),
                SweepParam::Depth => v >= 0.0 && v.fract() == 0.0,
                SweepParam::TrainRatio => v > 0.0 && v < 1.0,
            };
            if !ok {
                return Err(Error::config(
                    "sweep.values",
                    format!("{v} is out of range for {}", self.param),
                ));
            }
        }
        Ok(())
    }

    /// `config` with this parameter set to `value`.
    pub fn apply(&self, config: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = config.clone();
        let d = &mut c.distillation;
        match self.param {
            SweepParam::Alpha => d.alpha = value as f32,
            SweepParam::Lambda => d.lambda = value as f32,
            SweepParam::Temperature => d.temperature = value as f32,
            SweepParam::TrainRatio => d.train_ratio = value,
            SweepParam::Depth => c.architecture.depth_reduction = value as usize,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_runs: usize,
    pub missing_modality: Modality,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub distillation: DistillationConfig,
    pub architecture: ArchitectureConfig,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_runs: 1,
            missing_modality: Modality::Second,
            out_dir: None,
            dataset: DatasetSource::default(),
            distillation: DistillationConfig::default(),
            architecture: ArchitectureConfig::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        Ok(config)
    }

    /// Reads, parses and validates a config file. Relative dataset paths
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|_| Error::config("config", format!("{} is not UTF-8", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = config.dataset.path_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = config.out_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::config("n_runs", "must be at least 1"));
        }
        self.distillation.validate()?;
        if let DatasetSource::Synthetic(p) = &self.dataset {
            p.validate()?;
        }
        if let Some(path) = self.dataset.path() {
            if !path.exists() {
                return Err(Error::config(
                    "dataset.path",
                    format!("{} does not exist", path.display()),
                ));
            }
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_runs as u64).map(|k| self.distillation.seed.wrapping_add(k))
    }
}

/// Rebuilds the network stored in a checkpoint. The layer stacks come from
/// `config`'s architecture applied to `data`; the checkpoint's input
/// descriptor decides between a single stream, a two-stream network and a
/// hallucinated two-stream network.
pub fn load_checkpoint_model(
    path: &Path,
    config: &ExperimentConfig,
    data: &MultimodalDataset,
) -> Result<Model> {
    let records = checkpoint::read_records(path)?;
    let inputs = Model::inputs_from_records(&records)?;
    let specs = config.architecture.specs(data)?;
    let classes = data.num_classes();
    let mut rng = RngState::new(0);
    let mut stream = |m: Modality| build_stream(&specs[m.index()], data.shape(m), classes, &mut rng);
    let mut model = match inputs.as_slice() {
        [m] => Model::Single {
            net: stream(*m)?,
            input: *m,
        },
        [a, b] => {
            let (s1, s2) = (stream(*a)?, stream(*b)?);
            Model::TwoStream(TwoStreamNet::with_inputs(
                s1,
                s2,
                [*a, *b],
                FusionLayer::new(classes, 0.0),
            )?)
        }
        _ => {
            return Err(Error::Checkpoint(format!(
                "{}: malformed input descriptor",
                path.display()
            )))
        }
    };
    model.load_records(&records)?;
    Ok(model)
}

/// Runs `f` on a pool of at most `jobs` threads (0 means one per core).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    Ok(pool.install(f))
}

fn run_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("run_{k:03}"))
}

/// One aggregate row: mean and sample standard deviation of a metric over
/// runs. The deviation is 0 for a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub network: String,
    pub class: String,
    pub mean_acc: f64,
    pub std_acc: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Row names in output order: the five networks, then the teacher.
pub const TEACHER: &str = "teacher";

fn metric_rows(a: &PipelineArtifacts) -> Vec<(String, String, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &str, m: &crate::pipeline::Metrics| {
        out.push((name.to_string(), "overall".to_string(), m.overall_accuracy));
        for (c, acc) in &m.class_wise_accuracy {
            out.push((name.to_string(), c.to_string(), *acc));
        }
    };
    for n in NetworkName::ALL {
        push(n.as_str(), &a.network(n).metrics);
    }
    push(TEACHER, &a.teacher);
    out
}

/// Aggregates matching `(network, class)` rows across runs, keeping the
/// order of first appearance.
pub fn aggregate(runs: &[PipelineArtifacts]) -> Vec<AggregateRow> {
    let mut order = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (n, c, v) in metric_rows(run) {
            let key = (n, c);
            if !values.contains_key(&key) {
                order.push(key.clone());
            }
            values.entry(key).or_default().push(v);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (mean_acc, std_acc) = mean_std(&values[&key]);
            AggregateRow {
                network: key.0,
                class: key.1,
                mean_acc,
                std_acc,
            }
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    read_csv(path)
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One `metrics.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub network: String,
    pub class: String,
    pub accuracy: f64,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    read_csv(path)
}

/// The result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub runs: Vec<PipelineArtifacts>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentOutcome {
    pub fn mean_accuracy(&self, network: &str) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|r| r.network == network && r.class == "overall")
            .map(|r| r.mean_acc)
    }
}

fn run_one(config: &ExperimentConfig, seed: u64) -> Result<PipelineArtifacts> {
    let distillation = DistillationConfig {
        seed,
        ..config.distillation.clone()
    };
    let data = config.dataset.load(seed)?;
    let specs = config.architecture.specs(&data)?;
    let prep = prepare(data, &distillation)?;
    let joint = train_joint(&prep, &specs, &distillation)?;
    run_distillation(&prep, joint, &distillation, config.missing_modality, None)
}

/// Runs the full pipeline `n_runs` times on the current rayon pool and
/// writes `run_XXX/` directories plus `aggregate.csv` under `out`.
/// Nothing is aggregated unless every run succeeds.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    let seeds: Vec<u64> = config.seeds().collect();
    let runs = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &seed)| {
            log::info!("run {k} (seed {seed}) started");
            let a = run_one(config, seed)?;
            a.write(&run_dir(out, k))?;
            log::info!(
                "run {k} done: hallucinated two-stream {:.2}%",
                a.accuracy(NetworkName::HallucinatedTwoStream)
            );
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&runs);
    write_atomic(&out.join("experiment.toml"), config.to_toml().as_bytes())?;
    write_aggregate_csv(&out.join("aggregate.csv"), &aggregate)?;
    Ok(ExperimentOutcome { runs, aggregate })
}

/// One `sweep.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub network: String,
    pub mean_acc: f64,
    pub std_acc: f64,
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path)
}

fn value_dir(out: &Path, param: SweepParam, value: f64) -> PathBuf {
    out.join(format!("{param}={value}"))
}

/// Runs every `(value, seed)` cell of `config.sweep`. Each value gets its
/// own directory laid out like [`run_experiment`]'s; `sweep.csv` holds the
/// overall-accuracy aggregate per value and network. Sweeps over `alpha`,
/// `lambda` and `temperature` train Steps 1 and 2 once per seed and share
/// them across values.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let sweep = config
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep", "missing [sweep] section"))?;
    let seeds: Vec<u64> = config.seeds().collect();
    let cells: Vec<Vec<PipelineArtifacts>> = if sweep.param.distillation_only() {
        let per_seed = seeds
            .par_iter()
            .map(|&seed| {
                let base = DistillationConfig {
                    seed,
                    ..config.distillation.clone()
                };
                let data = config.dataset.load(seed)?;
                let specs = config.architecture.specs(&data)?;
                let prep = prepare(data, &base)?;
                let joint = train_joint(&prep, &specs, &base)?;
                sweep
                    .values
                    .par_iter()
                    .map(|&v| {
                        let c = sweep.apply(config, v);
                        let d = DistillationConfig {
                            seed,
                            ..c.distillation
                        };
                        run_distillation(&prep, joint.clone(), &d, c.missing_modality, None)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        (0..sweep.values.len())
            .map(|vi| per_seed.iter().map(|runs| runs[vi].clone()).collect())
            .collect()
    } else {
        sweep
            .values
            .par_iter()
            .map(|&v| {
                let c = sweep.apply(config, v);
                seeds
                    .par_iter()
                    .map(|&seed| run_one(&c, seed))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut rows = Vec::new();
    for (&value, runs) in sweep.values.iter().zip(&cells) {
        let dir = value_dir(out, sweep.param, value);
        for (k, run) in runs.iter().enumerate() {
            run.write(&run_dir(&dir, k))?;
        }
        let agg = aggregate(runs);
        write_aggregate_csv(&dir.join("aggregate.csv"), &agg)?;
        for r in agg.into_iter().filter(|r| r.class == "overall") {
            rows.push(SweepRow {
                param: sweep.param.as_str().into(),
                value,
                network: r.network,
                mean_acc: r.mean_acc,
                std_acc: r.std_acc,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    write_atomic(&out.join("experiment.toml"), config.to_toml().as_bytes())?;
    write_atomic(&out.join("sweep.csv"), &bytes)?;
    Ok(rows)
}
