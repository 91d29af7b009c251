//! The four-step training procedure and evaluation.
//!
//! 1. Train one stream per modality with cross-entropy.
//! 2. Warm-start a two-stream network from those streams and train it
//!    jointly, fusion included.
//! 3. Freeze the Step-2 stream of the missing modality as teacher and
//!    distill it into a hallucination network fed the available modality.
//! 4. Pair the available stream with the frozen hallucination network and
//!    fine-tune. The result needs the available modality only.
//!
//! Every step keeps the snapshot with the best validation accuracy, ties
//! broken by the lower validation loss.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Parameter, Tape, Var};
use crate::checkpoint;
use crate::data::{normalize, split, MultimodalDataset, NormStats, NormalizePolicy, SplitIndices};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{cross_entropy, gd_loss_with, one_hot, HardLabelSource, HardLabels, Logits};
use crate::networks::{
    build_stream, ms_net_spec, pan_net_spec, predict, vector_stream_spec, FusionLayer, LayerSpec,
    ModalInputs, Modality, Model, StreamNet, TwoStreamNet,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Epoch counts for the four steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochConfig {
    pub individual: usize,
    pub two_stream: usize,
    pub hallucination: usize,
    pub finetune: usize,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            individual: 100,
            two_stream: 200,
            hallucination: 100,
            finetune: 100,
        }
    }
}

/// What Step 4 trains: the fusion layer alone, or the fusion layer and the
/// available-modality stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    #[default]
    StreamAndFusion,
    FusionOnly,
}

/// Every tunable of the training procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationConfig {
    pub alpha: f32,
    pub lambda: f32,
    pub temperature: f32,
    pub gamma: f32,
    pub lr_individual: f32,
    pub lr_two_stream: f32,
    pub lr_hall: f32,
    pub epochs: EpochConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub hard_labels: HardLabelSource,
    pub finetune: FinetuneMode,
    pub train_ratio: f64,
    pub val_fraction: f64,
    pub normalize: NormalizePolicy,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            alpha: 0.5,
            lambda: 0.5,
            temperature: 10.0,
            gamma: 1e-4,
            lr_individual: 3e-4,
            lr_two_stream: 1.5e-4,
            lr_hall: 3e-4,
            epochs: EpochConfig::default(),
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            hard_labels: HardLabelSource::Teacher,
            finetune: FinetuneMode::StreamAndFusion,
            train_ratio: 0.5,
            val_fraction: 0.05,
            normalize: NormalizePolicy::Standardize,
        }
    }
}

impl DistillationConfig {
    /// Learning rates used for hyperspectral band-split experiments.
    pub fn hyperspectral() -> Self {
        DistillationConfig {
            lr_individual: 6e-4,
            lr_two_stream: 3e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "temperature",
                format!("must be positive, got {}", self.temperature),
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(
                "gamma",
                format!("must be non-negative, got {}", self.gamma),
            ));
        }
        for (name, lr) in [
            ("lr_individual", self.lr_individual),
            ("lr_two_stream", self.lr_two_stream),
            ("lr_hall", self.lr_hall),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {lr}")));
            }
        }
        let e = &self.epochs;
        for (name, n) in [
            ("epochs.individual", e.individual),
            ("epochs.two_stream", e.two_stream),
            ("epochs.hallucination", e.hallucination),
            ("epochs.finetune", e.finetune),
        ] {
            if n == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (name, v) in [
            ("train_ratio", self.train_ratio),
            ("val_fraction", self.val_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(name, format!("must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// One epoch of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Accuracies in percent. Class-wise accuracy is per-class recall and
/// only lists classes present in the evaluated split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub class_wise_accuracy: BTreeMap<usize, f64>,
    /// `[correct, total]` per class.
    pub class_counts: BTreeMap<usize, [usize; 2]>,
    pub correct: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<EpochRecord>,
}

/// A trained network and its test metrics.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub metrics: Metrics,
    pub best_epoch: usize,
}

/// The five networks produced by a full run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkName {
    Stream1,
    Stream2,
    TwoStream,
    HallNet,
    HallucinatedTwoStream,
}

impl NetworkName {
    pub const ALL: [NetworkName; 5] = [
        NetworkName::Stream1,
        NetworkName::Stream2,
        NetworkName::TwoStream,
        NetworkName::HallNet,
        NetworkName::HallucinatedTwoStream,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NetworkName::Stream1 => "stream1",
            NetworkName::Stream2 => "stream2",
            NetworkName::TwoStream => "two_stream",
            NetworkName::HallNet => "hall_net",
            NetworkName::HallucinatedTwoStream => "hallucinated_two_stream",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for NetworkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dataset after splitting and train-only normalization.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: MultimodalDataset,
    pub split: SplitIndices,
    pub norm: NormStats,
}

/// Splits `dataset` and standardizes it with training statistics.
pub fn prepare(dataset: MultimodalDataset, config: &DistillationConfig) -> Result<PreparedData> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut rng = RngState::derive(config.seed, "split");
    let split = split(&dataset, config.train_ratio, config.val_fraction, &mut rng)?;
    let (dataset, norm) = normalize(dataset, config.normalize, &split.train)?;
    Ok(PreparedData { dataset, split, norm })
}

/// Default layer stack for a sample shape: dense stream for vectors, the
/// four-conv stack for single-channel images, the three-conv stack for
/// multi-channel images.
pub fn default_spec(shape: &[usize], classes: usize) -> Vec<LayerSpec> {
    match shape {
        [_] => vector_stream_spec(classes),
        [1, _, _] => pan_net_spec(classes),
        _ => ms_net_spec(classes),
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct Batch {
    inputs: [Option<Tensor>; 2],
    labels: Vec<usize>,
    indices: Vec<usize>,
}

fn make_batch(data: &MultimodalDataset, indices: &[usize], needs: &[Modality]) -> Result<Batch> {
    let mut inputs = [None, None];
    for &m in needs {
        inputs[m.index()] = Some(data.batch(m, indices)?);
    }
    Ok(Batch {
        inputs,
        labels: data.batch_labels(indices),
        indices: indices.to_vec(),
    })
}

fn feed(tape: &mut Tape, batch: &Batch) -> ModalInputs {
    let mut vars = [None, None];
    for (slot, t) in batch.inputs.iter().enumerate() {
        vars[slot] = t.as_ref().map(|t| tape.constant(t.clone()));
    }
    ModalInputs {
        first: vars[0],
        second: vars[1],
    }
}

fn params_mut(model: &mut Model) -> Vec<&mut Parameter> {
    match model {
        Model::Single { net, .. } => net.params_mut().collect(),
        Model::TwoStream(net) => net.params_mut().collect(),
    }
}

/// Records the loss of one batch on `tape`; returns `(loss, logits)`.
type Objective<'a> = dyn Fn(&mut Tape, &Model, &Batch) -> Result<(Var, Logits)> + 'a;

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    predict(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Mean loss and accuracy (percent) of `objective` over `indices`.
fn score(
    model: &Model,
    data: &MultimodalDataset,
    indices: &[usize],
    batch_size: usize,
    objective: &Objective<'_>,
) -> Result<(f64, f64)> {
    let needs = model.required_modalities();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in indices.chunks(batch_size.max(256)) {
        let batch = make_batch(data, chunk, &needs)?;
        let mut tape = Tape::new();
        let (l, z) = objective(&mut tape, model, &batch)?;
        loss += tape.value(l).item() as f64 * chunk.len() as f64;
        correct += count_correct(tape.value(z.0), &batch.labels);
    }
    let n = indices.len().max(1) as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

struct FitOutcome {
    best: Model,
    best_epoch: usize,
    curve: Vec<EpochRecord>,
}

#[allow(clippy::too_many_arguments)]
fn fit(
    mut model: Model,
    prep: &PreparedData,
    epochs: usize,
    lr: f32,
    config: &DistillationConfig,
    rng: &mut RngState,
    objective: &Objective<'_>,
) -> Result<FitOutcome> {
    let (train, validation) = (&prep.split.train, &prep.split.validation);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if validation.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let needs = model.required_modalities();
    let mut opt = Optimizer::new(config.optimizer, lr);
    let mut order = train.clone();
    let mut best: Option<(f64, f64, Model, usize)> = None;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = make_batch(&prep.dataset, chunk, &needs)?;
            let mut tape = Tape::new();
            let (loss, z) = objective(&mut tape, &model, &batch)?;
            let grads = tape.backward(loss)?;
            loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
            correct += count_correct(tape.value(z.0), &batch.labels);
            let mut params = params_mut(&mut model);
            for p in params.iter_mut() {
                p.accumulate(&grads);
            }
            opt.update_step(params);
        }
        let (val_loss, val_acc) = score(&model, &prep.dataset, validation, config.batch_size, objective)?;
        let n = order.len() as f64;
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: 100.0 * correct as f64 / n,
            val_loss,
            val_accuracy: val_acc,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if better {
            best = Some((val_acc, val_loss, model.clone(), epoch));
        }
    }
    let (_, _, best, best_epoch) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        best,
        best_epoch,
        curve,
    })
}

fn supervised(gamma_term: bool) -> impl Fn(&mut Tape, &Model, &Batch) -> Result<(Var, Logits)> {
    move |tape, model, batch| {
        let inputs = feed(tape, batch);
        let z = model.forward(tape, &inputs)?;
        let classes = model.num_classes();
        let y = tape.constant(one_hot(&batch.labels, classes));
        let p = tape.softmax(z.0, 1.0)?;
        let mut loss = cross_entropy(tape, y, p)?;
        if gamma_term {
            if let Model::TwoStream(net) = model {
                if !net.fusion.w.frozen {
                    let reg = net.fusion.regularizer(tape);
                    loss = tape.add(loss, reg)?;
                }
            }
        }
        Ok((loss, z))
    }
}

fn finish(outcome: FitOutcome, prep: &PreparedData) -> Result<Trained> {
    let mut metrics = evaluate(&outcome.best, &prep.dataset, &prep.split.test)?;
    metrics.curve = outcome.curve;
    Ok(Trained {
        model: outcome.best,
        metrics,
        best_epoch: outcome.best_epoch,
    })
}

// ---------------------------------------------------------------------------
// Steps

/// Step 1: one stream per modality, trained independently with
/// cross-entropy. Returns `[stream for modality 1, stream for modality 2]`.
pub fn step1_train_individual(
    prep: &PreparedData,
    specs: &[Vec<LayerSpec>; 2],
    config: &DistillationConfig,
) -> Result<[Trained; 2]> {
    config.validate()?;
    let data = &prep.dataset;
    let mut out = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let label = format!("step1.stream{}", m.number());
        let mut rng = RngState::derive(config.seed, &format!("{label}.init"));
        let net = build_stream(&specs[m.index()], data.shape(m), data.num_classes(), &mut rng)?;
        let model = Model::Single { net, input: m };
        let mut rng = RngState::derive(config.seed, &format!("{label}.batches"));
        let objective = supervised(false);
        let outcome = fit(
            model,
            prep,
            config.epochs.individual,
            config.lr_individual,
            config,
            &mut rng,
            &objective,
        )?;
        out.push(finish(outcome, prep)?);
    }
    let second = out.pop().expect("two streams");
    let first = out.pop().expect("two streams");
    Ok([first, second])
}

fn single_stream(model: &Model, expected: Modality) -> Result<&StreamNet> {
    match model {
        Model::Single { net, input } if *input == expected => Ok(net),
        Model::Single { input, .. } => Err(Error::CheckpointMismatch(format!(
            "expected a stream for modality {expected}, found one for modality {input}"
        ))),
        Model::TwoStream(_) => Err(Error::CheckpointMismatch("expected a single stream".into())),
    }
}

fn two_stream(model: &Model) -> Result<&TwoStreamNet> {
    match model {
        Model::TwoStream(net) => Ok(net),
        Model::Single { .. } => Err(Error::CheckpointMismatch("expected a two-stream network".into())),
    }
}

fn check_stream_fits(net: &StreamNet, data: &MultimodalDataset, m: Modality) -> Result<()> {
    if net.input_shape() != data.shape(m) || net.num_classes() != data.num_classes() {
        return Err(Error::CheckpointMismatch(format!(
            "stream for modality {m} takes {:?} with {} classes, data has {:?} with {}",
            net.input_shape(),
            net.num_classes(),
            data.shape(m),
            data.num_classes()
        )));
    }
    Ok(())
}

/// Step 2: warm-start both streams from Step 1 and train the whole
/// two-stream network, fusion included.
pub fn step2_train_two_stream(
    prep: &PreparedData,
    step1: &[Trained; 2],
    config: &DistillationConfig,
) -> Result<Trained> {
    let s1 = single_stream(&step1[0].model, Modality::First)?.clone();
    let s2 = single_stream(&step1[1].model, Modality::Second)?.clone();
    step2_train_from(prep, [s1, s2], config)
}

/// Step 2 from arbitrary initial streams (used to compare warm and cold
/// starts).
pub fn step2_train_from(
    prep: &PreparedData,
    streams: [StreamNet; 2],
    config: &DistillationConfig,
) -> Result<Trained> {
    config.validate()?;
    let [mut s1, mut s2] = streams;
    for (s, m) in [(&s1, Modality::First), (&s2, Modality::Second)] {
        check_stream_fits(s, &prep.dataset, m)?;
    }
    s1.set_frozen(false);
    s2.set_frozen(false);
    let fusion = FusionLayer::new(prep.dataset.num_classes(), config.gamma);
    let model = Model::TwoStream(TwoStreamNet::new(s1, s2, fusion)?);
    let mut rng = RngState::derive(config.seed, "step2.batches");
    let objective = supervised(true);
    let outcome = fit(
        model,
        prep,
        config.epochs.two_stream,
        config.lr_two_stream,
        config,
        &mut rng,
        &objective,
    )?;
    finish(outcome, prep)
}

/// The Step-2 stream of the missing modality, frozen, as a standalone model.
pub fn teacher_of(two: &Trained, missing: Modality) -> Result<Model> {
    let net = two_stream(&two.model)?;
    let slot = net
        .inputs
        .iter()
        .position(|&m| m == missing)
        .ok_or(Error::MissingModality(missing.number()))?;
    let mut teacher = net.streams[slot].clone();
    teacher.set_frozen(true);
    Ok(Model::Single {
        net: teacher,
        input: missing,
    })
}

fn teacher_logits(
    teacher: &Model,
    data: &MultimodalDataset,
    indices: &[usize],
) -> Result<HashMap<usize, Vec<f32>>> {
    let Model::Single { net, input } = teacher else {
        unreachable!("teacher is always a single stream");
    };
    let mut out = HashMap::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let z = net.logits(&data.batch(*input, chunk)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            out.insert(i, z.row(k).to_vec());
        }
    }
    Ok(out)
}

/// Step 3: distill the frozen teacher into a fresh network that reads the
/// available modality. Returns the hallucination network and the teacher's
/// own metrics.
pub fn step3_train_hallucination(
    prep: &PreparedData,
    two: &Trained,
    missing: Modality,
    config: &DistillationConfig,
) -> Result<(Trained, Metrics)> {
    step3_with_spec(prep, two, missing, config, None)
}

/// [`step3_train_hallucination`] with an explicit hallucination-net layer
/// stack instead of a copy of the available stream's.
pub fn step3_with_spec(
    prep: &PreparedData,
    two: &Trained,
    missing: Modality,
    config: &DistillationConfig,
    spec: Option<&[LayerSpec]>,
) -> Result<(Trained, Metrics)> {
    config.validate()?;
    let available = missing.other();
    let net = two_stream(&two.model)?;
    let teacher = teacher_of(two, missing)?;
    let teacher_metrics = evaluate(&teacher, &prep.dataset, &prep.split.test)?;

    let template = &net.streams[net
        .inputs
        .iter()
        .position(|&m| m == available)
        .unwrap_or(available.index())];
    let spec = spec.map(<[LayerSpec]>::to_vec).unwrap_or_else(|| template.spec());
    let data = &prep.dataset;
    let mut rng = RngState::derive(config.seed, "step3.init");
    let hall = build_stream(&spec, data.shape(available), data.num_classes(), &mut rng)?;
    let model = Model::Single {
        net: hall,
        input: available,
    };

    let mut known: Vec<usize> = prep.split.train.clone();
    known.extend_from_slice(&prep.split.validation);
    let targets = teacher_logits(&teacher, data, &known)?;
    let classes = data.num_classes();
    let objective = |tape: &mut Tape, model: &Model, batch: &Batch| -> Result<(Var, Logits)> {
        let inputs = feed(tape, batch);
        let z = model.forward(tape, &inputs)?;
        let mut rows = Vec::with_capacity(batch.indices.len() * classes);
        for i in &batch.indices {
            rows.extend_from_slice(&targets[i]);
        }
        let t = tape.constant(Tensor::new(vec![batch.indices.len(), classes], rows)?);
        let hard = match config.hard_labels {
            HardLabelSource::Teacher => HardLabels::TeacherArgmax,
            HardLabelSource::GroundTruth => HardLabels::GroundTruth(&batch.labels),
        };
        let loss = gd_loss_with(
            tape,
            Logits(t),
            z,
            config.alpha,
            config.lambda,
            config.temperature,
            hard,
        )?;
        Ok((loss, z))
    };
    let mut rng = RngState::derive(config.seed, "step3.batches");
    let outcome = fit(
        model,
        prep,
        config.epochs.hallucination,
        config.lr_hall,
        config,
        &mut rng,
        &objective,
    )?;
    Ok((finish(outcome, prep)?, teacher_metrics))
}

/// Step 4: available stream from Step 2 in slot 1, frozen hallucination
/// network in slot 2, both fed the available modality. Fusion starts from
/// the Step-2 weights rearranged to this slot order.
pub fn step4_finetune_hallucinated(
    prep: &PreparedData,
    two: &Trained,
    hall: &Trained,
    config: &DistillationConfig,
) -> Result<Trained> {
    config.validate()?;
    let net = two_stream(&two.model)?;
    let Model::Single {
        net: hall_net,
        input: available,
    } = &hall.model
    else {
        return Err(Error::CheckpointMismatch(
            "hallucination network must be a single stream".into(),
        ));
    };
    let available = *available;
    let missing = available.other();
    let slot_of = |m: Modality| {
        net.inputs
            .iter()
            .position(|&x| x == m)
            .ok_or(Error::MissingModality(m.number()))
    };
    let (a_slot, m_slot) = (slot_of(available)?, slot_of(missing)?);
    let mut stream = net.streams[a_slot].clone();
    let mut hall_net = hall_net.clone();
    if hall_net.num_classes() != net.num_classes() {
        return Err(Error::CheckpointMismatch("class counts differ".into()));
    }

    let c = net.num_classes();
    let w = &net.fusion.w.value;
    let mut fw = Tensor::zeros(&[c, 2 * c]);
    for r in 0..c {
        for k in 0..c {
            fw.data_mut()[r * 2 * c + k] = w.data()[r * 2 * c + a_slot * c + k];
            fw.data_mut()[r * 2 * c + c + k] = w.data()[r * 2 * c + m_slot * c + k];
        }
    }
    let mut fusion = FusionLayer::with_weights(fw, config.gamma);
    hall_net.set_frozen(true);
    stream.set_frozen(config.finetune == FinetuneMode::FusionOnly);
    fusion.set_frozen(false);
    let model = Model::TwoStream(TwoStreamNet::with_inputs(
        stream,
        hall_net,
        [available, available],
        fusion,
    )?);
    let mut rng = RngState::derive(config.seed, "step4.batches");
    let objective = supervised(true);
    let outcome = fit(
        model,
        prep,
        config.epochs.finetune,
        config.lr_two_stream,
        config,
        &mut rng,
        &objective,
    )?;
    finish(outcome, prep)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Overall and per-class accuracy of `model` on `indices`, feeding it
/// exactly the modalities it consumes.
pub fn evaluate(model: &Model, data: &MultimodalDataset, indices: &[usize]) -> Result<Metrics> {
    evaluate_with(model, data, indices, &model.required_modalities())
}

/// Like [`evaluate`], but feeds only the `available` modalities. A model
/// needing a modality outside that set fails with a missing-modality
/// error; one handed a modality it does not consume fails as well.
pub fn evaluate_with(
    model: &Model,
    data: &MultimodalDataset,
    indices: &[usize],
    available: &[Modality],
) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let classes = data.num_classes();
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for chunk in indices.chunks(256) {
        let batch = make_batch(data, chunk, available)?;
        let mut tape = Tape::new();
        let inputs = feed(&mut tape, &batch);
        let z = model.forward(&mut tape, &inputs)?;
        for (p, &l) in predict(tape.value(z.0)).into_iter().zip(&batch.labels) {
            totals[l] += 1;
            if p == l {
                hits[l] += 1;
            }
        }
    }
    Ok(metrics_from_counts(&hits, &totals))
}

/// Builds [`Metrics`] from per-class hit and total counts.
pub fn metrics_from_counts(hits: &[usize], totals: &[usize]) -> Metrics {
    let correct: usize = hits.iter().sum();
    let total: usize = totals.iter().sum();
    let present = || totals.iter().enumerate().filter(|(_, &t)| t > 0);
    Metrics {
        overall_accuracy: if total == 0 {
            0.0
        } else {
            100.0 * correct as f64 / total as f64
        },
        class_wise_accuracy: present()
            .map(|(c, &t)| (c, 100.0 * hits[c] as f64 / t as f64))
            .collect(),
        class_counts: present().map(|(c, &t)| (c, [hits[c], t])).collect(),
        correct,
        total,
        curve: Vec::new(),
    }
}

/// Renders `network,class,accuracy` rows, an `overall` row first for each
/// network.
pub fn metrics_csv(rows: &[(&str, &Metrics)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["network", "class", "accuracy"])?;
    for &(name, m) in rows {
        w.write_record([name, "overall", m.overall_accuracy.to_string().as_str()])?;
        for (c, acc) in &m.class_wise_accuracy {
            w.write_record([name, c.to_string().as_str(), acc.to_string().as_str()])?;
        }
    }
    w.into_inner().map_err(|e| Error::Dataset(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, rows: &[(&str, &Metrics)]) -> Result<()> {
    write_atomic(path, &metrics_csv(rows)?)
}

// ---------------------------------------------------------------------------
// Full run

/// Steps 1 and 2, which do not depend on the missing modality or on the
/// distillation hyperparameters.
#[derive(Clone, Debug)]
pub struct JointStage {
    pub individual: [Trained; 2],
    pub two_stream: Trained,
}

pub fn train_joint(
    prep: &PreparedData,
    specs: &[Vec<LayerSpec>; 2],
    config: &DistillationConfig,
) -> Result<JointStage> {
    let individual = step1_train_individual(prep, specs, config)?;
    let two_stream = step2_train_two_stream(prep, &individual, config)?;
    Ok(JointStage {
        individual,
        two_stream,
    })
}

/// Everything a full run produces.
#[derive(Clone, Debug)]
pub struct PipelineArtifacts {
    pub config: DistillationConfig,
    pub missing: Modality,
    pub joint: JointStage,
    pub hall_net: Trained,
    pub teacher: Metrics,
    pub hallucinated: Trained,
    pub split: SplitIndices,
    pub norm: NormStats,
}

impl PipelineArtifacts {
    pub fn network(&self, name: NetworkName) -> &Trained {
        match name {
            NetworkName::Stream1 => &self.joint.individual[0],
            NetworkName::Stream2 => &self.joint.individual[1],
            NetworkName::TwoStream => &self.joint.two_stream,
            NetworkName::HallNet => &self.hall_net,
            NetworkName::HallucinatedTwoStream => &self.hallucinated,
        }
    }

    pub fn accuracy(&self, name: NetworkName) -> f64 {
        self.network(name).metrics.overall_accuracy
    }

    /// Step-1 stream of the modality that stays available at test time.
    pub fn available_stream(&self) -> &Trained {
        &self.joint.individual[self.missing.other().index()]
    }

    /// Writes checkpoints, `metrics.csv`, `curves.csv`, `norm.json` and
    /// `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut checkpoints = BTreeMap::new();
        for name in NetworkName::ALL {
            let rel = PathBuf::from("checkpoints").join(format!("{}.hnck", name.as_str()));
            checkpoint::save_model(&dir.join(&rel), &self.network(name).model)?;
            checkpoints.insert(name, rel);
        }
        write_atomic(&dir.join("metrics.csv"), &self.metrics_csv()?)?;
        write_atomic(&dir.join("curves.csv"), &self.curves_csv()?)?;
        write_atomic(&dir.join("norm.json"), &serde_json::to_vec_pretty(&self.norm)?)?;
        write_atomic(&dir.join("summary.json"), &self.summary_json(&checkpoints)?)
    }

    fn rows(&self) -> Vec<(&'static str, &Metrics)> {
        let mut rows: Vec<_> = NetworkName::ALL
            .iter()
            .map(|&n| (n.as_str(), &self.network(n).metrics))
            .collect();
        rows.push(("teacher", &self.teacher));
        rows
    }

    /// `network,class,accuracy` with an `overall` row per network.
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        metrics_csv(&self.rows())
    }

    /// Per-epoch training curves of every network.
    pub fn curves_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "network",
            "epoch",
            "train_loss",
            "train_accuracy",
            "val_loss",
            "val_accuracy",
        ])?;
        for name in NetworkName::ALL {
            for e in &self.network(name).metrics.curve {
                w.write_record([
                    name.as_str().to_string(),
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    e.train_accuracy.to_string(),
                    e.val_loss.to_string(),
                    e.val_accuracy.to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Dataset(e.to_string()))
    }

    fn summary_json(&self, checkpoints: &BTreeMap<NetworkName, PathBuf>) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct NetworkSummary<'a> {
            checkpoint: &'a Path,
            best_epoch: usize,
            metrics: &'a Metrics,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a DistillationConfig,
            missing_modality: Modality,
            split_sizes: [usize; 3],
            networks: BTreeMap<&'static str, NetworkSummary<'a>>,
            teacher: &'a Metrics,
        }
        let networks = NetworkName::ALL
            .iter()
            .map(|&n| {
                let t = self.network(n);
                (
                    n.as_str(),
                    NetworkSummary {
                        checkpoint: &checkpoints[&n],
                        best_epoch: t.best_epoch,
                        metrics: &t.metrics,
                    },
                )
            })
            .collect();
        let summary = Summary {
            config: &self.config,
            missing_modality: self.missing,
            split_sizes: [
                self.split.train.len(),
                self.split.validation.len(),
                self.split.test.len(),
            ],
            networks,
            teacher: &self.teacher,
        };
        Ok(serde_json::to_vec_pretty(&summary)?)
    }
}

/// Steps 3 and 4 on top of an existing joint stage.
pub fn run_distillation(
    prep: &PreparedData,
    joint: JointStage,
    config: &DistillationConfig,
    missing: Modality,
    hall_spec: Option<&[LayerSpec]>,
) -> Result<PipelineArtifacts> {
    let (hall_net, teacher) = step3_with_spec(prep, &joint.two_stream, missing, config, hall_spec)?;
    let hallucinated = step4_finetune_hallucinated(prep, &joint.two_stream, &hall_net, config)?;
    Ok(PipelineArtifacts {
        config: config.clone(),
        missing,
        joint,
        hall_net,
        teacher,
        hallucinated,
        split: prep.split.clone(),
        norm: prep.norm.clone(),
    })
}

/// Splits, normalizes and runs Steps 1 through 4.
pub fn run_full_pipeline(
    dataset: MultimodalDataset,
    config: &DistillationConfig,
    missing: Modality,
    specs: &[Vec<LayerSpec>; 2],
) -> Result<PipelineArtifacts> {
    let prep = prepare(dataset, config)?;
    let joint = train_joint(&prep, specs, config)?;
    run_distillation(&prep, joint, config, missing, None)
}
