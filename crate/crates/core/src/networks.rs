//! Single-modality streams, the learned late-fusion layer and the composed
//! two-stream classifiers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::Logits;
use crate::rng::RngState;
use crate::tensor::{argmax_rows, conv_output_size, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Modality {
    First,
    Second,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::First => 0,
            Modality::Second => 1,
        }
    }

    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::First => Modality::Second,
            Modality::Second => Modality::First,
        }
    }

    pub const BOTH: [Modality; 2] = [Modality::First, Modality::Second];
}

impl TryFrom<u32> for Modality {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Modality::First),
            2 => Ok(Modality::Second),
            other => Err(Error::InvalidModality(other)),
        }
    }
}

impl From<Modality> for u32 {
    fn from(m: Modality) -> u32 {
        m.number() as u32
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    Dense {
        width: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn conv(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            channels,
            kernel,
            stride,
            padding,
            activation: Activation::Relu,
        }
    }

    pub fn dense(width: usize) -> Self {
        LayerSpec::Dense {
            width,
            activation: Activation::Relu,
        }
    }

    /// Final classification layer: dense, no activation.
    pub fn logits(classes: usize) -> Self {
        LayerSpec::Dense {
            width: classes,
            activation: Activation::None,
        }
    }

    fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Conv { activation, .. } | LayerSpec::Dense { activation, .. } => activation,
        }
    }
}

/// Four 3×3/stride-2 convolutions and four dense layers (panchromatic stream).
pub fn pan_net_spec(classes: usize) -> Vec<LayerSpec> {
    let mut spec: Vec<_> = [8, 16, 32, 32]
        .iter()
        .map(|&c| LayerSpec::conv(c, 3, 2, 1))
        .collect();
    spec.extend([256, 128, 64].iter().map(|&w| LayerSpec::dense(w)));
    spec.push(LayerSpec::logits(classes));
    spec
}

/// Three 3×3/stride-2 convolutions and three dense layers (multi-spectral stream).
pub fn ms_net_spec(classes: usize) -> Vec<LayerSpec> {
    let mut spec: Vec<_> = [16, 32, 32]
        .iter()
        .map(|&c| LayerSpec::conv(c, 3, 2, 1))
        .collect();
    spec.extend([128, 64].iter().map(|&w| LayerSpec::dense(w)));
    spec.push(LayerSpec::logits(classes));
    spec
}

/// Three dense layers, for spectral vectors.
pub fn vector_stream_spec(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(64),
        LayerSpec::dense(32),
        LayerSpec::logits(classes),
    ]
}

/// Removes `steps` convolution layers and `steps` hidden dense layers,
/// always from the end of each block. The logits layer is kept.
pub fn reduce_depth(spec: &[LayerSpec], steps: usize) -> Result<Vec<LayerSpec>> {
    let mut out = spec.to_vec();
    for step in 0..steps {
        let mut removed = false;
        if let Some(i) = out.iter().rposition(|l| matches!(l, LayerSpec::Conv { .. })) {
            out.remove(i);
            removed = true;
        }
        let hidden = out.len().saturating_sub(1);
        if let Some(i) = out[..hidden]
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
        {
            out.remove(i);
            removed = true;
        }
        if !removed {
            return Err(Error::config(
                "depth",
                format!(
                    "only {step} reductions possible for a {}-layer stream",
                    spec.len()
                ),
            ));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    weight: Parameter,
    bias: Parameter,
}

/// One modality's classifier: a stack of conv and dense layers ending in
/// `num_classes` logits.
#[derive(Clone, Debug)]
pub struct StreamNet {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Builds a stream and initializes its parameters from `rng`.
pub fn build_stream(
    spec: &[LayerSpec],
    input_shape: &[usize],
    num_classes: usize,
    rng: &mut RngState,
) -> Result<StreamNet> {
    if spec.is_empty() {
        return Err(Error::LayerChain {
            index: 0,
            reason: "empty layer list".into(),
        });
    }
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::InputShape {
            expected: vec![],
            got: input_shape.to_vec(),
        });
    }
    let mut shape = input_shape.to_vec();
    let mut seen_dense = false;
    let mut layers = Vec::with_capacity(spec.len());
    for (index, layer) in spec.iter().enumerate() {
        let chain = |reason: String| Error::LayerChain { index, reason };
        let (wshape, bshape, fan_in, next) = match *layer {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if seen_dense {
                    return Err(chain("convolution after a dense layer".into()));
                }
                let &[c, h, w] = shape.as_slice() else {
                    return Err(chain(format!("convolution needs c×h×w input, got {shape:?}")));
                };
                if channels == 0 || kernel == 0 || stride == 0 {
                    return Err(chain("channels, kernel and stride must be positive".into()));
                }
                let (oh, ow) = conv_output_size(h, w, kernel, kernel, stride, padding)
                    .map_err(|e| chain(e.to_string()))?;
                (
                    vec![channels, c, kernel, kernel],
                    vec![channels],
                    c * kernel * kernel,
                    vec![channels, oh, ow],
                )
            }
            LayerSpec::Dense { width, .. } => {
                if width == 0 {
                    return Err(chain("dense width must be positive".into()));
                }
                seen_dense = true;
                let fan_in: usize = shape.iter().product();
                (vec![fan_in, width], vec![width], fan_in, vec![width])
            }
        };
        layers.push(Layer {
            spec: layer.clone(),
            weight: Parameter::new(format!("layer{index}.weight"), he_uniform(&wshape, fan_in, rng)),
            bias: Parameter::new(format!("layer{index}.bias"), Tensor::zeros(&bshape)),
        });
        shape = next;
    }
    let last = spec.len() - 1;
    match spec[last] {
        LayerSpec::Dense { width, .. } if width == num_classes => {}
        _ => {
            return Err(Error::LayerChain {
                index: last,
                reason: format!("final layer must be dense with width {num_classes}"),
            })
        }
    }
    Ok(StreamNet {
        layers,
        input_shape: input_shape.to_vec(),
        num_classes,
    })
}

impl StreamNet {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().all(|p| p.frozen)
    }

    /// Forward pass over a batch `x: batch × input_shape`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Logits> {
        let shape = tape.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::InputShape {
                expected,
                got: shape.to_vec(),
            });
        }
        let mut h = x;
        let mut flat = self.input_shape.len() == 1;
        for layer in &self.layers {
            let w = tape.param(&layer.weight);
            let b = tape.param(&layer.bias);
            h = match layer.spec {
                LayerSpec::Conv { stride, padding, .. } => {
                    let c = tape.conv2d(h, w, stride, padding)?;
                    tape.add_channel_bias(c, b)?
                }
                LayerSpec::Dense { .. } => {
                    if !flat {
                        h = tape.flatten(h)?;
                        flat = true;
                    }
                    let z = tape.matmul(h, w)?;
                    tape.add_row_bias(z, b)?
                }
            };
            if layer.spec.activation() == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(Logits(h))
    }

    /// Convenience forward pass on a throwaway tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out.0).clone())
    }
}

/// Learned late fusion: `w · concat(p₁, p₂)` with `w: C × 2C`.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub w: Parameter,
    pub gamma: f32,
}

impl FusionLayer {
    /// Starts from `[I | I]`, the plain sum of both streams' probabilities.
    pub fn new(classes: usize, gamma: f32) -> Self {
        let mut w = Tensor::zeros(&[classes, 2 * classes]);
        for c in 0..classes {
            w.data_mut()[c * 2 * classes + c] = 1.0;
            w.data_mut()[c * 2 * classes + classes + c] = 1.0;
        }
        Self::with_weights(w, gamma)
    }

    pub fn with_weights(w: Tensor, gamma: f32) -> Self {
        FusionLayer {
            w: Parameter::new("fusion.w", w),
            gamma,
        }
    }

    pub fn classes(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn fuse(&self, tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
        let c = self.classes();
        for p in [p1, p2] {
            if tape.shape(p).len() != 2 || tape.shape(p)[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "fuse",
                    left: tape.shape(p).to_vec(),
                    right: self.w.value.shape().to_vec(),
                });
            }
        }
        let p = tape.concat_cols(p1, p2)?;
        let w = tape.param(&self.w);
        let wt = tape.transpose(w)?;
        tape.matmul(p, wt)
    }

    /// `γ · Σ w²`.
    pub fn regularizer(&self, tape: &mut Tape) -> Var {
        let w = tape.param(&self.w);
        let sq = tape.square(w);
        let s = tape.sum(sq);
        tape.scale(s, self.gamma)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.w.frozen = frozen;
    }
}

/// Per-modality batch inputs for a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModalInputs {
    pub first: Option<Var>,
    pub second: Option<Var>,
}

impl ModalInputs {
    pub fn get(&self, m: Modality) -> Option<Var> {
        match m {
            Modality::First => self.first,
            Modality::Second => self.second,
        }
    }

    pub fn provided(&self) -> Vec<Modality> {
        Modality::BOTH
            .into_iter()
            .filter(|&m| self.get(m).is_some())
            .collect()
    }
}

/// Two streams joined by a [`FusionLayer`]. `inputs[i]` names the data
/// modality stream `i` consumes; a hallucinated network feeds the same
/// modality to both.
#[derive(Clone, Debug)]
pub struct TwoStreamNet {
    pub streams: [StreamNet; 2],
    pub inputs: [Modality; 2],
    pub fusion: FusionLayer,
}

impl TwoStreamNet {
    pub fn new(stream1: StreamNet, stream2: StreamNet, fusion: FusionLayer) -> Result<Self> {
        Self::with_inputs(stream1, stream2, [Modality::First, Modality::Second], fusion)
    }

    pub fn with_inputs(
        stream1: StreamNet,
        stream2: StreamNet,
        inputs: [Modality; 2],
        fusion: FusionLayer,
    ) -> Result<Self> {
        let c = fusion.classes();
        if stream1.num_classes != c || stream2.num_classes != c {
            return Err(Error::ShapeMismatch {
                op: "two_stream",
                left: vec![stream1.num_classes, stream2.num_classes],
                right: fusion.w.value.shape().to_vec(),
            });
        }
        Ok(TwoStreamNet {
            streams: [stream1, stream2],
            inputs,
            fusion,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.fusion.classes()
    }

    /// Softmax each stream, concatenate, fuse. The fused scores act as logits.
    pub fn forward(&self, tape: &mut Tape, inputs: &ModalInputs) -> Result<Logits> {
        let mut probs = [None, None];
        for (slot, stream) in self.streams.iter().enumerate() {
            let m = self.inputs[slot];
            let x = inputs.get(m).ok_or(Error::MissingModality(m.number()))?;
            let z = stream.forward(tape, x)?;
            probs[slot] = Some(tape.softmax(z.0, 1.0)?);
        }
        let fused = self.fusion.fuse(tape, probs[0].unwrap(), probs[1].unwrap())?;
        Ok(Logits(fused))
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.streams[0]
            .params()
            .chain(self.streams[1].params())
            .chain(std::iter::once(&self.fusion.w))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        let [s1, s2] = &mut self.streams;
        s1.params_mut()
            .chain(s2.params_mut())
            .chain(std::iter::once(&mut self.fusion.w))
    }
}

/// Per-row argmax of logits; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    argmax_rows(logits)
}

/// A deployable classifier: one stream on one modality, or a fused pair.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Single { net: StreamNet, input: Modality },
    TwoStream(TwoStreamNet),
}

impl Model {
    /// Modalities the model consumes, deduplicated and ordered.
    pub fn required_modalities(&self) -> Vec<Modality> {
        match self {
            Model::Single { input, .. } => vec![*input],
            Model::TwoStream(net) => {
                let mut v = net.inputs.to_vec();
                v.sort();
                v.dedup();
                v
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::Single { net, .. } => net.num_classes(),
            Model::TwoStream(net) => net.num_classes(),
        }
    }

    /// Forward pass. Inputs must cover exactly the required modalities.
    pub fn forward(&self, tape: &mut Tape, inputs: &ModalInputs) -> Result<Logits> {
        let required = self.required_modalities();
        for m in Modality::BOTH {
            match (required.contains(&m), inputs.get(m).is_some()) {
                (true, false) => return Err(Error::MissingModality(m.number())),
                (false, true) => return Err(Error::UnexpectedModality(m.number())),
                _ => {}
            }
        }
        match self {
            Model::Single { net, input } => net.forward(tape, inputs.get(*input).unwrap()),
            Model::TwoStream(net) => net.forward(tape, inputs),
        }
    }

    /// Checkpoint records: an input descriptor followed by every parameter.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match self {
            Model::Single { net, input } => {
                out.push((
                    META_INPUTS.to_string(),
                    Tensor::from_vec(vec![input.number() as f32]),
                ));
                out.extend(net.params().map(|p| (p.name.clone(), p.value.clone())));
            }
            Model::TwoStream(net) => {
                let ins = net.inputs.iter().map(|m| m.number() as f32).collect();
                out.push((META_INPUTS.to_string(), Tensor::from_vec(ins)));
                for (slot, s) in net.streams.iter().enumerate() {
                    out.extend(
                        s.params()
                            .map(|p| (format!("stream{}.{}", slot + 1, p.name), p.value.clone())),
                    );
                }
                out.push((net.fusion.w.name.clone(), net.fusion.w.value.clone()));
            }
        }
        out
    }

    /// Reads the input descriptor of a set of checkpoint records.
    pub fn inputs_from_records(records: &[(String, Tensor)]) -> Result<Vec<Modality>> {
        let (_, t) = records
            .iter()
            .find(|(n, _)| n == META_INPUTS)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{META_INPUTS}` record")))?;
        t.data().iter().map(|&v| Modality::try_from(v as u32)).collect()
    }

    /// Overwrites every parameter from `records`. Names, shapes and the
    /// input descriptor must all match exactly.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let expected = self.to_records();
        if records.len() != expected.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} records, found {}",
                expected.len(),
                records.len()
            )));
        }
        for ((name, value), (ename, evalue)) in records.iter().zip(&expected) {
            if name != ename || value.shape() != evalue.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "record `{name}` {:?} where `{ename}` {:?} was expected",
                    value.shape(),
                    evalue.shape()
                )));
            }
        }
        if records[0].1 != expected[0].1 {
            return Err(Error::CheckpointMismatch(format!(
                "input modalities {:?} differ from {:?}",
                records[0].1.data(),
                expected[0].1.data()
            )));
        }
        let mut values = records[1..].iter().map(|(_, v)| v.clone());
        let params: Vec<&mut Parameter> = match self {
            Model::Single { net, .. } => net.params_mut().collect(),
            Model::TwoStream(net) => net.params_mut().collect(),
        };
        for p in params {
            p.value = values.next().expect("record count checked");
        }
        Ok(())
    }
}

const META_INPUTS: &str = "meta.inputs";

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> RngState {
        RngState::new(3)
    }

    fn zero_weights(net: &mut StreamNet) {
        net.params_mut().for_each(|p| p.value.fill(0.0));
    }

    #[test]
    fn pan_net_on_full_size_input() {
        let net = build_stream(&pan_net_spec(8), &[1, 128, 128], 8, &mut rng()).unwrap();
        let x = Tensor::zeros(&[1, 1, 128, 128]);
        assert_eq!(net.logits(&x).unwrap().shape(), &[1, 8]);
        assert_eq!(net.depth(), 8);
    }

    #[test]
    fn ms_net_on_full_size_input() {
        let net = build_stream(&ms_net_spec(8), &[4, 64, 64], 8, &mut rng()).unwrap();
        let x = Tensor::zeros(&[1, 4, 64, 64]);
        assert_eq!(net.logits(&x).unwrap().shape(), &[1, 8]);
        assert_eq!(net.depth(), 6);
    }

    #[test]
    fn vector_stream_on_band_subset() {
        let net = build_stream(&vector_stream_spec(9), &[52], 9, &mut rng()).unwrap();
        let x = Tensor::zeros(&[5, 52]);
        assert_eq!(net.logits(&x).unwrap().shape(), &[5, 9]);
    }

    #[test]
    fn conv_after_dense_rejected() {
        let spec = vec![
            LayerSpec::dense(4),
            LayerSpec::conv(2, 3, 1, 1),
            LayerSpec::logits(2),
        ];
        let err = build_stream(&spec, &[1, 8, 8], 2, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::LayerChain { index: 1, .. }), "{err}");
    }

    #[test]
    fn final_width_must_match_classes() {
        let spec = vec![LayerSpec::dense(4), LayerSpec::logits(3)];
        let err = build_stream(&spec, &[6], 4, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::LayerChain { index: 1, .. }));
    }

    #[test]
    fn oversized_kernel_names_layer() {
        let spec = vec![
            LayerSpec::conv(2, 3, 2, 1),
            LayerSpec::conv(2, 5, 1, 0),
            LayerSpec::logits(2),
        ];
        let err = build_stream(&spec, &[1, 4, 4], 2, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::LayerChain { index: 1, .. }), "{err}");
    }

    #[test]
    fn deterministic_init() {
        let a = build_stream(&vector_stream_spec(3), &[5], 3, &mut RngState::new(9)).unwrap();
        let b = build_stream(&vector_stream_spec(3), &[5], 3, &mut RngState::new(9)).unwrap();
        for (p, q) in a.params().zip(b.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn zero_weight_net_gives_zero_logits() {
        let mut net = build_stream(&vector_stream_spec(3), &[5], 3, &mut rng()).unwrap();
        zero_weights(&mut net);
        let x = Tensor::ones(&[4, 5]);
        let z = net.logits(&x).unwrap();
        assert_eq!(z.shape(), &[4, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_checks_input_shape() {
        let net = build_stream(&vector_stream_spec(3), &[5], 3, &mut rng()).unwrap();
        assert!(matches!(
            net.logits(&Tensor::ones(&[2, 6])),
            Err(Error::InputShape { .. })
        ));
    }

    #[test]
    fn forward_is_pure() {
        let net = build_stream(&vector_stream_spec(3), &[5], 3, &mut rng()).unwrap();
        let x = Tensor::new(vec![2, 5], (0..10).map(|v| v as f32 * 0.1).collect()).unwrap();
        assert_eq!(net.logits(&x).unwrap(), net.logits(&x).unwrap());
    }

    fn fuse_values(w: Tensor, p1: &[f32], p2: &[f32]) -> Vec<f32> {
        let fusion = FusionLayer::with_weights(w, 0.0);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, p1.len()], p1.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![1, p2.len()], p2.to_vec()).unwrap());
        let out = fusion.fuse(&mut tape, a, b).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn fusion_selectors() {
        let sel = Tensor::from_rows(&[&[1., 0., 0., 0.], &[0., 1., 0., 0.]]).unwrap();
        assert_eq!(fuse_values(sel, &[0.3, 0.7], &[0.9, 0.1]), vec![0.3, 0.7]);

        let mean = Tensor::from_rows(&[&[0.5, 0., 0.5, 0.], &[0., 0.5, 0., 0.5]]).unwrap();
        let out = fuse_values(mean, &[0.2, 0.8], &[0.6, 0.4]);
        assert!((out[0] - 0.4).abs() < 1e-6 && (out[1] - 0.6).abs() < 1e-6);

        let sum = FusionLayer::new(2, 0.0).w.value;
        assert_eq!(fuse_values(sum, &[1.0, 0.0], &[0.0, 1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn fusion_shape_mismatch() {
        let fusion = FusionLayer::new(3, 0.0);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[1, 2]));
        let b = tape.constant(Tensor::ones(&[1, 2]));
        assert!(fusion.fuse(&mut tape, a, b).is_err());
    }

    #[test]
    fn predict_ties_and_shift() {
        let z = Tensor::from_rows(&[&[0.1, 2.0, -1.0], &[1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(predict(&z), vec![1, 0]);
        assert_eq!(predict(&z.map(|v| v + 7.5)), vec![1, 0]);
    }

    #[test]
    fn selector_two_stream_reduces_to_stream_softmax() {
        let s = build_stream(&vector_stream_spec(3), &[4], 3, &mut rng()).unwrap();
        let mut w = Tensor::zeros(&[3, 6]);
        for c in 0..3 {
            w.data_mut()[c * 6 + c] = 1.0;
        }
        let net = TwoStreamNet::new(s.clone(), s.clone(), FusionLayer::with_weights(w, 0.0)).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.5, 1.0, 0.0, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let inputs = ModalInputs {
            first: Some(xv),
            second: Some(xv),
        };
        let fused = net.forward(&mut tape, &inputs).unwrap();
        let expected = crate::tensor::tempered_softmax(&s.logits(&x).unwrap(), 1.0).unwrap();
        for (a, b) in tape.value(fused.0).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn model_rejects_wrong_modalities() {
        let s = build_stream(&vector_stream_spec(2), &[3], 2, &mut rng()).unwrap();
        let hall = TwoStreamNet::with_inputs(
            s.clone(),
            s.clone(),
            [Modality::First, Modality::First],
            FusionLayer::new(2, 0.0),
        )
        .unwrap();
        let model = Model::TwoStream(hall);
        assert_eq!(model.required_modalities(), vec![Modality::First]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3]));
        let both = ModalInputs {
            first: Some(x),
            second: Some(x),
        };
        assert!(matches!(
            model.forward(&mut tape, &both),
            Err(Error::UnexpectedModality(2))
        ));
        let only_first = ModalInputs {
            first: Some(x),
            second: None,
        };
        assert!(model.forward(&mut tape, &only_first).is_ok());

        let full = Model::TwoStream(TwoStreamNet::new(s.clone(), s, FusionLayer::new(2, 0.0)).unwrap());
        assert!(matches!(
            full.forward(&mut tape, &only_first),
            Err(Error::MissingModality(2))
        ));
    }

    #[test]
    fn reduce_depth_removes_conv_and_dense() {
        let reduced = reduce_depth(&pan_net_spec(8), 1).unwrap();
        let convs = reduced
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        assert_eq!(convs, 3);
        assert_eq!(reduced.len(), 6);
        assert_eq!(reduced.last(), Some(&LayerSpec::logits(8)));

        let dense = reduce_depth(&vector_stream_spec(4), 1).unwrap();
        assert_eq!(dense, vec![LayerSpec::dense(64), LayerSpec::logits(4)]);
        assert!(reduce_depth(&vector_stream_spec(4), 3).is_err());
    }

    #[test]
    fn records_round_trip_and_reject_mismatch() {
        let s = build_stream(&vector_stream_spec(2), &[3], 2, &mut RngState::new(1)).unwrap();
        let model = Model::Single {
            net: s,
            input: Modality::Second,
        };
        let records = model.to_records();
        let mut fresh = Model::Single {
            net: build_stream(&vector_stream_spec(2), &[3], 2, &mut RngState::new(2)).unwrap(),
            input: Modality::Second,
        };
        fresh.load_records(&records).unwrap();
        assert_eq!(fresh.to_records(), records);

        let mut wrong_input = Model::Single {
            net: build_stream(&vector_stream_spec(2), &[3], 2, &mut RngState::new(2)).unwrap(),
            input: Modality::First,
        };
        assert!(wrong_input.load_records(&records).is_err());
        let mut wrong_arch = Model::Single {
            net: build_stream(&vector_stream_spec(2), &[4], 2, &mut RngState::new(2)).unwrap(),
            input: Modality::Second,
        };
        assert!(matches!(
            wrong_arch.load_records(&records),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
