//! The model `f = g ∘ h`: a wide-first-kernel 1-D CNN feature extractor
//! followed by either a prototypical head or a traditional softmax head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor, Var};

/// Samples per input window.
pub const WINDOW_LEN: usize = 2048;
/// Width of the extractor output.
pub const FEATURE_DIM: usize = 100;
/// Default dimension of the prototype space.
pub const PROTO_DIM: usize = 5;
/// One learned prototype per class.
pub const PROTOTYPES_PER_CLASS: usize = 1;
/// Dropout rate in front of both heads.
pub const DROPOUT_RATE: f64 = 0.5;
/// Standard deviation of the initial prototype entries.
pub const PROTOTYPE_INIT_STD: f64 = 0.1;

pub const POOL_WINDOW: usize = 2;
pub const POOL_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Conv-ReLU layers of the extractor; each is followed by a 2/2 max-pool.
pub const EXTRACTOR_CONVS: [ConvLayer; 5] = [
    ConvLayer { out_channels: 16, kernel: 64, stride: 1 },
    ConvLayer { out_channels: 32, kernel: 3, stride: 1 },
    ConvLayer { out_channels: 64, kernel: 2, stride: 1 },
    ConvLayer { out_channels: 64, kernel: 3, stride: 1 },
    ConvLayer { out_channels: 64, kernel: 3, stride: 1 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Prototypical,
    Traditional,
}

/// Everything that fixes the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub head: HeadKind,
    pub classes: usize,
    pub proto_dim: usize,
}

impl Architecture {
    pub fn prototypical(classes: usize) -> Self {
        Architecture {
            head: HeadKind::Prototypical,
            classes,
            proto_dim: PROTO_DIM,
        }
    }

    pub fn traditional(classes: usize) -> Self {
        Architecture {
            head: HeadKind::Traditional,
            classes,
            proto_dim: PROTO_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.proto_dim == 0 {
            return Err(Error::config("prototype dimension must be positive"));
        }
        Ok(())
    }

    /// Sequence lengths after every conv and pool layer for a single-channel
    /// input of `len` samples.
    pub fn length_chain(len: usize) -> Result<Vec<usize>> {
        let mut chain = Vec::with_capacity(2 * EXTRACTOR_CONVS.len());
        let mut cur = len;
        for layer in EXTRACTOR_CONVS {
            if layer.kernel > cur {
                return Err(Error::dim(format!("kernel {} exceeds length {cur}", layer.kernel)));
            }
            cur = (cur - layer.kernel) / layer.stride + 1;
            chain.push(cur);
            if POOL_WINDOW > cur {
                return Err(Error::dim(format!("pool window exceeds length {cur}")));
            }
            cur = (cur - POOL_WINDOW) / POOL_STRIDE + 1;
            chain.push(cur);
        }
        Ok(chain)
    }

    /// Length of the flattened extractor output fed to the final dense layer.
    pub fn flat_dim() -> usize {
        let last = *Self::length_chain(WINDOW_LEN)
            .expect("window fits the extractor")
            .last()
            .expect("non-empty chain");
        last * EXTRACTOR_CONVS[EXTRACTOR_CONVS.len() - 1].out_channels
    }

    fn head_out(&self) -> usize {
        match self.head {
            HeadKind::Prototypical => self.proto_dim,
            HeadKind::Traditional => self.classes,
        }
    }

    /// Shapes of every trainable tensor in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut in_channels = 1;
        for layer in EXTRACTOR_CONVS {
            shapes.push(vec![layer.out_channels, in_channels, layer.kernel]);
            shapes.push(vec![layer.out_channels]);
            in_channels = layer.out_channels;
        }
        shapes.push(vec![FEATURE_DIM, Self::flat_dim()]);
        shapes.push(vec![FEATURE_DIM]);
        shapes.push(vec![self.head_out(), FEATURE_DIM]);
        shapes.push(vec![self.head_out()]);
        if self.head == HeadKind::Prototypical {
            shapes.push(vec![self.classes * PROTOTYPES_PER_CLASS, self.proto_dim]);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Tensor count of the extractor (5 conv layers and the dense layer, each
/// with weight and bias).
pub const EXTRACTOR_TENSORS: usize = 2 * EXTRACTOR_CONVS.len() + 2;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    /// `(kernels [C_out, C_in, K], bias [C_out])` per conv layer.
    pub convs: Vec<(Tensor, Tensor)>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

/// Dropout, a dense map to the prototype space, and the prototype matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypicalHead {
    pub weight: Tensor,
    pub bias: Tensor,
    /// `[N, p]`, one row per class.
    pub prototypes: Tensor,
}

/// Dropout, a dense map to `N` logits, and softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct TraditionalHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Prototypical(PrototypicalHead),
    Traditional(TraditionalHead),
}

/// All trainable weights of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub extractor: FeatureExtractor,
    pub head: Head,
}

impl ModelParams {
    /// He-normal weights, zero biases, small Gaussian prototypes.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let len: usize = shape.iter().product();
                let std = if is_prototype_slot(&arch, i) {
                    PROTOTYPE_INIT_STD
                } else if shape.len() == 1 {
                    0.0
                } else {
                    (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt()
                };
                let data = if std == 0.0 {
                    vec![0.0; len]
                } else {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..len).map(|_| normal.sample(rng)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(arch, tensors)
    }

    /// Every weight, bias and prototype set to zero.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self::from_tensors(arch, tensors)
    }

    /// Rebuilds a model from tensors in declaration order.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::dim(format!(
                    "parameter {i}: expected shape {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let convs = (0..EXTRACTOR_CONVS.len()).map(|_| (next(), next())).collect();
        let extractor = FeatureExtractor {
            convs,
            fc_weight: next(),
            fc_bias: next(),
        };
        let (weight, bias) = (next(), next());
        let head = match arch.head {
            HeadKind::Prototypical => Head::Prototypical(PrototypicalHead {
                weight,
                bias,
                prototypes: next(),
            }),
            HeadKind::Traditional => Head::Traditional(TraditionalHead { weight, bias }),
        };
        Ok(ModelParams {
            arch,
            extractor,
            head,
        })
    }

    pub fn class_count(&self) -> usize {
        self.arch.classes
    }

    /// Parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(EXTRACTOR_TENSORS + 3);
        for (w, b) in &self.extractor.convs {
            out.push(w);
            out.push(b);
        }
        out.push(&self.extractor.fc_weight);
        out.push(&self.extractor.fc_bias);
        match &self.head {
            Head::Prototypical(h) => out.extend([&h.weight, &h.bias, &h.prototypes]),
            Head::Traditional(h) => out.extend([&h.weight, &h.bias]),
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(EXTRACTOR_TENSORS + 3);
        for (w, b) in &mut self.extractor.convs {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.extractor.fc_weight);
        out.push(&mut self.extractor.fc_bias);
        match &mut self.head {
            Head::Prototypical(h) => out.extend([&mut h.weight, &mut h.bias, &mut h.prototypes]),
            Head::Traditional(h) => out.extend([&mut h.weight, &mut h.bias]),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn prototypes(&self) -> Option<&Tensor> {
        match &self.head {
            Head::Prototypical(h) => Some(&h.prototypes),
            Head::Traditional(_) => None,
        }
    }

    /// Records every parameter on `tape`; leaves are trainable iff
    /// `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        self.bind_where(tape, |_| trainable)
    }

    /// As [`ModelParams::bind`], with trainability decided per parameter
    /// index.
    pub fn bind_where(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> BoundModel {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), trainable(i)))
            .collect();
        BoundModel {
            arch: self.arch,
            vars,
        }
    }

    /// Eval-mode feature vector `h(x)` for one window.
    pub fn extract_features(&self, window: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = bound.features(&mut tape, window)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Eval-mode class prediction for one window.
    pub fn predict(&self, window: &[f64], gamma_s: f64) -> Result<usize> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        bound.predict(&mut tape, window, gamma_s)
    }
}

fn is_prototype_slot(arch: &Architecture, index: usize) -> bool {
    arch.head == HeadKind::Prototypical && index == EXTRACTOR_TENSORS + 2
}

impl PrototypicalHead {
    /// Maps features to the prototype space; dropout is only active in
    /// train mode.
    pub fn project<R: Rng + ?Sized>(
        &self,
        features: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(features));
        let x = tape.dropout(x, DROPOUT_RATE, mode, rng)?;
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let y = tape.linear(x, w, b)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Index of the nearest prototype, i.e. the argmax of the soft
    /// assignment for any `gamma_s > 0`. Ties go to the lowest index.
    pub fn predict_label(&self, projected: &[f64], gamma_s: f64) -> Result<usize> {
        if gamma_s.is_nan() || gamma_s <= 0.0 {
            return Err(Error::config(format!("gamma_s must be positive, got {gamma_s}")));
        }
        nearest_row(&self.prototypes, projected)
    }
}

/// Index of the row of `matrix` closest to `point` in squared Euclidean
/// distance, lowest index on ties.
pub fn nearest_row(matrix: &Tensor, point: &[f64]) -> Result<usize> {
    let p = point.len();
    if matrix.shape().len() != 2 || matrix.shape()[1] != p {
        return Err(Error::dim(format!(
            "prototypes {:?} do not match point dimension {p}",
            matrix.shape()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for (i, row) in matrix.data().chunks_exact(p).enumerate() {
        let d: f64 = row.iter().zip(point).map(|(c, x)| (x - c) * (x - c)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    arch: Architecture,
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn arch(&self) -> Architecture {
        self.arch
    }

    /// Parameter handles in declaration order.
    pub fn params(&self) -> &[Var] {
        &self.vars
    }

    pub fn prototypes(&self) -> Option<Var> {
        (self.arch.head == HeadKind::Prototypical).then(|| self.vars[EXTRACTOR_TENSORS + 2])
    }

    /// `h(x)`: five conv-ReLU-pool blocks, flatten, dense, sigmoid.
    pub fn features(&self, tape: &mut Tape, window: &[f64]) -> Result<Var> {
        self.features_traced(tape, window, None)
    }

    /// As [`BoundModel::features`], additionally recording the shape of every
    /// intermediate value.
    pub fn features_traced(
        &self,
        tape: &mut Tape,
        window: &[f64],
        mut trace: Option<&mut Vec<Vec<usize>>>,
    ) -> Result<Var> {
        if window.len() != WINDOW_LEN {
            return Err(Error::dim(format!(
                "window must have {WINDOW_LEN} samples, got {}",
                window.len()
            )));
        }
        let mut record = |tape: &Tape, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(tape.value(v).shape().to_vec());
            }
        };
        let mut x = tape.constant(Tensor::new(vec![1, WINDOW_LEN], window.to_vec())?);
        for (i, layer) in EXTRACTOR_CONVS.iter().enumerate() {
            let (w, b) = (self.vars[2 * i], self.vars[2 * i + 1]);
            x = tape.conv1d(x, w, b, layer.stride)?;
            x = tape.relu(x);
            record(tape, x);
            x = tape.maxpool1d(x, POOL_WINDOW, POOL_STRIDE)?;
            record(tape, x);
        }
        let flat = tape.value(x).len();
        x = tape.reshape(x, &[flat])?;
        record(tape, x);
        let fc = 2 * EXTRACTOR_CONVS.len();
        x = tape.linear(x, self.vars[fc], self.vars[fc + 1])?;
        x = tape.sigmoid(x);
        record(tape, x);
        Ok(x)
    }

    /// Head output: the projection `g(h(x))` for a prototypical head, or the
    /// pre-softmax logits for a traditional head.
    pub fn head<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        features: Var,
        dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let x = tape.dropout(features, dropout, mode, rng)?;
        let w = self.vars[EXTRACTOR_TENSORS];
        let b = self.vars[EXTRACTOR_TENSORS + 1];
        match self.arch.head {
            HeadKind::Prototypical => tape.linear(x, w, b),
            // Rows are classes; keep the backward pass independent of their order.
            HeadKind::Traditional => tape.linear_row_invariant(x, w, b),
        }
    }

    /// Eval-mode prediction: nearest prototype, or argmax of the softmax.
    pub fn predict(&self, tape: &mut Tape, window: &[f64], gamma_s: f64) -> Result<usize> {
        let mark = tape.len();
        let f = self.features(tape, window)?;
        let out = self.head(tape, f, DROPOUT_RATE, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let label = match self.prototypes() {
            Some(c) => {
                if gamma_s.is_nan() || gamma_s <= 0.0 {
                    return Err(Error::config(format!("gamma_s must be positive, got {gamma_s}")));
                }
                nearest_row(tape.value(c), tape.value(out).data())?
            }
            None => argmax(tape.value(out).data()),
        };
        tape.truncate(mark);
        Ok(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..WINDOW_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn length_chain_matches_layer_table() {
        assert_eq!(
            Architecture::length_chain(WINDOW_LEN).unwrap(),
            vec![1985, 992, 990, 495, 494, 247, 245, 122, 120, 60]
        );
        assert_eq!(Architecture::flat_dim(), 3840);
    }

    #[test]
    fn zero_model_outputs_half() {
        let model = ModelParams::zeroed(Architecture::prototypical(5)).unwrap();
        let f = model.extract_features(&window(1)).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert!(f.iter().all(|&v| v == 0.5));

        let Head::Prototypical(head) = &model.head else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = head.project(&f, Mode::Eval, &mut rng).unwrap();
        assert_eq!(z, vec![0.0; PROTO_DIM]);
    }

    #[test]
    fn wrong_window_length() {
        let model = ModelParams::zeroed(Architecture::prototypical(3)).unwrap();
        assert!(matches!(
            model.extract_features(&[0.0; 100]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn features_in_unit_interval_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelParams::init(Architecture::prototypical(4), &mut rng).unwrap();
        let w = window(2);
        let a = model.extract_features(&w).unwrap();
        let b = model.extract_features(&w).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn projection_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelParams::init(Architecture::prototypical(4), &mut rng).unwrap();
        let Head::Prototypical(head) = &model.head else { unreachable!() };
        let f: Vec<f64> = (0..FEATURE_DIM).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let e1 = head.project(&f, Mode::Eval, &mut rng).unwrap();
        let e2 = head.project(&f, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e1, e2);
        let t1 = head.project(&f, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let t2 = head.project(&f, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(t1, t2);
        assert!(head.project(&f[..10], Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn predict_label_examples() {
        let prototypes = Tensor::new(
            vec![4, 2],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let head = PrototypicalHead {
            weight: Tensor::zeros(&[2, FEATURE_DIM]),
            bias: Tensor::zeros(&[2]),
            prototypes,
        };
        assert_eq!(head.predict_label(&[1.0, 1.0], 1.0).unwrap(), 3);
        assert_eq!(head.predict_label(&[0.5, 0.5], 1.0).unwrap(), 0);
        assert!(head.predict_label(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn he_init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ModelParams::init(Architecture::prototypical(5), &mut rng).unwrap();
        let w = model.extractor.fc_weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 3840.0;
        assert!((var - target).abs() / target < 0.1, "{var} vs {target}");

        for (i, t) in model.tensors().iter().enumerate() {
            if t.shape().len() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0), "bias {i} not zero");
            }
        }
        let again = ModelParams::init(Architecture::prototypical(5), &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn param_count_depends_on_head() {
        let p = Architecture::prototypical(10);
        let t = Architecture::traditional(10);
        let extractor: usize = p.param_shapes()[..EXTRACTOR_TENSORS]
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        assert_eq!(p.param_count(), extractor + 5 * 100 + 5 + 10 * 5);
        assert_eq!(t.param_count(), extractor + 10 * 100 + 10);
        let model = ModelParams::zeroed(p).unwrap();
        assert_eq!(model.param_count(), p.param_count());
    }
}
