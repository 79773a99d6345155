//! Small differentiable classifiers with hand-written backpropagation.
//!
//! Two architectures are supported: multinomial logistic regression and a
//! fully connected network with ReLU hidden layers. Parameters live in one
//! flat `f64` vector so that relaying or broadcasting a model is a plain
//! copy. Each layer occupies a contiguous block: the weight matrix in
//! row-major `out x in` order followed by the `out` biases.
//!
//! The loss is the batch mean of softmax cross-entropy, computed through a
//! log-sum-exp so large logits stay finite.

use matrixmultiply::dgemm;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("parameter vector has {actual} entries, architecture needs {expected}")]
    ParamCount { expected: usize, actual: usize },
    #[error("parameter entry {index} is not finite")]
    NonFiniteParam { index: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("numerical overflow: non-finite {0}")]
    NumericalOverflow(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    LogReg,
    Mlp2,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelArch {
    kind: ModelKind,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
}

/// Position and shape of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the weight block; biases follow at `offset + fan_in * fan_out`.
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelArch {
    pub fn new(
        kind: ModelKind,
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(NumericsError::InvalidArch("input_dim must be at least 1".into()));
        }
        if num_classes < 2 {
            return Err(NumericsError::InvalidArch("num_classes must be at least 2".into()));
        }
        match kind {
            ModelKind::LogReg if !hidden_dims.is_empty() => {
                return Err(NumericsError::InvalidArch(
                    "logistic regression takes no hidden layers".into(),
                ))
            }
            ModelKind::Mlp2 if hidden_dims.is_empty() => {
                return Err(NumericsError::InvalidArch("mlp needs at least one hidden layer".into()))
            }
            _ => {}
        }
        if hidden_dims.contains(&0) {
            return Err(NumericsError::InvalidArch("hidden layer widths must be positive".into()));
        }
        Ok(Self { kind, input_dim, hidden_dims, num_classes })
    }

    pub fn logreg(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(ModelKind::LogReg, input_dim, Vec::new(), num_classes)
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(ModelKind::Mlp2, input_dim, hidden_dims, num_classes)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let layer = LayerShape { fan_in: w[0], fan_out: w[1], offset };
                offset += layer.len();
                layer
            })
            .collect()
    }

    /// Total parameter count Q.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }
}

/// A parameter vector tied to its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ModelArch,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: ModelArch, values: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(NumericsError::ParamCount { expected, actual: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteParam { index });
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: ModelArch) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers. Callers are responsible for keeping
    /// entries finite; see [`ModelParams::is_finite`].
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Labeled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    width: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, width: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(NumericsError::EmptyBatch);
        }
        if width == 0 || features.len() != labels.len() * width {
            return Err(NumericsError::DimensionMismatch {
                expected: labels.len() * width,
                actual: features.len(),
            });
        }
        Ok(Self { features, labels, width })
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(arch: &ModelArch, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    for layer in arch.layers() {
        let scale = 1.0 / (layer.fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-scale, scale).expect("finite positive scale");
        for v in &mut values[layer.offset..layer.bias_offset()] {
            *v = dist.sample(&mut rng);
        }
    }
    ModelParams { arch: arch.clone(), values }
}

/// `c (rows x out) = x (rows x in) * w^T` where `w` is `out x in` row-major.
fn affine_forward(x: &[f64], rows: usize, params: &[f64], layer: &LayerShape, out: &mut [f64]) {
    let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
    let w = &params[layer.offset..layer.bias_offset()];
    let b = &params[layer.bias_offset()..layer.offset + layer.len()];
    debug_assert_eq!(x.len(), rows * fan_in);
    debug_assert_eq!(out.len(), rows * fan_out);
    // SAFETY: slice lengths checked above match the dimensions and strides.
    unsafe {
        dgemm(
            rows,
            fan_in,
            fan_out,
            1.0,
            x.as_ptr(),
            fan_in as isize,
            1,
            w.as_ptr(),
            1,
            fan_in as isize,
            0.0,
            out.as_mut_ptr(),
            fan_out as isize,
            1,
        );
    }
    for row in out.chunks_exact_mut(fan_out) {
        for (z, bias) in row.iter_mut().zip(b) {
            *z += bias;
        }
    }
}

/// Activations recorded by a forward pass: `inputs[l]` feeds layer `l`,
/// `logits` is the output of the last layer.
struct Tape {
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn check_width(arch: &ModelArch, features: &[f64], width: usize) -> Result<usize> {
    if width != arch.input_dim() {
        return Err(NumericsError::DimensionMismatch { expected: arch.input_dim(), actual: width });
    }
    if !features.len().is_multiple_of(width) {
        return Err(NumericsError::DimensionMismatch {
            expected: (features.len() / width) * width,
            actual: features.len(),
        });
    }
    Ok(features.len() / width)
}

fn forward_tape(params: &ModelParams, features: &[f64], rows: usize) -> Tape {
    let layers = params.arch.layers();
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut current = features.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let mut z = vec![0.0; rows * layer.fan_out];
        affine_forward(&current, rows, &params.values, layer, &mut z);
        inputs.push(current);
        if l + 1 < layers.len() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        current = z;
    }
    Tape { inputs, logits: current }
}

/// Logits for every row of `features` (row-major, `width` columns).
pub fn forward(params: &ModelParams, features: &[f64], width: usize) -> Result<Vec<f64>> {
    let rows = check_width(&params.arch, features, width)?;
    let logits = forward_tape(params, features, rows).logits;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NumericalOverflow("logits"));
    }
    Ok(logits)
}

/// Index of the largest logit per row; ties go to the lowest class id.
pub fn predict(params: &ModelParams, features: &[f64], width: usize) -> Result<Vec<usize>> {
    let c = params.arch.num_classes();
    let logits = forward(params, features, width)?;
    Ok(logits.chunks_exact(c).map(argmax).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy of row-major `logits` against `labels`.
pub fn cross_entropy_from_logits(logits: &[f64], labels: &[usize], num_classes: usize) -> f64 {
    let total: f64 = logits
        .chunks_exact(num_classes)
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    total / labels.len() as f64
}

fn check_batch(params: &ModelParams, batch: &Batch) -> Result<()> {
    check_width(&params.arch, &batch.features, batch.width)?;
    let c = params.arch.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&y| y >= c) {
        return Err(NumericsError::LabelOutOfRange { label, num_classes: c });
    }
    Ok(())
}

/// Batch-mean cross-entropy without the gradient.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    check_batch(params, batch)?;
    let tape = forward_tape(params, &batch.features, batch.rows());
    let value = cross_entropy_from_logits(&tape.logits, &batch.labels, params.arch.num_classes());
    if !value.is_finite() {
        return Err(NumericsError::NumericalOverflow("loss"));
    }
    Ok(value)
}

/// Batch-mean cross-entropy and its exact gradient with respect to every
/// parameter. ReLU's subgradient at zero is taken as zero.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_batch(params, batch)?;
    let rows = batch.rows();
    let c = params.arch.num_classes();
    let layers = params.arch.layers();
    let tape = forward_tape(params, &batch.features, rows);

    let inv_rows = 1.0 / rows as f64;
    let mut total = 0.0;
    // dL/dlogits = (softmax - onehot) / rows
    let mut delta = tape.logits;
    for (row, &y) in delta.chunks_exact_mut(c).zip(&batch.labels) {
        let lse = log_sum_exp(row);
        total += lse - row[y];
        for z in row.iter_mut() {
            *z = (*z - lse).exp() * inv_rows;
        }
        row[y] -= inv_rows;
    }
    let value = total * inv_rows;
    if !value.is_finite() {
        return Err(NumericsError::NumericalOverflow("loss"));
    }

    let mut grad = vec![0.0; params.values.len()];
    for (l, layer) in layers.iter().enumerate().rev() {
        let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
        let input = &tape.inputs[l];
        // SAFETY: delta is rows x fan_out, input is rows x fan_in and the
        // destination block is fan_out x fan_in; strides follow row-major layout.
        unsafe {
            dgemm(
                fan_out,
                rows,
                fan_in,
                1.0,
                delta.as_ptr(),
                1,
                fan_out as isize,
                input.as_ptr(),
                fan_in as isize,
                1,
                0.0,
                grad[layer.offset..].as_mut_ptr(),
                fan_in as isize,
                1,
            );
        }
        let bias_grad = &mut grad[layer.bias_offset()..layer.offset + layer.len()];
        for row in delta.chunks_exact(fan_out) {
            for (g, d) in bias_grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.values[layer.offset..layer.bias_offset()];
        let mut upstream = vec![0.0; rows * fan_in];
        // SAFETY: delta rows x fan_out times w fan_out x fan_in into rows x fan_in.
        unsafe {
            dgemm(
                rows,
                fan_out,
                fan_in,
                1.0,
                delta.as_ptr(),
                fan_out as isize,
                1,
                w.as_ptr(),
                fan_in as isize,
                1,
                0.0,
                upstream.as_mut_ptr(),
                fan_in as isize,
                1,
            );
        }
        // The input of layer l is relu(pre-activation); its derivative is
        // 1 exactly where that input is positive.
        for (u, &a) in upstream.iter_mut().zip(input) {
            if a <= 0.0 {
                *u = 0.0;
            }
        }
        delta = upstream;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NumericalOverflow("gradient"));
    }
    Ok((value, grad))
}

/// Central differences `(L(θ+εe_j) - L(θ-εe_j)) / 2ε`, one coordinate at a time.
pub fn finite_diff_grad(params: &ModelParams, batch: &Batch, eps: f64) -> Result<Vec<f64>> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    check_batch(params, batch)?;
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.values.len());
    for j in 0..params.values.len() {
        let original = probe.values[j];
        probe.values[j] = original + eps;
        let up = loss(&probe, batch)?;
        probe.values[j] = original - eps;
        let down = loss(&probe, batch)?;
        probe.values[j] = original;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(features: Vec<f64>, label: usize) -> Batch {
        let width = features.len();
        Batch::new(features, vec![label], width).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelArch::logreg(2, 3).unwrap().param_count(), 9);
        let mlp = ModelArch::mlp(784, vec![128, 128], 10).unwrap();
        // Layer-by-layer enumeration: (in + 1) * out for each affine map.
        let expected: usize = [(784, 128), (128, 128), (128, 10)]
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum();
        assert_eq!(expected, 118_282);
        assert_eq!(mlp.param_count(), expected);
    }

    #[test]
    fn arch_validation() {
        assert!(ModelArch::logreg(0, 3).is_err());
        assert!(ModelArch::logreg(2, 1).is_err());
        assert!(ModelArch::mlp(2, vec![], 3).is_err());
        assert!(ModelArch::mlp(2, vec![4, 0], 3).is_err());
        assert!(ModelArch::new(ModelKind::LogReg, 2, vec![3], 3).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = ModelArch::mlp(5, vec![4], 3).unwrap();
        let a = init_params(&arch, 7);
        let b = init_params(&arch, 7);
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), init_params(&arch, 8).values());
        for layer in arch.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            assert!(a.values()[layer.offset..layer.bias_offset()].iter().all(|w| w.abs() <= bound));
            assert!(a.values()[layer.bias_offset()..layer.offset + layer.len()]
                .iter()
                .all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_logreg_gives_zero_logits() {
        let params = ModelParams::zeros(ModelArch::logreg(2, 3).unwrap());
        let logits = forward(&params, &[1.5, -2.0, 0.3, 4.0], 2).unwrap();
        assert_eq!(logits, vec![0.0; 6]);
    }

    #[test]
    fn logreg_on_unit_vector_reads_first_weight_column() {
        let arch = ModelArch::logreg(3, 3).unwrap();
        // W = [[1,2,3],[4,5,6],[7,8,9]] (out x in), zero bias.
        let mut values = (1..=9).map(f64::from).collect::<Vec<_>>();
        values.extend([0.0; 3]);
        let params = ModelParams::new(arch, values).unwrap();
        let logits = forward(&params, &[1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(logits, vec![1.0, 4.0, 7.0]);
    }

    #[test]
    fn mlp_with_zero_hidden_weights_outputs_bias() {
        let arch = ModelArch::mlp(3, vec![4, 5], 3).unwrap();
        let mut params = init_params(&arch, 3);
        let layers = arch.layers();
        for layer in &layers[..2] {
            params.values_mut()[layer.offset..layer.bias_offset()].fill(0.0);
        }
        let out = layers[2];
        params.values_mut()[out.bias_offset()..out.offset + out.len()]
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let logits = forward(&params, &[1.0, 2.0, 3.0, -4.0, 0.0, 9.0], 3).unwrap();
        assert_eq!(logits, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = ModelParams::zeros(ModelArch::logreg(2, 3).unwrap());
        assert!(matches!(
            forward(&params, &[1.0, 2.0, 3.0], 3),
            Err(NumericsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniform_softmax_loss_and_bias_gradient() {
        let params = ModelParams::zeros(ModelArch::logreg(2, 3).unwrap());
        let batch = single(vec![0.7, -1.2], 1);
        let (value, grad) = loss_and_grad(&params, &batch).unwrap();
        assert!((value - 3f64.ln()).abs() < 1e-15);
        let third = 1.0 / 3.0;
        let expected = [third, third - 1.0, third];
        for (g, e) in grad[6..].iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let arch = ModelArch::logreg(1, 2).unwrap();
        let params = ModelParams::new(arch, vec![0.0, 0.0, 0.0, 60.0]).unwrap();
        let value = loss(&params, &single(vec![1.0], 1)).unwrap();
        assert!(value < 1e-20);
    }

    #[test]
    fn large_logits_stay_finite() {
        let arch = ModelArch::logreg(1, 2).unwrap();
        let params = ModelParams::new(arch, vec![0.0, 0.0, 900.0, -900.0]).unwrap();
        let (value, grad) = loss_and_grad(&params, &single(vec![1.0], 1)).unwrap();
        assert!((value - 1800.0).abs() < 1e-9);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn finite_differences_match_closed_form_bias_gradient() {
        let params = ModelParams::zeros(ModelArch::logreg(2, 3).unwrap());
        let batch = single(vec![0.3, 0.9], 2);
        let fd = finite_diff_grad(&params, &batch, 1e-5).unwrap();
        let third = 1.0 / 3.0;
        for (g, e) in fd[6..].iter().zip([third, third, third - 1.0]) {
            assert!((g - e).abs() <= 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn finite_differences_are_zero_on_a_flat_loss() {
        // Both rows of the weight matrix are tied to the same feature of a
        // zero input, so the loss does not depend on any weight entry.
        let arch = ModelArch::logreg(2, 2).unwrap();
        let params = ModelParams::new(arch, vec![1.0, -1.0, 1.0, -1.0, 0.0, 0.0]).unwrap();
        let fd = finite_diff_grad(&params, &single(vec![0.0, 0.0], 0), 1e-3).unwrap();
        assert!(fd[..4].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let params = ModelParams::zeros(ModelArch::logreg(2, 3).unwrap());
        assert!(matches!(
            loss_and_grad(&params, &single(vec![0.0, 0.0], 3)),
            Err(NumericsError::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn logit_shift_leaves_loss_unchanged() {
        let logits = [0.3, -1.0, 2.5, 4.0, 0.0, -3.0];
        let labels = [2, 0];
        let base = cross_entropy_from_logits(&logits, &labels, 3);
        for c in [-50.0, -1.0, 0.5, 100.0] {
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            let value = cross_entropy_from_logits(&shifted, &labels, 3);
            assert!((value - base).abs() < 1e-12, "shift {c}: {value} vs {base}");
        }
    }
}
