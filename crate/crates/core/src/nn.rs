//! Minimal feed-forward network with analytic backpropagation.
//!
//! Hidden layers use a rectifier, the output layer is affine (raw logits).
//! Parameters flatten into a [`ParamVector`] in the canonical order
//! `W0 (row-major, fan_in x fan_out), b0, W1, b1, ...`, which is also the
//! layout of [`Gradients`].

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Flattened model parameters; the unit exchanged between clients and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

/// Gradient of a scalar loss w.r.t. a [`ParamVector`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Squared euclidean distance to `other`.
    pub fn sq_distance(&self, other: &ParamVector) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }
}

fn check_len(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    Ok(())
}

/// Number of parameters of an MLP with the given layer widths.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid("layer_dims", "need at least input and output widths"));
    }
    if dims.contains(&0) {
        return Err(Error::invalid("layer_dims", "widths must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Shape `(fan_in, fan_out)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Multilayer perceptron: rectifier on hidden layers, identity on output.
#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    version: u64,
}

/// Intermediate values of a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// `activations[l]` is the input to layer `l`.
    activations: Vec<Array2<f64>>,
    /// Pre-activation output of every layer.
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = seed::rng(seed, &[0x6d6c70]);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let weights =
                    Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..=bound));
                Layer {
                    weights,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            layers,
            version: fresh_version(),
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::from_params(dims, &ParamVector::zeros(param_count(dims)))
    }

    pub fn from_params(dims: &[usize], params: &ParamVector) -> Result<Self> {
        validate_dims(dims)?;
        check_len(param_count(dims), params.len())?;
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let n_w = fan_in * fan_out;
                let weights =
                    Array2::from_shape_vec((fan_in, fan_out), params.0[offset..offset + n_w].to_vec())
                        .expect("slice length matches shape");
                offset += n_w;
                let bias = Array1::from_vec(params.0[offset..offset + fan_out].to_vec());
                offset += fan_out;
                Layer { weights, bias }
            })
            .collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            layers,
            version: fresh_version(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.dims)
    }

    pub fn params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        ParamVector(out)
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        check_len(self.param_count(), params.len())?;
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = params.0[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params.0[offset];
                offset += 1;
            }
        }
        self.version = fresh_version();
        Ok(())
    }

    /// Mutable access to a layer; invalidates outstanding forward caches.
    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        self.version = fresh_version();
        &mut self.layers[index]
    }

    /// `params -= lr * grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        let updated = sgd_step(&self.params(), grads, lr)?;
        self.set_params(&updated)
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: format!("{} input columns", self.input_dim()),
                actual: format!("{} columns", inputs.ncols()),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = inputs.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights) + &layer.bias;
            let next = if i < last {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            activations.push(current);
            pre.push(z);
            current = next;
        }
        Ok((
            current,
            ForwardCache {
                version: self.version,
                activations,
                pre,
            },
        ))
    }

    /// Forward pass without keeping intermediates.
    pub fn logits(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(inputs).map(|(out, _)| out)
    }

    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(inputs)?))
    }

    /// Mean cross-entropy of the model on `(inputs, labels)`.
    pub fn loss(&self, inputs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(inputs)?;
        cross_entropy_loss(logits.view(), labels).map(|(l, _)| l)
    }

    pub fn backward(&self, cache: &ForwardCache, d_logits: ArrayView2<f64>) -> Result<Gradients> {
        self.backward_with_input(cache, d_logits).map(|(g, _)| g)
    }

    /// Parameter gradients plus the gradient w.r.t. the network input.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache,
        d_logits: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if cache.version != self.version || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let logits = cache.logits();
        if d_logits.dim() != logits.dim() {
            return Err(Error::Shape {
                expected: format!("{:?}", logits.dim()),
                actual: format!("{:?}", d_logits.dim()),
            });
        }
        let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits.to_owned();
        for l in (0..self.layers.len()).rev() {
            let d_w = cache.activations[l].t().dot(&delta);
            let d_b = delta.sum_axis(Axis(0));
            let d_in = delta.dot(&self.layers[l].weights.t());
            per_layer.push((d_w, d_b));
            delta = if l > 0 {
                let mut d = d_in;
                d.zip_mut_with(&cache.pre[l - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                d
            } else {
                d_in
            };
        }
        per_layer.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (d_w, d_b) in per_layer {
            flat.extend(d_w.iter().copied());
            flat.extend(d_b.iter().copied());
        }
        Ok((Gradients(flat), delta))
    }
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    let classes = logits.ncols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    let mut grad = softmax(logits);
    for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
        row[label] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n as f64);
    Ok((total / n as f64, grad))
}

/// Cross-entropy plus `(mu/2)·‖params − global‖²`.
///
/// Returns the loss, the logit gradient and the proximal parameter-gradient
/// term `mu·(params − global)`, which the caller adds to the backprop result.
pub fn proximal_cross_entropy(
    logits: ArrayView2<f64>,
    labels: &[usize],
    params: &ParamVector,
    global_params: &ParamVector,
    mu: f64,
) -> Result<(f64, Array2<f64>, Gradients)> {
    check_len(params.len(), global_params.len())?;
    if !(mu >= 0.0) {
        return Err(Error::invalid("mu", "must be nonnegative"));
    }
    let (ce, d_logits) = cross_entropy_loss(logits, labels)?;
    let diff: Vec<f64> = params.0.iter().zip(&global_params.0).map(|(p, g)| p - g).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    let extra = Gradients(diff.into_iter().map(|d| mu * d).collect());
    Ok((ce + 0.5 * mu * sq, d_logits, extra))
}

/// `params − lr·grads`, elementwise.
pub fn sgd_step(params: &ParamVector, grads: &Gradients, lr: f64) -> Result<ParamVector> {
    check_len(params.len(), grads.len())?;
    Ok(ParamVector(
        params.0.iter().zip(&grads.0).map(|(p, g)| p - lr * g).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed, &[1]);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn test_param_count_and_shapes() {
        let m = Mlp::new(&[4, 8, 3], 1).unwrap();
        assert_eq!(m.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(m.layers()[0].weights.dim(), (4, 8));
        assert_eq!(m.layers()[1].weights.dim(), (8, 3));
        assert!(m.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn test_glorot_bounds() {
        let m = Mlp::new(&[10, 6], 3).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(m.layers()[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn test_zero_model_gives_zero_logits() {
        let m = Mlp::zeros(&[3, 4]).unwrap();
        let out = m.logits(random_inputs(5, 3, 2).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_affine_1x1() {
        let m = Mlp::from_params(&[1, 1], &ParamVector(vec![2.0, 1.0])).unwrap();
        let out = m.logits(array![[3.0]].view()).unwrap();
        assert_eq!(out, array![[7.0]]);
    }

    #[test]
    fn test_identity_layer() {
        let m = Mlp::from_params(&[2, 2], &ParamVector(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(m.logits(array![[1.0, 0.0]].view()).unwrap(), array![[1.0, 0.0]]);
    }

    #[test]
    fn test_forward_dimension_mismatch() {
        let m = Mlp::new(&[3, 2], 0).unwrap();
        assert!(matches!(
            m.forward(Array2::zeros((1, 4)).view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn test_cross_entropy_uniform() {
        let (loss, _) = cross_entropy_loss(Array2::zeros((3, 4)).view(), &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn test_cross_entropy_saturated() {
        let (loss, grad) = cross_entropy_loss(array![[1000.0, -1000.0]].view(), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn test_cross_entropy_errors() {
        assert_eq!(
            cross_entropy_loss(Array2::zeros((0, 2)).view(), &[]).unwrap_err(),
            Error::Empty("batch")
        );
        assert!(matches!(
            cross_entropy_loss(Array2::zeros((1, 2)).view(), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn test_cross_entropy_dlogits_finite_difference() {
        let logits = random_inputs(5, 3, 9) * 3.0;
        let labels = [0, 2, 1, 1, 0];
        let (_, grad) = cross_entropy_loss(logits.view(), &labels).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            for j in 0..3 {
                let mut plus = logits.clone();
                plus[[i, j]] += h;
                let mut minus = logits.clone();
                minus[[i, j]] -= h;
                let lp = cross_entropy_loss(plus.view(), &labels).unwrap().0;
                let lm = cross_entropy_loss(minus.view(), &labels).unwrap().0;
                let num = (lp - lm) / (2.0 * h);
                let rel = (num - grad[[i, j]]).abs() / num.abs().max(grad[[i, j]].abs()).max(1e-8);
                assert!(rel < 1e-4, "({i},{j}) analytic {} numeric {num}", grad[[i, j]]);
            }
        }
    }

    #[test]
    fn test_softmax_rows_sum_to_one() {
        let s = softmax((random_inputs(6, 5, 4) * 20.0).view());
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_zero_upstream_gives_zero_gradients() {
        let m = Mlp::new(&[3, 5, 2], 5).unwrap();
        let (_, cache) = m.forward(random_inputs(4, 3, 1).view()).unwrap();
        let g = m.backward(&cache, Array2::zeros((4, 2)).view()).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_stale_cache_rejected() {
        let mut m = Mlp::new(&[3, 2], 5).unwrap();
        let (_, cache) = m.forward(random_inputs(2, 3, 1).view()).unwrap();
        let p = m.params();
        m.set_params(&p).unwrap();
        assert_eq!(
            m.backward(&cache, Array2::zeros((2, 2)).view()).unwrap_err(),
            Error::StaleCache
        );
        let other = Mlp::new(&[3, 2], 5).unwrap();
        let (_, cache) = other.forward(random_inputs(2, 3, 1).view()).unwrap();
        assert_eq!(
            m.backward(&cache, Array2::zeros((2, 2)).view()).unwrap_err(),
            Error::StaleCache
        );
    }

    #[test]
    fn test_duplicated_sample_mean_semantics() {
        let m = Mlp::new(&[3, 4, 2], 11).unwrap();
        let x = random_inputs(1, 3, 2);
        let grad_of = |inputs: &Array2<f64>, labels: &[usize]| {
            let (logits, cache) = m.forward(inputs.view()).unwrap();
            let (_, d) = cross_entropy_loss(logits.view(), labels).unwrap();
            m.backward(&cache, d.view()).unwrap()
        };
        let single = grad_of(&x, &[1]);
        let doubled = ndarray::concatenate![Axis(0), x, x];
        let dup = grad_of(&doubled, &[1, 1]);
        for (a, b) in single.0.iter().zip(&dup.0) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn test_sgd_step() {
        let p = ParamVector(vec![1.0, 1.0]);
        let g = Gradients(vec![1.0, -1.0]);
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap(), ParamVector(vec![0.5, 1.5]));
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        let two = sgd_step(&sgd_step(&p, &g, 0.1).unwrap(), &g, 0.1).unwrap();
        let one = sgd_step(&p, &g, 0.2).unwrap();
        for (a, b) in two.0.iter().zip(&one.0) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            sgd_step(&p, &Gradients(vec![1.0]), 0.1),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn test_proximal_term() {
        let logits = array![[0.3, -0.2]];
        let labels = [1];
        let (ce, d) = cross_entropy_loss(logits.view(), &labels).unwrap();

        let p = ParamVector(vec![1.0, 0.0]);
        let g = ParamVector(vec![0.0, 0.0]);
        let (loss, d2, extra) = proximal_cross_entropy(logits.view(), &labels, &p, &g, 2.0).unwrap();
        assert!((loss - ce - 1.0).abs() < 1e-15);
        assert_eq!(d, d2);
        assert_eq!(extra.0, vec![2.0, 0.0]);

        let (loss0, _, extra0) = proximal_cross_entropy(logits.view(), &labels, &p, &g, 0.0).unwrap();
        assert_eq!(loss0, ce);
        assert!(extra0.0.iter().all(|&v| v == 0.0));

        let (loss_same, _, _) = proximal_cross_entropy(logits.view(), &labels, &p, &p, 5.0).unwrap();
        assert_eq!(loss_same, ce);

        assert!(proximal_cross_entropy(logits.view(), &labels, &p, &ParamVector(vec![0.0]), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn prop_flatten_unflatten_identity(
            dims in prop::collection::vec(1usize..6, 2..5),
            values in prop::collection::vec(-1e6f64..1e6, 0..400),
        ) {
            let n = param_count(&dims);
            let params = ParamVector((0..n).map(|i| values.get(i).copied().unwrap_or(i as f64 * 0.37)).collect());
            let m = Mlp::from_params(&dims, &params).unwrap();
            prop_assert_eq!(m.params(), params);
        }

        #[test]
        fn prop_cross_entropy_nonnegative(
            logits in prop::collection::vec(-50.0f64..50.0, 12),
            labels in prop::collection::vec(0usize..3, 4),
        ) {
            let l = Array2::from_shape_vec((4, 3), logits).unwrap();
            let (loss, _) = cross_entropy_loss(l.view(), &labels).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
