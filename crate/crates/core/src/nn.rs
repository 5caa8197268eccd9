//! Layer primitives with exact analytic gradients, all in `f64`.
//!
//! Every forward function has a matching backward that consumes exactly the
//! values its forward saw (the input, and for pooling the argmax routing).

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Dimension, Zip};
use rand::Rng;

use crate::error::{Error, Result};

/// Probability clamp applied by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-12;

/// Uniform Glorot initialisation in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-limit..=limit)).collect()
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Model(format!("{name} has non-finite entries")))
    }
}

/// Fully connected layer `x W + b` with `W: in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub input: Array2<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let (i, o) = weights.dim();
        if i == 0 || o == 0 {
            return Err(Error::Dimension(format!("dense layer shape {i}x{o}")));
        }
        if bias.len() != o {
            return Err(Error::Dimension(format!(
                "dense bias has {} entries, expected {o}",
                bias.len()
            )));
        }
        let weights = weights.as_standard_layout().into_owned();
        check_finite(
            "dense weights",
            weights.as_slice().expect("standard layout"),
        )?;
        check_finite("dense bias", bias.as_slice().expect("contiguous"))?;
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = glorot_uniform(rng, in_dim * out_dim, in_dim, out_dim);
        Self {
            weights: Array2::from_shape_vec((in_dim, out_dim), w).expect("shape"),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `B x in_dim -> B x out_dim`, bias broadcast to every row.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "dense input has {} columns, layer expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        Ok(x.dot(&self.weights) + &self.bias)
    }

    /// Single-row forward; callers guarantee the dimension.
    pub fn forward_row(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        x.dot(&self.weights) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>) -> DenseGrads {
        DenseGrads {
            weights: x.t().dot(&grad_out).as_standard_layout().into_owned(),
            bias: grad_out.sum_axis(Axis(0)),
            input: grad_out
                .dot(&self.weights.t())
                .as_standard_layout()
                .into_owned(),
        }
    }
}

/// Valid (unpadded) 1-D cross-correlation over one-hot channels.
///
/// `kernels` is `filters x width x 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Array3<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub kernels: Array3<f64>,
    pub bias: Array1<f64>,
    pub input: Option<Array2<f64>>,
}

impl ConvLayer {
    pub fn new(kernels: Array3<f64>, bias: Array1<f64>) -> Result<Self> {
        let (f, m, c) = kernels.dim();
        if f == 0 || m == 0 || c != 4 {
            return Err(Error::Dimension(format!("conv kernel shape {f}x{m}x{c}")));
        }
        if bias.len() != f {
            return Err(Error::Dimension(format!(
                "conv bias has {} entries, expected {f}",
                bias.len()
            )));
        }
        let kernels = kernels.as_standard_layout().into_owned();
        check_finite("conv kernels", kernels.as_slice().expect("standard layout"))?;
        check_finite("conv bias", bias.as_slice().expect("contiguous"))?;
        Ok(Self { kernels, bias })
    }

    pub fn zeros(filters: usize, width: usize) -> Self {
        Self {
            kernels: Array3::zeros((filters, width, 4)),
            bias: Array1::zeros(filters),
        }
    }

    pub fn init(filters: usize, width: usize, rng: &mut impl Rng) -> Self {
        let fan = width * 4;
        let k = glorot_uniform(rng, filters * fan, fan, filters);
        Self {
            kernels: Array3::from_shape_vec((filters, width, 4), k).expect("shape"),
            bias: Array1::zeros(filters),
        }
    }

    pub fn filters(&self) -> usize {
        self.kernels.dim().0
    }

    pub fn width(&self) -> usize {
        self.kernels.dim().1
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != 4 {
            return Err(Error::Dimension(format!(
                "conv input has {} channels, expected 4",
                x.ncols()
            )));
        }
        if x.nrows() < self.width() {
            return Err(Error::Dimension(format!(
                "sequence length {} is shorter than motif width {}",
                x.nrows(),
                self.width()
            )));
        }
        Ok(())
    }

    /// `L x 4 -> F x (L - M + 1)`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let ks = self.kernels.as_slice().expect("standard layout");
        let (filters, width) = (self.filters(), self.width());
        let span = width * 4;
        let positions = x.nrows() - width + 1;
        let mut out = Array2::<f64>::zeros((filters, positions));
        for f in 0..filters {
            let kernel = &ks[f * span..(f + 1) * span];
            let b = self.bias[f];
            for j in 0..positions {
                let window = &xs[j * 4..j * 4 + span];
                out[[f, j]] = kernel.iter().zip(window).map(|(k, v)| k * v).sum::<f64>() + b;
            }
        }
        Ok(out)
    }

    /// Zero entries of `grad_out` are skipped, which makes the pooled
    /// (one-hot routed) case cheap.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        grad_out: ArrayView2<'_, f64>,
        need_input: bool,
    ) -> ConvGrads {
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let ks = self.kernels.as_slice().expect("standard layout");
        let (filters, width) = (self.filters(), self.width());
        let span = width * 4;
        let mut gk = vec![0.0; filters * span];
        let mut gb = Array1::<f64>::zeros(filters);
        let mut gx = need_input.then(|| vec![0.0; xs.len()]);
        for f in 0..filters {
            for (j, &g) in grad_out.row(f).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[f] += g;
                let window = &xs[j * 4..j * 4 + span];
                for (acc, v) in gk[f * span..(f + 1) * span].iter_mut().zip(window) {
                    *acc += g * v;
                }
                if let Some(gx) = gx.as_mut() {
                    let kernel = &ks[f * span..(f + 1) * span];
                    for (acc, k) in gx[j * 4..j * 4 + span].iter_mut().zip(kernel) {
                        *acc += g * k;
                    }
                }
            }
        }
        ConvGrads {
            kernels: Array3::from_shape_vec((filters, width, 4), gk).expect("shape"),
            bias: gb,
            input: gx.map(|v| Array2::from_shape_vec(x.raw_dim(), v).expect("shape")),
        }
    }
}

pub fn relu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Passes `grad` where the forward input was strictly positive.
pub fn relu_backward<D: Dimension>(
    input: &ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut out = grad.clone();
    Zip::from(&mut out).and(input).for_each(|g, &x| {
        if x <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

/// Per-row maximum and the first column attaining it.
pub fn global_max_pool(map: ArrayView2<'_, f64>) -> (Array1<f64>, Vec<usize>) {
    let mut values = Array1::zeros(map.nrows());
    let mut argmax = Vec::with_capacity(map.nrows());
    for (f, row) in map.rows().into_iter().enumerate() {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        values[f] = row[best];
        argmax.push(best);
    }
    (values, argmax)
}

pub fn global_max_pool_backward(
    argmax: &[usize],
    width: usize,
    grad: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros((argmax.len(), width));
    for (f, &j) in argmax.iter().enumerate() {
        out[[f, j]] = grad[f];
    }
    out
}

/// Max-subtracted softmax, renormalised so the sum is 1 to rounding.
pub fn softmax(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

pub fn softmax_rows(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (mut dst, src) in out.rows_mut().into_iter().zip(m.rows()) {
        dst.assign(&softmax(src));
    }
    out
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_backward(
    alpha: ArrayView1<'_, f64>,
    grad_alpha: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let inner = alpha.dot(&grad_alpha);
    Zip::from(alpha)
        .and(grad_alpha)
        .map_collect(|&a, &g| a * (g - inner))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_loss(pred: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(pred.len(), labels.len(), "prediction/label count mismatch");
    let total: f64 = pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / pred.len() as f64
}

/// Gradient of [`bce_loss`] of `sigmoid(logit)` w.r.t. each logit.
pub fn bce_logit_grad(logits: &[f64], labels: &[u8]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&o, &y)| (sigmoid(o) - y as f64) / n)
        .collect()
}

/// Max relative error between `analytic` and central differences of `f` at `x`.
///
/// The denominator per coordinate is `max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    assert!(eps > 0.0, "step must be positive");
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
