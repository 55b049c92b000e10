//! Dense row-major `f64` tensors, the forward kernels used by the encoder and
//! probe, a reverse-mode autodiff graph and an Adam optimizer.

mod adam;
mod graph;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Gradients, NodeId};

use crate::error::{Error, Result};
use crate::par;

/// Coefficient of the tanh GELU approximation, `sqrt(2/pi)`.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as a trainable leaf when placed on a [`Graph`].
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count, treating a rank-1 tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rounds every element through `f32`, the storage precision of on-disk formats.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out, requires_grad: false }
    }
}

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension(format!("{what} must be a matrix, got shape {:?}", t.shape)));
    }
    Ok(())
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul lhs")?;
    require_matrix(b, "matmul rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    let kernel = |i: usize, row: &mut [f64]| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * n * k >= PAR_MATMUL_THRESHOLD {
        par::for_each_row(&mut out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    let mut out = vec![0.0; m * n];
    let kernel = |i: usize, row: &mut [f64]| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * n * k >= PAR_MATMUL_THRESHOLD {
        par::for_each_row(&mut out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
    Tensor { shape: vec![m, n], data: out, requires_grad: false }
}

/// `aᵀ · b` for `a: m×k`, `b: m×n`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[t * n..(t + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![k, n], data: out, requires_grad: false }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor { shape: x.shape.clone(), data: out, requires_grad: false }
}

/// Per-row statistics of a layer-norm forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm over width {d} with gamma {:?} and beta {:?}",
            gamma.shape, beta.shape
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        // biased variance
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((
        Tensor { shape: x.shape.clone(), data: out, requires_grad: false },
        NormStats { xhat, inv_std },
    ))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(t, _)| t)
}

/// Tanh-approximation GELU of a scalar.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
        requires_grad: false,
    }
}

fn check_targets(k: usize, targets: &[usize], rows: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Dimension(format!("{} targets for {rows} logit rows", targets.len())));
    }
    if let Some((i, t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::Index(format!("target {t} at row {i} outside [0, {k})")));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    cross_entropy_with_probs(logits, targets).map(|(l, _)| l)
}

pub(crate) fn cross_entropy_with_probs(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let k = logits.cols();
    check_targets(k, targets, logits.rows())?;
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok((total / targets.len().max(1) as f64, probs))
}

/// Mean per-element binary cross-entropy of `logits` against 0/1 `targets`.
pub fn bce_with_logits(logits: &Tensor, targets: &[f64]) -> Result<f64> {
    if targets.len() != logits.len() {
        return Err(Error::Dimension(format!(
            "{} binary targets for logits {:?}",
            targets.len(),
            logits.shape
        )));
    }
    let total: f64 = logits
        .data
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / targets.len() as f64)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_expanded() {
        let b = m(&[&[5., 6.], &[7., 8.]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap().data(), b.data());
        // 1·5+2·7, 1·6+2·8, 3·5+4·7, 3·6+4·8
        let c = matmul(&m(&[&[1., 2.], &[3., 4.]]), &b).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3] · [2, 3]"), "{err}");
    }

    #[test]
    fn transposed_kernels_agree_with_matmul() {
        let a = m(&[&[1., -2., 3.], &[0.5, 4., -1.]]);
        let b = m(&[&[2., 1., 0.], &[-1., 3., 2.]]);
        let nt = matmul_nt(&a, &b);
        assert_eq!(nt.data(), matmul(&a, &b.transpose()).unwrap().data());
        let tn = matmul_tn(&a, &b);
        assert_eq!(tn.data(), matmul(&a.transpose(), &b).unwrap().data());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0., 0.], &[1000., 0.], &[2f64.ln(), 0.]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.at(1, 0) - 1.0).abs() < 1e-15 && s.at(1, 1) < 1e-300);
        assert!((s.at(2, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.at(2, 1) - 1.0 / 3.0).abs() < 1e-15);
        for r in 0..3 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&m(&[&[3., 3.]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0., 0.]);
        let y = layer_norm(&m(&[&[1., 3.]]), &ones, &zeros, 1e-300).unwrap();
        assert!((y.at(0, 0) + 1.0).abs() < 1e-12 && (y.at(0, 1) - 1.0).abs() < 1e-12);
        let shifted = layer_norm(&m(&[&[1., 3.]]), &ones, &Tensor::full(&[2], 5.0), 1e-300).unwrap();
        assert!((shifted.at(0, 0) - 4.0).abs() < 1e-12 && (shifted.at(0, 1) - 6.0).abs() < 1e-12);
        assert!(layer_norm(&m(&[&[1., 3.]]), &ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-12);
        assert!(gelu_scalar(-20.0).abs() < 1e-12);
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let oracle = 0.5 * (1.0 + (c * (1.0 + 0.044715)).tanh());
        assert!((gelu_scalar(1.0) - oracle).abs() < 1e-12);
        // the tanh GELU has its minimum near -0.75; monotone to the right of it
        let y: Vec<f64> = (-14..=300).map(|i| gelu_scalar(i as f64 * 0.05)).collect();
        assert!(y.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn cross_entropy_examples() {
        let u = Tensor::zeros(&[3, 4]);
        let l = cross_entropy_logits(&u, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let mut onehot = Tensor::zeros(&[1, 4]);
        onehot.data_mut()[2] = 30.0;
        assert!(cross_entropy_logits(&onehot, &[2]).unwrap() < 1e-10);
        let oracle = (1f64.exp() + 2f64.exp()).ln() - 1.0;
        let l = cross_entropy_logits(&m(&[&[1., 2.]]), &[0]).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 1.313262).abs() < 1e-6);
        assert!(matches!(cross_entropy_logits(&u, &[0, 4, 1]), Err(Error::Index(_))));
    }

    #[test]
    fn bce_matches_naive_formula() {
        let z = m(&[&[0.3, -1.2], &[2.0, 0.0]]);
        let y = [1.0, 0.0, 0.0, 1.0];
        let naive: f64 = z
            .data()
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((bce_with_logits(&z, &y).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
