//! Dense linear algebra, activations, initialization and the optimizer.
//!
//! Everything here works on `f64`. Matrices are row-major. Vectors are plain
//! `Vec<f64>`/`&[f64]` so that slices of larger buffers can be used without
//! copying.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `out += scale * self[:, c]`
    #[inline]
    pub fn add_column_to(&self, c: usize, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += scale * self.data[r * self.cols + c];
        }
    }

    /// `self[:, c] += scale * v`
    #[inline]
    pub fn add_to_column(&mut self, c: usize, scale: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (r, x) in v.iter().enumerate() {
            self.data[r * self.cols + c] += scale * x;
        }
    }

    /// `self += scale * (a ⊗ b)`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += scale * ar * bc;
            }
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += scale * y;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += s * x`
#[inline]
pub fn axpy(s: f64, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

pub fn matvec(m: &Matrix, x: &[f64]) -> Result<Vector> {
    if m.cols != x.len() {
        return Err(Error::invalid(format!(
            "matvec: {}x{} matrix with vector of length {}",
            m.rows,
            m.cols,
            x.len()
        )));
    }
    Ok((0..m.rows).map(|r| dot(m.row(r), x)).collect())
}

/// `m^T x`
pub fn matvec_transpose(m: &Matrix, x: &[f64]) -> Result<Vector> {
    if m.rows != x.len() {
        return Err(Error::invalid(format!(
            "matvec_transpose: {}x{} matrix with vector of length {}",
            m.rows,
            m.cols,
            x.len()
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (r, &xr) in x.iter().enumerate() {
        axpy(xr, m.row(r), &mut out);
    }
    Ok(out)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::invalid(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
            axpy(aik, b.row(k), dst);
        }
    }
    Ok(out)
}

pub fn outer(a: &[f64], b: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(a.len(), b.len());
    m.add_outer(1.0, a, b);
    m
}

pub fn add(a: &[f64], b: &[f64]) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "add: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn scale(a: &[f64], s: f64) -> Vector {
    a.iter().map(|x| x * s).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_vec(a: &[f64]) -> Vector {
    a.iter().map(|&x| relu(x)).collect()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax. Masked entries (mask `false`) get exactly 0.
pub fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::invalid("softmax mask length differs from logits"));
        }
    }
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..logits.len())
        .filter(|&i| valid(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("softmax with every entry masked"));
    }
    let mut out: Vector = (0..logits.len())
        .map(|i| {
            if valid(i) {
                (logits[i] - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Softmax over all entries of a non-empty slice, written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|x| (x - max).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seedable random source. `fork` derives an independent stream so callers
/// can hand sub-generators to components without sharing state.
#[derive(Clone, Debug)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator keyed by `(self's seed material, label)`.
    /// Does not advance `self`.
    pub fn fork(&self, label: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.set_stream(mix(inner.get_stream() ^ mix(label.wrapping_add(1))));
        inner.set_word_pos(0);
        SeedRng { inner }
    }
}

impl RngCore for SeedRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Xavier/Glorot uniform initialization, `U(-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols)))`.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    xavier_init_with(rows, cols, &mut SeedRng::new(seed))
}

pub fn xavier_init_with(rows: usize, cols: usize, rng: &mut SeedRng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "xavier_init with zero dimension ({rows}x{cols})"
        )));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Joint L2 norm over a list of matrices.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Matrix>) -> f64 {
    grads
        .into_iter()
        .map(Matrix::squared_norm)
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients so their joint norm is at most `threshold`.
pub fn clip_global_norm(mut gradients: Vec<Matrix>, threshold: f64) -> Result<Vec<Matrix>> {
    let mut refs: Vec<&mut Matrix> = gradients.iter_mut().collect();
    clip_global_norm_in_place(&mut refs, threshold)?;
    Ok(gradients)
}

/// In-place variant; returns the norm measured before clipping.
pub fn clip_global_norm_in_place(gradients: &mut [&mut Matrix], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = global_norm(gradients.iter().map(|g| &**g));
    if norm > threshold {
        let s = threshold / norm;
        for g in gradients.iter_mut() {
            g.scale_in_place(s);
        }
    }
    Ok(norm)
}

/// Hyperparameters of the momentum optimizer plus one velocity per parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocities: Vec<Matrix>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_threshold: f64,
}

impl OptimizerState {
    pub fn new(
        shapes: &[(usize, usize)],
        learning_rate: f64,
        momentum: f64,
        clip_threshold: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(clip_threshold > 0.0) {
            return Err(Error::invalid("clip threshold must be positive"));
        }
        Ok(OptimizerState {
            velocities: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            learning_rate,
            momentum,
            clip_threshold,
        })
    }

    /// Point at which the next gradient has to be evaluated:
    /// `θ - lr·γ·v`.
    pub fn lookahead(&self, param: &Matrix, velocity: &Matrix) -> Result<Matrix> {
        let mut ahead = param.clone();
        ahead.add_scaled(-self.learning_rate * self.momentum, velocity)?;
        Ok(ahead)
    }
}

/// Nesterov momentum step.
///
/// ```text
/// v ← γ·v + g        where g = ∇L(θ − lr·γ·v)
/// θ ← θ − lr·v
/// ```
///
/// `gradient` must have been evaluated at the lookahead point returned by
/// [`OptimizerState::lookahead`]. With `γ = 0` this is plain gradient descent.
pub fn nesterov_update(
    param: &Matrix,
    velocity: &Matrix,
    gradient: &Matrix,
    state: &OptimizerState,
) -> Result<(Matrix, Matrix)> {
    let mut p = param.clone();
    let mut v = velocity.clone();
    nesterov_update_in_place(
        &mut p,
        &mut v,
        gradient,
        state.learning_rate,
        state.momentum,
    )?;
    Ok((p, v))
}

pub fn nesterov_update_in_place(
    param: &mut Matrix,
    velocity: &mut Matrix,
    gradient: &Matrix,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != velocity.shape() || param.shape() != gradient.shape() {
        return Err(Error::invalid(format!(
            "nesterov_update shapes: param {:?}, velocity {:?}, gradient {:?}",
            param.shape(),
            velocity.shape(),
            gradient.shape()
        )));
    }
    for ((p, v), g) in param
        .data
        .iter_mut()
        .zip(velocity.data.iter_mut())
        .zip(&gradient.data)
    {
        *v = momentum * *v + g;
        *p -= learning_rate * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    #[test]
    fn softmax_uniform_and_masked() {
        let s = softmax(&[0.0, 0.0, 0.0], None).unwrap();
        for x in s {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&[5.0, -100.0], Some(&[true, false])).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_exp() {
        // direct oracle, no max subtraction
        let logits = [1.0f64, 2.0, 3.0];
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|x| x.exp() / z).collect();
        let s = softmax(&logits, None).unwrap();
        for (a, b) in s.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s[0], 0.09003, epsilon = 5e-6);
        assert_abs_diff_eq!(s[1], 0.24473, epsilon = 5e-6);
        assert_abs_diff_eq!(s[2], 0.66524, epsilon = 5e-6);
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax(&[], None).is_err());
        assert!(softmax(&[1.0, 2.0], Some(&[false, false])).is_err());
        assert!(softmax(&[1.0], Some(&[true, true])).is_err());
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let s = softmax(&[1000.0, 1000.0], None).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let a = xavier_init(4, 2, 7).unwrap();
        let b = xavier_init(4, 2, 7).unwrap();
        assert_eq!(a, b);

        let bound = (6.0f64 / 200.0).sqrt();
        assert_abs_diff_eq!(bound, 0.1732, epsilon = 1e-4);
        let m = xavier_init(100, 100, 1).unwrap();
        assert!(m.data().iter().all(|x| x.abs() <= bound));

        let m = xavier_init(1, 5, 3).unwrap();
        assert!(m.data().iter().all(|x| x.abs() <= 1.0));

        assert!(xavier_init(0, 3, 1).is_err());
    }

    #[test]
    fn clip_examples() {
        let g = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let out = clip_global_norm(vec![g.clone()], 10.0).unwrap();
        assert_eq!(out[0], g);

        let g = Matrix::from_vec(1, 2, vec![6.0, 8.0]).unwrap();
        let out = clip_global_norm(vec![g], 5.0).unwrap();
        assert_abs_diff_eq!(out[0].data()[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].data()[1], 4.0, epsilon = 1e-12);

        let z = Matrix::zeros(2, 2);
        assert_eq!(clip_global_norm(vec![z.clone()], 1.0).unwrap()[0], z);
        assert!(clip_global_norm(vec![], 1.0).unwrap().is_empty());
        assert!(clip_global_norm(vec![], 0.0).is_err());
    }

    #[test]
    fn nesterov_reduces_to_sgd() {
        let state = OptimizerState::new(&[(1, 1)], 0.1, 0.0, 10.0).unwrap();
        let p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let v = Matrix::zeros(1, 1);
        let g = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let (p2, _) = nesterov_update(&p, &v, &g, &state).unwrap();
        assert_abs_diff_eq!(p2.data()[0], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn nesterov_fixed_point() {
        let state = OptimizerState::new(&[(2, 2)], 0.1, 0.9, 10.0).unwrap();
        let p = xavier_init(2, 2, 3).unwrap();
        let z = Matrix::zeros(2, 2);
        let (p2, v2) = nesterov_update(&p, &z, &z, &state).unwrap();
        assert_eq!(p2, p);
        assert_eq!(v2, z);
    }

    #[test]
    fn nesterov_matches_hand_stepped_oracle() {
        // scalar, constant unit gradient, lr 0.1, γ 0.9, three steps by hand:
        //   v1 = 1,              θ1 = -0.1
        //   v2 = 0.9 + 1 = 1.9,  θ2 = -0.1 - 0.19 = -0.29
        //   v3 = 1.71 + 1 = 2.71 θ3 = -0.29 - 0.271 = -0.561
        let expected = [(-0.1, 1.0), (-0.29, 1.9), (-0.561, 2.71)];
        let state = OptimizerState::new(&[(1, 1)], 0.1, 0.9, 10.0).unwrap();
        let mut p = Matrix::zeros(1, 1);
        let mut v = Matrix::zeros(1, 1);
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        for (theta, vel) in expected {
            let (p2, v2) = nesterov_update(&p, &v, &g, &state).unwrap();
            p = p2;
            v = v2;
            assert_abs_diff_eq!(p.data()[0], theta, epsilon = 1e-12);
            assert_abs_diff_eq!(v.data()[0], vel, epsilon = 1e-12);
        }
        let ahead = state.lookahead(&p, &v).unwrap();
        assert_abs_diff_eq!(ahead.data()[0], -0.561 - 0.1 * 0.9 * 2.71, epsilon = 1e-12);
    }

    #[test]
    fn nesterov_shape_mismatch() {
        let state = OptimizerState::new(&[(1, 1)], 0.1, 0.9, 10.0).unwrap();
        let p = Matrix::zeros(1, 2);
        let v = Matrix::zeros(1, 1);
        assert!(nesterov_update(&p, &v, &v, &state).is_err());
    }

    #[test]
    fn optimizer_state_validation() {
        assert!(OptimizerState::new(&[], 0.0, 0.5, 1.0).is_err());
        assert!(OptimizerState::new(&[], 0.1, 1.0, 1.0).is_err());
        assert!(OptimizerState::new(&[], 0.1, 0.5, 0.0).is_err());
    }

    #[test]
    fn elementwise_and_linear_ops() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu_vec(&[-1.0, 2.0]), vec![0.0, 2.0]);
        let x = vec![1.5, -2.0, 3.0];
        assert_eq!(matvec(&Matrix::identity(3), &x).unwrap(), x);
        assert!(matvec(&Matrix::identity(2), &x).is_err());
        assert!(add(&[1.0], &[1.0, 2.0]).is_err());

        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
        assert!(matmul(&a, &Matrix::zeros(3, 1)).is_err());
        assert_eq!(outer(&[1.0, 2.0], &[3.0]).data(), &[3.0, 6.0]);
        assert_eq!(matvec_transpose(&a, &[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn forked_rngs_differ_and_repeat() {
        let base = SeedRng::new(5);
        let mut a = base.fork(1);
        let mut b = base.fork(2);
        let mut a2 = base.fork(1);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_eq!(x, a2.next_u64());
    }

    proptest! {
        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let s = softmax(&logits, None).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let t = softmax(&shifted, None).unwrap();
            for (a, b) in s.iter().zip(&t) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn masked_softmax_zeroes_masked_slots(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..10),
            seed in any::<u64>(),
        ) {
            let mut rng = SeedRng::new(seed);
            let mut mask: Vec<bool> = logits.iter().map(|_| rng.gen_bool(0.5)).collect();
            mask[0] = true;
            let s = softmax(&logits, Some(&mask)).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, m) in s.iter().zip(&mask) {
                if !m { prop_assert_eq!(*x, 0.0); }
            }
        }

        #[test]
        fn clipping_bounds_norm_and_keeps_direction(
            vals in proptest::collection::vec(-100.0f64..100.0, 1..20),
            threshold in 0.01f64..50.0,
        ) {
            let g = Matrix::from_vec(1, vals.len(), vals.clone()).unwrap();
            let out = clip_global_norm(vec![g.clone()], threshold).unwrap();
            let norm = global_norm(&out);
            prop_assert!(norm <= threshold + 1e-12);
            let n0 = global_norm([&g]);
            if n0 > 0.0 {
                let s = norm / n0;
                prop_assert!(s >= 0.0);
                for (a, b) in out[0].data().iter().zip(&vals) {
                    prop_assert!((a - s * b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn xavier_respects_bound(rows in 1usize..40, cols in 1usize..40, seed in any::<u64>()) {
            let m = xavier_init(rows, cols, seed).unwrap();
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            prop_assert!(m.data().iter().all(|x| x.abs() <= bound));
            prop_assert_eq!(m, xavier_init(rows, cols, seed).unwrap());
        }

        #[test]
        fn zero_momentum_is_plain_sgd(
            p in proptest::collection::vec(-5.0f64..5.0, 1..8),
            lr in 0.0001f64..1.0,
            seed in any::<u64>(),
        ) {
            let n = p.len();
            let mut rng = SeedRng::new(seed);
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let state = OptimizerState::new(&[(1, n)], lr, 0.0, 10.0).unwrap();
            let pm = Matrix::from_vec(1, n, p.clone()).unwrap();
            let (p2, _) = nesterov_update(
                &pm,
                &Matrix::from_vec(1, n, v).unwrap(),
                &Matrix::from_vec(1, n, g.clone()).unwrap(),
                &state,
            ).unwrap();
            for i in 0..n {
                prop_assert_eq!(p2.data()[i], p[i] - lr * g[i]);
            }
        }
    }
}
