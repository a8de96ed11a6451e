//! Small dense-vector helpers shared by the models.
//!
//! Everything here works on plain `f64` slices in row-major layout. The models in this crate are
//! tiny, so explicit loops are both fast enough and easy to differentiate by hand.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for a `(seed, stream)` pair. Distinct streams never share output.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`. A zero vector is returned unchanged.
pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n > 0.0 {
        a.iter().map(|x| x / n).collect()
    } else {
        a.to_vec()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Backward pass of `y = x / ‖x‖` given `y` and `‖x‖`.
pub fn normalize_backward(y: &[f64], n: f64, dy: &[f64]) -> Vec<f64> {
    let proj = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(yi, dyi)| (dyi - proj * yi) / n)
        .collect()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    out
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
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

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Index of the smallest value; the lowest index wins ties.
pub fn argmin(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, v) in xs.into_iter().enumerate() {
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        axpy(1.0, r, &mut out);
    }
    let n = rows.len().max(1) as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Dense affine map `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            w: vec![0.0; input * output],
            b: vec![0.0; output],
        }
    }

    /// Gaussian init with standard deviation `scale / sqrt(input)`.
    pub fn random(input: usize, output: usize, scale: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let std = scale / (input as f64).sqrt();
        let w = (0..input * output)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            input,
            output,
            w,
            b: vec![0.0; output],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.w[o * self.input..(o + 1) * self.input]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        (0..self.output)
            .map(|o| self.b[o] + dot(self.row(o), x))
            .collect()
    }

    /// `Wᵀ y`, no bias.
    pub fn transpose_apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input];
        for (o, &yo) in y.iter().enumerate() {
            if yo != 0.0 {
                axpy(yo, self.row(o), &mut out);
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            let row = &mut grad.w[o * self.input..(o + 1) * self.input];
            axpy(g, x, row);
        }
        self.transpose_apply(dy)
    }
}

/// Collection of trainable tensors that can be flattened, zeroed and stepped.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (t, o) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, o, t);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= alpha;
            }
        }
    }

    fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| dot(t, t)).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl ParamSet for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Plain gradient descent with optional global-norm clipping.
///
/// Returns the (pre-clipping) gradient norm. A zero learning rate leaves `params` bit-identical.
pub fn sgd_step<P: ParamSet>(params: &mut P, grads: &P, lr: f64, clip: Option<f64>) -> f64 {
    let gnorm = grads.sq_norm().sqrt();
    if lr == 0.0 {
        return gnorm;
    }
    let factor = match clip {
        Some(c) if gnorm > c => c / gnorm,
        _ => 1.0,
    };
    params.add_scaled(-lr * factor, grads);
    gnorm
}

/// Learning-rate schedule for the training loops.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing from the base rate down to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_matches_log_softmax() {
        let xs = [1.0, -2.0, 0.5, 3.0];
        let p = softmax(&xs);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for (pi, li) in p.iter().zip(log_softmax(&xs)) {
            assert!((pi.ln() - li).abs() < 1e-12);
        }
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin([2.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[3.0, 1.0, 3.0]), 0);
    }

    #[test]
    fn linear_backward_matches_definition() {
        let mut rng = rng_for(1, 0);
        let lin = Linear::random(3, 2, 1.0, &mut rng);
        let x = [0.3, -0.2, 0.9];
        let dy = [1.0, -0.5];
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &dy, &mut g);
        for i in 0..3 {
            let expect = lin.w[i] * dy[0] + lin.w[3 + i] * dy[1];
            assert!((dx[i] - expect).abs() < 1e-15);
        }
        assert_eq!(g.b, dy.to_vec());
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut rng = rng_for(2, 0);
        let mut lin = Linear::random(4, 4, 1.0, &mut rng);
        let before = lin.clone();
        let g = Linear::random(4, 4, 1.0, &mut rng);
        sgd_step(&mut lin, &g, 0.0, Some(1.0));
        assert_eq!(lin, before);
    }
}
