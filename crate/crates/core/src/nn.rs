//! Dense-layer building blocks with explicit backward passes.
//!
//! Matrices are row-major `Vec<f64>`. Products go through `matrixmultiply`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// `C = alpha * op(A) * op(B) + beta * C` where `op(A)` is `m×k` and `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // row-major strides of the stored matrices
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided views require.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected layer `y = x W + b` with `W` stored `inputs × outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            inputs,
            outputs,
            w,
            b: vec![0.0; outputs],
        }
    }

    /// Forward pass over `rows` stacked inputs.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(&self.b);
        }
        gemm(rows, self.inputs, self.outputs, 1.0, x, false, &self.w, false, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Dense) -> Vec<f64> {
        gemm(self.inputs, rows, self.outputs, 1.0, x, true, dy, false, 1.0, &mut grad.w);
        for r in 0..rows {
            for (g, d) in grad.b.iter_mut().zip(&dy[r * self.outputs..(r + 1) * self.outputs]) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; rows * self.inputs];
        gemm(rows, self.outputs, self.inputs, 1.0, dy, false, &self.w, true, 0.0, &mut dx);
        dx
    }

    pub fn zero_like(&self) -> Dense {
        Dense::zeros(self.inputs, self.outputs)
    }

    pub fn params(&self) -> [&[f64]; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Normalized rows and inverse standard deviations saved for backward.
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: vec![0.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, LnCache) {
        let d = self.gain.len();
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                y[r * d + c] = h * self.gain[c] + self.bias[c];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let d = self.gain.len();
        let rows = cache.inv_std.len();
        let mut dx = vec![0.0; rows * d];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            for c in 0..d {
                grad.gain[c] += g[c] * xh[c];
                grad.bias[c] += g[c];
                dxhat[c] = g[c] * self.gain[c];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for c in 0..d {
                dx[r * d + c] = cache.inv_std[r] * (dxhat[c] - m1 - xh[c] * m2);
            }
        }
        dx
    }
}

pub fn tanh_inplace(x: &mut [f64]) {
    for v in x {
        *v = v.tanh();
    }
}

/// `dz = dy * (1 - y²)` for `y = tanh(z)`.
pub fn tanh_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(y, d)| d * (1.0 - y * y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                p[j] -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let mut rng = seed::rng(4);
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
                let r = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&r) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = seed::rng(5);
        let layer = Dense::glorot(3, 2, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        // loss = sum(y)
        let mut grad = layer.zero_like();
        let dx = layer.backward(&x, &[1.0; 4], 2, &mut grad);
        let loss = |l: &Dense, x: &[f64]| l.forward(x, 2).iter().sum::<f64>();
        let h = 1e-6;
        for i in 0..layer.w.len() {
            let mut p = layer.clone();
            p.w[i] += h;
            let mut q = layer.clone();
            q.w[i] -= h;
            assert!(((loss(&p, &x) - loss(&q, &x)) / (2.0 * h) - grad.w[i]).abs() < 1e-8);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xq = x.clone();
            xq[i] -= h;
            assert!(((loss(&layer, &xp) - loss(&layer, &xq)) / (2.0 * h) - dx[i]).abs() < 1e-8);
        }
        assert_eq!(grad.b, vec![2.0, 2.0]);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = seed::rng(6);
        let mut ln = LayerNorm::new(5);
        ln.gain.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        ln.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let wts: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |l: &LayerNorm, x: &[f64]| l.forward(x, 2).0.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = ln.forward(&x, 2);
        // normalized rows have zero mean
        assert!(cache.xhat[..5].iter().sum::<f64>().abs() < 1e-12);
        let mut grad = LayerNorm::zeros(5);
        let dx = ln.backward(&cache, &wts, &mut grad);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xq = x.clone();
            xq[i] -= h;
            assert!(((loss(&ln, &xp) - loss(&ln, &xq)) / (2.0 * h) - dx[i]).abs() < 1e-7);
        }
        for i in 0..5 {
            let mut p = ln.clone();
            p.gain[i] += h;
            let mut q = ln.clone();
            q.gain[i] -= h;
            assert!(((loss(&p, &x) - loss(&q, &x)) / (2.0 * h) - grad.gain[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![vec![3.0, -2.0]];
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, &[2]);
        for _ in 0..2000 {
            let g: Vec<f64> = p[0].iter().map(|x| 2.0 * x).collect();
            opt.step(vec![&mut p[0]], vec![&g]);
        }
        assert!(p[0].iter().all(|x| x.abs() < 1e-3));
    }
}
