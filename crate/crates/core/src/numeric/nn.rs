//! Layers with hand-written backward passes.
//!
//! Every trainable struct implements [`Parameters`], which exposes its tensors
//! as flat slices in a fixed order. Gradients are stored in a second instance
//! of the same struct (see [`Parameters::zeros_like`]), so the optimizer and
//! the gradient checker can walk parameters and gradients in lockstep.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub trait Parameters: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |s| s.fill(0.0));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter vector has wrong length");
    }

    /// `self += scale * other`, element-wise over all parameters.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let mut src = Vec::new();
        other.visit(&mut |s| src.push(s.to_vec()));
        let mut i = 0;
        self.visit_mut(&mut |s| {
            for (a, b) in s.iter_mut().zip(&src[i]) {
                *a += scale * b;
            }
            i += 1;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|x| x.is_finite()));
        ok
    }
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Affine map `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: random_matrix(input, output, 1.0 / (input as f64).sqrt(), rng),
            b: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w: Array2::eye(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yj, wij) in y.iter_mut().zip(self.w.row(i)) {
                *yj += xi * wij;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(slice2(&self.w));
        f(slice1(&self.b));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice2_mut(&mut self.w));
        f(slice1_mut(&mut self.b));
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Saved activations for [`LayerNorm::backward`].
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn normalize(x: &ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
            let m = row.sum() / d;
            row -= m;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        (xhat, inv)
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let (xhat, _) = Self::normalize(x);
        xhat * &self.gamma + &self.beta
    }

    pub fn forward_train(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (xhat, inv_std) = Self::normalize(x);
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for t in 0..dy.nrows() {
            let g = dxhat.row(t);
            let xh = cache.xhat.row(t);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let s = cache.inv_std[t];
            for j in 0..dy.ncols() {
                dx[[t, j]] = s * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(slice1(&self.gamma));
        f(slice1(&self.beta));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice1_mut(&mut self.gamma));
        f(slice1_mut(&mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Two-layer perceptron `Linear -> GELU -> Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(input, hidden, rng),
            fc2: Linear::new(hidden, output, rng),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let act = self.fc1.forward(x).mapv(gelu);
        self.fc2.forward(&act.view())
    }

    pub fn forward_train(&self, x: &ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act.view());
        (y, MlpCache { pre, act })
    }

    pub fn backward(&self, x: &ArrayView2<f64>, cache: &MlpCache, dy: &ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dact = self.fc2.backward(&cache.act.view(), dy, &mut grad.fc2);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.fc1.backward(x, &dpre.view(), &mut grad.fc1)
    }
}

impl Parameters for Mlp {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, rng::stream_rng};

    fn weighted_sum(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn mlp_and_layer_norm_gradients() {
        let mut rng = stream_rng(3, "nn-test");
        let x = random_matrix(3, 5, 1.0, &mut rng);
        let w = random_matrix(3, 4, 1.0, &mut rng);
        let mlp = Mlp::new(5, 6, 4, &mut rng);
        let mut ln = LayerNorm::new(4);
        ln.gamma = Array1::from_vec(vec![0.5, 1.5, -0.3, 1.0]);
        ln.beta = Array1::from_vec(vec![0.1, 0.0, 0.2, -0.4]);

        #[derive(Clone)]
        struct Net(Mlp, LayerNorm);
        impl Parameters for Net {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
                self.0.visit(f);
                self.1.visit(f);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
                self.0.visit_mut(f);
                self.1.visit_mut(f);
            }
        }
        let net = Net(mlp, ln);
        let loss = |flat: &[f64]| {
            let mut n = net.clone();
            n.assign(flat);
            let (h, mc) = n.0.forward_train(&x.view());
            let (y, lc) = n.1.forward_train(&h.view());
            let value = weighted_sum(&y, &w);
            let mut g = n.zeros_like();
            let dh = n.1.backward(&lc, &w.view(), &mut g.1);
            n.0.backward(&x.view(), &mc, &dh.view(), &mut g.0);
            (value, g.flatten())
        };
        let err = grad_check(loss, &net.flatten(), 1e-6).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }
}
