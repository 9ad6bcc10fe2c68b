//! Dense layers with hand-written batched backpropagation.
//!
//! Batches are row-major `(batch, features)` matrices. Every forward has a
//! `*_cached` twin that keeps the intermediates its backward needs.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Normal draw truncated at two standard deviations.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| truncated_normal(rng, std)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }
}

/// Two dense layers with a SiLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct Mlp2Cache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl Mlp2 {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            l1: Linear::init(rng, d_in, d_hidden),
            l2: Linear::init(rng, d_hidden, d_out),
        }
    }

    /// Same as [`Mlp2::init`] but with a zero output layer.
    pub fn init_zero_out<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            l1: Linear::init(rng, d_in, d_hidden),
            l2: Linear::zeros(d_hidden, d_out),
        }
    }

    pub fn d_out(&self) -> usize {
        self.l2.fan_out()
    }

    pub fn d_in(&self) -> usize {
        self.l1.fan_in()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let h = self.l1.forward(x).mapv_into(silu);
        self.l2.forward(h.view())
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, Mlp2Cache) {
        let pre = self.l1.forward(x);
        let hidden = pre.mapv(silu);
        let out = self.l2.forward(hidden.view());
        (
            out,
            Mlp2Cache {
                input: x.to_owned(),
                pre,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &Mlp2Cache, dy: ArrayView2<f64>, grad: &mut Mlp2) -> Array2<f64> {
        let dh = self.l2.backward(cache.hidden.view(), dy, &mut grad.l2);
        let dpre = dh * &cache.pre.mapv(silu_grad);
        self.l1.backward(cache.input.view(), dpre.view(), &mut grad.l1)
    }

    pub fn n_params(&self) -> usize {
        self.l1.n_params() + self.l2.n_params()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            l1: self.l1.zeros_like(),
            l2: self.l2.zeros_like(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silu_grad_matches_difference_quotient() {
        for &x in &[-4.0, -0.3, 0.0, 0.7, 5.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn truncated_init_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::init(&mut rng, 16, 64);
        let bound = 2.0 / 4.0;
        assert!(l.weight.iter().all(|w| w.abs() <= bound));
        assert!(l.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp2::init(&mut rng, 3, 5, 2);
        let x = Array2::from_shape_vec((2, 3), vec![0.3, -0.2, 1.1, -0.7, 0.5, 0.05]).unwrap();
        // L = sum(y * r) for a fixed r
        let r = Array2::from_shape_vec((2, 2), vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let (_, cache) = mlp.forward_cached(x.view());
        let mut g = mlp.zeros_like();
        let dx = mlp.backward(&cache, r.view(), &mut g);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = ((mlp.forward(xp.view()) * &r).sum() - (mlp.forward(xm.view()) * &r).sum()) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
