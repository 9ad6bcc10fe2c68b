//! The conditional velocity network.
//!
//! The trunk sees `[x, z]` at its input and, in addition, every hidden
//! pre-activation receives `z U_k` from a bias-free linear map. The output
//! layer starts at zero so an untrained model predicts zero velocity.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    CondCache, CondSource, ConditionerParams, Embedding, Injection, DEFAULT_COND_DIM,
    DEFAULT_EMBED_DIM, DEFAULT_SINUSOID_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{silu, silu_grad, Linear, Mlp2};
use crate::world::{Point, WorldSpec, DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub sinusoid_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            sinusoid_dim: DEFAULT_SINUSOID_DIM,
            cond_dim: DEFAULT_COND_DIM,
            hidden: 128,
            hidden_layers: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sinusoid_dim == 0 || self.sinusoid_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model.sinusoid_dim must be even and > 0, got {}",
                self.sinusoid_dim
            )));
        }
        if self.embed_dim == 0 || self.cond_dim == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    /// `(DIM + cond_dim) -> hidden`, then `hidden -> hidden` for the rest.
    pub layers: Vec<Linear>,
    /// One `cond_dim -> hidden` map per hidden layer.
    pub cond_maps: Vec<Array2<f64>>,
    pub output: Linear,
}

impl Trunk {
    fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let mut layers = vec![Linear::init(rng, DIM + cfg.cond_dim, cfg.hidden)];
        for _ in 1..cfg.hidden_layers {
            layers.push(Linear::init(rng, cfg.hidden, cfg.hidden));
        }
        let std = 1.0 / (cfg.cond_dim as f64).sqrt();
        let cond_maps = (0..cfg.hidden_layers)
            .map(|_| {
                Array2::from_shape_fn((cfg.cond_dim, cfg.hidden), |_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z.clamp(-2.0, 2.0) * std
                })
            })
            .collect();
        Self {
            layers,
            cond_maps,
            output: Linear::zeros(cfg.hidden, DIM),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
            cond_maps: self.cond_maps.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            output: self.output.zeros_like(),
        }
    }

    fn n_params(&self) -> usize {
        self.layers.iter().map(Linear::n_params).sum::<usize>()
            + self.cond_maps.iter().map(Array2::len).sum::<usize>()
            + self.output.n_params()
    }

    fn forward(&self, xs: ArrayView2<f64>, zs: ArrayView2<f64>) -> Array2<f64> {
        let mut h = concatenate(Axis(1), &[xs, zs]).expect("row counts checked by caller");
        for (layer, u) in self.layers.iter().zip(&self.cond_maps) {
            let pre = layer.forward(h.view()) + zs.dot(u);
            h = pre.mapv_into(silu);
        }
        self.output.forward(h.view())
    }

    /// Returns `(output, inputs per layer, pre-activations per layer)`.
    fn forward_cached(&self, xs: ArrayView2<f64>, zs: ArrayView2<f64>) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = concatenate(Axis(1), &[xs, zs]).expect("row counts checked by caller");
        for (layer, u) in self.layers.iter().zip(&self.cond_maps) {
            let pre = layer.forward(h.view()) + zs.dot(u);
            let next = pre.mapv(silu);
            inputs.push(h);
            pres.push(pre);
            h = next;
        }
        let out = self.output.forward(h.view());
        inputs.push(h);
        (out, inputs, pres)
    }
}

/// Every trainable array of a velocity model. Also used as the gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conditioner: ConditionerParams,
    pub trunk: Trunk,
}

/// A named parameter array; shapes are row-major.
pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn push_linear<'a>(out: &mut Vec<Tensor<'a>>, name: &str, l: &'a Linear) {
    out.push(Tensor {
        name: format!("{name}.weight"),
        shape: l.weight.shape().to_vec(),
        data: l.weight.as_slice().expect("standard layout"),
    });
    out.push(Tensor {
        name: format!("{name}.bias"),
        shape: l.bias.shape().to_vec(),
        data: l.bias.as_slice().expect("standard layout"),
    });
}

fn push_linear_mut<'a>(out: &mut Vec<TensorMut<'a>>, name: &str, l: &'a mut Linear) {
    out.push(TensorMut {
        name: format!("{name}.weight"),
        shape: l.weight.shape().to_vec(),
        data: l.weight.as_slice_mut().expect("standard layout"),
    });
    out.push(TensorMut {
        name: format!("{name}.bias"),
        shape: l.bias.shape().to_vec(),
        data: l.bias.as_slice_mut().expect("standard layout"),
    });
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            conditioner: self.conditioner.zeros_like(),
            trunk: self.trunk.zeros_like(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.conditioner.n_params() + self.trunk.n_params()
    }

    /// Named arrays in canonical order.
    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let c = &self.conditioner;
        let mut out = vec![Tensor {
            name: "conditioner.token_table".into(),
            shape: c.token_table.shape().to_vec(),
            data: c.token_table.as_slice().expect("standard layout"),
        }];
        push_linear(&mut out, "conditioner.text_mlp.l1", &c.text_mlp.l1);
        push_linear(&mut out, "conditioner.text_mlp.l2", &c.text_mlp.l2);
        push_linear(&mut out, "conditioner.sinusoid_mlp.l1", &c.sinusoid_mlp.l1);
        push_linear(&mut out, "conditioner.sinusoid_mlp.l2", &c.sinusoid_mlp.l2);
        if let Some(g) = &c.guidance_mlp {
            push_linear(&mut out, "conditioner.guidance_mlp.l1", &g.l1);
            push_linear(&mut out, "conditioner.guidance_mlp.l2", &g.l2);
        }
        for (i, l) in self.trunk.layers.iter().enumerate() {
            push_linear(&mut out, &format!("trunk.layers.{i}"), l);
        }
        for (i, u) in self.trunk.cond_maps.iter().enumerate() {
            out.push(Tensor {
                name: format!("trunk.cond_maps.{i}"),
                shape: u.shape().to_vec(),
                data: u.as_slice().expect("standard layout"),
            });
        }
        push_linear(&mut out, "trunk.output", &self.trunk.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let c = &mut self.conditioner;
        let mut out = vec![TensorMut {
            name: "conditioner.token_table".into(),
            shape: c.token_table.shape().to_vec(),
            data: c.token_table.as_slice_mut().expect("standard layout"),
        }];
        push_linear_mut(&mut out, "conditioner.text_mlp.l1", &mut c.text_mlp.l1);
        push_linear_mut(&mut out, "conditioner.text_mlp.l2", &mut c.text_mlp.l2);
        push_linear_mut(&mut out, "conditioner.sinusoid_mlp.l1", &mut c.sinusoid_mlp.l1);
        push_linear_mut(&mut out, "conditioner.sinusoid_mlp.l2", &mut c.sinusoid_mlp.l2);
        if let Some(g) = &mut c.guidance_mlp {
            push_linear_mut(&mut out, "conditioner.guidance_mlp.l1", &mut g.l1);
            push_linear_mut(&mut out, "conditioner.guidance_mlp.l2", &mut g.l2);
        }
        for (i, l) in self.trunk.layers.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("trunk.layers.{i}"), l);
        }
        for (i, u) in self.trunk.cond_maps.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("trunk.cond_maps.{i}"),
                shape: u.shape().to_vec(),
                data: u.as_slice_mut().expect("standard layout"),
            });
        }
        push_linear_mut(&mut out, "trunk.output", &mut self.trunk.output);
        out
    }
}

/// How the condition vectors of a training batch are obtained.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Precomputed condition vectors; no gradient reaches the conditioner.
    Fixed(ArrayView2<'a, f64>),
    /// Build the conditions inside the graph so the conditioner trains too.
    EndToEnd {
        ts: &'a [f64],
        source: CondSource<'a>,
        guidance: Option<&'a [f64]>,
    },
}

/// Which guidance-distillation scheme a student was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Guidance fused into the condition vector; no extra parameters.
    Teefusion,
    /// Extra guidance MLP added to the condition vector.
    DistillCfg,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Teefusion => "teefusion",
            Variant::DistillCfg => "distillcfg",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teefusion" => Ok(Variant::Teefusion),
            "distillcfg" | "distill-cfg" | "distill_cfg" => Ok(Variant::DistillCfg),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected teefusion|distillcfg)"))),
        }
    }
}

#[derive(Debug)]
pub struct VelocityModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Set once the model has been guidance-distilled.
    pub variant: Option<Variant>,
    forward_count: AtomicU64,
}

impl Clone for VelocityModel {
    /// Deep copy with a fresh forward counter.
    fn clone(&self) -> Self {
        let mut m = Self::from_params(self.config, self.params.clone());
        m.variant = self.variant;
        m
    }
}

impl VelocityModel {
    pub fn new(world: &WorldSpec, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conditioner = ConditionerParams::init(
            &mut rng,
            world.rows,
            world.cols,
            config.embed_dim,
            config.sinusoid_dim,
            config.cond_dim,
        )?;
        let trunk = Trunk::init(&mut rng, &config);
        Ok(Self::from_params(config, ModelParams { conditioner, trunk }))
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Self {
        Self {
            config,
            params,
            variant: None,
            forward_count: AtomicU64::new(0),
        }
    }

    /// Attaches the baseline guidance MLP (`psi(w) -> cond_dim`, zero output
    /// layer) so the model starts out identical to its conditional behaviour.
    pub fn with_guidance_mlp(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        self.params.conditioner.guidance_mlp = Some(Mlp2::init_zero_out(&mut rng, c.sinusoid_dim, c.cond_dim, c.cond_dim));
        self
    }

    pub fn conditioner(&self) -> &ConditionerParams {
        &self.params.conditioner
    }

    pub fn injection(&self) -> Injection {
        self.params.conditioner.injection()
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    fn count(&self, n: usize) {
        self.forward_count.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn check_batch(&self, xs: ArrayView2<f64>, zs: ArrayView2<f64>) -> Result<()> {
        if xs.ncols() != DIM {
            return Err(Error::Shape {
                expected: DIM,
                got: xs.ncols(),
            });
        }
        if zs.ncols() != self.config.cond_dim {
            return Err(Error::Shape {
                expected: self.config.cond_dim,
                got: zs.ncols(),
            });
        }
        if xs.nrows() != zs.nrows() {
            return Err(Error::Shape {
                expected: xs.nrows(),
                got: zs.nrows(),
            });
        }
        Ok(())
    }

    /// Velocity for one point; counts one forward pass.
    pub fn forward(&self, x: Point, z: ArrayView1<f64>) -> Result<Point> {
        let xs = Array2::from_shape_vec((1, DIM), x.to_vec()).expect("static shape");
        let out = self.forward_batch(xs.view(), z.insert_axis(Axis(0)))?;
        Ok([out[[0, 0]], out[[0, 1]]])
    }

    /// Row-wise velocities; counts one forward pass per row.
    pub fn forward_batch(&self, xs: ArrayView2<f64>, zs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(xs, zs)?;
        self.count(xs.nrows());
        let out = self.params.trunk.forward(xs, zs);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite velocity prediction".into()));
        }
        Ok(out)
    }

    /// Condition vectors for a batch (no forward passes).
    pub fn conditions(&self, ts: &[f64], source: CondSource<'_>, guidance: Option<&[f64]>) -> Result<Array2<f64>> {
        self.params.conditioner.condition_batch(ts, source, guidance)
    }

    /// Embeds `c` at time `t` for every row of `xs` and runs the trunk.
    pub fn predict(&self, xs: ArrayView2<f64>, t: f64, c: &Embedding, null: &Embedding, guidance: Option<f64>) -> Result<Array2<f64>> {
        let n = xs.nrows();
        let cs = c.broadcast_rows(n);
        let ts = vec![t; n];
        let ws = guidance.map(|w| vec![w; n]);
        let zs = self.conditions(&ts, CondSource::Embeddings { c: cs.view(), null }, ws.as_deref())?;
        self.forward_batch(xs, zs.view())
    }

    /// Mean squared error `mean_i |f(x_i, z_i) - y_i|^2` and its exact gradient.
    pub fn backward(&self, xs: ArrayView2<f64>, cond: Conditioning<'_>, targets: ArrayView2<f64>) -> Result<(ModelParams, f64)> {
        let n = xs.nrows();
        if n == 0 {
            return Err(Error::Domain("backward requires a nonempty batch".into()));
        }
        if targets.dim() != (n, DIM) {
            return Err(Error::Shape {
                expected: n * DIM,
                got: targets.len(),
            });
        }
        let (zs, cache): (Array2<f64>, Option<CondCache>) = match cond {
            Conditioning::Fixed(z) => (z.to_owned(), None),
            Conditioning::EndToEnd { ts, source, guidance } => {
                let (z, c) = self.params.conditioner.condition_batch_cached(ts, source, guidance)?;
                (z, Some(c))
            }
        };
        self.check_batch(xs, zs.view())?;
        self.count(n);
        let trunk = &self.params.trunk;
        let (out, inputs, pres) = trunk.forward_cached(xs, zs.view());
        let resid = &out - &targets;
        let loss = resid.mapv(|r| r * r).sum() / n as f64;
        if !loss.is_finite() {
            let max_t = targets.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let max_o = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(Error::Numerical(format!(
                "non-finite loss on batch of {n} (max |target| = {max_t}, max |output| = {max_o})"
            )));
        }

        let mut grad = self.params.zeros_like();
        let dout = resid * (2.0 / n as f64);
        let last = inputs.len() - 1;
        let mut dh = trunk.output.backward(inputs[last].view(), dout.view(), &mut grad.trunk.output);
        let mut dz = Array2::<f64>::zeros(zs.raw_dim());
        for k in (0..trunk.layers.len()).rev() {
            let dpre = dh * &pres[k].mapv(silu_grad);
            grad.trunk.cond_maps[k] += &zs.t().dot(&dpre);
            dz += &dpre.dot(&trunk.cond_maps[k].t());
            dh = trunk.layers[k].backward(inputs[k].view(), dpre.view(), &mut grad.trunk.layers[k]);
        }
        // First layer input is [x, z].
        dz += &dh.slice(ndarray::s![.., DIM..]);
        if let Some(cache) = cache {
            self.params.conditioner.backward(&cache, dz.view(), &mut grad.conditioner);
        }
        Ok((grad, loss))
    }

    /// MSE loss without gradients (counts forward passes).
    pub fn loss(&self, xs: ArrayView2<f64>, zs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        let out = self.forward_batch(xs, zs)?;
        Ok((&out - &targets).mapv(|r| r * r).sum() / xs.nrows() as f64)
    }
}

/// Per-row velocities from a stack of single-row condition vectors.
pub fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views).expect("equal lengths")
}
