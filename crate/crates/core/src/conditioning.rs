//! Prompt embeddings and the condition vector fed to the velocity trunk.
//!
//! The plain condition is `z = G(psi(t)) + F(c)`. Guidance-distilled models
//! additionally inject the guidance scale `w`:
//!
//! * fused (no new parameters): `z + G(psi(w)) * F(c - null)`, elementwise;
//! * baseline MLP: `z + M(psi(w))` with an extra two-layer `M`.
//!
//! `psi` is the interleaved sine/cosine encoding applied to the raw value.

use std::ops::{Add, Mul, Sub};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Mlp2, Mlp2Cache};
use crate::world::PromptSpec;

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_SINUSOID_DIM: usize = 32;
pub const DEFAULT_COND_DIM: usize = 32;
pub const SINUSOID_BASE_PERIOD: f64 = 10_000.0;

/// A point in prompt-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Array1<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Self(Array1::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot = self.0.dot(&other.0);
        let na = self.0.dot(&self.0).sqrt();
        let nb = other.0.dot(&other.0).sqrt();
        dot / (na * nb)
    }

    /// Repeats the embedding as `n` identical rows.
    pub fn broadcast_rows(&self, n: usize) -> Array2<f64> {
        self.0
            .view()
            .insert_axis(Axis(0))
            .broadcast((n, self.dim()))
            .expect("row broadcast")
            .to_owned()
    }
}

impl Add<&Embedding> for &Embedding {
    type Output = Embedding;
    fn add(self, rhs: &Embedding) -> Embedding {
        Embedding(&self.0 + &rhs.0)
    }
}

impl Sub<&Embedding> for &Embedding {
    type Output = Embedding;
    fn sub(self, rhs: &Embedding) -> Embedding {
        Embedding(&self.0 - &rhs.0)
    }
}

impl Mul<f64> for &Embedding {
    type Output = Embedding;
    fn mul(self, rhs: f64) -> Embedding {
        Embedding(&self.0 * rhs)
    }
}

/// Embedding-space guidance `c + w (c - null)`.
pub fn fuse_raw(c: &Embedding, null: &Embedding, w: f64) -> Embedding {
    c + &(&(c - null) * w)
}

/// Interleaved `[sin(v f_0), cos(v f_0), sin(v f_1), ...]` with
/// `f_i = 10000^(-2i/dim)`.
pub fn sinusoid(value: f64, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("sinusoid dimension must be even and > 0, got {dim}")));
    }
    let mut out = Array1::zeros(dim);
    fill_sinusoid(value, out.as_slice_mut().unwrap());
    Ok(out)
}

fn fill_sinusoid(value: f64, out: &mut [f64]) {
    let dim = out.len();
    for i in 0..dim / 2 {
        let freq = SINUSOID_BASE_PERIOD.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (value * freq).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

fn sinusoid_rows(values: &[f64], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((values.len(), dim));
    for (mut row, &v) in out.rows_mut().into_iter().zip(values) {
        fill_sinusoid(v, row.as_slice_mut().unwrap());
    }
    out
}

/// How the guidance scale enters the condition, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    None,
    Fused,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionerParams {
    pub rows: usize,
    pub cols: usize,
    /// Rows: row tokens, then col tokens, then the row MASK and col MASK.
    pub token_table: Array2<f64>,
    /// `F`: embedding -> condition.
    pub text_mlp: Mlp2,
    /// `G`: sinusoid -> condition.
    pub sinusoid_mlp: Mlp2,
    /// Extra guidance MLP of the baseline student; absent otherwise.
    pub guidance_mlp: Option<Mlp2>,
    pub sinusoid_dim: usize,
}

/// Per-row inputs to a batched condition computation.
#[derive(Debug, Clone, Copy)]
pub enum CondSource<'a> {
    /// Token-level prompts; gradients reach the token table.
    Prompts(&'a [PromptSpec]),
    /// Raw embeddings, one row per example.
    Embeddings {
        c: ArrayView2<'a, f64>,
        null: &'a Embedding,
    },
}

impl CondSource<'_> {
    fn len(&self) -> usize {
        match self {
            CondSource::Prompts(p) => p.len(),
            CondSource::Embeddings { c, .. } => c.nrows(),
        }
    }
}

pub struct CondCache {
    tokens: Option<Vec<[usize; 2]>>,
    time: Mlp2Cache,
    text: Mlp2Cache,
    fused: Option<FusedCache>,
    guidance: Option<Mlp2Cache>,
}

struct FusedCache {
    gw: Array2<f64>,
    gw_cache: Mlp2Cache,
    fd: Array2<f64>,
    fd_cache: Mlp2Cache,
}

impl ConditionerParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        rows: usize,
        cols: usize,
        embed_dim: usize,
        sinusoid_dim: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        if sinusoid_dim == 0 || sinusoid_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoid dimension must be even and > 0, got {sinusoid_dim}"
            )));
        }
        let token_table = Array2::from_shape_fn((rows + cols + 2, embed_dim), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z.clamp(-2.0, 2.0)
        });
        Ok(Self {
            rows,
            cols,
            token_table,
            text_mlp: Mlp2::init(rng, embed_dim, cond_dim, cond_dim),
            sinusoid_mlp: Mlp2::init(rng, sinusoid_dim, cond_dim, cond_dim),
            guidance_mlp: None,
            sinusoid_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.token_table.ncols()
    }

    pub fn cond_dim(&self) -> usize {
        self.text_mlp.d_out()
    }

    pub fn injection(&self) -> Injection {
        if self.guidance_mlp.is_some() {
            Injection::Mlp
        } else {
            Injection::Fused
        }
    }

    fn mask_row(&self) -> usize {
        self.rows + self.cols
    }

    fn mask_col(&self) -> usize {
        self.rows + self.cols + 1
    }

    fn token_rows(&self, prompt: &PromptSpec) -> Result<[usize; 2]> {
        let row = match prompt.row {
            Some(r) if r < self.rows => r,
            Some(r) => return Err(Error::InvalidPrompt(format!("unknown row token {r}"))),
            None => self.mask_row(),
        };
        let col = match prompt.col {
            Some(c) if c < self.cols => self.rows + c,
            Some(c) => return Err(Error::InvalidPrompt(format!("unknown col token {c}"))),
            None => self.mask_col(),
        };
        Ok([row, col])
    }

    /// Sum of the per-factor token embeddings.
    pub fn embed_prompt(&self, prompt: &PromptSpec) -> Result<Embedding> {
        let [r, c] = self.token_rows(prompt)?;
        Ok(Embedding(&self.token_table.row(r) + &self.token_table.row(c)))
    }

    pub fn null_embedding(&self) -> Embedding {
        self.embed_prompt(&PromptSpec::NULL).expect("mask tokens always exist")
    }

    /// `G(psi(v))` for a single value.
    pub fn encode_scalar(&self, v: f64) -> Array1<f64> {
        let psi = sinusoid_rows(&[v], self.sinusoid_dim);
        self.sinusoid_mlp.forward(psi.view()).row(0).to_owned()
    }

    pub fn text_features(&self, c: &Embedding) -> Array1<f64> {
        self.text_mlp
            .forward(c.view().insert_axis(Axis(0)))
            .row(0)
            .to_owned()
    }

    /// `G(psi(t)) + F(c)`.
    pub fn joint_embedding(&self, t: f64, c: &Embedding) -> Result<Array1<f64>> {
        check_time(t)?;
        self.check_embedding(c)?;
        Ok(self.encode_scalar(t) + self.text_features(c))
    }

    /// `G(psi(t)) + F(c) + G(psi(w)) * F(c - null)`.
    pub fn fused_joint_embedding(&self, t: f64, c: &Embedding, null: &Embedding, w: f64) -> Result<Array1<f64>> {
        let z = self.joint_embedding(t, c)?;
        self.check_embedding(null)?;
        Ok(z + self.encode_scalar(w) * self.text_features(&(c - null)))
    }

    fn check_embedding(&self, c: &Embedding) -> Result<()> {
        if c.dim() != self.embed_dim() {
            return Err(Error::Shape {
                expected: self.embed_dim(),
                got: c.dim(),
            });
        }
        if !c.is_finite() {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(())
    }

    /// Batched condition vectors. With `guidance` set, the scale is injected
    /// according to [`ConditionerParams::injection`].
    pub fn condition_batch(&self, ts: &[f64], source: CondSource<'_>, guidance: Option<&[f64]>) -> Result<Array2<f64>> {
        Ok(self.condition_batch_cached(ts, source, guidance)?.0)
    }

    pub fn condition_batch_cached(
        &self,
        ts: &[f64],
        source: CondSource<'_>,
        guidance: Option<&[f64]>,
    ) -> Result<(Array2<f64>, CondCache)> {
        let n = source.len();
        if ts.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: ts.len(),
            });
        }
        if let Some(ws) = guidance {
            if ws.len() != n {
                return Err(Error::Shape {
                    expected: n,
                    got: ws.len(),
                });
            }
        }
        for &t in ts {
            check_time(t)?;
        }
        let d = self.embed_dim();
        let (c, null, tokens) = match source {
            CondSource::Prompts(prompts) => {
                let tokens = prompts.iter().map(|p| self.token_rows(p)).collect::<Result<Vec<_>>>()?;
                let mut c = Array2::zeros((n, d));
                for (mut row, [a, b]) in c.rows_mut().into_iter().zip(&tokens) {
                    row.assign(&(&self.token_table.row(*a) + &self.token_table.row(*b)));
                }
                (c, self.null_embedding(), Some(tokens))
            }
            CondSource::Embeddings { c, null } => {
                if c.ncols() != d {
                    return Err(Error::Shape {
                        expected: d,
                        got: c.ncols(),
                    });
                }
                self.check_embedding(null)?;
                (c.to_owned(), null.clone(), None)
            }
        };

        let psi_t = sinusoid_rows(ts, self.sinusoid_dim);
        let (gt, time) = self.sinusoid_mlp.forward_cached(psi_t.view());
        let (fc, text) = self.text_mlp.forward_cached(c.view());
        let mut z = gt + fc;

        let mut fused = None;
        let mut guidance_cache = None;
        if let Some(ws) = guidance {
            let psi_w = sinusoid_rows(ws, self.sinusoid_dim);
            match &self.guidance_mlp {
                Some(mlp) => {
                    let (m, cache) = mlp.forward_cached(psi_w.view());
                    z += &m;
                    guidance_cache = Some(cache);
                }
                None => {
                    let (gw, gw_cache) = self.sinusoid_mlp.forward_cached(psi_w.view());
                    let diff = &c - &null.0;
                    let (fd, fd_cache) = self.text_mlp.forward_cached(diff.view());
                    z += &(&gw * &fd);
                    fused = Some(FusedCache {
                        gw,
                        gw_cache,
                        fd,
                        fd_cache,
                    });
                }
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite condition vector".into()));
        }
        Ok((
            z,
            CondCache {
                tokens,
                time,
                text,
                fused,
                guidance: guidance_cache,
            },
        ))
    }

    /// Accumulates `dL/dparams` given `dL/dz`. The token table only receives
    /// gradient when the batch was built from prompts.
    pub fn backward(&self, cache: &CondCache, dz: ArrayView2<f64>, grad: &mut ConditionerParams) {
        self.sinusoid_mlp.backward(&cache.time, dz, &mut grad.sinusoid_mlp);
        let mut dc = self.text_mlp.backward(&cache.text, dz, &mut grad.text_mlp);
        let mut dnull: Option<Array2<f64>> = None;
        if let Some(f) = &cache.fused {
            let dgw = &dz * &f.fd;
            self.sinusoid_mlp.backward(&f.gw_cache, dgw.view(), &mut grad.sinusoid_mlp);
            let dfd = &dz * &f.gw;
            let ddiff = self.text_mlp.backward(&f.fd_cache, dfd.view(), &mut grad.text_mlp);
            dc += &ddiff;
            dnull = Some(ddiff);
        }
        if let (Some(mlp), Some(c)) = (&self.guidance_mlp, &cache.guidance) {
            let g = grad.guidance_mlp.as_mut().expect("gradient mirrors guidance mlp");
            mlp.backward(c, dz, g);
        }
        if let Some(tokens) = &cache.tokens {
            for (i, [a, b]) in tokens.iter().enumerate() {
                let row = dc.row(i);
                let mut ga = grad.token_table.row_mut(*a);
                ga += &row;
                let mut gb = grad.token_table.row_mut(*b);
                gb += &row;
            }
            if let Some(dn) = dnull {
                let total = dn.sum_axis(Axis(0));
                let (mr, mc) = (self.mask_row(), self.mask_col());
                let mut g = grad.token_table.slice_mut(s![mr..=mc, ..]);
                for mut row in g.rows_mut() {
                    row -= &total;
                }
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            token_table: Array2::zeros(self.token_table.raw_dim()),
            text_mlp: self.text_mlp.zeros_like(),
            sinusoid_mlp: self.sinusoid_mlp.zeros_like(),
            guidance_mlp: self.guidance_mlp.as_ref().map(Mlp2::zeros_like),
            sinusoid_dim: self.sinusoid_dim,
        }
    }

    pub fn n_params(&self) -> usize {
        self.token_table.len()
            + self.text_mlp.n_params()
            + self.sinusoid_mlp.n_params()
            + self.guidance_mlp.as_ref().map_or(0, Mlp2::n_params)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("condition time {t} outside [0, 1]")));
    }
    Ok(())
}
