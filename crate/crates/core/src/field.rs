//! The velocity-field interface the samplers drive, with two
//! implementations: the trained network and an analytic stand-in.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2};

use crate::conditioning::{CondSource, Embedding};
use crate::error::{Error, Result};
use crate::model::VelocityModel;
use crate::world::{self, LatentState, PromptSpec, WorldSpec, DIM};

pub trait VelocityField {
    fn embed_prompt(&self, prompt: &PromptSpec) -> Result<Embedding>;

    fn null_embedding(&self) -> Embedding;

    /// One network evaluation per row of `xs`, all at time `t`. With
    /// `guidance` the scale is injected into the condition (single pass).
    fn velocity(
        &self,
        xs: ArrayView2<f64>,
        t: f64,
        c: &Embedding,
        null: &Embedding,
        guidance: Option<f64>,
    ) -> Result<Array2<f64>>;

    /// Row-wise evaluation with per-row time, prompt and (optional)
    /// injected guidance scale. One network evaluation per row.
    fn velocity_rows(
        &self,
        xs: ArrayView2<f64>,
        ts: &[f64],
        prompts: &[PromptSpec],
        guidance: Option<&[f64]>,
    ) -> Result<Array2<f64>>;

    /// Whether single-pass guided evaluation is meaningful for this field.
    fn supports_fused(&self) -> bool;

    fn forward_count(&self) -> u64;
}

impl VelocityField for VelocityModel {
    fn embed_prompt(&self, prompt: &PromptSpec) -> Result<Embedding> {
        self.conditioner().embed_prompt(prompt)
    }

    fn null_embedding(&self) -> Embedding {
        self.conditioner().null_embedding()
    }

    fn velocity(
        &self,
        xs: ArrayView2<f64>,
        t: f64,
        c: &Embedding,
        null: &Embedding,
        guidance: Option<f64>,
    ) -> Result<Array2<f64>> {
        self.predict(xs, t, c, null, guidance)
    }

    fn velocity_rows(
        &self,
        xs: ArrayView2<f64>,
        ts: &[f64],
        prompts: &[PromptSpec],
        guidance: Option<&[f64]>,
    ) -> Result<Array2<f64>> {
        let zs = self.conditions(ts, CondSource::Prompts(prompts), guidance)?;
        self.forward_batch(xs, zs.view())
    }

    fn supports_fused(&self) -> bool {
        self.variant.is_some()
    }

    fn forward_count(&self) -> u64 {
        VelocityModel::forward_count(self)
    }
}

/// What the analytic field returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOutput {
    /// `E[eps - x0 | x_t]`.
    Velocity,
    /// `grad log p_t`.
    Score,
}

/// Closed-form stand-in for a network. Prompts are embedded as one-hot
/// blocks `[row tokens, row MASK, col tokens, col MASK]` so embeddings decode
/// back to prompts exactly. A guided call returns the exact guided quantity.
#[derive(Debug)]
pub struct OracleField {
    pub world: WorldSpec,
    pub output: OracleOutput,
    count: AtomicU64,
}

impl OracleField {
    pub fn new(world: WorldSpec, output: OracleOutput) -> Self {
        Self {
            world,
            output,
            count: AtomicU64::new(0),
        }
    }

    fn dim(&self) -> usize {
        self.world.rows + self.world.cols + 2
    }

    fn decode(&self, c: &Embedding) -> Result<PromptSpec> {
        if c.dim() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: c.dim(),
            });
        }
        let argmax = |lo: usize, hi: usize| {
            (lo..hi)
                .max_by(|&a, &b| c.0[a].total_cmp(&c.0[b]))
                .expect("nonempty block")
                - lo
        };
        let (r, cc) = (self.world.rows, self.world.cols);
        let row = argmax(0, r + 1);
        let col = argmax(r + 1, r + cc + 2);
        Ok(PromptSpec {
            row: (row < r).then_some(row),
            col: (col < cc).then_some(col),
        })
    }

    fn point(&self, prompt: &PromptSpec, state: &LatentState) -> Result<[f64; DIM]> {
        match self.output {
            OracleOutput::Velocity => world::true_velocity(&self.world, prompt, state),
            OracleOutput::Score => world::true_score(&self.world, prompt, state),
        }
    }
}

impl VelocityField for OracleField {
    fn embed_prompt(&self, prompt: &PromptSpec) -> Result<Embedding> {
        self.world.validate_prompt(prompt)?;
        let mut v = Array1::zeros(self.dim());
        let (r, c) = (self.world.rows, self.world.cols);
        v[prompt.row.unwrap_or(r)] += 1.0;
        v[r + 1 + prompt.col.unwrap_or(c)] += 1.0;
        Ok(Embedding(v))
    }

    fn null_embedding(&self) -> Embedding {
        self.embed_prompt(&PromptSpec::NULL).expect("null prompt is valid")
    }

    fn velocity(
        &self,
        xs: ArrayView2<f64>,
        t: f64,
        c: &Embedding,
        _null: &Embedding,
        guidance: Option<f64>,
    ) -> Result<Array2<f64>> {
        let prompt = self.decode(c)?;
        self.count.fetch_add(xs.nrows() as u64, Ordering::Relaxed);
        let mut out = Array2::zeros((xs.nrows(), DIM));
        for (mut o, x) in out.rows_mut().into_iter().zip(xs.rows()) {
            let state = LatentState::new([x[0], x[1]], t)?;
            let v = match guidance {
                None => self.point(&prompt, &state)?,
                Some(w) => {
                    let a = self.point(&prompt, &state)?;
                    let b = self.point(&PromptSpec::NULL, &state)?;
                    [(1.0 + w) * a[0] - w * b[0], (1.0 + w) * a[1] - w * b[1]]
                }
            };
            o[0] = v[0];
            o[1] = v[1];
        }
        Ok(out)
    }

    fn velocity_rows(
        &self,
        xs: ArrayView2<f64>,
        ts: &[f64],
        prompts: &[PromptSpec],
        guidance: Option<&[f64]>,
    ) -> Result<Array2<f64>> {
        if ts.len() != xs.nrows() || prompts.len() != xs.nrows() {
            return Err(Error::Shape {
                expected: xs.nrows(),
                got: ts.len().min(prompts.len()),
            });
        }
        self.count.fetch_add(xs.nrows() as u64, Ordering::Relaxed);
        let mut out = Array2::zeros((xs.nrows(), DIM));
        for (i, (mut o, x)) in out.rows_mut().into_iter().zip(xs.rows()).enumerate() {
            let state = LatentState::new([x[0], x[1]], ts[i])?;
            let a = self.point(&prompts[i], &state)?;
            let v = match guidance {
                None => a,
                Some(ws) => {
                    let b = self.point(&PromptSpec::NULL, &state)?;
                    [(1.0 + ws[i]) * a[0] - ws[i] * b[0], (1.0 + ws[i]) * a[1] - ws[i] * b[1]]
                }
            };
            o[0] = v[0];
            o[1] = v[1];
        }
        Ok(out)
    }

    fn supports_fused(&self) -> bool {
        true
    }

    fn forward_count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_embeddings_decode_exactly() {
        let f = OracleField::new(WorldSpec::default(), OracleOutput::Velocity);
        for p in [PromptSpec::new(1, 0), PromptSpec::NULL, "*,1".parse().unwrap()] {
            assert_eq!(f.decode(&f.embed_prompt(&p).unwrap()).unwrap(), p);
        }
    }
}
