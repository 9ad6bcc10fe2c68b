//! The synthetic conditional data distribution and its closed-form oracles.
//!
//! Data live in two dimensions. Each class is a `(row, col)` pair on a
//! rectangular grid and owns one isotropic Gaussian component centred at
//! `((col - (cols-1)/2) * spacing, (row - (rows-1)/2) * spacing)`. All classes
//! share the same prior weight.
//!
//! Noised states follow the linear path `x_t = (1-t) x0 + t eps` and the
//! velocity target is `v = eps - x0`, so sampling integrates from `t = 1`
//! towards `t = 0` by stepping along `-v`. Under that path component `k`
//! marginalizes to `N((1-t) m_k, ((1-t)^2 s^2 + t^2) I)`, which is what every
//! oracle below is built from.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIM: usize = 2;

/// A point in sample space.
pub type Point = [f64; DIM];

/// Lower bound on the time at which oracles and samplers are queried.
pub const ORACLE_T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub std: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            rows: 2,
            cols: 2,
            spacing: 4.0,
            std: 0.25,
        }
    }
}

impl WorldSpec {
    pub fn new(rows: usize, cols: usize, spacing: f64, std: f64) -> Result<Self> {
        let world = Self {
            rows,
            cols,
            spacing,
            std,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("world.rows and world.cols must be >= 1".into()));
        }
        if !(self.std.is_finite() && self.std > 0.0) {
            return Err(Error::Config(format!("world.std must be > 0, got {}", self.std)));
        }
        // Distinct means need a nonzero spacing once there is more than one class.
        if self.n_classes() > 1 && !(self.spacing.is_finite() && self.spacing != 0.0) {
            return Err(Error::Config(format!(
                "world.spacing must be nonzero, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn class_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn class_of(&self, k: usize) -> (usize, usize) {
        (k / self.cols, k % self.cols)
    }

    pub fn mean(&self, k: usize) -> Point {
        let (row, col) = self.class_of(k);
        let cx = (self.cols as f64 - 1.0) / 2.0;
        let cy = (self.rows as f64 - 1.0) / 2.0;
        [
            (col as f64 - cx) * self.spacing,
            (row as f64 - cy) * self.spacing,
        ]
    }

    /// Uniform class prior.
    pub fn prior(&self) -> Vec<f64> {
        vec![1.0 / self.n_classes() as f64; self.n_classes()]
    }

    /// Every fully specified prompt, row-major.
    pub fn full_prompts(&self) -> Vec<PromptSpec> {
        (0..self.n_classes())
            .map(|k| {
                let (r, c) = self.class_of(k);
                PromptSpec::new(r, c)
            })
            .collect()
    }

    pub fn validate_prompt(&self, prompt: &PromptSpec) -> Result<()> {
        if let Some(r) = prompt.row {
            if r >= self.rows {
                return Err(Error::InvalidPrompt(format!(
                    "row token {r} out of range (rows = {})",
                    self.rows
                )));
            }
        }
        if let Some(c) = prompt.col {
            if c >= self.cols {
                return Err(Error::InvalidPrompt(format!(
                    "col token {c} out of range (cols = {})",
                    self.cols
                )));
            }
        }
        Ok(())
    }

    /// Classes consistent with the unmasked tokens of `prompt`.
    pub fn consistent_classes(&self, prompt: &PromptSpec) -> Result<Vec<usize>> {
        self.validate_prompt(prompt)?;
        Ok((0..self.n_classes())
            .filter(|&k| prompt.admits(self.class_of(k)))
            .collect())
    }
}

/// A prompt over the two factors; `None` is the MASK token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PromptSpec {
    pub row: Option<usize>,
    pub col: Option<usize>,
}

impl PromptSpec {
    pub const NULL: PromptSpec = PromptSpec {
        row: None,
        col: None,
    };

    pub fn new(row: usize, col: usize) -> Self {
        Self {
            row: Some(row),
            col: Some(col),
        }
    }

    pub fn is_null(&self) -> bool {
        self.row.is_none() && self.col.is_none()
    }

    fn admits(&self, (row, col): (usize, usize)) -> bool {
        self.row.is_none_or(|r| r == row) && self.col.is_none_or(|c| c == col)
    }

    /// Keep only the row factor.
    pub fn keep_row(&self) -> Self {
        Self {
            row: self.row,
            col: None,
        }
    }

    /// Keep only the col factor.
    pub fn keep_col(&self) -> Self {
        Self {
            row: None,
            col: self.col,
        }
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tok = |t: Option<usize>| t.map_or_else(|| "*".to_string(), |v| v.to_string());
        write!(f, "{},{}", tok(self.row), tok(self.col))
    }
}

impl FromStr for PromptSpec {
    type Err = Error;

    /// Parses `"r,c"`; either token may be `*` or `mask`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(Error::InvalidPrompt(format!("expected `row,col`, got `{s}`")));
        }
        let tok = |p: &str| -> Result<Option<usize>> {
            match p {
                "*" | "mask" | "MASK" => Ok(None),
                _ => p
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|_| Error::InvalidPrompt(format!("bad token `{p}` in `{s}`"))),
            }
        };
        Ok(Self {
            row: tok(parts[0])?,
            col: tok(parts[1])?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentState {
    pub x: Point,
    pub t: f64,
}

impl LatentState {
    pub fn new(x: Point, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state {x:?}")));
        }
        Ok(Self { x, t })
    }
}

/// Draws `n` i.i.d. points from the classes admitted by `prompt`.
pub fn sample_data(world: &WorldSpec, prompt: &PromptSpec, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Domain("sample_data requires n >= 1".into()));
    }
    let classes = world.consistent_classes(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, DIM));
    for mut row in out.rows_mut() {
        let k = classes[rng.random_range(0..classes.len())];
        let m = world.mean(k);
        for d in 0..DIM {
            let z: f64 = rng.sample(StandardNormal);
            row[d] = m[d] + world.std * z;
        }
    }
    Ok(out)
}

/// Point on the linear path between data `x0` (t = 0) and noise `eps` (t = 1).
pub fn interpolate(x0: Point, eps: Point, t: f64) -> Result<LatentState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    let mut x = [0.0; DIM];
    for d in 0..DIM {
        x[d] = (1.0 - t) * x0[d] + t * eps[d];
    }
    LatentState::new(x, t)
}

fn check_oracle_time(t: f64) -> Result<()> {
    if t.is_nan() || t <= 0.0 {
        return Err(Error::SingularTime { t });
    }
    if t > 1.0 {
        return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
    }
    Ok(())
}

/// Per-axis variance of every component's marginal at time `t`.
fn marginal_var(world: &WorldSpec, t: f64) -> f64 {
    let a = 1.0 - t;
    a * a * world.std * world.std + t * t
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Unnormalized log posterior weights `log prior_k + log N(x; (1-t) m_k, s_t^2 I)`
/// over the classes admitted by `prompt`.
fn component_log_weights(world: &WorldSpec, classes: &[usize], x: Point, t: f64) -> Vec<f64> {
    let var = marginal_var(world, t);
    let log_prior = -(world.n_classes() as f64).ln();
    let log_norm = -(DIM as f64) * 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    classes
        .iter()
        .map(|&k| {
            let m = world.mean(k);
            let sq: f64 = (0..DIM)
                .map(|d| {
                    let r = x[d] - (1.0 - t) * m[d];
                    r * r
                })
                .sum();
            log_prior + log_norm - 0.5 * sq / var
        })
        .collect()
}

/// Posterior class probabilities `p(k | x_t, prompt)` over the classes the
/// prompt admits, returned as `(class, probability)` pairs.
pub fn class_posterior(
    world: &WorldSpec,
    prompt: &PromptSpec,
    x: Point,
    t: f64,
) -> Result<Vec<(usize, f64)>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    let classes = world.consistent_classes(prompt)?;
    let lw = component_log_weights(world, &classes, x, t);
    let lse = log_sum_exp(&lw);
    Ok(classes
        .into_iter()
        .zip(lw)
        .map(|(k, l)| (k, (l - lse).exp()))
        .collect())
}

/// `log p_t(x | prompt)`, the marginal at time `t` restricted to the admitted
/// classes (renormalized prior).
pub fn log_density(world: &WorldSpec, prompt: &PromptSpec, x: Point, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    let classes = world.consistent_classes(prompt)?;
    let lw = component_log_weights(world, &classes, x, t);
    // Renormalize the uniform prior to the admitted subset.
    let restrict = (world.n_classes() as f64 / classes.len() as f64).ln();
    Ok(log_sum_exp(&lw) + restrict)
}

/// `E[eps - x0 | x_t]` under the prompt-restricted mixture.
pub fn true_velocity(world: &WorldSpec, prompt: &PromptSpec, state: &LatentState) -> Result<Point> {
    check_oracle_time(state.t)?;
    let t = state.t;
    let a = 1.0 - t;
    let var = marginal_var(world, t);
    let s2 = world.std * world.std;
    let post = class_posterior(world, prompt, state.x, t)?;
    let mut v = [0.0; DIM];
    for (k, p) in post {
        let m = world.mean(k);
        for d in 0..DIM {
            let r = state.x[d] - a * m[d];
            // Jointly Gaussian regression of x0 and eps on x_t.
            let e_x0 = m[d] + a * s2 / var * r;
            let e_eps = t / var * r;
            v[d] += p * (e_eps - e_x0);
        }
    }
    Ok(v)
}

/// `grad_x log p_t(x | prompt)`.
pub fn true_score(world: &WorldSpec, prompt: &PromptSpec, state: &LatentState) -> Result<Point> {
    check_oracle_time(state.t)?;
    let a = 1.0 - state.t;
    let var = marginal_var(world, state.t);
    let post = class_posterior(world, prompt, state.x, state.t)?;
    let mut s = [0.0; DIM];
    for (k, p) in post {
        let m = world.mean(k);
        for d in 0..DIM {
            s[d] -= p * (state.x[d] - a * m[d]) / var;
        }
    }
    Ok(s)
}

/// Score of the guidance-tilted density `p_t(x|c)^(1+w) p_t(x)^(-w)`.
pub fn true_cfg_score(
    world: &WorldSpec,
    prompt: &PromptSpec,
    state: &LatentState,
    w: f64,
) -> Result<Point> {
    let cond = true_score(world, prompt, state)?;
    let uncond = true_score(world, &PromptSpec::NULL, state)?;
    let mut out = [0.0; DIM];
    for d in 0..DIM {
        out[d] = (1.0 + w) * cond[d] - w * uncond[d];
    }
    Ok(out)
}

/// Converts a score at time `t` into the velocity `E[eps - x0 | x_t]` using
/// Tweedie's identity `E[eps | x_t] = -t * score`.
pub fn score_to_velocity(score: Point, x: Point, t: f64) -> Point {
    let mut v = [0.0; DIM];
    for d in 0..DIM {
        v[d] = (-t * score[d] - x[d]) / (1.0 - t);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldSpec {
        WorldSpec::default()
    }

    /// Dense trapezoidal quadrature of `E[eps - x0 | x_t]`, integrating out
    /// `x0` axis by axis for every component. Shares nothing with the closed
    /// form except the model definition.
    fn quadrature_velocity(world: &WorldSpec, prompt: &PromptSpec, x: Point, t: f64) -> Point {
        let classes = world.consistent_classes(prompt).unwrap();
        let s = world.std;
        let n = 40_001;
        let mut log_z = Vec::new();
        let mut cond_mean = Vec::new();
        for &k in &classes {
            let m = world.mean(k);
            let mut lz = 0.0;
            let mut mk = [0.0; DIM];
            for d in 0..DIM {
                // The integrand is a product of two bumps in x0 (prior and
                // likelihood); place the grid over their overlap.
                let peak = x[d] / (1.0 - t);
                let width = t / (1.0 - t);
                let prec = 1.0 / (s * s) + 1.0 / (width * width);
                let centre = (m[d] / (s * s) + peak / (width * width)) / prec;
                let half = 16.0 / prec.sqrt();
                let lo = centre - half;
                let h = 2.0 * half / (n - 1) as f64;
                let (mut z, mut num) = (0.0, 0.0);
                for i in 0..n {
                    let x0 = lo + h * i as f64;
                    let eps = (x[d] - (1.0 - t) * x0) / t;
                    let prior = (-(x0 - m[d]).powi(2) / (2.0 * s * s)).exp()
                        / (s * (2.0 * std::f64::consts::PI).sqrt());
                    // density of x_t given x0 is N(x; (1-t) x0, t^2)
                    let lik = (-(eps * eps) / 2.0).exp() / (t * (2.0 * std::f64::consts::PI).sqrt());
                    let wgt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * h;
                    z += wgt * prior * lik;
                    num += wgt * prior * lik * (eps - x0);
                }
                lz += z.ln();
                mk[d] = num / z;
            }
            log_z.push(lz);
            cond_mean.push(mk);
        }
        let lse = log_sum_exp(&log_z);
        let mut v = [0.0; DIM];
        for (lz, mk) in log_z.iter().zip(&cond_mean) {
            let p = (lz - lse).exp();
            for d in 0..DIM {
                v[d] += p * mk[d];
            }
        }
        v
    }

    #[test]
    fn sample_mean_of_single_class_is_its_mode() {
        let w = world();
        let n = 1000;
        let xs = sample_data(&w, &PromptSpec::new(0, 0), n, 7).unwrap();
        let mean = xs.mean_axis(ndarray::Axis(0)).unwrap();
        let tol = 3.0 * w.std / (n as f64).sqrt();
        assert!((mean[0] + 2.0).abs() < tol, "{mean}");
        assert!((mean[1] + 2.0).abs() < tol, "{mean}");
    }

    #[test]
    fn null_prompt_samples_center_on_origin() {
        let xs = sample_data(&world(), &PromptSpec::NULL, 40_000, 3).unwrap();
        let mean = xs.mean_axis(ndarray::Axis(0)).unwrap();
        // marginal std per axis is sqrt(4 + 0.0625)
        let tol = 4.0 * (4.0625f64).sqrt() / 200.0;
        assert!(mean[0].abs() < tol && mean[1].abs() < tol, "{mean}");
    }

    #[test]
    fn partially_masked_prompt_splits_evenly() {
        let n = 1000;
        let xs = sample_data(&world(), &"0,*".parse().unwrap(), n, 11).unwrap();
        let left = xs.rows().into_iter().filter(|r| r[0] < 0.0).count() as f64;
        assert!(xs.rows().into_iter().all(|r| r[1] < 0.0));
        let sd = (n as f64 * 0.25).sqrt();
        assert!((left - n as f64 / 2.0).abs() < 3.0 * sd, "{left}");
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let err = sample_data(&world(), &PromptSpec::new(2, 0), 10, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidPrompt(_)));
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = [1.5, -0.5];
        let eps = [0.25, 3.0];
        assert_eq!(interpolate(x0, eps, 0.0).unwrap().x, x0);
        assert_eq!(interpolate(x0, eps, 1.0).unwrap().x, eps);
        assert_eq!(interpolate([2.0, 0.0], [0.0, 2.0], 0.5).unwrap().x, [1.0, 1.0]);
        assert!(matches!(interpolate(x0, eps, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn single_gaussian_velocity_matches_quadrature() {
        let w = WorldSpec::new(1, 1, 0.0, 1.0).unwrap();
        let state = LatentState::new([0.7, -1.3], 0.5).unwrap();
        let v = true_velocity(&w, &PromptSpec::NULL, &state).unwrap();
        let q = quadrature_velocity(&w, &PromptSpec::NULL, state.x, 0.5);
        for d in 0..DIM {
            assert!((v[d] - q[d]).abs() < 1e-6, "{v:?} vs {q:?}");
        }
    }

    #[test]
    fn velocity_matches_quadrature_on_grid() {
        let w = world();
        let prompts = [PromptSpec::NULL, PromptSpec::new(1, 0), "*,1".parse().unwrap()];
        for prompt in prompts {
            for &t in &[0.05, 0.3, 0.6, 0.95] {
                for &x in &[[0.0, 0.0], [-1.7, 2.2], [3.0, -0.4]] {
                    let state = LatentState::new(x, t).unwrap();
                    let v = true_velocity(&w, &prompt, &state).unwrap();
                    let q = quadrature_velocity(&w, &prompt, x, t);
                    for d in 0..DIM {
                        assert!((v[d] - q[d]).abs() < 1e-6, "t={t} x={x:?}: {v:?} vs {q:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn narrow_component_velocity_limit() {
        // With a vanishing std x0 is pinned at the mean m = 0, so the
        // velocity tends to eps - m with eps = (x_t - (1-t) m) / t.
        let w = WorldSpec::new(1, 1, 0.0, 1e-4).unwrap();
        let t = 0.4;
        let x = [0.9, -0.2];
        let v = true_velocity(&w, &PromptSpec::NULL, &LatentState::new(x, t).unwrap()).unwrap();
        let q = quadrature_velocity(&w, &PromptSpec::NULL, x, t);
        for d in 0..DIM {
            let limit = x[d] / t;
            assert!((v[d] - q[d]).abs() < 1e-6);
            assert!((v[d] - limit).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_axis_has_no_cross_velocity() {
        let w = WorldSpec::new(1, 2, 4.0, 0.25).unwrap();
        let state = LatentState::new([0.0, 0.8], 0.5).unwrap();
        let v = true_velocity(&w, &PromptSpec::NULL, &state).unwrap();
        assert!(v[0].abs() < 1e-15);
    }

    #[test]
    fn zero_time_is_singular() {
        let state = LatentState::new([0.0, 0.0], 0.0).unwrap();
        assert!(matches!(
            true_velocity(&world(), &PromptSpec::NULL, &state),
            Err(Error::SingularTime { .. })
        ));
        assert!(matches!(
            true_cfg_score(&world(), &PromptSpec::NULL, &state, 1.0),
            Err(Error::SingularTime { .. })
        ));
    }

    #[test]
    fn cfg_score_anchors() {
        let w = world();
        let state = LatentState::new([0.4, -0.9], 0.35).unwrap();
        let p = PromptSpec::new(1, 1);
        assert_eq!(
            true_cfg_score(&w, &p, &state, 0.0).unwrap(),
            true_score(&w, &p, &state).unwrap()
        );
        let u = true_score(&w, &PromptSpec::NULL, &state).unwrap();
        for g in [0.0, 2.0, 9.0] {
            let s = true_cfg_score(&w, &PromptSpec::NULL, &state, g).unwrap();
            for d in 0..DIM {
                assert!((s[d] - u[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfg_score_matches_finite_differences() {
        let w = world();
        let p = PromptSpec::new(0, 1);
        let g = 3.0;
        let t = 0.5;
        let x = [1.0, 1.0];
        let objective = |x: Point| {
            (1.0 + g) * log_density(&w, &p, x, t).unwrap()
                - g * log_density(&w, &PromptSpec::NULL, x, t).unwrap()
        };
        let h = 1e-5;
        let s = true_cfg_score(&w, &p, &LatentState::new(x, t).unwrap(), g).unwrap();
        for d in 0..DIM {
            let mut xp = x;
            let mut xm = x;
            xp[d] += h;
            xm[d] -= h;
            let fd = (objective(xp) - objective(xm)) / (2.0 * h);
            assert!((fd - s[d]).abs() < 1e-5, "axis {d}: fd {fd} vs {}", s[d]);
        }
    }

    #[test]
    fn score_and_velocity_agree_through_tweedie() {
        let w = world();
        let p = PromptSpec::new(1, 0);
        let state = LatentState::new([-0.3, 0.8], 0.45).unwrap();
        let s = true_score(&w, &p, &state).unwrap();
        let v = true_velocity(&w, &p, &state).unwrap();
        let v2 = score_to_velocity(s, state.x, state.t);
        for d in 0..DIM {
            assert!((v[d] - v2[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_parsing() {
        assert_eq!("1,0".parse::<PromptSpec>().unwrap(), PromptSpec::new(1, 0));
        assert_eq!("*,*".parse::<PromptSpec>().unwrap(), PromptSpec::NULL);
        assert!("1".parse::<PromptSpec>().is_err());
        assert_eq!(PromptSpec::new(0, 1).to_string(), "0,1");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn posterior_sums_to_one(x in -6.0f64..6.0, y in -6.0f64..6.0, t in 0.0f64..=1.0) {
                let total: f64 = class_posterior(&WorldSpec::default(), &PromptSpec::NULL, [x, y], t)
                    .unwrap()
                    .iter()
                    .map(|(_, p)| p)
                    .sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }

            #[test]
            fn interpolate_is_affine(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, t in 0.0f64..=1.0) {
                let x1 = interpolate([a, b], [c, 0.0], t).unwrap().x;
                let x2 = interpolate([2.0 * a, 2.0 * b], [2.0 * c, 0.0], t).unwrap().x;
                prop_assert!((x2[0] - 2.0 * x1[0]).abs() < 1e-12);
                prop_assert!((x2[1] - 2.0 * x1[1]).abs() < 1e-12);
            }

            #[test]
            fn cfg_score_is_affine_in_w(x in -4.0f64..4.0, y in -4.0f64..4.0, t in 0.01f64..=1.0,
                                        w1 in -2.0f64..10.0, w2 in -2.0f64..10.0) {
                let world = WorldSpec::default();
                let p = PromptSpec::new(1, 0);
                let st = LatentState::new([x, y], t).unwrap();
                let s = |w| true_cfg_score(&world, &p, &st, w).unwrap();
                let (a, b, z, ab) = (s(w1), s(w2), s(0.0), s(w1 + w2));
                for d in 0..DIM {
                    let scale = 1.0 + ab[d].abs();
                    prop_assert!((a[d] + b[d] - z[d] - ab[d]).abs() < 1e-9 * scale);
                }
            }
        }
    }
}
