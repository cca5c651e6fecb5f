//! Semi-nonnegative separable factorization `Z_i ≈ A (Aᵀ Z_i P) Pᵀ`.
//!
//! `A` (`C × R_C`) holds appearance directions along the channel mode and is
//! unconstrained. `P` (`S × R_S`) holds spatial parts and is kept in the
//! nonnegative orthant by projection after every gradient step. The two
//! blocks are updated alternately: a projected step on `P`, then a plain
//! step on `A` evaluated at the freshly updated `P`.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::leading_eigenvectors;
use crate::tensor::{check_dims, check_finite, mode3_product, ActivationBatch, ActivationSample};

/// Upper bound of the uniform distribution used to seed the parts factors.
pub const PARTS_INIT_MAX: f64 = 0.01;

/// Maximum number of step halvings tried by the backtracking rule.
pub const MAX_HALVINGS: usize = 30;

/// Number of iterations spanned by the early-stopping window.
pub const CONVERGENCE_WINDOW: usize = 10;

/// Full-batch loss is recorded every this many iterations when minibatching.
pub const MINIBATCH_TRACE_EVERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// Constant learning rate for both blocks.
    Fixed,
    /// Halve the step until the loss decreases; the accepted step is doubled
    /// as the starting point of the next iteration.
    Backtracking,
}

impl std::str::FromStr for StepRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(StepRule::Fixed),
            "backtracking" => Ok(StepRule::Backtracking),
            other => Err(Error::InvalidConfig(format!(
                "unknown step rule {other:?} (expected fixed or backtracking)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub rank_appearance: usize,
    pub rank_parts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub minibatch: Option<usize>,
    pub seed: u64,
    pub nonneg: bool,
    pub convergence_tol: f64,
    pub step_rule: StepRule,
    /// Rescale the fitted pair with [`balance_scale`] before returning it.
    #[serde(default = "default_true")]
    pub balance_scale: bool,
}

fn default_true() -> bool {
    true
}

impl FitConfig {
    pub fn new(rank_appearance: usize, rank_parts: usize) -> Self {
        Self {
            rank_appearance,
            rank_parts,
            iterations: 2000,
            learning_rate: 1e-3,
            minibatch: None,
            seed: 0,
            nonneg: true,
            convergence_tol: 1e-7,
            step_rule: StepRule::Backtracking,
            balance_scale: true,
        }
    }

    pub fn validate(&self, batch: &ActivationBatch) -> Result<()> {
        let (c, s, n) = (batch.channels(), batch.spatial(), batch.len());
        if self.rank_appearance == 0 || self.rank_appearance > c {
            return Err(Error::InvalidConfig(format!(
                "appearance rank must be in [1, C={c}], got {}",
                self.rank_appearance
            )));
        }
        if self.rank_parts == 0 || self.rank_parts > s {
            return Err(Error::InvalidConfig(format!(
                "parts rank must be in [1, S={s}], got {}",
                self.rank_parts
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if let Some(m) = self.minibatch {
            if m == 0 || m > n {
                return Err(Error::InvalidConfig(format!("minibatch must be in [1, N={n}], got {m}")));
            }
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "convergence tolerance must be >= 0, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitStats {
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub loss_trace: Vec<LossRecord>,
}

/// Learned appearance and parts factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    appearance: Array2<f64>,
    parts: Array2<f64>,
    height: usize,
    width: usize,
    nonneg: bool,
    stats: FitStats,
}

impl FactorModel {
    pub fn new(
        appearance: Array2<f64>,
        parts: Array2<f64>,
        height: usize,
        width: usize,
        nonneg: bool,
        stats: FitStats,
    ) -> Result<Self> {
        let (c, rc) = appearance.dim();
        let (s, rs) = parts.dim();
        if s != height * width {
            return Err(Error::shape(format!(
                "parts have {s} rows but H*W = {}",
                height * width
            )));
        }
        if rc == 0 || rc > c || rs == 0 || rs > s {
            return Err(Error::shape(format!(
                "ranks ({rc}, {rs}) invalid for C={c}, S={s}"
            )));
        }
        check_finite(appearance.view(), "appearance factors")?;
        check_finite(parts.view(), "parts factors")?;
        if nonneg && parts.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("parts factors must be nonnegative".into()));
        }
        Ok(Self {
            appearance,
            parts,
            height,
            width,
            nonneg,
            stats,
        })
    }

    pub fn appearance(&self) -> ArrayView2<'_, f64> {
        self.appearance.view()
    }

    pub fn parts(&self) -> ArrayView2<'_, f64> {
        self.parts.view()
    }

    pub fn channels(&self) -> usize {
        self.appearance.nrows()
    }

    pub fn spatial(&self) -> usize {
        self.parts.nrows()
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `(R_C, R_S)`.
    pub fn ranks(&self) -> (usize, usize) {
        (self.appearance.ncols(), self.parts.ncols())
    }

    pub fn nonneg(&self) -> bool {
        self.nonneg
    }

    pub fn stats(&self) -> &FitStats {
        &self.stats
    }
}

/// Per-sample coefficients `Λ_i = Aᵀ Z_i P` (`R_C × R_S`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    pub values: Array2<f64>,
}

/// State exposed to a [`fit_observed`] callback after each iteration.
#[derive(Debug)]
pub struct IterationView<'a> {
    pub iteration: usize,
    pub appearance: ArrayView2<'a, f64>,
    pub parts: ArrayView2<'a, f64>,
    /// Full-batch loss, when it was evaluated at this iteration.
    pub loss: Option<f64>,
}

fn check_factors(c: usize, s: usize, a: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() != c {
        return Err(Error::shape(format!("appearance has {} rows, expected C={c}", a.nrows())));
    }
    if p.nrows() != s {
        return Err(Error::shape(format!("parts have {} rows, expected S={s}", p.nrows())));
    }
    Ok(())
}

fn views(batch: &ActivationBatch) -> Vec<ArrayView2<'_, f64>> {
    batch.samples().iter().map(|s| s.data()).collect()
}

/// Sums per-sample terms in sample order so results do not depend on thread scheduling.
fn ordered_sum<T, F>(zs: &[ArrayView2<'_, f64>], f: F) -> Option<T>
where
    T: Send + for<'x> std::ops::AddAssign<&'x T>,
    F: Fn(ArrayView2<'_, f64>) -> T + Sync + Send,
{
    let terms: Vec<T> = zs.par_iter().map(|z| f(z.view())).collect();
    let mut it = terms.into_iter();
    let mut acc = it.next()?;
    for t in it {
        acc += &t;
    }
    Some(acc)
}

fn sample_loss(z: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> f64 {
    let lambda = a.t().dot(&z).dot(&p);
    let recon = a.dot(&lambda).dot(&p.t());
    z.iter().zip(recon.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

// With K = AᵀA, J = PᵀP, Λ = AᵀZP, AtZ = AᵀZ the parts gradient
//   P̄ Zᵀ Ā Ā Z P + Zᵀ Ā Ā Z P̄ P − 2 Zᵀ Ā Z P
// collapses to P Λᵀ K Λ + AtZᵀ K Λ J − 2 AtZᵀ Λ.
fn sample_grad_parts(z: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> Array2<f64> {
    let k = a.t().dot(&a);
    let j = p.t().dot(&p);
    let atz = a.t().dot(&z);
    let lambda = atz.dot(&p);
    let k_lambda = k.dot(&lambda);
    let mut g = p.dot(&lambda.t().dot(&k_lambda));
    g += &atz.t().dot(&k_lambda.dot(&j));
    g.scaled_add(-2.0, &atz.t().dot(&lambda));
    g *= 2.0;
    g
}

// Mirror of the parts case with ZP = Z P:
//   A Λ J Λᵀ + ZP J Λᵀ K − 2 ZP Λᵀ.
fn sample_grad_appearance(
    z: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let k = a.t().dot(&a);
    let j = p.t().dot(&p);
    let zp = z.dot(&p);
    let lambda = a.t().dot(&zp);
    let j_lambda_t = j.dot(&lambda.t());
    let mut g = a.dot(&lambda.dot(&j_lambda_t));
    g += &zp.dot(&j_lambda_t.dot(&k));
    g.scaled_add(-2.0, &zp.dot(&lambda.t()));
    g *= 2.0;
    g
}

pub(crate) fn loss_views(zs: &[ArrayView2<'_, f64>], a: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> f64 {
    ordered_sum(zs, |z| sample_loss(z, a, p)).unwrap_or(0.0)
}

pub(crate) fn grad_parts_views(
    zs: &[ArrayView2<'_, f64>],
    a: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
) -> Array2<f64> {
    ordered_sum(zs, |z| sample_grad_parts(z, a, p)).unwrap_or_else(|| Array2::zeros(p.raw_dim()))
}

fn grad_appearance_views(
    zs: &[ArrayView2<'_, f64>],
    a: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
) -> Array2<f64> {
    ordered_sum(zs, |z| sample_grad_appearance(z, a, p)).unwrap_or_else(|| Array2::zeros(a.raw_dim()))
}

/// Reconstruction objective `Σ_i ‖Z_i − A(AᵀZ_iP)Pᵀ‖_F²`.
pub fn loss(batch: &ActivationBatch, a: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> Result<f64> {
    check_factors(batch.channels(), batch.spatial(), a, p)?;
    Ok(loss_views(&views(batch), a, p))
}

/// Gradient of [`loss`] with respect to the parts factors.
pub fn grad_parts(batch: &ActivationBatch, a: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_factors(batch.channels(), batch.spatial(), a, p)?;
    Ok(grad_parts_views(&views(batch), a, p))
}

/// Gradient of [`loss`] with respect to the appearance factors.
pub fn grad_appearance(
    batch: &ActivationBatch,
    a: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_factors(batch.channels(), batch.spatial(), a, p)?;
    Ok(grad_appearance_views(&views(batch), a, p))
}

pub fn coefficients(
    sample: &ActivationSample,
    a: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
) -> Result<CoefficientMatrix> {
    check_factors(sample.channels(), sample.spatial(), a, p)?;
    Ok(CoefficientMatrix {
        values: a.t().dot(&sample.data()).dot(&p),
    })
}

/// `A (Aᵀ Z P) Pᵀ` for one sample.
pub fn reconstruct(sample: &ActivationSample, a: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let lambda = coefficients(sample, a, p)?;
    Ok(a.dot(&lambda.values).dot(&p.t()))
}

/// Leading eigenvectors of `Σ_i Z_i Z_iᵀ`, the HOSVD seed for the appearance factors.
pub fn init_appearance_hosvd(batch: &ActivationBatch, rank: usize) -> Result<Array2<f64>> {
    let c = batch.channels();
    if rank == 0 || rank > c {
        return Err(Error::InvalidConfig(format!("appearance rank must be in [1, C={c}], got {rank}")));
    }
    let zs = views(batch);
    let gram = ordered_sum(&zs, |z| z.dot(&z.t())).expect("batch is nonempty");
    leading_eigenvectors(gram.view(), rank)
}

/// Parts factors drawn i.i.d. from `U(0, 0.01)`, deterministic in `seed`.
pub fn init_parts_random(spatial: usize, rank: usize, seed: u64) -> Result<Array2<f64>> {
    if rank == 0 || rank > spatial {
        return Err(Error::InvalidConfig(format!(
            "parts rank must be in [1, S={spatial}], got {rank}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array2::from_shape_simple_fn((spatial, rank), || {
        rng.random_range(0.0..=PARTS_INIT_MAX)
    }))
}

/// Appearance factors solved in closed form for fixed parts: the leading
/// eigenvectors of `Σ_i Y_i Y_iᵀ` with `Y_i = Z_i P`.
pub fn closed_form_appearance(batch: &ActivationBatch, p: ArrayView2<'_, f64>, rank: usize) -> Result<Array2<f64>> {
    check_dims("parts", (p.nrows(), p.ncols()), (batch.spatial(), p.ncols()))?;
    let c = batch.channels();
    if rank == 0 || rank > c {
        return Err(Error::InvalidConfig(format!("appearance rank must be in [1, C={c}], got {rank}")));
    }
    let projected = mode3_product(batch, p.t())?;
    let ys: Vec<_> = projected.iter().map(|y| y.view()).collect();
    let gram = ordered_sum(&ys, |y| y.dot(&y.t())).expect("batch is nonempty");
    leading_eigenvectors(gram.view(), rank)
}

pub(crate) fn project_nonneg(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v.max(0.0));
}

/// Tries `candidate(step)` with halving steps until the loss drops below `current`.
/// Returns the accepted factor, its loss, and the step used.
pub(crate) fn backtrack<F>(current: f64, initial_step: f64, mut candidate: F) -> Option<(Array2<f64>, f64, f64)>
where
    F: FnMut(f64) -> (Array2<f64>, f64),
{
    let mut step = initial_step;
    for _ in 0..=MAX_HALVINGS {
        let (m, l) = candidate(step);
        if l.is_finite() && l < current {
            return Some((m, l, step));
        }
        step *= 0.5;
    }
    None
}

/// Moves the scalar gauge of the objective so that `‖A‖²_F = R_C`.
///
/// The loss is unchanged by `(A, P) → (A/c, cP)` for any `c > 0`, so fitting
/// alone leaves the overall scale of `A` arbitrary. Returns the factor `c`.
pub fn balance_scale(appearance: &mut Array2<f64>, parts: &mut Array2<f64>) -> f64 {
    let r = appearance.ncols() as f64;
    let c = (appearance.iter().map(|v| v * v).sum::<f64>() / r).sqrt();
    if c > 0.0 && c.is_finite() {
        appearance.mapv_inplace(|v| v / c);
        parts.mapv_inplace(|v| v * c);
    }
    c
}

/// Runs the projected block-coordinate descent.
pub fn fit(batch: &ActivationBatch, config: &FitConfig) -> Result<FactorModel> {
    fit_observed(batch, config, |_| {})
}

/// [`fit`] with a callback invoked once for the initial state (iteration 0)
/// and once after every iteration.
pub fn fit_observed<F>(batch: &ActivationBatch, config: &FitConfig, mut observer: F) -> Result<FactorModel>
where
    F: FnMut(&IterationView<'_>),
{
    config.validate(batch)?;
    if batch.squared_norm() == 0.0 {
        return Err(Error::InvalidInput("batch is identically zero".into()));
    }

    let all = views(batch);
    let mut a = init_appearance_hosvd(batch, config.rank_appearance)?;
    let mut p = init_parts_random(batch.spatial(), config.rank_parts, config.seed)?;

    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
    sampler.set_stream(1);

    let mut full_loss = loss_views(&all, a.view(), p.view());
    let mut trace = vec![LossRecord {
        iteration: 0,
        loss: full_loss,
    }];
    observer(&IterationView {
        iteration: 0,
        appearance: a.view(),
        parts: p.view(),
        loss: Some(full_loss),
    });

    let mut step_p = config.learning_rate;
    let mut step_a = config.learning_rate;
    let mut converged = false;
    let mut last_iter = 0;

    for t in 1..=config.iterations {
        last_iter = t;
        let subset: Option<Vec<ArrayView2<'_, f64>>> = config.minibatch.map(|m| {
            rand::seq::index::sample(&mut sampler, batch.len(), m)
                .into_iter()
                .map(|i| all[i])
                .collect()
        });
        let zs: &[ArrayView2<'_, f64>] = subset.as_deref().unwrap_or(&all);

        let mut step_loss = match (&subset, config.step_rule) {
            (None, StepRule::Backtracking) => Some(full_loss),
            (Some(_), StepRule::Backtracking) => Some(loss_views(zs, a.view(), p.view())),
            (_, StepRule::Fixed) => None,
        };

        let mut moved = false;

        // Parts: projected gradient step.
        let gp = grad_parts_views(zs, a.view(), p.view());
        let parts_step = |step: f64| {
            let mut cand = &p - &(&gp * step);
            if config.nonneg {
                project_nonneg(&mut cand);
            }
            cand
        };
        match step_loss {
            Some(current) => {
                if let Some((cand, l, used)) = backtrack(current, step_p, |s| {
                    let c = parts_step(s);
                    let l = loss_views(zs, a.view(), c.view());
                    (c, l)
                }) {
                    p = cand;
                    step_loss = Some(l);
                    step_p = used * 2.0;
                    moved = true;
                }
            }
            None => p = parts_step(config.learning_rate),
        }

        // Appearance: plain gradient step at the updated parts.
        let ga = grad_appearance_views(zs, a.view(), p.view());
        match step_loss {
            Some(current) => {
                if let Some((cand, l, used)) = backtrack(current, step_a, |s| {
                    let c = &a - &(&ga * s);
                    let l = loss_views(zs, c.view(), p.view());
                    (c, l)
                }) {
                    a = cand;
                    step_loss = Some(l);
                    step_a = used * 2.0;
                    moved = true;
                }
            }
            None => a.scaled_add(-config.learning_rate, &ga),
        }

        let record = match subset {
            None => {
                full_loss = match (config.step_rule, step_loss) {
                    (StepRule::Backtracking, Some(l)) => l,
                    _ => loss_views(&all, a.view(), p.view()),
                };
                true
            }
            Some(_) => {
                let due = t % MINIBATCH_TRACE_EVERY == 0 || t == config.iterations;
                if due {
                    full_loss = loss_views(&all, a.view(), p.view());
                } else {
                    let l = step_loss.unwrap_or_else(|| loss_views(zs, a.view(), p.view()));
                    if !l.is_finite() {
                        return Err(Error::Diverged { iteration: t, loss: l });
                    }
                }
                due
            }
        };
        if !full_loss.is_finite() || a.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: t,
                loss: full_loss,
            });
        }
        if record {
            trace.push(LossRecord {
                iteration: t,
                loss: full_loss,
            });
        }
        observer(&IterationView {
            iteration: t,
            appearance: a.view(),
            parts: p.view(),
            loss: record.then_some(full_loss),
        });

        if config.minibatch.is_none() {
            // A full-batch backtracking iteration that moved neither block is a fixed point.
            let stalled = config.step_rule == StepRule::Backtracking && !moved;
            if full_loss == 0.0 || stalled {
                converged = true;
                break;
            }
            if trace.len() > CONVERGENCE_WINDOW {
                let before = trace[trace.len() - 1 - CONVERGENCE_WINDOW].loss;
                if before > 0.0 && ((before - full_loss) / before).abs() < config.convergence_tol {
                    converged = true;
                    break;
                }
            }
        }
    }

    if trace.last().map(|r| r.iteration) != Some(last_iter) {
        full_loss = loss_views(&all, a.view(), p.view());
        trace.push(LossRecord {
            iteration: last_iter,
            loss: full_loss,
        });
    }

    if config.balance_scale {
        balance_scale(&mut a, &mut p);
    }

    FactorModel::new(
        a,
        p,
        batch.height(),
        batch.width(),
        config.nonneg,
        FitStats {
            final_loss: full_loss,
            iterations: last_iter,
            converged,
            loss_trace: trace,
        },
    )
}
