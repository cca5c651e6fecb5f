//! Per-sample specialization of global parts factors.
//!
//! With the appearance factors frozen, projected gradient descent on the
//! single-sample reconstruction loss adapts `P` to one sample's layout. The
//! gradient kernel is the batch parts gradient evaluated on a batch of one.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{backtrack, grad_parts_views, loss_views, project_nonneg, StepRule};
use crate::tensor::ActivationSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Initial (backtracking) or constant (fixed) step size; zero leaves the parts untouched.
    pub learning_rate: f64,
    pub step_rule: StepRule,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            learning_rate: 1e-3,
            step_rule: StepRule::Backtracking,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedParts {
    pub parts: Array2<f64>,
    pub sample_index: Option<usize>,
    pub iterations_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss after each iteration, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

pub fn refine_parts(
    sample: &ActivationSample,
    appearance: ArrayView2<'_, f64>,
    global_parts: ArrayView2<'_, f64>,
    config: &RefineConfig,
) -> Result<RefinedParts> {
    refine_parts_observed(sample, appearance, global_parts, config, |_, _| {})
}

/// [`refine_parts`] with a callback receiving `(iteration, parts)` after every step.
pub fn refine_parts_observed<F>(
    sample: &ActivationSample,
    appearance: ArrayView2<'_, f64>,
    global_parts: ArrayView2<'_, f64>,
    config: &RefineConfig,
    mut observer: F,
) -> Result<RefinedParts>
where
    F: FnMut(usize, ArrayView2<'_, f64>),
{
    if appearance.nrows() != sample.channels() {
        return Err(Error::shape(format!(
            "appearance has {} rows, sample has C = {}",
            appearance.nrows(),
            sample.channels()
        )));
    }
    if global_parts.nrows() != sample.spatial() {
        return Err(Error::shape(format!(
            "parts have {} rows, sample has S = {}",
            global_parts.nrows(),
            sample.spatial()
        )));
    }
    if global_parts.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput("global parts must be finite and nonnegative".into()));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "refinement learning rate must be >= 0, got {}",
            config.learning_rate
        )));
    }

    let zs = [sample.data()];
    let mut p = global_parts.to_owned();
    let initial_loss = loss_views(&zs, appearance, p.view());
    let mut current = initial_loss;
    let mut trace = vec![initial_loss];
    let mut step = config.learning_rate;
    let mut iterations_run = 0;

    if config.learning_rate > 0.0 {
        for t in 1..=config.iterations {
            iterations_run = t;
            let g = grad_parts_views(&zs, appearance, p.view());
            let candidate = |s: f64| {
                let mut c = &p - &(&g * s);
                project_nonneg(&mut c);
                c
            };
            let mut moved = true;
            match config.step_rule {
                StepRule::Fixed => {
                    p = candidate(config.learning_rate);
                    current = loss_views(&zs, appearance, p.view());
                    if !current.is_finite() {
                        return Err(Error::Diverged {
                            iteration: t,
                            loss: current,
                        });
                    }
                }
                StepRule::Backtracking => match backtrack(current, step, |s| {
                    let c = candidate(s);
                    let l = loss_views(&zs, appearance, c.view());
                    (c, l)
                }) {
                    Some((c, l, used)) => {
                        p = c;
                        current = l;
                        step = used * 2.0;
                    }
                    None => moved = false,
                },
            }
            trace.push(current);
            observer(t, p.view());
            if !moved {
                break;
            }
        }
    }

    Ok(RefinedParts {
        parts: p,
        sample_index: None,
        iterations_run,
        initial_loss,
        final_loss: current,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{plant, shift_parts, PlantDims};

    fn planted() -> (crate::ActivationBatch, crate::synthetic::PlantedTruth) {
        plant(
            PlantDims {
                samples: 4,
                channels: 8,
                height: 8,
                width: 8,
            },
            (3, 4),
            0.0,
            2,
        )
        .unwrap()
    }

    #[test]
    fn exact_sample_cannot_improve() {
        let (batch, truth) = planted();
        let r = refine_parts(&batch.samples()[0], truth.appearance.view(), truth.parts.view(), &RefineConfig::default()).unwrap();
        assert!(r.initial_loss < 1e-20);
        assert!((r.initial_loss - r.final_loss).abs() < 1e-8 * batch.samples()[0].data().iter().map(|v| v * v).sum::<f64>());
    }

    #[test]
    fn zero_rate_is_identity() {
        let (batch, truth) = planted();
        let p = shift_parts(truth.parts.view(), 8, 8, 1, 0).unwrap();
        for rule in [StepRule::Fixed, StepRule::Backtracking] {
            let cfg = RefineConfig {
                learning_rate: 0.0,
                step_rule: rule,
                ..Default::default()
            };
            let r = refine_parts(&batch.samples()[1], truth.appearance.view(), p.view(), &cfg).unwrap();
            assert_eq!(r.parts, p);
        }
    }

    #[test]
    fn refinement_is_monotone_and_nonneg() {
        let (batch, truth) = planted();
        let p = shift_parts(truth.parts.view(), 8, 8, 1, 1).unwrap();
        let mut min_entry = f64::INFINITY;
        let r = refine_parts_observed(&batch.samples()[2], truth.appearance.view(), p.view(), &RefineConfig::default(), |_, q| {
            min_entry = min_entry.min(q.iter().copied().fold(f64::INFINITY, f64::min));
        })
        .unwrap();
        assert!(min_entry >= 0.0);
        assert!(r.final_loss < r.initial_loss);
        for w in r.loss_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (batch, truth) = planted();
        let s = &batch.samples()[0];
        let neg = truth.parts.mapv(|v| -v - 1.0);
        assert!(refine_parts(s, truth.appearance.view(), neg.view(), &RefineConfig::default()).is_err());
        assert!(refine_parts(s, truth.appearance.view(), truth.parts.slice(ndarray::s![..10, ..]), &RefineConfig::default()).is_err());
        let cfg = RefineConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(refine_parts(s, truth.appearance.view(), truth.parts.view(), &cfg).is_err());
    }
}
