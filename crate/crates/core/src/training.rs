//! Step-driven training loop shared by the locator and the segmenter.
//!
//! The loop is resumable: the step counter lives in the Adam state of the
//! latest weights, and every step draws its batch from an RNG stream keyed by
//! the step number, so stopping and resuming reproduces an uninterrupted run.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{adam_step, backward, forward, Adam, Loss, NetworkSpec, Tensor, Weights};

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub loss: f64,
    /// Validation metric, recorded at evaluation steps. Higher is better.
    pub val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub latest: Weights<f32>,
    pub best: Weights<f32>,
    pub best_metric: f64,
    pub best_step: u64,
    pub curve: Vec<CurveRow>,
}

impl TrainState {
    pub fn new(weights: Weights<f32>) -> Self {
        Self {
            best: weights.clone(),
            latest: weights,
            best_metric: f64::NEG_INFINITY,
            best_step: 0,
            curve: Vec::new(),
        }
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss,val\n");
        for r in &self.curve {
            let val = r.val.map(|v| format!("{v:.9}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.9},{}", r.step, r.loss, val);
        }
        s
    }

    pub fn parse_curve_csv(text: &str) -> Result<Vec<CurveRow>> {
        let bad = |l: &str| Error::Format(format!("bad training-curve row `{l}`"));
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 3 {
                    return Err(bad(l));
                }
                Ok(CurveRow {
                    step: f[0].parse().map_err(|_| bad(l))?,
                    loss: f[1].parse().map_err(|_| bad(l))?,
                    val: if f[2].is_empty() {
                        None
                    } else {
                        Some(f[2].parse().map_err(|_| bad(l))?)
                    },
                })
            })
            .collect()
    }
}

/// RNG for one training step.
pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub(crate) struct Schedule {
    pub steps: u64,
    pub eval_every: u64,
    pub opt: Adam,
}

/// Train until the step counter reaches `schedule.steps`. `batch(step)`
/// yields inputs and targets; `validate` scores weights (higher is better)
/// every `eval_every` steps and at the end.
pub(crate) fn run(
    spec: &NetworkSpec,
    state: &mut TrainState,
    schedule: &Schedule,
    mut batch: impl FnMut(u64) -> Result<(Tensor<f32>, Tensor<f32>)>,
    loss: impl Fn(&Tensor<f32>, &Tensor<f32>) -> Result<Loss<f32>>,
    mut validate: impl FnMut(&Weights<f32>) -> Result<f64>,
) -> Result<()> {
    while state.latest.step < schedule.steps {
        let step = state.latest.step;
        let (x, y) = batch(step)?;
        let (pred, cache) = forward(spec, &state.latest, &x)?;
        let l = loss(&pred, &y)?;
        if !l.value.is_finite() {
            return Err(Error::NumericalFailure(format!("loss diverged at step {step}")));
        }
        let g = backward(spec, &state.latest, &cache, &l.grad)?;
        adam_step(&mut state.latest, &g.params, &schedule.opt)?;
        let done = state.latest.step;
        let val = if done % schedule.eval_every.max(1) == 0 || done == schedule.steps {
            let v = validate(&state.latest)?;
            if v > state.best_metric {
                state.best_metric = v;
                state.best_step = done;
                state.best = state.latest.clone();
            }
            Some(v)
        } else {
            None
        };
        state.curve.push(CurveRow {
            step: done,
            loss: l.value,
            val,
        });
    }
    Ok(())
}
