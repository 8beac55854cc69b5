use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::norm::NormStats;
use super::optim::{AdamW, CurriculumPhase, OptimizerConfig};
use super::synth::Dataset;
use crate::error::{Error, Result};
use crate::grid::STATE_CHANNELS;
use crate::model::Model;
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::tensor::compensated_sum;
use crate::nn::{ParamId, Tape, Tensor};

type Gradients = Vec<(ParamId, Vec<f64>)>;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Linear warmup steps at the start of cosine phases.
    pub warmup: usize,
    /// Written atomically after every phase.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub global_step: usize,
    pub phase: usize,
    pub ar_steps: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], mut w: W) -> Result<()> {
    writeln!(w, "global_step,phase,ar_steps,lr,loss")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:e},{:e}",
            r.global_step, r.phase, r.ar_steps, r.lr, r.loss
        )?;
    }
    Ok(())
}

/// Sets normalization statistics and statics of `model` from a dataset.
pub fn fit_normalization(model: &mut Model, data: &Dataset) -> Result<()> {
    let state = NormStats::compute(&data.states)?;
    let statics = NormStats::compute(std::slice::from_ref(&data.statics))?;
    model.set_norm_stats(&state, &statics)?;
    model.set_statics(&data.statics)
}

/// A dataset normalized with the model's statistics, one `[G, 54]` tensor per time.
pub struct Prepared {
    states: Vec<Tensor>,
    statics: Tensor,
    weights: Arc<Vec<f64>>,
}

impl Prepared {
    pub fn new(model: &mut Model, data: &Dataset) -> Result<Self> {
        let states = data
            .states
            .iter()
            .map(|s| model.normalize_state(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            states,
            statics: model.normalize_statics(&data.statics)?,
            weights: model.row_weights(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Valid values of `t` for a `k`-step window `X^{t-1} .. X^{t+k}`.
    pub fn starts(&self, k: usize) -> std::ops::RangeInclusive<usize> {
        1..=self.states.len().saturating_sub(k + 1)
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.states.len() < k + 2 {
            return Err(Error::DatasetTooShort {
                needed: k + 2,
                available: self.states.len(),
            });
        }
        Ok(())
    }

    /// Loss of unrolling `k` steps from `t`; returns the averaged loss and,
    /// when `grads` is set, the parameter gradients.
    fn unroll(&self, model: &Model, t: usize, k: usize, grads: bool) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(model.params());
        let statics = tape.input(self.statics.clone());
        let mut prev = tape.input(self.states[t - 1].clone());
        let mut cur = tape.input(self.states[t].clone());
        let mut losses = Vec::with_capacity(k);
        for j in 0..k {
            let pred = model.step(&mut tape, prev, cur, statics)?;
            let target = tape.input(self.states[t + 1 + j].clone());
            losses.push(tape.weighted_l1(pred, target, Arc::clone(&self.weights))?);
            prev = cur;
            cur = pred;
        }
        let loss = tape.mean(&losses)?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss);
        Ok((value, g.params().map(|(id, g)| (id, g.to_vec())).collect()))
    }

    /// Per-step losses of a `k`-step rollout from `t`, without gradients.
    pub fn rollout_losses(&self, model: &Model, t: usize, k: usize) -> Result<Vec<f64>> {
        self.check(k)?;
        let mut prev = self.states[t - 1].clone();
        let mut cur = self.states[t].clone();
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            let next = {
                let mut tape = Tape::new(model.params());
                let (p, c, s) = (
                    tape.input(prev),
                    tape.input(cur.clone()),
                    tape.input(self.statics.clone()),
                );
                let y = model.step(&mut tape, p, c, s)?;
                tape.value(y).clone()
            };
            out.push(weighted_l1_value(&next, &self.states[t + 1 + j], &self.weights));
            prev = cur;
            cur = next;
        }
        Ok(out)
    }

    /// Per-step losses of repeating `X^t`.
    pub fn persistence_losses(&self, t: usize, k: usize) -> Vec<f64> {
        (0..k)
            .map(|j| weighted_l1_value(&self.states[t], &self.states[t + 1 + j], &self.weights))
            .collect()
    }

    /// Mean per-step rollout loss over `starts` for the model and for persistence.
    pub fn skill(&self, model: &Model, k: usize, starts: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(k)?;
        let mut model_loss = vec![0.0; k];
        let mut persist = vec![0.0; k];
        for &t in starts {
            for (a, v) in model_loss.iter_mut().zip(self.rollout_losses(model, t, k)?) {
                *a += v;
            }
            for (a, v) in persist.iter_mut().zip(self.persistence_losses(t, k)) {
                *a += v;
            }
        }
        let n = starts.len() as f64;
        Ok((
            model_loss.into_iter().map(|v| v / n).collect(),
            persist.into_iter().map(|v| v / n).collect(),
        ))
    }
}

/// Latitude-weighted L1 of node-major `[G, 54]` rows, as the tape computes it.
pub fn weighted_l1_value(pred: &Tensor, target: &Tensor, node_weights: &[f64]) -> f64 {
    let c = STATE_CHANNELS;
    let total = compensated_sum(node_weights.iter().enumerate().map(|(g, w)| {
        let row: f64 = pred.data()[g * c..(g + 1) * c]
            .iter()
            .zip(&target.data()[g * c..(g + 1) * c])
            .map(|(a, b)| (a - b).abs())
            .sum();
        w * row
    }));
    total / pred.len() as f64
}

/// Runs every phase in order and returns the per-step loss trace.
/// Each step draws one window uniformly from the dataset (batch size 1).
pub fn train_curriculum<F: FnMut(&TraceRow)>(
    model: &mut Model,
    data: &Dataset,
    phases: &[CurriculumPhase],
    opts: &TrainOptions,
    mut on_step: F,
) -> Result<Vec<TraceRow>> {
    let prepared = Prepared::new(model, data)?;
    for p in phases {
        prepared.check(p.ar_steps)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.optimizer, model.params())?;
    let mut trace = Vec::with_capacity(phases.iter().map(|p| p.train_steps).sum());
    let mut global = 0;
    for (pi, phase) in phases.iter().enumerate() {
        let starts = prepared.starts(phase.ar_steps);
        for s in 0..phase.train_steps {
            let t = rng.random_range(starts.clone());
            let lr = phase.lr_at(s, opts.warmup);
            let (loss, grads) = prepared.unroll(model, t, phase.ar_steps, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {global}")));
            }
            opt.step(model.params_mut(), &grads, lr)?;
            let row = TraceRow {
                global_step: global,
                phase: pi,
                ar_steps: phase.ar_steps,
                lr,
                loss,
            };
            on_step(&row);
            trace.push(row);
            global += 1;
        }
        if let Some(path) = &opts.checkpoint {
            save_checkpoint(model.params(), path)?;
        }
    }
    Ok(trace)
}

/// Averaged `k`-step training loss at `t` with no parameter update.
pub fn window_loss(model: &mut Model, data: &Dataset, t: usize, k: usize) -> Result<f64> {
    let prepared = Prepared::new(model, data)?;
    prepared.check(k)?;
    Ok(prepared.unroll(model, t, k, false)?.0)
}
