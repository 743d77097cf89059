//! SGD with heavy-ball momentum, gated by the regularizer.
//!
//! An epoch ends after `iters_per_epoch` applied corrections. Rejected
//! minibatches go to the back of the draw queue and are drawn again later.
//! After `max_consecutive_rejects` rejections in a row the next minibatch is
//! applied regardless and the epoch ends early.

use std::collections::VecDeque;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bptt::{run_batch, BatchPass, Grads};
use crate::diagnostics::{dynamics_row, DynamicsRow};
use crate::error::{Result, SrnError};
use crate::linalg::Mat;
use crate::model::{forward, output_loss, SrnParams};
use crate::regularizer::{report_from_pass, Decision, RegConfig, RegReport};
use crate::tasks::{derive_seed, Sample, SequenceBatch, Splits, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate.
    pub alpha: f64,
    /// Momentum.
    pub mu: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Applied corrections per epoch.
    pub iters_per_epoch: usize,
    /// BPTT truncation depth.
    pub h: usize,
    pub n_hid: usize,
    /// Initialization standard deviation.
    pub sigma: f64,
    pub reg_enabled: bool,
    pub reg: RegConfig,
    /// Seeds weight initialization and minibatch order.
    pub seed: u64,
    pub max_consecutive_rejects: usize,
}

impl TrainConfig {
    /// Defaults for a task of length `t_len` with `h = T`.
    pub fn new(t_len: usize) -> Self {
        Self {
            alpha: 3e-4,
            mu: 0.9,
            batch_size: 10,
            epochs: 2000,
            iters_per_epoch: 50,
            h: t_len,
            n_hid: 100,
            sigma: 0.01,
            reg_enabled: true,
            reg: RegConfig::default(),
            seed: 0,
            max_consecutive_rejects: 200,
        }
    }

    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(SrnError::config("alpha", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(SrnError::config("mu", "must satisfy 0 <= mu < 1"));
        }
        if self.batch_size == 0 {
            return Err(SrnError::config("batch", "must be at least 1"));
        }
        if self.n_hid == 0 {
            return Err(SrnError::config("hidden", "must be at least 1"));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(SrnError::config("sigma", "must be positive"));
        }
        if self.h == 0 || self.h > spec.t_len {
            return Err(SrnError::config(
                "h",
                format!("must satisfy 1 <= h <= T = {}, got {}", spec.t_len, self.h),
            ));
        }
        if self.max_consecutive_rejects == 0 {
            return Err(SrnError::config("max_consecutive_rejects", "must be at least 1"));
        }
        self.reg.validate()
    }

    pub fn init_params(&self, spec: &TaskSpec) -> Result<SrnParams> {
        SrnParams::init_gaussian(
            spec.n_in(),
            self.n_hid,
            spec.n_out(),
            spec.output_activation(),
            self.sigma,
            derive_seed(self.seed, 0),
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: SrnParams,
    pub velocity: Grads,
    /// Minibatch draws so far, applied or not.
    pub iter: u64,
    pub epoch: usize,
    pub corrections: u64,
    pub best_params: SrnParams,
    pub best_valid_accuracy: f64,
    pub best_epoch: usize,
    rng: ChaCha8Rng,
    queue: VecDeque<Vec<usize>>,
}

impl TrainState {
    pub fn new(params: SrnParams, seed: u64) -> Self {
        Self {
            velocity: Grads::zeros_like(&params),
            best_params: params.clone(),
            params,
            iter: 0,
            epoch: 0,
            corrections: 0,
            best_valid_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)),
            queue: VecDeque::new(),
        }
    }

    /// Next minibatch of training indices. A fresh shuffled pass over the
    /// training set is appended whenever the queue runs dry; a trailing
    /// partial batch is dropped.
    fn next_batch(&mut self, n_train: usize, batch_size: usize) -> Vec<usize> {
        if self.queue.is_empty() {
            let mut order: Vec<usize> = (0..n_train).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks_exact(batch_size) {
                self.queue.push_back(chunk.to_vec());
            }
        }
        self.queue.pop_front().expect("training set smaller than one minibatch")
    }

    fn requeue(&mut self, batch: Vec<usize>) {
        self.queue.push_back(batch);
    }
}

/// The recurrent-weight correction `μ·v_rec − α·g_rec` that the next
/// [`sgd_step`] would apply.
pub fn candidate_update(state: &TrainState, grads: &Grads, cfg: &TrainConfig) -> Mat {
    let mut dw = state.velocity.w_rec.scale(cfg.mu);
    dw.axpy(-cfg.alpha, &grads.w_rec);
    dw
}

/// `v ← μ·v − α·g`, `w ← w + v` for every block. Returns the applied
/// recurrent correction.
pub fn sgd_step(state: &mut TrainState, grads: &Grads, cfg: &TrainConfig) -> Result<Mat> {
    let mut v = state.velocity.scale(cfg.mu);
    v.axpy(-cfg.alpha, grads);
    if !v.is_finite() {
        return Err(SrnError::non_finite("weight update", format!("iteration {}", state.iter)));
    }
    let p = &mut state.params;
    p.w_in.axpy(1.0, &v.w_in);
    p.w_rec.axpy(1.0, &v.w_rec);
    p.w_out.axpy(1.0, &v.w_out);
    p.b.axpy(1.0, &v.b);
    if !p.is_finite() {
        return Err(SrnError::non_finite("weights", format!("iteration {}", state.iter)));
    }
    let dw = v.w_rec.clone();
    state.velocity = v;
    state.corrections += 1;
    Ok(dw)
}

#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub applied: bool,
    /// Applied by the starvation fallback despite the gate.
    pub forced: bool,
    pub report: RegReport,
    pub loss: f64,
    pub grads: Grads,
    pub pass: BatchPass,
}

/// One minibatch: forward/backward, gate, and (if accepted) an SGD step.
///
/// The report is computed even when regularization is disabled so the
/// metrics stay comparable; in that case the minibatch is always applied.
pub fn train_iteration<S: std::borrow::Borrow<Sample>>(
    state: &mut TrainState,
    spec: &TaskSpec,
    batch: &[S],
    cfg: &TrainConfig,
    force: bool,
) -> Result<IterationOutcome> {
    let pass = run_batch(&state.params, spec, batch, cfg.h)?;
    let dw = candidate_update(state, &pass.grads, cfg);
    let report = report_from_pass(&state.params, &pass, &cfg.reg, &dw)?;
    let gate_ok = !cfg.reg_enabled || report.decision.is_accept();
    let applied = gate_ok || force;
    if applied {
        sgd_step(state, &pass.grads, cfg)?;
    }
    Ok(IterationOutcome {
        applied,
        forced: applied && !gate_ok,
        loss: pass.loss,
        grads: pass.grads.clone(),
        report,
        pass,
    })
}

/// Fraction of sequences the network gets right.
pub fn evaluate(params: &SrnParams, batch: &SequenceBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in &batch.samples {
        let trace = forward(params, &s.inputs(), None)?;
        if output_loss(&trace, &s.target, batch.spec.loss_kind(), batch.spec.tolerance)?.correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// One row of the per-iteration metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "dS")]
    pub ds: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub q: f64,
    pub r0: f64,
    pub decision: Decision,
    pub applied: bool,
    pub forced: bool,
    pub top_norm: f64,
    pub deep_norm: f64,
    pub gw_in_norm: f64,
    pub gw_rec_norm: f64,
    pub gw_out_norm: f64,
    pub gb_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub corrections: usize,
    pub draws: u64,
    pub valid_accuracy: f64,
    pub starved: bool,
}

/// Receives training events as they happen.
pub trait TrainObserver {
    fn on_iteration(&mut self, _rec: &IterRecord, _dynamics: &DynamicsRow) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _rec: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Default, Debug)]
pub struct Recorder {
    pub iterations: Vec<IterRecord>,
    pub dynamics: Vec<DynamicsRow>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainObserver for Recorder {
    fn on_iteration(&mut self, rec: &IterRecord, dynamics: &DynamicsRow) -> Result<()> {
        self.iterations.push(rec.clone());
        self.dynamics.push(dynamics.clone());
        Ok(())
    }

    fn on_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        self.epochs.push(rec.clone());
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub test_accuracy: f64,
    pub best_valid_accuracy: f64,
    pub best_epoch: usize,
    pub best_params: SrnParams,
    pub final_params: SrnParams,
    pub corrections: u64,
    pub draws: u64,
    pub starved_epochs: usize,
}

pub fn train(cfg: &TrainConfig, splits: &Splits) -> Result<(TrainOutcome, Recorder)> {
    let mut rec = Recorder::default();
    let out = train_observed(cfg, splits, &mut rec)?;
    Ok((out, rec))
}

pub fn train_observed(cfg: &TrainConfig, splits: &Splits, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let spec = splits.train.spec;
    cfg.validate(&spec)?;
    if splits.train.len() < cfg.batch_size {
        return Err(SrnError::config(
            "train_size",
            format!("training set ({}) smaller than one minibatch ({})", splits.train.len(), cfg.batch_size),
        ));
    }
    let mut state = TrainState::new(cfg.init_params(&spec)?, cfg.seed);
    state.best_valid_accuracy = evaluate(&state.params, &splits.valid)?;
    let mut starved_epochs = 0;

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let draws_before = state.iter;
        let mut accepted = 0;
        let mut consecutive_rejects = 0;
        let mut starved = false;
        while accepted < cfg.iters_per_epoch {
            let idx = state.next_batch(splits.train.len(), cfg.batch_size);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &splits.train.samples[i]).collect();
            let force = consecutive_rejects >= cfg.max_consecutive_rejects;
            state.iter += 1;
            let out = train_iteration(&mut state, &spec, &batch, cfg, force)?;
            let [gw_in_norm, gw_rec_norm, gw_out_norm, gb_norm] = out.grads.block_norms();
            let r = &out.report;
            let record = IterRecord {
                iter: state.iter,
                epoch,
                loss: out.loss,
                ds: r.ds,
                s: r.s,
                q: r.q,
                r0: r.r0,
                decision: r.decision,
                applied: out.applied,
                forced: out.forced,
                top_norm: r.top_norm,
                deep_norm: r.deep_norm,
                gw_in_norm,
                gw_rec_norm,
                gw_out_norm,
                gb_norm,
            };
            let dynamics = dynamics_row(state.iter, &out.pass, r.decision);
            observer.on_iteration(&record, &dynamics)?;
            if out.applied {
                accepted += 1;
                consecutive_rejects = 0;
                if out.forced {
                    warn!(
                        "epoch {epoch}: {} consecutive rejections, applied minibatch at iteration {} and ended the epoch after {accepted} corrections",
                        cfg.max_consecutive_rejects, state.iter
                    );
                    starved = true;
                    starved_epochs += 1;
                    break;
                }
            } else {
                state.requeue(idx);
                consecutive_rejects += 1;
            }
        }
        let valid_accuracy = evaluate(&state.params, &splits.valid)?;
        if valid_accuracy > state.best_valid_accuracy {
            state.best_valid_accuracy = valid_accuracy;
            state.best_params = state.params.clone();
            state.best_epoch = epoch;
        }
        observer.on_epoch(&EpochRecord {
            epoch,
            corrections: accepted,
            draws: state.iter - draws_before,
            valid_accuracy,
            starved,
        })?;
    }

    let test_accuracy = evaluate(&state.best_params, &splits.test)?;
    Ok(TrainOutcome {
        test_accuracy,
        best_valid_accuracy: state.best_valid_accuracy,
        best_epoch: state.best_epoch,
        best_params: state.best_params,
        final_params: state.params,
        corrections: state.corrections,
        draws: state.iter,
        starved_epochs,
    })
}
