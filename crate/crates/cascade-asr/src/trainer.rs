//! Joint training: the per-step multi-task objective, the warmup
//! learning-rate schedule, Adam, and the epoch loop with NDJSON
//! logging and per-epoch checkpoints.
//!
//! The total objective is
//!   lambda_onl * L_streaming + lambda_off * L_offline + lambda_dist * L_distill
//! where L_offline is itself the weighted CTC/transducer/attention/
//! masked-LM sum.  A step whose total is not finite (an infeasible
//! alignment slipped through) is logged and skipped without touching
//! the parameters, so training can never absorb a non-finite update.

use crate::blocking::BlockSpec;
use crate::decode::{levenshtein, rnnt_beam_search, rnnt_greedy};
use crate::distill::{mse_ed_loss, sp_kd_loss, sp_kd_pairs, DistillMode, LayerPairSet};
use crate::losses::{
    attention_ce_loss, ctc_loss, mlm_loss, offline_loss, rnnt_loss, weighted_sum, Loss,
    LossWeights,
};
use crate::model::{mlm_mask, Branch, Model};
use crate::numerics::{GradTape, Gradients, Tensor, Var};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One training or evaluation utterance.
#[derive(Debug, Clone)]
pub struct Sample {
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

/// Top-level mixing weights across the three branches of the
/// objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtlWeights {
    pub onl: f64,
    pub off: f64,
    pub dist: f64,
}

impl Default for MtlWeights {
    fn default() -> Self {
        MtlWeights { onl: 1.0, off: 1.0, dist: 3000.0 }
    }
}

impl MtlWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("onl", self.onl), ("off", self.off), ("dist", self.dist)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "mtl weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Combine the streaming, offline, and distillation losses.
pub fn total_loss(
    tape: &mut GradTape,
    weights: &MtlWeights,
    onl: Loss,
    off: Loss,
    dist: Loss,
) -> Result<Loss> {
    weights.validate()?;
    weighted_sum(tape, &[(weights.onl, onl), (weights.off, off), (weights.dist, dist)])
}

/// Warmup-then-inverse-sqrt learning rate: peak * min(step/warmup,
/// sqrt(warmup/step)).  Steps are 1-based; the peak is reached exactly
/// at the warmup step.
pub fn lr_schedule(peak: f64, warmup_steps: usize, step: usize) -> f64 {
    let s = step as f64;
    let w = warmup_steps as f64;
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Fraction of target positions hidden from the masked-LM head.
    pub mask_ratio: f64,
    pub mtl: MtlWeights,
    pub offline: LossWeights,
    pub distill_mode: DistillMode,
    /// Distill every k-th layer pair instead of only the final pair.
    pub distill_every_k: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.distill_mode.needs_pairs() && self.batch_size < 2 {
            return Err(Error::Config(
                "similarity-preserving distillation needs train.batch_size >= 2".into(),
            ));
        }
        if !self.peak_lr.is_finite() || self.peak_lr <= 0.0 {
            return Err(Error::Config(format!(
                "train.peak_lr must be finite and positive, got {}",
                self.peak_lr
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("train.warmup_steps must be at least 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "train.mask_ratio must be in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        if let Some(k) = self.distill_every_k {
            if k == 0 {
                return Err(Error::Config("train.distill_every_k must be at least 1".into()));
            }
        }
        self.mtl.validate()?;
        self.offline.validate()
    }

    fn layer_pairs(&self) -> LayerPairSet {
        match self.distill_every_k {
            Some(k) => LayerPairSet::EveryK(k),
            None => LayerPairSet::Final,
        }
    }

    /// Smallest batch the distillation mode can accept, for trailing
    /// partial batches.
    fn min_batch(&self) -> usize {
        if self.distill_mode.needs_pairs() {
            2
        } else {
            1
        }
    }
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.98, eps = 1e-9).
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &Model) -> Adam {
        let shapes: Vec<usize> = model.store().iter().map(|(_, t)| t.numel()).collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    /// Apply one update.  `param_vars` are the lifted parameter nodes
    /// in store order; parameters without a gradient path get zero.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &Gradients,
        param_vars: &[Var],
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Domain(format!("learning rate {lr} must be finite")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        model.store_mut().update_all(|idx, data| {
            let g = grads.get(param_vars[idx]);
            let m = &mut m[idx];
            let v = &mut v[idx];
            for k in 0..data.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                if !gk.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient element {k} of parameter {idx} is {gk}"
                    )));
                }
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            Ok(())
        })
    }
}

/// Per-step loss readout, one value per logged series.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub l_onl: f64,
    pub l_ctc: f64,
    pub l_rnnt: f64,
    pub l_att: f64,
    pub l_mlm: f64,
    pub l_dist: f64,
    pub total: f64,
}

/// Mask seed for one sequence of one step: deterministic for a run,
/// different across steps and batch positions.
fn mask_seed(base: u64, step: usize, position: usize) -> u64 {
    base ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (position as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Mean over the batch of per-sequence losses.
fn batch_mean(tape: &mut GradTape, parts: &[Loss]) -> Result<Loss> {
    let w = 1.0 / parts.len() as f64;
    let terms: Vec<(f64, Loss)> = parts.iter().map(|&l| (w, l)).collect();
    weighted_sum(tape, &terms)
}

/// One optimization step over a batch.  Returns the losses, the
/// learning rate used, and whether the update was applied (a
/// non-finite total skips the update).
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Sample],
    spec: &BlockSpec,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(StepLosses, f64, bool)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty training batch".into()));
    }
    let vocab = model.config().vocab;
    let st_depth = model.config().streaming_layers;
    let fc_depth = model.config().full_context_layers;
    let mut tape = GradTape::new();
    let lifted = model.lift(&mut tape, true)?;
    let param_vars = lifted.vars().to_vec();

    let mut onl_parts = Vec::new();
    let mut ctc_parts = Vec::new();
    let mut rnnt_parts = Vec::new();
    let mut att_parts = Vec::new();
    let mut mlm_parts = Vec::new();
    // Distillation state collections, filled according to the mode.
    let mut st_layer_states: Vec<Vec<Var>> = vec![Vec::new(); st_depth];
    let mut fc_layer_states: Vec<Vec<Var>> = vec![Vec::new(); fc_depth];
    let mut st_outputs = Vec::new();
    let mut fc_outputs = Vec::new();
    let mut att_hiddens = Vec::new();
    let mut pred_hiddens = Vec::new();

    for (i, sample) in batch.iter().enumerate() {
        let y = &sample.tokens;
        let st = lifted.streaming_encode(&mut tape, &sample.feats, spec)?;
        let fc = lifted.full_context_encode(&mut tape, st.output)?;
        let h_te = fc.output();

        let pred_st = lifted.pred_states(&mut tape, Branch::Streaming, y)?;
        let lat_st = lifted.lattice(&mut tape, Branch::Streaming, st.output, pred_st)?;
        onl_parts.push(rnnt_loss(&mut tape, &lat_st, y)?);

        let ctc_lp = lifted.ctc_log_probs(&mut tape, h_te)?;
        ctc_parts.push(ctc_loss(&mut tape, ctc_lp, y)?);

        let pred_off = lifted.pred_states(&mut tape, Branch::Offline, y)?;
        let lat_off = lifted.lattice(&mut tape, Branch::Offline, h_te, pred_off)?;
        rnnt_parts.push(rnnt_loss(&mut tape, &lat_off, y)?);

        let (att_lp, att_hidden) = lifted.attention_forward(&mut tape, h_te, y)?;
        att_parts.push(attention_ce_loss(&mut tape, att_lp, y)?);

        let (masked, positions) = mlm_mask(y, vocab, cfg.mask_ratio, mask_seed(cfg.seed, step, i))?;
        let mlm_lp = lifted.mlm_log_probs(&mut tape, h_te, &masked)?;
        mlm_parts.push(mlm_loss(&mut tape, mlm_lp, y, &positions)?);

        match cfg.distill_mode {
            DistillMode::None => {}
            DistillMode::MseEd => {
                fc_outputs.push(h_te);
                st_outputs.push(st.output);
            }
            DistillMode::SpEd => {
                for (l, &s) in st.layers.iter().enumerate() {
                    st_layer_states[l].push(s);
                }
                for (l, &s) in fc.layers.iter().enumerate() {
                    fc_layer_states[l].push(s);
                }
            }
            DistillMode::SpDd => {
                att_hiddens.push(att_hidden);
                pred_hiddens.push(pred_st);
            }
        }
    }

    let l_onl = batch_mean(&mut tape, &onl_parts)?;
    let l_ctc = batch_mean(&mut tape, &ctc_parts)?;
    let l_rnnt = batch_mean(&mut tape, &rnnt_parts)?;
    let l_att = batch_mean(&mut tape, &att_parts)?;
    let l_mlm = batch_mean(&mut tape, &mlm_parts)?;
    let l_off = offline_loss(&mut tape, &cfg.offline, l_ctc, l_rnnt, l_att, l_mlm)?;

    let l_dist = match cfg.distill_mode {
        DistillMode::None => {
            let zero = tape.constant_scalar(0.0)?;
            Loss { node: Some(zero), value: 0.0 }
        }
        DistillMode::MseEd => mse_ed_loss(&mut tape, &fc_outputs, &st_outputs)?,
        DistillMode::SpEd => {
            let pairs = cfg.layer_pairs().pairs(fc_depth, st_depth)?;
            sp_kd_pairs(&mut tape, &fc_layer_states, &st_layer_states, &pairs)?
        }
        DistillMode::SpDd => sp_kd_loss(&mut tape, &att_hiddens, &pred_hiddens)?,
    };

    let total = total_loss(&mut tape, &cfg.mtl, l_onl, l_off, l_dist)?;
    let losses = StepLosses {
        l_onl: l_onl.value,
        l_ctc: l_ctc.value,
        l_rnnt: l_rnnt.value,
        l_att: l_att.value,
        l_mlm: l_mlm.value,
        l_dist: l_dist.value,
        total: total.value,
    };
    let lr = lr_schedule(cfg.peak_lr, cfg.warmup_steps, step);

    let applied = match total.node {
        Some(node) if total.is_finite() => {
            let grads = tape.backward(node)?;
            adam.step(model, &grads, &param_vars, lr)?;
            true
        }
        _ => false,
    };
    Ok((losses, lr, applied))
}

/// Greedy (or beam) corpus error rate for one branch: total edits over
/// total reference tokens.
pub fn corpus_cer(
    model: &Model,
    data: &[Sample],
    spec: &BlockSpec,
    branch: Branch,
    beam: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut edits = 0usize;
    let mut total = 0usize;
    for sample in data {
        if sample.tokens.is_empty() {
            return Err(Error::Data("evaluation reference is empty".into()));
        }
        let mut tape = GradTape::new();
        let lifted = model.lift(&mut tape, false)?;
        let st = lifted.streaming_encode(&mut tape, &sample.feats, spec)?;
        let h = match branch {
            Branch::Streaming => st.output,
            Branch::Offline => lifted.full_context_encode(&mut tape, st.output)?.output(),
        };
        let hyp = if beam <= 1 {
            rnnt_greedy(&mut tape, &lifted, branch, h)?
        } else {
            rnnt_beam_search(&mut tape, &lifted, branch, h, beam)?
        };
        edits += levenshtein(&sample.tokens, &hyp.ids);
        total += sample.tokens.len();
    }
    Ok(edits as f64 / total as f64)
}

#[derive(Serialize)]
struct TrainRow {
    step: usize,
    epoch: usize,
    l_onl: f64,
    l_ctc: f64,
    l_rnnt: f64,
    l_att: f64,
    l_mlm: f64,
    l_dist: f64,
    total: f64,
    lr: f64,
}

#[derive(Serialize)]
struct ValRow {
    epoch: usize,
    step: usize,
    cer_streaming: f64,
    cer_nonstreaming: f64,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub steps: usize,
    pub skipped_steps: usize,
    pub dev_cer_streaming: f64,
    pub dev_cer_nonstreaming: f64,
    pub checkpoint: std::path::PathBuf,
}

/// Train for the configured number of epochs.  Writes
/// `train_log.ndjson` (one row per step), `val_log.ndjson` (one row
/// per epoch, greedy dev error rates for both branches), and a
/// checkpoint refreshed atomically after every epoch.  Identical
/// inputs produce byte-identical outputs.
pub fn fit(
    model: &mut Model,
    train_set: &[Sample],
    dev_set: &[Sample],
    spec: &BlockSpec,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FitReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut train_log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.ndjson"))?);
    let mut val_log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("val_log.ndjson"))?);
    let checkpoint = out_dir.join("model.ckpt");

    let mut adam = Adam::new(model);
    let mut step = 0usize;
    let mut skipped = 0usize;
    let mut dev_cer_streaming = f64::NAN;
    let mut dev_cer_nonstreaming = f64::NAN;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.min_batch() {
                continue;
            }
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (losses, lr, applied) = train_step(model, &mut adam, &batch, spec, cfg, step)?;
            if !applied {
                skipped += 1;
            }
            let row = TrainRow {
                step,
                epoch,
                l_onl: losses.l_onl,
                l_ctc: losses.l_ctc,
                l_rnnt: losses.l_rnnt,
                l_att: losses.l_att,
                l_mlm: losses.l_mlm,
                l_dist: losses.l_dist,
                total: losses.total,
                lr,
            };
            serde_json::to_writer(&mut train_log, &row)?;
            train_log.write_all(b"\n")?;
        }

        if !dev_set.is_empty() {
            dev_cer_streaming = corpus_cer(model, dev_set, spec, Branch::Streaming, 1)?;
            dev_cer_nonstreaming = corpus_cer(model, dev_set, spec, Branch::Offline, 1)?;
            let row = ValRow {
                epoch,
                step,
                cer_streaming: dev_cer_streaming,
                cer_nonstreaming: dev_cer_nonstreaming,
            };
            serde_json::to_writer(&mut val_log, &row)?;
            val_log.write_all(b"\n")?;
        }
        model.save(&checkpoint)?;
    }
    train_log.flush()?;
    val_log.flush()?;
    Ok(FitReport {
        steps: step,
        skipped_steps: skipped,
        dev_cer_streaming,
        dev_cer_nonstreaming,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            dim: 8,
            heads: 2,
            streaming_layers: 1,
            full_context_layers: 1,
            vocab: 4,
            subsample: 2,
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            peak_lr: 0.003,
            warmup_steps: 10,
            seed: 7,
            mask_ratio: 0.5,
            mtl: MtlWeights::default(),
            offline: LossWeights::default(),
            distill_mode: DistillMode::SpEd,
            distill_every_k: None,
        }
    }

    fn sample(seed: u64, frames: usize, tokens: Vec<usize>) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Sample { feats: Tensor::new(frames, 4, data).unwrap(), tokens }
    }

    fn spec() -> BlockSpec {
        BlockSpec::new(4, 2, 2, 10.0).unwrap()
    }

    #[test]
    fn schedule_hits_pinned_values() {
        assert_eq!(lr_schedule(0.0015, 1500, 1500), 0.0015);
        assert_eq!(lr_schedule(0.0015, 1500, 6000), 0.00075);
        // Rising through warmup, falling after.
        assert!(lr_schedule(0.0015, 1500, 100) < lr_schedule(0.0015, 1500, 200));
        assert!(lr_schedule(0.0015, 1500, 3000) < lr_schedule(0.0015, 1500, 1500));
        assert!((lr_schedule(0.0015, 1500, 750) - 0.00075).abs() < 1e-18);
    }

    #[test]
    fn total_loss_arithmetic_is_exact() {
        let mut tape = GradTape::new();
        let mk = |tape: &mut GradTape, v: f64| {
            let node = tape.constant_scalar(v).unwrap();
            Loss { node: Some(node), value: v }
        };
        let onl = mk(&mut tape, 1.0);
        let off = mk(&mut tape, 2.0);
        let dist = mk(&mut tape, 0.001);
        let w = MtlWeights::default();
        assert_eq!((w.onl, w.off, w.dist), (1.0, 1.0, 3000.0));
        let total = total_loss(&mut tape, &w, onl, off, dist).unwrap();
        assert_eq!(total.value, 6.0);
        // Zero distillation weight drops an infinite distillation term.
        let w0 = MtlWeights { dist: 0.0, ..w };
        let total = total_loss(&mut tape, &w0, onl, off, Loss::infinite()).unwrap();
        assert_eq!(total.value, 3.0);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // Objective: square of the first element of the first
        // parameter.  With gradient g, the bias-corrected first step
        // is lr * g/|g| / (1 + eps_term), i.e. essentially lr.
        let mut model = Model::new(&tiny_model_config(), 0).unwrap();
        let mut adam = Adam::new(&model);
        let mut tape = GradTape::new();
        let lifted = model.lift(&mut tape, true).unwrap();
        let param_vars = lifted.vars().to_vec();
        let cell = tape.index(param_vars[0], 0, 0).unwrap();
        let before = tape.scalar_value(cell);
        let sq = tape.mul(cell, cell).unwrap();
        let grads = tape.backward(sq).unwrap();
        drop(lifted);
        adam.step(&mut model, &grads, &param_vars, 0.1).unwrap();
        let after = model.store().iter().next().unwrap().1.data()[0];
        let g = 2.0 * before;
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.02 * g * g) / (1.0 - 0.98);
        let manual = before - 0.1 * m_hat / (v_hat.sqrt() + 1e-9);
        assert!((after - manual).abs() < 1e-15, "{after} vs {manual}");
        // Untouched elements only feel the zero-gradient moment decay,
        // which leaves them exactly in place at step one.
        let second = model.store().iter().next().unwrap().1.data()[1];
        let orig = Model::new(&tiny_model_config(), 0).unwrap();
        assert_eq!(second, orig.store().iter().next().unwrap().1.data()[1]);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize sum((p - c)^2) over one real model parameter.
        let mut model = Model::new(&tiny_model_config(), 1).unwrap();
        let mut adam = Adam::new(&model);
        let target = 0.37;
        // Adam hovers around the optimum at roughly the learning-rate
        // scale, so decay the rate to land tightly.
        for k in 0..400 {
            let mut tape = GradTape::new();
            let lifted = model.lift(&mut tape, true).unwrap();
            let param_vars = lifted.vars().to_vec();
            let p = param_vars[0];
            let c = tape
                .constant(&Tensor::new(p.rows(), p.cols(), vec![target; p.numel()]).unwrap())
                .unwrap();
            let d = tape.sub(p, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            drop(lifted);
            let lr = 0.05 / (1.0 + k as f64 * 0.05);
            adam.step(&mut model, &grads, &param_vars, lr).unwrap();
        }
        let first = model.store().iter().next().unwrap().1;
        for &v in first.data() {
            assert!((v - target).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn config_validation_rules() {
        assert!(tiny_train_config().validate().is_ok());
        let mut c = tiny_train_config();
        c.batch_size = 1; // sp-ED needs pairs
        assert!(c.validate().is_err());
        c.distill_mode = DistillMode::None;
        assert!(c.validate().is_ok());
        let mut c = tiny_train_config();
        c.warmup_steps = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_train_config();
        c.mask_ratio = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_train_config();
        c.distill_every_k = Some(0);
        assert!(c.validate().is_err());
        let mut c = tiny_train_config();
        c.mtl.dist = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn train_step_moves_parameters_and_reports_losses() {
        let mut model = Model::new(&tiny_model_config(), 3).unwrap();
        let mut adam = Adam::new(&model);
        let s1 = sample(1, 8, vec![1, 2]);
        let s2 = sample(2, 10, vec![3, 1, 4]);
        let before: Vec<f64> =
            model.store().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let cfg = tiny_train_config();
        let (losses, lr, applied) =
            train_step(&mut model, &mut adam, &[&s1, &s2], &spec(), &cfg, 1).unwrap();
        assert!(applied);
        assert!((lr - 0.0003).abs() < 1e-15); // step 1 of 10 warmup
        for v in [
            losses.l_onl,
            losses.l_ctc,
            losses.l_rnnt,
            losses.l_att,
            losses.l_mlm,
            losses.l_dist,
            losses.total,
        ] {
            assert!(v.is_finite());
            assert!(v >= 0.0);
        }
        let after: Vec<f64> =
            model.store().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn infeasible_batch_is_skipped_without_update() {
        let mut model = Model::new(&tiny_model_config(), 3).unwrap();
        let mut adam = Adam::new(&model);
        // 4 frames subsample to 2 < 5 targets: the offline CTC term is
        // infeasible, so the whole step must be skipped.
        let bad = sample(1, 4, vec![1, 2, 3, 4, 1]);
        let ok = sample(2, 10, vec![1, 2]);
        let before: Vec<f64> =
            model.store().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let cfg = tiny_train_config();
        let (losses, _, applied) =
            train_step(&mut model, &mut adam, &[&bad, &ok], &spec(), &cfg, 1).unwrap();
        assert!(!applied);
        assert!(losses.l_ctc.is_infinite());
        assert!(losses.total.is_infinite());
        let after: Vec<f64> =
            model.store().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn all_distill_modes_produce_finite_losses() {
        for mode in [DistillMode::None, DistillMode::MseEd, DistillMode::SpEd, DistillMode::SpDd] {
            let mut model = Model::new(&tiny_model_config(), 5).unwrap();
            let mut adam = Adam::new(&model);
            let mut cfg = tiny_train_config();
            cfg.distill_mode = mode;
            let s1 = sample(1, 8, vec![1, 2]);
            let s2 = sample(2, 8, vec![2, 3]);
            let (losses, _, applied) =
                train_step(&mut model, &mut adam, &[&s1, &s2], &spec(), &cfg, 1).unwrap();
            assert!(applied, "{mode:?}");
            assert!(losses.l_dist.is_finite());
            if mode == DistillMode::None {
                assert_eq!(losses.l_dist, 0.0);
            } else {
                assert!(losses.l_dist > 0.0, "{mode:?}");
            }
        }
    }

    #[test]
    fn fit_writes_logs_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(&tiny_model_config(), 9).unwrap();
        let train: Vec<Sample> = (0..6)
            .map(|i| sample(i as u64, 8, vec![1 + (i % 4), 1 + ((i + 1) % 4)]))
            .collect();
        let dev = vec![sample(100, 8, vec![2, 3])];
        let cfg = tiny_train_config();
        let report = fit(&mut model, &train, &dev, &spec(), &cfg, dir.path()).unwrap();
        assert_eq!(report.steps, 3); // 6 samples / batch 2
        assert_eq!(report.skipped_steps, 0);
        assert!(report.checkpoint.exists());
        assert!(report.dev_cer_streaming.is_finite());

        let text = std::fs::read_to_string(dir.path().join("train_log.ndjson")).unwrap();
        let rows: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row["step"], (i + 1) as u64 as i64);
            assert_eq!(row["epoch"], 1);
            for key in ["l_onl", "l_ctc", "l_rnnt", "l_att", "l_mlm", "l_dist", "total", "lr"] {
                assert!(row[key].is_f64(), "missing {key}");
            }
        }
        let text = std::fs::read_to_string(dir.path().join("val_log.ndjson")).unwrap();
        let rows: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0]["cer_streaming"].is_f64());
        assert!(rows[0]["cer_nonstreaming"].is_f64());
    }

    #[test]
    fn fit_is_deterministic() {
        let run = |dir: &std::path::Path| {
            let mut model = Model::new(&tiny_model_config(), 11).unwrap();
            let train: Vec<Sample> =
                (0..4).map(|i| sample(i as u64, 8, vec![1 + (i % 4), 4 - (i % 3)])).collect();
            let dev = vec![sample(50, 8, vec![1, 2])];
            let mut cfg = tiny_train_config();
            cfg.epochs = 2;
            fit(&mut model, &train, &dev, &spec(), &cfg, dir).unwrap();
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run(d1.path());
        run(d2.path());
        for name in ["train_log.ndjson", "val_log.ndjson", "model.ckpt"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn training_reduces_the_loss_on_a_tiny_problem() {
        let mut model = Model::new(&tiny_model_config(), 13).unwrap();
        let mut adam = Adam::new(&model);
        let mut cfg = tiny_train_config();
        cfg.distill_mode = DistillMode::None;
        cfg.peak_lr = 0.005;
        cfg.warmup_steps = 5;
        let s1 = sample(1, 6, vec![1, 2]);
        let s2 = sample(2, 6, vec![3, 4]);
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 1..=40 {
            let (losses, _, applied) =
                train_step(&mut model, &mut adam, &[&s1, &s2], &spec(), &cfg, step).unwrap();
            assert!(applied);
            if step == 1 {
                first = losses.total;
            }
            last = losses.total;
        }
        assert!(last < first * 0.8, "loss {first} -> {last} did not fall");
    }
}
