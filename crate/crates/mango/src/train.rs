//! Training loop: Adam over tape gradients with global-norm clipping, a
//! fixed 80/20 train/validation split, periodic invertibility checks, and a
//! JSON-lines metrics stream.
//!
//! Runs are deterministic given (config, seed): initialization, batch order,
//! and evaluation cadence all derive from named RNG sub-streams. A NaN loss
//! aborts with the step index; there is no silent recovery.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, TaskHead, TaskKind, TokenBatch};
use crate::error::{MangoError, Result};
use crate::flow::FlowModel;
use crate::opt::{clip_global_norm, Adam};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const INVERTIBILITY_CHECK_EVERY: usize = 100;
pub const INVERTIBILITY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-decay the learning rate to `lr_floor_frac * learning_rate`
    /// over the run; `false` keeps it constant.
    pub cosine_decay: bool,
    pub lr_floor_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub weight_task: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            cosine_decay: true,
            lr_floor_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 5.0,
            eval_every: 100,
            seed: 0,
            weight_task: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, detail: String| {
            if ok {
                Ok(())
            } else {
                Err(MangoError::Config {
                    field: field.into(),
                    detail,
                })
            }
        };
        check(self.batch_size > 0, "train.batch_size", "must be positive".into())?;
        check(
            self.learning_rate > 0.0,
            "train.lr",
            format!("must be positive, got {}", self.learning_rate),
        )?;
        check(
            self.grad_clip_norm > 0.0,
            "train.grad_clip_norm",
            format!("must be positive, got {}", self.grad_clip_norm),
        )?;
        check(self.eval_every > 0, "train.eval_every", "must be positive".into())?;
        check(
            self.steps == 0 || self.eval_every <= self.steps,
            "train.eval_every",
            format!("eval_every {} exceeds steps {}", self.eval_every, self.steps),
        )?;
        check(
            self.weight_task >= 0.0,
            "train.weight_task",
            format!("must be nonnegative, got {}", self.weight_task),
        )
    }
}

/// One evaluation record; emitted as a JSON line per eval step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub nll_per_dim: f64,
    pub task_loss: f64,
    pub total_loss: f64,
    pub roundtrip_err: f64,
    pub wallclock_s: f64,
}

impl MetricsRecord {
    /// The record with timing removed, for bitwise stream comparison.
    pub fn deterministic_part(&self) -> (usize, f64, f64, f64, f64) {
        (
            self.step,
            self.nll_per_dim,
            self.task_loss,
            self.total_loss,
            self.roundtrip_err,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll_per_dim: f64,
    pub task_loss: f64,
    /// Classification accuracy on labeled data; NaN otherwise.
    pub accuracy: f64,
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub init_report: EvalReport,
    pub best_report: EvalReport,
    pub final_report: EvalReport,
    pub wallclock_s: f64,
}

/// Mean metrics over a slice of samples.
pub fn evaluate(
    model: &FlowModel,
    head: Option<&TaskHead>,
    data: &[(TokenBatch, Label)],
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(MangoError::Input("cannot evaluate on an empty split".into()));
    }
    let mut nll_sum = 0.0;
    let mut task_sum = 0.0;
    let mut task_n = 0usize;
    let mut correct = 0usize;
    let mut labeled = 0usize;
    for (batch, label) in data {
        let (z, _) = model.forward(&batch.tokens)?;
        nll_sum += model.nll(&batch.tokens)? / batch.tokens.len() as f64;
        if let (Some(h), true) = (head, !matches!(label, Label::None)) {
            task_sum += h.loss(&z, batch, label)?;
            task_n += 1;
            if let (TaskKind::Classification, Label::Class(c)) = (h.kind, label) {
                if predict_class(h, &z, batch)? == *c {
                    correct += 1;
                }
                labeled += 1;
            }
        }
    }
    let n = data.len() as f64;
    let task_loss = if task_n > 0 { task_sum / task_n as f64 } else { 0.0 };
    Ok(EvalReport {
        nll_per_dim: nll_sum / n,
        task_loss,
        accuracy: if labeled > 0 {
            correct as f64 / labeled as f64
        } else {
            f64::NAN
        },
    })
}

/// Argmax class from the head's pooled projection of z.
pub fn predict_class(head: &TaskHead, z: &Tensor, batch: &TokenBatch) -> Result<usize> {
    let rows = batch.non_pad_rows();
    let d = z.cols();
    let mut pooled = vec![0.0; d];
    for &r in &rows {
        for c in 0..d {
            pooled[c] += z.at2(r, c) / rows.len() as f64;
        }
    }
    let p = &head.projection.value;
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for j in 0..p.cols() {
        let v: f64 = (0..d).map(|i| pooled[i] * p.at2(i, j)).sum();
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    Ok(best)
}

fn snapshot(model: &FlowModel, head: Option<&TaskHead>) -> Vec<(String, Tensor)> {
    let mut s: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    if let Some(h) = head {
        s.extend(h.params().iter().map(|p| (p.name.clone(), p.value.clone())));
    }
    s
}

fn restore(model: &mut FlowModel, head: Option<&mut TaskHead>, snap: &[(String, Tensor)]) {
    let by_name: std::collections::HashMap<&str, &Tensor> =
        snap.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for p in model.params_mut() {
        if let Some(t) = by_name.get(p.name.as_str()) {
            p.value = (*t).clone();
        }
    }
    if let Some(h) = head {
        for p in h.params_mut() {
            if let Some(t) = by_name.get(p.name.as_str()) {
                p.value = (*t).clone();
            }
        }
    }
}

/// Split a dataset 80/20 in its given (deterministic) order.
pub fn split_train_val(data: &[(TokenBatch, Label)]) -> (&[(TokenBatch, Label)], &[(TokenBatch, Label)]) {
    let cut = (data.len() * 4) / 5;
    let cut = cut.max(1).min(data.len().saturating_sub(1)).max(1);
    if data.len() < 2 {
        return (data, data);
    }
    data.split_at(cut)
}

/// Train in place; the model and head end at the best-validation snapshot.
/// `sink` receives each metrics record as it is produced (for JSONL logs).
pub fn train(
    model: &mut FlowModel,
    mut head: Option<&mut TaskHead>,
    data: &[(TokenBatch, Label)],
    config: &TrainConfig,
    mut sink: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(MangoError::Input("cannot train on an empty dataset".into()));
    }
    let (train_split, val_split) = split_train_val(data);
    let weight = config.weight_task;
    let start = Instant::now();

    let init_report = evaluate(model, head.as_deref(), val_split)?;
    if config.steps == 0 {
        return Ok(TrainOutcome {
            metrics: Vec::new(),
            init_report: init_report.clone(),
            best_report: init_report.clone(),
            final_report: init_report,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
    }

    let joint_run = head.is_some()
        && weight > 0.0
        && train_split.iter().any(|(_, l)| !matches!(l, Label::None));
    let head_kind = head.as_deref().map(|h| h.kind);
    // lower is better; classification flips accuracy so max accuracy wins,
    // and nll breaks ties so a run that starts at ceiling accuracy still
    // keeps the best density model
    let score = move |r: &EvalReport| -> (f64, f64) {
        match (joint_run, head_kind) {
            (true, Some(TaskKind::Classification)) => (-r.accuracy, r.nll_per_dim),
            (true, Some(TaskKind::Translation)) => (r.task_loss, r.nll_per_dim),
            _ => (r.nll_per_dim, r.nll_per_dim),
        }
    };

    let mut adam = Adam::new(config.learning_rate);
    adam.beta1 = config.beta1;
    adam.beta2 = config.beta2;
    adam.eps = config.eps;
    let mut order_rng = rng::stream(config.seed, "batches");
    let mut metrics = Vec::new();
    let mut best = snapshot(model, head.as_deref());
    let mut best_report = init_report.clone();
    let mut best_score = score(&init_report);

    for step in 1..=config.steps {
        // accumulate mean gradient over a sampled batch
        for p in model.params_mut() {
            p.zero_grad();
        }
        if let Some(h) = head.as_deref_mut() {
            for p in h.params_mut() {
                p.zero_grad();
            }
        }
        for _ in 0..config.batch_size {
            let idx = order_rng.gen_range(0..train_split.len());
            let (batch, label) = &train_split[idx];
            let mut t = Tape::new();
            let use_head = head.as_deref().filter(|_| !matches!(label, Label::None));
            let loss =
                crate::data::joint_loss_tape(&mut t, model, use_head, batch, label, weight)?;
            let loss_v = t.value(loss).item();
            if !loss_v.is_finite() {
                return Err(MangoError::Numeric {
                    block: step,
                    detail: format!(
                        "non-finite loss at step {step}; last finite eval: {:?}",
                        metrics.last().map(|m: &MetricsRecord| m.total_loss)
                    ),
                });
            }
            t.backward(loss)?;
            let inv_b = 1.0 / config.batch_size as f64;
            for p in model.params_mut() {
                if let Some(g) = t.grad_of(p) {
                    p.grad = p.grad.zip(g, |a, b| a + b * inv_b, "grad_accum")?;
                }
            }
            if let Some(h) = head.as_deref_mut() {
                for p in h.params_mut() {
                    if let Some(g) = t.grad_of(p) {
                        p.grad = p.grad.zip(g, |a, b| a + b * inv_b, "grad_accum")?;
                    }
                }
            }
        }
        if config.cosine_decay {
            let t = (step - 1) as f64 / config.steps as f64;
            let floor = config.lr_floor_frac;
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            adam.lr = config.learning_rate * (floor + (1.0 - floor) * cos);
        }
        {
            let mut refs = model.params_mut();
            if let Some(h) = head.as_deref_mut() {
                refs.extend(h.params_mut());
            }
            clip_global_norm(&mut refs, config.grad_clip_norm);
            adam.step(&mut refs);
        }

        if step % INVERTIBILITY_CHECK_EVERY == 0 {
            let err = model.roundtrip_err(&train_split[0].0.tokens)?;
            if err > INVERTIBILITY_TOL {
                return Err(MangoError::Numeric {
                    block: step,
                    detail: format!("invertibility check failed at step {step}: {err:.3e}"),
                });
            }
        }

        if step % config.eval_every == 0 || step == config.steps {
            let report = evaluate(model, head.as_deref(), val_split)?;
            let record = MetricsRecord {
                step,
                nll_per_dim: report.nll_per_dim,
                task_loss: report.task_loss,
                total_loss: report.nll_per_dim * data[0].0.tokens.len() as f64
                    + weight * report.task_loss,
                roundtrip_err: model.roundtrip_err(&val_split[0].0.tokens)?,
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            if !record.total_loss.is_finite() {
                return Err(MangoError::Numeric {
                    block: step,
                    detail: format!("non-finite eval loss at step {step}"),
                });
            }
            sink(&record);
            metrics.push(record);
            let s = score(&report);
            if s < best_score {
                best_score = s;
                best = snapshot(model, head.as_deref());
                best_report = report;
            }
        }
    }

    let final_report = evaluate(model, head.as_deref(), val_split)?;
    let s = score(&final_report);
    if s < best_score {
        best = snapshot(model, head.as_deref());
        best_report = final_report.clone();
    }
    restore(model, head.as_deref_mut(), &best);

    Ok(TrainOutcome {
        metrics,
        init_report,
        best_report,
        final_report,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetName, DatasetSpec};
    use crate::flow::{FlowModel, ModelSpec, ModelVariant};

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            eval_every: if steps == 0 { 1 } else { steps.min(20) },
            ..TrainConfig::default()
        }
    }

    fn model_for(spec: &DatasetSpec, blocks: usize, seed: u64) -> FlowModel {
        FlowModel::build(
            ModelSpec {
                variant: ModelVariant::Mango,
                layout: crate::partition::ModalityLayout::new(spec.tokens, spec.tokens).unwrap(),
                d_model: spec.d_model,
                blocks,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let dspec = DatasetSpec::new(DatasetName::CorrelatedGaussians, 0, 16);
        let data = generate(&dspec).unwrap();
        let mut model = model_for(&dspec, 1, 0);
        let before = snapshot(&model, None);
        let out = train(&mut model, None, &data, &small_config(0), |_| {}).unwrap();
        assert!(out.metrics.is_empty());
        let after = snapshot(&model, None);
        for ((_, a), (_, b)) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn short_density_run_improves_nll() {
        let dspec = DatasetSpec::new(DatasetName::CorrelatedGaussians, 0, 64);
        let data = generate(&dspec).unwrap();
        let mut model = model_for(&dspec, 1, 0);
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 8,
            learning_rate: 3e-3,
            eval_every: 20,
            ..TrainConfig::default()
        };
        let out = train(&mut model, None, &data, &cfg, |_| {}).unwrap();
        assert!(
            out.best_report.nll_per_dim < out.init_report.nll_per_dim - 0.05,
            "init {} best {}",
            out.init_report.nll_per_dim,
            out.best_report.nll_per_dim
        );
        for m in &out.metrics {
            assert!(m.total_loss.is_finite());
            assert!(m.roundtrip_err < INVERTIBILITY_TOL);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dspec = DatasetSpec::new(DatasetName::CorrelatedGaussians, 1, 32);
        let data = generate(&dspec).unwrap();
        let run = || {
            let mut model = model_for(&dspec, 1, 3);
            train(&mut model, None, &data, &small_config(25), |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.deterministic_part(), y.deterministic_part());
        }
    }

    #[test]
    fn invalid_config_rejected_with_field() {
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(MangoError::Config { field, .. }) => assert_eq!(field, "train.lr"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = TrainConfig {
            steps: 5,
            eval_every: 50,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn best_checkpoint_not_worse_than_final() {
        let dspec = DatasetSpec::new(DatasetName::CorrelatedGaussians, 2, 48);
        let data = generate(&dspec).unwrap();
        let mut model = model_for(&dspec, 1, 4);
        let out = train(&mut model, None, &data, &small_config(40), |_| {}).unwrap();
        assert!(out.best_report.nll_per_dim <= out.final_report.nll_per_dim + 1e-12);
        // restored model reproduces the best report
        let (_, val) = split_train_val(&data);
        let re = evaluate(&model, None, val).unwrap();
        assert!((re.nll_per_dim - out.best_report.nll_per_dim).abs() < 1e-9);
    }
}
