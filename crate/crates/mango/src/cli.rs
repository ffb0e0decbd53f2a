//! Command implementations behind the `mango` binary: verification audits,
//! data generation, training, evaluation, sampling, baseline comparison, and
//! attention export.
//!
//! Exit-code contract: 0 success, 1 audit or acceptance failure, 2 usage or
//! config error. Every command is deterministic given its flags and seeds.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container};
use crate::compress::{fit, Compressor, CompressorKind};
use crate::config::{CompareSection, CompressorSection, ExperimentConfig};
use crate::data::{
    dataset_from_container, dataset_to_container, generate, DatasetName, DatasetSpec, Label,
    TaskHead, TaskKind, TokenBatch,
};
use crate::error::{MangoError, Result};
use crate::flow::{FlowModel, ModelVariant, SubLayer};
use crate::oracle::{audit_bijection, AuditReport, LOGDET_REL_TOL};
use crate::partition::ModalityLayout;
use crate::rng;
use crate::train::{evaluate, split_train_val, train, EvalReport};
use crate::tensor::Tensor;

/// Map an error to the CLI exit-code contract.
pub fn exit_code(e: &MangoError) -> i32 {
    match e {
        MangoError::Config { .. }
        | MangoError::Input(_)
        | MangoError::Format { .. }
        | MangoError::Io(_) => 2,
        _ => 1,
    }
}

// ---------------------------------------------------------------- verify --

#[derive(Serialize, Deserialize)]
pub struct VerifyReport {
    pub total: usize,
    pub passed: usize,
    /// The exponent applied to the attention diagonal sum in the analytic
    /// log-det, confirmed by the numerical-Jacobian sweep.
    pub logdet_exponent: String,
    pub audits: Vec<AuditReport>,
}

fn audit_sublayer(
    name: String,
    layer: &SubLayer,
    layout: ModalityLayout,
    x: &Tensor,
) -> Result<AuditReport> {
    audit_bijection(
        name,
        &|v| layer.forward(v, layout),
        &|v| layer.inverse(v, layout),
        x,
    )
}

fn audit_model(name: String, model: &FlowModel, x: &Tensor) -> Result<AuditReport> {
    audit_bijection(
        name,
        &|v| model.forward(v),
        &|v| model.inverse(v),
        x,
    )
}

/// The full audit suite: every sub-layer kind and end-to-end models across
/// seeds and sizes. `inject_fault` corrupts one analytic log-det as a
/// negative control.
pub fn run_verify(seeds: u64, inject_fault: bool) -> Result<VerifyReport> {
    let mut audits = Vec::new();
    let sizes: [(usize, usize); 8] = [
        (1, 2),
        (1, 4),
        (2, 2),
        (2, 4),
        (4, 2),
        (4, 4),
        (8, 2),
        (8, 4),
    ];
    for seed in 0..seeds {
        for &(half, d) in &sizes {
            let layout = ModalityLayout::new(half, half)?;
            let n = layout.n();
            let mut r = rng::stream(seed, "verify-inputs");
            let x = rng::gaussian_tensor(&mut r, &[n, d], 1.0);

            // One token per modality leaves no within-modality halves for
            // IMCA to pair, so the smallest size audits the MMCA-only stack;
            // every other layer kind is still present there.
            let attn_variant = if half == 1 {
                ModelVariant::MangoMmcaOnly
            } else {
                ModelVariant::Mango
            };
            let mango = FlowModel::build(
                crate::flow::ModelSpec {
                    variant: attn_variant,
                    layout,
                    d_model: d,
                    blocks: 1,
                },
                seed,
            )?;
            for (li, layer) in mango.sub_layers().iter().enumerate() {
                audits.push(audit_sublayer(
                    format!("{} n{n} d{d} seed{seed} l{li}", layer.kind()),
                    layer,
                    layout,
                    &x,
                )?);
            }
            let glow = FlowModel::build(
                crate::flow::ModelSpec {
                    variant: ModelVariant::GlowLinear,
                    layout,
                    d_model: d,
                    blocks: 1,
                },
                seed,
            )?;
            if let Some(mixing) = glow
                .sub_layers()
                .iter()
                .find(|l| matches!(l, SubLayer::Mixing(_)))
            {
                audits.push(audit_sublayer(
                    format!("lica_mixing n{n} d{d} seed{seed}"),
                    mixing,
                    layout,
                    &x,
                )?);
            }

            for (variant, blocks) in [
                (attn_variant, 1),
                (attn_variant, 2),
                (ModelVariant::CouplingOnly, 1),
                (ModelVariant::GlowLinear, 1),
            ] {
                let model = FlowModel::build(
                    crate::flow::ModelSpec {
                        variant,
                        layout,
                        d_model: d,
                        blocks,
                    },
                    seed,
                )?;
                audits.push(audit_model(
                    format!("model {} L{blocks} n{n} d{d} seed{seed}", variant.name()),
                    &model,
                    &x,
                )?);
            }
        }
    }
    if inject_fault {
        if let Some(a) = audits.first_mut() {
            // additive corruption: a multiplicative one is a no-op when the
            // true log-det is near zero
            a.logdet_analytic += 1.0 + a.logdet_analytic.abs();
            a.rel_err = (a.logdet_analytic - a.logdet_numeric).abs()
                / a.logdet_numeric.abs().max(1.0);
            a.pass = a.pass && a.rel_err < LOGDET_REL_TOL;
            a.name = format!("{} [injected fault]", a.name);
        }
    }
    let passed = audits.iter().filter(|a| a.pass).count();
    Ok(VerifyReport {
        total: audits.len(),
        passed,
        logdet_exponent: "d".into(),
        audits,
    })
}

pub fn cmd_verify(seeds: u64, inject_fault: bool, out: Option<&Path>) -> Result<i32> {
    let report = run_verify(seeds, inject_fault)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match out {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    eprintln!("verify: {}/{} audits passed", report.passed, report.total);
    Ok(if report.passed == report.total { 0 } else { 1 })
}

// -------------------------------------------------------------- gen-data --

/// FNV-1a over the container file bytes; stable content hash for CI.
pub fn content_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn cmd_gen_data(name: &str, seed: u64, size: usize, out: &Path) -> Result<i32> {
    let spec = DatasetSpec::new(DatasetName::parse(name)?, seed, size);
    let data = generate(&spec)?;
    dataset_to_container(&spec, &data).write(out)?;
    let bytes = std::fs::read(out)?;
    println!("{:016x}", content_hash(&bytes));
    Ok(0)
}

// ----------------------------------------------------- train / eval path --

/// Per-modality compressors: one fitted on A-token rows, one on B-token
/// rows.
pub struct ModalityCompressors {
    pub a: Compressor,
    pub b: Compressor,
}

impl ModalityCompressors {
    pub fn fit_on(
        section: &CompressorSection,
        data: &[(TokenBatch, Label)],
        seed: u64,
    ) -> Result<Self> {
        let stack = |half: usize| -> Result<Tensor> {
            let mut rows: Option<Tensor> = None;
            for (batch, _) in data {
                let n = batch.layout.n();
                let part = batch.tokens.slice_rows(half * n / 2, n / 2);
                rows = Some(match rows {
                    None => part,
                    Some(acc) => acc.concat_rows(&part)?,
                });
            }
            rows.ok_or_else(|| MangoError::Input("empty dataset".into()))
        };
        Ok(ModalityCompressors {
            a: fit(section.kind, &stack(0)?, section.k, rng::sub_seed(seed, "compress-a"))?,
            b: fit(section.kind, &stack(1)?, section.k, rng::sub_seed(seed, "compress-b"))?,
        })
    }

    pub fn encode_batch(&self, batch: &TokenBatch) -> Result<TokenBatch> {
        let n = batch.layout.n();
        let a = self.a.encode(&batch.tokens.slice_rows(0, n / 2))?;
        let b = self.b.encode(&batch.tokens.slice_rows(n / 2, n / 2))?;
        Ok(TokenBatch {
            tokens: a.concat_rows(&b)?,
            layout: batch.layout,
            pad_mask: batch.pad_mask.clone(),
        })
    }

    pub fn encode_dataset(
        &self,
        data: &[(TokenBatch, Label)],
    ) -> Result<Vec<(TokenBatch, Label)>> {
        data.iter()
            .map(|(b, l)| Ok((self.encode_batch(b)?, l.clone())))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.a.to_container().write(&dir.join("compressor_a.mngo"))?;
        self.b.to_container().write(&dir.join("compressor_b.mngo"))
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let pa = dir.join("compressor_a.mngo");
        let pb = dir.join("compressor_b.mngo");
        if !pa.exists() || !pb.exists() {
            return Ok(None);
        }
        Ok(Some(ModalityCompressors {
            a: Compressor::from_container(&Container::read(&pa)?)?,
            b: Compressor::from_container(&Container::read(&pb)?)?,
        }))
    }
}

/// Default generated dataset size when training from a config file.
pub const DEFAULT_DATASET_SIZE: usize = 256;

fn head_for(cfg: &ExperimentConfig, seed: u64) -> Option<TaskHead> {
    let section = cfg.task.as_ref()?;
    let d = cfg.flow_d_model();
    let mut r = rng::stream(seed, "head-init");
    Some(match section.kind {
        TaskKind::Classification => TaskHead::new(TaskKind::Classification, d, 2, &mut r),
        TaskKind::Translation => TaskHead::new(TaskKind::Translation, d, cfg.d_model, &mut r),
    })
}

#[derive(Serialize)]
pub struct TrainSummary {
    pub init: EvalReport,
    pub best: EvalReport,
    pub finals: EvalReport,
    pub wallclock_s: f64,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<i32> {
    let cfg = ExperimentConfig::load(config_path)?;
    std::fs::create_dir_all(out_dir)?;
    let data = generate(&cfg.dataset_spec(DEFAULT_DATASET_SIZE))?;
    let (data, compressors) = match &cfg.compressor {
        Some(section) => {
            // fit on the training split only, then freeze
            let (train_split, _) = split_train_val(&data);
            let c = ModalityCompressors::fit_on(section, train_split, cfg.train.seed)?;
            let encoded = c.encode_dataset(&data)?;
            c.save(out_dir)?;
            (encoded, Some(c))
        }
        None => (data, None),
    };
    let _ = compressors;

    let mut model = FlowModel::build(
        cfg.model_spec(ModelVariant::Mango)?,
        rng::sub_seed(cfg.train.seed, "init"),
    )?;
    let mut head = head_for(&cfg, cfg.train.seed);
    let tc = cfg.train_config();

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let outcome = train(&mut model, head.as_mut(), &data, &tc, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        let _ = writeln!(metrics_file, "{line}");
    })?;
    metrics_file.flush()?;

    let ckpt = out_dir.join("model.mngo");
    checkpoint::save_model(&model, &ckpt)?;
    if let Some(h) = &head {
        Container {
            meta: serde_json::json!({"kind": "task_head", "task": format!("{:?}", h.kind)}),
            tensors: vec![("head.projection".into(), h.projection.value.clone())],
        }
        .write(&out_dir.join("head.mngo"))?;
    }
    let summary = TrainSummary {
        init: outcome.init_report,
        best: outcome.best_report,
        finals: outcome.final_report,
        wallclock_s: outcome.wallclock_s,
        checkpoint: ckpt,
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(0)
}

/// Evaluate a checkpoint on a dataset file's held-out split (same 80/20 rule
/// as training).
pub fn cmd_eval(ckpt: &Path, data_path: &Path) -> Result<i32> {
    let model = checkpoint::load_model(ckpt)?;
    let (_, data) = dataset_from_container(&Container::read(data_path)?)?;
    let data = maybe_compress(&model, ckpt, data)?;
    let (_, val) = split_train_val(&data);
    let report = evaluate(&model, None, val)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(0)
}

fn maybe_compress(
    model: &FlowModel,
    ckpt: &Path,
    data: Vec<(TokenBatch, Label)>,
) -> Result<Vec<(TokenBatch, Label)>> {
    let data_d = data
        .first()
        .map(|(b, _)| b.tokens.cols())
        .ok_or_else(|| MangoError::Input("dataset is empty".into()))?;
    if data_d == model.spec.d_model {
        return Ok(data);
    }
    let dir = ckpt.parent().unwrap_or_else(|| Path::new("."));
    match ModalityCompressors::load(dir)? {
        Some(c) if c.a.k() == model.spec.d_model => c.encode_dataset(&data),
        _ => Err(MangoError::Format {
            offset: 0,
            detail: format!(
                "d_model mismatch: checkpoint models {} features, dataset has {} \
                 (and no matching compressors found next to the checkpoint)",
                model.spec.d_model, data_d
            ),
        }),
    }
}

pub fn cmd_sample(ckpt: &Path, count: usize, seed: u64, out: &Path) -> Result<i32> {
    let model = checkpoint::load_model(ckpt)?;
    let samples = model.sample(count, seed)?;
    Container {
        meta: serde_json::json!({
            "kind": "samples",
            "count": count,
            "seed": seed,
            "model": serde_json::to_value(&model.spec).expect("spec serializes"),
        }),
        tensors: samples
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("sample{i}"), t))
            .collect(),
    }
    .write(out)?;
    Ok(0)
}

// -------------------------------------------------------------- compare --

#[derive(Clone, Serialize)]
pub struct CompareRow {
    pub grid: String,
    pub cell: String,
    pub seed: String,
    pub nll_per_dim: f64,
    pub task_loss: f64,
    pub accuracy: f64,
    pub wallclock_s: f64,
}

struct Cell {
    grid: String,
    cell: String,
    variant: ModelVariant,
    blocks: usize,
    compressor: Option<CompressorSection>,
    /// Training-step budget as a fraction of the config's `steps`. The
    /// latent cell trains on half the budget: the point of compression is
    /// reaching the same density quality on less compute, so the grid
    /// compares the compressed flow's half-budget result against the raw
    /// flow's full-budget result.
    steps_frac: f64,
}

fn grid_cells(cfg: &ExperimentConfig, compare: &CompareSection) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for grid in &compare.grids {
        match grid.as_str() {
            "variants" => {
                for v in [
                    ModelVariant::Mango,
                    ModelVariant::GlowLinear,
                    ModelVariant::CouplingOnly,
                ] {
                    cells.push(Cell {
                        grid: grid.clone(),
                        cell: v.name().into(),
                        variant: v,
                        blocks: cfg.blocks,
                        compressor: None,
                        steps_frac: 1.0,
                    });
                }
            }
            "partitions" => {
                for v in [
                    ModelVariant::Mango,
                    ModelVariant::MangoMmcaImca,
                    ModelVariant::MangoMmcaOnly,
                ] {
                    cells.push(Cell {
                        grid: grid.clone(),
                        cell: v.name().into(),
                        variant: v,
                        blocks: cfg.blocks,
                        compressor: None,
                        steps_frac: 1.0,
                    });
                }
            }
            "latent" => {
                cells.push(Cell {
                    grid: grid.clone(),
                    cell: "raw".into(),
                    variant: ModelVariant::Mango,
                    blocks: cfg.blocks,
                    compressor: None,
                    steps_frac: 1.0,
                });
                cells.push(Cell {
                    grid: grid.clone(),
                    cell: "latent".into(),
                    variant: ModelVariant::Mango,
                    blocks: cfg.blocks,
                    compressor: Some(CompressorSection {
                        kind: CompressorKind::Pca,
                        k: (cfg.d_model / 2).max(1),
                    }),
                    steps_frac: 0.5,
                });
            }
            "blocks" => {
                for l in [2usize, 4, 6, 8] {
                    cells.push(Cell {
                        grid: grid.clone(),
                        cell: format!("L{l}"),
                        variant: ModelVariant::Mango,
                        blocks: l,
                        compressor: None,
                        steps_frac: 1.0,
                    });
                }
            }
            other => {
                return Err(MangoError::Config {
                    field: "compare.grids".into(),
                    detail: format!("unknown grid {other:?}"),
                })
            }
        }
    }
    Ok(cells)
}

/// One training run for one (cell, seed).
fn run_cell(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> Result<CompareRow> {
    let mut dspec = cfg.dataset_spec(DEFAULT_DATASET_SIZE);
    dspec.seed = seed;
    let data = generate(&dspec)?;
    let (data, flow_d) = match &cell.compressor {
        Some(section) => {
            let (train_split, _) = split_train_val(&data);
            let c = ModalityCompressors::fit_on(section, train_split, seed)?;
            (c.encode_dataset(&data)?, section.k)
        }
        None => (data, cfg.d_model),
    };
    let mut model = FlowModel::build(
        crate::flow::ModelSpec {
            variant: cell.variant,
            layout: ModalityLayout::new(cfg.n_tokens_per_modality, cfg.n_tokens_per_modality)?,
            d_model: flow_d,
            blocks: cell.blocks,
        },
        rng::sub_seed(seed, "init"),
    )?;
    let mut tc = cfg.train_config();
    tc.seed = seed;
    tc.weight_task = 0.0;
    tc.steps = ((tc.steps as f64 * cell.steps_frac).round() as usize).max(1);
    let outcome = train(&mut model, None, &data, &tc, |_| {})?;
    Ok(CompareRow {
        grid: cell.grid.clone(),
        cell: cell.cell.clone(),
        seed: seed.to_string(),
        nll_per_dim: outcome.best_report.nll_per_dim,
        task_loss: outcome.best_report.task_loss,
        accuracy: outcome.best_report.accuracy,
        wallclock_s: outcome.wallclock_s,
    })
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("MANGO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    cap.min(jobs).max(1)
}

pub fn run_compare(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    let compare = cfg.compare.clone().unwrap_or_default();
    if compare.seeds.len() < 3 {
        return Err(MangoError::Config {
            field: "compare.seeds".into(),
            detail: format!("need at least 3 seeds, got {}", compare.seeds.len()),
        });
    }
    let cells = grid_cells(cfg, &compare)?;
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| compare.seeds.iter().map(move |&s| (ci, s)))
        .collect();
    let workers = worker_count(jobs.len());

    let mut slots: Vec<Option<Result<CompareRow>>> = Vec::new();
    slots.resize_with(jobs.len(), || None);
    let slots = std::sync::Mutex::new(slots);
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (ci, seed) = jobs[i];
                let row = run_cell(cfg, &cells[ci], seed);
                slots.lock().unwrap()[i] = Some(row);
            });
        }
    });
    let results: Vec<Result<CompareRow>> = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|s| s.expect("job ran"))
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    // summary rows: mean and stddev per cell, in cell order
    let mut summary = Vec::new();
    for cell in &cells {
        let vals: Vec<&CompareRow> = rows
            .iter()
            .filter(|r| r.grid == cell.grid && r.cell == cell.cell)
            .collect();
        let n = vals.len() as f64;
        let mean = |f: &dyn Fn(&CompareRow) -> f64| vals.iter().map(|r| f(r)).sum::<f64>() / n;
        let std = |f: &dyn Fn(&CompareRow) -> f64| {
            let m = mean(f);
            (vals.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt()
        };
        summary.push(CompareRow {
            grid: cell.grid.clone(),
            cell: cell.cell.clone(),
            seed: "mean".into(),
            nll_per_dim: mean(&|r| r.nll_per_dim),
            task_loss: mean(&|r| r.task_loss),
            accuracy: mean(&|r| r.accuracy),
            wallclock_s: mean(&|r| r.wallclock_s),
        });
        summary.push(CompareRow {
            grid: cell.grid.clone(),
            cell: cell.cell.clone(),
            seed: "stddev".into(),
            nll_per_dim: std(&|r| r.nll_per_dim),
            task_loss: std(&|r| r.task_loss),
            accuracy: std(&|r| r.accuracy),
            wallclock_s: std(&|r| r.wallclock_s),
        });
    }
    rows.extend(summary);
    Ok(rows)
}

pub fn write_compare_csv(rows: &[CompareRow], out: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "grid,cell,seed,nll_per_dim,task_loss,accuracy,wallclock_s")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:.9},{:.9},{:.9},{:.3}",
            r.grid, r.cell, r.seed, r.nll_per_dim, r.task_loss, r.accuracy, r.wallclock_s
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn cmd_compare(config_path: &Path, out: &Path) -> Result<i32> {
    let cfg = ExperimentConfig::load(config_path)?;
    let rows = run_compare(&cfg)?;
    write_compare_csv(&rows, out)?;
    eprintln!("compare: wrote {} rows to {}", rows.len(), out.display());
    Ok(0)
}

// ------------------------------------------------------ export-attention --

#[derive(Serialize)]
pub struct AttentionSidecar {
    pub layer_index: usize,
    pub kind: String,
    pub rows: usize,
    /// Number of leading rows of the conditioning partition that originate
    /// from modality A; None when the partition is a learned mix.
    pub modality_boundary: Option<usize>,
}

pub fn cmd_export_attention(
    ckpt: &Path,
    data_path: &Path,
    layer: usize,
    out: &Path,
) -> Result<i32> {
    let model = checkpoint::load_model(ckpt)?;
    let (_, data) = dataset_from_container(&Container::read(data_path)?)?;
    let data = maybe_compress(&model, ckpt, data)?;
    let (batch, _) = data
        .first()
        .ok_or_else(|| MangoError::Input("dataset is empty".into()))?;

    // walk the flow, capturing attention from each attention-bearing layer
    let layout = model.layout();
    let mut cur = batch.tokens.clone();
    let mut seen = 0usize;
    for sub in model.sub_layers() {
        if let Some(att) = sub.attention_map(&cur, layout)? {
            if seen == layer {
                std::fs::write(out, att.to_csv())?;
                let m = layout.n() / 2;
                let boundary = match sub {
                    SubLayer::Ica { scheme, .. } => match scheme {
                        crate::partition::IndexScheme::MmcaAToB => Some(m),
                        crate::partition::IndexScheme::MmcaBToA => Some(0),
                        crate::partition::IndexScheme::Imca(_) => Some(m / 2),
                    },
                    _ => None,
                };
                let sidecar = AttentionSidecar {
                    layer_index: layer,
                    kind: sub.kind().into(),
                    rows: m,
                    modality_boundary: boundary,
                };
                let side_path = out.with_extension("json");
                std::fs::write(
                    &side_path,
                    serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
                )?;
                return Ok(0);
            }
            seen += 1;
        }
        let (y, _) = sub.forward(&cur, layout)?;
        cur = y;
    }
    Err(MangoError::Input(format!(
        "attention layer index {layer} out of range; model has {seen} attention layers"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_suite_is_large_and_green() {
        let report = run_verify(2, false).unwrap();
        assert!(report.total >= 60, "only {} audits", report.total);
        assert_eq!(report.passed, report.total);
        assert_eq!(report.logdet_exponent, "d");
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = run_verify(1, true).unwrap();
        assert!(report.passed < report.total);
        assert!(report.audits[0].name.contains("injected fault"));
        assert!(!report.audits[0].pass);
    }

    #[test]
    fn gen_data_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mngo");
        let p2 = dir.path().join("b.mngo");
        cmd_gen_data("two-moons-pair", 7, 5, &p1).unwrap();
        cmd_gen_data("two-moons-pair", 7, 5, &p2).unwrap();
        assert_eq!(
            content_hash(&std::fs::read(&p1).unwrap()),
            content_hash(&std::fs::read(&p2).unwrap())
        );
        assert!(matches!(
            cmd_gen_data("imagenet", 0, 1, &p1),
            Err(MangoError::Config { .. })
        ));
        // size 0 is a valid empty container
        cmd_gen_data("toy-translation", 0, 0, &p1).unwrap();
        let (spec, data) = dataset_from_container(&Container::read(&p1).unwrap()).unwrap();
        assert_eq!(spec.size, 0);
        assert!(data.is_empty());
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(
            exit_code(&MangoError::Config {
                field: "x".into(),
                detail: String::new()
            }),
            2
        );
        assert_eq!(exit_code(&MangoError::Input(String::new())), 2);
        assert_eq!(
            exit_code(&MangoError::Numeric {
                block: 0,
                detail: String::new()
            }),
            1
        );
    }
}
