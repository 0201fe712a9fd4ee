//! Subcommand implementations. Each takes a validated [`RunConfig`] and
//! writes its outputs under `<outdir>/<run_id>/`.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use msl_core::ats::{estimate_stats, gaussian_fit_report, GaussianFit, StatsSample};
use msl_core::catalog::{gen_catalog, Split, TitleShape};
use msl_core::decode::MetricsReport;
use msl_core::losses::{token_weight, Support};
use msl_core::model::{Checkpoint, ModelParams};
use msl_core::trie::TokenTrie;
use serde::Serialize;

use crate::config::{LossKind, RunConfig, TemperatureMode};
use crate::data::{Dataset, Example};
use crate::output::{cell, header, RunDir};
use crate::train::{evaluate, run_on, RunRecord, StepRow};
use crate::HarnessError;

/// Temperatures tried by the sweep and the tuned variants.
pub const DEFAULT_TAU_GRID: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 3.0, 4.5, 6.0];

fn sub_config(cfg: &RunConfig, parent: &Path, run_id: String) -> RunConfig {
    RunConfig { outdir: parent.to_path_buf(), run_id, ..cfg.clone() }
}

pub fn gen_data(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let dir = RunDir::create(cfg.run_dir())?;
    data.catalog.vocab().write_jsonl(File::create(dir.file("vocab.jsonl"))?)?;
    data.catalog.write_jsonl(File::create(dir.file("catalog.jsonl"))?)?;
    data.interactions.write_jsonl(File::create(dir.file("interactions.jsonl"))?)?;
    dir.write_json("config.json", cfg)?;
    Ok(data)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrieStats {
    pub items: usize,
    pub nodes: usize,
    pub stored_tokens: usize,
    pub build_secs: f64,
    pub train_avt: f64,
    pub vocab_size: usize,
}

pub fn build_trie(cfg: &RunConfig) -> Result<TrieStats, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let dir = RunDir::create(cfg.run_dir())?;
    dir.write_jsonl("trie_edges.jsonl", &data.trie.dump_edges())?;
    let stats = TrieStats {
        items: data.trie.item_count(),
        nodes: data.trie.node_count(),
        stored_tokens: data.trie.stored_tokens(),
        build_secs: data.trie_build_secs,
        train_avt: data.train_avt,
        vocab_size: data.vocab_size(),
    };
    dir.write_json("trie_stats.json", &stats)?;
    Ok(stats)
}

pub fn train(cfg: &RunConfig) -> Result<RunRecord, HarnessError> {
    crate::train::run(cfg)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    Ok(Checkpoint::read(BufReader::new(File::open(path)?))?)
}

fn check_shape(params: &ModelParams, data: &Dataset) -> Result<(), HarnessError> {
    if params.vocab_size != data.vocab_size() {
        return Err(HarnessError::Config(format!(
            "checkpoint vocabulary {} does not match the configured data ({})",
            params.vocab_size,
            data.vocab_size()
        )));
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<MetricsReport, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    check_shape(&ck.params, &data)?;
    let (report, preds) = evaluate(&ck.params, &data, split, cfg)?;
    let dir = RunDir::create(cfg.run_dir())?;
    let name = match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    };
    dir.write_jsonl(&format!("predictions_{name}.jsonl"), &preds)?;
    let summary: Vec<(String, f64)> = report
        .ks
        .iter()
        .zip(&report.ndcg)
        .map(|(k, v)| (format!("ndcg@{k}"), *v))
        .chain(report.ks.iter().zip(&report.hr).map(|(k, v)| (format!("hr@{k}"), *v)))
        .collect();
    dir.write_json(&format!("eval_{name}.json"), &summary)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GradNormReport {
    pub steps: Vec<StepRow>,
    /// Fraction of steps after epoch 1 with `||grad L1|| > ||grad L2||`.
    pub dominance_after_epoch1: f64,
    pub max_additivity_err: f64,
}

pub fn gradnorm_summary(steps: &[StepRow]) -> (f64, f64) {
    let late: Vec<&StepRow> = steps.iter().filter(|s| s.epoch > 1).collect();
    let dominant = late.iter().filter(|s| s.grad_norm_l1 > s.grad_norm_l2).count();
    let frac = if late.is_empty() { 0.0 } else { dominant as f64 / late.len() as f64 };
    let err = steps.iter().map(|s| s.additivity_err).fold(0.0, f64::max);
    (frac, err)
}

/// LML training with separate parameter-space norms of the two loss terms.
pub fn diag_gradnorms(cfg: &RunConfig) -> Result<GradNormReport, HarnessError> {
    let cfg = RunConfig { loss: LossKind::Lml, vocab_ratio_alpha: false, ..cfg.clone() };
    cfg.validate()?;
    let data = Dataset::generate(&cfg)?;
    let rec = run_on(&cfg, &data)?;
    let rows: Vec<Vec<String>> = rec
        .steps
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                s.epoch.to_string(),
                cell(s.grad_norm_l1),
                cell(s.grad_norm_l2),
                cell(s.grad_norm_lml),
                cell(s.grad_norm_l1 / s.grad_norm_l2),
                cell(s.additivity_err),
            ]
        })
        .collect();
    let dir = RunDir::create(cfg.run_dir())?;
    dir.write_csv(
        "gradnorms.csv",
        &header(&["step", "epoch", "grad_norm_l1", "grad_norm_l2", "grad_norm_lml", "ratio", "additivity_err"]),
        &rows,
    )?;
    let (dominance_after_epoch1, max_additivity_err) = gradnorm_summary(&rec.steps);
    Ok(GradNormReport { steps: rec.steps, dominance_after_epoch1, max_additivity_err })
}

#[derive(Debug, Clone, Serialize)]
pub struct L2Curves {
    pub l2_under_lml: Vec<f64>,
    pub l2_under_l2: Vec<f64>,
    /// Training-split L2 of the final models.
    pub final_l2_under_lml: f64,
    pub final_l2_under_l2: f64,
}

/// Two runs from the same initialization: one optimizes LML, the other
/// optimizes only the positive-vs-negative term (unit-temperature MSL).
pub fn diag_l2curves(cfg: &RunConfig) -> Result<L2Curves, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let parent = cfg.run_dir();
    let base = RunConfig { temperature: TemperatureMode::Fixed { tau: 1.0 }, vocab_ratio_alpha: false, ..cfg.clone() };
    let lml = run_on(&RunConfig { loss: LossKind::Lml, ..sub_config(&base, &parent, "lml".into()) }, &data)?;
    let l2 = run_on(&RunConfig { loss: LossKind::Msl, ..sub_config(&base, &parent, "l2".into()) }, &data)?;
    let curves = L2Curves {
        l2_under_lml: lml.steps.iter().map(|s| s.l2).collect(),
        l2_under_l2: l2.steps.iter().map(|s| s.l2).collect(),
        final_l2_under_lml: lml.report.final_train.l2,
        final_l2_under_l2: l2.report.final_train.l2,
    };
    let rows: Vec<Vec<String>> = lml
        .steps
        .iter()
        .zip(&l2.steps)
        .map(|(a, b)| vec![a.step.to_string(), a.epoch.to_string(), cell(a.l2), cell(b.l2)])
        .collect();
    let dir = RunDir::create(parent)?;
    dir.write_csv("l2curves.csv", &header(&["step", "epoch", "l2_under_lml", "l2_under_l2"]), &rows)?;
    dir.write_json(
        "l2curves_summary.json",
        &serde_json::json!({
            "final_l2_under_lml": curves.final_l2_under_lml,
            "final_l2_under_l2": curves.final_l2_under_l2,
        }),
    )?;
    Ok(curves)
}

/// The first `batch_size` training examples.
fn probe_batch<'a>(cfg: &RunConfig, data: &'a Dataset) -> &'a [Example] {
    &data.train[..cfg.batch_size.min(data.train.len())]
}

fn probe_tau(cfg: &RunConfig) -> f64 {
    match cfg.temperature {
        TemperatureMode::Fixed { tau } => tau,
        TemperatureMode::Ats { .. } => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightRow {
    pub w_lml: f64,
    pub w_msl: f64,
    /// 1-based response position.
    pub position: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightReport {
    pub rows: Vec<WeightRow>,
    pub threshold: f64,
    pub low_weight_count: usize,
    /// Share of low-weight MSL tokens at positions 1 to 3.
    pub low_weight_early_fraction: f64,
}

pub const LOW_WEIGHT: f64 = 0.1;

/// Per-token weights of one batch under a checkpoint, sorted by MSL weight
/// descending.
pub fn diag_weights(cfg: &RunConfig, checkpoint: &Path) -> Result<WeightReport, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    check_shape(&ck.params, &data)?;
    let report = weights_for(&ck.params, probe_batch(cfg, &data), probe_tau(cfg))?;
    let dir = RunDir::create(cfg.run_dir())?;
    let rows: Vec<Vec<String>> =
        report.rows.iter().map(|r| vec![cell(r.w_lml), cell(r.w_msl), r.position.to_string()]).collect();
    dir.write_csv("weights.csv", &header(&["w_lml", "w_msl", "position"]), &rows)?;
    dir.write_json(
        "weights_summary.json",
        &serde_json::json!({
            "threshold": report.threshold,
            "low_weight_count": report.low_weight_count,
            "low_weight_early_fraction": report.low_weight_early_fraction,
        }),
    )?;
    Ok(report)
}

pub fn weights_for(params: &ModelParams, batch: &[Example], tau: f64) -> Result<WeightReport, HarnessError> {
    let mut rows = Vec::new();
    for ex in batch {
        for (t, &y) in ex.response.iter().enumerate() {
            let mut ctx = ex.prompt.clone();
            ctx.extend_from_slice(&ex.response[..t]);
            let f = params.forward(&ctx)?.logits.values;
            rows.push(WeightRow {
                w_lml: token_weight(&f, y, Support::Full, tau)?,
                w_msl: token_weight(&f, y, Support::Valid(ex.mask.valid(t)), tau)?,
                position: t + 1,
            });
        }
    }
    rows.sort_by(|a, b| {
        b.w_msl.total_cmp(&a.w_msl).then(b.w_lml.total_cmp(&a.w_lml)).then(a.position.cmp(&b.position))
    });
    let low: Vec<&WeightRow> = rows.iter().filter(|r| r.w_msl < LOW_WEIGHT).collect();
    let early = low.iter().filter(|r| r.position <= 3).count();
    Ok(WeightReport {
        threshold: LOW_WEIGHT,
        low_weight_count: low.len(),
        low_weight_early_fraction: if low.is_empty() { 0.0 } else { early as f64 / low.len() as f64 },
        rows,
    })
}

/// Gaussian fit of the valid-token logits of one batch under a checkpoint.
pub fn diag_gaussfit(cfg: &RunConfig, checkpoint: &Path, bins: usize) -> Result<GaussianFit, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    check_shape(&ck.params, &data)?;
    let mut rows = Vec::new();
    for ex in probe_batch(cfg, &data) {
        for t in 0..ex.response.len() {
            let mut ctx = ex.prompt.clone();
            ctx.extend_from_slice(&ex.response[..t]);
            rows.push((ck.params.forward(&ctx)?.logits.values, ex.mask.valid(t), ex.response[t]));
        }
    }
    let sample: Vec<f64> = rows.iter().flat_map(|(f, v, _)| v.iter().map(|&z| f[z as usize])).collect();
    let fit = gaussian_fit_report(&sample, bins)?;
    let stats = estimate_stats(rows.iter().map(|(f, v, y)| StatsSample { logits: f, valid: v, target: *y }))?;
    let dir = RunDir::create(cfg.run_dir())?;
    dir.write_json("gaussfit.json", &serde_json::json!({ "fit": &fit, "batch_stats": stats }))?;
    let hist: Vec<Vec<String>> = fit
        .histogram
        .iter()
        .map(|b| vec![cell(b.lo), cell(b.hi), b.count.to_string(), cell(b.density), cell(b.gaussian_density)])
        .collect();
    dir.write_csv("gaussfit_hist.csv", &header(&["lo", "hi", "count", "density", "gaussian_density"]), &hist)?;
    Ok(fit)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub mode: String,
    pub tau: f64,
    pub valid_ndcg10: f64,
    pub test_ndcg10: f64,
    pub tau_mean: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

fn ndcg10(rec: &RunRecord, row: &crate::train::EvalRow) -> f64 {
    let j = rec.report.ks.iter().position(|&k| k == 10).unwrap_or(rec.report.ks.len() - 1);
    row.ndcg[j]
}

fn sweep_row(mode: &str, tau: f64, rec: &RunRecord) -> SweepRow {
    SweepRow {
        mode: mode.into(),
        tau,
        valid_ndcg10: ndcg10(rec, &rec.report.best_valid),
        test_ndcg10: ndcg10(rec, &rec.report.test),
        tau_mean: rec.report.tau.mean,
        tau_min: rec.report.tau.min,
        tau_max: rec.report.tau.max,
    }
}

fn tau_label(tau: f64) -> String {
    format!("tau_{tau}")
}

fn write_sweep(dir: &RunDir, name: &str, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.clone(),
                cell(r.tau),
                cell(r.valid_ndcg10),
                cell(r.test_ndcg10),
                cell(r.tau_mean),
                cell(r.tau_min),
                cell(r.tau_max),
            ]
        })
        .collect();
    dir.write_csv(
        name,
        &header(&["mode", "tau", "valid_ndcg@10", "test_ndcg@10", "tau_mean", "tau_min", "tau_max"]),
        &cells,
    )
}

/// MSL at each fixed temperature of the grid, then MSL with adaptive
/// temperature on the same data and initialization.
pub fn sweep_temperature(cfg: &RunConfig, grid: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    cfg.validate()?;
    if grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(HarnessError::Config("temperature grid must be positive".into()));
    }
    let data = Dataset::generate(cfg)?;
    let parent = cfg.run_dir();
    let base = RunConfig { loss: LossKind::Msl, vocab_ratio_alpha: false, ..cfg.clone() };
    let mut rows = Vec::new();
    for &tau in grid {
        let c = RunConfig { temperature: TemperatureMode::Fixed { tau }, ..sub_config(&base, &parent, tau_label(tau)) };
        rows.push(sweep_row("fixed", tau, &run_on(&c, &data)?));
    }
    let ats = match cfg.temperature {
        t @ TemperatureMode::Ats { .. } => t,
        TemperatureMode::Fixed { .. } => TemperatureMode::ats_default(),
    };
    let rec = run_on(&RunConfig { temperature: ats, ..sub_config(&base, &parent, "ats".into()) }, &data)?;
    rows.push(sweep_row("ats", rec.report.tau.mean, &rec));
    write_sweep(&RunDir::create(parent)?, "sweep.csv", &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchRow {
    pub items: usize,
    pub stored_tokens: usize,
    pub nodes: usize,
    pub build_secs: f64,
}

pub const ITEMS_PER_FRANCHISE_BENCH: usize = 10;

/// Trie build time and size for generated catalogs of the given sizes.
/// Sizes are rounded up to whole franchises of ten items.
pub fn bench_trie(seed: u64, sizes: &[usize], outdir: Option<&Path>) -> Result<Vec<BenchRow>, HarnessError> {
    let mut rows = Vec::new();
    for &n in sizes {
        if n == 0 {
            let start = Instant::now();
            let trie = TokenTrie::build(std::iter::empty())?;
            rows.push(BenchRow {
                items: 0,
                stored_tokens: 0,
                nodes: trie.node_count(),
                build_secs: start.elapsed().as_secs_f64(),
            });
            continue;
        }
        let franchises = n.div_ceil(ITEMS_PER_FRANCHISE_BENCH);
        let shape = TitleShape { descriptor_pool: 200, ..TitleShape::default() };
        let catalog = gen_catalog(seed, franchises, ITEMS_PER_FRANCHISE_BENCH, &shape)?;
        let start = Instant::now();
        let trie = TokenTrie::from_catalog(&catalog)?;
        let build_secs = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            items: trie.item_count(),
            stored_tokens: trie.stored_tokens(),
            nodes: trie.node_count(),
            build_secs,
        });
    }
    if let Some(dir) = outdir {
        let dir = RunDir::create(dir.to_path_buf())?;
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.items.to_string(), r.stored_tokens.to_string(), r.nodes.to_string(), cell(r.build_secs)])
            .collect();
        dir.write_csv("bench_trie.csv", &header(&["items", "stored_tokens", "nodes", "build_secs"]), &cells)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    Lml,
    LmlTunedTau,
    MslUnitTau,
    MslAlpha,
    MslTunedTau,
    MslAts,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lml,
        Variant::LmlTunedTau,
        Variant::MslUnitTau,
        Variant::MslAlpha,
        Variant::MslTunedTau,
        Variant::MslAts,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Lml => "LML",
            Variant::LmlTunedTau => "LML + tuned tau",
            Variant::MslUnitTau => "MSL (tau = 1)",
            Variant::MslAlpha => "MSL + alpha",
            Variant::MslTunedTau => "MSL + tuned tau",
            Variant::MslAts => "MSL + ATS",
        }
    }
}

/// Summary of one finished run inside a comparison.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub loss: LossKind,
    pub mode: String,
    pub tau: f64,
    pub valid_ndcg10: f64,
    pub test_ndcg10: f64,
    pub final_train_l2: f64,
    pub gradnorm_dominance_after_epoch1: f64,
    pub tau_fallback_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub label: &'static str,
    /// Per seed, in seed order.
    pub runs: Vec<RunSummary>,
    pub mean_test_ndcg10: f64,
    pub std_test_ndcg10: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub grid: Vec<f64>,
    pub variants: Vec<VariantResult>,
    /// Every fixed-temperature MSL run, per seed then grid order.
    pub msl_grid: Vec<RunSummary>,
    pub lml_grid: Vec<RunSummary>,
}

impl Comparison {
    pub fn variant(&self, v: Variant) -> &VariantResult {
        self.variants.iter().find(|r| r.variant == v).expect("all variants are run")
    }

    /// Seed-mean test NDCG@10 of the best fixed-temperature MSL grid point.
    pub fn best_msl_grid_mean(&self) -> (f64, f64) {
        self.grid
            .iter()
            .map(|&tau| {
                let xs: Vec<f64> = self.msl_grid.iter().filter(|r| r.tau == tau).map(|r| r.test_ndcg10).collect();
                (tau, xs.iter().sum::<f64>() / xs.len() as f64)
            })
            .fold((f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }
}

fn summarize(seed: u64, rec: &RunRecord, tau: f64) -> RunSummary {
    let mode = match rec.config.temperature {
        TemperatureMode::Fixed { .. } if rec.config.vocab_ratio_alpha => "fixed+alpha",
        TemperatureMode::Fixed { .. } => "fixed",
        TemperatureMode::Ats { .. } => "ats",
    };
    RunSummary {
        seed,
        loss: rec.config.loss,
        mode: mode.into(),
        tau,
        valid_ndcg10: ndcg10(rec, &rec.report.best_valid),
        test_ndcg10: ndcg10(rec, &rec.report.test),
        final_train_l2: rec.report.final_train.l2,
        gradnorm_dominance_after_epoch1: gradnorm_summary(&rec.steps).0,
        tau_fallback_steps: rec.report.tau.fallback_steps,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Tuned variants pick, per seed, the grid point with the best validation NDCG@10.
fn tuned(grid_runs: &[RunSummary]) -> RunSummary {
    grid_runs
        .iter()
        .fold(None::<&RunSummary>, |best, r| match best {
            Some(b) if b.valid_ndcg10 >= r.valid_ndcg10 => Some(b),
            _ => Some(r),
        })
        .expect("non-empty grid")
        .clone()
}

/// Runs the variant matrix for seeds `cfg.seed .. cfg.seed + n_seeds`.
pub fn compare(cfg: &RunConfig, n_seeds: usize, grid: &[f64]) -> Result<Comparison, HarnessError> {
    cfg.validate()?;
    if grid.is_empty() || grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(HarnessError::Config("temperature grid must be non-empty and positive".into()));
    }
    let parent = cfg.run_dir();
    let ats = match cfg.temperature {
        t @ TemperatureMode::Ats { .. } => t,
        TemperatureMode::Fixed { .. } => TemperatureMode::ats_default(),
    };
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed + i).collect();
    let mut per_variant: Vec<Vec<RunSummary>> = vec![Vec::new(); Variant::ALL.len()];
    let mut msl_grid = Vec::new();
    let mut lml_grid = Vec::new();
    for &seed in &seeds {
        let seed_dir = parent.join(format!("seed{seed}"));
        let base = RunConfig { seed, vocab_ratio_alpha: false, ..cfg.clone() };
        let data = Dataset::generate(&base)?;
        let grid_runs = |loss: LossKind, tag: &str| -> Result<Vec<RunSummary>, HarnessError> {
            grid.iter()
                .map(|&tau| {
                    let c = RunConfig {
                        loss,
                        temperature: TemperatureMode::Fixed { tau },
                        ..sub_config(&base, &seed_dir, format!("{tag}_{}", tau_label(tau)))
                    };
                    Ok(summarize(seed, &run_on(&c, &data)?, tau))
                })
                .collect()
        };
        let lml_runs = grid_runs(LossKind::Lml, "lml")?;
        let msl_runs = grid_runs(LossKind::Msl, "msl")?;
        let unit = |runs: &[RunSummary], loss: LossKind| -> Result<RunSummary, HarnessError> {
            match runs.iter().find(|r| r.tau == 1.0) {
                Some(r) => Ok(r.clone()),
                None => {
                    let tag = if loss == LossKind::Lml { "lml" } else { "msl" };
                    let c = RunConfig {
                        loss,
                        temperature: TemperatureMode::Fixed { tau: 1.0 },
                        ..sub_config(&base, &seed_dir, format!("{tag}_{}", tau_label(1.0)))
                    };
                    Ok(summarize(seed, &run_on(&c, &data)?, 1.0))
                }
            }
        };
        per_variant[0].push(unit(&lml_runs, LossKind::Lml)?);
        per_variant[1].push(tuned(&lml_runs));
        per_variant[2].push(unit(&msl_runs, LossKind::Msl)?);
        let alpha = RunConfig {
            loss: LossKind::Msl,
            vocab_ratio_alpha: true,
            temperature: TemperatureMode::Fixed { tau: 1.0 },
            ..sub_config(&base, &seed_dir, "msl_alpha".into())
        };
        per_variant[3].push(summarize(seed, &run_on(&alpha, &data)?, 1.0));
        per_variant[4].push(tuned(&msl_runs));
        let a = RunConfig { loss: LossKind::Msl, temperature: ats, ..sub_config(&base, &seed_dir, "msl_ats".into()) };
        let rec = run_on(&a, &data)?;
        let tau_mean = rec.report.tau.mean;
        per_variant[5].push(summarize(seed, &rec, tau_mean));
        msl_grid.extend(msl_runs);
        lml_grid.extend(lml_runs);
    }
    let variants: Vec<VariantResult> = Variant::ALL
        .iter()
        .zip(per_variant)
        .map(|(&variant, runs)| {
            let xs: Vec<f64> = runs.iter().map(|r| r.test_ndcg10).collect();
            let (mean, std) = mean_std(&xs);
            VariantResult { variant, label: variant.label(), runs, mean_test_ndcg10: mean, std_test_ndcg10: std }
        })
        .collect();
    let cmp = Comparison { seeds, grid: grid.to_vec(), variants, msl_grid, lml_grid };

    let dir = RunDir::create(parent)?;
    let rows: Vec<Vec<String>> = cmp
        .variants
        .iter()
        .map(|v| vec![v.label.to_string(), cell(v.mean_test_ndcg10), cell(v.std_test_ndcg10)])
        .collect();
    dir.write_csv("compare.csv", &header(&["variant", "mean_test_ndcg@10", "std_test_ndcg@10"]), &rows)?;
    let mut runs: Vec<Vec<String>> = Vec::new();
    for v in &cmp.variants {
        for r in &v.runs {
            runs.push(vec![
                v.label.to_string(),
                r.seed.to_string(),
                cell(r.tau),
                cell(r.valid_ndcg10),
                cell(r.test_ndcg10),
                cell(r.final_train_l2),
                cell(r.gradnorm_dominance_after_epoch1),
            ]);
        }
    }
    dir.write_csv(
        "compare_runs.csv",
        &header(&[
            "variant",
            "seed",
            "tau",
            "valid_ndcg@10",
            "test_ndcg@10",
            "final_train_l2",
            "l1_dominance_after_epoch1",
        ]),
        &runs,
    )?;
    Ok(cmp)
}
