//! Training loop, per-epoch evaluation and model selection.

use std::time::Instant;

use log::info;
use msl_core::ats::{estimate_stats, AtsSchedule, StatsSample, TauSolver};
use msl_core::catalog::Split;
use msl_core::decode::{constrained_beam_search, BeamConfig, MetricsReport, Prediction, RankedList};
use msl_core::losses::{
    l1_grad, l2_grad, lml_grad, lml_token_at, msl_grad, token_breakdown, LossBreakdown, LossTotals, NegativeScale,
};
use msl_core::model::{Checkpoint, ModelParams, Optimizer, ParamGradients};
use msl_core::TokenId;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{LossKind, RunConfig, Stream, TemperatureMode};
use crate::data::{Dataset, Example};
use crate::output::{cell, header, RunDir};
use crate::HarnessError;

/// One optimizer step's log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRow {
    pub step: u64,
    pub epoch: usize,
    /// Mean training objective over the batch's token instances.
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    /// Parameter-space norms of the batch-mean gradients of each term.
    pub grad_norm_l1: f64,
    pub grad_norm_l2: f64,
    pub grad_norm_lml: f64,
    /// `||g1 + g2 - g_lml|| / max(1, ||g_lml||)`.
    pub additivity_err: f64,
    pub mean_w_lml: f64,
    pub mean_w_msl: f64,
    pub tau: f64,
    pub tau_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub split: String,
    pub ndcg: Vec<f64>,
    pub hr: Vec<f64>,
}

impl EvalRow {
    fn new(epoch: usize, split: Split, r: &MetricsReport) -> Self {
        let split = match split {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        Self { epoch, split: split.into(), ndcg: r.ndcg.clone(), hr: r.hr.clone() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TauTrace {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub last: f64,
    pub fallback_steps: usize,
}

impl TauTrace {
    fn from_steps(steps: &[StepRow]) -> Self {
        if steps.is_empty() {
            return Self::default();
        }
        let taus = steps.iter().map(|s| s.tau);
        Self {
            mean: taus.clone().sum::<f64>() / steps.len() as f64,
            min: taus.clone().fold(f64::INFINITY, f64::min),
            max: taus.clone().fold(f64::NEG_INFINITY, f64::max),
            last: steps.last().unwrap().tau,
            fallback_steps: steps.iter().filter(|s| s.tau_fallback).count(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub trie_build_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// Summary written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub ks: Vec<usize>,
    pub best_epoch: usize,
    pub best_valid: EvalRow,
    pub test: EvalRow,
    /// Unit-temperature losses over the training split before and after training.
    pub initial_train: LossTotals,
    pub final_train: LossTotals,
    pub tau: TauTrace,
    pub train_avt: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    pub report: Report,
    pub predictions: Vec<Prediction>,
    pub timings: Timings,
    pub final_params: ModelParams,
    pub best_params: ModelParams,
}

impl RunRecord {
    pub fn test_ndcg(&self, k: usize) -> f64 {
        let j = self.report.ks.iter().position(|&x| x == k).expect("k is configured");
        self.report.test.ndcg[j]
    }
}

/// Forward pass of one response token, kept for the backward pass.
struct TokenPass<'a> {
    context: Vec<TokenId>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    valid: &'a [TokenId],
    target: TokenId,
}

fn forward_batch<'a>(params: &ModelParams, batch: &[&'a Example]) -> Result<Vec<TokenPass<'a>>, HarnessError> {
    let mut out = Vec::new();
    for ex in batch {
        for (t, &y) in ex.response.iter().enumerate() {
            let mut context = ex.prompt.clone();
            context.extend_from_slice(&ex.response[..t]);
            let fwd = params.forward(&context)?;
            out.push(TokenPass {
                context,
                hidden: fwd.hidden,
                logits: fwd.logits.values,
                valid: ex.mask.valid(t),
                target: y,
            });
        }
    }
    Ok(out)
}

enum TauSource {
    Fixed(f64),
    Adaptive(AtsSchedule),
}

pub struct Trainer<'d> {
    cfg: RunConfig,
    data: &'d Dataset,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    tau: TauSource,
    scale: NegativeScale,
    batch_rng: ChaCha8Rng,
    step: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d Dataset) -> Result<Self, HarnessError> {
        let params =
            ModelParams::init(cfg.stream_seed(Stream::Init), cfg.model.d, data.vocab_size(), cfg.model.init_scale)?;
        let optimizer = Optimizer::new(cfg.model.optimizer, cfg.model.lr, &params)?;
        let tau = match cfg.temperature {
            TemperatureMode::Fixed { tau } => TauSource::Fixed(tau),
            TemperatureMode::Ats { eta, smoothing, bounds, branch } => {
                let solver = TauSolver::new(eta, branch, bounds)?;
                TauSource::Adaptive(AtsSchedule::new(solver, smoothing, data.train_avt)?)
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            data,
            params,
            optimizer,
            tau,
            scale: cfg.negative_scale(),
            batch_rng: ChaCha8Rng::seed_from_u64(cfg.stream_seed(Stream::Batching)),
            step: 0,
        })
    }

    /// Shuffled minibatches of training examples for one epoch.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.batch_rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One optimizer step on the given training examples.
    pub fn train_step(&mut self, epoch: usize, batch: &[usize]) -> Result<StepRow, HarnessError> {
        self.step += 1;
        let step = self.step;
        let abort = |what: &str| HarnessError::NumericAbort { step, what: what.into() };
        let examples: Vec<&Example> = batch.iter().map(|&i| &self.data.train[i]).collect();
        let passes = forward_batch(&self.params, &examples)?;
        if passes.iter().any(|p| p.logits.iter().any(|x| !x.is_finite())) {
            return Err(abort("logits"));
        }

        let (tau, tau_fallback) = match &mut self.tau {
            TauSource::Fixed(t) => (*t, false),
            TauSource::Adaptive(sched) => {
                let stats = estimate_stats(passes.iter().map(|p| StatsSample {
                    logits: &p.logits,
                    valid: p.valid,
                    target: p.target,
                }))?;
                let est = sched.step(&stats);
                (est.tau, est.fallback_applied)
            }
        };

        let inv = 1.0 / passes.len() as f64;
        let mut g_obj = ParamGradients::zeros_like(&self.params);
        let mut g1 = g_obj.clone();
        let mut g2 = g_obj.clone();
        let mut g_lml = g_obj.clone();
        let mut losses = LossBreakdown::default();
        let mut objective = 0.0;
        for p in &passes {
            let tl = token_breakdown(&p.logits, p.valid, p.target, tau, self.scale)?;
            let (value, mut grad) = match self.cfg.loss {
                LossKind::Lml => (lml_token_at(&p.logits, p.target, tau)?, lml_grad(&p.logits, p.target, tau)?),
                LossKind::Msl => {
                    let alpha = self.scale.alpha(p.logits.len(), p.valid.len());
                    (tl.msl, msl_grad(&p.logits, p.valid, p.target, tau, alpha)?)
                }
            };
            objective += value;
            losses.tokens.push(tl);
            let backward = |g: &mut Vec<f64>, into: &mut ParamGradients| {
                g.iter_mut().for_each(|x| *x *= inv);
                self.params.backward_into(&p.context, &p.hidden, g, into)
            };
            backward(&mut grad, &mut g_obj)?;
            backward(&mut l1_grad(&p.logits, p.valid)?, &mut g1)?;
            backward(&mut l2_grad(&p.logits, p.valid, p.target)?, &mut g2)?;
            backward(&mut lml_grad(&p.logits, p.target, 1.0)?, &mut g_lml)?;
        }
        let loss = objective * inv;
        if !loss.is_finite() {
            return Err(abort("loss"));
        }
        let means = losses.means();
        let grad_norm_lml = g_lml.norm();
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        sum.scale(-1.0);
        sum.add_assign(&g_lml);
        let row = StepRow {
            step,
            epoch,
            loss,
            l1: means.l1,
            l2: means.l2,
            grad_norm_l1: g1.norm(),
            grad_norm_l2: g2.norm(),
            grad_norm_lml,
            additivity_err: sum.norm() / grad_norm_lml.max(1.0),
            mean_w_lml: means.weight_lml,
            mean_w_msl: means.weight_msl,
            tau,
            tau_fallback,
        };
        match self.optimizer.step(&mut self.params, &g_obj) {
            Err(msl_core::model::ModelError::NonFinite(name)) => Err(abort(&format!("gradient in {name}"))),
            Err(e) => Err(e.into()),
            Ok(()) => Ok(row),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone(), self.optimizer.clone())
    }
}

/// Ranks every example of a split with constrained beam search.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    split: Split,
    cfg: &RunConfig,
) -> Result<(MetricsReport, Vec<Prediction>), HarnessError> {
    let examples = data.split(split);
    let beam = BeamConfig { beam_size: cfg.beam_size, length_normalize: cfg.length_normalize };
    let lists: Vec<RankedList> = examples
        .par_iter()
        .map(|ex| constrained_beam_search(params, &data.trie, &ex.prompt, &beam))
        .collect::<Result<_, _>>()?;
    let report =
        MetricsReport::from_rankings(&cfg.ks, examples.iter().zip(&lists).map(|(ex, l)| (ex.user_id, l, ex.target)))?;
    let preds = examples.iter().zip(&lists).map(|(ex, l)| Prediction::new(ex.user_id, l)).collect();
    Ok((report, preds))
}

/// Mean unit-temperature losses over every response token of `examples`.
pub fn loss_summary(params: &ModelParams, examples: &[Example]) -> Result<LossTotals, HarnessError> {
    let parts: Vec<LossBreakdown> = examples
        .par_iter()
        .map(|ex| -> Result<LossBreakdown, HarnessError> {
            let passes = forward_batch(params, &[ex])?;
            let tokens = passes
                .iter()
                .map(|p| token_breakdown(&p.logits, p.valid, p.target, 1.0, NegativeScale::One))
                .collect::<Result<_, _>>()?;
            Ok(LossBreakdown { tokens })
        })
        .collect::<Result<_, _>>()?;
    let mut all = LossBreakdown::default();
    for p in parts {
        all.extend(p);
    }
    Ok(all.means())
}

pub fn run(cfg: &RunConfig) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    run_on(cfg, &data)
}

fn step_cells(s: &StepRow) -> Vec<String> {
    vec![
        s.step.to_string(),
        s.epoch.to_string(),
        cell(s.loss),
        cell(s.l1),
        cell(s.l2),
        cell(s.grad_norm_l1),
        cell(s.grad_norm_l2),
        cell(s.mean_w_lml),
        cell(s.mean_w_msl),
        cell(s.tau),
    ]
}

pub const METRICS_COLUMNS: [&str; 10] =
    ["step", "epoch", "loss", "l1", "l2", "grad_norm_l1", "grad_norm_l2", "mean_w_lml", "mean_w_msl", "tau"];

fn eval_header(ks: &[usize]) -> Vec<String> {
    let mut h = header(&["epoch", "split"]);
    h.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    h.extend(ks.iter().map(|k| format!("hr@{k}")));
    h
}

fn eval_cells(r: &EvalRow) -> Vec<String> {
    let mut c = vec![r.epoch.to_string(), r.split.clone()];
    c.extend(r.ndcg.iter().map(|&x| cell(x)));
    c.extend(r.hr.iter().map(|&x| cell(x)));
    c
}

fn write_progress(dir: &RunDir, cfg: &RunConfig, steps: &[StepRow], evals: &[EvalRow]) -> Result<(), HarnessError> {
    let rows: Vec<Vec<String>> = steps.iter().map(step_cells).collect();
    dir.write_csv("metrics.csv", &header(&METRICS_COLUMNS), &rows)?;
    let rows: Vec<Vec<String>> = evals.iter().map(eval_cells).collect();
    dir.write_csv("eval.csv", &eval_header(&cfg.ks), &rows)
}

#[derive(Serialize)]
struct AbortRecord<'a> {
    step: u64,
    epoch: usize,
    reason: &'a str,
}

/// Trains, evaluates every epoch on the validation split, keeps the epoch
/// with the best NDCG@5 (epoch 0 is the initialization), and reports test
/// metrics from it. Outputs go to `<outdir>/<run_id>/`.
pub fn run_on(cfg: &RunConfig, data: &Dataset) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let dir = RunDir::create(cfg.run_dir())?;
    dir.write_json("config.json", cfg)?;
    let k5 = cfg.ks.iter().position(|&k| k == 5).expect("validated");

    let mut trainer = Trainer::new(cfg, data)?;
    let mut timings = Timings { trie_build_secs: data.trie_build_secs, ..Default::default() };
    let initial_train = loss_summary(&trainer.params, &data.train)?;

    let t = Instant::now();
    let (valid0, _) = evaluate(&trainer.params, data, Split::Valid, cfg)?;
    timings.eval_secs += t.elapsed().as_secs_f64();
    let mut evals = vec![EvalRow::new(0, Split::Valid, &valid0)];
    let mut best = (0usize, valid0.ndcg[k5], trainer.checkpoint());
    let mut steps = Vec::new();

    for epoch in 1..=cfg.epochs {
        let t = Instant::now();
        for batch in trainer.epoch_batches() {
            match trainer.train_step(epoch, &batch) {
                Ok(row) => steps.push(row),
                Err(e @ HarnessError::NumericAbort { .. }) => {
                    let HarnessError::NumericAbort { step, what } = &e else { unreachable!() };
                    dir.write_json("abort.json", &AbortRecord { step: *step, epoch, reason: what })?;
                    trainer.checkpoint().write(std::fs::File::create(dir.file("checkpoint_last.json"))?)?;
                    write_progress(&dir, cfg, &steps, &evals)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        timings.train_secs += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (rep, _) = evaluate(&trainer.params, data, Split::Valid, cfg)?;
        timings.eval_secs += t.elapsed().as_secs_f64();
        info!("epoch {epoch}: valid ndcg@5 {:.4}", rep.ndcg[k5]);
        evals.push(EvalRow::new(epoch, Split::Valid, &rep));
        if rep.ndcg[k5] > best.1 {
            best = (epoch, rep.ndcg[k5], trainer.checkpoint());
        }
        trainer.checkpoint().write(std::fs::File::create(dir.file("checkpoint_last.json"))?)?;
    }

    let (best_epoch, _, best_ck) = best;
    best_ck.write(std::fs::File::create(dir.file("checkpoint_best.json"))?)?;
    let t = Instant::now();
    let (test, predictions) = evaluate(&best_ck.params, data, Split::Test, cfg)?;
    timings.eval_secs += t.elapsed().as_secs_f64();
    let test_row = EvalRow::new(best_epoch, Split::Test, &test);
    evals.push(test_row.clone());

    let report = Report {
        ks: cfg.ks.clone(),
        best_epoch,
        best_valid: evals[best_epoch].clone(),
        test: test_row,
        initial_train,
        final_train: loss_summary(&trainer.params, &data.train)?,
        tau: TauTrace::from_steps(&steps),
        train_avt: data.train_avt,
    };
    write_progress(&dir, cfg, &steps, &evals)?;
    dir.write_jsonl("predictions.jsonl", &predictions)?;
    dir.write_json("report.json", &report)?;
    dir.write_json("timings.json", &timings)?;

    Ok(RunRecord {
        config: cfg.clone(),
        steps,
        evals,
        report,
        predictions,
        timings,
        final_params: trainer.params,
        best_params: best_ck.params,
    })
}
