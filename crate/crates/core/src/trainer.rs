//! Mini-batch training, two-phase OMTL fine-tuning, and cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastore::{assign_folds, Dataset, FoldPlan, Record};
use crate::metrics::{compare_models, Comparison, EvalReport, ScoredSet};
use crate::model::{Mode, ModelSpec, OmtlModel, Variant};
use crate::objective::{batch_loss, LossBreakdown, RewardScheme};
use crate::ontology::OntologyGraph;
use crate::tensor::{named_rng, AdamState, ParamId, ParamStore, Tape};
use crate::{Error, Result};

const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub num_experts: usize,
    pub repr_dim: usize,
    /// Per phase.
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of the training records held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Run the hierarchy phase after phase 1 (OMTL only).
    pub hierarchy_finetune: bool,
    /// Level-reward exponent; `Some` switches to the shaped loss.
    pub reward_f: Option<f64>,
    /// Outcome used by the shaped loss; defaults to the dataset's only outcome.
    pub reward_outcome: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 0.001,
            dropout: 0.5,
            lambda: 1e-4,
            num_experts: 3,
            repr_dim: 5,
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
            variant: Variant::Omtl,
            hierarchy_finetune: true,
            reward_f: None,
            reward_outcome: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return bad(format!("val_fraction must lie in (0, 0.5], got {}", self.val_fraction));
        }
        if let Some(f) = self.reward_f {
            if !(-1.0..=1.0).contains(&f) {
                return bad(format!("reward_f {f} outside [-1, 1]"));
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Model layout implied by this config.
    pub fn model_spec(&self, variant: Variant, data: &Dataset) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(variant, data.feature_dim);
        spec.num_experts = if variant == Variant::Sb { 1 } else { self.num_experts };
        spec.repr_dim = self.repr_dim;
        spec.dropout = self.dropout;
        spec.hierarchy_enabled = false;
        spec.shared_outcome = self.shaped_outcome(data)?;
        spec.validate()?;
        Ok(spec)
    }

    fn shaped_outcome(&self, data: &Dataset) -> Result<Option<String>> {
        if self.reward_f.is_none() {
            return Ok(None);
        }
        match &self.reward_outcome {
            Some(o) => Ok(Some(o.clone())),
            None if data.outcomes.len() == 1 => Ok(data.outcomes.iter().next().cloned()),
            None => Err(Error::Config(format!(
                "reward_outcome must be set when the data has {} outcomes",
                data.outcomes.len()
            ))),
        }
    }

    fn scheme(&self, graph: &OntologyGraph, data: &Dataset) -> Result<Option<RewardScheme>> {
        match (self.reward_f, self.shaped_outcome(data)?) {
            (Some(f), Some(o)) => Ok(Some(RewardScheme::new(graph, o, f)?)),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Phase1,
    Phase2,
}

impl Phase {
    fn label(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        }
    }
}

/// Per-record means of one pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossSummary {
    fn from_sum(b: &LossBreakdown, n: usize) -> Self {
        let n = n.max(1) as f64;
        LossSummary {
            l1: b.l1 / n,
            l2: b.l2 / n,
            total: b.total / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub train: LossSummary,
    pub val: LossSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub epochs_run: usize,
    /// `None` when the starting snapshot was never beaten.
    pub best_epoch: Option<usize>,
    pub initial_val: LossSummary,
    pub best_val: LossSummary,
    pub frozen: usize,
}

/// Digests of the frozen parameters around phase 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub before: String,
    pub after: String,
}

impl FreezeCheck {
    pub fn holds(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: Option<Variant>,
    pub epochs: Vec<EpochLog>,
    pub phases: Vec<PhaseSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_check: Option<FreezeCheck>,
    /// Ids of every record that fed a gradient step.
    pub gradient_records: BTreeSet<String>,
    /// Seconds per phase; kept out of serialized logs so they stay reproducible.
    #[serde(skip)]
    pub wall_clock: Vec<(Phase, f64)>,
}

/// Train/validation split of a set of training indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl TrainSplit {
    /// Stratified hold-out of about `val_fraction` of `indices`.
    pub fn new(data: &Dataset, graph: &OntologyGraph, indices: &[usize], cfg: &TrainConfig) -> Result<Self> {
        let k = ((1.0 / cfg.val_fraction).round() as usize).max(2);
        let folds = assign_folds(data, graph, indices, k, cfg.seed, "validation")?;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (&i, f) in indices.iter().zip(folds) {
            if f == 0 { val.push(i) } else { train.push(i) }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Dataset("training split left an empty partition".into()));
        }
        Ok(TrainSplit { train, val })
    }
}

fn digest(store: &ParamStore, ids: &BTreeSet<ParamId>) -> String {
    let mut h = Sha256::new();
    for &id in ids {
        h.update(store.name(id).as_bytes());
        for v in store.get(id).values() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Loss of `model` over `indices` without dropout or gradient recording.
pub fn evaluate_loss(
    model: &OmtlModel,
    graph: &OntologyGraph,
    data: &Dataset,
    indices: &[usize],
    lambda: f64,
    scheme: Option<&RewardScheme>,
) -> Result<LossSummary> {
    let mut sum = LossBreakdown::new(lambda);
    for chunk in indices.chunks(EVAL_BATCH) {
        let recs: Vec<&Record> = chunk.iter().map(|&i| &data.records[i]).collect();
        let mut tape = Tape::no_grad();
        let fwd = model.forward_batch(&mut tape, graph, &recs, Mode::Train, None)?;
        let (_, b) = batch_loss(&mut tape, &fwd, graph, lambda, scheme)?;
        sum.accumulate(&b);
    }
    Ok(LossSummary::from_sum(&sum, indices.len()))
}

struct PhaseRun<'a> {
    phase: Phase,
    graph: &'a OntologyGraph,
    data: &'a Dataset,
    split: &'a TrainSplit,
    cfg: &'a TrainConfig,
    scheme: Option<&'a RewardScheme>,
}

impl PhaseRun<'_> {
    /// Adam over shuffled mini-batches with early stopping on validation
    /// total loss; leaves the best snapshot (possibly the initial one) in
    /// `model`.
    fn run(&self, model: &mut OmtlModel, frozen: &BTreeSet<ParamId>, log: &mut TrainLog) -> Result<()> {
        let started = Instant::now();
        let cfg = self.cfg;
        let tag = self.phase.label();
        let mut adam = AdamState::new(&model.store, cfg.lr);
        let mut shuffle_rng = named_rng(cfg.seed, &format!("shuffle.{tag}"));
        let mut dropout_rng = named_rng(cfg.seed, &format!("dropout.{tag}"));

        let initial = evaluate_loss(model, self.graph, self.data, &self.split.val, cfg.lambda, self.scheme)?;
        let mut best = (initial, None, model.store.clone());
        let mut stale = 0;
        let mut epochs_run = 0;
        let mut order = self.split.train.clone();

        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut shuffle_rng);
            let mut sum = LossBreakdown::new(cfg.lambda);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let recs: Vec<&Record> = chunk.iter().map(|&i| &self.data.records[i]).collect();
                let mut tape = Tape::new();
                let rng: &mut dyn RngCore = &mut dropout_rng;
                let fwd = model.forward_batch(&mut tape, self.graph, &recs, Mode::Train, Some(rng))?;
                let (loss, bd) = batch_loss(&mut tape, &fwd, self.graph, cfg.lambda, self.scheme)?;
                if !tape.value(loss).values()[0].is_finite() {
                    return Err(Error::NonFiniteLoss(format!("{tag} epoch {epoch} batch {b}")));
                }
                let grads = tape.backward(loss, &model.store)?;
                adam.step(&mut model.store, &grads, |id| !frozen.contains(&id))?;
                log.gradient_records.extend(recs.iter().map(|r| r.id.clone()));
                sum.accumulate(&bd);
            }
            epochs_run += 1;
            let val = evaluate_loss(model, self.graph, self.data, &self.split.val, cfg.lambda, self.scheme)?;
            log.epochs.push(EpochLog {
                phase: self.phase,
                epoch,
                train: LossSummary::from_sum(&sum, order.len()),
                val,
            });
            if val.total < best.0.total {
                best = (val, Some(epoch), model.store.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        model.store = best.2;
        log.phases.push(PhaseSummary {
            phase: self.phase,
            epochs_run,
            best_epoch: best.1,
            initial_val: initial,
            best_val: best.0,
            frozen: frozen.len(),
        });
        log.wall_clock.push((self.phase, started.elapsed().as_secs_f64()));
        Ok(())
    }
}

/// Phase 1: hierarchy off, parent gates frozen; learns experts, expert
/// gates, and the per-node blocks.
pub fn train_phase1(
    model: &mut OmtlModel,
    graph: &OntologyGraph,
    data: &Dataset,
    split: &TrainSplit,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if model.spec.variant != Variant::Omtl {
        return Err(Error::Config(format!("phase 1 expects omtl, got {}", model.spec.variant)));
    }
    model.spec.hierarchy_enabled = false;
    let scheme = cfg.scheme(graph, data)?;
    let frozen = model.parent_gate_params();
    PhaseRun { phase: Phase::Phase1, graph, data, split, cfg, scheme: scheme.as_ref() }.run(model, &frozen, log)
}

/// Phase 2: hierarchy on; experts and expert gates frozen, everything else
/// (parent gates, representations, reconstruction and outcome heads) tuned.
pub fn train_phase2(
    model: &mut OmtlModel,
    graph: &OntologyGraph,
    data: &Dataset,
    split: &TrainSplit,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if model.spec.variant != Variant::Omtl {
        return Err(Error::Config(format!("phase 2 expects omtl, got {}", model.spec.variant)));
    }
    model.spec.hierarchy_enabled = true;
    let scheme = cfg.scheme(graph, data)?;
    let frozen = model.expert_and_gate_params();
    let before = digest(&model.store, &frozen);
    PhaseRun { phase: Phase::Phase2, graph, data, split, cfg, scheme: scheme.as_ref() }.run(model, &frozen, log)?;
    log.freeze_check = Some(FreezeCheck {
        before,
        after: digest(&model.store, &frozen),
    });
    Ok(())
}

/// Single-phase training for SB, MOE and MMOE.
pub fn train_baseline(
    model: &mut OmtlModel,
    graph: &OntologyGraph,
    data: &Dataset,
    split: &TrainSplit,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if model.spec.variant == Variant::Omtl {
        return Err(Error::Config("omtl trains in two phases".into()));
    }
    let scheme = cfg.scheme(graph, data)?;
    PhaseRun { phase: Phase::Baseline, graph, data, split, cfg, scheme: scheme.as_ref() }.run(model, &BTreeSet::new(), log)
}

/// Builds `cfg.variant` with `init_seed` and trains it on `indices`.
pub fn train(
    graph: &OntologyGraph,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(OmtlModel, TrainLog)> {
    cfg.validate()?;
    let spec = cfg.model_spec(cfg.variant, data)?;
    let mut model = OmtlModel::build(spec, graph, init_seed)?;
    let split = TrainSplit::new(data, graph, indices, cfg)?;
    let mut log = TrainLog {
        variant: Some(cfg.variant),
        ..Default::default()
    };
    if cfg.variant == Variant::Omtl {
        train_phase1(&mut model, graph, data, &split, cfg, &mut log)?;
        if cfg.hierarchy_finetune {
            train_phase2(&mut model, graph, data, &split, cfg, &mut log)?;
        }
    } else {
        train_baseline(&mut model, graph, data, &split, cfg, &mut log)?;
    }
    Ok((model, log))
}

/// Held-out probabilities for every (core node, outcome) stratum, ordered
/// by record id.
pub fn score(model: &OmtlModel, graph: &OntologyGraph, data: &Dataset, indices: &[usize]) -> Result<Vec<ScoredSet>> {
    let mut strata: BTreeMap<(String, String), Vec<(String, f64, u8)>> = BTreeMap::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        let recs: Vec<&Record> = chunk.iter().map(|&i| &data.records[i]).collect();
        let mut tape = Tape::no_grad();
        let fwd = model.forward_batch(&mut tape, graph, &recs, Mode::Eval, None)?;
        for n in &fwd.nodes {
            let cn = graph.node(n.node);
            for h in &n.heads {
                if !cn.is_core || !cn.outcomes.contains(&h.outcome) {
                    continue;
                }
                let logits = tape.value(h.logits).values();
                let entry = strata.entry((cn.id.clone(), h.outcome.clone())).or_default();
                for (k, &row) in h.rows.iter().enumerate() {
                    let r = recs[row];
                    if let Some(&y) = r.labels.get(&h.outcome) {
                        entry.push((r.id.clone(), crate::tensor::sigmoid(logits[k]), y));
                    }
                }
            }
        }
    }
    Ok(strata
        .into_iter()
        .map(|((node, outcome), mut rows)| {
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            ScoredSet {
                node,
                outcome,
                record_ids: rows.iter().map(|r| r.0.clone()).collect(),
                scores: rows.iter().map(|r| r.1).collect(),
                labels: rows.iter().map(|r| r.2).collect(),
            }
        })
        .collect())
}

fn merge_scores(into: &mut Vec<ScoredSet>, more: Vec<ScoredSet>) {
    for s in more {
        match into.iter_mut().find(|t| t.node == s.node && t.outcome == s.outcome) {
            Some(t) => {
                t.record_ids.extend(s.record_ids);
                t.scores.extend(s.scores);
                t.labels.extend(s.labels);
            }
            None => into.push(s),
        }
    }
}

fn sort_by_record(s: &mut ScoredSet) {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.record_ids[a].cmp(&s.record_ids[b]));
    s.record_ids = idx.iter().map(|&i| s.record_ids[i].clone()).collect();
    s.scores = idx.iter().map(|&i| s.scores[i]).collect();
    s.labels = idx.iter().map(|&i| s.labels[i]).collect();
}

/// Initialization seed shared by every variant trained on `fold`.
pub fn fold_init_seed(seed: u64, fold: usize) -> u64 {
    named_rng(seed, &format!("init.fold{fold}")).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub variant: Variant,
    pub n_train: usize,
    pub n_test: usize,
    pub report: EvalReport,
    pub phases: Vec<PhaseSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_check: Option<FreezeCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub variant: Variant,
    pub node: String,
    pub outcome: String,
    /// Mean over the folds where the metric was defined.
    pub mean_auc: Option<f64>,
    pub mean_aps: Option<f64>,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub folds: Vec<FoldEntry>,
    pub aggregate: Vec<AggregateEntry>,
    /// Metrics on out-of-fold scores pooled across folds, per variant.
    pub pooled: Vec<EvalReport>,
    pub comparisons: Vec<Comparison>,
    pub metadata: BTreeMap<String, String>,
}

impl CvReport {
    pub fn mean_auc(&self, variant: Variant, node: &str) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|a| a.variant == variant && a.node == node)
            .and_then(|a| a.mean_auc)
    }
}

pub struct CvOutcome {
    pub report: CvReport,
    /// Pooled out-of-fold scores per variant.
    pub scores: BTreeMap<Variant, Vec<ScoredSet>>,
    pub logs: Vec<(usize, Variant, TrainLog)>,
}

struct FoldRun {
    fold: usize,
    variant: Variant,
    n_train: usize,
    test: Vec<usize>,
    scores: Vec<ScoredSet>,
    log: TrainLog,
}

fn run_fold(
    graph: &OntologyGraph,
    data: &Dataset,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    fold: usize,
    variant: Variant,
) -> Result<FoldRun> {
    let (train_idx, test) = plan.split(data, fold)?;
    let cfg = TrainConfig { variant, ..cfg.clone() };
    let (model, log) = train(graph, data, &train_idx, &cfg, fold_init_seed(cfg.seed, fold))?;
    if let Some(leak) = test.iter().find(|&&i| log.gradient_records.contains(&data.records[i].id)) {
        return Err(Error::Dataset(format!(
            "test record `{}` contributed a gradient in fold {fold}",
            data.records[*leak].id
        )));
    }
    let scores = score(&model, graph, data, &test)?;
    Ok(FoldRun { fold, variant, n_train: train_idx.len(), test, scores, log })
}

/// k-fold cross-validation of `variants` on one shared fold plan.
///
/// Every variant sees identical folds and, per fold, the same init seed.
/// `jobs > 1` trains (fold, variant) pairs on worker threads; results are
/// assembled in a fixed order so the report does not depend on `jobs`.
pub fn run_cv(
    graph: &OntologyGraph,
    data: &Dataset,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    variants: &[Variant],
    jobs: usize,
) -> Result<CvOutcome> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants to evaluate".into()));
    }
    if plan.assignment.len() != data.len() || data.records.iter().any(|r| !plan.assignment.contains_key(&r.id)) {
        return Err(Error::Dataset("fold plan does not match the dataset".into()));
    }
    let tasks: Vec<(usize, Variant)> = (0..plan.k)
        .flat_map(|f| variants.iter().map(move |&v| (f, v)))
        .collect();

    let mut results: Vec<Option<Result<FoldRun>>> = (0..tasks.len()).map(|_| None).collect();
    let jobs = jobs.max(1).min(tasks.len());
    if jobs == 1 {
        for (slot, &(f, v)) in results.iter_mut().zip(&tasks) {
            *slot = Some(run_fold(graph, data, plan, cfg, f, v));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let t = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(&(f, v)) = tasks.get(t) else { break };
                    let r = run_fold(graph, data, plan, cfg, f, v);
                    done.lock().expect("result lock")[t] = Some(r);
                });
            }
        });
    }

    let mut folds = Vec::new();
    let mut logs = Vec::new();
    let mut pooled: BTreeMap<Variant, Vec<ScoredSet>> = BTreeMap::new();
    for r in results {
        let run = r.expect("every task ran")?;
        let report = EvalReport::from_scored(run.variant.name(), &run.scores)?;
        folds.push(FoldEntry {
            fold: run.fold,
            variant: run.variant,
            n_train: run.n_train,
            n_test: run.test.len(),
            report,
            phases: run.log.phases.clone(),
            freeze_check: run.log.freeze_check.clone(),
        });
        merge_scores(pooled.entry(run.variant).or_default(), run.scores);
        logs.push((run.fold, run.variant, run.log));
    }
    for sets in pooled.values_mut() {
        sets.iter_mut().for_each(sort_by_record);
    }

    let mut aggregate = Vec::new();
    for &v in variants {
        let mut acc: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for f in folds.iter().filter(|f| f.variant == v) {
            for s in &f.report.strata {
                let e = acc.entry((s.node.clone(), s.outcome.clone())).or_default();
                e.0.extend(s.auc);
                e.1.extend(s.aps);
            }
        }
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        for ((node, outcome), (aucs, apss)) in acc {
            aggregate.push(AggregateEntry {
                variant: v,
                node,
                outcome,
                mean_auc: mean(&aucs),
                mean_aps: mean(&apss),
                folds: aucs.len(),
            });
        }
    }

    let mut pooled_reports = Vec::new();
    for &v in variants {
        pooled_reports.push(EvalReport::from_scored(v.name(), &pooled[&v])?);
    }
    let mut comparisons = Vec::new();
    for (i, &a) in variants.iter().enumerate() {
        for &b in &variants[i + 1..] {
            comparisons.extend(compare_models(a.name(), &pooled[&a], b.name(), &pooled[&b])?);
        }
    }

    let metadata = BTreeMap::from([
        ("delong".to_string(), "pooled out-of-fold scores".to_string()),
        ("aggregate".to_string(), "mean of per-fold metrics".to_string()),
        ("leakage_audit".to_string(), "passed".to_string()),
        ("config_hash".to_string(), cfg.content_hash()),
    ]);
    Ok(CvOutcome {
        report: CvReport {
            k: plan.k,
            seed: plan.seed,
            variants: variants.to_vec(),
            folds,
            aggregate,
            pooled: pooled_reports,
            comparisons,
            metadata,
        },
        scores: pooled,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic, make_folds, SynthConfig};

    fn tiny(seed: u64) -> (OntologyGraph, Dataset) {
        let cfg = SynthConfig {
            records_per_node: 60,
            prevalence: 0.3,
            feature_dim: 6,
            seed,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg).unwrap()
    }

    fn quick(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            max_epochs: 5,
            batch_size: 32,
            lr: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.lr, c.dropout, c.lambda, c.num_experts), (64, 0.001, 0.5, 1e-4, 3));
        let parsed: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(TrainConfig { lambda: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { reward_f: Some(2.0), ..c }.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (g, d) = tiny(1);
        let all: Vec<usize> = (0..d.len()).collect();
        let cfg = TrainConfig { max_epochs: 0, ..quick(Variant::Omtl) };
        let (m, log) = train(&g, &d, &all, &cfg, 9).unwrap();
        let init = OmtlModel::build(cfg.model_spec(Variant::Omtl, &d).unwrap(), &g, 9).unwrap();
        assert_eq!(m.store, init.store);
        assert!(log.epochs.is_empty() && log.gradient_records.is_empty());
    }

    #[test]
    fn training_reduces_loss() {
        for seed in 0..3 {
            let (g, d) = tiny(seed);
            let all: Vec<usize> = (0..d.len()).collect();
            let cfg = TrainConfig { seed, patience: 100, ..quick(Variant::Mmoe) };
            let (_, log) = train(&g, &d, &all, &cfg, seed).unwrap();
            let first = log.phases[0].initial_val.total;
            let last = log.epochs.last().unwrap().val.total;
            assert!(last < first, "seed {seed}: {first} -> {last}");
        }
    }

    #[test]
    fn phase_two_freezes_experts_and_gates() {
        let (g, d) = tiny(2);
        let all: Vec<usize> = (0..d.len()).collect();
        let cfg = quick(Variant::Omtl);
        let split = TrainSplit::new(&d, &g, &all, &cfg).unwrap();
        let mut m = OmtlModel::build(cfg.model_spec(Variant::Omtl, &d).unwrap(), &g, 0).unwrap();
        let mut log = TrainLog::default();
        train_phase1(&mut m, &g, &d, &split, &cfg, &mut log).unwrap();
        let before = m.store.clone();
        train_phase2(&mut m, &g, &d, &split, &cfg, &mut log).unwrap();
        for id in m.expert_and_gate_params() {
            assert_eq!(m.store.get(id), before.get(id), "{}", m.store.name(id));
        }
        assert!(log.freeze_check.unwrap().holds());
        // single-parent gates are constant softmaxes; the representations move
        assert!(m.nodes.iter().any(|n| m.store.get(n.repr.weight) != before.get(n.repr.weight)));
    }

    #[test]
    fn lambda_zero_leaves_reconstruction_untouched() {
        let (g, d) = tiny(3);
        let all: Vec<usize> = (0..d.len()).collect();
        let cfg = TrainConfig { lambda: 0.0, ..quick(Variant::Mmoe) };
        let init = OmtlModel::build(cfg.model_spec(Variant::Mmoe, &d).unwrap(), &g, 4).unwrap();
        let (m, _) = train(&g, &d, &all, &cfg, 4).unwrap();
        for n in &m.nodes {
            for id in [n.recon.weight, n.recon.bias] {
                assert_eq!(m.store.get(id), init.store.get(id));
            }
        }
    }

    #[test]
    fn cv_partitions_and_is_deterministic() {
        let (g, d) = tiny(4);
        let plan = make_folds(&d, &g, 2, 4).unwrap();
        let cfg = TrainConfig { max_epochs: 2, ..quick(Variant::Omtl) };
        let a = run_cv(&g, &d, &plan, &cfg, &[Variant::Omtl, Variant::Sb], 1).unwrap();
        let b = run_cv(&g, &d, &plan, &cfg, &[Variant::Omtl, Variant::Sb], 2).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.report.folds.len(), 4);
        let labeled = d.records.iter().filter(|r| r.is_labeled()).count();
        let tested: usize = a.report.folds.iter().filter(|f| f.variant == Variant::Sb).map(|f| f.n_test).sum();
        assert_eq!(tested, d.len());
        assert!(labeled <= tested);
    }

    #[test]
    fn shaped_training_runs() {
        let (g, d) = tiny(5);
        let all: Vec<usize> = (0..d.len()).collect();
        let cfg = TrainConfig { reward_f: Some(1.0), max_epochs: 2, ..quick(Variant::Omtl) };
        let (m, _) = train(&g, &d, &all, &cfg, 0).unwrap();
        assert!(m.nodes.iter().all(|n| n.heads.contains_key("mortality")));
    }
}
