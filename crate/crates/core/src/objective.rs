//! Training losses: masked multi-task loss and level-weighted outcome loss.
//!
//! For one record,
//!
//! ```text
//! L1 = Σ_{core p expressed} Σ_{o at p, labeled} w_p · BCE(ŷ_p^o, y^o)
//! L2 = Σ_{p expressed} ‖R_p(ℰ_p(x)) − x‖²
//! total = L1 + λ · L2
//! ```
//!
//! with `w_p = 1` for the masked loss. The shaped loss widens the L1 index
//! set to every expressed node and uses level-based weights.

use std::collections::BTreeMap;

use crate::datastore::Record;
use crate::error::{Error, Result};
use crate::model::{BatchForward, ForwardResult};
use crate::ontology::OntologyGraph;
use crate::tensor::{bce_logit, DenseTensor, NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub lambda: f64,
    pub total: f64,
    /// Weighted BCE per `(node, outcome)`.
    pub outcome_terms: BTreeMap<(String, String), f64>,
    /// Squared reconstruction error per node.
    pub recon_terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    fn finish(mut self) -> Self {
        self.l1 = self.outcome_terms.values().sum();
        self.l2 = self.recon_terms.values().sum();
        self.total = self.l1 + self.lambda * self.l2;
        self
    }

    /// Adds another breakdown's components into this one.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        for (k, v) in &other.outcome_terms {
            *self.outcome_terms.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.recon_terms {
            *self.recon_terms.entry(k.clone()).or_default() += v;
        }
        self.l1 += other.l1;
        self.l2 += other.l2;
        self.total = self.l1 + self.lambda * self.l2;
    }
}

/// Level-based outcome weights, `((level + 1) / depth)^f`, mean-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardScheme {
    pub outcome: String,
    pub f: f64,
    pub depth: usize,
    pub weights: BTreeMap<String, f64>,
}

impl RewardScheme {
    pub fn new(graph: &OntologyGraph, outcome: impl Into<String>, f: f64) -> Result<Self> {
        if !f.is_finite() || !(-1.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("reward exponent {f} outside [-1, 1]")));
        }
        Ok(Self {
            outcome: outcome.into(),
            f,
            depth: graph.depth(),
            weights: reward_weights(graph, f),
        })
    }

    pub fn weight(&self, node: &str) -> f64 {
        self.weights.get(node).copied().unwrap_or(1.0)
    }
}

/// `((level + 1) / depth)^f` per node, before normalization.
pub fn raw_reward_weights(graph: &OntologyGraph, f: f64) -> BTreeMap<String, f64> {
    let d = graph.depth() as f64;
    (0..graph.len())
        .map(|i| {
            let w = if f == 0.0 {
                1.0
            } else {
                ((graph.level(i) + 1) as f64 / d).powf(f)
            };
            (graph.node(i).id.clone(), w)
        })
        .collect()
}

/// Level weights scaled so their mean over the graph is 1.
pub fn reward_weights(graph: &OntologyGraph, f: f64) -> BTreeMap<String, f64> {
    let raw = raw_reward_weights(graph, f);
    if f == 0.0 {
        return raw;
    }
    let mean = raw.values().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|(k, w)| (k, w / mean)).collect()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be a finite non-negative number, got {lambda}")));
    }
    Ok(())
}

fn reconstruction_terms(fr: &ForwardResult, record: &Record, out: &mut LossBreakdown) -> Result<()> {
    for (id, n) in &fr.nodes {
        if n.reconstruction.len() != record.features.len() {
            return Err(Error::Shape {
                op: "reconstruction",
                left: (1, record.features.len()),
                right: (1, n.reconstruction.len()),
            });
        }
        let se = n
            .reconstruction
            .iter()
            .zip(&record.features)
            .map(|(r, x)| (r - x) * (r - x))
            .sum();
        out.recon_terms.insert(id.clone(), se);
    }
    Ok(())
}

fn outcome_term(
    fr: &ForwardResult,
    node: &str,
    outcome: &str,
    y: u8,
    weight: f64,
    out: &mut LossBreakdown,
) -> Result<()> {
    let p = fr
        .predictions
        .get(&(node.to_string(), outcome.to_string()))
        .ok_or_else(|| Error::Model(format!("no prediction for `{outcome}` at node `{node}`")))?;
    out.outcome_terms.insert(
        (node.to_string(), outcome.to_string()),
        weight * bce_logit(p.logit, f64::from(y)),
    );
    Ok(())
}

/// Masked multi-task loss of one record.
pub fn masked_loss(fr: &ForwardResult, record: &Record, graph: &OntologyGraph, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let mut out = LossBreakdown::new(lambda);
    for id in fr.nodes.keys() {
        let node = graph.node(graph.require(id)?);
        if !node.is_core {
            continue;
        }
        for o in &node.outcomes {
            if let Some(&y) = record.labels.get(o) {
                outcome_term(fr, id, o, y, 1.0, &mut out)?;
            }
        }
    }
    reconstruction_terms(fr, record, &mut out)?;
    Ok(out.finish())
}

/// Level-weighted loss of one record: every expressed node contributes its
/// outcome terms, each scaled by the node's reward weight.
pub fn shaped_loss(
    fr: &ForwardResult,
    record: &Record,
    graph: &OntologyGraph,
    lambda: f64,
    scheme: &RewardScheme,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let mut out = LossBreakdown::new(lambda);
    for id in fr.nodes.keys() {
        let node = graph.node(graph.require(id)?);
        let w = scheme.weight(id);
        let mut outcomes: Vec<&String> = node.outcomes.iter().collect();
        if !outcomes.contains(&&scheme.outcome) {
            outcomes.push(&scheme.outcome);
        }
        for o in outcomes {
            let Some(&y) = record.labels.get(o) else { continue };
            if *o == scheme.outcome && !fr.predictions.contains_key(&(id.clone(), o.clone())) {
                return Err(Error::Model(format!(
                    "node `{id}` has no head for shared outcome `{o}`"
                )));
            }
            outcome_term(fr, id, o, y, w, &mut out)?;
        }
    }
    reconstruction_terms(fr, record, &mut out)?;
    Ok(out.finish())
}

/// Batch loss on the tape: mean over records of `L1 + λ·L2`.
///
/// With `scheme = None` this is the masked loss. With a scheme, outcome
/// terms come from every computed node, weighted by level. The returned
/// breakdown holds sums over the batch (not means).
pub fn batch_loss(
    tape: &mut Tape,
    fwd: &BatchForward,
    graph: &OntologyGraph,
    lambda: f64,
    scheme: Option<&RewardScheme>,
) -> Result<(NodeId, LossBreakdown)> {
    check_lambda(lambda)?;
    let mut out = LossBreakdown::new(lambda);
    let mut l1_nodes = Vec::new();
    let mut l2_nodes = Vec::new();
    for n in &fwd.nodes {
        let cn = graph.node(n.node);
        let se = tape.squared_error(n.reconstruction, &n.target)?;
        out.recon_terms.insert(cn.id.clone(), tape.value(se).values()[0]);
        l2_nodes.push(se);

        let weight = match scheme {
            None if !cn.is_core => continue,
            None => 1.0,
            Some(s) => {
                if !n.head_outcomes.contains(&s.outcome) {
                    return Err(Error::Model(format!(
                        "node `{}` has no head for shared outcome `{}`",
                        cn.id, s.outcome
                    )));
                }
                s.weight(&cn.id)
            }
        };
        for h in &n.heads {
            if scheme.is_none() && !cn.outcomes.contains(&h.outcome) {
                continue;
            }
            let (mut targets, mut weights) = (Vec::with_capacity(h.rows.len()), Vec::with_capacity(h.rows.len()));
            for y in &h.labels {
                match y {
                    Some(y) => {
                        targets.push(f64::from(*y));
                        weights.push(weight);
                    }
                    None => {
                        targets.push(0.0);
                        weights.push(0.0);
                    }
                }
            }
            if h.labels.iter().all(Option::is_none) {
                continue;
            }
            let bce = tape.bce_with_logits(h.logits, &targets, &weights)?;
            out.outcome_terms
                .insert((cn.id.clone(), h.outcome.clone()), tape.value(bce).values()[0]);
            l1_nodes.push(bce);
        }
    }
    let out = out.finish();
    let inv_n = 1.0 / fwd.batch_size.max(1) as f64;
    let total = match (l1_nodes.is_empty(), l2_nodes.is_empty()) {
        (true, true) => tape.constant(DenseTensor::scalar(0.0)),
        (false, true) => {
            let l1 = tape.sum(&l1_nodes)?;
            tape.scale(l1, inv_n)
        }
        (l1_empty, false) => {
            let l2 = tape.sum(&l2_nodes)?;
            let l2 = tape.scale(l2, lambda);
            let t = if l1_empty {
                l2
            } else {
                let l1 = tape.sum(&l1_nodes)?;
                tape.add(l1, l2)?
            };
            tape.scale(t, inv_n)
        }
    };
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::model::{Mode, ModelSpec, NodeForward, OmtlModel, Prediction, Variant};
    use crate::ontology::{ConceptNode, Edge};

    fn chain(core_all: bool) -> OntologyGraph {
        let nodes = ["a", "b", "c"]
            .iter()
            .map(|&id| {
                let core = core_all || id != "a";
                ConceptNode {
                    id: id.into(),
                    concept_code: id.into(),
                    is_core: core,
                    outcomes: if core { vec!["mortality".into()] } else { vec![] },
                }
            })
            .collect();
        let edges = vec![
            Edge { parent: "a".into(), child: "b".into() },
            Edge { parent: "b".into(), child: "c".into() },
        ];
        OntologyGraph::new(nodes, edges).unwrap()
    }

    fn record(concepts: &[&str], label: Option<u8>) -> Record {
        Record {
            id: "r".into(),
            features: vec![0.5, -0.25],
            concepts: concepts.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
            labels: label.map(|y| BTreeMap::from([("mortality".to_string(), y)])).unwrap_or_default(),
        }
    }

    fn hand_result(nodes: &[&str], logit: f64, recon: Vec<f64>) -> ForwardResult {
        let mut fr = ForwardResult::default();
        for &n in nodes {
            fr.nodes.insert(
                n.into(),
                NodeForward {
                    representation: vec![0.0],
                    reconstruction: recon.clone(),
                },
            );
            fr.predictions
                .insert((n.into(), "mortality".into()), Prediction::from_logit(logit));
            fr.order.push(n.into());
        }
        fr
    }

    #[test]
    fn bce_at_half_on_two_core_nodes() {
        let g = chain(false);
        let r = record(&["a", "b", "c"], Some(1));
        let fr = hand_result(&["a", "b", "c"], 0.0, vec![0.5, -0.25]);
        let l = masked_loss(&fr, &r, &g, 0.1).unwrap();
        assert!((l.l1 - 1.3862943611198906).abs() < 1e-12);
        assert_eq!(l.outcome_terms.len(), 2);
        // perfect reconstruction everywhere
        assert_eq!(l.l2, 0.0);
        assert_eq!(l.recon_terms.len(), 3);
        assert_eq!(l.total, l.l1 + 0.1 * l.l2);
    }

    #[test]
    fn unlabeled_record_has_no_outcome_loss() {
        let g = chain(false);
        let r = record(&["a", "b", "c"], None);
        let fr = hand_result(&["a", "b", "c"], 0.3, vec![1.0, 1.0]);
        let l = masked_loss(&fr, &r, &g, 1.0).unwrap();
        assert_eq!(l.l1, 0.0);
        assert!(l.l2 > 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let g = chain(false);
        let r = record(&["a"], None);
        let fr = hand_result(&["a"], 0.0, vec![0.0, 0.0]);
        assert!(masked_loss(&fr, &r, &g, -1e-3).is_err());
    }

    #[test]
    fn lambda_scales_only_reconstruction() {
        let g = chain(false);
        let r = record(&["a", "b"], Some(0));
        let fr = hand_result(&["a", "b"], 0.7, vec![0.1, 0.2]);
        let l1 = masked_loss(&fr, &r, &g, 0.5).unwrap();
        let l3 = masked_loss(&fr, &r, &g, 1.5).unwrap();
        assert_eq!(l1.l1, l3.l1);
        assert_eq!(l1.l2, l3.l2);
        assert!(((l3.total - l3.l1) - 3.0 * (l1.total - l1.l1)).abs() < 1e-12);
    }

    #[test]
    fn reward_weight_shapes() {
        let g = chain(true);
        assert!(reward_weights(&g, 0.0).values().all(|&w| w == 1.0));
        let up = raw_reward_weights(&g, 1.0);
        let expect = [1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (id, e) in ["a", "b", "c"].iter().zip(expect) {
            assert!((up[*id] - e).abs() < 1e-15);
        }
        let down = raw_reward_weights(&g, -1.0);
        for (id, e) in ["a", "b", "c"].iter().zip([3.0, 1.5, 1.0]) {
            assert!((down[*id] - e).abs() < 1e-15);
        }
        let norm = reward_weights(&g, 1.0);
        assert!((norm.values().sum::<f64>() / 3.0 - 1.0).abs() < 1e-15);
        assert!(RewardScheme::new(&g, "mortality", 1.5).is_err());
    }

    #[test]
    fn shaped_equals_masked_at_f_zero() {
        let g = chain(true);
        let r = record(&["a", "b", "c"], Some(1));
        let fr = hand_result(&["a", "b", "c"], -0.4, vec![0.3, 0.3]);
        let s = RewardScheme::new(&g, "mortality", 0.0).unwrap();
        assert_eq!(
            shaped_loss(&fr, &r, &g, 0.2, &s).unwrap(),
            masked_loss(&fr, &r, &g, 0.2).unwrap()
        );
    }

    #[test]
    fn shaped_root_only_and_hand_weighted() {
        let g = chain(false);
        let s = RewardScheme::new(&g, "mortality", 1.0).unwrap();
        let r = record(&["a"], Some(1));
        let fr = hand_result(&["a"], 0.0, vec![0.5, -0.25]);
        let l = shaped_loss(&fr, &r, &g, 0.0, &s).unwrap();
        assert_eq!(l.outcome_terms.len(), 1);
        assert!((l.l1 - s.weight("a") * std::f64::consts::LN_2).abs() < 1e-15);

        // two nodes, f = 1: raw weights 1/3, 2/3 normalized by mean 2/3
        let r = record(&["a", "b"], Some(0));
        let mut fr = hand_result(&["a", "b"], 0.0, vec![0.5, -0.25]);
        fr.predictions
            .insert(("a".into(), "mortality".into()), Prediction::from_logit(1.0));
        fr.predictions
            .insert(("b".into(), "mortality".into()), Prediction::from_logit(-2.0));
        let l = shaped_loss(&fr, &r, &g, 0.0, &s).unwrap();
        let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let sig = |z: f64| 1.0 / (1.0 + (-z as f64).exp());
        let expected = 0.5 * bce(sig(1.0), 0.0) + 1.0 * bce(sig(-2.0), 0.0);
        assert!((l.l1 - expected).abs() < 1e-12, "{} vs {expected}", l.l1);
    }

    #[test]
    fn shaped_requires_heads_everywhere() {
        let g = chain(false);
        let m = OmtlModel::build(ModelSpec::new(Variant::Mmoe, 2), &g, 0).unwrap();
        let s = RewardScheme::new(&g, "mortality", 1.0).unwrap();
        let r = record(&["a", "b"], Some(1));
        let fr = m.forward(&g, &r, Mode::Train, None).unwrap();
        assert!(shaped_loss(&fr, &r, &g, 0.0, &s).is_err());
        let mut tape = Tape::new();
        let fwd = m.forward_batch(&mut tape, &g, &[&r], Mode::Train, None).unwrap();
        assert!(batch_loss(&mut tape, &fwd, &g, 0.0, Some(&s)).is_err());

        let mut spec = ModelSpec::new(Variant::Mmoe, 2);
        spec.shared_outcome = Some("mortality".into());
        let m = OmtlModel::build(spec, &g, 0).unwrap();
        let fr = m.forward(&g, &r, Mode::Train, None).unwrap();
        assert_eq!(shaped_loss(&fr, &r, &g, 0.0, &s).unwrap().outcome_terms.len(), 2);
    }

    #[test]
    fn batch_loss_matches_per_record_sum() {
        let g = chain(false);
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, 2), &g, 3).unwrap();
        let recs = [
            record(&["a", "b", "c"], Some(1)),
            record(&["a"], None),
            record(&["a", "b"], Some(0)),
        ];
        let refs: Vec<&Record> = recs.iter().collect();
        let mut tape = Tape::new();
        let fwd = m.forward_batch(&mut tape, &g, &refs, Mode::Train, None).unwrap();
        let (total, bd) = batch_loss(&mut tape, &fwd, &g, 0.3, None).unwrap();
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for r in &recs {
            let fr = m.forward(&g, r, Mode::Train, None).unwrap();
            let l = masked_loss(&fr, r, &g, 0.3).unwrap();
            l1 += l.l1;
            l2 += l.l2;
        }
        assert!((bd.l1 - l1).abs() < 1e-12);
        assert!((bd.l2 - l2).abs() < 1e-12);
        assert!((tape.value(total).values()[0] - (l1 + 0.3 * l2) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_batch_leaves_heads_untouched() {
        let g = chain(false);
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, 2), &g, 3).unwrap();
        let r = record(&["a", "b", "c"], None);
        let mut tape = Tape::new();
        let fwd = m.forward_batch(&mut tape, &g, &[&r], Mode::Train, None).unwrap();
        let (total, bd) = batch_loss(&mut tape, &fwd, &g, 1e-4, None).unwrap();
        assert_eq!(bd.l1, 0.0);
        let grads = tape.backward(total, &m.store).unwrap();
        for n in &m.nodes {
            for h in n.heads.values() {
                assert!(grads.is_zero(h.weight) && grads.is_zero(h.bias));
            }
        }
    }
}
