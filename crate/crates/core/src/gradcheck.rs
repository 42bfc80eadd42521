//! Central-difference check of the full training loss on random small models.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datastore::Record;
use crate::model::{Mode, ModelSpec, OmtlModel, Variant};
use crate::objective::batch_loss;
use crate::ontology::{ConceptNode, Edge, OntologyGraph};
use crate::tensor::{named_rng, Tape};
use crate::Result;

pub const STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub nodes: usize,
    pub scalars_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Random DAG over `2..=max_nodes` nodes; at least one core node carrying
/// outcome `y`. Edges only run from lower to higher index.
pub fn random_dag(rng: &mut ChaCha8Rng, max_nodes: usize) -> Result<OntologyGraph> {
    let n = rng.random_range(2..=max_nodes.max(2));
    let mut nodes: Vec<ConceptNode> = (0..n)
        .map(|i| {
            let core = rng.random_bool(0.6);
            ConceptNode {
                id: format!("c{i}"),
                concept_code: format!("C{i:03}"),
                is_core: core,
                outcomes: if core { vec!["y".into()] } else { vec![] },
            }
        })
        .collect();
    if !nodes.iter().any(|c| c.is_core) {
        let last = nodes.last_mut().expect("n >= 2");
        last.is_core = true;
        last.outcomes = vec!["y".into()];
    }
    let mut edges = Vec::new();
    for j in 1..n {
        for i in 0..j {
            if rng.random_bool(0.45) {
                edges.push(Edge { parent: format!("c{i}"), child: format!("c{j}") });
            }
        }
    }
    OntologyGraph::new(nodes, edges)
}

/// Random ancestor-closed records; roughly two thirds carry a label.
pub fn random_records(rng: &mut ChaCha8Rng, graph: &OntologyGraph, n: usize, d: usize) -> Result<Vec<Record>> {
    (0..n)
        .map(|i| {
            let picks: Vec<&str> = graph
                .nodes()
                .iter()
                .filter(|_| rng.random_bool(0.4))
                .map(|c| c.id.as_str())
                .collect();
            let picks = if picks.is_empty() { vec![graph.node(0).id.as_str()] } else { picks };
            let concepts = graph.ancestor_closure(&picks)?;
            let labels = if rng.random_bool(0.67) {
                BTreeMap::from([("y".to_string(), rng.random_range(0..=1u8))])
            } else {
                BTreeMap::new()
            };
            Ok(Record {
                id: format!("r{i}"),
                features: (0..d).map(|_| StandardNormal.sample(rng)).collect(),
                concepts,
                labels,
            })
        })
        .collect()
}

fn loss_at(model: &OmtlModel, graph: &OntologyGraph, recs: &[&Record], lambda: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let fwd = model.forward_batch(&mut tape, graph, recs, Mode::Train, None)?;
    let (loss, _) = batch_loss(&mut tape, &fwd, graph, lambda, None)?;
    Ok(tape.value(loss).values()[0])
}

/// Compares analytic and central-difference gradients of `L1 + λ·L2` for
/// every scalar of a random OMTL instance (d=7, d_e=3, E=2, ≤6 nodes).
/// Dropout is off so the loss is a deterministic function of the weights.
pub fn check_random_instance(seed: u64) -> Result<GradCheckReport> {
    let mut rng = named_rng(seed, "gradcheck");
    let graph = random_dag(&mut rng, 6)?;
    let mut spec = ModelSpec::new(Variant::Omtl, 7);
    spec.num_experts = 2;
    spec.repr_dim = 3;
    let mut model = OmtlModel::build(spec, &graph, seed)?;
    let records = random_records(&mut rng, &graph, 6, 7)?;
    let recs: Vec<&Record> = records.iter().collect();
    let lambda = 0.5;

    let mut tape = Tape::new();
    let fwd = model.forward_batch(&mut tape, &graph, &recs, Mode::Train, None)?;
    let (loss, _) = batch_loss(&mut tape, &fwd, &graph, lambda, None)?;
    let grads = tape.backward(loss, &model.store)?;

    let mut report = GradCheckReport {
        seed,
        nodes: graph.len(),
        scalars_checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for k in 0..model.store.get(id).len() {
            let orig = model.store.get(id).values()[k];
            let at = |m: &mut OmtlModel, v: f64| -> Result<f64> {
                m.store.get_mut(id).values_mut()[k] = v;
                loss_at(m, &graph, &recs, lambda)
            };
            let up = at(&mut model, orig + STEP)?;
            let down = at(&mut model, orig - STEP)?;
            model.store.get_mut(id).values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(grads.get(id).values()[k], numeric);
            report.scalars_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = format!("{}[{k}]", model.store.name(id));
            }
        }
    }
    Ok(report)
}
