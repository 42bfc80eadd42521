//! Records, datasets, stratified folds, and a synthetic hierarchical cohort
//! generator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ontology::{ConceptNode, Edge, OntologyGraph};
use crate::tensor::{named_rng, sigmoid};

/// Default input width, matching the 41-feature layer sizes.
pub const DEFAULT_FEATURE_DIM: usize = 41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub features: Vec<f64>,
    pub concepts: BTreeSet<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, u8>,
}

impl Record {
    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn expresses(&self, id: &str) -> bool {
        self.concepts.contains(id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub feature_dim: usize,
    pub outcomes: BTreeSet<String>,
}

impl Dataset {
    /// Validates records against `graph` and closes concept sets upward.
    pub fn new(records: Vec<Record>, graph: &OntologyGraph) -> Result<Self> {
        let mut out = Vec::with_capacity(records.len());
        let mut dim = None;
        for (i, r) in records.into_iter().enumerate() {
            out.push(validate_record(r, graph, &mut dim).map_err(|msg| Error::Record {
                path: "<memory>".into(),
                line: i + 1,
                msg,
            })?);
        }
        Self::finish(out, dim)
    }

    fn finish(records: Vec<Record>, dim: Option<usize>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate record id `{}`", r.id)));
            }
        }
        let outcomes = records
            .iter()
            .flat_map(|r| r.labels.keys().cloned())
            .collect();
        Ok(Self {
            records,
            feature_dim: dim.unwrap_or(DEFAULT_FEATURE_DIM),
            outcomes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, &Record)> {
        self.records.iter().enumerate().filter(|(_, r)| r.is_labeled())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

fn validate_record(
    mut r: Record,
    graph: &OntologyGraph,
    dim: &mut Option<usize>,
) -> std::result::Result<Record, String> {
    match *dim {
        None => *dim = Some(r.features.len()),
        Some(d) if d != r.features.len() => {
            return Err(format!(
                "record `{}` has {} features, expected {d}",
                r.id,
                r.features.len()
            ))
        }
        _ => {}
    }
    if r.features.is_empty() {
        return Err(format!("record `{}` has no features", r.id));
    }
    if r.features.iter().any(|v| !v.is_finite()) {
        return Err(format!("record `{}` has non-finite features", r.id));
    }
    if r.concepts.is_empty() {
        return Err(format!("record `{}` expresses no concepts", r.id));
    }
    let ids: Vec<&String> = r.concepts.iter().collect();
    r.concepts = graph
        .ancestor_closure(&ids)
        .map_err(|e| format!("record `{}`: {e}", r.id))?;
    let known = graph.outcome_names();
    for (o, &y) in &r.labels {
        if !known.contains(o) {
            return Err(format!("record `{}`: unknown outcome `{o}`", r.id));
        }
        if y > 1 {
            return Err(format!("record `{}`: label {o}={y} is not binary", r.id));
        }
    }
    Ok(r)
}

/// Loads a JSONL records file, validating each line against `graph`.
pub fn load_dataset(path: impl AsRef<Path>, graph: &OntologyGraph) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string(), graph)
}

pub fn parse_dataset(text: &str, source: &str, graph: &OntologyGraph) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let mut labels = BTreeMap::new();
        for (o, v) in raw.labels {
            let y = v
                .as_u64()
                .filter(|&y| y <= 1)
                .ok_or_else(|| err(format!("label {o}={v} is not 0 or 1")))?;
            labels.insert(o, y as u8);
        }
        let rec = Record {
            id: raw.id,
            features: raw.features,
            concepts: raw.concepts.into_iter().collect(),
            labels,
        };
        records.push(validate_record(rec, graph, &mut dim).map_err(err)?);
    }
    Dataset::finish(records, dim)
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    features: Vec<f64>,
    concepts: Vec<String>,
    #[serde(default)]
    labels: BTreeMap<String, serde_json::Value>,
}

/// Assignment of records to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Dataset indices of `(train, test)` for fold `fold`.
    pub fn split(&self, data: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, r) in data.records.iter().enumerate() {
            let f = *self
                .assignment
                .get(&r.id)
                .ok_or_else(|| Error::Dataset(format!("record `{}` missing from fold plan", r.id)))?;
            if f >= self.k {
                return Err(Error::Dataset(format!("fold {f} out of range for k={}", self.k)));
            }
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Stratified k-fold plan over the whole dataset.
pub fn make_folds(data: &Dataset, graph: &OntologyGraph, k: usize, seed: u64) -> Result<FoldPlan> {
    let all: Vec<usize> = (0..data.len()).collect();
    let folds = assign_folds(data, graph, &all, k, seed, "folds")?;
    Ok(FoldPlan {
        k,
        seed,
        assignment: all
            .iter()
            .zip(folds)
            .map(|(&i, f)| (data.records[i].id.clone(), f))
            .collect(),
    })
}

/// Stratified fold index for each entry of `subset`.
///
/// Labeled records are grouped by their label signature. Within a group they
/// are ordered by the preorder positions of their (ancestor-closed) concept
/// sets, so every `(node, outcome, label)` stratum forms a contiguous run on a
/// tree, and dealt round-robin with one pointer shared across groups. Each
/// stratum then lands within one record of `size / k` per fold. Unlabeled
/// records get a uniformly random fold.
pub fn assign_folds(
    data: &Dataset,
    graph: &OntologyGraph,
    subset: &[usize],
    k: usize,
    seed: u64,
    stream: &str,
) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let labeled: Vec<usize> = subset
        .iter()
        .copied()
        .filter(|&i| data.records[i].is_labeled())
        .collect();
    if labeled.len() < k {
        return Err(Error::Dataset(format!(
            "{} labeled records cannot fill {k} folds",
            labeled.len()
        )));
    }
    let preorder = preorder_positions(graph);
    let mut rng = named_rng(seed, stream);

    let mut order = labeled.clone();
    order.shuffle(&mut rng);
    let key = |i: usize| {
        let r = &data.records[i];
        let sig: Vec<(&String, u8)> = r.labels.iter().map(|(o, &y)| (o, y)).collect();
        let mut pos: Vec<usize> = r
            .concepts
            .iter()
            .filter_map(|c| graph.index_of(c).map(|n| preorder[n]))
            .collect();
        pos.sort_unstable();
        (sig, pos)
    };
    order.sort_by_cached_key(|&i| key(i));

    let mut fold_of = BTreeMap::new();
    let start = rng.random_range(0..k);
    for (n, &i) in order.iter().enumerate() {
        fold_of.insert(i, (start + n) % k);
    }
    for &i in subset {
        if !data.records[i].is_labeled() {
            fold_of.insert(i, rng.random_range(0..k));
        }
    }
    Ok(subset.iter().map(|i| fold_of[i]).collect())
}

fn preorder_positions(graph: &OntologyGraph) -> Vec<usize> {
    let n = graph.len();
    let mut pos = vec![usize::MAX; n];
    let mut next = 0;
    let mut roots: Vec<usize> = (0..n).filter(|&i| graph.parents(i).is_empty()).collect();
    roots.sort_by(|&a, &b| graph.node(a).id.cmp(&graph.node(b).id));
    let mut stack: Vec<usize> = roots.into_iter().rev().collect();
    while let Some(u) = stack.pop() {
        if pos[u] != usize::MAX {
            continue;
        }
        pos[u] = next;
        next += 1;
        for &c in graph.children(u).iter().rev() {
            if pos[c] == usize::MAX {
                stack.push(c);
            }
        }
    }
    pos
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of levels in the generated tree.
    pub depth: usize,
    pub branching: usize,
    pub records_per_node: usize,
    /// Per-node record counts that replace `records_per_node`.
    pub records_override: BTreeMap<String, usize>,
    pub prevalence: f64,
    /// Correlation between a child's label weights and its parent's.
    pub rho: f64,
    pub noise_scale: f64,
    pub prototype_scale: f64,
    /// Norm scale of the label weight vectors.
    pub signal_scale: f64,
    pub feature_dim: usize,
    pub outcome: String,
    /// Nodes at or below this level are core and carry the outcome.
    pub core_min_level: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 2,
            records_per_node: 500,
            records_override: BTreeMap::new(),
            prevalence: 0.15,
            rho: 0.9,
            noise_scale: 1.0,
            prototype_scale: 0.5,
            signal_scale: 2.0,
            feature_dim: DEFAULT_FEATURE_DIM,
            outcome: "mortality".into(),
            core_min_level: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Default cohort with one starved leaf: `n0.1.1` gets 200 records.
    pub fn benchmark(seed: u64) -> Self {
        let mut c = Self {
            seed,
            ..Self::default()
        };
        c.records_override.insert(Self::low_data_leaf(&c), 200);
        c
    }

    /// Id of the last leaf, used as the low-data node by [`SynthConfig::benchmark`].
    pub fn low_data_leaf(&self) -> String {
        let mut id = "n0".to_string();
        for _ in 1..self.depth {
            id.push_str(&format!(".{}", self.branching.saturating_sub(1)));
        }
        id
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.branching == 0 || self.feature_dim == 0 {
            return Err(Error::Config("depth, branching and feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.noise_scale < 0.0 || self.prototype_scale < 0.0 || self.signal_scale < 0.0 {
            return Err(Error::Config("scales must be non-negative".into()));
        }
        if self.outcome.is_empty() {
            return Err(Error::Config("outcome name is empty".into()));
        }
        Ok(())
    }
}

/// Builds a layered tree and a cohort whose label weights are correlated
/// along parent → child edges.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(OntologyGraph, Dataset)> {
    let (g, d, _) = generate_synthetic_with_truth(config)?;
    Ok((g, d))
}

/// Like [`generate_synthetic`], also returning each node's label weights.
pub fn generate_synthetic_with_truth(
    config: &SynthConfig,
) -> Result<(OntologyGraph, Dataset, BTreeMap<String, Vec<f64>>)> {
    config.validate()?;
    let d = config.feature_dim;

    // Tree in breadth-first order: (id, parent index, level).
    let mut tree: Vec<(String, Option<usize>, usize)> = vec![("n0".into(), None, 0)];
    let mut frontier = vec![0usize];
    for level in 1..config.depth {
        let mut next = Vec::new();
        for &p in &frontier {
            for b in 0..config.branching {
                let id = format!("{}.{b}", tree[p].0);
                tree.push((id, Some(p), level));
                next.push(tree.len() - 1);
            }
        }
        frontier = next;
    }
    for id in config.records_override.keys() {
        if !tree.iter().any(|(t, _, _)| t == id) {
            return Err(Error::Config(format!("records_override names unknown node `{id}`")));
        }
    }

    let nodes: Vec<ConceptNode> = tree
        .iter()
        .enumerate()
        .map(|(i, (id, _, level))| {
            let core = *level >= config.core_min_level;
            ConceptNode {
                id: id.clone(),
                concept_code: format!("SYN{:05}", i + 1),
                is_core: core,
                outcomes: if core { vec![config.outcome.clone()] } else { vec![] },
            }
        })
        .collect();
    let edges: Vec<Edge> = tree
        .iter()
        .filter_map(|(id, p, _)| {
            p.map(|p| Edge {
                parent: tree[p].0.clone(),
                child: id.clone(),
            })
        })
        .collect();
    let graph = OntologyGraph::new(nodes, edges)?;

    let mut rng = named_rng(config.seed, "synth");
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };

    let shrink = (1.0 - config.rho * config.rho).max(0.0).sqrt();
    let w_scale = config.signal_scale / (d as f64).sqrt();
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(tree.len());
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(tree.len());
    for (_, parent, _) in &tree {
        let eps = gauss(&mut rng, d);
        let delta = gauss(&mut rng, d);
        match parent {
            None => {
                weights.push(eps.iter().map(|e| e * w_scale).collect());
                protos.push(delta.iter().map(|e| e * config.prototype_scale).collect());
            }
            Some(p) => {
                let w = weights[*p]
                    .iter()
                    .zip(&eps)
                    .map(|(wp, e)| config.rho * wp + shrink * e * w_scale)
                    .collect();
                let mu = protos[*p]
                    .iter()
                    .zip(&delta)
                    .map(|(m, e)| m + e * config.prototype_scale)
                    .collect();
                weights.push(w);
                protos.push(mu);
            }
        }
    }

    let mut records = Vec::new();
    for (ni, (id, _, _)) in tree.iter().enumerate() {
        let idx = graph.require(id)?;
        let count = config
            .records_override
            .get(id)
            .copied()
            .unwrap_or(config.records_per_node);
        let concepts: BTreeSet<String> = graph.ancestor_closure(&[id])?;
        let labeled = concepts
            .iter()
            .any(|c| graph.node(graph.index_of(c).expect("closed")).is_core);

        let mut xs = Vec::with_capacity(count);
        let mut scores = Vec::with_capacity(count);
        let mut uniforms = Vec::with_capacity(count);
        for _ in 0..count {
            let noise = gauss(&mut rng, d);
            let x: Vec<f64> = protos[ni]
                .iter()
                .zip(&noise)
                .map(|(m, e)| m + config.noise_scale * e)
                .collect();
            scores.push(weights[ni].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>());
            uniforms.push(rng.random::<f64>());
            xs.push(x);
        }
        let labels: Vec<u8> = if labeled && count > 0 {
            let bias = fit_bias(&scores, &uniforms, config.prevalence)
                .ok_or_else(|| Error::Prevalence {
                    node: graph.node(idx).id.clone(),
                    target: config.prevalence,
                })?;
            scores
                .iter()
                .zip(&uniforms)
                .map(|(s, u)| u8::from(*u < sigmoid(s + bias)))
                .collect()
        } else {
            vec![]
        };

        for (j, x) in xs.into_iter().enumerate() {
            let mut lab = BTreeMap::new();
            if labeled {
                lab.insert(config.outcome.clone(), labels[j]);
            }
            records.push(Record {
                id: format!("{id}/{j:05}"),
                features: x,
                concepts: concepts.clone(),
                labels: lab,
            });
        }
    }
    let data = Dataset::new(records, &graph)?;
    let truth = tree
        .iter()
        .map(|(id, _, _)| id.clone())
        .zip(weights)
        .collect();
    Ok((graph, data, truth))
}

/// Bias whose realized positive rate, with the uniforms held fixed, is
/// closest to `target`. Realized prevalence is monotone in the bias, so
/// bisection lands within one record of the target.
fn fit_bias(scores: &[f64], uniforms: &[f64], target: f64) -> Option<f64> {
    if !(target > 0.0 && target < 1.0) {
        return None;
    }
    let rate = |b: f64| {
        scores
            .iter()
            .zip(uniforms)
            .filter(|(s, u)| **u < sigmoid(**s + b))
            .count() as f64
            / scores.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate(lo) > target || rate(hi) < target {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rl, rh) = (rate(lo), rate(hi));
    Some(if (rl - target).abs() <= (rh - target).abs() { lo } else { hi })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_graph() -> OntologyGraph {
        OntologyGraph::from_json(
            r#"{"nodes":[{"id":"a","concept":"1","core":false,"outcomes":[]},
                         {"id":"b","concept":"2","core":false,"outcomes":[]},
                         {"id":"c","concept":"3","core":true,"outcomes":["mortality"]}],
                "edges":[{"parent":"a","child":"b"},{"parent":"b","child":"c"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn load_closes_concepts_and_accepts_unlabeled() {
        let g = chain_graph();
        let text = concat!(
            r#"{"id":"r1","features":[1.0,2.0],"concepts":["c"],"labels":{"mortality":1}}"#,
            "\n",
            r#"{"id":"r2","features":[0.0,0.5],"concepts":["b"],"labels":{}}"#,
            "\n"
        );
        let ds = parse_dataset(text, "mem", &g).unwrap();
        assert_eq!(ds.records[0].concepts.len(), 3);
        assert!(!ds.records[1].is_labeled());
        assert_eq!(ds.feature_dim, 2);
    }

    #[test]
    fn load_rejects_bad_records_with_line_numbers() {
        let g = chain_graph();
        let good = r#"{"id":"r1","features":[1.0,2.0],"concepts":["c"],"labels":{"mortality":0}}"#;
        let cases = [
            r#"{"id":"r2","features":[1.0,2.0],"concepts":["c"],"labels":{"mortality":2}}"#,
            r#"{"id":"r2","features":[1.0],"concepts":["c"],"labels":{}}"#,
            r#"{"id":"r2","features":[1.0,2.0],"concepts":["zzz"],"labels":{}}"#,
            r#"{"id":"r2","features":[1.0,2.0],"concepts":["c"],"labels":{"readmit":1}}"#,
            r#"{"id":"r2","features":[1.0,2.0],"concepts":[],"labels":{}}"#,
        ];
        for bad in cases {
            let text = format!("{good}\n{bad}\n");
            match parse_dataset(&text, "mem", &g) {
                Err(Error::Record { line, .. }) => assert_eq!(line, 2, "{bad}"),
                other => panic!("expected record error for {bad}, got {other:?}"),
            }
        }
    }

    fn single_node_dataset(n: usize, positives: usize) -> (OntologyGraph, Dataset) {
        let g = OntologyGraph::from_json(
            r#"{"nodes":[{"id":"p","concept":"1","core":true,"outcomes":["mortality"]}],"edges":[]}"#,
        )
        .unwrap();
        let records = (0..n)
            .map(|i| Record {
                id: format!("r{i:03}"),
                features: vec![i as f64],
                concepts: BTreeSet::from(["p".to_string()]),
                labels: BTreeMap::from([("mortality".to_string(), u8::from(i < positives))]),
            })
            .collect();
        let ds = Dataset::new(records, &g).unwrap();
        (g, ds)
    }

    #[test]
    fn exact_divisibility_folds() {
        let (g, ds) = single_node_dataset(100, 20);
        let plan = make_folds(&ds, &g, 5, 3).unwrap();
        for f in 0..5 {
            let (_, test) = plan.split(&ds, f).unwrap();
            assert_eq!(test.len(), 20);
            let pos = test
                .iter()
                .filter(|&&i| ds.records[i].labels["mortality"] == 1)
                .count();
            assert_eq!(pos, 4);
        }
        assert_eq!(plan, make_folds(&ds, &g, 5, 3).unwrap());
    }

    #[test]
    fn degenerate_stratum_still_partitions() {
        let (g, ds) = single_node_dataset(23, 0);
        let plan = make_folds(&ds, &g, 5, 1).unwrap();
        assert_eq!(plan.assignment.len(), 23);
        let mut seen = 0;
        for f in 0..5 {
            seen += plan.split(&ds, f).unwrap().1.len();
        }
        assert_eq!(seen, 23);
    }

    #[test]
    fn too_few_labeled_records() {
        let (g, ds) = single_node_dataset(3, 1);
        assert!(make_folds(&ds, &g, 5, 0).is_err());
        assert!(make_folds(&ds, &g, 1, 0).is_err());
    }

    #[test]
    fn synthetic_default_hits_prevalence() {
        let (g, ds) = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(g.depth(), 3);
        let labeled: Vec<&Record> = ds.records.iter().filter(|r| r.is_labeled()).collect();
        let pos = labeled.iter().filter(|r| r.labels["mortality"] == 1).count();
        let prev = pos as f64 / labeled.len() as f64;
        assert!((prev - 0.15).abs() <= 0.02, "prevalence {prev}");
        // root-only records are unlabeled augmentation
        assert!(ds
            .records
            .iter()
            .filter(|r| r.concepts.len() == 1)
            .all(|r| !r.is_labeled()));
    }

    #[test]
    fn synthetic_is_reproducible() {
        let c = SynthConfig {
            records_per_node: 30,
            seed: 5,
            ..SynthConfig::default()
        };
        let (g1, d1) = generate_synthetic(&c).unwrap();
        let (g2, d2) = generate_synthetic(&c).unwrap();
        assert_eq!(g1.to_json(), g2.to_json());
        assert_eq!(d1.to_jsonl(), d2.to_jsonl());
    }

    #[test]
    fn rho_extremes_control_weight_sharing() {
        let base = SynthConfig {
            records_per_node: 20,
            ..SynthConfig::default()
        };
        let (_, _, w1) = generate_synthetic_with_truth(&SynthConfig { rho: 1.0, ..base.clone() }).unwrap();
        let root = &w1["n0"];
        assert!(w1.values().all(|w| w == root));

        let (_, _, w0) = generate_synthetic_with_truth(&SynthConfig { rho: 0.0, ..base }).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        // independent 41-d Gaussians: |cos| ~ 1/sqrt(41)
        assert!(cos(&w0["n0"], &w0["n0.0"]).abs() < 0.5);
        assert!(cos(&w0["n0.0"], &w0["n0.0.1"]).abs() < 0.5);
    }

    #[test]
    fn unreachable_prevalence_errors() {
        for p in [0.0, 1.0, -0.3] {
            let c = SynthConfig {
                records_per_node: 10,
                prevalence: p,
                ..SynthConfig::default()
            };
            assert!(matches!(generate_synthetic(&c), Err(Error::Prevalence { .. })));
        }
    }
}
