//! The ontology-mirrored network and its mixture-of-experts baselines.
//!
//! Every variant shares the same skeleton: `E` one-layer experts feed one
//! representation block per graph node, each node owns a reconstruction
//! head, and core nodes own one outcome head per associated outcome. The
//! variants differ only in how a node combines the experts (`SB`: the single
//! expert, `MOE`: unweighted mean, `MMOE`/`OMTL`: a softmax gate over the raw
//! input) and whether a node also mixes its parents' representations through
//! a second softmax gate (`OMTL` with the hierarchy enabled).
//!
//! A forward pass processes a batch. Nodes run in `(level, id)` order over
//! the sub-batch of records that express them, so a node's parents are
//! always computed first and for a superset of its rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::datastore::Record;
use crate::error::{Error, Result};
use crate::ontology::OntologyGraph;
use crate::tensor::{sigmoid, DenseTensor, NodeId, ParamId, ParamStore, Tape, LEAKY_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sb,
    Moe,
    Mmoe,
    Omtl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Omtl, Variant::Mmoe, Variant::Moe, Variant::Sb];

    pub fn has_expert_gates(self) -> bool {
        matches!(self, Variant::Mmoe | Variant::Omtl)
    }

    pub fn has_parent_gates(self) -> bool {
        self == Variant::Omtl
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sb => "sb",
            Variant::Moe => "moe",
            Variant::Mmoe => "mmoe",
            Variant::Omtl => "omtl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sb" => Ok(Variant::Sb),
            "moe" => Ok(Variant::Moe),
            "mmoe" => Ok(Variant::Mmoe),
            "omtl" => Ok(Variant::Omtl),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub num_experts: usize,
    pub feature_dim: usize,
    pub repr_dim: usize,
    pub hierarchy_enabled: bool,
    pub dropout: f64,
    /// Outcome that gets a head on every node, for level-weighted training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_outcome: Option<String>,
}

impl ModelSpec {
    /// Defaults for a variant: 3 experts (1 for SB), 5-dim representations,
    /// dropout 0.5, hierarchy on only for OMTL.
    pub fn new(variant: Variant, feature_dim: usize) -> Self {
        Self {
            variant,
            num_experts: if variant == Variant::Sb { 1 } else { 3 },
            feature_dim,
            repr_dim: 5,
            hierarchy_enabled: variant == Variant::Omtl,
            dropout: 0.5,
            shared_outcome: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{} spec: {m}", self.variant)));
        if self.feature_dim == 0 || self.repr_dim == 0 || self.num_experts == 0 {
            return bad("dimensions and expert count must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        match self.variant {
            Variant::Sb if self.num_experts != 1 => bad("shared-bottom uses exactly one expert"),
            Variant::Moe if self.num_experts < 2 => bad("mixture needs more than one expert"),
            Variant::Sb | Variant::Moe | Variant::Mmoe if self.hierarchy_enabled => {
                bad("hierarchy is only available to omtl")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams {
    pub expert_gate: Option<Affine>,
    pub parent_gate: Option<Affine>,
    pub repr: Affine,
    pub recon: Affine,
    /// Outcome heads keyed by outcome name.
    pub heads: BTreeMap<String, Affine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmtlModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub experts: Vec<Affine>,
    /// Indexed like the graph's nodes.
    pub nodes: Vec<NodeParams>,
    pub graph_hash: String,
}

/// One outcome head evaluated on part of a node's rows.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub outcome: String,
    /// Batch rows scored by this head.
    pub rows: Vec<usize>,
    /// `n×1` logits aligned with `rows`.
    pub logits: NodeId,
    /// The record's label for `outcome`, when it has one.
    pub labels: Vec<Option<u8>>,
}

/// Tape handles for one computed node.
#[derive(Debug, Clone)]
pub struct NodeOutput {
    pub node: usize,
    /// Batch rows expressing this node.
    pub rows: Vec<usize>,
    pub expert_gate: Option<NodeId>,
    pub parent_gate: Option<NodeId>,
    pub representation: NodeId,
    pub reconstruction: NodeId,
    /// Input rows the reconstruction targets.
    pub target: DenseTensor,
    pub heads: Vec<HeadOutput>,
    /// Outcomes this node has heads for, scored or not.
    pub head_outcomes: Vec<String>,
}

/// Batched forward pass; `nodes` is in computation order.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub batch_size: usize,
    pub nodes: Vec<NodeOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeForward {
    pub representation: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logit: f64,
    pub probability: f64,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        Self {
            logit,
            probability: sigmoid(logit),
        }
    }
}

/// Single-record view of a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardResult {
    pub nodes: BTreeMap<String, NodeForward>,
    /// Keyed by `(node id, outcome)`.
    pub predictions: BTreeMap<(String, String), Prediction>,
    /// Node ids in the order they were computed.
    pub order: Vec<String>,
}

impl BatchForward {
    /// Extracts the view of batch row `row`.
    pub fn record_result(&self, tape: &Tape, graph: &OntologyGraph, row: usize) -> ForwardResult {
        let mut out = ForwardResult::default();
        for n in &self.nodes {
            let Ok(pos) = n.rows.binary_search(&row) else { continue };
            let id = graph.node(n.node).id.clone();
            out.order.push(id.clone());
            out.nodes.insert(
                id.clone(),
                NodeForward {
                    representation: tape.value(n.representation).row(pos).to_vec(),
                    reconstruction: tape.value(n.reconstruction).row(pos).to_vec(),
                },
            );
            for h in &n.heads {
                if let Ok(hp) = h.rows.binary_search(&row) {
                    let z = tape.value(h.logits).get(hp, 0);
                    out.predictions
                        .insert((id.clone(), h.outcome.clone()), Prediction::from_logit(z));
                }
            }
        }
        out
    }
}

fn names(node: &str, part: &str) -> (String, String) {
    (format!("node.{node}.{part}.w"), format!("node.{node}.{part}.b"))
}

impl OmtlModel {
    /// Allocates every parameter with seeded fan-in-uniform init.
    pub fn build(spec: ModelSpec, graph: &OntologyGraph, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (d, de, e) = (spec.feature_dim, spec.repr_dim, spec.num_experts);
        let mut store = ParamStore::new();
        let affine = |store: &mut ParamStore, (wn, bn): (String, String), fan_in: usize, out: usize| -> Result<Affine> {
            Ok(Affine {
                weight: store.insert_init(wn, fan_in, out, fan_in, seed)?,
                bias: store.insert_init(bn, 1, out, fan_in, seed)?,
            })
        };

        let experts = (0..e)
            .map(|i| {
                affine(
                    &mut store,
                    (format!("expert.{i}.w"), format!("expert.{i}.b")),
                    d,
                    de,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut nodes = Vec::with_capacity(graph.len());
        for idx in 0..graph.len() {
            let cn = graph.node(idx);
            let id = cn.id.as_str();
            let expert_gate = if spec.variant.has_expert_gates() {
                Some(affine(&mut store, names(id, "g"), d, e)?)
            } else {
                None
            };
            let n_par = graph.parents(idx).len();
            let parent_gate = if spec.variant.has_parent_gates() && n_par > 0 {
                Some(affine(&mut store, names(id, "h"), d, n_par)?)
            } else {
                None
            };
            let repr = affine(&mut store, names(id, "repr"), de, de)?;
            let recon = affine(&mut store, names(id, "recon"), de, d)?;
            let mut outcomes: BTreeSet<String> = if cn.is_core {
                cn.outcomes.iter().cloned().collect()
            } else {
                BTreeSet::new()
            };
            if let Some(o) = &spec.shared_outcome {
                outcomes.insert(o.clone());
            }
            let mut heads = BTreeMap::new();
            for o in outcomes {
                let a = affine(&mut store, names(id, &format!("head.{o}")), de, 1)?;
                heads.insert(o, a);
            }
            nodes.push(NodeParams {
                expert_gate,
                parent_gate,
                repr,
                recon,
                heads,
            });
        }
        Ok(Self {
            spec,
            store,
            experts,
            nodes,
            graph_hash: graph.content_hash(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameters of the experts and the expert gates.
    pub fn expert_and_gate_params(&self) -> BTreeSet<ParamId> {
        let mut s = BTreeSet::new();
        for a in &self.experts {
            s.extend([a.weight, a.bias]);
        }
        for n in &self.nodes {
            if let Some(a) = n.expert_gate {
                s.extend([a.weight, a.bias]);
            }
        }
        s
    }

    pub fn parent_gate_params(&self) -> BTreeSet<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| n.parent_gate)
            .flat_map(|a| [a.weight, a.bias])
            .collect()
    }

    /// Every parameter owned by graph node `idx`.
    pub fn node_params(&self, idx: usize) -> Vec<ParamId> {
        let n = &self.nodes[idx];
        let mut v = vec![n.repr.weight, n.repr.bias, n.recon.weight, n.recon.bias];
        for a in n.expert_gate.iter().chain(n.parent_gate.iter()).chain(n.heads.values()) {
            v.extend([a.weight, a.bias]);
        }
        v
    }

    pub fn check_graph(&self, graph: &OntologyGraph) -> Result<()> {
        if graph.len() != self.nodes.len() || graph.content_hash() != self.graph_hash {
            return Err(Error::Model(format!(
                "model was built for graph {}, got {}",
                self.graph_hash,
                graph.content_hash()
            )));
        }
        Ok(())
    }

    fn load_affine(&self, tape: &mut Tape, a: Affine) -> (NodeId, NodeId) {
        (tape.param(&self.store, a.weight), tape.param(&self.store, a.bias))
    }

    fn apply(&self, tape: &mut Tape, x: NodeId, a: Affine) -> Result<NodeId> {
        let (w, b) = self.load_affine(tape, a);
        tape.affine(x, w, b)
    }

    /// Expert outputs for every row of `x`, dropout applied when `rng` is set.
    fn experts_out(&self, tape: &mut Tape, x: NodeId, mut rng: Option<&mut dyn RngCore>) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.experts.len());
        for &a in &self.experts {
            let h = self.apply(tape, x, a)?;
            let h = tape.leaky_relu(h, LEAKY_SLOPE);
            let h = match rng.as_mut() {
                Some(r) => tape.dropout(h, self.spec.dropout, Some(&mut **r))?,
                None => h,
            };
            out.push(h);
        }
        Ok(out)
    }

    /// Combination of expert outputs for node `idx`; returns the gate too.
    fn mix_node(&self, tape: &mut Tape, idx: usize, x: NodeId, experts: &[NodeId]) -> Result<(NodeId, Option<NodeId>)> {
        match self.spec.variant {
            Variant::Sb => Ok((experts[0], None)),
            Variant::Moe => Ok((tape.mean_of(experts)?, None)),
            Variant::Mmoe | Variant::Omtl => {
                let a = self.nodes[idx]
                    .expert_gate
                    .ok_or_else(|| Error::Model("missing expert gate".into()))?;
                let logits = self.apply(tape, x, a)?;
                let g = tape.softmax_rows(logits);
                Ok((tape.mix(g, experts)?, Some(g)))
            }
        }
    }

    /// Representation of node `idx` from its expert mixture and, when
    /// `parents` is given, the parent-gated mixture of parent representations.
    fn represent_node(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: NodeId,
        mixed: NodeId,
        parents: Option<&[NodeId]>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let np = &self.nodes[idx];
        let (input, gate) = match parents {
            Some(ps) if !ps.is_empty() => {
                let a = np
                    .parent_gate
                    .ok_or_else(|| Error::Model("missing parent gate".into()))?;
                let logits = self.apply(tape, x, a)?;
                let h = tape.softmax_rows(logits);
                let pm = tape.mix(h, ps)?;
                (tape.add(mixed, pm)?, Some(h))
            }
            _ => (mixed, None),
        };
        let z = self.apply(tape, input, np.repr)?;
        Ok((tape.softplus(z), gate))
    }

    fn uses_hierarchy(&self, graph: &OntologyGraph, idx: usize) -> bool {
        self.spec.hierarchy_enabled && self.spec.variant.has_parent_gates() && !graph.parents(idx).is_empty()
    }

    /// Level-ordered batched forward pass.
    ///
    /// In train mode heads only score rows labeled for their outcome; in eval
    /// mode they score every expressing row. `rng` drives expert dropout and
    /// is ignored in eval mode.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        graph: &OntologyGraph,
        records: &[&Record],
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<BatchForward> {
        let n = records.len();
        let d = self.spec.feature_dim;
        if graph.len() != self.nodes.len() {
            return Err(Error::Model(format!(
                "graph has {} nodes, model has {}",
                graph.len(),
                self.nodes.len()
            )));
        }
        let mut xs = Vec::with_capacity(n * d);
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); graph.len()];
        for (row, r) in records.iter().enumerate() {
            if r.features.len() != d {
                return Err(Error::Shape {
                    op: "forward",
                    left: (1, d),
                    right: (1, r.features.len()),
                });
            }
            xs.extend_from_slice(&r.features);
            for c in &r.concepts {
                rows_of[graph.require(c)?].push(row);
            }
        }
        if n == 0 {
            return Ok(BatchForward {
                batch_size: 0,
                nodes: vec![],
            });
        }
        let x_all = DenseTensor::from_vec(n, d, xs)?;
        let x_node = tape.constant(x_all.clone());
        let rng = if mode == Mode::Train { rng } else { None };
        let experts = self.experts_out(tape, x_node, rng)?;

        let mut computed: HashMap<usize, usize> = HashMap::new();
        let mut outputs: Vec<NodeOutput> = Vec::new();
        for &idx in graph.routing_order() {
            let rows = std::mem::take(&mut rows_of[idx]);
            if rows.is_empty() {
                continue;
            }
            let all_rows = rows.len() == n;
            let target = if all_rows { x_all.clone() } else { x_all.gather_rows(&rows) };
            let (xj, zs) = if all_rows {
                (x_node, experts.clone())
            } else {
                let xj = tape.constant(target.clone());
                let zs = experts
                    .iter()
                    .map(|&z| tape.gather_rows(z, &rows))
                    .collect::<Result<Vec<_>>>()?;
                (xj, zs)
            };
            let (mixed, g_gate) = self.mix_node(tape, idx, xj, &zs)?;

            let parent_reprs = if self.uses_hierarchy(graph, idx) {
                let mut ps = Vec::new();
                for &p in graph.parents(idx) {
                    let out = computed
                        .get(&p)
                        .map(|&k| &outputs[k])
                        .ok_or_else(|| missing_parent(graph, idx, p))?;
                    let pos = rows
                        .iter()
                        .map(|r| out.rows.binary_search(r).map_err(|_| missing_parent(graph, idx, p)))
                        .collect::<Result<Vec<_>>>()?;
                    let pr = if pos.len() == out.rows.len() {
                        out.representation
                    } else {
                        tape.gather_rows(out.representation, &pos)?
                    };
                    ps.push(pr);
                }
                Some(ps)
            } else {
                None
            };
            let (repr, h_gate) = self.represent_node(tape, idx, xj, mixed, parent_reprs.as_deref())?;
            let recon_lin = self.apply(tape, repr, self.nodes[idx].recon)?;
            let recon = tape.relu(recon_lin);

            let mut heads = Vec::new();
            for (o, &a) in &self.nodes[idx].heads {
                let mut hrows = Vec::new();
                let mut pos = Vec::new();
                let mut labels = Vec::new();
                for (p, &r) in rows.iter().enumerate() {
                    let y = records[r].labels.get(o).copied();
                    if mode == Mode::Eval || y.is_some() {
                        hrows.push(r);
                        pos.push(p);
                        labels.push(y);
                    }
                }
                if hrows.is_empty() {
                    continue;
                }
                let e = if pos.len() == rows.len() {
                    repr
                } else {
                    tape.gather_rows(repr, &pos)?
                };
                let logits = self.apply(tape, e, a)?;
                heads.push(HeadOutput {
                    outcome: o.clone(),
                    rows: hrows,
                    logits,
                    labels,
                });
            }

            computed.insert(idx, outputs.len());
            outputs.push(NodeOutput {
                node: idx,
                rows,
                expert_gate: g_gate,
                parent_gate: h_gate,
                representation: repr,
                reconstruction: recon,
                target,
                heads,
                head_outcomes: self.nodes[idx].heads.keys().cloned().collect(),
            });
        }
        Ok(BatchForward {
            batch_size: n,
            nodes: outputs,
        })
    }

    /// Forward pass for a single record.
    pub fn forward(
        &self,
        graph: &OntologyGraph,
        record: &Record,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardResult> {
        let mut tape = Tape::no_grad();
        let fwd = self.forward_batch(&mut tape, graph, &[record], mode, rng)?;
        Ok(fwd.record_result(&tape, graph, 0))
    }

    fn single_input(&self, x: &[f64]) -> Result<DenseTensor> {
        if x.len() != self.spec.feature_dim {
            return Err(Error::Shape {
                op: "input",
                left: (1, self.spec.feature_dim),
                right: (1, x.len()),
            });
        }
        Ok(DenseTensor::row_vector(x.to_vec()))
    }

    /// `M_p(x)`: expert outputs combined for node `node` (eval mode).
    pub fn mix_experts(&self, graph: &OntologyGraph, node: &str, x: &[f64]) -> Result<Vec<f64>> {
        let idx = graph.require(node)?;
        let mut tape = Tape::no_grad();
        let xn = tape.constant(self.single_input(x)?);
        let zs = self.experts_out(&mut tape, xn, None)?;
        let (m, _) = self.mix_node(&mut tape, idx, xn, &zs)?;
        Ok(tape.value(m).values().to_vec())
    }

    /// Softmax weights over the experts for node `node`, if it is gated.
    pub fn expert_gate(&self, graph: &OntologyGraph, node: &str, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let idx = graph.require(node)?;
        let Some(a) = self.nodes[idx].expert_gate else { return Ok(None) };
        self.gate_values(a, x).map(Some)
    }

    /// Softmax weights over the parents of node `node`, if it has a parent gate.
    pub fn parent_gate(&self, graph: &OntologyGraph, node: &str, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let idx = graph.require(node)?;
        let Some(a) = self.nodes[idx].parent_gate else { return Ok(None) };
        self.gate_values(a, x).map(Some)
    }

    fn gate_values(&self, a: Affine, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let xn = tape.constant(self.single_input(x)?);
        let z = self.apply(&mut tape, xn, a)?;
        let g = tape.softmax_rows(z);
        Ok(tape.value(g).values().to_vec())
    }

    /// `ℰ_j(x)` given the parents' representations (eval mode).
    ///
    /// Parent representations are only consulted when the hierarchy is
    /// enabled and `node` has parents; every parent must then be present.
    pub fn node_representation(
        &self,
        graph: &OntologyGraph,
        node: &str,
        x: &[f64],
        parent_reprs: &BTreeMap<String, Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let idx = graph.require(node)?;
        let mut tape = Tape::no_grad();
        let xn = tape.constant(self.single_input(x)?);
        let zs = self.experts_out(&mut tape, xn, None)?;
        let (m, _) = self.mix_node(&mut tape, idx, xn, &zs)?;
        let parents = if self.uses_hierarchy(graph, idx) {
            let mut ps = Vec::new();
            for &p in graph.parents(idx) {
                let v = parent_reprs
                    .get(&graph.node(p).id)
                    .ok_or_else(|| missing_parent(graph, idx, p))?;
                if v.len() != self.spec.repr_dim {
                    return Err(Error::Shape {
                        op: "node_representation",
                        left: (1, self.spec.repr_dim),
                        right: (1, v.len()),
                    });
                }
                ps.push(tape.constant(DenseTensor::row_vector(v.clone())));
            }
            Some(ps)
        } else {
            None
        };
        let (e, _) = self.represent_node(&mut tape, idx, xn, m, parents.as_deref())?;
        Ok(tape.value(e).values().to_vec())
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_params(&mut self, other: &OmtlModel) -> usize {
        let mut n = 0;
        let pairs: Vec<(ParamId, ParamId)> = self
            .store
            .sorted()
            .filter_map(|(name, id)| other.store.id(name).map(|oid| (id, oid)))
            .collect();
        for (id, oid) in pairs {
            if self.store.get(id).shape() == other.store.get(oid).shape() {
                *self.store.get_mut(id) = other.store.get(oid).clone();
                n += 1;
            }
        }
        n
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            spec: self.spec.clone(),
            graph_hash: self.graph_hash.clone(),
            params: self
                .store
                .sorted()
                .map(|(name, id)| {
                    let t = self.store.get(id);
                    (
                        name.to_string(),
                        ParamFile {
                            shape: [t.rows(), t.cols()],
                            values: t.values().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_file(file: ModelFile, graph: &OntologyGraph) -> Result<Self> {
        let mut model = Self::build(file.spec, graph, 0)?;
        if file.graph_hash != model.graph_hash {
            return Err(Error::Model(format!(
                "model file is for graph {}, got {}",
                file.graph_hash, model.graph_hash
            )));
        }
        if file.params.len() != model.store.len() {
            return Err(Error::Model(format!(
                "model file has {} parameters, expected {}",
                file.params.len(),
                model.store.len()
            )));
        }
        for (name, p) in file.params {
            let id = model.store.id(&name).ok_or(Error::UnknownParam(name))?;
            *model.store.get_mut(id) = DenseTensor::from_vec(p.shape[0], p.shape[1], p.values)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_file())? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, graph: &OntologyGraph) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(serde_json::from_str(&text)?, graph)
    }
}

fn missing_parent(graph: &OntologyGraph, idx: usize, parent: usize) -> Error {
    Error::Model(format!(
        "representation of parent `{}` unavailable for `{}` (concept set not ancestor-closed?)",
        graph.node(parent).id,
        graph.node(idx).id
    ))
}

/// Serialized model: spec, graph fingerprint, and name-ordered parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub spec: ModelSpec,
    pub graph_hash: String,
    pub params: BTreeMap<String, ParamFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{ConceptNode, Edge};

    fn graph(nodes: &[(&str, bool)], edges: &[(&str, &str)]) -> OntologyGraph {
        OntologyGraph::new(
            nodes
                .iter()
                .map(|&(id, core)| ConceptNode {
                    id: id.into(),
                    concept_code: id.into(),
                    is_core: core,
                    outcomes: if core { vec!["mortality".into()] } else { vec![] },
                })
                .collect(),
            edges
                .iter()
                .map(|&(p, c)| Edge {
                    parent: p.into(),
                    child: c.into(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn record(concepts: &[&str], d: usize, label: Option<u8>) -> Record {
        Record {
            id: "r".into(),
            features: (0..d).map(|i| (i as f64 * 0.37).sin()).collect(),
            concepts: concepts.iter().map(|s| s.to_string()).collect(),
            labels: label.map(|y| BTreeMap::from([("mortality".to_string(), y)])).unwrap_or_default(),
        }
    }

    #[test]
    fn shared_bottom_param_count() {
        let g = graph(&[("p", true)], &[]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Sb, 41), &g, 0).unwrap();
        assert_eq!(m.num_params(), 492);
    }

    #[test]
    fn omtl_adds_exactly_parent_gates() {
        let g = graph(
            &[("a", false), ("b", false), ("c", true), ("d", true)],
            &[("a", "c"), ("b", "c"), ("c", "d")],
        );
        let d = 41;
        let omtl = OmtlModel::build(ModelSpec::new(Variant::Omtl, d), &g, 0).unwrap();
        let mmoe = OmtlModel::build(ModelSpec::new(Variant::Mmoe, d), &g, 0).unwrap();
        // c has 2 parents, d has 1
        let extra = (d * 2 + 2) + (d + 1);
        assert_eq!(omtl.num_params() - mmoe.num_params(), extra);

        let flat = graph(&[("a", true), ("b", true)], &[]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, d), &flat, 0).unwrap();
        assert!(m.parent_gate_params().is_empty());
    }

    #[test]
    fn spec_invariants() {
        let mut s = ModelSpec::new(Variant::Sb, 4);
        s.num_experts = 3;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(Variant::Moe, 4);
        s.num_experts = 1;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(Variant::Mmoe, 4);
        s.hierarchy_enabled = true;
        assert!(s.validate().is_err());
        assert!("OMTL".parse::<Variant>().is_ok() && "x".parse::<Variant>().is_err());
    }

    #[test]
    fn single_expert_mix_is_expert_output() {
        let g = graph(&[("p", true)], &[]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Sb, 6), &g, 4).unwrap();
        let x = [0.3, -1.0, 0.2, 0.9, -0.4, 0.1];
        let mixed = m.mix_experts(&g, "p", &x).unwrap();
        let w = m.store.get(m.experts[0].weight);
        let b = m.store.get(m.experts[0].bias);
        for c in 0..5 {
            let h: f64 = (0..6).map(|k| x[k] * w.get(k, c)).sum::<f64>() + b.get(0, c);
            let h = if h > 0.0 { h } else { 0.01 * h };
            assert_eq!(mixed[c], h);
        }
        assert!(m.expert_gate(&g, "p", &x).unwrap().is_none());
    }

    #[test]
    fn equal_gate_logits_give_expert_mean() {
        let g = graph(&[("p", true)], &[]);
        let mut m = OmtlModel::build(ModelSpec::new(Variant::Mmoe, 6), &g, 4).unwrap();
        let gate = m.nodes[0].expert_gate.unwrap();
        m.store.get_mut(gate.weight).values_mut().fill(0.0);
        m.store.get_mut(gate.bias).values_mut().fill(0.0);
        let mut moe = OmtlModel::build(ModelSpec::new(Variant::Moe, 6), &g, 4).unwrap();
        moe.copy_shared_params(&m);
        let x = [0.3, -1.0, 0.2, 0.9, -0.4, 0.1];
        let a = m.mix_experts(&g, "p", &x).unwrap();
        let b = moe.mix_experts(&g, "p", &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn single_parent_passes_representation_through() {
        let g = graph(&[("a", false), ("b", true)], &[("a", "b")]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, 6), &g, 2).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, -0.5, 0.6];
        assert_eq!(m.parent_gate(&g, "b", &x).unwrap().unwrap(), vec![1.0]);
        let rec = record(&["b"], 6, Some(1));
        let mut rec = rec;
        rec.features = x.to_vec();
        rec.concepts = g.ancestor_closure(&["b"]).unwrap();
        let fr = m.forward(&g, &rec, Mode::Eval, None).unwrap();
        let parent = BTreeMap::from([("a".to_string(), fr.nodes["a"].representation.clone())]);
        let e = m.node_representation(&g, "b", &x, &parent).unwrap();
        assert_eq!(e, fr.nodes["b"].representation);
        assert!(m.node_representation(&g, "b", &x, &BTreeMap::new()).is_err());
    }

    #[test]
    fn root_only_record_computes_one_node() {
        let g = graph(&[("a", false), ("b", true), ("c", true)], &[("a", "b"), ("b", "c")]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, 5), &g, 1).unwrap();
        let fr = m.forward(&g, &record(&["a"], 5, None), Mode::Eval, None).unwrap();
        assert_eq!(fr.nodes.len(), 1);
        assert!(fr.predictions.is_empty());

        let fr = m.forward(&g, &record(&["a", "b", "c"], 5, Some(0)), Mode::Train, None).unwrap();
        assert_eq!(fr.order, vec!["a", "b", "c"]);
        assert_eq!(fr.predictions.len(), 2);
        for p in fr.predictions.values() {
            assert!(p.probability > 0.0 && p.probability < 1.0);
        }
    }

    #[test]
    fn unclosed_record_is_an_invariant_error() {
        let g = graph(&[("a", false), ("b", true)], &[("a", "b")]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, 5), &g, 1).unwrap();
        let err = m.forward(&g, &record(&["b"], 5, Some(1)), Mode::Eval, None).unwrap_err();
        assert!(err.to_string().contains("parent"));
    }

    #[test]
    fn eval_mode_scores_unlabeled_records() {
        let g = graph(&[("p", true)], &[]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Mmoe, 5), &g, 1).unwrap();
        let r = record(&["p"], 5, None);
        assert!(m.forward(&g, &r, Mode::Train, None).unwrap().predictions.is_empty());
        assert_eq!(m.forward(&g, &r, Mode::Eval, None).unwrap().predictions.len(), 1);
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let g = graph(&[("a", false), ("b", true)], &[("a", "b")]);
        let m = OmtlModel::build(ModelSpec::new(Variant::Omtl, 7), &g, 12).unwrap();
        let text = serde_json::to_string(&m.to_file()).unwrap();
        let back = OmtlModel::from_file(serde_json::from_str(&text).unwrap(), &g).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(serde_json::to_string(&back.to_file()).unwrap(), text);
        let file = m.to_file();
        let names: Vec<&String> = file.params.keys().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);

        let other = graph(&[("a", false), ("b", true)], &[]);
        assert!(OmtlModel::from_file(m.to_file(), &other).is_err());
    }
}
