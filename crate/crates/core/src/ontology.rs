//! Concept DAG that the network mirrors.
//!
//! Nodes are concepts; edges point parent → child. Levels are longest-path
//! distances from the roots, so every child sits strictly below all of its
//! parents, and `routing_order` sorts by `(level, id)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::named_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: String,
    #[serde(rename = "concept")]
    pub concept_code: String,
    #[serde(rename = "core")]
    pub is_core: bool,
    #[serde(default)]
    pub outcomes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub parent: String,
    pub child: String,
}

/// On-disk layout of a graph file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<ConceptNode>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

/// Validated concept DAG with levels.
#[derive(Debug, Clone, PartialEq)]
pub struct OntologyGraph {
    nodes: Vec<ConceptNode>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    levels: Vec<usize>,
    order: Vec<usize>,
    depth: usize,
}

impl OntologyGraph {
    pub fn new(nodes: Vec<ConceptNode>, edges: Vec<Edge>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.id.is_empty() {
                return Err(Error::Graph(format!("node #{i} has an empty id")));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
            let mut seen = BTreeSet::new();
            for o in &n.outcomes {
                if o.is_empty() {
                    return Err(Error::Graph(format!("node `{}` has an empty outcome name", n.id)));
                }
                if !seen.insert(o) {
                    return Err(Error::Graph(format!("node `{}` repeats outcome `{o}`", n.id)));
                }
            }
            if !n.is_core && !n.outcomes.is_empty() {
                return Err(Error::Graph(format!(
                    "non-core node `{}` carries outcomes {:?}",
                    n.id, n.outcomes
                )));
            }
        }

        let mut parents = vec![Vec::new(); nodes.len()];
        let mut children = vec![Vec::new(); nodes.len()];
        let mut edge_set = BTreeSet::new();
        for e in &edges {
            let p = *index
                .get(&e.parent)
                .ok_or_else(|| Error::Graph(format!("edge references unknown parent `{}`", e.parent)))?;
            let c = *index
                .get(&e.child)
                .ok_or_else(|| Error::Graph(format!("edge references unknown child `{}`", e.child)))?;
            if !edge_set.insert((p, c)) {
                return Err(Error::Graph(format!("duplicate edge {} -> {}", e.parent, e.child)));
            }
            parents[c].push(p);
            children[p].push(c);
        }
        for list in parents.iter_mut().chain(children.iter_mut()) {
            list.sort_by(|&a, &b| nodes[a].id.cmp(&nodes[b].id));
        }

        let levels = longest_path_levels(&nodes, &parents, &children)?;
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by(|&a, &b| levels[a].cmp(&levels[b]).then_with(|| nodes[a].id.cmp(&nodes[b].id)));
        let depth = levels.iter().max().copied().unwrap_or(0) + 1;

        let mut edges = edges;
        edges.sort();
        Ok(Self {
            nodes,
            edges,
            index,
            parents,
            children,
            levels,
            order,
            depth,
        })
    }

    pub fn from_file(file: GraphFile) -> Result<Self> {
        Self::new(file.nodes, file.edges)
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("graph serializes")
    }

    /// SHA-256 over the canonical (id-sorted) JSON form.
    pub fn content_hash(&self) -> String {
        let mut file = self.to_file();
        file.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let bytes = serde_json::to_vec(&file).expect("graph serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, idx: usize) -> &ConceptNode {
        &self.nodes[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Parents of `idx`, sorted by id.
    pub fn parents(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn level(&self, idx: usize) -> usize {
        self.levels[idx]
    }

    pub fn level_map(&self) -> BTreeMap<String, usize> {
        self.nodes
            .iter()
            .zip(&self.levels)
            .map(|(n, &l)| (n.id.clone(), l))
            .collect()
    }

    /// Number of levels, `max level + 1`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Node indices sorted by `(level, id)`.
    pub fn routing_order(&self) -> &[usize] {
        &self.order
    }

    pub fn core_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_core)
    }

    /// All outcome names attached anywhere in the graph.
    pub fn outcome_names(&self) -> BTreeSet<String> {
        self.nodes.iter().flat_map(|n| n.outcomes.iter().cloned()).collect()
    }

    /// Smallest superset of `ids` closed under "add all parents".
    pub fn ancestor_closure<S: AsRef<str>>(&self, ids: &[S]) -> Result<BTreeSet<String>> {
        let start = ids
            .iter()
            .map(|s| self.require(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .closure_indices(&start)
            .into_iter()
            .map(|i| self.nodes[i].id.clone())
            .collect())
    }

    pub(crate) fn closure_indices(&self, start: &[usize]) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = start.to_vec();
        while let Some(i) = stack.pop() {
            if seen.insert(i) {
                stack.extend(self.parents[i].iter().copied());
            }
        }
        seen
    }

    /// Induced subgraph on `keep`; core flags follow `core`, and outcomes are
    /// dropped from nodes that end up non-core.
    pub fn induced_subgraph(&self, keep: &BTreeSet<usize>, core: &BTreeSet<usize>) -> Result<Self> {
        let nodes = keep
            .iter()
            .map(|&i| {
                let mut n = self.nodes[i].clone();
                n.is_core = core.contains(&i);
                if !n.is_core {
                    n.outcomes.clear();
                }
                n
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| keep.contains(&self.index[&e.parent]) && keep.contains(&self.index[&e.child]))
            .cloned()
            .collect();
        Self::new(nodes, edges)
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<OntologyGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    OntologyGraph::from_json(&text)
}

pub fn save_graph(graph: &OntologyGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, graph.to_json() + "\n").map_err(|e| Error::io(path, e))
}

/// Longest-path-from-roots levels for an id/edge list.
pub fn compute_levels(ids: &[String], edges: &[(String, String)]) -> Result<BTreeMap<String, usize>> {
    let nodes: Vec<ConceptNode> = ids
        .iter()
        .map(|id| ConceptNode {
            id: id.clone(),
            concept_code: id.clone(),
            is_core: false,
            outcomes: vec![],
        })
        .collect();
    let edges = edges
        .iter()
        .map(|(p, c)| Edge {
            parent: p.clone(),
            child: c.clone(),
        })
        .collect();
    Ok(OntologyGraph::new(nodes, edges)?.level_map())
}

fn longest_path_levels(
    nodes: &[ConceptNode],
    parents: &[Vec<usize>],
    children: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut levels = vec![0usize; n];
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut visited = 0;
    while let Some(u) = ready.pop() {
        visited += 1;
        for &v in &children[u] {
            levels[v] = levels[v].max(levels[u] + 1);
            indegree[v] -= 1;
            if indegree[v] == 0 {
                ready.push(v);
            }
        }
    }
    if visited < n {
        return Err(Error::Cycle(find_cycle(nodes, children, &indegree)));
    }
    Ok(levels)
}

/// One cycle among the nodes Kahn's algorithm could not release.
fn find_cycle(nodes: &[ConceptNode], children: &[Vec<usize>], indegree: &[usize]) -> Vec<String> {
    let stuck: Vec<bool> = indegree.iter().map(|&d| d > 0).collect();
    let start = stuck.iter().position(|&s| s).expect("some node is stuck");
    // Every stuck node has a stuck parent, so walking stuck children from a
    // node on a cycle must revisit; walk until a node repeats.
    let mut color = vec![0u8; nodes.len()];
    let mut path = Vec::new();
    fn dfs(
        u: usize,
        children: &[Vec<usize>],
        stuck: &[bool],
        color: &mut [u8],
        path: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        color[u] = 1;
        path.push(u);
        for &v in &children[u] {
            if !stuck[v] {
                continue;
            }
            if color[v] == 1 {
                let pos = path.iter().position(|&x| x == v).unwrap();
                let mut cyc = path[pos..].to_vec();
                cyc.push(v);
                return Some(cyc);
            }
            if color[v] == 0 {
                if let Some(c) = dfs(v, children, stuck, color, path) {
                    return Some(c);
                }
            }
        }
        color[u] = 2;
        path.pop();
        None
    }
    for s in std::iter::once(start).chain(0..nodes.len()) {
        if stuck[s] && color[s] == 0 {
            if let Some(c) = dfs(s, children, &stuck, &mut color, &mut path) {
                return c.into_iter().map(|i| nodes[i].id.clone()).collect();
            }
        }
    }
    vec![nodes[start].id.clone()]
}

/// Parameters of predecessor-walk cohort growth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthConfig {
    pub core_ids: Vec<String>,
    #[serde(default = "default_hops")]
    pub max_hops: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hops() -> usize {
    2
}

/// Grows a subgraph upward from the core nodes.
///
/// Each iteration starts at a uniformly chosen core node and walks up to a
/// uniformly chosen number of hops in `1..=max_hops`, stepping to a uniformly
/// chosen parent each time. Every visited node joins the subgraph.
pub fn grow_from_core(graph: &OntologyGraph, config: &GrowthConfig) -> Result<OntologyGraph> {
    let core: BTreeSet<usize> = config
        .core_ids
        .iter()
        .map(|id| graph.require(id))
        .collect::<Result<_>>()?;
    if core.is_empty() {
        return Err(Error::Config("growth needs at least one core node".into()));
    }
    let mut keep = core.clone();
    if config.max_hops > 0 {
        let core_list: Vec<usize> = core.iter().copied().collect();
        let mut rng = named_rng(config.seed, "augment");
        for _ in 0..config.iterations {
            let mut cur = *core_list.choose(&mut rng).expect("non-empty");
            let hops = rng.random_range(1..=config.max_hops);
            for _ in 0..hops {
                match graph.parents(cur).choose(&mut rng) {
                    Some(&p) => {
                        keep.insert(p);
                        cur = p;
                    }
                    None => break,
                }
            }
        }
    }
    graph.induced_subgraph(&keep, &core)
}
