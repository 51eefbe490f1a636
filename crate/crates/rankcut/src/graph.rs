//! Directed acyclic graphs over named nodes, ancestor machinery, d-separation,
//! and construction of selection-augmented graphs.
//!
//! Node identity is the positional index; names are for I/O. All set-valued
//! arguments and results are index sets. Every value is immutable after
//! construction and every operation is a pure function.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SelectionConfig;

/// What a node stands for in the generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Observed,
    Latent,
    /// A selection response: conditioned on by the sampling mechanism,
    /// never a cause of anything (no outgoing edges).
    #[serde(rename = "selection")]
    SelectionResponse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub role: NodeRole,
}

/// Weighted directed edge `from -> to`, stored by node index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// A weighted DAG. Construction rejects cycles, duplicate names, duplicate
/// edges, non-finite or zero weights, and response nodes with children.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
}

impl Dag {
    pub fn new(nodes: Vec<(String, NodeRole)>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = nodes.len();
        let mut seen = HashMap::new();
        for (i, (name, _)) in nodes.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::invalid(format!("nodes[{i}]: empty node name")));
            }
            if let Some(prev) = seen.insert(name.clone(), i) {
                return Err(Error::invalid(format!(
                    "nodes[{i}]: duplicate node name '{name}' (first at nodes[{prev}])"
                )));
            }
        }

        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut edge_seen = HashMap::new();
        for (k, &(from, to, weight)) in edges.iter().enumerate() {
            if from >= n || to >= n {
                return Err(Error::invalid(format!(
                    "edges[{k}]: node index out of range ({from} -> {to}, {n} nodes)"
                )));
            }
            if from == to {
                return Err(Error::invalid(format!(
                    "edges[{k}]: self-loop on '{}'",
                    nodes[from].0
                )));
            }
            if !weight.is_finite() || weight == 0.0 {
                return Err(Error::invalid(format!(
                    "edges[{k}]: weight of '{}' -> '{}' must be finite and nonzero, got {weight}",
                    nodes[from].0, nodes[to].0
                )));
            }
            if edge_seen.insert((from, to), k).is_some() {
                return Err(Error::invalid(format!(
                    "edges[{k}]: duplicate edge '{}' -> '{}'",
                    nodes[from].0, nodes[to].0
                )));
            }
            parents[to].push(from);
            children[from].push(to);
        }
        for p in parents.iter_mut() {
            p.sort_unstable();
        }
        for c in children.iter_mut() {
            c.sort_unstable();
        }

        // Kahn's algorithm; a leftover node means a directed cycle.
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut topo_order = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            topo_order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if topo_order.len() != n {
            let stuck: Vec<&str> = (0..n)
                .filter(|&v| indegree[v] > 0)
                .map(|v| nodes[v].0.as_str())
                .collect();
            return Err(Error::invalid(format!(
                "graph has a directed cycle through {{{}}}",
                stuck.join(", ")
            )));
        }

        for (v, (name, role)) in nodes.iter().enumerate() {
            if *role == NodeRole::SelectionResponse && !children[v].is_empty() {
                return Err(Error::invalid(format!(
                    "selection response node '{name}' has outgoing edges"
                )));
            }
        }

        Ok(Dag {
            nodes: nodes
                .into_iter()
                .map(|(name, role)| Node { name, role })
                .collect(),
            edges: edges
                .into_iter()
                .map(|(from, to, weight)| Edge { from, to, weight })
                .collect(),
            parents,
            children,
            topo_order,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn name(&self, v: usize) -> &str {
        &self.nodes[v].name
    }

    pub fn role(&self, v: usize) -> NodeRole {
        self.nodes[v].role
    }

    pub fn names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Indices for a list of names, erroring on the first unknown one.
    pub fn indices_of(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|name| {
                self.index_of(name)
                    .ok_or_else(|| Error::invalid(format!("unknown variable '{name}'")))
            })
            .collect()
    }

    pub fn parents_of(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children_of(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Nodes in a fixed topological order (parents before children).
    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn indices_with_role(&self, role: NodeRole) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&v| self.nodes[v].role == role)
            .collect()
    }

    fn check_indices(&self, set: &[usize], what: &str) -> Result<()> {
        for &v in set {
            if v >= self.node_count() {
                return Err(Error::invalid(format!(
                    "{what}: node index {v} out of range ({} nodes)",
                    self.node_count()
                )));
            }
        }
        Ok(())
    }

    /// Reflexive-transitive ancestor closure of `seed`: the union of an(a)
    /// over a in seed, where an(a) contains a itself.
    pub fn ancestors(&self, seed: &[usize]) -> Result<BTreeSet<usize>> {
        self.check_indices(seed, "ancestors")?;
        Ok(self.ancestors_excluding(seed, &BTreeSet::new()))
    }

    /// Ancestors of `seed \ removed` in the graph with `removed` deleted,
    /// expressed in the original node indices.
    pub(crate) fn ancestors_excluding(
        &self,
        seed: &[usize],
        removed: &BTreeSet<usize>,
    ) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = seed
            .iter()
            .copied()
            .filter(|v| !removed.contains(v))
            .collect();
        while let Some(v) = stack.pop() {
            if !out.insert(v) {
                continue;
            }
            for &p in &self.parents[v] {
                if !removed.contains(&p) && !out.contains(&p) {
                    stack.push(p);
                }
            }
        }
        out
    }

    /// Graph with the nodes in `drop` (and their edges) removed. Surviving
    /// nodes keep their relative order, so the index remapping is
    /// deterministic: new index = old index minus the number of dropped
    /// nodes before it.
    pub fn remove_nodes(&self, drop: &[usize]) -> Result<Dag> {
        self.check_indices(drop, "remove_nodes")?;
        let dropped: BTreeSet<usize> = drop.iter().copied().collect();
        let mut remap = vec![usize::MAX; self.node_count()];
        let mut kept = Vec::new();
        for v in 0..self.node_count() {
            if !dropped.contains(&v) {
                remap[v] = kept.len();
                kept.push((self.nodes[v].name.clone(), self.nodes[v].role));
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| !dropped.contains(&e.from) && !dropped.contains(&e.to))
            .map(|e| (remap[e.from], remap[e.to], e.weight))
            .collect();
        Dag::new(kept, edges)
    }

    /// Standard d-separation of `a` from `b` given `c` (moralization of the
    /// ancestral subgraph). The three sets must be pairwise disjoint.
    pub fn d_separated(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<bool> {
        self.check_indices(a, "d_separated")?;
        self.check_indices(b, "d_separated")?;
        self.check_indices(c, "d_separated")?;
        let sa: BTreeSet<usize> = a.iter().copied().collect();
        let sb: BTreeSet<usize> = b.iter().copied().collect();
        let sc: BTreeSet<usize> = c.iter().copied().collect();
        if sa.iter().any(|v| sb.contains(v) || sc.contains(v))
            || sb.iter().any(|v| sc.contains(v))
        {
            return Err(Error::invalid(
                "d_separated requires pairwise disjoint sets".to_string(),
            ));
        }
        if sa.is_empty() || sb.is_empty() {
            return Ok(true);
        }

        // Restrict to the ancestral closure of a ∪ b ∪ c, moralize, drop c,
        // and test undirected connectivity between a and b.
        let mut seed: Vec<usize> = Vec::new();
        seed.extend(&sa);
        seed.extend(&sb);
        seed.extend(&sc);
        let anc = self.ancestors(&seed)?;

        let n = self.node_count();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for e in &self.edges {
            if anc.contains(&e.from) && anc.contains(&e.to) {
                adj[e.from].insert(e.to);
                adj[e.to].insert(e.from);
            }
        }
        for &v in &anc {
            let ps: Vec<usize> = self
                .parents[v]
                .iter()
                .copied()
                .filter(|p| anc.contains(p))
                .collect();
            for i in 0..ps.len() {
                for j in (i + 1)..ps.len() {
                    adj[ps[i]].insert(ps[j]);
                    adj[ps[j]].insert(ps[i]);
                }
            }
        }

        let mut visited = vec![false; n];
        let mut stack: Vec<usize> = sa.iter().copied().collect();
        while let Some(v) = stack.pop() {
            if visited[v] || sc.contains(&v) {
                continue;
            }
            visited[v] = true;
            if sb.contains(&v) {
                return Ok(false);
            }
            for &w in &adj[v] {
                if !visited[w] && !sc.contains(&w) {
                    stack.push(w);
                }
            }
        }
        Ok(true)
    }
}

/// A DAG together with the selection response nodes appended by [`augment`].
/// The responses are the last `selection_count()` nodes of [`graph`](Self::graph);
/// removing them recovers [`base`](Self::base) exactly.
#[derive(Debug, Clone)]
pub struct AugmentedGraph {
    base: Dag,
    graph: Dag,
    response_indices: Vec<usize>,
}

impl AugmentedGraph {
    pub fn base(&self) -> &Dag {
        &self.base
    }

    /// The augmented graph (base nodes first, then one response per condition).
    pub fn graph(&self) -> &Dag {
        &self.graph
    }

    pub fn selection_count(&self) -> usize {
        self.response_indices.len()
    }

    /// Indices of the response nodes within [`graph`](Self::graph).
    pub fn response_indices(&self) -> &[usize] {
        &self.response_indices
    }
}

/// Builds the selection-augmented graph: one response node per condition,
/// with an edge from every targeted variable. An empty configuration wraps
/// the base graph unchanged (`k = 0`).
pub fn augment(g: &Dag, config: &SelectionConfig) -> Result<AugmentedGraph> {
    let mut nodes: Vec<(String, NodeRole)> = g
        .nodes()
        .iter()
        .map(|n| (n.name.clone(), n.role))
        .collect();
    let mut edges: Vec<(usize, usize, f64)> = g
        .edges()
        .iter()
        .map(|e| (e.from, e.to, e.weight))
        .collect();
    let mut response_indices = Vec::new();
    let names = crate::model::response_names(&g.names(), config.len());

    for (i, cond) in config.conditions().iter().enumerate() {
        cond.validate()
            .map_err(|e| Error::config(format!("selections[{i}]: {e}")))?;
        let y = nodes.len();
        nodes.push((names[i].clone(), NodeRole::SelectionResponse));
        for (target, &coeff) in cond.targets().iter().zip(cond.coeffs()) {
            let v = g.index_of(target).ok_or_else(|| {
                Error::config(format!("selections[{i}]: unknown variable '{target}'"))
            })?;
            edges.push((v, y, coeff));
        }
        response_indices.push(y);
    }

    let graph = Dag::new(nodes, edges)?;
    Ok(AugmentedGraph {
        base: g.clone(),
        graph,
        response_indices,
    })
}

// ---------------------------------------------------------------------------
// Graph JSON format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub(crate) struct GraphNodeJson {
    name: String,
    role: NodeRole,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct GraphEdgeJson {
    from: String,
    to: String,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct GraphJson {
    pub(crate) nodes: Vec<GraphNodeJson>,
    pub(crate) edges: Vec<GraphEdgeJson>,
}

impl GraphJson {
    pub(crate) fn into_dag(self, src: &str) -> Result<Dag> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|m| m.name == n.name) {
                return Err(Error::parse_at(
                    line_of_nth_occurrence(src, &format!("\"{}\"", n.name), 1),
                    format!("duplicate node name '{}'", n.name),
                ));
            }
            nodes.push((n.name.clone(), n.role));
        }
        let mut edges = Vec::with_capacity(self.edges.len());
        for (k, e) in self.edges.iter().enumerate() {
            let find = |name: &str| {
                nodes.iter().position(|(n, _)| n == name).ok_or_else(|| {
                    Error::parse_at(
                        line_of_nth_occurrence(src, "\"from\"", k),
                        format!("edges[{k}]: unknown node '{name}'"),
                    )
                })
            };
            edges.push((find(&e.from)?, find(&e.to)?, e.weight));
        }
        Dag::new(nodes, edges).map_err(|err| match err {
            Error::InvalidInput(msg) if msg.contains("cycle") => Error::parse_at(
                line_of_nth_occurrence(src, "\"edges\"", 0),
                format!("graph file rejected: {msg}"),
            ),
            other => other,
        })
    }

    pub(crate) fn from_dag(g: &Dag) -> Self {
        GraphJson {
            nodes: g
                .nodes()
                .iter()
                .map(|n| GraphNodeJson {
                    name: n.name.clone(),
                    role: n.role,
                })
                .collect(),
            edges: g
                .edges()
                .iter()
                .map(|e| GraphEdgeJson {
                    from: g.name(e.from).to_string(),
                    to: g.name(e.to).to_string(),
                    weight: e.weight,
                })
                .collect(),
        }
    }
}

/// Line (1-based) of the `n`-th occurrence (0-based) of `needle` in `src`.
pub(crate) fn line_of_nth_occurrence(src: &str, needle: &str, n: usize) -> Option<usize> {
    let mut from = 0;
    let mut hits = 0;
    while let Some(pos) = src[from..].find(needle) {
        let at = from + pos;
        if hits == n {
            return Some(src[..at].bytes().filter(|&b| b == b'\n').count() + 1);
        }
        hits += 1;
        from = at + needle.len();
    }
    None
}

/// Parses the graph JSON format
/// `{"nodes":[{"name","role"}],"edges":[{"from","to","weight"}]}`.
pub fn graph_from_json(src: &str) -> Result<Dag> {
    let parsed: GraphJson = serde_json::from_str(src)
        .map_err(|e| Error::parse_at(Some(e.line()), format!("graph JSON: {e}")))?;
    parsed.into_dag(src)
}

pub fn graph_to_json(g: &Dag) -> String {
    serde_json::to_string_pretty(&GraphJson::from_dag(g)).expect("graph serialization")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdmissibleSet, NoiseSpec, SelectionCondition};

    fn chain3() -> Dag {
        Dag::new(
            vec![
                ("X1".into(), NodeRole::Observed),
                ("X2".into(), NodeRole::Observed),
                ("X3".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 1.0), (1, 2, 1.0)],
        )
        .unwrap()
    }

    /// One latent driving four observed children, as in the Tetrad structure.
    pub(crate) fn tetrad() -> Dag {
        Dag::new(
            vec![
                ("L".into(), NodeRole::Latent),
                ("X1".into(), NodeRole::Observed),
                ("X2".into(), NodeRole::Observed),
                ("X3".into(), NodeRole::Observed),
                ("X4".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 0.8), (0, 2, -1.1), (0, 3, 1.3), (0, 4, 0.9)],
        )
        .unwrap()
    }

    #[test]
    fn ancestors_chain_and_empty() {
        let g = chain3();
        let an = g.ancestors(&[2]).unwrap();
        assert_eq!(an, BTreeSet::from([0, 1, 2]));
        assert!(g.ancestors(&[]).unwrap().is_empty());
    }

    #[test]
    fn ancestors_include_latent_parent() {
        let g = tetrad();
        let an = g.ancestors(&[1]).unwrap();
        assert_eq!(an, BTreeSet::from([0, 1]));
    }

    #[test]
    fn ancestors_monotone() {
        let g = tetrad();
        let small = g.ancestors(&[1]).unwrap();
        let large = g.ancestors(&[1, 4]).unwrap();
        assert!(small.is_subset(&large));
    }

    #[test]
    fn remove_nodes_tetrad_isolates() {
        let g = tetrad();
        let h = g.remove_nodes(&[0]).unwrap();
        assert_eq!(h.node_count(), 4);
        assert!(h.edges().is_empty());
        assert_eq!(h.name(0), "X1");
    }

    #[test]
    fn remove_nodes_identity_and_chain() {
        let g = chain3();
        assert_eq!(g.remove_nodes(&[]).unwrap(), g);
        let h = g.remove_nodes(&[1]).unwrap();
        assert_eq!(h.node_count(), 2);
        assert!(h.edges().is_empty());
    }

    #[test]
    fn dsep_chain_and_collider() {
        let g = chain3();
        assert!(g.d_separated(&[0], &[2], &[1]).unwrap());
        assert!(!g.d_separated(&[0], &[2], &[]).unwrap());

        let collider = Dag::new(
            vec![
                ("X1".into(), NodeRole::Observed),
                ("Y".into(), NodeRole::Observed),
                ("X3".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 1.0), (2, 1, 1.0)],
        )
        .unwrap();
        assert!(collider.d_separated(&[0], &[2], &[]).unwrap());
        assert!(!collider.d_separated(&[0], &[2], &[1]).unwrap());
    }

    #[test]
    fn dsep_two_colliders_with_shared_latent() {
        // X1 -> X3 <- L -> X4 <- X2
        let g = Dag::new(
            vec![
                ("X1".into(), NodeRole::Observed),
                ("X2".into(), NodeRole::Observed),
                ("X3".into(), NodeRole::Observed),
                ("X4".into(), NodeRole::Observed),
                ("L".into(), NodeRole::Latent),
            ],
            vec![(0, 2, 1.0), (4, 2, 1.0), (4, 3, 1.0), (1, 3, 1.0)],
        )
        .unwrap();
        assert!(g.d_separated(&[0], &[3], &[]).unwrap());
        assert!(!g.d_separated(&[0], &[3], &[2]).unwrap());
    }

    #[test]
    fn dsep_rejects_overlap() {
        let g = chain3();
        assert!(g.d_separated(&[0], &[0], &[]).is_err());
        assert!(g.d_separated(&[0], &[2], &[2]).is_err());
    }

    #[test]
    fn cycle_rejected() {
        let err = Dag::new(
            vec![
                ("a".into(), NodeRole::Observed),
                ("b".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 1.0), (1, 0, 1.0)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("cycle"));
    }

    #[test]
    fn response_with_children_rejected() {
        let err = Dag::new(
            vec![
                ("y".into(), NodeRole::SelectionResponse),
                ("x".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 1.0)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("outgoing"));
    }

    #[test]
    fn augment_adds_responses_and_roundtrips() {
        let g = Dag::new(
            (1..=4)
                .map(|i| (format!("X{i}"), NodeRole::Observed))
                .collect(),
            vec![],
        )
        .unwrap();
        let cond = SelectionCondition::new(
            vec!["X1".into(), "X2".into(), "X3".into(), "X4".into()],
            vec![1.0, -2.0, 3.0, -4.0],
            NoiseSpec::Constant,
            AdmissibleSet::interval(3.0, 10.0).unwrap(),
        );
        let aug = augment(&g, &SelectionConfig::new(vec![cond])).unwrap();
        assert_eq!(aug.selection_count(), 1);
        assert_eq!(aug.graph().node_count(), 5);
        assert_eq!(aug.graph().parents_of(4), &[0, 1, 2, 3]);
        // Stripping the responses recovers the base graph.
        let stripped = aug.graph().remove_nodes(aug.response_indices()).unwrap();
        assert_eq!(&stripped, aug.base());

        let empty = augment(&g, &SelectionConfig::empty()).unwrap();
        assert_eq!(empty.selection_count(), 0);
        assert_eq!(empty.graph(), &g);
    }

    #[test]
    fn augment_rejects_bad_conditions() {
        let g = chain3();
        let zero = SelectionCondition::new(
            vec!["X1".into()],
            vec![0.0],
            NoiseSpec::Constant,
            AdmissibleSet::interval(0.0, 1.0).unwrap(),
        );
        assert!(augment(&g, &SelectionConfig::new(vec![zero])).is_err());

        let unknown = SelectionCondition::new(
            vec!["nope".into()],
            vec![1.0],
            NoiseSpec::Constant,
            AdmissibleSet::interval(0.0, 1.0).unwrap(),
        );
        assert!(augment(&g, &SelectionConfig::new(vec![unknown])).is_err());

        let mismatched = SelectionCondition::new(
            vec!["X1".into(), "X2".into()],
            vec![1.0],
            NoiseSpec::Constant,
            AdmissibleSet::interval(0.0, 1.0).unwrap(),
        );
        assert!(augment(&g, &SelectionConfig::new(vec![mismatched])).is_err());
    }

    #[test]
    fn graph_json_roundtrip_and_errors() {
        let g = tetrad();
        let json = graph_to_json(&g);
        let back = graph_from_json(&json).unwrap();
        assert_eq!(back, g);

        let dup = r#"{
            "nodes": [
                {"name": "a", "role": "observed"},
                {"name": "a", "role": "observed"}
            ],
            "edges": []
        }"#;
        let err = graph_from_json(dup).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate node name 'a'"), "{msg}");
        assert!(msg.starts_with("line 4:"), "{msg}");

        let cyc = r#"{
            "nodes": [
                {"name": "a", "role": "observed"},
                {"name": "b", "role": "observed"}
            ],
            "edges": [
                {"from": "a", "to": "b", "weight": 1.0},
                {"from": "b", "to": "a", "weight": 1.0}
            ]
        }"#;
        let err = graph_from_json(cyc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cycle"), "{msg}");
        assert!(msg.starts_with("line 6:"), "{msg}");
    }
}
