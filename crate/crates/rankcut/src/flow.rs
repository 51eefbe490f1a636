//! Unit-capacity flow networks with node splitting, and a BFS augmenting-path
//! max-flow with min-cut extraction.
//!
//! The only finite-capacity arcs are the per-node splitting arcs, so a
//! minimum s-t cut is always a set of split nodes. [`build_flow_network`]
//! lives in [`crate::trek`]; this module is the generic machinery.

/// Which copy of the original graph a cut node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// The ancestor-walking copy; cutting here puts the node in C.
    Ancestor,
    /// The descendant-walking copy; cutting here puts the node in D.
    Descendant,
}

/// A original-graph node that a saturated splitting arc maps back to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutCandidate {
    pub node: usize,
    pub layer: Layer,
}

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: u32,
}

const FREE: u32 = u32::MAX / 2;

/// A directed flow network. Arcs are stored in dual pairs (2e, 2e+1) for the
/// residual graph.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    adj: Vec<Vec<usize>>,
    arcs: Vec<Arc>,
    source: usize,
    sink: usize,
    /// arc id -> original node, for unit splitting arcs only.
    candidates: Vec<(usize, CutCandidate)>,
}

impl FlowNetwork {
    pub fn with_nodes(n: usize, source: usize, sink: usize) -> Self {
        assert!(source < n && sink < n && source != sink);
        FlowNetwork {
            adj: vec![Vec::new(); n],
            arcs: Vec::new(),
            source,
            sink,
            candidates: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    fn push_arc(&mut self, from: usize, to: usize, cap: u32) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Arc { to, cap });
        self.arcs.push(Arc { to: from, cap: 0 });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    /// Capacity-1 splitting arc, optionally tagged with the original node it
    /// stands for so it can be reported in a minimum cut.
    pub fn add_unit_arc(&mut self, from: usize, to: usize, candidate: Option<CutCandidate>) {
        let id = self.push_arc(from, to, 1);
        if let Some(c) = candidate {
            self.candidates.push((id, c));
        }
    }

    /// Effectively unbounded arc; never part of a minimum cut.
    pub fn add_free_arc(&mut self, from: usize, to: usize) {
        self.push_arc(from, to, FREE);
    }
}

#[derive(Debug, Clone)]
pub struct MaxFlowResult {
    pub value: usize,
    /// Tagged unit arcs crossing the minimum cut (source side to sink side).
    pub cut: Vec<CutCandidate>,
}

/// Edmonds-Karp: BFS augmenting paths on the residual graph. With unit
/// splitting arcs the flow value is bounded by the node count, so this is
/// O(V * E) overall. The reported cut is read off the final residual
/// reachability from the source.
pub fn max_flow(net: &FlowNetwork) -> MaxFlowResult {
    let n = net.node_count();
    let mut residual: Vec<u32> = net.arcs.iter().map(|a| a.cap).collect();
    let mut value = 0usize;
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut queue: Vec<usize> = Vec::with_capacity(n);

    loop {
        pred.fill(None);
        queue.clear();
        queue.push(net.source);
        let mut head = 0;
        let mut reached = false;
        'bfs: while head < queue.len() {
            let v = queue[head];
            head += 1;
            for &arc_id in &net.adj[v] {
                if residual[arc_id] == 0 {
                    continue;
                }
                let to = net.arcs[arc_id].to;
                if to != net.source && pred[to].is_none() {
                    pred[to] = Some(arc_id);
                    if to == net.sink {
                        reached = true;
                        break 'bfs;
                    }
                    queue.push(to);
                }
            }
        }
        if !reached {
            break;
        }
        // Unit bottlenecks: augment by exactly one.
        let mut v = net.sink;
        while v != net.source {
            let arc_id = pred[v].expect("path arc");
            residual[arc_id] -= 1;
            residual[arc_id ^ 1] += 1;
            v = net.arcs[arc_id ^ 1].to;
        }
        value += 1;
    }

    // Source-side reachability in the final residual graph.
    let mut reachable = vec![false; n];
    reachable[net.source] = true;
    queue.clear();
    queue.push(net.source);
    let mut head = 0;
    while head < queue.len() {
        let v = queue[head];
        head += 1;
        for &arc_id in &net.adj[v] {
            let to = net.arcs[arc_id].to;
            if residual[arc_id] > 0 && !reachable[to] {
                reachable[to] = true;
                queue.push(to);
            }
        }
    }
    let cut = net
        .candidates
        .iter()
        .filter(|(arc_id, _)| {
            let from = net.arcs[*arc_id ^ 1].to;
            let to = net.arcs[*arc_id].to;
            reachable[from] && !reachable[to]
        })
        .map(|&(_, c)| c)
        .collect();

    MaxFlowResult { value, cut }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Split every internal vertex of a digraph and return the network with
    /// unit vertex capacities; node v maps to (2v, 2v+1) = (in, out).
    fn vertex_capacity_network(n: usize, edges: &[(usize, usize)], s: usize, t: usize) -> FlowNetwork {
        let mut net = FlowNetwork::with_nodes(2 * n, 2 * s + 1, 2 * t);
        for v in 0..n {
            if v != s && v != t {
                net.add_unit_arc(
                    2 * v,
                    2 * v + 1,
                    Some(CutCandidate {
                        node: v,
                        layer: Layer::Ancestor,
                    }),
                );
            }
        }
        for &(u, v) in edges {
            net.add_free_arc(2 * u + 1, 2 * v);
        }
        net
    }

    /// Maximum number of internally-vertex-disjoint s-t paths by exhaustive
    /// packing of enumerated simple paths.
    fn brute_force_disjoint_paths(n: usize, edges: &[(usize, usize)], s: usize, t: usize) -> usize {
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            adj[u].push(v);
        }
        let mut paths: Vec<u64> = Vec::new();
        fn dfs(v: usize, used: u64, adj: &[Vec<usize>], t: usize, paths: &mut Vec<u64>) {
            for &w in &adj[v] {
                if w == t {
                    paths.push(used);
                } else if used & (1 << w) == 0 {
                    dfs(w, used | (1 << w), adj, t, paths);
                }
            }
        }
        dfs(s, 0, &adj, t, &mut paths);
        // s itself is not an internal vertex; masks only track internals.
        fn pack(paths: &[u64], used: u64, from: usize) -> usize {
            let mut best = 0;
            for i in from..paths.len() {
                if paths[i] & used == 0 {
                    best = best.max(1 + pack(paths, used | paths[i], i + 1));
                }
            }
            best
        }
        pack(&paths, 0, 0)
    }

    #[test]
    fn two_disjoint_paths() {
        // s -> a -> t and s -> b -> t
        let edges = [(0, 1), (1, 3), (0, 2), (2, 3)];
        let net = vertex_capacity_network(4, &edges, 0, 3);
        assert_eq!(max_flow(&net).value, 2);
    }

    #[test]
    fn single_bottleneck_vertex() {
        // Everything flows through node 1.
        let edges = [(0, 1), (1, 2), (1, 3), (2, 4), (3, 4)];
        let net = vertex_capacity_network(5, &edges, 0, 4);
        let result = max_flow(&net);
        assert_eq!(result.value, 1);
        assert_eq!(result.cut.len(), 1);
        assert_eq!(result.cut[0].node, 1);
    }

    #[test]
    fn random_networks_match_path_packing_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..60 {
            let n = rng.gen_range(4..=9);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    // A direct source-sink edge has no internal vertex to
                    // cut, so the vertex-capacity question is ill-posed.
                    if (u, v) == (0, n - 1) {
                        continue;
                    }
                    if rng.gen_bool(0.35) {
                        edges.push((u, v));
                    }
                }
            }
            let net = vertex_capacity_network(n, &edges, 0, n - 1);
            let expected = brute_force_disjoint_paths(n, &edges, 0, n - 1);
            assert_eq!(max_flow(&net).value, expected, "n={n} edges={edges:?}");
        }
    }
}
