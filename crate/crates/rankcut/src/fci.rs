//! FCI over pluggable conditional-independence oracles, producing PAGs with
//! Zhang's complete orientation rule set (R1-R10, including the
//! selection-bias rules), plus the two oracles used throughout: exact
//! d-separation in a selection-augmented graph, and the rank-based oracle
//! that reads conditional independence among latent variables off covariance
//! ranks of their measurements.

use std::collections::{BTreeMap, HashMap};

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::graph::AugmentedGraph;
use crate::model::CovarianceMatrix;
use crate::pag::{Mark, Pag};
use crate::rank::{estimate_rank, svd_rank_with_scale, RankTestSpec};
use crate::sample::DataMatrix;

/// A conditional-independence oracle: is A independent of B given C?
/// Implementations must be symmetric in A and B and safe for concurrent
/// queries.
pub trait CiOracle {
    fn independent(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<bool>;
}

/// Exact oracle: d-separation in an augmented graph, always conditioning on
/// every selection response. Index arguments refer to positions in the
/// visible variable list.
pub struct DsepOracle<'a> {
    graph: &'a crate::graph::Dag,
    visible: Vec<usize>,
    conditioned: Vec<usize>,
}

impl<'a> DsepOracle<'a> {
    /// Oracle over a chosen subset of variables (by name) of the augmented
    /// graph; everything else is latent or conditioned.
    pub fn new(aug: &'a AugmentedGraph, vars: &[String]) -> Result<Self> {
        let visible = aug.graph().indices_of(vars)?;
        for (&v, name) in visible.iter().zip(vars) {
            if aug.response_indices().contains(&v) {
                return Err(Error::invalid(format!(
                    "'{name}' is a selection response, not a queryable variable"
                )));
            }
        }
        Ok(DsepOracle {
            graph: aug.graph(),
            visible,
            conditioned: aug.response_indices().to_vec(),
        })
    }

    pub fn visible_names(&self) -> Vec<String> {
        self.visible
            .iter()
            .map(|&v| self.graph.name(v).to_string())
            .collect()
    }
}

/// Ground-truth CI oracle for the selected population: d-separation given
/// C plus all response nodes.
pub fn dsep_ci_oracle<'a>(aug: &'a AugmentedGraph, vars: &[String]) -> Result<DsepOracle<'a>> {
    DsepOracle::new(aug, vars)
}

impl CiOracle for DsepOracle<'_> {
    fn independent(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<bool> {
        let map = |set: &[usize]| -> Result<Vec<usize>> {
            set.iter()
                .map(|&v| {
                    self.visible.get(v).copied().ok_or_else(|| {
                        Error::invalid(format!("oracle variable index {v} out of range"))
                    })
                })
                .collect()
        };
        let mut cond = map(c)?;
        cond.extend(&self.conditioned);
        self.graph.d_separated(&map(a)?, &map(b)?, &cond)
    }
}

/// Assignment of observed measurements to latent variables in a one-factor
/// model: every latent has at least two pure measurement children, and the
/// measurement lists are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementClustering {
    entries: Vec<(String, Vec<String>)>,
}

impl MeasurementClustering {
    pub fn new(map: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let entries: Vec<(String, Vec<String>)> = map.into_iter().collect();
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (latent, measurements) in &entries {
            if measurements.len() < 2 {
                return Err(Error::invalid(format!(
                    "latent '{latent}' has {} measurements; at least 2 required",
                    measurements.len()
                )));
            }
            for m in measurements {
                if let Some(other) = seen.insert(m, latent) {
                    return Err(Error::invalid(format!(
                        "measurement '{m}' assigned to both '{other}' and '{latent}'"
                    )));
                }
            }
        }
        Ok(MeasurementClustering { entries })
    }

    /// Latent names in the deterministic (sorted) order used everywhere.
    pub fn latents(&self) -> Vec<String> {
        self.entries.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn latent_count(&self) -> usize {
        self.entries.len()
    }

    pub fn measurements_of(&self, latent_pos: usize) -> &[String] {
        &self.entries[latent_pos].1
    }

    pub fn position_of(&self, latent: &str) -> Option<usize> {
        self.entries.iter().position(|(l, _)| l == latent)
    }

    /// Checks purity against a graph: each measurement is a child of exactly
    /// its latent and has no other parents.
    pub fn validate_against(&self, g: &crate::graph::Dag) -> Result<()> {
        for (latent, measurements) in &self.entries {
            let l = g
                .index_of(latent)
                .ok_or_else(|| Error::invalid(format!("unknown latent '{latent}'")))?;
            for m in measurements {
                let v = g
                    .index_of(m)
                    .ok_or_else(|| Error::invalid(format!("unknown measurement '{m}'")))?;
                if g.parents_of(v) != [l] {
                    return Err(Error::invalid(format!(
                        "measurement '{m}' is not a pure child of '{latent}'"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(src)
            .map_err(|e| Error::parse_at(Some(e.line()), format!("clustering JSON: {e}")))?;
        Self::new(map)
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, &Vec<String>> = self
            .entries
            .iter()
            .map(|(l, ms)| (l.as_str(), ms))
            .collect();
        serde_json::to_string_pretty(&map).expect("clustering serialization")
    }
}

/// Splits each conditioning latent's measurements into two nonempty halves
/// (first half rounded up, then the rest), pooled across the set. Both sides
/// end up with at least |c| measurements.
pub fn partition_measurements(
    clustering: &MeasurementClustering,
    c: &[usize],
) -> Result<(Vec<String>, Vec<String>)> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &latent in c {
        if latent >= clustering.latent_count() {
            return Err(Error::invalid(format!(
                "latent index {latent} out of range ({} latents)",
                clustering.latent_count()
            )));
        }
        let ms = clustering.measurements_of(latent);
        let split = ms.len().div_ceil(2);
        first.extend(ms[..split].iter().cloned());
        second.extend(ms[split..].iter().cloned());
    }
    Ok((first, second))
}

/// Where the rank oracle reads covariances from: finite samples or an exact
/// (population or closed-form post-selection) covariance matrix.
pub enum RankSource<'a> {
    Data(&'a DataMatrix),
    Population(&'a CovarianceMatrix),
}

/// Rank-based CI oracle over latent variables: A is declared independent of
/// B given C iff the covariance between A's measurements pooled with one
/// half of C's and B's measurements pooled with the other half has rank |C|.
/// An estimated rank below |C| is a genericity violation: logged and treated
/// as independence.
pub struct RankCiOracle<'a> {
    source: RankSource<'a>,
    clustering: &'a MeasurementClustering,
    spec: RankTestSpec,
}

impl<'a> RankCiOracle<'a> {
    pub fn new(
        source: RankSource<'a>,
        clustering: &'a MeasurementClustering,
        spec: RankTestSpec,
    ) -> Self {
        RankCiOracle {
            source,
            clustering,
            spec,
        }
    }
}

impl CiOracle for RankCiOracle<'_> {
    fn independent(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<bool> {
        let mut side_a: Vec<String> = Vec::new();
        let mut side_b: Vec<String> = Vec::new();
        for &l in a {
            side_a.extend(self.clustering.measurements_of(l).iter().cloned());
        }
        for &l in b {
            side_b.extend(self.clustering.measurements_of(l).iter().cloned());
        }
        let (c1, c2) = partition_measurements(self.clustering, c)?;
        side_a.extend(c1);
        side_b.extend(c2);

        let rank = match &self.source {
            RankSource::Data(data) => {
                let ia = data.indices_of(&side_a)?;
                let ib = data.indices_of(&side_b)?;
                estimate_rank(data, &ia, &ib, &self.spec)?.rank
            }
            RankSource::Population(cov) => {
                let ia = cov.indices_of(&side_a)?;
                let ib = cov.indices_of(&side_b)?;
                let scale = cov.values().diagonal().amax();
                svd_rank_with_scale(&cov.submatrix(&ia, &ib), self.spec.rel_tol, scale)
            }
        };
        if rank < c.len() {
            log::warn!(
                "genericity violation: rank {rank} below |C| = {} for query ({a:?}, {b:?} | {c:?}); \
                 treating as independent",
                c.len()
            );
        }
        Ok(rank <= c.len())
    }
}

/// Options for the FCI run.
#[derive(Debug, Clone, Copy)]
pub struct FciOptions {
    /// Cap on conditioning-set size in both search stages; `None` = unbounded.
    pub max_cond_size: Option<usize>,
    /// Run the possible-d-sep pruning stage (required for correctness with
    /// latent variables; can be disabled for speed on known-simple inputs).
    pub use_possible_dsep: bool,
}

impl Default for FciOptions {
    fn default() -> Self {
        FciOptions {
            max_cond_size: None,
            use_possible_dsep: true,
        }
    }
}

type SepSets = HashMap<(usize, usize), Vec<usize>>;

fn sep_key(x: usize, y: usize) -> (usize, usize) {
    (x.min(y), x.max(y))
}

struct FciState<'a> {
    pag: Pag,
    sepsets: SepSets,
    oracle: &'a dyn CiOracle,
}

impl<'a> FciState<'a> {
    fn ask(&self, x: usize, y: usize, s: &[usize]) -> Result<bool> {
        self.oracle.independent(&[x], &[y], s).map_err(|e| {
            Error::Numerical(format!(
                "CI oracle failed on query ({x} _||_ {y} | {s:?}): {e}"
            ))
        })
    }

    fn n(&self) -> usize {
        self.pag.var_count()
    }

    fn remove_edge(&mut self, x: usize, y: usize, sepset: Vec<usize>) {
        self.pag.set_mark(x, y, Mark::None);
        self.pag.set_mark(y, x, Mark::None);
        self.sepsets.insert(sep_key(x, y), sepset);
    }

    /// Skeleton search: for growing conditioning-set sizes, test each
    /// adjacent pair against subsets of its current adjacencies.
    fn skeleton(&mut self, max_cond: Option<usize>) -> Result<()> {
        let n = self.n();
        let mut depth = 0usize;
        loop {
            if let Some(cap) = max_cond {
                if depth > cap {
                    break;
                }
            }
            let mut candidates_left = false;
            for x in 0..n {
                for y in 0..n {
                    if x == y || !self.pag.adjacent(x, y) {
                        continue;
                    }
                    let adj: Vec<usize> = self
                        .pag
                        .neighbors(x)
                        .into_iter()
                        .filter(|&w| w != y)
                        .collect();
                    if adj.len() < depth {
                        continue;
                    }
                    candidates_left = true;
                    let mut separated = None;
                    for s in adj.iter().copied().combinations(depth) {
                        if self.ask(x, y, &s)? {
                            separated = Some(s);
                            break;
                        }
                    }
                    if let Some(s) = separated {
                        self.remove_edge(x, y, s);
                    }
                }
            }
            if !candidates_left {
                break;
            }
            depth += 1;
        }
        Ok(())
    }

    /// Unshielded colliders from the recorded separating sets.
    fn orient_v_structures(&mut self) {
        let n = self.n();
        for j in 0..n {
            for i in 0..n {
                for k in (i + 1)..n {
                    if i == j || k == j {
                        continue;
                    }
                    if !self.pag.adjacent(i, j) || !self.pag.adjacent(k, j) || self.pag.adjacent(i, k)
                    {
                        continue;
                    }
                    let in_sepset = self
                        .sepsets
                        .get(&sep_key(i, k))
                        .map(|s| s.contains(&j))
                        .unwrap_or(true);
                    if !in_sepset {
                        self.pag.set_mark(i, j, Mark::Arrow);
                        self.pag.set_mark(k, j, Mark::Arrow);
                    }
                }
            }
        }
    }

    /// Possible-d-sep set of x: nodes reachable by a path on which every
    /// inner node is either a collider or part of a triangle.
    fn possible_dsep(&self, x: usize) -> Vec<usize> {
        let n = self.n();
        let mut seen_state = vec![false; n * n];
        let mut reached = vec![false; n];
        let mut queue: Vec<(usize, usize)> = Vec::new();
        for w in self.pag.neighbors(x) {
            queue.push((x, w));
            seen_state[x * n + w] = true;
            reached[w] = true;
        }
        let mut head = 0;
        while head < queue.len() {
            let (prev, cur) = queue[head];
            head += 1;
            for next in self.pag.neighbors(cur) {
                if next == prev || next == x || seen_state[cur * n + next] {
                    continue;
                }
                let collider = self.pag.mark(prev, cur) == Mark::Arrow
                    && self.pag.mark(next, cur) == Mark::Arrow;
                let triangle = self.pag.adjacent(prev, next);
                if collider || triangle {
                    seen_state[cur * n + next] = true;
                    reached[next] = true;
                    queue.push((cur, next));
                }
            }
        }
        (0..n).filter(|&v| reached[v]).collect()
    }

    /// Second pruning pass over possible-d-sep sets, then a clean restart of
    /// all orientations.
    fn possible_dsep_stage(&mut self, max_cond: Option<usize>) -> Result<()> {
        self.orient_v_structures();
        let n = self.n();
        for x in 0..n {
            for y in 0..n {
                if x == y || !self.pag.adjacent(x, y) {
                    continue;
                }
                let pds: Vec<usize> = self
                    .possible_dsep(x)
                    .into_iter()
                    .filter(|&v| v != x && v != y)
                    .collect();
                let cap = max_cond.unwrap_or(pds.len()).min(pds.len());
                let mut separated = None;
                'search: for size in 1..=cap {
                    for s in pds.iter().copied().combinations(size) {
                        if self.ask(x, y, &s)? {
                            separated = Some(s);
                            break 'search;
                        }
                    }
                }
                if let Some(s) = separated {
                    self.remove_edge(x, y, s);
                }
            }
        }
        // Reset every surviving edge to circles; orientation restarts from
        // the updated skeleton and separating sets.
        for i in 0..n {
            for j in 0..n {
                if i != j && self.pag.adjacent(i, j) {
                    self.pag.set_mark(i, j, Mark::Circle);
                }
            }
        }
        Ok(())
    }

    /// Sets a mark only if that end is still a circle.
    fn orient(&mut self, i: usize, j: usize, mark: Mark) -> bool {
        if self.pag.adjacent(i, j) && self.pag.mark(i, j) == Mark::Circle {
            self.pag.set_mark(i, j, mark);
            true
        } else {
            false
        }
    }

    fn is_parent(&self, a: usize, c: usize) -> bool {
        self.pag.adjacent(a, c)
            && self.pag.mark(a, c) == Mark::Arrow
            && self.pag.mark(c, a) == Mark::Tail
    }

    /// R1: a*->b o-* c with a, c nonadjacent orients b -> c.
    fn rule_r1(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for a in 0..n {
            for b in 0..n {
                if a == b || !self.pag.adjacent(a, b) || self.pag.mark(a, b) != Mark::Arrow {
                    continue;
                }
                for c in 0..n {
                    if c == a || c == b || !self.pag.adjacent(b, c) || self.pag.adjacent(a, c) {
                        continue;
                    }
                    if self.pag.mark(c, b) == Mark::Circle {
                        self.pag.set_mark(c, b, Mark::Tail);
                        self.orient(b, c, Mark::Arrow);
                        changed = true;
                    }
                }
            }
        }
        changed
    }

    /// R2: a -> b *-> c or a *-> b -> c, with a *-o c, orients a *-> c.
    fn rule_r2(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for a in 0..n {
            for c in 0..n {
                if a == c || !self.pag.adjacent(a, c) || self.pag.mark(a, c) != Mark::Circle {
                    continue;
                }
                for b in 0..n {
                    if b == a || b == c || !self.pag.adjacent(a, b) || !self.pag.adjacent(b, c) {
                        continue;
                    }
                    let case1 = self.pag.mark(b, a) == Mark::Tail
                        && self.pag.mark(a, b) == Mark::Arrow
                        && self.pag.mark(b, c) == Mark::Arrow;
                    let case2 = self.pag.mark(a, b) == Mark::Arrow
                        && self.pag.mark(c, b) == Mark::Tail
                        && self.pag.mark(b, c) == Mark::Arrow;
                    if case1 || case2 {
                        changed |= self.orient(a, c, Mark::Arrow);
                        break;
                    }
                }
            }
        }
        changed
    }

    /// R3: a *-> b <-* c, a *-o d o-* c, a, c nonadjacent, d *-o b orients
    /// d *-> b.
    fn rule_r3(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for d in 0..n {
            for b in 0..n {
                if d == b || !self.pag.adjacent(d, b) || self.pag.mark(d, b) != Mark::Circle {
                    continue;
                }
                'pairs: for a in 0..n {
                    if a == d || a == b {
                        continue;
                    }
                    for c in 0..n {
                        if c == a || c == d || c == b || self.pag.adjacent(a, c) {
                            continue;
                        }
                        let colliders = self.pag.adjacent(a, b)
                            && self.pag.mark(a, b) == Mark::Arrow
                            && self.pag.adjacent(c, b)
                            && self.pag.mark(c, b) == Mark::Arrow;
                        let circles_at_d = self.pag.adjacent(a, d)
                            && self.pag.mark(a, d) == Mark::Circle
                            && self.pag.adjacent(c, d)
                            && self.pag.mark(c, d) == Mark::Circle;
                        if colliders && circles_at_d {
                            changed |= self.orient(d, b, Mark::Arrow);
                            break 'pairs;
                        }
                    }
                }
            }
        }
        changed
    }

    /// Searches for a discriminating path `<d, .., a, b, c>` and returns d.
    /// Every node between d and b is a collider on the path and a parent of
    /// c; d is not adjacent to c.
    fn find_discriminating_start(&self, a: usize, b: usize, c: usize) -> Option<usize> {
        let n = self.n();
        // Walk leftward from a, which is already a collider from the b side.
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(a, vec![c, b, a])];
        while let Some((cur, path)) = stack.pop() {
            for t in 0..n {
                if path.contains(&t) || !self.pag.adjacent(t, cur) {
                    continue;
                }
                // The path edge must point into the current node.
                if self.pag.mark(t, cur) != Mark::Arrow {
                    continue;
                }
                if !self.pag.adjacent(t, c) {
                    return Some(t);
                }
                // To extend through t, it must be a collider on the path and
                // a parent of c.
                let collider_at_t = self.pag.mark(cur, t) == Mark::Arrow;
                if collider_at_t && self.is_parent(t, c) {
                    let mut next_path = path.clone();
                    next_path.push(t);
                    stack.push((t, next_path));
                }
            }
        }
        None
    }

    /// R4: discriminating path rule.
    fn rule_r4(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for b in 0..n {
            for c in 0..n {
                if b == c || !self.pag.adjacent(b, c) || self.pag.mark(c, b) != Mark::Circle {
                    continue;
                }
                for a in 0..n {
                    if a == b || a == c || !self.pag.adjacent(a, b) {
                        continue;
                    }
                    // a must be a collider from the b side and a parent of c.
                    if self.pag.mark(b, a) != Mark::Arrow || !self.is_parent(a, c) {
                        continue;
                    }
                    if let Some(d) = self.find_discriminating_start(a, b, c) {
                        let in_sepset = self
                            .sepsets
                            .get(&sep_key(d, c))
                            .map(|s| s.contains(&b))
                            .unwrap_or(false);
                        if in_sepset {
                            self.pag.set_mark(c, b, Mark::Tail);
                            if self.pag.mark(b, c) == Mark::Circle {
                                self.pag.set_mark(b, c, Mark::Arrow);
                            }
                        } else {
                            if self.pag.mark(a, b) == Mark::Circle {
                                self.pag.set_mark(a, b, Mark::Arrow);
                            }
                            self.pag.set_mark(c, b, Mark::Arrow);
                            if self.pag.mark(b, c) == Mark::Circle {
                                self.pag.set_mark(b, c, Mark::Arrow);
                            }
                        }
                        changed = true;
                        break;
                    }
                }
            }
        }
        changed
    }

    /// Is the edge u *-* v potentially directed from u to v?
    fn pd_edge(&self, u: usize, v: usize) -> bool {
        self.pag.adjacent(u, v)
            && self.pag.mark(v, u) != Mark::Arrow
            && self.pag.mark(u, v) != Mark::Tail
    }

    /// Uncovered path from `start` through `first` to `target`, with a
    /// per-edge predicate; every consecutive triple is unshielded.
    fn uncovered_path_exists(
        &self,
        start: usize,
        first: usize,
        target: usize,
        edge_ok: &dyn Fn(usize, usize) -> bool,
    ) -> bool {
        if !edge_ok(start, first) {
            return false;
        }
        if first == target {
            return true;
        }
        let mut stack: Vec<Vec<usize>> = vec![vec![start, first]];
        while let Some(path) = stack.pop() {
            let cur = *path.last().unwrap();
            let prev = path[path.len() - 2];
            for t in 0..self.n() {
                if path.contains(&t) && t != target {
                    continue;
                }
                if !edge_ok(cur, t) || self.pag.adjacent(prev, t) || t == cur {
                    continue;
                }
                if t == target {
                    return true;
                }
                let mut next = path.clone();
                next.push(t);
                stack.push(next);
            }
        }
        false
    }

    /// R5: circle paths around o-o edges orient whole cycles as undirected
    /// (tail-tail), marking selection ancestry.
    fn rule_r5(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for a in 0..n {
            for b in (a + 1)..n {
                if !self.pag.adjacent(a, b)
                    || self.pag.mark(a, b) != Mark::Circle
                    || self.pag.mark(b, a) != Mark::Circle
                {
                    continue;
                }
                if let Some(path) = self.find_uncovered_circle_path(a, b) {
                    let orient_undirected = |s: &mut Self, u: usize, v: usize| {
                        if s.pag.mark(u, v) != Mark::Tail {
                            s.pag.set_mark(u, v, Mark::Tail);
                        }
                        if s.pag.mark(v, u) != Mark::Tail {
                            s.pag.set_mark(v, u, Mark::Tail);
                        }
                    };
                    orient_undirected(self, a, b);
                    for w in path.windows(2) {
                        orient_undirected(self, w[0], w[1]);
                    }
                    changed = true;
                }
            }
        }
        changed
    }

    /// Uncovered all-circle path `<a, c, .., d, b>` with a,d nonadjacent and
    /// b,c nonadjacent; returns the full path including endpoints.
    fn find_uncovered_circle_path(&self, a: usize, b: usize) -> Option<Vec<usize>> {
        let n = self.n();
        let circle_edge = |u: usize, v: usize| {
            self.pag.adjacent(u, v)
                && self.pag.mark(u, v) == Mark::Circle
                && self.pag.mark(v, u) == Mark::Circle
        };
        for c in 0..n {
            if c == a || c == b || !circle_edge(a, c) || self.pag.adjacent(b, c) {
                continue;
            }
            let mut stack: Vec<Vec<usize>> = vec![vec![a, c]];
            while let Some(path) = stack.pop() {
                let cur = *path.last().unwrap();
                let prev = path[path.len() - 2];
                for t in 0..n {
                    if t == cur || (path.contains(&t) && t != b) {
                        continue;
                    }
                    if !circle_edge(cur, t) || self.pag.adjacent(prev, t) {
                        continue;
                    }
                    if t == b {
                        // cur plays the role of d: must be nonadjacent to a.
                        if !self.pag.adjacent(a, cur) {
                            let mut full = path.clone();
                            full.push(b);
                            return Some(full);
                        }
                        continue;
                    }
                    let mut next = path.clone();
                    next.push(t);
                    stack.push(next);
                }
            }
        }
        None
    }

    /// R6: a --- b o-* c orients the circle at b to a tail.
    fn rule_r6(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for b in 0..n {
            let has_undirected = (0..n).any(|a| {
                a != b
                    && self.pag.adjacent(a, b)
                    && self.pag.mark(a, b) == Mark::Tail
                    && self.pag.mark(b, a) == Mark::Tail
            });
            if !has_undirected {
                continue;
            }
            for c in 0..n {
                if c != b && self.pag.adjacent(b, c) && self.pag.mark(c, b) == Mark::Circle {
                    self.pag.set_mark(c, b, Mark::Tail);
                    changed = true;
                }
            }
        }
        changed
    }

    /// R7: a -o b o-* c with a, c nonadjacent orients the circle at b to a
    /// tail.
    fn rule_r7(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for b in 0..n {
            for a in 0..n {
                if a == b
                    || !self.pag.adjacent(a, b)
                    || self.pag.mark(b, a) != Mark::Tail
                    || self.pag.mark(a, b) != Mark::Circle
                {
                    continue;
                }
                for c in 0..n {
                    if c == a || c == b || !self.pag.adjacent(b, c) || self.pag.adjacent(a, c) {
                        continue;
                    }
                    if self.pag.mark(c, b) == Mark::Circle {
                        self.pag.set_mark(c, b, Mark::Tail);
                        changed = true;
                    }
                }
            }
        }
        changed
    }

    /// R8: a -> b -> c or a -o b -> c, with a o-> c, orients a -> c.
    fn rule_r8(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for a in 0..n {
            for c in 0..n {
                if a == c
                    || !self.pag.adjacent(a, c)
                    || self.pag.mark(a, c) != Mark::Arrow
                    || self.pag.mark(c, a) != Mark::Circle
                {
                    continue;
                }
                for b in 0..n {
                    if b == a || b == c || !self.pag.adjacent(a, b) || !self.pag.adjacent(b, c) {
                        continue;
                    }
                    let a_to_b = self.pag.mark(b, a) == Mark::Tail
                        && (self.pag.mark(a, b) == Mark::Arrow
                            || self.pag.mark(a, b) == Mark::Circle);
                    let b_to_c = self.is_parent(b, c);
                    if a_to_b && b_to_c {
                        self.pag.set_mark(c, a, Mark::Tail);
                        changed = true;
                        break;
                    }
                }
            }
        }
        changed
    }

    /// R9: a o-> c with an uncovered potentially-directed path
    /// `<a, b, .., c>`, b nonadjacent to c, orients the circle at a to a tail.
    fn rule_r9(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for a in 0..n {
            for c in 0..n {
                if a == c
                    || !self.pag.adjacent(a, c)
                    || self.pag.mark(a, c) != Mark::Arrow
                    || self.pag.mark(c, a) != Mark::Circle
                {
                    continue;
                }
                let pd = |u: usize, v: usize| self.pd_edge(u, v);
                let found = (0..n).any(|b| {
                    b != a
                        && b != c
                        && !self.pag.adjacent(b, c)
                        && self.uncovered_path_exists(a, b, c, &pd)
                });
                if found {
                    self.pag.set_mark(c, a, Mark::Tail);
                    changed = true;
                }
            }
        }
        changed
    }

    /// R10: a o-> c with b -> c <- d and uncovered potentially-directed paths
    /// from a to b and to d whose first edges diverge to nonadjacent
    /// vertices, orients the circle at a to a tail.
    fn rule_r10(&mut self) -> bool {
        let n = self.n();
        let mut changed = false;
        for a in 0..n {
            'next_c: for c in 0..n {
                if a == c
                    || !self.pag.adjacent(a, c)
                    || self.pag.mark(a, c) != Mark::Arrow
                    || self.pag.mark(c, a) != Mark::Circle
                {
                    continue;
                }
                let parents: Vec<usize> = (0..n)
                    .filter(|&b| b != a && b != c && self.is_parent(b, c))
                    .collect();
                let pd = |u: usize, v: usize| self.pd_edge(u, v);
                for (&b, &d) in parents.iter().cartesian_product(&parents) {
                    if b == d {
                        continue;
                    }
                    for mu in 0..n {
                        if mu == a || mu == c || !self.pd_edge(a, mu) {
                            continue;
                        }
                        for omega in 0..n {
                            if omega == a || omega == c || omega == mu || !self.pd_edge(a, omega) {
                                continue;
                            }
                            if self.pag.adjacent(mu, omega) {
                                continue;
                            }
                            if self.uncovered_path_exists(a, mu, b, &pd)
                                && self.uncovered_path_exists(a, omega, d, &pd)
                            {
                                self.pag.set_mark(c, a, Mark::Tail);
                                changed = true;
                                continue 'next_c;
                            }
                        }
                    }
                }
            }
        }
        changed
    }

    fn orientation_rules(&mut self) {
        loop {
            let mut changed = false;
            loop {
                let step = self.rule_r1() | self.rule_r2() | self.rule_r3() | self.rule_r4();
                changed |= step;
                if !step {
                    break;
                }
            }
            loop {
                let step = self.rule_r5() | self.rule_r6() | self.rule_r7();
                changed |= step;
                if !step {
                    break;
                }
            }
            loop {
                let step = self.rule_r8() | self.rule_r9() | self.rule_r10();
                changed |= step;
                if !step {
                    break;
                }
            }
            if !changed {
                break;
            }
        }
    }
}

/// Runs FCI against a CI oracle over `labels`: skeleton by increasing
/// conditioning-set size, possible-d-sep pruning, v-structures, and Zhang's
/// complete orientation rules. Deterministic given a deterministic oracle
/// and the label order.
pub fn fci(oracle: &dyn CiOracle, labels: Vec<String>, opts: &FciOptions) -> Result<Pag> {
    let n = labels.len();
    let mut pag = Pag::empty(labels);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pag.set_mark(i, j, Mark::Circle);
            }
        }
    }
    let mut state = FciState {
        pag,
        sepsets: HashMap::new(),
        oracle,
    };
    state.skeleton(opts.max_cond_size)?;
    if opts.use_possible_dsep {
        state.possible_dsep_stage(opts.max_cond_size)?;
    }
    state.orient_v_structures();
    state.orientation_rules();
    state.pag.validate()?;
    Ok(state.pag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{augment, Dag, NodeRole};
    use crate::model::{
        joint_covariance_with_responses, pointwise_conditional_covariance, population_covariance,
        AdmissibleSet, LinearSem, NoiseSpec, SelectionCondition, SelectionConfig,
    };

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    /// X1 -> X3 <- L -> X4 <- X2 with L latent.
    fn two_collider_graph() -> Dag {
        Dag::new(
            vec![
                ("X1".into(), NodeRole::Observed),
                ("X2".into(), NodeRole::Observed),
                ("X3".into(), NodeRole::Observed),
                ("X4".into(), NodeRole::Observed),
                ("L".into(), NodeRole::Latent),
            ],
            vec![(0, 2, 1.0), (4, 2, 0.9), (4, 3, 1.1), (1, 3, 0.8)],
        )
        .unwrap()
    }

    /// X1 -> X2, X3 -> X4, selection on (X1, X3) and on (X2, X4).
    fn selection_square() -> (Dag, SelectionConfig) {
        let g = Dag::new(
            vec![
                ("X1".into(), NodeRole::Observed),
                ("X2".into(), NodeRole::Observed),
                ("X3".into(), NodeRole::Observed),
                ("X4".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 1.0), (2, 3, 1.0)],
        )
        .unwrap();
        let mk = |a: &str, b: &str| {
            SelectionCondition::new(
                names(&[a, b]),
                vec![1.0, 1.0],
                NoiseSpec::gaussian(1.0),
                AdmissibleSet::interval(0.0, f64::INFINITY).unwrap(),
            )
        };
        (g, SelectionConfig::new(vec![mk("X1", "X3"), mk("X2", "X4")]))
    }

    #[test]
    fn fci_latent_confounder_yields_bidirected_edge() {
        let g = two_collider_graph();
        let aug = augment(&g, &SelectionConfig::empty()).unwrap();
        let vars = names(&["X1", "X2", "X3", "X4"]);
        let oracle = DsepOracle::new(&aug, &vars).unwrap();
        let pag = fci(&oracle, vars, &FciOptions::default()).unwrap();

        // X3 <-> X4 signals a latent confounder.
        assert_eq!(pag.mark(2, 3), Mark::Arrow);
        assert_eq!(pag.mark(3, 2), Mark::Arrow);
        // X1 o-> X3 and X2 o-> X4.
        assert_eq!(pag.mark(0, 2), Mark::Arrow);
        assert_eq!(pag.mark(2, 0), Mark::Circle);
        assert_eq!(pag.mark(1, 3), Mark::Arrow);
        assert_eq!(pag.mark(3, 1), Mark::Circle);
        // Non-adjacencies.
        assert!(!pag.adjacent(0, 1));
        assert!(!pag.adjacent(0, 3));
        assert!(!pag.adjacent(1, 2));
    }

    #[test]
    fn fci_selection_square_yields_undirected_cycle() {
        let (g, config) = selection_square();
        let aug = augment(&g, &config).unwrap();
        let vars = names(&["X1", "X2", "X3", "X4"]);
        let oracle = DsepOracle::new(&aug, &vars).unwrap();

        // The only CIs in the selected population.
        assert!(oracle.independent(&[0], &[3], &[1, 2]).unwrap());
        assert!(oracle.independent(&[1], &[2], &[0, 3]).unwrap());
        assert!(!oracle.independent(&[0], &[3], &[]).unwrap());
        assert!(!oracle.independent(&[0], &[1], &[]).unwrap());

        let pag = fci(&oracle, vars, &FciOptions::default()).unwrap();
        // Cycle X1 - X2 - X4 - X3 - X1, all edges tail-tail (selection).
        for (i, j) in [(0, 1), (1, 3), (2, 3), (0, 2)] {
            assert_eq!(pag.mark(i, j), Mark::Tail, "edge {i}-{j}");
            assert_eq!(pag.mark(j, i), Mark::Tail, "edge {i}-{j}");
        }
        assert!(!pag.adjacent(0, 3));
        assert!(!pag.adjacent(1, 2));
    }

    #[test]
    fn fci_everything_independent_gives_empty_pag() {
        struct AllIndependent;
        impl CiOracle for AllIndependent {
            fn independent(&self, _: &[usize], _: &[usize], _: &[usize]) -> Result<bool> {
                Ok(true)
            }
        }
        let pag = fci(&AllIndependent, names(&["a", "b", "c"]), &FciOptions::default()).unwrap();
        assert_eq!(pag.edge_count(), 0);
    }

    #[test]
    fn fci_chain_stays_circles() {
        let g = Dag::new(
            vec![
                ("a".into(), NodeRole::Observed),
                ("b".into(), NodeRole::Observed),
                ("c".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 1.0), (1, 2, 1.0)],
        )
        .unwrap();
        let aug = augment(&g, &SelectionConfig::empty()).unwrap();
        let vars = names(&["a", "b", "c"]);
        let oracle = DsepOracle::new(&aug, &vars).unwrap();
        let pag = fci(&oracle, vars, &FciOptions::default()).unwrap();
        assert!(pag.adjacent(0, 1) && pag.adjacent(1, 2) && !pag.adjacent(0, 2));
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(pag.mark(i, j), Mark::Circle);
        }
    }

    #[test]
    fn fci_collider_conditioned_by_selection_connects_parents() {
        // Fig 2b-style: conditioning on the response makes the parents
        // dependent, so the PAG over the X's is complete.
        let g = Dag::new(
            (1..=3).map(|i| (format!("X{i}"), NodeRole::Observed)).collect(),
            vec![],
        )
        .unwrap();
        let cond = SelectionCondition::new(
            names(&["X1", "X2", "X3"]),
            vec![1.0, -2.0, 3.0],
            NoiseSpec::Constant,
            AdmissibleSet::interval(1.0, 5.0).unwrap(),
        );
        let aug = augment(&g, &SelectionConfig::new(vec![cond])).unwrap();
        let vars = names(&["X1", "X2", "X3"]);
        let oracle = DsepOracle::new(&aug, &vars).unwrap();
        assert!(!oracle.independent(&[0], &[1], &[]).unwrap());
        let pag = fci(&oracle, vars, &FciOptions::default()).unwrap();
        assert_eq!(pag.edge_count(), 3);
    }

    #[test]
    fn fci_is_invariant_under_relabeling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..15 {
            let n = 5;
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen_bool(0.4) {
                        edges.push((u, v, 1.0));
                    }
                }
            }
            let g = Dag::new(
                (0..n).map(|i| (format!("v{i}"), NodeRole::Observed)).collect(),
                edges.clone(),
            )
            .unwrap();
            let aug = augment(&g, &SelectionConfig::empty()).unwrap();
            let vars: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
            let oracle = DsepOracle::new(&aug, &vars).unwrap();
            let pag = fci(&oracle, vars, &FciOptions::default()).unwrap();

            // Permute node order and rerun.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            // perm[new] = old
            let mut inv = vec![0usize; n];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let permuted_edges: Vec<(usize, usize, f64)> = edges
                .iter()
                .map(|&(u, v, w)| (inv[u], inv[v], w))
                .collect();
            let g2 = Dag::new(
                (0..n).map(|i| (format!("v{}", perm[i]), NodeRole::Observed)).collect(),
                permuted_edges,
            )
            .unwrap();
            let aug2 = augment(&g2, &SelectionConfig::empty()).unwrap();
            let vars2: Vec<String> = (0..n).map(|i| format!("v{}", perm[i])).collect();
            let oracle2 = DsepOracle::new(&aug2, &vars2).unwrap();
            let pag2 = fci(&oracle2, vars2, &FciOptions::default()).unwrap();

            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        assert_eq!(
                            pag.mark(perm[i], perm[j]),
                            pag2.mark(i, j),
                            "mismatch at permuted ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn clustering_validation() {
        let mut map = BTreeMap::new();
        map.insert("L1".to_string(), names(&["x1", "x2"]));
        map.insert("L2".to_string(), names(&["x3", "x4", "x5"]));
        let clustering = MeasurementClustering::new(map).unwrap();
        assert_eq!(clustering.latents(), names(&["L1", "L2"]));

        let (c1, c2) = partition_measurements(&clustering, &[0, 1]).unwrap();
        assert_eq!(c1, names(&["x1", "x3", "x4"]));
        assert_eq!(c2, names(&["x2", "x5"]));
        assert!(c1.len() >= 2 && c2.len() >= 2);

        let (e1, e2) = partition_measurements(&clustering, &[]).unwrap();
        assert!(e1.is_empty() && e2.is_empty());

        let mut bad = BTreeMap::new();
        bad.insert("L1".to_string(), names(&["x1"]));
        assert!(MeasurementClustering::new(bad).is_err());

        let mut overlap = BTreeMap::new();
        overlap.insert("L1".to_string(), names(&["x1", "x2"]));
        overlap.insert("L2".to_string(), names(&["x2", "x3"]));
        assert!(MeasurementClustering::new(overlap).is_err());
    }

    /// One-factor chain L1 -> L2 -> L3 with two measurements each.
    fn one_factor_chain() -> (LinearSem, MeasurementClustering) {
        let mut nodes = vec![
            ("L1".to_string(), NodeRole::Latent),
            ("L2".to_string(), NodeRole::Latent),
            ("L3".to_string(), NodeRole::Latent),
        ];
        let mut edges = vec![(0, 1, 0.9), (1, 2, -1.2)];
        let mut map = BTreeMap::new();
        for l in 0..3 {
            let mut ms = Vec::new();
            for m in 0..2 {
                let idx = nodes.len();
                let name = format!("x{}_{m}", l + 1);
                nodes.push((name.clone(), NodeRole::Observed));
                edges.push((l, idx, 0.7 + 0.2 * (l as f64) + 0.1 * (m as f64)));
                ms.push(name);
            }
            map.insert(format!("L{}", l + 1), ms);
        }
        let g = Dag::new(nodes, edges).unwrap();
        let sem = LinearSem::with_unit_noise(g).unwrap();
        let clustering = MeasurementClustering::new(map).unwrap();
        (sem, clustering)
    }

    #[test]
    fn rank_oracle_on_one_factor_chain() {
        let (sem, clustering) = one_factor_chain();
        clustering.validate_against(sem.graph()).unwrap();
        let cov = population_covariance(&sem).unwrap();
        let oracle = RankCiOracle::new(
            RankSource::Population(&cov),
            &clustering,
            RankTestSpec::exact(),
        );
        // L1 _||_ L3 | L2 (rank 1), but not marginally (rank 1 != 0).
        assert!(oracle.independent(&[0], &[2], &[1]).unwrap());
        assert!(!oracle.independent(&[0], &[2], &[]).unwrap());
        assert!(!oracle.independent(&[0], &[1], &[]).unwrap());
    }

    #[test]
    fn rank_oracle_independent_latents() {
        let g = Dag::new(
            vec![
                ("L1".into(), NodeRole::Latent),
                ("L2".into(), NodeRole::Latent),
                ("a1".into(), NodeRole::Observed),
                ("a2".into(), NodeRole::Observed),
                ("b1".into(), NodeRole::Observed),
                ("b2".into(), NodeRole::Observed),
            ],
            vec![(0, 2, 1.0), (0, 3, 0.8), (1, 4, 1.2), (1, 5, -0.7)],
        )
        .unwrap();
        let sem = LinearSem::with_unit_noise(g).unwrap();
        let cov = population_covariance(&sem).unwrap();
        let mut map = BTreeMap::new();
        map.insert("L1".to_string(), names(&["a1", "a2"]));
        map.insert("L2".to_string(), names(&["b1", "b2"]));
        let clustering = MeasurementClustering::new(map).unwrap();
        let oracle = RankCiOracle::new(
            RankSource::Population(&cov),
            &clustering,
            RankTestSpec::exact(),
        );
        assert!(oracle.independent(&[0], &[1], &[]).unwrap());
    }

    #[test]
    fn rank_oracle_agrees_with_dsep_under_pointwise_selection() {
        // One-factor chain with a pointwise Gaussian selection on (L1, L3);
        // the closed-form conditional covariance feeds the rank oracle.
        let (sem, clustering) = one_factor_chain();
        let cond = SelectionCondition::new(
            names(&["L1", "L3"]),
            vec![1.0, 0.8],
            NoiseSpec::gaussian(1.0),
            AdmissibleSet::point(0.0).unwrap(),
        );
        let config = SelectionConfig::new(vec![cond]);

        let joint = joint_covariance_with_responses(&sem, &config).unwrap();
        let p = sem.var_count();
        let x_idx: Vec<usize> = (0..p).collect();
        let y_idx = vec![p];
        let selected = pointwise_conditional_covariance(&joint, &x_idx, &y_idx).unwrap();

        let rank_oracle = RankCiOracle::new(
            RankSource::Population(&selected),
            &clustering,
            RankTestSpec::exact(),
        );
        let aug = augment(sem.graph(), &config).unwrap();
        let latents = names(&["L1", "L2", "L3"]);
        let dsep = DsepOracle::new(&aug, &latents).unwrap();

        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let rest: Vec<usize> = (0..3).filter(|&v| v != a && v != b).collect();
            for c in [vec![], rest] {
                let expected = dsep.independent(&[a], &[b], &c).unwrap();
                let got = rank_oracle.independent(&[a], &[b], &c).unwrap();
                assert_eq!(got, expected, "query ({a}, {b} | {c:?})");
            }
        }
    }

    #[test]
    fn clustering_json_roundtrip() {
        let (_, clustering) = one_factor_chain();
        let json = clustering.to_json();
        let back = MeasurementClustering::from_json(&json).unwrap();
        assert_eq!(back, clustering);
    }
}
