//! t-separation, minimum t-separation via max-flow, and the generalized
//! graphical rank criterion for selection-augmented graphs.
//!
//! A pair of node sets (C, D) t-separates (A, B) when, after removing C on
//! one side and D on the other, A and B have no common ancestors. The
//! minimum |C| + |D| over t-separating pairs equals the generic rank of the
//! corresponding covariance submatrix; under k selection conditions the
//! criterion is evaluated in the augmented graph on (A u Y, B u Y) and
//! reduced by k.

use std::collections::BTreeSet;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, CutCandidate, FlowNetwork, Layer};
use crate::graph::{augment, Dag, NodeRole};
use crate::model::SelectionConfig;

/// A pair of column index sets; the sets may overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankQuery {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl RankQuery {
    pub fn new(a: Vec<usize>, b: Vec<usize>) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::invalid("rank query sets must be nonempty".to_string()));
        }
        Ok(RankQuery { a, b })
    }
}

/// Result of a minimum t-separation or graphical rank computation. The
/// witness (cut_c, cut_d) t-separates the queried pair, and
/// `|cut_c| + |cut_d| = rank + adjustment` where `adjustment` is the number
/// of selection responses subtracted by the criterion (0 for plain
/// t-separation queries).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankResult {
    pub rank: usize,
    pub cut_c: Vec<usize>,
    pub cut_d: Vec<usize>,
    pub adjustment: usize,
}

/// Does (c, d) t-separate (a, b)? Ancestors of `a \ c` with c removed must
/// not meet ancestors of `b \ d` with d removed (over original identities).
pub fn t_separates(g: &Dag, a: &[usize], b: &[usize], c: &[usize], d: &[usize]) -> Result<bool> {
    for (set, what) in [(a, "a"), (b, "b"), (c, "c"), (d, "d")] {
        for &v in set {
            if v >= g.node_count() {
                return Err(Error::invalid(format!(
                    "t_separates: index {v} in '{what}' out of range"
                )));
            }
        }
    }
    let removed_c: BTreeSet<usize> = c.iter().copied().collect();
    let removed_d: BTreeSet<usize> = d.iter().copied().collect();
    let side_a = g.ancestors_excluding(a, &removed_c);
    let side_b = g.ancestors_excluding(b, &removed_d);
    Ok(side_a.is_disjoint(&side_b))
}

/// Two-layer flow network whose minimum vertex cut equals the minimum
/// |C| + |D| over t-separating pairs: an ancestor-walking copy of the graph
/// with edges reversed (cut there = membership in C), a descendant-walking
/// copy with edges kept (cut = membership in D), a switch arc from each
/// node's ancestor copy to its own descendant copy, the source feeding A in
/// the ancestor copy and B draining to the sink from the descendant copy.
/// Both copies carry unit vertex capacities via node splitting.
pub fn build_flow_network(g: &Dag, a: &[usize], b: &[usize]) -> FlowNetwork {
    let n = g.node_count();
    // Layout: ancestor copy in/out = (2v, 2v+1); descendant copy in/out =
    // (2n+2v, 2n+2v+1); source = 4n, sink = 4n+1.
    let anc_in = |v: usize| 2 * v;
    let anc_out = |v: usize| 2 * v + 1;
    let des_in = |v: usize| 2 * n + 2 * v;
    let des_out = |v: usize| 2 * n + 2 * v + 1;
    let mut net = FlowNetwork::with_nodes(4 * n + 2, 4 * n, 4 * n + 1);

    for v in 0..n {
        net.add_unit_arc(
            anc_in(v),
            anc_out(v),
            Some(CutCandidate {
                node: v,
                layer: Layer::Ancestor,
            }),
        );
        net.add_unit_arc(
            des_in(v),
            des_out(v),
            Some(CutCandidate {
                node: v,
                layer: Layer::Descendant,
            }),
        );
        net.add_free_arc(anc_out(v), des_in(v));
    }
    for e in g.edges() {
        // Reversed in the ancestor copy: walk from A up to common ancestors.
        net.add_free_arc(anc_out(e.to), anc_in(e.from));
        // Kept in the descendant copy: walk from the common ancestor down to B.
        net.add_free_arc(des_out(e.from), des_in(e.to));
    }
    for &v in a {
        net.add_free_arc(4 * n, anc_in(v));
    }
    for &v in b {
        net.add_free_arc(des_out(v), 4 * n + 1);
    }
    net
}

fn check_query(g: &Dag, a: &[usize], b: &[usize]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("query sets must be nonempty".to_string()));
    }
    for &v in a.iter().chain(b) {
        if v >= g.node_count() {
            return Err(Error::invalid(format!(
                "query index {v} out of range ({} nodes)",
                g.node_count()
            )));
        }
    }
    Ok(())
}

/// Minimum |C| + |D| over t-separating pairs for (a, b), with one witnessing
/// cut extracted from the max-flow residual graph (which of the equal-size
/// witnesses is returned is not canonical).
pub fn min_tsep(g: &Dag, a: &[usize], b: &[usize]) -> Result<RankResult> {
    check_query(g, a, b)?;
    let net = build_flow_network(g, a, b);
    let result = flow::max_flow(&net);
    let mut cut_c: Vec<usize> = Vec::new();
    let mut cut_d: Vec<usize> = Vec::new();
    for c in &result.cut {
        match c.layer {
            Layer::Ancestor => cut_c.push(c.node),
            Layer::Descendant => cut_d.push(c.node),
        }
    }
    cut_c.sort_unstable();
    cut_d.sort_unstable();
    debug_assert_eq!(cut_c.len() + cut_d.len(), result.value);
    Ok(RankResult {
        rank: result.value,
        cut_c,
        cut_d,
        adjustment: 0,
    })
}

/// Exhaustive oracle: enumerates (C, D) pairs in increasing |C| + |D| (then
/// lexicographically, C-major) and returns the first t-separating pair.
/// If `max_size` is exceeded without finding a cut, falls back to the
/// trivial witness of size min(|a|, |b|).
pub fn min_tsep_bruteforce(g: &Dag, a: &[usize], b: &[usize], max_size: usize) -> Result<RankResult> {
    check_query(g, a, b)?;
    let n = g.node_count();
    let cap = max_size.min(a.len().min(b.len()));
    for total in 0..=cap {
        for c_size in 0..=total {
            let d_size = total - c_size;
            for c in (0..n).combinations(c_size) {
                for d in (0..n).combinations(d_size) {
                    if t_separates(g, a, b, &c, &d)? {
                        return Ok(RankResult {
                            rank: total,
                            cut_c: c,
                            cut_d: d,
                            adjustment: 0,
                        });
                    }
                }
            }
        }
    }
    // (A, {}) always t-separates; report whichever trivial witness is smaller.
    let (cut_c, cut_d) = if a.len() <= b.len() {
        (a.to_vec(), Vec::new())
    } else {
        (Vec::new(), b.to_vec())
    };
    Ok(RankResult {
        rank: a.len().min(b.len()),
        cut_c,
        cut_d,
        adjustment: 0,
    })
}

/// Generalized graphical rank: builds the selection-augmented graph, runs
/// minimum t-separation on (a u Y, b u Y) over all response nodes Y, and
/// subtracts their count. With an empty configuration and no response nodes
/// this reduces to plain minimum t-separation.
pub fn graphical_rank(
    g: &Dag,
    config: &SelectionConfig,
    a: &[usize],
    b: &[usize],
) -> Result<RankResult> {
    check_query(g, a, b)?;
    for &v in a.iter().chain(b) {
        if g.role(v) == NodeRole::SelectionResponse {
            return Err(Error::invalid(format!(
                "rank query may not touch selection response node '{}'",
                g.name(v)
            )));
        }
    }
    let aug = augment(g, config)?;
    let graph = aug.graph();
    let responses = graph.indices_with_role(NodeRole::SelectionResponse);
    let k = responses.len();

    let mut qa: BTreeSet<usize> = a.iter().copied().collect();
    let mut qb: BTreeSet<usize> = b.iter().copied().collect();
    qa.extend(&responses);
    qb.extend(&responses);
    let qa: Vec<usize> = qa.into_iter().collect();
    let qb: Vec<usize> = qb.into_iter().collect();

    let unadjusted = min_tsep(graph, &qa, &qb)?;
    let rank = unadjusted.rank.checked_sub(k).ok_or_else(|| {
        Error::Numerical(format!(
            "minimum t-separation {} fell below the response count {k}",
            unadjusted.rank
        ))
    })?;
    Ok(RankResult {
        rank,
        cut_c: unadjusted.cut_c,
        cut_d: unadjusted.cut_d,
        adjustment: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeRole;
    use crate::model::{AdmissibleSet, NoiseSpec, SelectionCondition};
    use rand::{Rng, SeedableRng};

    fn tetrad() -> Dag {
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

    fn inverse_tetrad() -> (Dag, SelectionConfig) {
        let g = Dag::new(
            (1..=4).map(|i| (format!("X{i}"), NodeRole::Observed)).collect(),
            vec![],
        )
        .unwrap();
        let cond = SelectionCondition::new(
            vec!["X1".into(), "X2".into(), "X3".into(), "X4".into()],
            vec![1.0, -2.0, 3.0, -4.0],
            NoiseSpec::Constant,
            AdmissibleSet::interval(3.0, 10.0).unwrap(),
        );
        (g, SelectionConfig::new(vec![cond]))
    }

    #[test]
    fn t_separation_in_tetrad() {
        let g = tetrad();
        // ({}, {L}) t-separates ({X1, X2}, {X3, X4}).
        assert!(t_separates(&g, &[1, 2], &[3, 4], &[], &[0]).unwrap());
        assert!(t_separates(&g, &[1, 2], &[3, 4], &[0], &[]).unwrap());
        assert!(!t_separates(&g, &[1, 2], &[3, 4], &[], &[]).unwrap());
        // c = a, d = b: both sides empty.
        assert!(t_separates(&g, &[1, 2], &[3, 4], &[1, 2], &[3, 4]).unwrap());
    }

    #[test]
    fn t_separation_inverse_tetrad_augmented() {
        let (g, config) = inverse_tetrad();
        let aug = augment(&g, &config).unwrap();
        let y = aug.response_indices()[0];
        assert!(t_separates(aug.graph(), &[0, 1, y], &[2, 3, y], &[y], &[y]).unwrap());
        assert!(!t_separates(aug.graph(), &[0, 1, y], &[2, 3, y], &[y], &[]).unwrap());
    }

    #[test]
    fn min_tsep_tetrad_queries() {
        let g = tetrad();
        for (a, b) in [
            (vec![1, 2], vec![3, 4]),
            (vec![1, 3], vec![2, 4]),
            (vec![1, 4], vec![2, 3]),
        ] {
            let r = min_tsep(&g, &a, &b).unwrap();
            assert_eq!(r.rank, 1);
            // The only size-1 witnesses cut L on one side.
            assert_eq!([r.cut_c.as_slice(), r.cut_d.as_slice()].concat(), vec![0]);
            assert!(t_separates(&g, &a, &b, &r.cut_c, &r.cut_d).unwrap());
        }
    }

    #[test]
    fn min_tsep_singleton_self_query() {
        let g = tetrad();
        let r = min_tsep(&g, &[2], &[2]).unwrap();
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn min_tsep_disjoint_components() {
        let g = Dag::new(
            vec![
                ("a".into(), NodeRole::Observed),
                ("b".into(), NodeRole::Observed),
            ],
            vec![],
        )
        .unwrap();
        let r = min_tsep(&g, &[0], &[1]).unwrap();
        assert_eq!(r.rank, 0);
        assert!(r.cut_c.is_empty() && r.cut_d.is_empty());
    }

    #[test]
    fn bruteforce_single_edge() {
        let g = Dag::new(
            vec![
                ("a".into(), NodeRole::Observed),
                ("b".into(), NodeRole::Observed),
            ],
            vec![(0, 1, 1.0)],
        )
        .unwrap();
        let r = min_tsep_bruteforce(&g, &[0], &[1], 4).unwrap();
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn bruteforce_matches_flow_on_tetrad() {
        let g = tetrad();
        for (a, b) in [
            (vec![1, 2], vec![3, 4]),
            (vec![1, 3], vec![2, 4]),
            (vec![1, 4], vec![2, 3]),
        ] {
            let bf = min_tsep_bruteforce(&g, &a, &b, 4).unwrap();
            let mf = min_tsep(&g, &a, &b).unwrap();
            assert_eq!(bf.rank, mf.rank);
        }
    }

    #[test]
    fn bruteforce_bound_exceeded_falls_back() {
        // A dense bipartite link needs a cut of size 2; cap the search at 1.
        let g = Dag::new(
            vec![
                ("s1".into(), NodeRole::Observed),
                ("s2".into(), NodeRole::Observed),
                ("t1".into(), NodeRole::Observed),
                ("t2".into(), NodeRole::Observed),
            ],
            vec![(0, 2, 1.0), (0, 3, 1.0), (1, 2, 1.0), (1, 3, 1.0)],
        )
        .unwrap();
        let r = min_tsep_bruteforce(&g, &[0, 1], &[2, 3], 1).unwrap();
        assert_eq!(r.rank, 2);
        assert!(t_separates(&g, &[0, 1], &[2, 3], &r.cut_c, &r.cut_d).unwrap());
    }

    #[test]
    fn graphical_rank_inverse_tetrad() {
        let (g, config) = inverse_tetrad();
        for (a, b) in [
            (vec![0, 1], vec![2, 3]),
            (vec![0, 2], vec![1, 3]),
            (vec![0, 3], vec![1, 2]),
        ] {
            let r = graphical_rank(&g, &config, &a, &b).unwrap();
            assert_eq!(r.rank, 1, "query {a:?} vs {b:?}");
            assert_eq!(r.adjustment, 1);
        }
    }

    #[test]
    fn graphical_rank_empty_config_reduces_to_min_tsep() {
        let g = tetrad();
        let empty = SelectionConfig::empty();
        for (a, b) in [(vec![1, 2], vec![3, 4]), (vec![1], vec![4]), (vec![2, 3], vec![2, 3])] {
            let gr = graphical_rank(&g, &empty, &a, &b).unwrap();
            let mt = min_tsep(&g, &a, &b).unwrap();
            assert_eq!(gr.rank, mt.rank);
            assert_eq!(gr.adjustment, 0);
        }
    }

    #[test]
    fn graphical_rank_rejects_response_queries() {
        let (g, config) = inverse_tetrad();
        let aug = augment(&g, &config).unwrap();
        let y = aug.response_indices()[0];
        let err = graphical_rank(aug.graph(), &SelectionConfig::empty(), &[y], &[0]).unwrap_err();
        assert!(err.to_string().contains("response"));
    }

    #[test]
    fn graphical_rank_symmetry_and_monotonicity() {
        let (g, config) = inverse_tetrad();
        let ab = graphical_rank(&g, &config, &[0, 1], &[2, 3]).unwrap().rank;
        let ba = graphical_rank(&g, &config, &[2, 3], &[0, 1]).unwrap().rank;
        assert_eq!(ab, ba);
        let small = graphical_rank(&g, &config, &[0], &[2, 3]).unwrap().rank;
        assert!(small <= ab + 1);
        let grown = graphical_rank(&g, &config, &[0, 1], &[2, 3]).unwrap().rank;
        assert!(small <= grown);
    }

    #[test]
    fn flow_min_tsep_matches_bruteforce_on_random_dags() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..80 {
            let n = rng.gen_range(3..=8);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen_bool(0.3) {
                        edges.push((u, v, 1.0));
                    }
                }
            }
            let g = Dag::new(
                (0..n).map(|i| (format!("v{i}"), NodeRole::Observed)).collect(),
                edges,
            )
            .unwrap();
            for _ in 0..5 {
                let pick = |rng: &mut rand_chacha::ChaCha8Rng| {
                    let size = rng.gen_range(1..=2.min(n));
                    let mut set = BTreeSet::new();
                    while set.len() < size {
                        set.insert(rng.gen_range(0..n));
                    }
                    set.into_iter().collect::<Vec<_>>()
                };
                let a = pick(&mut rng);
                let b = pick(&mut rng);
                let bf = min_tsep_bruteforce(&g, &a, &b, n).unwrap();
                let mf = min_tsep(&g, &a, &b).unwrap();
                assert_eq!(bf.rank, mf.rank, "a={a:?} b={b:?}");
                assert!(t_separates(&g, &a, &b, &mf.cut_c, &mf.cut_d).unwrap());
            }
        }
    }
}
