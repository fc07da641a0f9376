//! Random DAGs and checks of the dependency ordering against exhaustive
//! edge checks and a brute-force permutation search.

use proptest::prelude::*;
use stagehand_core::iac::{topo_order, DepGraph, IacError};

const POOL: [&str; 10] = ["a", "b", "c", "d", "e", "f", "g", "h", "ab", "ba"];

#[derive(Debug, Clone)]
pub struct Dag {
    pub nodes: Vec<String>,
    /// `(from, to)`: `from` depends on `to`.
    pub edges: Vec<(String, String)>,
}

pub fn dag() -> impl Strategy<Value = Dag> {
    (1usize..=8, Just(POOL.to_vec()).prop_shuffle(), proptest::collection::vec(any::<bool>(), 64)).prop_map(
        |(n, pool, bits)| {
            let nodes: Vec<String> = pool[..n].iter().map(|s| s.to_string()).collect();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in 0..i {
                    if bits[i * 8 + j] {
                        edges.push((nodes[i].clone(), nodes[j].clone()));
                    }
                }
            }
            Dag { nodes, edges }
        },
    )
}

fn graph(d: &Dag) -> DepGraph {
    DepGraph::from_parts(d.nodes.clone(), d.edges.clone())
}

fn satisfies(order: &[String], edges: &[(String, String)]) -> bool {
    let pos = |n: &str| order.iter().position(|x| x == n);
    edges.iter().all(|(from, to)| matches!((pos(from), pos(to)), (Some(f), Some(t)) if t < f))
}

fn permutations(items: &[String]) -> Vec<Vec<String>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

pub fn check(d: &Dag) -> Result<(), String> {
    let g = graph(d);
    let order = topo_order(&g).map_err(|e| format!("unexpected error {e} on {d:?}"))?;
    let mut sorted = order.clone();
    sorted.sort();
    let mut want = d.nodes.clone();
    want.sort();
    if sorted != want {
        return Err(format!("order {order:?} is not a permutation of {want:?}"));
    }
    if !satisfies(&order, &d.edges) {
        return Err(format!("order {order:?} violates an edge of {:?}", d.edges));
    }
    let again = topo_order(&g).unwrap();
    if format!("{again:?}") != format!("{order:?}") {
        return Err("repeated call differs".into());
    }
    if d.nodes.len() <= 6 {
        let best = permutations(&d.nodes).into_iter().filter(|p| satisfies(p, &d.edges)).min().unwrap();
        if best != order {
            return Err(format!("order {order:?} is not the least valid order {best:?}"));
        }
    }
    Ok(())
}

/// Adding the reverse of an existing edge must be reported as a cycle made
/// of real edges.
pub fn check_cycle(d: &Dag) -> Result<(), String> {
    let Some((from, to)) = d.edges.first() else { return Ok(()) };
    let mut edges = d.edges.clone();
    edges.push((to.clone(), from.clone()));
    let g = DepGraph::from_parts(d.nodes.clone(), edges.clone());
    match topo_order(&g) {
        Err(IacError::Cycle(c)) => {
            if c.len() < 3 || c.first() != c.last() {
                return Err(format!("malformed cycle {c:?}"));
            }
            if !c.windows(2).all(|w| edges.contains(&(w[0].clone(), w[1].clone()))) {
                return Err(format!("cycle {c:?} uses a non-edge"));
            }
            Ok(())
        }
        other => Err(format!("expected a cycle, got {other:?}")),
    }
}
