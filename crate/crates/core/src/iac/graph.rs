use std::collections::{BTreeMap, BTreeSet};

use super::{IacError, ResourceSpec};

/// Resource dependency graph. An edge `(from, to)` means `from` depends on `to`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DepGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
}

impl DepGraph {
    pub fn from_parts(
        nodes: impl IntoIterator<Item = String>,
        edges: impl IntoIterator<Item = (String, String)>,
    ) -> Self {
        let mut g = DepGraph { nodes: nodes.into_iter().collect(), edges: BTreeSet::new() };
        for (a, b) in edges {
            g.nodes.insert(a.clone());
            g.nodes.insert(b.clone());
            g.edges.insert((a, b));
        }
        g
    }

    /// Addresses `node` depends on directly.
    pub fn dependencies<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(a, _)| a == node).map(|(_, b)| b.as_str())
    }

    /// Addresses that depend directly on `node`.
    pub fn dependents<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(_, b)| b == node).map(|(a, _)| a.as_str())
    }
}

/// One node per resource, one edge per distinct resource reference.
pub fn build_graph(specs: &[ResourceSpec]) -> Result<DepGraph, IacError> {
    let mut nodes = BTreeSet::new();
    for s in specs {
        if !nodes.insert(s.address()) {
            return Err(IacError::DuplicateAddress(s.address()));
        }
    }
    let mut edges = BTreeSet::new();
    for s in specs {
        for r in s.refs() {
            let target = r.address();
            if !nodes.contains(&target) {
                return Err(IacError::UnknownReference { address: s.address(), path: r.to_string() });
            }
            edges.insert((s.address(), target));
        }
    }
    let g = DepGraph { nodes, edges };
    topo_order(&g)?;
    Ok(g)
}

/// Dependencies first; among nodes ready at the same time the
/// lexicographically smallest address goes first.
pub fn topo_order(graph: &DepGraph) -> Result<Vec<String>, IacError> {
    let mut pending: BTreeMap<&str, usize> = graph.nodes.iter().map(|n| (n.as_str(), 0)).collect();
    for (from, _) in &graph.edges {
        *pending.get_mut(from.as_str()).expect("edge endpoints are nodes") += 1;
    }
    let mut ready: BTreeSet<&str> = pending.iter().filter(|(_, &d)| d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.to_string());
        for dependent in graph.dependents(next) {
            let d = pending.get_mut(dependent).expect("edge endpoints are nodes");
            *d -= 1;
            if *d == 0 {
                ready.insert(dependent);
            }
        }
    }
    if order.len() < graph.nodes.len() {
        let placed: BTreeSet<&str> = order.iter().map(String::as_str).collect();
        return Err(IacError::Cycle(find_cycle(graph, &placed)));
    }
    Ok(order)
}

/// Walks dependency edges among unplaced nodes until one repeats.
fn find_cycle(graph: &DepGraph, placed: &BTreeSet<&str>) -> Vec<String> {
    let start = graph.nodes.iter().find(|n| !placed.contains(n.as_str())).expect("some node is unplaced");
    let mut path: Vec<&str> = vec![start];
    loop {
        let cur = *path.last().expect("non-empty");
        let next = graph
            .dependencies(cur)
            .find(|d| !placed.contains(d))
            .expect("every unplaced node has an unplaced dependency");
        if let Some(i) = path.iter().position(|p| *p == next) {
            let mut cycle: Vec<String> = path[i..].iter().map(|s| s.to_string()).collect();
            cycle.push(next.to_string());
            return cycle;
        }
        path.push(next);
    }
}
