use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RoadmapGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    pub nodes: Vec<usize>,
    /// Indices into the graph's edge list.
    pub edges: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over `(from, to, cost)` arcs with nonnegative costs. Ties are
/// broken by node id, and a label is only replaced by a strictly cheaper one,
/// so the result is a function of the arc order alone.
pub fn dijkstra(
    n: usize,
    arcs: &[(usize, usize, f64)],
    start: usize,
    goal: usize,
) -> Result<Option<PlannedPath>> {
    if start >= n || goal >= n {
        return Err(Error::Precondition(format!(
            "query ({start}, {goal}) outside a graph of {n} nodes"
        )));
    }
    let mut out = vec![Vec::new(); n];
    for (e, &(a, b, c)) in arcs.iter().enumerate() {
        if !(c >= 0.0) {
            return Err(Error::Precondition(format!("arc {e} has cost {c}")));
        }
        out[a].push((e, b, c));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut via: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[start] = 0.0;
    heap.push(Reverse(Entry { cost: 0.0, node: start }));
    while let Some(Reverse(Entry { cost, node })) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        if node == goal {
            break;
        }
        for &(e, next, c) in &out[node] {
            let cand = cost + c;
            if cand < dist[next] {
                dist[next] = cand;
                via[next] = Some(e);
                heap.push(Reverse(Entry { cost: cand, node: next }));
            }
        }
    }
    if !dist[goal].is_finite() {
        return Ok(None);
    }
    let mut edges = Vec::new();
    let mut node = goal;
    while node != start {
        let e = via[node].expect("reachable node has a predecessor");
        edges.push(e);
        node = arcs[e].0;
    }
    edges.reverse();
    let mut nodes = vec![start];
    nodes.extend(edges.iter().map(|&e| arcs[e].1));
    Ok(Some(PlannedPath {
        nodes,
        edges,
        total_cost: dist[goal],
    }))
}

/// Minimum summed edge cost path, or `None` when the goal is unreachable.
pub fn shortest_path(graph: &RoadmapGraph, start: usize, goal: usize) -> Result<Option<PlannedPath>> {
    let arcs: Vec<_> = graph
        .edges
        .iter()
        .map(|e| (e.from, e.to, e.costs.total))
        .collect();
    dijkstra(graph.nodes.len(), &arcs, start, goal)
}
