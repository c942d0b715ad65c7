//! Directed line-graph transformation. Each node of the line graph is one
//! triple of the source subgraph; a line-graph edge x -> y exists iff
//! tail(x) == head(y). The edge-reversed twin feeds the look-ahead encoder.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kg::{KnowledgeSubgraph, TripleId};

/// The directed line graph of a subgraph. Node ids are triple ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LineGraphView {
    node_count: usize,
    /// forward[x] = successors of node x.
    forward: Vec<Vec<u32>>,
    /// reverse[y] = predecessors of node y (transpose of `forward`).
    reverse: Vec<Vec<u32>>,
    edge_count: usize,
    /// Edge emissions during construction; equals sum over entities of
    /// indeg * outdeg.
    edge_visits: usize,
}

impl LineGraphView {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn edge_visits(&self) -> usize {
        self.edge_visits
    }

    pub fn successors(&self, node: TripleId) -> &[u32] {
        &self.forward[node.index()]
    }

    pub fn predecessors(&self, node: TripleId) -> &[u32] {
        &self.reverse[node.index()]
    }

    pub fn out_degree(&self, node: TripleId) -> usize {
        self.forward[node.index()].len()
    }

    pub fn in_degree(&self, node: TripleId) -> usize {
        self.reverse[node.index()].len()
    }

    pub fn has_edge(&self, from: TripleId, to: TripleId) -> bool {
        self.forward[from.index()].contains(&to.0)
    }

    pub fn nodes(&self) -> impl Iterator<Item = TripleId> {
        (0..self.node_count as u32).map(TripleId)
    }
}

/// Builds l(G) by bucketing triples by head entity and emitting, for each
/// triple, edges into the bucket of its tail. Runs in O(|E| * d_max).
pub fn build_line_graph(g: &KnowledgeSubgraph) -> LineGraphView {
    let n = g.triple_count();
    let mut forward = vec![Vec::new(); n];
    let mut reverse = vec![Vec::new(); n];
    let mut edge_visits = 0usize;
    for t in g.triples() {
        for &succ in g.outgoing(t.tail) {
            edge_visits += 1;
            forward[t.id.index()].push(succ.0);
            reverse[succ.index()].push(t.id.0);
        }
    }
    let edge_count = forward.iter().map(Vec::len).sum();
    LineGraphView {
        node_count: n,
        forward,
        reverse,
        edge_count,
        edge_visits,
    }
}

/// Returns the edge-reversed twin. Reversing twice yields the original.
pub fn reverse(lg: &LineGraphView) -> LineGraphView {
    LineGraphView {
        node_count: lg.node_count,
        forward: lg.reverse.clone(),
        reverse: lg.forward.clone(),
        edge_count: lg.edge_count,
        edge_visits: lg.edge_visits,
    }
}

/// Lifts a path of triples in G to the corresponding node path in l(G).
/// Consecutive triples must share tail/head.
pub fn lift_path(g: &KnowledgeSubgraph, path: &[TripleId]) -> Result<Vec<TripleId>> {
    if path.is_empty() {
        return Err(Error::Contract("cannot lift an empty path".into()));
    }
    for pair in path.windows(2) {
        let a = g.triple(pair[0]);
        let b = g.triple(pair[1]);
        if a.tail != b.head {
            return Err(Error::Contract(format!(
                "non-contiguous path: triple {} ends at '{}' but triple {} starts at '{}'",
                pair[0],
                g.entity_label(a.tail),
                pair[1],
                g.entity_label(b.head)
            )));
        }
    }
    Ok(path.to_vec())
}

/// Lowers a node path in l(G) back to the triple path in G; inverse of
/// `lift_path`.
pub fn lower_path(g: &KnowledgeSubgraph, lg: &LineGraphView, nodes: &[TripleId]) -> Result<Vec<TripleId>> {
    if nodes.is_empty() {
        return Err(Error::Contract("cannot lower an empty line-graph path".into()));
    }
    for pair in nodes.windows(2) {
        if !lg.has_edge(pair[0], pair[1]) {
            return Err(Error::Contract(format!(
                "invalid line-graph path: no edge {} -> {}",
                pair[0], pair[1]
            )));
        }
    }
    let _ = g;
    Ok(nodes.to_vec())
}

/// DOT export for debugging; node labels are "head|relation|tail".
pub fn to_dot(g: &KnowledgeSubgraph, lg: &LineGraphView) -> String {
    let mut out = String::from("digraph line_graph {\n");
    for node in lg.nodes() {
        let t = g.triple(node);
        let _ = writeln!(
            out,
            "  n{} [label=\"{}|{}|{}\"];",
            node.0,
            g.entity_label(t.head),
            g.relation_label(t.relation),
            g.entity_label(t.tail)
        );
    }
    for node in lg.nodes() {
        for &succ in lg.successors(node) {
            let _ = writeln!(out, "  n{} -> n{};", node.0, succ);
        }
    }
    out.push_str("}\n");
    out
}
