//! Shortest distances, bounded candidate-path enumeration for labeling, the
//! shortest-path baseline labels, and relation-path extraction.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeSubgraph, RelationId, TripleId};

/// Default cap on enumerated candidate paths per (question, answer) pair.
pub const DEFAULT_PATH_CAP: usize = 200;

/// A nonempty contiguous sequence of triples.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReasoningPath {
    pub triples: Vec<TripleId>,
}

impl ReasoningPath {
    pub fn new(g: &KnowledgeSubgraph, triples: Vec<TripleId>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::Contract("reasoning path must be nonempty".into()));
        }
        for pair in triples.windows(2) {
            if g.triple(pair[0]).tail != g.triple(pair[1]).head {
                return Err(Error::Contract(format!(
                    "non-contiguous reasoning path at triples {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self { triples })
    }

    pub fn hop_count(&self) -> usize {
        self.triples.len()
    }

    pub fn source(&self, g: &KnowledgeSubgraph) -> EntityId {
        g.triple(self.triples[0]).head
    }

    pub fn target(&self, g: &KnowledgeSubgraph) -> EntityId {
        g.triple(*self.triples.last().unwrap()).tail
    }

    /// Entity sequence e_0..e_k along the path.
    pub fn entities(&self, g: &KnowledgeSubgraph) -> Vec<EntityId> {
        let mut out = vec![self.source(g)];
        for &t in &self.triples {
            out.push(g.triple(t).tail);
        }
        out
    }

    /// Serializes as "e0 --r1--> e1 --r2--> e2".
    pub fn render(&self, g: &KnowledgeSubgraph) -> String {
        let mut s = g.entity_label(self.source(g)).to_string();
        for &tid in &self.triples {
            let t = g.triple(tid);
            s.push_str(" --");
            s.push_str(g.relation_label(t.relation));
            s.push_str("--> ");
            s.push_str(g.entity_label(t.tail));
        }
        s
    }
}

/// Relation sequence z_p of a path; same length as its hop count.
pub fn relation_path(g: &KnowledgeSubgraph, p: &ReasoningPath) -> Vec<RelationId> {
    p.triples.iter().map(|&t| g.triple(t).relation).collect()
}

/// Directed BFS hop count from `s` to `t`; `None` if unreachable.
pub fn shortest_distance(g: &KnowledgeSubgraph, s: EntityId, t: EntityId) -> Result<Option<usize>> {
    if s.index() >= g.entity_count() || t.index() >= g.entity_count() {
        return Err(Error::UnknownEntity(format!("entity handle out of range")));
    }
    if s == t {
        return Ok(Some(0));
    }
    let mut dist = vec![usize::MAX; g.entity_count()];
    dist[s.index()] = 0;
    let mut queue = VecDeque::from([s]);
    while let Some(v) = queue.pop_front() {
        for &tid in g.outgoing(v) {
            let next = g.triple(tid).tail;
            if dist[next.index()] == usize::MAX {
                dist[next.index()] = dist[v.index()] + 1;
                if next == t {
                    return Ok(Some(dist[next.index()]));
                }
                queue.push_back(next);
            }
        }
    }
    Ok(None)
}

/// Result of candidate-path enumeration.
#[derive(Debug, Clone, Default)]
pub struct CandidatePaths {
    pub paths: Vec<ReasoningPath>,
    /// True when enumeration stopped at the cap.
    pub truncated: bool,
    /// False when the answer is unreachable from the question entity.
    pub reachable: bool,
}

/// Enumerates all triple-simple paths from `e_q` to `e_a` whose length lies in
/// [d_min, d_min + 2], in lexicographic order of triple-id sequences,
/// truncated at `cap`. Entities may repeat along a path; triples may not.
pub fn enumerate_candidate_paths(
    g: &KnowledgeSubgraph,
    e_q: EntityId,
    e_a: EntityId,
    cap: usize,
) -> Result<CandidatePaths> {
    let d_min = match shortest_distance(g, e_q, e_a)? {
        Some(d) if d >= 1 => d,
        Some(_) | None => {
            // d = 0 means e_q == e_a: no path of length >= 1 is required to be
            // shortest, treat like unreachable for labeling purposes.
            return Ok(CandidatePaths {
                reachable: false,
                ..Default::default()
            });
        }
    };
    let max_len = d_min + 2;
    let mut out = CandidatePaths {
        reachable: true,
        ..Default::default()
    };
    let mut used = vec![false; g.triple_count()];
    let mut stack: Vec<TripleId> = Vec::new();
    // out_adj lists are in increasing triple-id order by construction, so a
    // plain DFS yields lexicographic output.
    fn dfs(
        g: &KnowledgeSubgraph,
        at: EntityId,
        e_a: EntityId,
        d_min: usize,
        max_len: usize,
        cap: usize,
        used: &mut [bool],
        stack: &mut Vec<TripleId>,
        out: &mut CandidatePaths,
    ) {
        if out.truncated {
            return;
        }
        if at == e_a && stack.len() >= d_min && !stack.is_empty() {
            if out.paths.len() == cap {
                out.truncated = true;
                return;
            }
            out.paths.push(ReasoningPath {
                triples: stack.clone(),
            });
        }
        if stack.len() == max_len {
            return;
        }
        for &tid in g.outgoing(at) {
            if used[tid.index()] {
                continue;
            }
            used[tid.index()] = true;
            stack.push(tid);
            dfs(g, g.triple(tid).tail, e_a, d_min, max_len, cap, used, stack, out);
            stack.pop();
            used[tid.index()] = false;
            if out.truncated {
                return;
            }
        }
    }
    dfs(g, e_q, e_a, d_min, max_len, cap, &mut used, &mut stack, &mut out);
    Ok(out)
}

/// All paths of length exactly d_min; the shortest-path baseline labeling.
pub fn shortest_path_labels(
    g: &KnowledgeSubgraph,
    e_q: EntityId,
    e_a: EntityId,
) -> Result<Vec<ReasoningPath>> {
    let cands = enumerate_candidate_paths(g, e_q, e_a, usize::MAX)?;
    if !cands.reachable {
        return Ok(Vec::new());
    }
    let d_min = cands.paths.iter().map(|p| p.hop_count()).min().unwrap_or(0);
    Ok(cands
        .paths
        .into_iter()
        .filter(|p| p.hop_count() == d_min)
        .collect())
}
