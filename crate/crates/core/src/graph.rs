//! Relation-typed complete digraphs over a dialog.
//!
//! Two graphs are built per dialog:
//!
//! * the speaker-aware temporal graph (SATG) over the `N` utterances, where
//!   the relation of an edge `j → i` encodes the source speaker, the target
//!   speaker, and whether the source comes after the target (`>`) or not
//!   (`≤`);
//! * the dual-task reasoning temporal graph (DRTG) over `2N` task nodes, where
//!   the relation encodes the source task, the target task, and whether the
//!   source utterance is before (`<`), the same as (`=`), or after (`>`) the
//!   target utterance.
//!
//! Both graphs are stored as in-neighborhoods: for node `i` and relation `r`,
//! the list `N_i^r` of source nodes. Self-edges are never stored; the graph
//! transformations carry a separate self term.
//!
//! DRTG node numbering: the sentiment node of utterance `k` (0-based) is `k`,
//! its act node is `N + k`.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Sentiment,
    Act,
}

impl Task {
    pub fn tag(self) -> char {
        match self {
            Task::Sentiment => 's',
            Task::Act => 'a',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// 1-based relation id
    pub rel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelGraph {
    n_nodes: usize,
    n_relations: usize,
    // in_neighbors[node][rel - 1]
    in_neighbors: Vec<Vec<Vec<usize>>>,
}

impl RelGraph {
    pub fn empty(n_nodes: usize, n_relations: usize) -> Self {
        Self {
            n_nodes,
            n_relations,
            in_neighbors: vec![vec![Vec::new(); n_relations]; n_nodes],
        }
    }

    /// Adds `src → dst` under relation `rel` (1-based).
    pub fn add_edge(&mut self, src: usize, dst: usize, rel: usize) -> Result<()> {
        if rel == 0 || rel > self.n_relations {
            return Err(Error::OutOfRange {
                what: "relations",
                index: rel,
                size: self.n_relations,
            });
        }
        if src >= self.n_nodes || dst >= self.n_nodes {
            return Err(Error::OutOfRange {
                what: "graph nodes",
                index: src.max(dst),
                size: self.n_nodes,
            });
        }
        self.in_neighbors[dst][rel - 1].push(src);
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    /// `N_i^r`: sources feeding `node` under relation `rel` (1-based).
    pub fn neighbors(&self, node: usize, rel: usize) -> &[usize] {
        &self.in_neighbors[node][rel - 1]
    }

    /// For relation `rel`, every node's in-neighbor list, indexed by node.
    pub fn relation_lists(&self, rel: usize) -> Arc<Vec<Vec<usize>>> {
        Arc::new(
            self.in_neighbors
                .iter()
                .map(|per_rel| per_rel[rel - 1].clone())
                .collect(),
        )
    }

    /// Whether any node has a neighbor under `rel`.
    pub fn relation_used(&self, rel: usize) -> bool {
        self.in_neighbors
            .iter()
            .any(|per_rel| !per_rel[rel - 1].is_empty())
    }

    /// The relation of edge `src → dst`, if present.
    pub fn relation_of(&self, src: usize, dst: usize) -> Option<usize> {
        self.in_neighbors[dst]
            .iter()
            .position(|list| list.contains(&src))
            .map(|r| r + 1)
    }

    /// All edges, ordered by target, then relation, then source.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for (dst, per_rel) in self.in_neighbors.iter().enumerate() {
            for (r, list) in per_rel.iter().enumerate() {
                let mut srcs = list.clone();
                srcs.sort_unstable();
                out.extend(srcs.into_iter().map(|src| Edge {
                    src,
                    dst,
                    rel: r + 1,
                }));
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.in_neighbors.iter().flatten().map(Vec::len).sum()
    }

    /// Edge count per relation; entry `r - 1` is relation `r`.
    pub fn relation_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.n_relations];
        for per_rel in &self.in_neighbors {
            for (r, list) in per_rel.iter().enumerate() {
                hist[r] += list.len();
            }
        }
        hist
    }
}

/// SATG relation typing for `n_speakers` speakers.
#[derive(Clone, Copy, Debug)]
pub struct SatgScheme {
    pub n_speakers: usize,
    /// when false, `>` and `≤` collapse into one bucket
    pub temporal: bool,
}

impl SatgScheme {
    pub fn n_relations(&self) -> usize {
        let pairs = self.n_speakers * self.n_speakers;
        if self.temporal {
            2 * pairs
        } else {
            pairs
        }
    }

    /// Relation of the edge from utterance `idx_src` (speaker `speaker_src`)
    /// into utterance `idx_dst`. Speakers are 1-based.
    pub fn relation(
        &self,
        speaker_src: usize,
        speaker_dst: usize,
        idx_src: usize,
        idx_dst: usize,
    ) -> Result<usize> {
        for s in [speaker_src, speaker_dst] {
            if s == 0 || s > self.n_speakers {
                return Err(Error::OutOfRange {
                    what: "speakers",
                    index: s,
                    size: self.n_speakers,
                });
            }
        }
        let pair = (speaker_src - 1) * self.n_speakers + (speaker_dst - 1);
        if !self.temporal {
            return Ok(pair + 1);
        }
        let pos = if idx_src > idx_dst { 1 } else { 2 };
        Ok(pair * 2 + pos)
    }
}

/// SATG relation id with temporal typing; reproduces the two-speaker table
/// for `n_speakers = 2` (ids 1..=8).
pub fn satg_relation(
    speaker_src: usize,
    speaker_dst: usize,
    idx_src: usize,
    idx_dst: usize,
    n_speakers: usize,
) -> Result<usize> {
    SatgScheme {
        n_speakers,
        temporal: true,
    }
    .relation(speaker_src, speaker_dst, idx_src, idx_dst)
}

/// Builds the SATG for a dialog given its 1-based speaker ids in order.
pub fn build_satg(speakers: &[usize], scheme: SatgScheme) -> Result<RelGraph> {
    let n = speakers.len();
    let mut g = RelGraph::empty(n, scheme.n_relations());
    for dst in 0..n {
        for src in 0..n {
            if src == dst {
                continue;
            }
            let rel = scheme.relation(speakers[src], speakers[dst], src, dst)?;
            g.add_edge(src, dst, rel)?;
        }
    }
    Ok(g)
}

/// DRTG relation typing.
#[derive(Clone, Copy, Debug)]
pub struct DrtgScheme {
    /// when false, `<`, `=` and `>` collapse into one bucket per task pair
    pub temporal: bool,
}

impl DrtgScheme {
    pub fn n_relations(&self) -> usize {
        if self.temporal {
            12
        } else {
            4
        }
    }

    pub fn relation(
        &self,
        task_src: Task,
        task_dst: Task,
        utt_src: usize,
        utt_dst: usize,
    ) -> usize {
        let pair = match (task_src, task_dst) {
            (Task::Sentiment, Task::Sentiment) => 0,
            (Task::Sentiment, Task::Act) => 1,
            (Task::Act, Task::Sentiment) => 2,
            (Task::Act, Task::Act) => 3,
        };
        if !self.temporal {
            return pair + 1;
        }
        let pos = match utt_src.cmp(&utt_dst) {
            std::cmp::Ordering::Less => 1,
            std::cmp::Ordering::Equal => 2,
            std::cmp::Ordering::Greater => 3,
        };
        pair * 3 + pos
    }
}

/// DRTG relation id with temporal typing (ids 1..=12).
pub fn drtg_relation(task_src: Task, task_dst: Task, utt_src: usize, utt_dst: usize) -> usize {
    DrtgScheme { temporal: true }.relation(task_src, task_dst, utt_src, utt_dst)
}

/// The task and 0-based utterance index of a DRTG node.
pub fn drtg_node(node: usize, n_utterances: usize) -> (Task, usize) {
    if node < n_utterances {
        (Task::Sentiment, node)
    } else {
        (Task::Act, node - n_utterances)
    }
}

/// Builds the DRTG over `2N` nodes. The dual edges `s_k ↔ a_k` are kept;
/// only a node's edge to itself is dropped.
pub fn build_drtg(n_utterances: usize, scheme: DrtgScheme) -> Result<RelGraph> {
    if n_utterances == 0 {
        return Err(Error::Empty { op: "build_drtg" });
    }
    let n = 2 * n_utterances;
    let mut g = RelGraph::empty(n, scheme.n_relations());
    for dst in 0..n {
        let (task_dst, utt_dst) = drtg_node(dst, n_utterances);
        for src in 0..n {
            if src == dst {
                continue;
            }
            let (task_src, utt_src) = drtg_node(src, n_utterances);
            g.add_edge(
                src,
                dst,
                scheme.relation(task_src, task_dst, utt_src, utt_dst),
            )?;
        }
    }
    Ok(g)
}

/// Graphviz DOT rendering with relation ids as edge labels.
pub fn export_dot(graph: &RelGraph, labels: &[String]) -> Result<String> {
    if labels.len() != graph.n_nodes() {
        return Err(Error::Validation(format!(
            "{} labels for {} nodes",
            labels.len(),
            graph.n_nodes()
        )));
    }
    let mut out = String::from("digraph G {\n");
    for (i, label) in labels.iter().enumerate() {
        let _ = writeln!(out, "  n{i} [label=\"{}\"];", escape(label));
    }
    for e in graph.edges() {
        let _ = writeln!(out, "  n{} -> n{} [label=\"r{}\"];", e.src, e.dst, e.rel);
    }
    out.push_str("}\n");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: SatgScheme = SatgScheme {
        n_speakers: 2,
        temporal: true,
    };

    #[test]
    fn satg_table_examples() {
        assert_eq!(satg_relation(1, 1, 4, 2, 2).unwrap(), 1);
        assert_eq!(satg_relation(2, 1, 1, 3, 2).unwrap(), 6);
        assert_eq!(satg_relation(1, 1, 2, 2, 2).unwrap(), 2);
        assert!(satg_relation(3, 1, 0, 1, 2).is_err());
        assert!(satg_relation(0, 1, 0, 1, 2).is_err());
    }

    #[test]
    fn satg_single_utterance_has_no_edges() {
        let g = build_satg(&[1], TWO).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert_eq!(g.n_relations(), 8);
    }

    #[test]
    fn satg_neighborhood_of_third_utterance() {
        let g = build_satg(&[1, 2, 1, 2, 1], TWO).unwrap();
        // node 3 is index 2
        assert_eq!(g.neighbors(2, 1), &[4]);
        assert_eq!(g.neighbors(2, 2), &[0]);
        assert_eq!(g.neighbors(2, 5), &[3]);
        assert_eq!(g.neighbors(2, 6), &[1]);
        for r in [3, 4, 7, 8] {
            assert!(g.neighbors(2, r).is_empty());
        }
        assert_eq!(g.n_edges(), 20);
    }

    #[test]
    fn satg_without_temporal_typing_halves_relations() {
        let scheme = SatgScheme {
            n_speakers: 2,
            temporal: false,
        };
        let g = build_satg(&[1, 2, 1], scheme).unwrap();
        assert_eq!(g.n_relations(), 4);
        assert_eq!(g.neighbors(0, 1), &[2]);
        assert_eq!(g.neighbors(0, 3), &[1]);
    }

    #[test]
    fn drtg_table_examples() {
        use Task::*;
        assert_eq!(drtg_relation(Sentiment, Sentiment, 0, 1), 1);
        assert_eq!(drtg_relation(Act, Act, 3, 1), 12);
        assert_eq!(drtg_relation(Sentiment, Act, 2, 2), 5);
        assert_eq!(drtg_relation(Act, Sentiment, 2, 2), 8);
    }

    #[test]
    fn drtg_single_utterance() {
        let g = build_drtg(1, DrtgScheme { temporal: true }).unwrap();
        let edges = g.edges();
        assert_eq!(
            edges,
            vec![
                Edge {
                    src: 1,
                    dst: 0,
                    rel: 8
                },
                Edge {
                    src: 0,
                    dst: 1,
                    rel: 5
                }
            ]
        );
        assert!(build_drtg(0, DrtgScheme { temporal: true }).is_err());
    }

    #[test]
    fn drtg_counts_and_same_task_equal_buckets_are_empty() {
        let g = build_drtg(3, DrtgScheme { temporal: true }).unwrap();
        assert_eq!(g.n_edges(), 30);
        assert!(!g.relation_used(2));
        assert!(!g.relation_used(11));
        // s_3 receives s_1 under (S,S,<)
        assert_eq!(g.relation_of(0, 2), Some(1));
        assert_eq!(
            build_drtg(2, DrtgScheme { temporal: true })
                .unwrap()
                .n_edges(),
            12
        );
    }

    #[test]
    fn dot_output() {
        let g = RelGraph::empty(2, 1);
        let dot = export_dot(&g, &["a".into(), "b".into()]).unwrap();
        assert!(!dot.contains("->"));

        let g = build_satg(&[1, 2], TWO).unwrap();
        let dot = export_dot(&g, &["u1".into(), "u\"2".into()]).unwrap();
        assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 2);
        assert!(dot.contains("u\\\"2"));
        assert!(export_dot(&g, &["only one".into()]).is_err());
    }
}
