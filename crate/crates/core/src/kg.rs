//! Core knowledge-graph data model: interned entities/relations, triples,
//! per-question subgraphs and their file formats (TSV triples, JSONL questions).

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense entity handle, valid within one subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense relation handle, valid within one subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

/// Dense triple handle; doubles as the line-graph node id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripleId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}
impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}
impl TripleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TripleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A directed fact (head, relation, tail).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub id: TripleId,
}

/// Directed multigraph of triples for one question, with interned labels and
/// adjacency indices keyed by entity. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeSubgraph {
    entity_labels: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_labels: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    /// Outgoing triples per entity.
    out_adj: Vec<Vec<TripleId>>,
    /// Incoming triples per entity.
    in_adj: Vec<Vec<TripleId>>,
}

impl KnowledgeSubgraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(label) {
            return id;
        }
        let id = EntityId(self.entity_labels.len() as u32);
        self.entity_labels.push(label.to_string());
        self.entity_index.insert(label.to_string(), id);
        self.out_adj.push(Vec::new());
        self.in_adj.push(Vec::new());
        id
    }

    pub fn intern_relation(&mut self, label: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(label) {
            return id;
        }
        let id = RelationId(self.relation_labels.len() as u32);
        self.relation_labels.push(label.to_string());
        self.relation_index.insert(label.to_string(), id);
        id
    }

    /// Adds a triple by labels. Parallel and duplicate triples get distinct ids.
    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> TripleId {
        let h = self.intern_entity(head);
        let r = self.intern_relation(relation);
        let t = self.intern_entity(tail);
        let id = TripleId(self.triples.len() as u32);
        self.triples.push(Triple {
            head: h,
            relation: r,
            tail: t,
            id,
        });
        self.out_adj[h.index()].push(id);
        self.in_adj[t.index()].push(id);
        id
    }

    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: TripleId) -> &Triple {
        &self.triples[id.index()]
    }

    pub fn entity(&self, label: &str) -> Option<EntityId> {
        self.entity_index.get(label).copied()
    }

    pub fn relation(&self, label: &str) -> Option<RelationId> {
        self.relation_index.get(label).copied()
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id.index()]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id.index()]
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn outgoing(&self, e: EntityId) -> &[TripleId] {
        &self.out_adj[e.index()]
    }

    pub fn incoming(&self, e: EntityId) -> &[TripleId] {
        &self.in_adj[e.index()]
    }

    pub fn out_degree(&self, e: EntityId) -> usize {
        self.out_adj[e.index()].len()
    }

    pub fn in_degree(&self, e: EntityId) -> usize {
        self.in_adj[e.index()].len()
    }

    /// Rebuilds both adjacency indices from the triple list and compares them
    /// with the stored ones. Used by self-consistency checks.
    pub fn adjacency_consistent(&self) -> bool {
        let mut out = vec![Vec::new(); self.entity_labels.len()];
        let mut inc = vec![Vec::new(); self.entity_labels.len()];
        for t in &self.triples {
            out[t.head.index()].push(t.id);
            inc[t.tail.index()].push(t.id);
        }
        out == self.out_adj && inc == self.in_adj
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a TSV triple file (head, relation, tail per line). Line order defines
/// triple ids; duplicated lines stay distinct triples. An empty file is a
/// valid empty subgraph.
pub fn load_triples(path: &Path) -> Result<KnowledgeSubgraph> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut g = KnowledgeSubgraph::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        g.add_triple(fields[0], fields[1], fields[2]);
    }
    Ok(g)
}

/// Writes a subgraph as TSV, one triple per line in id order. Labels only,
/// never dense handles.
pub fn save_triples(g: &KnowledgeSubgraph, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for t in g.triples() {
        writeln!(
            w,
            "{}\t{}\t{}",
            g.entity_label(t.head),
            g.relation_label(t.relation),
            g.entity_label(t.tail)
        )
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// One question with its linked entities and per-question subgraph.
#[derive(Debug, Clone)]
pub struct QuestionInstance {
    pub question_id: String,
    pub text: String,
    pub question_entities: Vec<EntityId>,
    pub answer_entities: Vec<EntityId>,
    /// Answer labels that are absent from the subgraph (kept, not rejected).
    pub missing_answers: Vec<String>,
    pub answers_in_graph: bool,
    pub subgraph: KnowledgeSubgraph,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuestionRecord {
    question_id: String,
    text: String,
    question_entities: Vec<String>,
    answer_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triples: Option<Vec<[String; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subgraph_path: Option<String>,
}

impl QuestionInstance {
    fn from_record(rec: QuestionRecord, base: &Path) -> Result<Self> {
        let mut g = KnowledgeSubgraph::new();
        match (&rec.triples, &rec.subgraph_path) {
            (Some(triples), _) => {
                for [h, r, t] in triples {
                    g.add_triple(h, r, t);
                }
            }
            (None, Some(rel)) => {
                g = load_triples(&base.join(rel))?;
            }
            (None, None) => {
                return Err(Error::Validation {
                    question_id: rec.question_id,
                    msg: "record has neither 'triples' nor 'subgraph_path'".into(),
                })
            }
        }
        let mut question_entities = Vec::new();
        for label in &rec.question_entities {
            match g.entity(label) {
                Some(id) => question_entities.push(id),
                None => return Err(Error::UnknownEntity(label.clone())),
            }
        }
        let mut answer_entities = Vec::new();
        let mut missing_answers = Vec::new();
        for label in &rec.answer_entities {
            match g.entity(label) {
                Some(id) => answer_entities.push(id),
                None => missing_answers.push(label.clone()),
            }
        }
        let answers_in_graph = missing_answers.is_empty();
        Ok(QuestionInstance {
            question_id: rec.question_id,
            text: rec.text,
            question_entities,
            answer_entities,
            missing_answers,
            answers_in_graph,
            subgraph: g,
        })
    }

    fn to_record(&self) -> QuestionRecord {
        let g = &self.subgraph;
        let triples = g
            .triples()
            .iter()
            .map(|t| {
                [
                    g.entity_label(t.head).to_string(),
                    g.relation_label(t.relation).to_string(),
                    g.entity_label(t.tail).to_string(),
                ]
            })
            .collect();
        let mut answers: Vec<String> = self
            .answer_entities
            .iter()
            .map(|&e| g.entity_label(e).to_string())
            .collect();
        answers.extend(self.missing_answers.iter().cloned());
        QuestionRecord {
            question_id: self.question_id.clone(),
            text: self.text.clone(),
            question_entities: self
                .question_entities
                .iter()
                .map(|&e| g.entity_label(e).to_string())
                .collect(),
            answer_entities: answers,
            triples: Some(triples),
            subgraph_path: None,
        }
    }
}

/// Loads a JSONL question file, one record per line. Question entities must
/// resolve against the subgraph; absent answer entities only flag the instance.
pub fn load_questions(path: &Path) -> Result<Vec<QuestionInstance>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(QuestionInstance::from_record(rec, &base)?);
    }
    Ok(out)
}

/// Writes instances as JSONL with inline triples.
pub fn save_questions(insts: &[QuestionInstance], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in insts {
        let rec = inst.to_record();
        let line = serde_json::to_string(&rec).expect("question record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Report-only validation outcome for one instance.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub unlinked_question_entities: Vec<String>,
    pub missing_answers: Vec<String>,
    /// Question entities with zero outgoing triples.
    pub isolated_question_entities: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.unlinked_question_entities.is_empty()
            && self.missing_answers.is_empty()
            && self.isolated_question_entities.is_empty()
    }
}

pub fn validate_instance(inst: &QuestionInstance) -> ValidationReport {
    let g = &inst.subgraph;
    let mut report = ValidationReport {
        missing_answers: inst.missing_answers.clone(),
        ..Default::default()
    };
    for &e in &inst.question_entities {
        if g.out_degree(e) == 0 {
            report
                .isolated_question_entities
                .push(g.entity_label(e).to_string());
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn write(path: &Path, content: &str) {
        std::fs::write(path, content).unwrap();
    }

    #[test]
    fn load_triples_basic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        write(&p, "a\tr1\tb\nb\tr2\tc\n");
        let g = load_triples(&p).unwrap();
        assert_eq!(g.entity_count(), 3);
        assert_eq!(g.relation_count(), 2);
        assert_eq!(g.triple_count(), 2);
    }

    #[test]
    fn load_triples_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        write(&p, "");
        let g = load_triples(&p).unwrap();
        assert_eq!(g.triple_count(), 0);
        assert_eq!(g.entity_count(), 0);
    }

    #[test]
    fn load_triples_malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        write(&p, "a\tr1\tb\na\tb\n");
        let err = load_triples(&p).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn duplicate_lines_stay_distinct_triples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        let mut content = String::new();
        for _ in 0..60 {
            content.push_str("a\tr\tb\n");
        }
        write(&p, &content);
        let g = load_triples(&p).unwrap();
        assert_eq!(g.triple_count(), 60);
        assert_eq!(g.entity_count(), 2);
    }

    fn random_subgraph(rng: &mut impl Rng) -> KnowledgeSubgraph {
        let n_ent = rng.gen_range(1..=12);
        let n_rel = rng.gen_range(1..=4);
        let n_tri = rng.gen_range(0..=25);
        let mut g = KnowledgeSubgraph::new();
        for i in 0..n_tri {
            let h = rng.gen_range(0..n_ent);
            let t = rng.gen_range(0..n_ent);
            let r = rng.gen_range(0..n_rel);
            let _ = i;
            g.add_triple(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
        }
        g
    }

    #[test]
    fn save_load_round_trip_on_random_subgraphs() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..50 {
            let g = random_subgraph(&mut rng);
            let p = dir.path().join(format!("g{i}.tsv"));
            save_triples(&g, &p).unwrap();
            let g2 = load_triples(&p).unwrap();
            assert_eq!(g, g2);
        }
    }

    #[test]
    fn adjacency_rebuild_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let g = random_subgraph(&mut rng);
            assert!(g.adjacency_consistent());
        }
    }

    #[test]
    fn handle_spaces_are_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = random_subgraph(&mut rng);
            if let Some(max) = g.triples().iter().map(|t| t.head.0.max(t.tail.0)).max() {
                assert!((max as usize) < g.entity_count());
            }
            for (i, label) in (0..g.entity_count()).map(|i| (i, g.entity_label(EntityId(i as u32)))) {
                assert_eq!(g.entity(label), Some(EntityId(i as u32)));
            }
        }
    }

    #[test]
    fn load_questions_basic_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        let rec1 = r#"{"question_id":"q1","text":"what movie did Tupac star in","question_entities":["Tupac"],"answer_entities":["Gridlock'd"],"triples":[["Tupac","film.actor.film","m.0jz0c4"],["m.0jz0c4","film.performance.film","Gridlock'd"]]}"#;
        let rec2 = r#"{"question_id":"q2","text":"x","question_entities":["a"],"answer_entities":["zzz"],"triples":[["a","r","b"]]}"#;
        write(&p, &format!("{rec1}\n{rec2}\n"));
        let qs = load_questions(&p).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].question_entities.len(), 1);
        assert!(qs[0].answers_in_graph);
        assert!(!qs[1].answers_in_graph);
        assert_eq!(qs[1].missing_answers, vec!["zzz".to_string()]);
    }

    #[test]
    fn load_questions_unknown_question_entity_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        write(
            &p,
            r#"{"question_id":"q1","text":"x","question_entities":["nope"],"answer_entities":["b"],"triples":[["a","r","b"]]}"#,
        );
        let err = load_questions(&p).unwrap_err();
        assert!(matches!(err, Error::UnknownEntity(e) if e == "nope"));
    }

    #[test]
    fn load_questions_missing_field_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        write(&p, r#"{"question_id":"q1","text":"x"}"#);
        assert!(matches!(load_questions(&p).unwrap_err(), Error::Parse { .. }));
    }

    #[test]
    fn question_split_sizes_round_trip() {
        // WebQSP-style split sizes: 2,826 train / 1,628 test.
        let dir = tempfile::tempdir().unwrap();
        for (name, n) in [("train", 2826usize), ("test", 1628usize)] {
            let p = dir.path().join(format!("{name}.jsonl"));
            let mut lines = String::new();
            for i in 0..n {
                lines.push_str(&format!(
                    r#"{{"question_id":"{name}-{i}","text":"q {i}","question_entities":["a"],"answer_entities":["b"],"triples":[["a","r","b"]]}}"#
                ));
                lines.push('\n');
            }
            write(&p, &lines);
            let qs = load_questions(&p).unwrap();
            assert_eq!(qs.len(), n);
            let p2 = dir.path().join(format!("{name}.rt.jsonl"));
            save_questions(&qs, &p2).unwrap();
            let qs2 = load_questions(&p2).unwrap();
            assert_eq!(qs2.len(), n);
            assert_eq!(qs2[0].subgraph, qs[0].subgraph);
        }
    }

    #[test]
    fn validate_instance_reports() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        let rec = r#"{"question_id":"q1","text":"x","question_entities":["a"],"answer_entities":["b"],"triples":[["a","r","b"]]}"#;
        write(&p, rec);
        let qs = load_questions(&p).unwrap();
        assert!(validate_instance(&qs[0]).is_empty());

        // answer absent -> one missing-answer entry
        let rec = r#"{"question_id":"q2","text":"x","question_entities":["a"],"answer_entities":["gone"],"triples":[["a","r","b"]]}"#;
        write(&p, rec);
        let qs = load_questions(&p).unwrap();
        let report = validate_instance(&qs[0]);
        assert_eq!(report.missing_answers.len(), 1);

        // question entity with no outgoing triples -> isolated warning
        let rec = r#"{"question_id":"q3","text":"x","question_entities":["b"],"answer_entities":["a"],"triples":[["a","r","b"]]}"#;
        write(&p, rec);
        let qs = load_questions(&p).unwrap();
        let report = validate_instance(&qs[0]);
        assert_eq!(report.isolated_question_entities, vec!["b".to_string()]);
    }
}
