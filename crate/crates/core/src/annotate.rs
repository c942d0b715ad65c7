//! Path labeling through a text-completion annotator: prompt construction,
//! response parsing, a deterministic lexical mock for offline runs, relation
//! targeting, and a persistent JSONL annotation cache.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::embed::tokenize;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeSubgraph, QuestionInstance, RelationId};
use crate::paths::{enumerate_candidate_paths, shortest_path_labels, ReasoningPath};

/// Stateless text-in/text-out completion backend. The identifier
/// distinguishes cache entries from different annotators.
pub trait AnnotatorClient: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Annotator-selected plausible relations for one question (used for positive
/// sample augmentation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationTargetSet {
    pub question_id: String,
    pub relations: BTreeSet<RelationId>,
}

// ---------------------------------------------------------------------------
// Prompts

const RATIONAL_EXAMPLE: &str = "\
Example
Given a question <Which author wrote the novel that inspired the film Dune?>, the reasoning paths are:

1. Dune --film.adapted_from--> Dune (novel) --book.author--> Frank Herbert
2. Dune --film.directed_by--> Denis Villeneuve --person.influenced_by--> Frank Herbert

The rational paths are:

1. Dune --film.adapted_from--> Dune (novel) --book.author--> Frank Herbert

Explanation

The first path follows the adaptation link to the source novel and then its author, which answers the question directly. The second path only reflects a directorial influence and does not establish authorship of the source novel.
";

/// Builds the rational-path selection prompt: a worked example block followed
/// by the task block with the serialized, numbered candidates. Deterministic.
pub fn build_rational_path_prompt(q: &QuestionInstance, cands: &[ReasoningPath]) -> Result<String> {
    if cands.is_empty() {
        return Err(Error::Contract(
            "rational-path prompt needs a nonempty candidate list".into(),
        ));
    }
    let mut out = String::from(RATIONAL_EXAMPLE);
    out.push_str("\nTask\n");
    let _ = write!(out, "Now given question <{}>, the reasoning paths are:\n\n", q.text);
    for (i, p) in cands.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, p.render(&q.subgraph));
    }
    out.push_str("\nIdentify all the rational paths, and list below, with explanations:\n");
    Ok(out)
}

/// Builds the relation-targeting prompt: example block, then the task block
/// listing the subgraph's relations in stable (interning) order.
pub fn build_relation_targeting_prompt(q: &QuestionInstance, relations: &[String]) -> String {
    let mut out = String::from(
        "Example\n\
Given a question <Which author wrote the novel that inspired the film Dune?>, the question entity is: <Dune>, the candidate relations for <Dune> are: <film.adapted_from, film.directed_by, film.release_year>. The possible relations for this question are:\n\n\
film.adapted_from\n\
\nTask\n",
    );
    let q_entities: Vec<&str> = q
        .question_entities
        .iter()
        .map(|&e| q.subgraph.entity_label(e))
        .collect();
    let _ = write!(
        out,
        "Now given question <{}>, question entity: <{}>, relations with the entity: <{}>. List the possible relations for this question.\n",
        q.text,
        q_entities.join(", "),
        relations.join(", ")
    );
    out
}

// ---------------------------------------------------------------------------
// Response parsing

/// Result of parsing a rational-path selection response.
#[derive(Debug, Clone, Default)]
pub struct ParsedSelection {
    /// Zero-based candidate indices.
    pub indices: BTreeSet<usize>,
    /// No parseable selection found; caller falls back to shortest paths.
    pub parse_failed: bool,
    /// One-based indices outside 1..=n, dropped with a warning count.
    pub dropped_out_of_range: usize,
}

/// Extracts selected candidate indices from a free-form response. Accepts
/// numbered list lines ("1. path", "3)") and bare comma-separated indices;
/// explanation prose is ignored.
pub fn parse_rational_response(response: &str, n_candidates: usize) -> ParsedSelection {
    let mut parsed = ParsedSelection::default();
    let mut saw_any = false;
    for line in response.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        for candidate in extract_leading_indices(line) {
            saw_any = true;
            if candidate >= 1 && candidate <= n_candidates {
                parsed.indices.insert(candidate - 1);
            } else {
                parsed.dropped_out_of_range += 1;
            }
        }
    }
    parsed.parse_failed = !saw_any || parsed.indices.is_empty();
    parsed
}

/// Indices mentioned by a line: either a leading "N." / "N)" list marker, or
/// a pure comma/space separated index list like "1, 3".
fn extract_leading_indices(line: &str) -> Vec<usize> {
    let bare: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect();
    if !bare.is_empty() && bare.iter().all(|t| t.chars().all(|c| c.is_ascii_digit())) {
        return bare.iter().filter_map(|t| t.parse().ok()).collect();
    }
    let digits: String = line.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return Vec::new();
    }
    let rest = &line[digits.len()..];
    if rest.starts_with('.') || rest.starts_with(')') {
        digits.parse().map(|i| vec![i]).unwrap_or_default()
    } else {
        Vec::new()
    }
}

/// Parses a relation-targeting response: any line or comma-separated item
/// that names a relation of the subgraph.
pub fn parse_relation_response(response: &str, g: &KnowledgeSubgraph) -> BTreeSet<RelationId> {
    let mut out = BTreeSet::new();
    for line in response.lines() {
        for item in line.split(',') {
            let item = item.trim();
            if let Some(r) = g.relation(item) {
                out.insert(r);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Lexical mock annotator

/// Scores each candidate by unique-token overlap between the question text
/// and the candidate's relation labels; returns the argmax set (all ties).
/// All-zero overlap returns every candidate.
pub fn mock_annotate(q: &QuestionInstance, cands: &[ReasoningPath]) -> BTreeSet<usize> {
    let q_tokens: BTreeSet<String> = tokenize(&q.text).into_iter().collect();
    let scores: Vec<usize> = cands
        .iter()
        .map(|p| {
            let rel_tokens: BTreeSet<String> = p
                .triples
                .iter()
                .flat_map(|&t| tokenize(q.subgraph.relation_label(q.subgraph.triple(t).relation)))
                .collect();
            rel_tokens.intersection(&q_tokens).count()
        })
        .collect();
    let best = scores.iter().copied().max().unwrap_or(0);
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == best)
        .map(|(i, _)| i)
        .collect()
}

/// Offline stand-in for the LM annotator. Parses the prompts built by this
/// module and answers with lexical-overlap selections, so the full
/// prompt/parse/cache pipeline is exercised without network access.
pub struct LexicalMockAnnotator;

impl LexicalMockAnnotator {
    fn question_from_prompt(prompt: &str) -> Option<&str> {
        let task = prompt.rsplit("Now given question <").next()?;
        task.split('>').next()
    }
}

impl AnnotatorClient for LexicalMockAnnotator {
    fn id(&self) -> &str {
        "mock-lexical"
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let question = Self::question_from_prompt(prompt)
            .ok_or_else(|| Error::Annotator {
                annotator: self.id().into(),
                msg: "prompt has no task question".into(),
            })?;
        let q_tokens: BTreeSet<String> = tokenize(question).into_iter().collect();
        if prompt.contains("List the possible relations") {
            // relation targeting: echo relations fully grounded in the
            // question, i.e. every token of the label occurs in the text.
            // Partial overlap is too loose: connective tokens like "in" or
            // "by" would drag in unrelated relations.
            let rels = prompt
                .rsplit("relations with the entity: <")
                .next()
                .and_then(|s| s.split('>').next())
                .unwrap_or("");
            let mut selected = Vec::new();
            for rel in rels.split(',').map(str::trim).filter(|r| !r.is_empty()) {
                let toks: BTreeSet<String> = tokenize(rel).into_iter().collect();
                if !toks.is_empty() && toks.is_subset(&q_tokens) {
                    selected.push(rel.to_string());
                }
            }
            return Ok(selected.join("\n"));
        }
        // rational paths: score numbered candidate lines in the task block
        let task = prompt.rsplit("the reasoning paths are:").next().unwrap_or("");
        let mut best = 0usize;
        let mut lines: Vec<(usize, usize, &str)> = Vec::new();
        for line in task.lines() {
            let line = line.trim();
            let Some((num, rest)) = line.split_once(". ") else {
                continue;
            };
            let Ok(idx) = num.parse::<usize>() else { continue };
            let toks: BTreeSet<String> = tokenize(rest).into_iter().collect();
            let score = toks.intersection(&q_tokens).count();
            best = best.max(score);
            lines.push((idx, score, rest));
        }
        let mut out = String::from("The rational paths are:\n");
        for (idx, score, rest) in lines {
            if score == best {
                let _ = writeln!(out, "{idx}. {rest}");
            }
        }
        Ok(out)
    }
}

/// Selects every candidate; handy in tests.
pub struct SelectAllAnnotator;

impl AnnotatorClient for SelectAllAnnotator {
    fn id(&self) -> &str {
        "mock-select-all"
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let task = prompt.rsplit("the reasoning paths are:").next().unwrap_or("");
        let mut out = String::new();
        for line in task.lines() {
            let line = line.trim();
            if line
                .split_once(". ")
                .is_some_and(|(n, _)| n.chars().all(|c| c.is_ascii_digit()) && !n.is_empty())
            {
                let _ = writeln!(out, "{line}");
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// HTTP-backed annotator

/// Minimal single-endpoint transport: POST {"prompt": ...} and expect
/// {"text": ...}. The API key is read from the given environment variable.
/// Provider-specific schemas belong in an adapter in front of this.
pub struct HttpAnnotator {
    id: String,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpAnnotator {
    pub fn new(url: &str, api_key_env: &str) -> Self {
        Self {
            id: format!("http:{url}"),
            url: url.to_string(),
            api_key: std::env::var(api_key_env).ok(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl AnnotatorClient for HttpAnnotator {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let mut req = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "prompt": prompt }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Annotator {
            annotator: self.id.clone(),
            msg: e.to_string(),
        })?;
        let body: serde_json::Value = resp.json().map_err(|e| Error::Annotator {
            annotator: self.id.clone(),
            msg: e.to_string(),
        })?;
        body.get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Annotator {
                annotator: self.id.clone(),
                msg: "response has no 'text' field".into(),
            })
    }
}

// ---------------------------------------------------------------------------
// Cache

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub question_id: String,
    pub annotator_id: String,
    /// "rational" or "relations".
    pub kind: String,
    pub candidates: Vec<String>,
    pub rational_indices: Vec<usize>,
    pub raw_response: String,
    pub timestamp: u64,
}

/// Append-only JSONL cache keyed by (question_id, annotator_id, kind).
/// Resumable: the expensive step is the annotator call.
pub struct AnnotationCache {
    path: PathBuf,
    entries: HashMap<(String, String, String), AnnotationRecord>,
    transcript: Option<File>,
}

impl AnnotationCache {
    /// Opens (or creates) the cache file and loads existing entries.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: AnnotationRecord =
                    serde_json::from_str(&line).map_err(|e| Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: e.to_string(),
                    })?;
                entries.insert(
                    (rec.question_id.clone(), rec.annotator_id.clone(), rec.kind.clone()),
                    rec,
                );
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
            transcript: None,
        })
    }

    /// In-memory cache with no backing file.
    pub fn ephemeral() -> Self {
        Self {
            path: PathBuf::new(),
            entries: HashMap::new(),
            transcript: None,
        }
    }

    pub fn with_transcript(mut self, path: &Path) -> Result<Self> {
        self.transcript = Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?,
        );
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, question_id: &str, annotator_id: &str, kind: &str) -> Option<&AnnotationRecord> {
        self.entries
            .get(&(question_id.to_string(), annotator_id.to_string(), kind.to_string()))
    }

    fn put(&mut self, rec: AnnotationRecord) -> Result<()> {
        if !self.path.as_os_str().is_empty() {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| Error::Io {
                    path: self.path.display().to_string(),
                    source: e,
                })?;
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(file, "{line}").map_err(|e| Error::Io {
                path: self.path.display().to_string(),
                source: e,
            })?;
        }
        self.entries.insert(
            (rec.question_id.clone(), rec.annotator_id.clone(), rec.kind.clone()),
            rec,
        );
        Ok(())
    }

    fn log_transcript(&mut self, prompt: &str, response: &str) {
        if let Some(f) = &mut self.transcript {
            let _ = writeln!(f, "--- prompt ---\n{prompt}\n--- response ---\n{response}\n");
        }
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Annotation drivers

const MAX_ATTEMPTS: usize = 3;

/// Outcome of annotating one question.
#[derive(Debug, Clone)]
pub struct AnnotationOutcome {
    /// Selected rational paths (always a subset of the candidates).
    pub paths: Vec<ReasoningPath>,
    /// True when the annotator failed or selected nothing and the result fell
    /// back to shortest-path labels.
    pub fallback: bool,
    pub from_cache: bool,
}

/// Rationalized labeling for one question. Cached; on annotator failure or an
/// empty selection, falls back to the shortest-path labels between the first
/// reachable (question, answer) pair.
pub fn annotate(
    client: &dyn AnnotatorClient,
    q: &QuestionInstance,
    cands: &[ReasoningPath],
    cache: &mut AnnotationCache,
) -> Result<AnnotationOutcome> {
    let rendered: Vec<String> = cands.iter().map(|p| p.render(&q.subgraph)).collect();
    if let Some(rec) = cache.get(&q.question_id, client.id(), "rational") {
        if rec.candidates == rendered {
            let paths = rec
                .rational_indices
                .iter()
                .filter(|&&i| i < cands.len())
                .map(|&i| cands[i].clone())
                .collect::<Vec<_>>();
            if !paths.is_empty() {
                return Ok(AnnotationOutcome {
                    paths,
                    fallback: false,
                    from_cache: true,
                });
            }
        }
    }

    let mut selection: Option<(ParsedSelection, String)> = None;
    if !cands.is_empty() {
        let prompt = build_rational_path_prompt(q, cands)?;
        for _attempt in 0..MAX_ATTEMPTS {
            match client.complete(&prompt) {
                Ok(response) => {
                    cache.log_transcript(&prompt, &response);
                    let parsed = parse_rational_response(&response, cands.len());
                    selection = Some((parsed, response));
                    break;
                }
                Err(_) => continue,
            }
        }
    }

    match selection {
        Some((parsed, raw)) if !parsed.parse_failed => {
            let indices: Vec<usize> = parsed.indices.iter().copied().collect();
            cache.put(AnnotationRecord {
                question_id: q.question_id.clone(),
                annotator_id: client.id().to_string(),
                kind: "rational".into(),
                candidates: rendered,
                rational_indices: indices.clone(),
                raw_response: raw,
                timestamp: now_secs(),
            })?;
            Ok(AnnotationOutcome {
                paths: indices.iter().map(|&i| cands[i].clone()).collect(),
                fallback: false,
                from_cache: false,
            })
        }
        _ => {
            // transport failure or nothing parseable: shortest-path fallback
            let mut paths = Vec::new();
            for &e_q in &q.question_entities {
                for &e_a in &q.answer_entities {
                    let labels = shortest_path_labels(&q.subgraph, e_q, e_a)?;
                    for p in labels {
                        if !paths.contains(&p) {
                            paths.push(p);
                        }
                    }
                }
            }
            Ok(AnnotationOutcome {
                paths,
                fallback: true,
                from_cache: false,
            })
        }
    }
}

/// Relation targeting for one question: the annotator's selection intersected
/// with the subgraph's relations. Cached. An empty parse yields an empty set.
pub fn target_relations(
    client: &dyn AnnotatorClient,
    q: &QuestionInstance,
    cache: &mut AnnotationCache,
) -> Result<RelationTargetSet> {
    let g = &q.subgraph;
    if let Some(rec) = cache.get(&q.question_id, client.id(), "relations") {
        let relations = parse_relation_response(&rec.raw_response, g);
        return Ok(RelationTargetSet {
            question_id: q.question_id.clone(),
            relations,
        });
    }
    let relations: Vec<String> = g.relation_labels().to_vec();
    let prompt = build_relation_targeting_prompt(q, &relations);
    let mut response = String::new();
    for _attempt in 0..MAX_ATTEMPTS {
        match client.complete(&prompt) {
            Ok(r) => {
                response = r;
                break;
            }
            Err(_) => continue,
        }
    }
    cache.log_transcript(&prompt, &response);
    let parsed = parse_relation_response(&response, g);
    cache.put(AnnotationRecord {
        question_id: q.question_id.clone(),
        annotator_id: client.id().to_string(),
        kind: "relations".into(),
        candidates: relations,
        rational_indices: Vec::new(),
        raw_response: response,
        timestamp: now_secs(),
    })?;
    Ok(RelationTargetSet {
        question_id: q.question_id.clone(),
        relations: parsed,
    })
}


// ---------------------------------------------------------------------------
// Corpus-level labeling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStrategy {
    /// Candidate band enumeration followed by annotator selection.
    Rational,
    /// All shortest paths between question and answer entities.
    Shortest,
}

/// Stored labels for one question: paths as triple-id sequences (triple ids
/// are stable because file line order defines them).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub question_id: String,
    pub strategy: LabelStrategy,
    pub fallback: bool,
    pub paths: Vec<Vec<u32>>,
}

impl LabelRecord {
    pub fn to_reasoning_paths(&self, g: &KnowledgeSubgraph) -> Result<Vec<ReasoningPath>> {
        self.paths
            .iter()
            .map(|p| ReasoningPath::new(g, p.iter().map(|&i| crate::kg::TripleId(i)).collect()))
            .collect()
    }
}

/// Label one question. Candidates are unioned over every (question entity,
/// answer entity) pair before annotation.
pub fn label_question(
    client: &dyn AnnotatorClient,
    q: &QuestionInstance,
    cache: &mut AnnotationCache,
    cap: usize,
    strategy: LabelStrategy,
) -> Result<LabelRecord> {
    let g = &q.subgraph;
    let paths: Vec<ReasoningPath>;
    let mut fallback = false;
    match strategy {
        LabelStrategy::Rational => {
            let mut cands: Vec<ReasoningPath> = Vec::new();
            for &e_q in &q.question_entities {
                for &e_a in &q.answer_entities {
                    for p in enumerate_candidate_paths(g, e_q, e_a, cap)?.paths {
                        if !cands.contains(&p) {
                            cands.push(p);
                        }
                    }
                }
            }
            let out = annotate(client, q, &cands, cache)?;
            fallback = out.fallback;
            paths = out.paths;
        }
        LabelStrategy::Shortest => {
            let mut all: Vec<ReasoningPath> = Vec::new();
            for &e_q in &q.question_entities {
                for &e_a in &q.answer_entities {
                    for p in shortest_path_labels(g, e_q, e_a)? {
                        if !all.contains(&p) {
                            all.push(p);
                        }
                    }
                }
            }
            paths = all;
        }
    }
    Ok(LabelRecord {
        question_id: q.question_id.clone(),
        strategy,
        fallback,
        paths: paths
            .into_iter()
            .map(|p| p.triples.iter().map(|t| t.0).collect())
            .collect(),
    })
}

pub fn save_labels(records: &[LabelRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("label record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
