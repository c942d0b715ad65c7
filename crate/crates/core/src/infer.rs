//! Inference: sample start triples, roll out paths step by step, rank by
//! accumulated log-probability, truncate and deduplicate.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeSubgraph, QuestionInstance, TripleId};
use crate::line_graph::{build_line_graph, reverse, LineGraphView};
use crate::model::{encode, feature_matrix, step_distribution, Mode, RetrieverParams, StepChoice};

pub const ROLLOUTS_PER_START: usize = 5;
pub const DEFAULT_MAX_HOPS: usize = 4;

/// (K, M) operating points: K sampled starts, M retained paths.
pub const PRESETS: [(usize, usize); 3] = [(60, 80), (80, 120), (120, 200)];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub k_starts: usize,
    pub m_paths: usize,
    pub rollouts_per_start: usize,
    pub max_hops: usize,
    /// Default ranks all rollouts, truncates to M, then deduplicates keeping
    /// the best-scored copy. Flipping this deduplicates before truncation.
    pub dedup_before_truncate: bool,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k_starts: 60,
            m_paths: 80,
            rollouts_per_start: ROLLOUTS_PER_START,
            max_hops: DEFAULT_MAX_HOPS,
            dedup_before_truncate: false,
            seed: 0,
        }
    }
}

/// A retrieved path over line-graph nodes (= triple ids) with its total
/// log-probability: start selection + each transition + termination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub nodes: Vec<usize>,
    pub score: f64,
}

/// Per-question tensors reused across seeds and operating points.
pub struct PreparedQuestion {
    pub question_id: String,
    pub lg: LineGraphView,
    pub rev: LineGraphView,
    pub features: Array2<f64>,
    pub question_embedding: Array1<f64>,
    /// start candidates: triples headed by a question entity
    pub v_cand: Vec<usize>,
}

pub fn prepare_question(q: &QuestionInstance, provider: &dyn EmbeddingProvider) -> PreparedQuestion {
    let g = &q.subgraph;
    let lg = build_line_graph(g);
    let rev = reverse(&lg);
    let mut v_cand: BTreeSet<usize> = BTreeSet::new();
    for &e in &q.question_entities {
        for &t in g.outgoing(e) {
            v_cand.insert(t.index());
        }
    }
    PreparedQuestion {
        question_id: q.question_id.clone(),
        lg,
        rev,
        features: feature_matrix(g, provider),
        question_embedding: Array1::from(provider.embed(&q.text)),
        v_cand: v_cand.into_iter().collect(),
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Softmax distribution over the start candidates by question affinity.
pub fn start_distribution(z: &Array2<f64>, z_q: &Array1<f64>, v_cand: &[usize]) -> Vec<f64> {
    let logits: Vec<f64> = v_cand.iter().map(|&v| z_q.dot(&z.row(v))).collect();
    log_softmax(&logits).into_iter().map(f64::exp).collect()
}

/// One stochastic rollout from `start`, stopping on STOP or at `max_hops`
/// triples (the terminal STOP probability from the truncating step is still
/// charged to the score).
pub fn rollout_path(
    params: &RetrieverParams,
    lg: &LineGraphView,
    z: &Array2<f64>,
    z_q: &Array1<f64>,
    start: usize,
    max_hops: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ScoredPath> {
    let mut nodes = vec![start];
    let mut score = 0.0;
    loop {
        let current = *nodes.last().unwrap();
        let dist = step_distribution(params, lg, z, z_q, current, &nodes)?;
        if nodes.len() >= max_hops {
            let p_stop = dist
                .prob_of(StepChoice::Stop)
                .ok_or_else(|| Error::Contract("distribution lacks STOP".into()))?;
            score += p_stop.max(f64::MIN_POSITIVE).ln();
            break;
        }
        let idx = WeightedIndex::new(&dist.probs)
            .map_err(|e| Error::Contract(format!("degenerate step distribution: {e}")))?
            .sample(rng);
        score += dist.probs[idx].max(f64::MIN_POSITIVE).ln();
        match dist.choices[idx] {
            StepChoice::Stop => break,
            StepChoice::Node(next) => nodes.push(next),
        }
    }
    Ok(ScoredPath { nodes, score })
}

/// Greedy decode: argmax start over the candidate distribution, then argmax
/// at every step until STOP.
pub fn greedy_decode(
    params: &RetrieverParams,
    prepared: &PreparedQuestion,
) -> Result<Vec<usize>> {
    if prepared.v_cand.is_empty() {
        return Err(Error::Contract("no start candidates".into()));
    }
    let z = encode(
        params,
        &prepared.lg,
        &prepared.rev,
        &prepared.features,
        Mode::Eval,
        0.0,
        None,
    )?;
    let z_q = params.project_question(&prepared.question_embedding);
    let probs = start_distribution(&z, &z_q, &prepared.v_cand);
    let best = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .unwrap()
        .0;
    let mut nodes = vec![prepared.v_cand[best]];
    loop {
        let current = *nodes.last().unwrap();
        let dist = step_distribution(params, &prepared.lg, &z, &z_q, current, &nodes)?;
        let pick = dist
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        match dist.choices[pick] {
            StepChoice::Stop => break,
            StepChoice::Node(next) => nodes.push(next),
        }
        if nodes.len() >= DEFAULT_MAX_HOPS {
            break;
        }
    }
    Ok(nodes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub question_id: String,
    pub paths: Vec<ScoredPath>,
    /// union of triples on retained paths, ascending
    pub triples: Vec<usize>,
}

fn dedup_keep_best(paths: Vec<ScoredPath>) -> Vec<ScoredPath> {
    // input is sorted best-first; first occurrence wins
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    paths
        .into_iter()
        .filter(|p| seen.insert(p.nodes.clone()))
        .collect()
}

/// K sampled starts x rollouts each, ranked by total log-probability (ties
/// broken by node sequence for determinism), truncated to M and
/// deduplicated. Deterministic for a fixed config seed.
pub fn retrieve(
    params: &RetrieverParams,
    prepared: &PreparedQuestion,
    config: &InferenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RetrievalResult> {
    if prepared.v_cand.is_empty() {
        return Ok(RetrievalResult {
            question_id: prepared.question_id.clone(),
            paths: Vec::new(),
            triples: Vec::new(),
        });
    }
    let z = encode(
        params,
        &prepared.lg,
        &prepared.rev,
        &prepared.features,
        Mode::Eval,
        0.0,
        None,
    )?;
    let z_q = params.project_question(&prepared.question_embedding);
    let start_probs = start_distribution(&z, &z_q, &prepared.v_cand);
    let start_dist = WeightedIndex::new(&start_probs)
        .map_err(|e| Error::Contract(format!("degenerate start distribution: {e}")))?;

    let mut all = Vec::with_capacity(config.k_starts * config.rollouts_per_start);
    for _ in 0..config.k_starts {
        let si = start_dist.sample(rng);
        let start = prepared.v_cand[si];
        let start_logp = start_probs[si].max(f64::MIN_POSITIVE).ln();
        for _ in 0..config.rollouts_per_start {
            let mut p = rollout_path(params, &prepared.lg, &z, &z_q, start, config.max_hops, rng)?;
            p.score += start_logp;
            all.push(p);
        }
    }
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.nodes.cmp(&b.nodes))
    });
    let paths = if config.dedup_before_truncate {
        let mut p = dedup_keep_best(all);
        p.truncate(config.m_paths);
        p
    } else {
        all.truncate(config.m_paths);
        dedup_keep_best(all)
    };
    let triples: BTreeSet<usize> = paths.iter().flat_map(|p| p.nodes.iter().copied()).collect();
    Ok(RetrievalResult {
        question_id: prepared.question_id.clone(),
        paths,
        triples: triples.into_iter().collect(),
    })
}

/// Uniform random-walk baseline under the same K/M budget: uniform start
/// among candidates, uniform choice among fresh successors plus STOP,
/// identical ranking/truncation/dedup machinery.
pub fn random_walk_retrieve(
    prepared: &PreparedQuestion,
    config: &InferenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RetrievalResult> {
    if prepared.v_cand.is_empty() {
        return Ok(RetrievalResult {
            question_id: prepared.question_id.clone(),
            paths: Vec::new(),
            triples: Vec::new(),
        });
    }
    let start_logp = -(prepared.v_cand.len() as f64).ln();
    let mut all = Vec::with_capacity(config.k_starts * config.rollouts_per_start);
    for _ in 0..config.k_starts {
        let start = prepared.v_cand[rng.gen_range(0..prepared.v_cand.len())];
        for _ in 0..config.rollouts_per_start {
            let mut nodes = vec![start];
            let mut score = start_logp;
            loop {
                let current = *nodes.last().unwrap();
                let fresh: Vec<usize> = prepared
                    .lg
                    .successors(TripleId(current as u32))
                    .iter()
                    .map(|&s| s as usize)
                    .filter(|s| !nodes.contains(s))
                    .collect();
                let n_choices = fresh.len() + 1; // + STOP
                score -= (n_choices as f64).ln();
                if nodes.len() >= config.max_hops {
                    break;
                }
                let pick = rng.gen_range(0..n_choices);
                if pick == fresh.len() {
                    break;
                }
                nodes.push(fresh[pick]);
            }
            all.push(ScoredPath { nodes, score });
        }
    }
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.nodes.cmp(&b.nodes))
    });
    let paths = if config.dedup_before_truncate {
        let mut p = dedup_keep_best(all);
        p.truncate(config.m_paths);
        p
    } else {
        all.truncate(config.m_paths);
        dedup_keep_best(all)
    };
    let triples: BTreeSet<usize> = paths.iter().flat_map(|p| p.nodes.iter().copied()).collect();
    Ok(RetrievalResult {
        question_id: prepared.question_id.clone(),
        paths,
        triples: triples.into_iter().collect(),
    })
}

/// Answer candidates read off the retrieved paths: the tail entity of each
/// path's final triple.
pub fn extract_answers(g: &KnowledgeSubgraph, result: &RetrievalResult) -> Vec<String> {
    let mut out: BTreeSet<String> = BTreeSet::new();
    for p in &result.paths {
        if let Some(&last) = p.nodes.last() {
            let t = g.triple(TripleId(last as u32));
            out.insert(g.entity_label(t.tail).to_string());
        }
    }
    out.into_iter().collect()
}

/// Plain-text rendering of the retrieved paths, one per line, best first —
/// the hand-off format for a downstream reader model.
pub fn serialize_for_reasoner(g: &KnowledgeSubgraph, result: &RetrievalResult) -> String {
    let mut out = String::new();
    for p in &result.paths {
        let path = crate::paths::ReasoningPath {
            triples: p.nodes.iter().map(|&n| TripleId(n as u32)).collect(),
        };
        out.push_str(&path.render(g));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedding;
    use crate::kg::TripleId;
    use crate::model::RetrieverParams;
    use crate::synth::generate_corpus;
    use rand::SeedableRng;

    fn setup() -> (crate::kg::QuestionInstance, PreparedQuestion, RetrieverParams) {
        let corpus = generate_corpus(12);
        let q = corpus
            .into_iter()
            .find(|q| q.question_id == "t03_i0")
            .unwrap();
        let provider = HashEmbedding::new(8);
        let prepared = prepare_question(&q, &provider);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = RetrieverParams::init(8, 16, &mut rng);
        (q, prepared, params)
    }

    fn path_is_walk(lg: &LineGraphView, nodes: &[usize]) -> bool {
        nodes
            .windows(2)
            .all(|w| lg.has_edge(TripleId(w[0] as u32), TripleId(w[1] as u32)))
    }

    #[test]
    fn retrieve_is_deterministic_and_bounded() {
        let (_, prepared, params) = setup();
        let config = InferenceConfig {
            k_starts: 20,
            m_paths: 15,
            seed: 5,
            ..InferenceConfig::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(config.seed);
        let a = retrieve(&params, &prepared, &config, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(config.seed);
        let b = retrieve(&params, &prepared, &config, &mut r2).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.triples, b.triples);
        assert!(a.paths.len() <= config.m_paths);
        // unique paths, sorted best-first
        for w in a.paths.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_ne!(w[0].nodes, w[1].nodes);
        }
        for p in &a.paths {
            assert!(path_is_walk(&prepared.lg, &p.nodes));
            assert!(p.nodes.len() <= config.max_hops);
            assert!(p.score <= 0.0);
            // starts at a candidate triple
            assert!(prepared.v_cand.contains(&p.nodes[0]));
        }
    }

    #[test]
    fn random_walk_baseline_has_same_contract() {
        let (_, prepared, _) = setup();
        let config = InferenceConfig {
            k_starts: 10,
            m_paths: 8,
            seed: 9,
            ..InferenceConfig::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let a = random_walk_retrieve(&prepared, &config, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b = random_walk_retrieve(&prepared, &config, &mut r2).unwrap();
        assert_eq!(a.paths, b.paths);
        assert!(a.paths.len() <= 8);
        for p in &a.paths {
            assert!(path_is_walk(&prepared.lg, &p.nodes));
            assert!(prepared.v_cand.contains(&p.nodes[0]));
        }
    }

    #[test]
    fn answers_and_reasoner_serialization_read_off_path_tails() {
        let (q, prepared, params) = setup();
        let config = InferenceConfig {
            k_starts: 10,
            m_paths: 10,
            ..InferenceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let result = retrieve(&params, &prepared, &config, &mut rng).unwrap();
        assert!(!result.paths.is_empty());
        let answers = extract_answers(&q.subgraph, &result);
        for p in &result.paths {
            let last = q.subgraph.triple(TripleId(*p.nodes.last().unwrap() as u32));
            assert!(answers.contains(&q.subgraph.entity_label(last.tail).to_string()));
        }
        let text = serialize_for_reasoner(&q.subgraph, &result);
        assert_eq!(text.lines().count(), result.paths.len());
        assert!(text.contains("-->"));
    }

    #[test]
    fn greedy_decode_is_deterministic_walk() {
        let (_, prepared, params) = setup();
        let a = greedy_decode(&params, &prepared).unwrap();
        let b = greedy_decode(&params, &prepared).unwrap();
        assert_eq!(a, b);
        assert!(path_is_walk(&prepared.lg, &a));
        assert!(prepared.v_cand.contains(&a[0]));
    }

    #[test]
    fn empty_candidates_yield_empty_result() {
        let (q, _, params) = setup();
        let provider = HashEmbedding::new(8);
        let mut q2 = q.clone();
        q2.question_entities = vec![q2.answer_entities[0]];
        // answer entity has outgoing continuations, so take one with none
        let mut isolated = None;
        for e in 0..q2.subgraph.entity_count() {
            let id = crate::kg::EntityId(e as u32);
            if q2.subgraph.outgoing(id).is_empty() {
                isolated = Some(id);
                break;
            }
        }
        q2.question_entities = vec![isolated.unwrap()];
        let prepared = prepare_question(&q2, &provider);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = retrieve(&params, &prepared, &InferenceConfig::default(), &mut rng).unwrap();
        assert!(out.paths.is_empty());
        assert!(out.triples.is_empty());
    }
}
