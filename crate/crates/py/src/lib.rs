//! Python bindings for the kgpath retriever: corpus generation, line-graph
//! transformation, labeling, training, retrieval and evaluation, all callable
//! in-process from Python.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kgpath_core::annotate::{
    label_question, target_relations, AnnotationCache, LabelStrategy, LexicalMockAnnotator,
    RelationTargetSet,
};
use kgpath_core::embed::HashEmbedding;
use kgpath_core::infer::{
    extract_answers, greedy_decode as core_greedy_decode, prepare_question, random_walk_retrieve,
    retrieve as core_retrieve, InferenceConfig,
};
use kgpath_core::kg::{KnowledgeSubgraph, QuestionInstance};
use kgpath_core::line_graph::build_line_graph;
use kgpath_core::metrics::{evaluate as core_evaluate, EvalInstance};
use kgpath_core::model::{load_checkpoint, save_checkpoint, RetrieverParams};
use kgpath_core::paths::{shortest_distance, ReasoningPath};
use kgpath_core::synth;
use kgpath_core::train::{build_training_example, train as core_train, TrainConfig};

fn value_err(e: kgpath_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One question with its per-question subgraph.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Question {
    inner: QuestionInstance,
}

#[pymethods]
impl Question {
    #[new]
    fn new(
        question_id: String,
        text: String,
        question_entities: Vec<String>,
        answer_entities: Vec<String>,
        triples: Vec<(String, String, String)>,
    ) -> PyResult<Self> {
        let mut g = KnowledgeSubgraph::new();
        for (h, r, t) in &triples {
            g.add_triple(h, r, t);
        }
        let mut qe = Vec::with_capacity(question_entities.len());
        for label in &question_entities {
            qe.push(g.entity(label).ok_or_else(|| {
                PyValueError::new_err(format!("question entity {label} not in subgraph"))
            })?);
        }
        let mut ae = Vec::new();
        let mut missing = Vec::new();
        for label in &answer_entities {
            match g.entity(label) {
                Some(e) => ae.push(e),
                None => missing.push(label.clone()),
            }
        }
        let answers_in_graph = !ae.is_empty();
        Ok(Self {
            inner: QuestionInstance {
                question_id,
                text,
                question_entities: qe,
                answer_entities: ae,
                missing_answers: missing,
                answers_in_graph,
                subgraph: g,
            },
        })
    }

    #[getter]
    fn question_id(&self) -> &str {
        &self.inner.question_id
    }

    #[getter]
    fn text(&self) -> &str {
        &self.inner.text
    }

    #[getter]
    fn question_entities(&self) -> Vec<String> {
        self.inner
            .question_entities
            .iter()
            .map(|&e| self.inner.subgraph.entity_label(e).to_string())
            .collect()
    }

    #[getter]
    fn answer_entities(&self) -> Vec<String> {
        self.inner
            .answer_entities
            .iter()
            .map(|&e| self.inner.subgraph.entity_label(e).to_string())
            .collect()
    }

    #[getter]
    fn triples(&self) -> Vec<(String, String, String)> {
        let g = &self.inner.subgraph;
        g.triples()
            .iter()
            .map(|t| {
                (
                    g.entity_label(t.head).to_string(),
                    g.relation_label(t.relation).to_string(),
                    g.entity_label(t.tail).to_string(),
                )
            })
            .collect()
    }

    fn is_held_out(&self) -> bool {
        synth::is_held_out(&self.inner.question_id)
    }

    /// Minimum hop distance between two entity labels, or None if unreachable.
    fn shortest_distance(&self, from: &str, to: &str) -> PyResult<Option<usize>> {
        let g = &self.inner.subgraph;
        let s = g
            .entity(from)
            .ok_or_else(|| PyValueError::new_err(format!("unknown entity {from}")))?;
        let t = g
            .entity(to)
            .ok_or_else(|| PyValueError::new_err(format!("unknown entity {to}")))?;
        shortest_distance(g, s, t).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Question(id={:?}, triples={})",
            self.inner.question_id,
            self.inner.subgraph.triple_count()
        )
    }
}

/// A trained retriever checkpoint.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Model {
    params: RetrieverParams,
}

#[pymethods]
impl Model {
    #[getter]
    fn d_text(&self) -> usize {
        self.params.d_text
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.params.hidden
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &path).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: load_checkpoint(&path).map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Model(d_text={}, hidden={})", self.params.d_text, self.params.hidden)
    }
}

/// Paths retrieved for one question, best-scored first. Path nodes are
/// triple indices into the question's subgraph.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Retrieval {
    #[pyo3(get)]
    question_id: String,
    #[pyo3(get)]
    paths: Vec<(Vec<usize>, f64)>,
    /// union of triples on retained paths, ascending
    #[pyo3(get)]
    triples: Vec<usize>,
    /// tail entities of the retained paths' final triples
    #[pyo3(get)]
    answers: Vec<String>,
}

#[pymethods]
impl Retrieval {
    fn __repr__(&self) -> String {
        format!(
            "Retrieval(id={:?}, paths={}, triples={})",
            self.question_id,
            self.paths.len(),
            self.triples.len()
        )
    }
}

/// The bundled deterministic 50-question corpus (10 templates x 5 instances).
#[pyfunction]
fn generate_corpus(seed: u64) -> Vec<Question> {
    synth::generate_corpus(seed)
        .into_iter()
        .map(|inner| Question { inner })
        .collect()
}

/// Split a corpus into (training, held-out) by question template.
#[pyfunction]
fn split_by_template(questions: Vec<Question>) -> (Vec<Question>, Vec<Question>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for q in questions {
        if q.is_held_out() {
            test.push(q);
        } else {
            train.push(q);
        }
    }
    (train, test)
}

/// Directed line-graph edges of a question's subgraph: node i is triple i,
/// and (x, y) is an edge iff triple x's tail equals triple y's head.
#[pyfunction]
fn line_graph_edges(question: &Question) -> Vec<(usize, usize)> {
    let lg = build_line_graph(&question.inner.subgraph);
    let mut edges = Vec::with_capacity(lg.edge_count());
    for x in lg.nodes() {
        for &y in lg.successors(x) {
            edges.push((x.index(), y as usize));
        }
    }
    edges
}

/// Label questions with the offline lexical annotator. Returns
/// (question_id, paths) pairs, each path a list of triple indices.
#[pyfunction]
#[pyo3(signature = (questions, strategy="rational", cap=200))]
fn label_questions(
    questions: Vec<Question>,
    strategy: &str,
    cap: usize,
) -> PyResult<Vec<(String, Vec<Vec<usize>>)>> {
    let strategy = match strategy {
        "rational" => LabelStrategy::Rational,
        "shortest" => LabelStrategy::Shortest,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown strategy {other:?}: expected \"rational\" or \"shortest\""
            )))
        }
    };
    let mut cache = AnnotationCache::ephemeral();
    let mut out = Vec::with_capacity(questions.len());
    for q in &questions {
        let rec = label_question(&LexicalMockAnnotator, &q.inner, &mut cache, cap, strategy)
            .map_err(value_err)?;
        let paths = rec
            .paths
            .iter()
            .map(|p| p.iter().map(|&t| t as usize).collect())
            .collect();
        out.push((q.inner.question_id.clone(), paths));
    }
    Ok(out)
}

/// Annotator-targeted relation labels per question (positive-sample
/// augmentation during training).
#[pyfunction]
fn relation_targets(questions: Vec<Question>) -> PyResult<Vec<(String, Vec<String>)>> {
    let mut cache = AnnotationCache::ephemeral();
    let mut out = Vec::with_capacity(questions.len());
    for q in &questions {
        let t = target_relations(&LexicalMockAnnotator, &q.inner, &mut cache).map_err(value_err)?;
        let labels = t
            .relations
            .iter()
            .map(|&r| q.inner.subgraph.relation_label(r).to_string())
            .collect();
        out.push((q.inner.question_id.clone(), labels));
    }
    Ok(out)
}

fn reasoning_paths(q: &QuestionInstance, paths: &[Vec<usize>]) -> PyResult<Vec<ReasoningPath>> {
    paths
        .iter()
        .map(|p| {
            let ids = p
                .iter()
                .map(|&i| kgpath_core::kg::TripleId(i as u32))
                .collect();
            ReasoningPath::new(&q.subgraph, ids).map_err(value_err)
        })
        .collect()
}

/// Train a retriever. `labels` is the output of `label_questions`; `targets`
/// the output of `relation_targets` (or None). Returns (model, loss_trace).
#[pyfunction]
#[pyo3(signature = (
    questions, labels, targets=None, dim=64, epochs=15, hidden=512, batch_size=10,
    learning_rate=1e-3, dropout=0.2, lambda_q=1.0, lambda_path=1.0, seed=0,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    questions: Vec<Question>,
    labels: Vec<(String, Vec<Vec<usize>>)>,
    targets: Option<Vec<(String, Vec<String>)>>,
    dim: usize,
    epochs: usize,
    hidden: usize,
    batch_size: usize,
    learning_rate: f64,
    dropout: f64,
    lambda_q: f64,
    lambda_path: f64,
    seed: u64,
) -> PyResult<(Model, Vec<f64>)> {
    let provider = HashEmbedding::new(dim);
    let mut examples = Vec::new();
    for q in &questions {
        let Some((_, paths)) = labels.iter().find(|(id, _)| *id == q.inner.question_id) else {
            continue;
        };
        if paths.is_empty() {
            continue;
        }
        let paths = reasoning_paths(&q.inner, paths)?;
        let target_set = targets.as_ref().and_then(|ts| {
            ts.iter()
                .find(|(id, _)| *id == q.inner.question_id)
                .map(|(id, rels)| RelationTargetSet {
                    question_id: id.clone(),
                    relations: rels
                        .iter()
                        .filter_map(|r| q.inner.subgraph.relation(r))
                        .collect(),
                })
        });
        examples.push(
            build_training_example(&q.inner, &paths, target_set.as_ref(), &provider)
                .map_err(value_err)?,
        );
    }
    let config = TrainConfig {
        epochs,
        learning_rate,
        batch_size,
        dropout,
        hidden,
        lambda_q,
        lambda_path,
        seed,
    };
    let outcome = core_train(&examples, dim, &config).map_err(value_err)?;
    let trace = outcome.trace.iter().map(|r| r.total_loss).collect();
    Ok((Model { params: outcome.params }, trace))
}

/// Highest-probability path for one question (argmax start, argmax steps).
#[pyfunction]
fn greedy_decode(model: &Model, question: &Question) -> PyResult<Vec<usize>> {
    let provider = HashEmbedding::new(model.params.d_text);
    let prepared = prepare_question(&question.inner, &provider);
    core_greedy_decode(&model.params, &prepared).map_err(value_err)
}

/// Stochastic path-rollout retrieval: K sampled starts, ranked and truncated
/// to M unique paths. `random_baseline=True` swaps in the uniform
/// random-walk retriever under the same budget.
#[pyfunction]
#[pyo3(signature = (model, questions, k=60, m=80, max_hops=4, seed=0, random_baseline=false))]
fn retrieve(
    model: &Model,
    questions: Vec<Question>,
    k: usize,
    m: usize,
    max_hops: usize,
    seed: u64,
    random_baseline: bool,
) -> PyResult<Vec<Retrieval>> {
    let provider = HashEmbedding::new(model.params.d_text);
    let config = InferenceConfig {
        k_starts: k,
        m_paths: m,
        max_hops,
        seed,
        ..InferenceConfig::default()
    };
    let mut out = Vec::with_capacity(questions.len());
    for q in &questions {
        let prepared = prepare_question(&q.inner, &provider);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let result = if random_baseline {
            random_walk_retrieve(&prepared, &config, &mut rng).map_err(value_err)?
        } else {
            core_retrieve(&model.params, &prepared, &config, &mut rng).map_err(value_err)?
        };
        let answers = extract_answers(&q.inner.subgraph, &result);
        out.push(Retrieval {
            question_id: result.question_id,
            paths: result
                .paths
                .iter()
                .map(|p| (p.nodes.clone(), p.score))
                .collect(),
            triples: result.triples,
            answers,
        });
    }
    Ok(out)
}

/// Aggregate Hit / Macro-F1 / hop-bucket report over retrievals.
#[pyfunction]
fn evaluate(questions: Vec<Question>, retrievals: Vec<Retrieval>) -> PyResult<HashMap<String, f64>> {
    let mut instances = Vec::with_capacity(questions.len());
    for q in &questions {
        let r = retrievals
            .iter()
            .find(|r| r.question_id == q.inner.question_id)
            .ok_or_else(|| {
                PyValueError::new_err(format!("no retrieval for {}", q.inner.question_id))
            })?;
        instances.push(EvalInstance {
            question: &q.inner,
            predicted: r.answers.clone(),
            retrieved_triple_count: r.triples.len(),
        });
    }
    let report = core_evaluate(&instances);
    let mut out = HashMap::new();
    out.insert("count".to_string(), report.count as f64);
    out.insert("hit".to_string(), report.hit);
    out.insert("macro_f1".to_string(), report.macro_f1);
    out.insert("hop1_hit".to_string(), report.hop1.hit);
    out.insert("hop2_hit".to_string(), report.hop2.hit);
    out.insert("hop3_plus_hit".to_string(), report.hop3_plus.hit);
    out.insert("answers_absent".to_string(), report.answers_absent as f64);
    out.insert(
        "mean_retrieved_triples".to_string(),
        report.mean_retrieved_triples,
    );
    Ok(out)
}

#[pymodule]
fn kgpath_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Question>()?;
    m.add_class::<Model>()?;
    m.add_class::<Retrieval>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(split_by_template, m)?)?;
    m.add_function(wrap_pyfunction!(line_graph_edges, m)?)?;
    m.add_function(wrap_pyfunction!(label_questions, m)?)?;
    m.add_function(wrap_pyfunction!(relation_targets, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
