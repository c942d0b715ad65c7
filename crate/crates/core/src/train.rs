//! Mini-batch training of the retriever with per-visit gold-path sampling.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::annotate::RelationTargetSet;
use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::kg::QuestionInstance;
use crate::line_graph::{build_line_graph, lift_path, reverse};
use crate::model::{compute_losses, feature_matrix, Mode, RetrieverParams, TrainingExample};
use crate::paths::ReasoningPath;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub hidden: usize,
    pub lambda_q: f64,
    pub lambda_path: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 1e-3,
            batch_size: 10,
            dropout: 0.2,
            hidden: 512,
            lambda_q: 1.0,
            lambda_path: 1.0,
            seed: 0,
        }
    }
}

/// Assemble the fixed per-question tensors and index sets.
///
/// Start candidates are the triples headed by a question entity. A candidate
/// is positive when it begins a labeled path or when its relation belongs to
/// the targeted relation set; the remaining candidates are negatives.
pub fn build_training_example(
    q: &QuestionInstance,
    rational_paths: &[ReasoningPath],
    relation_targets: Option<&RelationTargetSet>,
    provider: &dyn EmbeddingProvider,
) -> Result<TrainingExample> {
    let g = &q.subgraph;
    if rational_paths.is_empty() {
        return Err(Error::Validation {
            question_id: q.question_id.clone(),
            msg: "no labeled paths".into(),
        });
    }
    let lg = build_line_graph(g);
    let rev = reverse(&lg);
    let features = feature_matrix(g, provider);
    let question_embedding = Array1::from(provider.embed(&q.text));

    let mut gold_paths = Vec::with_capacity(rational_paths.len());
    for p in rational_paths {
        let lifted = lift_path(g, &p.triples)?;
        gold_paths.push(lifted.iter().map(|t| t.index()).collect::<Vec<_>>());
    }

    let mut candidates: BTreeSet<usize> = BTreeSet::new();
    for &e in &q.question_entities {
        for &t in g.outgoing(e) {
            candidates.insert(t.index());
        }
    }
    let mut pos: BTreeSet<usize> = gold_paths.iter().map(|p| p[0]).collect();
    if let Some(targets) = relation_targets {
        for &c in &candidates {
            let rel = g.triples()[c].relation;
            if targets.relations.contains(&rel) {
                pos.insert(c);
            }
        }
    }
    let v_neg: Vec<usize> = candidates.iter().copied().filter(|c| !pos.contains(c)).collect();
    Ok(TrainingExample {
        question_id: q.question_id.clone(),
        question_embedding,
        features,
        lg,
        rev,
        gold_paths,
        v_pos: pos.into_iter().collect(),
        v_neg,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub path_loss: f64,
    pub question_loss: f64,
    pub total_loss: f64,
}

pub struct TrainOutcome {
    pub params: RetrieverParams,
    pub trace: Vec<EpochRecord>,
}

/// Mini-batch Adam training. Each visit of an example samples one of its
/// labeled paths uniformly as the gold path for that step. Deterministic for
/// a fixed config seed.
pub fn train(
    examples: &[TrainingExample],
    d_text: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_until(examples, d_text, config, 0, |_| false)
}

/// `train` with an early-stop probe: every `check_every` epochs (0 disables
/// probing) `stop` is called with the current parameters and may end
/// training early, e.g. once a recovery target is met.
pub fn train_until(
    examples: &[TrainingExample],
    d_text: usize,
    config: &TrainConfig,
    check_every: usize,
    mut stop: impl FnMut(&RetrieverParams) -> bool,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = RetrieverParams::init(d_text, config.hidden, &mut rng);
    let mut opt = Adam::new(config.learning_rate, &params);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut path_sum = 0.0;
        let mut q_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            for &idx in batch {
                let ex = &examples[idx];
                let gold = &ex.gold_paths[rng.gen_range(0..ex.gold_paths.len())];
                let out = compute_losses(
                    ex,
                    gold,
                    &params,
                    config.lambda_q,
                    config.lambda_path,
                    Mode::Train,
                    config.dropout,
                    Some(&mut rng),
                    true,
                )?;
                path_sum += out.path_loss;
                q_sum += out.question_loss;
                let g = out.grads.unwrap();
                let scale = 1.0 / batch.len() as f64;
                for (acc, part) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.scaled_add(scale, part);
                }
            }
            opt.step(&mut params, &grads);
        }
        params.check_finite()?;
        let n = examples.len() as f64;
        trace.push(EpochRecord {
            epoch,
            path_loss: path_sum / n,
            question_loss: q_sum / n,
            total_loss: (config.lambda_path * path_sum + config.lambda_q * q_sum) / n,
        });
        if check_every > 0 && (epoch + 1) % check_every == 0 && stop(&params) {
            break;
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Convenience: build examples for a labeled dataset, skipping questions
/// without labels and reporting how many were used.
pub fn build_examples(
    questions: &[QuestionInstance],
    labels: &[(String, Vec<ReasoningPath>)],
    targets: &[RelationTargetSet],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for q in questions {
        let Some((_, paths)) = labels.iter().find(|(id, _)| *id == q.question_id) else {
            continue;
        };
        if paths.is_empty() {
            continue;
        }
        let t = targets.iter().find(|t| t.question_id == q.question_id);
        out.push(build_training_example(q, paths, t, provider)?);
    }
    Ok(out)
}
