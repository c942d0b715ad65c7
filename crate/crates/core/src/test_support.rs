//! Deterministic random-graph generators shared by unit, property, and
//! acceptance tests. Not part of the stable API.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{EmbeddingProvider, HashEmbedding};
use crate::kg::{KnowledgeSubgraph, TripleId};
use crate::line_graph::{build_line_graph, reverse};
use crate::model::{compute_losses, feature_matrix, Mode, RetrieverParams, TrainingExample};

/// Random directed multigraph with up to `max_entities` entities and
/// `max_triples` triples (self loops and parallel edges allowed).
pub fn random_graph(rng: &mut impl Rng, max_entities: usize, max_triples: usize) -> KnowledgeSubgraph {
    let n_ent = rng.gen_range(1..=max_entities);
    let n_tri = rng.gen_range(0..=max_triples);
    let mut g = KnowledgeSubgraph::new();
    for _ in 0..n_tri {
        let h = rng.gen_range(0..n_ent);
        let t = rng.gen_range(0..n_ent);
        let r = rng.gen_range(0..4);
        g.add_triple(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
    }
    g
}

/// All directed walks of exactly `k` edges, as contiguous triple sequences.
pub fn all_walks(g: &KnowledgeSubgraph, k: usize) -> Vec<Vec<TripleId>> {
    assert!(k >= 1);
    let mut walks: Vec<Vec<TripleId>> = g.triples().iter().map(|t| vec![t.id]).collect();
    for _ in 1..k {
        let mut next = Vec::new();
        for w in &walks {
            let last = g.triple(*w.last().unwrap());
            for &succ in g.outgoing(last.tail) {
                let mut q = w.clone();
                q.push(succ);
                next.push(q);
            }
        }
        walks = next;
    }
    walks
}

/// Random small fixture for loss/gradient tests: a random graph with at
/// least one line-graph node, hash features, a random gold walk, and a
/// nonempty positive/negative split. `None` when the draw has no triples.
pub fn random_training_example(
    rng: &mut ChaCha8Rng,
    d_text: usize,
    max_entities: usize,
    max_triples: usize,
) -> Option<TrainingExample> {
    let g = random_graph(rng, max_entities, max_triples);
    if g.triple_count() == 0 {
        return None;
    }
    let lg = build_line_graph(&g);
    let provider = HashEmbedding::new(d_text);
    let features = feature_matrix(&g, &provider);
    let question_embedding = Array1::from(provider.embed("which entity does the walk reach"));

    // random triple-simple gold walk of up to 3 steps
    let mut gold = vec![rng.gen_range(0..g.triple_count())];
    for _ in 0..rng.gen_range(0..3) {
        let succs: Vec<usize> = lg
            .successors(TripleId(*gold.last().unwrap() as u32))
            .iter()
            .map(|&s| s as usize)
            .filter(|s| !gold.contains(s))
            .collect();
        if succs.is_empty() {
            break;
        }
        gold.push(succs[rng.gen_range(0..succs.len())]);
    }
    let v_pos = vec![gold[0]];
    let v_neg: Vec<usize> = (0..g.triple_count()).filter(|&i| i != gold[0]).take(3).collect();
    Some(TrainingExample {
        question_id: "fixture".into(),
        question_embedding,
        features,
        rev: reverse(&lg),
        lg,
        gold_paths: vec![gold],
        v_pos,
        v_neg,
    })
}

/// Max relative error between analytic gradients and central finite
/// differences of lambda_q*L_q + lambda_path*L_path over every parameter
/// entry. Entries where both magnitudes fall below 1e-6 are skipped (roundoff
/// noise in the difference quotient is of that order relative to them), as are
/// entries whose +/-eps probes straddle a ReLU kink: there the loss is not
/// differentiable and the central difference mixes the slopes of both sides.
/// A kink shows up as a second difference of order eps*|slope jump|, far
/// above the eps^2*|f''| of a smooth point, so it is detected by comparing
/// the second difference against the one-sided first differences.
pub fn finite_difference_check(
    example: &TrainingExample,
    gold: &[usize],
    params: &RetrieverParams,
    lambda_q: f64,
    lambda_path: f64,
    eps: f64,
) -> f64 {
    let loss = |p: &RetrieverParams| -> f64 {
        let out = compute_losses(example, gold, p, lambda_q, lambda_path, Mode::Eval, 0.0, None, false)
            .expect("loss evaluates");
        lambda_q * out.question_loss + lambda_path * out.path_loss
    };
    let analytic = crate::model::gradients(example, gold, params, lambda_q, lambda_path)
        .expect("gradients evaluate")
        .2;
    let center = loss(params);
    let mut max_rel: f64 = 0.0;
    let mut probe = params.clone();
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let (rows, cols) = params.tensors()[ti].dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = probe.tensors()[ti][[r, c]];
                probe.tensors_mut()[ti][[r, c]] = orig + eps;
                let up = loss(&probe);
                probe.tensors_mut()[ti][[r, c]] = orig - eps;
                let down = loss(&probe);
                probe.tensors_mut()[ti][[r, c]] = orig;
                let second = (up - 2.0 * center + down).abs();
                let first = (up - center).abs().max((center - down).abs());
                if second > 10.0 * eps * first {
                    continue;
                }
                let fd = (up - down) / (2.0 * eps);
                let a = analytic.tensors()[ti][[r, c]];
                let denom = a.abs().max(fd.abs());
                if denom < 1e-6 {
                    continue;
                }
                max_rel = max_rel.max((a - fd).abs() / denom);
            }
        }
    }
    max_rel
}

/// A deterministic feature matrix with entries in [-1, 1) for tests that
/// want full control over dimensions.
pub fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}
