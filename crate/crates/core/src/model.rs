//! The learned retriever: triple features, bidirectional two-layer graph
//! convolution over the line graph with look-ahead combination, STOP head,
//! path loss, question-triple negative-sampling loss, and exact analytic
//! gradients for all parameter tensors.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeSubgraph, Triple};
use crate::line_graph::LineGraphView;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// phi(e, r, e'): concatenation of head, relation and tail embeddings.
pub fn triple_feature(g: &KnowledgeSubgraph, t: &Triple, provider: &dyn EmbeddingProvider) -> Vec<f64> {
    let mut out = provider.embed(g.entity_label(t.head));
    out.extend(provider.embed(g.relation_label(t.relation)));
    out.extend(provider.embed(g.entity_label(t.tail)));
    out
}

/// Feature matrix for all triples of a subgraph, row i = triple i.
pub fn feature_matrix(g: &KnowledgeSubgraph, provider: &dyn EmbeddingProvider) -> Array2<f64> {
    let d = 3 * provider.dim();
    let mut m = Array2::zeros((g.triple_count(), d));
    for t in g.triples() {
        let row = triple_feature(g, t, provider);
        m.row_mut(t.id.index()).assign(&Array1::from(row));
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// All parameter tensors. Biases are stored as 1 x H rows so every tensor is
/// a matrix and optimizer/serialization code stays uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverParams {
    pub d_text: usize,
    pub hidden: usize,
    /// 3*d_text -> hidden
    pub input_proj: Array2<f64>,
    /// d_text -> hidden
    pub question_proj: Array2<f64>,
    pub fwd1_agg: Array2<f64>,
    pub fwd1_self: Array2<f64>,
    pub fwd2_agg: Array2<f64>,
    pub fwd2_self: Array2<f64>,
    pub bwd1_agg: Array2<f64>,
    pub bwd1_self: Array2<f64>,
    pub bwd2_agg: Array2<f64>,
    pub bwd2_self: Array2<f64>,
    /// 2*hidden -> hidden
    pub stop_w1: Array2<f64>,
    pub stop_b1: Array2<f64>,
    pub stop_w2: Array2<f64>,
    pub stop_b2: Array2<f64>,
}

macro_rules! for_each_tensor {
    ($self:ident, $f:expr) => {{
        let mut f = $f;
        f("input_proj", &$self.input_proj);
        f("question_proj", &$self.question_proj);
        f("fwd1_agg", &$self.fwd1_agg);
        f("fwd1_self", &$self.fwd1_self);
        f("fwd2_agg", &$self.fwd2_agg);
        f("fwd2_self", &$self.fwd2_self);
        f("bwd1_agg", &$self.bwd1_agg);
        f("bwd1_self", &$self.bwd1_self);
        f("bwd2_agg", &$self.bwd2_agg);
        f("bwd2_self", &$self.bwd2_self);
        f("stop_w1", &$self.stop_w1);
        f("stop_b1", &$self.stop_b1);
        f("stop_w2", &$self.stop_w2);
        f("stop_b2", &$self.stop_b2);
    }};
}

impl RetrieverParams {
    /// Uniform init scaled by 1/sqrt(fan_in); biases start at zero.
    pub fn init(d_text: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |rows: usize, cols: usize| -> Array2<f64> {
            let bound = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let input_proj = mat(3 * d_text, hidden);
        let question_proj = mat(d_text, hidden);
        let fwd1_agg = mat(hidden, hidden);
        let fwd1_self = mat(hidden, hidden);
        let fwd2_agg = mat(hidden, hidden);
        let fwd2_self = mat(hidden, hidden);
        let bwd1_agg = mat(hidden, hidden);
        let bwd1_self = mat(hidden, hidden);
        let bwd2_agg = mat(hidden, hidden);
        let bwd2_self = mat(hidden, hidden);
        let stop_w1 = mat(2 * hidden, hidden);
        let stop_w2 = mat(hidden, hidden);
        Self {
            d_text,
            hidden,
            input_proj,
            question_proj,
            fwd1_agg,
            fwd1_self,
            fwd2_agg,
            fwd2_self,
            bwd1_agg,
            bwd1_self,
            bwd2_agg,
            bwd2_self,
            stop_w1,
            stop_b1: Array2::zeros((1, hidden)),
            stop_w2,
            stop_b2: Array2::zeros((1, hidden)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensor_names() -> &'static [&'static str] {
        &[
            "input_proj",
            "question_proj",
            "fwd1_agg",
            "fwd1_self",
            "fwd2_agg",
            "fwd2_self",
            "bwd1_agg",
            "bwd1_self",
            "bwd2_agg",
            "bwd2_self",
            "stop_w1",
            "stop_b1",
            "stop_w2",
            "stop_b2",
        ]
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        vec![
            &self.input_proj,
            &self.question_proj,
            &self.fwd1_agg,
            &self.fwd1_self,
            &self.fwd2_agg,
            &self.fwd2_self,
            &self.bwd1_agg,
            &self.bwd1_self,
            &self.bwd2_agg,
            &self.bwd2_self,
            &self.stop_w1,
            &self.stop_b1,
            &self.stop_w2,
            &self.stop_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.input_proj,
            &mut self.question_proj,
            &mut self.fwd1_agg,
            &mut self.fwd1_self,
            &mut self.fwd2_agg,
            &mut self.fwd2_self,
            &mut self.bwd1_agg,
            &mut self.bwd1_self,
            &mut self.bwd2_agg,
            &mut self.bwd2_self,
            &mut self.stop_w1,
            &mut self.stop_b1,
            &mut self.stop_w2,
            &mut self.stop_b2,
        ]
    }

    /// Fails with the tensor name when any entry is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        let mut bad: Option<&'static str> = None;
        for_each_tensor!(self, |name: &'static str, t: &Array2<f64>| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(Error::NonFinite(name.to_string())),
            None => Ok(()),
        }
    }

    pub fn project_question(&self, q_embedding: &Array1<f64>) -> Array1<f64> {
        q_embedding.dot(&self.question_proj)
    }
}

// ---------------------------------------------------------------------------
// Encoding

/// Mean aggregation over in-neighbors: out[i] = mean_{j -> i} x[j].
fn aggregate(lg: &LineGraphView, x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..lg.node_count() {
        let preds = lg.predecessors(crate::kg::TripleId(i as u32));
        if preds.is_empty() {
            continue;
        }
        let scale = 1.0 / preds.len() as f64;
        let mut row = out.row_mut(i);
        for &j in preds {
            row.scaled_add(scale, &x.row(j as usize));
        }
    }
    out
}

/// Transpose of `aggregate`: routes d_out[i] back to each in-neighbor j.
fn aggregate_backward(lg: &LineGraphView, d_out: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(d_out.raw_dim());
    for i in 0..lg.node_count() {
        let preds = lg.predecessors(crate::kg::TripleId(i as u32));
        if preds.is_empty() {
            continue;
        }
        let scale = 1.0 / preds.len() as f64;
        for &j in preds {
            dx.row_mut(j as usize).scaled_add(scale, &d_out.row(i));
        }
    }
    dx
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_mask(pre: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

struct StackCache {
    a1: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    h1_mask: Option<Array2<f64>>,
    a2: Array2<f64>,
    pre2: Array2<f64>,
    z: Array2<f64>,
}

struct StackParams<'a> {
    w1_agg: &'a Array2<f64>,
    w1_self: &'a Array2<f64>,
    w2_agg: &'a Array2<f64>,
    w2_self: &'a Array2<f64>,
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

fn stack_forward(
    lg: &LineGraphView,
    p: &Array2<f64>,
    sp: &StackParams,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> StackCache {
    let a1 = aggregate(lg, p);
    let pre1 = a1.dot(sp.w1_agg) + p.dot(sp.w1_self);
    let mut h1 = relu(&pre1);
    let h1_mask = if let Some((rate, rng)) = dropout {
        let mask = dropout_mask(h1.dim(), rate, rng);
        h1 *= &mask;
        Some(mask)
    } else {
        None
    };
    let a2 = aggregate(lg, &h1);
    let pre2 = a2.dot(sp.w2_agg) + h1.dot(sp.w2_self);
    let z = relu(&pre2);
    StackCache {
        a1,
        pre1,
        h1,
        h1_mask,
        a2,
        pre2,
        z,
    }
}

struct StackGrads {
    w1_agg: Array2<f64>,
    w1_self: Array2<f64>,
    w2_agg: Array2<f64>,
    w2_self: Array2<f64>,
    /// gradient w.r.t. the projected input P
    input: Array2<f64>,
}

fn stack_backward(lg: &LineGraphView, p: &Array2<f64>, sp: &StackParams, cache: &StackCache, dz: &Array2<f64>) -> StackGrads {
    let dpre2 = relu_mask(&cache.pre2, dz);
    let w2_agg = cache.a2.t().dot(&dpre2);
    let w2_self = cache.h1.t().dot(&dpre2);
    let da2 = dpre2.dot(&sp.w2_agg.t());
    let mut dh1 = dpre2.dot(&sp.w2_self.t()) + aggregate_backward(lg, &da2);
    if let Some(mask) = &cache.h1_mask {
        dh1 *= mask;
    }
    let dpre1 = relu_mask(&cache.pre1, &dh1);
    let w1_agg = cache.a1.t().dot(&dpre1);
    let w1_self = p.t().dot(&dpre1);
    let da1 = dpre1.dot(&sp.w1_agg.t());
    let input = dpre1.dot(&sp.w1_self.t()) + aggregate_backward(lg, &da1);
    StackGrads {
        w1_agg,
        w1_self,
        w2_agg,
        w2_self,
        input,
    }
}

struct EncodeCache {
    /// projected input after dropout (shared by both stacks)
    p: Array2<f64>,
    p_mask: Option<Array2<f64>>,
    fwd: StackCache,
    bwd: StackCache,
    z: Array2<f64>,
}

fn encode_cached(
    params: &RetrieverParams,
    lg: &LineGraphView,
    rev: &LineGraphView,
    features: &Array2<f64>,
    mode: Mode,
    dropout_rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodeCache> {
    if features.ncols() != 3 * params.d_text {
        return Err(Error::DimMismatch {
            expected: 3 * params.d_text,
            got: features.ncols(),
            context: "feature matrix columns".into(),
        });
    }
    if features.nrows() != lg.node_count() {
        return Err(Error::DimMismatch {
            expected: lg.node_count(),
            got: features.nrows(),
            context: "feature matrix rows vs line-graph nodes".into(),
        });
    }
    let mut p = features.dot(&params.input_proj);
    let train = mode == Mode::Train && dropout_rate > 0.0;
    let mut rng = rng;
    let p_mask = if train {
        let rng = rng.as_deref_mut().expect("train mode needs an rng");
        let mask = dropout_mask(p.dim(), dropout_rate, rng);
        p *= &mask;
        Some(mask)
    } else {
        None
    };
    let fwd_params = StackParams {
        w1_agg: &params.fwd1_agg,
        w1_self: &params.fwd1_self,
        w2_agg: &params.fwd2_agg,
        w2_self: &params.fwd2_self,
    };
    let bwd_params = StackParams {
        w1_agg: &params.bwd1_agg,
        w1_self: &params.bwd1_self,
        w2_agg: &params.bwd2_agg,
        w2_self: &params.bwd2_self,
    };
    let fwd = if train {
        stack_forward(lg, &p, &fwd_params, Some((dropout_rate, rng.as_deref_mut().unwrap())))
    } else {
        stack_forward(lg, &p, &fwd_params, None)
    };
    let bwd = if train {
        stack_forward(rev, &p, &bwd_params, Some((dropout_rate, rng.as_deref_mut().unwrap())))
    } else {
        stack_forward(rev, &p, &bwd_params, None)
    };
    let z = (&fwd.z + &bwd.z) * 0.5;
    Ok(EncodeCache {
        p,
        p_mask,
        fwd,
        bwd,
        z,
    })
}

/// Node representations z_i: two 2-layer stacks over the line graph and its
/// edge-reversed twin, combined by elementwise mean. Dropout only in train
/// mode (an rng is then required).
pub fn encode(
    params: &RetrieverParams,
    lg: &LineGraphView,
    rev: &LineGraphView,
    features: &Array2<f64>,
    mode: Mode,
    dropout_rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Array2<f64>> {
    Ok(encode_cached(params, lg, rev, features, mode, dropout_rate, rng)?.z)
}

// ---------------------------------------------------------------------------
// STOP head

/// g_phi(concat(sum(prefix), z_q)): MLP with one ReLU hidden layer of width H.
pub fn stop_embedding(
    params: &RetrieverParams,
    prefix: &[ArrayView1<f64>],
    z_q: &Array1<f64>,
) -> Result<Array1<f64>> {
    if prefix.is_empty() {
        return Err(Error::Contract("stop embedding needs a nonempty prefix".into()));
    }
    let h = params.hidden;
    let mut u = Array1::zeros(2 * h);
    for v in prefix {
        u.slice_mut(ndarray::s![..h]).scaled_add(1.0, v);
    }
    u.slice_mut(ndarray::s![h..]).assign(z_q);
    let pre = u.dot(&params.stop_w1) + &params.stop_b1.row(0);
    let a = pre.mapv(|v| v.max(0.0));
    Ok(a.dot(&params.stop_w2) + &params.stop_b2.row(0))
}

struct StopCache {
    u: Array1<f64>,
    pre: Array1<f64>,
    a: Array1<f64>,
}

fn stop_forward(params: &RetrieverParams, s: &Array1<f64>, z_q: &Array1<f64>) -> (Array1<f64>, StopCache) {
    let h = params.hidden;
    let mut u = Array1::zeros(2 * h);
    u.slice_mut(ndarray::s![..h]).assign(s);
    u.slice_mut(ndarray::s![h..]).assign(z_q);
    let pre = u.dot(&params.stop_w1) + &params.stop_b1.row(0);
    let a = pre.mapv(|v| v.max(0.0));
    let out = a.dot(&params.stop_w2) + &params.stop_b2.row(0);
    (out, StopCache { u, pre, a })
}

/// Returns (d_s, d_zq) and accumulates stop-head parameter grads.
fn stop_backward(
    params: &RetrieverParams,
    cache: &StopCache,
    d_out: &Array1<f64>,
    grads: &mut RetrieverParams,
) -> (Array1<f64>, Array1<f64>) {
    let h = params.hidden;
    for (g, &d) in grads.stop_b2.row_mut(0).iter_mut().zip(d_out.iter()) {
        *g += d;
    }
    // dW2 += a^T d_out
    for (i, &a) in cache.a.iter().enumerate() {
        grads.stop_w2.row_mut(i).scaled_add(a, d_out);
    }
    let da = params.stop_w2.dot(d_out);
    let mut dpre = da;
    dpre.zip_mut_with(&cache.pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    for (g, &d) in grads.stop_b1.row_mut(0).iter_mut().zip(dpre.iter()) {
        *g += d;
    }
    for (i, &u) in cache.u.iter().enumerate() {
        grads.stop_w1.row_mut(i).scaled_add(u, &dpre);
    }
    let du = params.stop_w1.dot(&dpre);
    let ds = du.slice(ndarray::s![..h]).to_owned();
    let dzq = du.slice(ndarray::s![h..]).to_owned();
    (ds, dzq)
}

// ---------------------------------------------------------------------------
// Step distribution

/// A next-step candidate: a line-graph node or termination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepChoice {
    Node(usize),
    Stop,
}

#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub choices: Vec<StepChoice>,
    pub probs: Vec<f64>,
}

impl StepDistribution {
    pub fn prob_of(&self, choice: StepChoice) -> Option<f64> {
        self.choices
            .iter()
            .position(|&c| c == choice)
            .map(|i| self.probs[i])
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Candidates at one step: out-neighbors of `current` not already on the
/// prefix, plus STOP. With no fresh out-neighbors the distribution is
/// {STOP: 1.0}.
pub fn step_distribution(
    params: &RetrieverParams,
    lg: &LineGraphView,
    z: &Array2<f64>,
    z_q: &Array1<f64>,
    current: usize,
    prefix: &[usize],
) -> Result<StepDistribution> {
    let mut choices: Vec<StepChoice> = lg
        .successors(crate::kg::TripleId(current as u32))
        .iter()
        .map(|&s| s as usize)
        .filter(|s| !prefix.contains(s))
        .map(StepChoice::Node)
        .collect();
    choices.push(StepChoice::Stop);
    let prefix_views: Vec<ArrayView1<f64>> = prefix.iter().map(|&i| z.row(i)).collect();
    let z_stop = stop_embedding(params, &prefix_views, z_q)?;
    let logits: Vec<f64> = choices
        .iter()
        .map(|c| match c {
            StepChoice::Node(i) => z_q.dot(&z.row(*i)),
            StepChoice::Stop => z_q.dot(&z_stop),
        })
        .collect();
    Ok(StepDistribution {
        probs: softmax(&logits),
        choices,
    })
}

// ---------------------------------------------------------------------------
// Training example and losses

/// One training instance: precomputed features, both line-graph views, the
/// labeled paths as line-graph node sequences, and the question-triple
/// positive/negative partition.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub question_id: String,
    pub question_embedding: Array1<f64>,
    pub features: Array2<f64>,
    pub lg: LineGraphView,
    pub rev: LineGraphView,
    /// Rational paths lifted to line-graph node sequences.
    pub gold_paths: Vec<Vec<usize>>,
    pub v_pos: Vec<usize>,
    pub v_neg: Vec<usize>,
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x), stable for both signs
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct LossOutput {
    pub path_loss: f64,
    pub question_loss: f64,
    pub grads: Option<RetrieverParams>,
}

/// Forward (and optionally backward) pass over one example with the given
/// gold path. Losses: mean per-step cross-entropy along the gold path with a
/// terminal STOP step, plus the negative-sampling question-triple loss.
pub fn compute_losses(
    example: &TrainingExample,
    gold_path: &[usize],
    params: &RetrieverParams,
    lambda_q: f64,
    lambda_path: f64,
    mode: Mode,
    dropout_rate: f64,
    rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<LossOutput> {
    if gold_path.is_empty() {
        return Err(Error::Contract("gold path must be nonempty".into()));
    }
    if example.v_pos.is_empty() {
        return Err(Error::Contract(
            "V_pos must be nonempty (the gold question triple always belongs to it)".into(),
        ));
    }
    let cache = encode_cached(params, &example.lg, &example.rev, &example.features, mode, dropout_rate, rng)?;
    let z = &cache.z;
    let z_q = params.project_question(&example.question_embedding);

    let n = z.nrows();
    let h = params.hidden;
    let mut grads = want_grads.then(|| params.zeros_like());
    let mut d_z: Array2<f64> = Array2::zeros((n, h));
    let mut d_zq: Array1<f64> = Array1::zeros(h);

    // ---- path loss ----
    let k = gold_path.len();
    let n_steps = k; // (k-1) interior transitions + terminal STOP
    let mut path_loss = 0.0;
    let step_scale = lambda_path / n_steps as f64;
    for step in 1..=n_steps {
        let prefix = &gold_path[..step.min(k)];
        let current = gold_path[step - 1];
        let target = if step < k {
            StepChoice::Node(gold_path[step])
        } else {
            StepChoice::Stop
        };
        let choices: Vec<StepChoice> = {
            let mut c: Vec<StepChoice> = example
                .lg
                .successors(crate::kg::TripleId(current as u32))
                .iter()
                .map(|&s| s as usize)
                .filter(|s| !prefix.contains(s))
                .map(StepChoice::Node)
                .collect();
            c.push(StepChoice::Stop);
            c
        };
        let target_idx = choices.iter().position(|&c| c == target).ok_or_else(|| {
            Error::Contract(format!(
                "gold step {step} of question '{}' is not reachable from the prefix",
                example.question_id
            ))
        })?;
        let mut s_prefix = Array1::zeros(h);
        for &i in prefix {
            s_prefix += &z.row(i);
        }
        let (z_stop, stop_cache) = stop_forward(params, &s_prefix, &z_q);
        let logits: Vec<f64> = choices
            .iter()
            .map(|c| match c {
                StepChoice::Node(i) => z_q.dot(&z.row(*i)),
                StepChoice::Stop => z_q.dot(&z_stop),
            })
            .collect();
        let probs = softmax(&logits);
        path_loss += -probs[target_idx].max(f64::MIN_POSITIVE).ln();

        if want_grads {
            let grads = grads.as_mut().unwrap();
            let mut d_stop_out: Option<Array1<f64>> = None;
            for (ci, choice) in choices.iter().enumerate() {
                let d_logit = step_scale * (probs[ci] - if ci == target_idx { 1.0 } else { 0.0 });
                match choice {
                    StepChoice::Node(i) => {
                        d_z.row_mut(*i).scaled_add(d_logit, &z_q);
                        d_zq.scaled_add(d_logit, &z.row(*i));
                    }
                    StepChoice::Stop => {
                        d_zq.scaled_add(d_logit, &z_stop);
                        d_stop_out = Some(z_q.mapv(|v| v * d_logit));
                    }
                }
            }
            if let Some(d_out) = d_stop_out {
                let (ds, dzq_stop) = stop_backward(params, &stop_cache, &d_out, grads);
                d_zq += &dzq_stop;
                for &i in prefix {
                    d_z.row_mut(i).scaled_add(1.0, &ds);
                }
            }
        }
    }
    path_loss /= n_steps as f64;

    // ---- question-triple loss ----
    let mut question_loss = 0.0;
    let pos_scale = 1.0 / example.v_pos.len() as f64;
    for &v in &example.v_pos {
        let s = z_q.dot(&z.row(v));
        question_loss -= pos_scale * log_sigmoid(s);
        if want_grads {
            let coef = lambda_q * pos_scale * (sigmoid(s) - 1.0);
            d_z.row_mut(v).scaled_add(coef, &z_q);
            d_zq.scaled_add(coef, &z.row(v));
        }
    }
    if !example.v_neg.is_empty() {
        let neg_scale = 1.0 / example.v_neg.len() as f64;
        for &v in &example.v_neg {
            let s = z_q.dot(&z.row(v));
            question_loss -= neg_scale * log_sigmoid(-s);
            if want_grads {
                let coef = lambda_q * neg_scale * sigmoid(s);
                d_z.row_mut(v).scaled_add(coef, &z_q);
                d_zq.scaled_add(coef, &z.row(v));
            }
        }
    }

    if !path_loss.is_finite() || !question_loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    if want_grads {
        let grads = grads.as_mut().unwrap();
        // question projection
        for (i, &x) in example.question_embedding.iter().enumerate() {
            grads.question_proj.row_mut(i).scaled_add(x, &d_zq);
        }
        // back through the look-ahead mean
        let d_half = d_z.mapv(|v| 0.5 * v);
        let fwd_params = StackParams {
            w1_agg: &params.fwd1_agg,
            w1_self: &params.fwd1_self,
            w2_agg: &params.fwd2_agg,
            w2_self: &params.fwd2_self,
        };
        let bwd_params = StackParams {
            w1_agg: &params.bwd1_agg,
            w1_self: &params.bwd1_self,
            w2_agg: &params.bwd2_agg,
            w2_self: &params.bwd2_self,
        };
        let gf = stack_backward(&example.lg, &cache.p, &fwd_params, &cache.fwd, &d_half);
        let gb = stack_backward(&example.rev, &cache.p, &bwd_params, &cache.bwd, &d_half);
        grads.fwd1_agg += &gf.w1_agg;
        grads.fwd1_self += &gf.w1_self;
        grads.fwd2_agg += &gf.w2_agg;
        grads.fwd2_self += &gf.w2_self;
        grads.bwd1_agg += &gb.w1_agg;
        grads.bwd1_self += &gb.w1_self;
        grads.bwd2_agg += &gb.w2_agg;
        grads.bwd2_self += &gb.w2_self;
        let mut d_p = gf.input + gb.input;
        if let Some(mask) = &cache.p_mask {
            d_p *= mask;
        }
        grads.input_proj += &example.features.t().dot(&d_p);
        grads.check_finite()?;
    }

    Ok(LossOutput {
        path_loss,
        question_loss,
        grads,
    })
}

/// Mean per-step negative log-likelihood of the gold path (terminal STOP step
/// included), dropout disabled.
pub fn path_loss(example: &TrainingExample, gold_path: &[usize], params: &RetrieverParams) -> Result<f64> {
    compute_losses(example, gold_path, params, 0.0, 1.0, Mode::Eval, 0.0, None, false)
        .map(|o| o.path_loss)
}

/// Negative-sampling question-triple loss, dropout disabled.
pub fn question_triple_loss(example: &TrainingExample, params: &RetrieverParams) -> Result<f64> {
    let gold = example
        .gold_paths
        .first()
        .cloned()
        .unwrap_or_else(|| vec![example.v_pos[0]]);
    compute_losses(example, &gold, params, 1.0, 0.0, Mode::Eval, 0.0, None, false)
        .map(|o| o.question_loss)
}

/// Versioned JSON checkpoint for the parameter tensors.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: RetrieverParams,
}

pub fn save_checkpoint(params: &RetrieverParams, path: &std::path::Path) -> Result<()> {
    let ckpt = Checkpoint {
        format: "kgpath-retriever".into(),
        version: 1,
        params: params.clone(),
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<RetrieverParams> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let ckpt: Checkpoint =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ckpt.format != "kgpath-retriever" {
        return Err(Error::Checkpoint(format!("unknown format '{}'", ckpt.format)));
    }
    if ckpt.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
    }
    ckpt.params.check_finite()?;
    Ok(ckpt.params)
}

/// Analytic gradients of lambda_q * L_q + lambda_path * L_path.
#[allow(clippy::too_many_arguments)]
pub fn gradients(
    example: &TrainingExample,
    gold_path: &[usize],
    params: &RetrieverParams,
    lambda_q: f64,
    lambda_path: f64,
) -> Result<(f64, f64, RetrieverParams)> {
    let out = compute_losses(
        example,
        gold_path,
        params,
        lambda_q,
        lambda_path,
        Mode::Eval,
        0.0,
        None,
        true,
    )?;
    Ok((out.path_loss, out.question_loss, out.grads.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::line_graph::{build_line_graph, reverse as reverse_lg};
    use crate::test_support::{finite_difference_check, random_training_example};
    use ndarray::array;
    use rand::SeedableRng;

    fn close<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn identity_params(d_text: usize) -> RetrieverParams {
        // hidden == 3*d_text so every weight can be the identity; biases zero
        let h = 3 * d_text;
        let eye = Array2::eye(h);
        RetrieverParams {
            d_text,
            hidden: h,
            input_proj: eye.clone(),
            question_proj: Array2::zeros((d_text, h)),
            fwd1_agg: eye.clone(),
            fwd1_self: eye.clone(),
            fwd2_agg: eye.clone(),
            fwd2_self: eye.clone(),
            bwd1_agg: eye.clone(),
            bwd1_self: eye.clone(),
            bwd2_agg: eye.clone(),
            bwd2_self: eye.clone(),
            stop_w1: Array2::zeros((2 * h, h)),
            stop_b1: Array2::zeros((1, h)),
            stop_w2: Array2::zeros((h, h)),
            stop_b2: Array2::zeros((1, h)),
        }
    }

    fn chain_graph(n: usize) -> crate::kg::KnowledgeSubgraph {
        let mut g = crate::kg::KnowledgeSubgraph::new();
        for i in 0..n {
            g.add_triple(&format!("e{i}"), "r", &format!("e{}", i + 1));
        }
        g
    }

    #[test]
    fn encode_hand_check_isolated_node() {
        // no line-graph edges: aggregation contributes nothing, identity
        // weights reduce both stacks to relu(relu(x)) = relu(x)
        let g = chain_graph(1);
        let lg = build_line_graph(&g);
        let rev = reverse_lg(&lg);
        let params = identity_params(1);
        let features = array![[0.7, -0.3, 0.2]];
        let z = encode(&params, &lg, &rev, &features, Mode::Eval, 0.0, None).unwrap();
        assert_eq!(z, array![[0.7, 0.0, 0.2]]);
    }

    #[test]
    fn encode_hand_check_two_node_chain() {
        // nonnegative features keep everything linear; with identity weights
        // both rows come out as p0 + p1 (worked by hand through the two
        // stacks and the final mean)
        let g = chain_graph(2);
        let lg = build_line_graph(&g);
        let rev = reverse_lg(&lg);
        let params = identity_params(1);
        let features = array![[0.5, 0.25, 1.0], [0.125, 2.0, 0.0]];
        let z = encode(&params, &lg, &rev, &features, Mode::Eval, 0.0, None).unwrap();
        let expected = array![[0.625, 2.25, 1.0], [0.625, 2.25, 1.0]];
        assert!(close(&z, &expected, 1e-12), "{z:?}");
    }

    fn zero_param_example(n_chain: usize, d_text: usize) -> (TrainingExample, RetrieverParams) {
        let g = chain_graph(n_chain);
        let lg = build_line_graph(&g);
        let rev = reverse_lg(&lg);
        let provider = crate::embed::HashEmbedding::new(d_text);
        let features = feature_matrix(&g, &provider);
        let example = TrainingExample {
            question_id: "fx".into(),
            question_embedding: Array1::from(provider.embed("which entity")),
            features,
            lg,
            rev,
            gold_paths: vec![vec![0]],
            v_pos: vec![0],
            v_neg: vec![1],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let params = RetrieverParams::init(d_text, 6, &mut rng).zeros_like();
        (example, params)
    }

    #[test]
    fn question_loss_closed_form_all_zero_scores() {
        // one positive and one negative at score zero: both terms are ln 2
        let (example, params) = zero_param_example(3, 4);
        let l = question_triple_loss(&example, &params).unwrap();
        assert!((l - 2.0 * (2.0f64).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn path_loss_closed_form_uniform_candidates() {
        // chain: node 0 has one successor, so the terminal step sees two
        // candidates (successor, STOP) at equal logits
        let (example, params) = zero_param_example(3, 4);
        let l = path_loss(&example, &[0], &params).unwrap();
        assert!((l - (2.0f64).ln()).abs() < 1e-12, "{l}");

        // branching: two successors plus STOP gives ln 3
        let mut g = crate::kg::KnowledgeSubgraph::new();
        g.add_triple("a", "r", "b");
        g.add_triple("b", "r", "c");
        g.add_triple("b", "r", "d");
        let lg = build_line_graph(&g);
        let rev = reverse_lg(&lg);
        let provider = crate::embed::HashEmbedding::new(4);
        let example = TrainingExample {
            question_id: "fx".into(),
            question_embedding: Array1::from(provider.embed("which entity")),
            features: feature_matrix(&g, &provider),
            lg,
            rev,
            gold_paths: vec![vec![0]],
            v_pos: vec![0],
            v_neg: vec![],
        };
        let l = path_loss(&example, &[0], &params).unwrap();
        assert!((l - (3.0f64).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn step_distribution_sums_to_one_and_masks_prefix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let example = loop {
            if let Some(e) = random_training_example(&mut rng, 4, 5, 10) {
                if e.lg.successors(crate::kg::TripleId(0)).len() >= 2 {
                    break e;
                }
            }
        };
        let params = RetrieverParams::init(4, 8, &mut rng);
        let z = encode(&params, &example.lg, &example.rev, &example.features, Mode::Eval, 0.0, None).unwrap();
        let z_q = params.project_question(&example.question_embedding);
        let first_succ = example.lg.successors(crate::kg::TripleId(0))[0] as usize;
        let dist = step_distribution(&params, &example.lg, &z, &z_q, 0, &[0, first_succ]).unwrap();
        let sum: f64 = dist.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(dist.choices.contains(&StepChoice::Stop));
        assert!(!dist.choices.contains(&StepChoice::Node(0)));
        assert!(!dist.choices.contains(&StepChoice::Node(first_succ)));
    }

    #[test]
    fn stop_embedding_ignores_prefix_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let params = RetrieverParams::init(2, 8, &mut rng);
        let a = Array1::from_shape_fn(8, |i| i as f64 * 0.1 - 0.3);
        let b = Array1::from_shape_fn(8, |i| 0.7 - i as f64 * 0.05);
        let z_q = Array1::from_shape_fn(8, |i| (i as f64).sin());
        let ab = stop_embedding(&params, &[a.view(), b.view()], &z_q).unwrap();
        let ba = stop_embedding(&params, &[b.view(), a.view()], &z_q).unwrap();
        assert!(close(&ab, &ba, 1e-12));
        assert!(stop_embedding(&params, &[], &z_q).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 3 {
            let Some(example) = random_training_example(&mut rng, 3, 4, 8) else {
                continue;
            };
            let params = RetrieverParams::init(3, 6, &mut rng);
            let gold = example.gold_paths[0].clone();
            let rel = finite_difference_check(&example, &gold, &params, 1.0, 1.0, 1e-5);
            assert!(rel <= 1e-4, "fixture {checked}: max rel err {rel}");
            checked += 1;
        }
    }

    #[test]
    fn gradients_are_linear_in_loss_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let example = loop {
            if let Some(e) = random_training_example(&mut rng, 3, 4, 8) {
                break e;
            }
        };
        let params = RetrieverParams::init(3, 6, &mut rng);
        let gold = example.gold_paths[0].clone();
        let (_, _, g1) = gradients(&example, &gold, &params, 1.0, 0.0).unwrap();
        let (_, _, g2) = gradients(&example, &gold, &params, 2.0, 0.0).unwrap();
        for (a, b) in g1.tensors().into_iter().zip(g2.tensors()) {
            assert!(close(b, &(a * 2.0), 1e-10));
        }
        let (_, _, p1) = gradients(&example, &gold, &params, 0.0, 1.0).unwrap();
        let (_, _, p3) = gradients(&example, &gold, &params, 0.0, 3.0).unwrap();
        for (a, b) in p1.tensors().into_iter().zip(p3.tensors()) {
            assert!(close(b, &(a * 3.0), 1e-10));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let params = RetrieverParams::init(2, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        std::fs::write(&path, "{\"format\":\"something-else\"}").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn dropout_masks_differ_between_train_calls_but_eval_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let example = loop {
            if let Some(e) = random_training_example(&mut rng, 3, 4, 8) {
                break e;
            }
        };
        let params = RetrieverParams::init(3, 6, &mut rng);
        let e1 = encode(&params, &example.lg, &example.rev, &example.features, Mode::Eval, 0.5, None).unwrap();
        let e2 = encode(&params, &example.lg, &example.rev, &example.features, Mode::Eval, 0.5, None).unwrap();
        assert_eq!(e1, e2);
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        let t1 = encode(&params, &example.lg, &example.rev, &example.features, Mode::Train, 0.5, Some(&mut r1)).unwrap();
        let t2 = encode(&params, &example.lg, &example.rev, &example.features, Mode::Train, 0.5, Some(&mut r1)).unwrap();
        assert_ne!(t1, t2);
    }
}
