//! Answer-set evaluation: Hit, macro-F1, and per-hop breakdowns.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::kg::QuestionInstance;
use crate::paths::shortest_distance;

/// 1.0 when the prediction shares at least one answer with the gold set.
pub fn hit(predicted: &[String], gold: &[String]) -> f64 {
    let gold: BTreeSet<&str> = gold.iter().map(String::as_str).collect();
    if predicted.iter().any(|p| gold.contains(p.as_str())) {
        1.0
    } else {
        0.0
    }
}

/// Set-level F1 for one instance; empty gold and empty prediction count as a
/// perfect match.
pub fn f1(predicted: &[String], gold: &[String]) -> f64 {
    let pred: BTreeSet<&str> = predicted.iter().map(String::as_str).collect();
    let gold: BTreeSet<&str> = gold.iter().map(String::as_str).collect();
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let overlap = pred.intersection(&gold).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let precision = overlap / pred.len() as f64;
    let recall = overlap / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Minimum hop distance from any question entity to any in-graph answer.
/// `None` when no answer is reachable.
pub fn question_hop_count(q: &QuestionInstance) -> Option<usize> {
    let g = &q.subgraph;
    let mut best: Option<usize> = None;
    for &s in &q.question_entities {
        for &a in &q.answer_entities {
            if let Ok(Some(d)) = shortest_distance(g, s, a) {
                if d > 0 {
                    best = Some(best.map_or(d, |b| b.min(d)));
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HopBucket {
    pub count: usize,
    pub hit: f64,
    pub macro_f1: f64,
}

/// Aggregate report. Hop buckets cover 1, 2 and >=3 hops; instances whose
/// answers are absent from the subgraph are excluded from the breakdown but
/// kept in the overall averages.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub hit: f64,
    pub macro_f1: f64,
    pub hop1: HopBucket,
    pub hop2: HopBucket,
    pub hop3_plus: HopBucket,
    pub answers_absent: usize,
    pub mean_retrieved_triples: f64,
}

pub struct EvalInstance<'a> {
    pub question: &'a QuestionInstance,
    pub predicted: Vec<String>,
    pub retrieved_triple_count: usize,
}

pub fn evaluate(instances: &[EvalInstance]) -> EvalReport {
    let mut report = EvalReport::default();
    let mut bucket_sums = [(0usize, 0.0f64, 0.0f64); 3];
    let mut triple_sum = 0usize;
    for inst in instances {
        let gold: Vec<String> = inst
            .question
            .answer_entities
            .iter()
            .map(|&a| inst.question.subgraph.entity_label(a).to_string())
            .collect();
        let h = hit(&inst.predicted, &gold);
        let f = f1(&inst.predicted, &gold);
        report.count += 1;
        report.hit += h;
        report.macro_f1 += f;
        triple_sum += inst.retrieved_triple_count;
        if !inst.question.answers_in_graph && inst.question.answer_entities.is_empty() {
            report.answers_absent += 1;
            continue;
        }
        match question_hop_count(inst.question) {
            Some(1) => {
                bucket_sums[0].0 += 1;
                bucket_sums[0].1 += h;
                bucket_sums[0].2 += f;
            }
            Some(2) => {
                bucket_sums[1].0 += 1;
                bucket_sums[1].1 += h;
                bucket_sums[1].2 += f;
            }
            Some(_) => {
                bucket_sums[2].0 += 1;
                bucket_sums[2].1 += h;
                bucket_sums[2].2 += f;
            }
            None => {
                report.answers_absent += 1;
            }
        }
    }
    if report.count > 0 {
        let n = report.count as f64;
        report.hit /= n;
        report.macro_f1 /= n;
        report.mean_retrieved_triples = triple_sum as f64 / n;
    }
    for (i, bucket) in [&mut report.hop1, &mut report.hop2, &mut report.hop3_plus]
        .into_iter()
        .enumerate()
    {
        let (c, h, f) = bucket_sums[i];
        bucket.count = c;
        if c > 0 {
            bucket.hit = h / c as f64;
            bucket.macro_f1 = f / c as f64;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn hit_is_any_overlap() {
        assert_eq!(hit(&s(&["a", "b"]), &s(&["b", "c"])), 1.0);
        assert_eq!(hit(&s(&["a"]), &s(&["b"])), 0.0);
        assert_eq!(hit(&[], &s(&["b"])), 0.0);
    }

    #[test]
    fn f1_matches_hand_computation() {
        // precision 1/2, recall 1/3 -> F1 = 2*(1/2)*(1/3)/(5/6) = 0.4
        let v = f1(&s(&["a", "x"]), &s(&["a", "b", "c"]));
        assert!((v - 0.4).abs() < 1e-12);
        assert_eq!(f1(&[], &[]), 1.0);
        assert_eq!(f1(&s(&["a"]), &[]), 0.0);
        assert_eq!(f1(&s(&["a"]), &s(&["a"])), 1.0);
    }

    #[test]
    fn f1_is_symmetric_in_role_of_duplicates() {
        // duplicate predictions collapse to a set
        assert_eq!(
            f1(&s(&["a", "a", "b"]), &s(&["a", "b"])),
            f1(&s(&["a", "b"]), &s(&["a", "b"]))
        );
    }
}
