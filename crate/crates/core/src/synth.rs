//! Deterministic synthetic QA corpus: templated multi-hop questions over
//! small generated subgraphs with branching distractors. Entities are opaque
//! ids, so triple semantics live entirely in the relation labels; question
//! texts reuse relation tokens, which is what lets a trained retriever
//! generalize to templates it has never seen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{KnowledgeSubgraph, QuestionInstance};

pub const RELATIONS: [&str; 7] = [
    "directed_by",
    "born_in",
    "located_in",
    "written_by",
    "married_to",
    "employed_by",
    "starring",
];

/// Relation carrying no lexical hint of any question; used for shortcut
/// edges in training instances and decoy edges in held-out instances, which
/// is what separates rationalized labeling from shortest-path labeling.
pub const DECOY_RELATION: &str = "related_to";

pub struct Template {
    pub id: usize,
    pub relations: &'static [&'static str],
}

/// Question texts are deliberately formulaic: a fixed filler phrase plus the
/// gold relation labels in order. Every template shares the same filler, so
/// the only signal separating questions is which relation tokens appear —
/// exactly the signal a retriever must exploit to handle unseen templates.
pub fn template_text(relations: &[&str]) -> String {
    let mut text = String::from("what is the subject");
    for rel in relations {
        text.push(' ');
        text.push_str(&rel.replace('_', " "));
    }
    text
}

/// Training templates are chosen so that every relation of a held-out
/// template has been seen both in its non-terminal role (the path continues
/// after it) and in its terminal role (the path stops after it) — but never
/// in the held-out combination. Held-out questions are therefore answerable
/// only by composing relation-level behavior, not by template recall.
pub const TEMPLATES: [Template; 10] = [
    Template {
        id: 1,
        relations: &["directed_by"],
    },
    Template {
        id: 2,
        relations: &["directed_by", "born_in"],
    },
    Template {
        id: 3,
        relations: &["directed_by", "born_in", "located_in"],
    },
    Template {
        id: 4,
        relations: &["written_by", "employed_by"],
    },
    Template {
        id: 5,
        relations: &["written_by", "born_in"],
    },
    Template {
        id: 6,
        relations: &["married_to"],
    },
    Template {
        id: 7,
        relations: &["starring", "married_to"],
    },
    Template {
        id: 8,
        relations: &["employed_by", "located_in"],
    },
    Template {
        id: 9,
        relations: &["born_in", "located_in"],
    },
    Template {
        id: 10,
        relations: &["starring", "born_in"],
    },
];

/// Held-out template ids for generalization splits. Every relation they use
/// also occurs in some training template.
pub const HELD_OUT_TEMPLATES: [usize; 3] = [3, 5, 10];

pub const INSTANCES_PER_TEMPLATE: usize = 5;

pub fn template_of(question_id: &str) -> Option<usize> {
    question_id
        .strip_prefix('t')?
        .split('_')
        .next()?
        .parse()
        .ok()
}

pub fn is_held_out(question_id: &str) -> bool {
    template_of(question_id).is_some_and(|t| HELD_OUT_TEMPLATES.contains(&t))
}

fn fresh_entity(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::from("m.0");
    for _ in 0..6 {
        let c = b"abcdefghijklmnopqrstuvwxyz0123456789"[rng.gen_range(0..36)] as char;
        s.push(c);
    }
    s
}

/// A relation not used anywhere on the gold chain. Distractor edges must not
/// reuse the question's relations: the question text mentions exactly the
/// gold relations, and a distractor edge labeled with one of them would be
/// indistinguishable from the gold chain at the relation level.
fn distractor_relation(gold: &[&str], rng: &mut ChaCha8Rng) -> &'static str {
    loop {
        let r = RELATIONS[rng.gen_range(0..RELATIONS.len())];
        if !gold.contains(&r) {
            return r;
        }
    }
}

fn build_instance(template: &Template, instance: usize, rng: &mut ChaCha8Rng) -> QuestionInstance {
    let mut g = KnowledgeSubgraph::new();
    let hops = template.relations.len();
    let mut chain = vec![fresh_entity(rng)];
    for _ in 0..hops {
        chain.push(fresh_entity(rng));
    }
    let question_entity = chain[0].clone();
    let answer_entity = chain[hops].clone();

    // gold chain
    for (i, rel) in template.relations.iter().enumerate() {
        g.add_triple(&chain[i], rel, &chain[i + 1]);
    }
    // branching distractors from the question entity, each with a short tail
    for _ in 0..4 {
        let d = fresh_entity(rng);
        g.add_triple(&question_entity, distractor_relation(template.relations, rng), &d);
        let cont = fresh_entity(rng);
        g.add_triple(&d, distractor_relation(template.relations, rng), &cont);
        if rng.gen_bool(0.5) {
            g.add_triple(&cont, distractor_relation(template.relations, rng), &fresh_entity(rng));
        }
    }
    // distractors from every intermediate node of the gold chain
    for i in 1..hops {
        for _ in 0..3 {
            g.add_triple(
                &chain[i],
                distractor_relation(template.relations, rng),
                &fresh_entity(rng),
            );
        }
    }
    // continuations past the answer so termination is a real decision
    for _ in 0..2 {
        g.add_triple(
            &answer_entity,
            distractor_relation(template.relations, rng),
            &fresh_entity(rng),
        );
    }
    // shortcut / decoy edges (see DECOY_RELATION)
    let held_out = HELD_OUT_TEMPLATES.contains(&template.id);
    if held_out {
        g.add_triple(&question_entity, DECOY_RELATION, &fresh_entity(rng));
    } else if hops >= 2 && instance < 3 {
        g.add_triple(&question_entity, DECOY_RELATION, &answer_entity);
    }

    let qe = g.entity(&question_entity).unwrap();
    let ae = g.entity(&answer_entity).unwrap();
    QuestionInstance {
        question_id: format!("t{:02}_i{instance}", template.id),
        text: template_text(template.relations),
        question_entities: vec![qe],
        answer_entities: vec![ae],
        missing_answers: Vec::new(),
        answers_in_graph: true,
        subgraph: g,
    }
}

/// The full 50-question corpus (10 templates x 5 instances), deterministic
/// for a given seed.
pub fn generate_corpus(seed: u64) -> Vec<QuestionInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(TEMPLATES.len() * INSTANCES_PER_TEMPLATE);
    for template in &TEMPLATES {
        for instance in 0..INSTANCES_PER_TEMPLATE {
            out.push(build_instance(template, instance, &mut rng));
        }
    }
    out
}

/// Training/held-out split by question template.
pub fn split_by_template(corpus: &[QuestionInstance]) -> (Vec<QuestionInstance>, Vec<QuestionInstance>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for q in corpus {
        if is_held_out(&q.question_id) {
            test.push(q.clone());
        } else {
            train.push(q.clone());
        }
    }
    (train, test)
}

/// Uniform random-walk gold paths are not part of the corpus; callers use
/// the labeling pipeline. This helper exposes the gold chain for tests.
pub fn gold_relation_path(question_id: &str) -> Option<&'static [&'static str]> {
    let t = template_of(question_id)?;
    TEMPLATES.iter().find(|tpl| tpl.id == t).map(|tpl| tpl.relations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::validate_instance;
    use crate::paths::shortest_distance;

    #[test]
    fn corpus_shape_and_determinism() {
        let a = generate_corpus(7);
        let b = generate_corpus(7);
        assert_eq!(a.len(), 50);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.question_id, y.question_id);
            assert_eq!(x.subgraph.triples(), y.subgraph.triples());
        }
        let c = generate_corpus(8);
        assert_ne!(
            a[0].subgraph.entity_label(a[0].question_entities[0]),
            c[0].subgraph.entity_label(c[0].question_entities[0])
        );
    }

    #[test]
    fn every_instance_validates_and_answer_is_reachable() {
        for q in generate_corpus(1) {
            let report = validate_instance(&q);
            assert!(report.is_empty(), "{}: {:?}", q.question_id, report);
            let d = shortest_distance(&q.subgraph, q.question_entities[0], q.answer_entities[0])
                .unwrap()
                .expect("answer reachable");
            let hops = gold_relation_path(&q.question_id).unwrap().len();
            // shortcut instances have d_min = 1 regardless of gold length
            assert!(d <= hops, "{}", q.question_id);
        }
    }

    #[test]
    fn split_respects_held_out_templates() {
        let corpus = generate_corpus(3);
        let (train, test) = split_by_template(&corpus);
        assert_eq!(train.len(), 35);
        assert_eq!(test.len(), 15);
        assert!(test.iter().all(|q| is_held_out(&q.question_id)));
        // every held-out relation occurs in some training subgraph's gold chain
        for t in HELD_OUT_TEMPLATES {
            let rels = TEMPLATES.iter().find(|tpl| tpl.id == t).unwrap().relations;
            for r in rels {
                let covered = train.iter().any(|q| {
                    gold_relation_path(&q.question_id)
                        .is_some_and(|g| g.contains(r))
                });
                assert!(covered, "relation {r} not covered in training templates");
            }
        }
    }

    #[test]
    fn shortcut_and_decoy_edges_present() {
        let corpus = generate_corpus(2);
        let shortcut = corpus
            .iter()
            .find(|q| q.question_id == "t02_i0")
            .unwrap();
        let g = &shortcut.subgraph;
        let rel = g.relation(DECOY_RELATION).unwrap();
        assert!(g
            .outgoing(shortcut.question_entities[0])
            .iter()
            .any(|&t| g.triple(t).relation == rel && g.triple(t).tail == shortcut.answer_entities[0]));
        let decoy = corpus.iter().find(|q| q.question_id == "t03_i4").unwrap();
        let g = &decoy.subgraph;
        let rel = g.relation(DECOY_RELATION).unwrap();
        assert!(g
            .outgoing(decoy.question_entities[0])
            .iter()
            .any(|&t| g.triple(t).relation == rel && g.triple(t).tail != decoy.answer_entities[0]));
    }
}
