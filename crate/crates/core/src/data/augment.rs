//! In-domain data augmentation.
//!
//! * Related-question pairs: two related questions of the same original
//!   question are a positive pair when both are relevant to it and a
//!   negative pair when exactly one is.
//! * Task-A reuse: question/comment pairs become extra training pairs for
//!   the external-comment task.

use crate::data::{Corpus, PairInstance, Provenance, QueryGroup, Task};
use crate::error::{Error, Result};

/// Query-id prefix of groups generated from related-question pairs.
pub const AUGMENTED_PREFIX: &str = "aug:";
/// Query-id prefix of task-A groups merged into a task-C corpus.
pub const TASK_A_PREFIX: &str = "taskA:";

/// Generated `(first, second, label)` candidate-index pairs for one group.
///
/// Each unordered pair appears at most once, oriented so the candidate with
/// the lexicographically smaller id comes first.
pub fn generated_pairs(group: &QueryGroup) -> Result<Vec<(usize, usize, u8)>> {
    let labels: Vec<u8> = group
        .candidates
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::MissingLabel(format!("{}/{}", group.id, c.id))))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let label = match (labels[i], labels[j]) {
                (1, 1) => 1,
                (0, 0) => continue,
                _ => 0,
            };
            let (a, b) = if group.candidates[i].id <= group.candidates[j].id { (i, j) } else { (j, i) };
            out.push((a, b, label));
        }
    }
    Ok(out)
}

/// Appends the generated related-question pairs to a labelled
/// question/related-question corpus.
///
/// Generated pairs sharing a first member form one group with id
/// `aug:<query>:<first>`.
pub fn augment_question_pairs(corpus: &Corpus) -> Result<Corpus> {
    if corpus.augmented {
        return Err(Error::AlreadyAugmented);
    }
    let mut groups = corpus.groups.clone();
    for g in &corpus.groups {
        let pairs = generated_pairs(g)?;
        let mut generated: Vec<QueryGroup> = Vec::new();
        for (a, b, label) in pairs {
            let first = &g.candidates[a];
            let id = format!("{AUGMENTED_PREFIX}{}:{}", g.id, first.id);
            let idx = match generated.iter().position(|q| q.id == id) {
                Some(i) => i,
                None => {
                    generated.push(QueryGroup {
                        id,
                        tokens: first.tokens.clone(),
                        candidates: Vec::new(),
                    });
                    generated.len() - 1
                }
            };
            let second = &g.candidates[b];
            generated[idx].candidates.push(crate::data::Candidate {
                id: second.id.clone(),
                tokens: second.tokens.clone(),
                label: Some(label),
                ir_rank: None,
                bridge: None,
                aux_labels: None,
            });
        }
        groups.extend(generated);
    }
    Ok(Corpus {
        task: corpus.task,
        groups,
        augmented: true,
    })
}

/// Task-C training pairs followed by the task-A pairs, tagged as such.
pub fn augment_task_c_with_task_a(task_c: &[PairInstance], task_a: &[PairInstance]) -> Vec<PairInstance> {
    let mut merged = task_c.to_vec();
    merged.extend(task_a.iter().cloned().map(|mut inst| {
        inst.provenance = Provenance::TaskA;
        inst.third = None;
        inst.aux_labels = None;
        inst
    }));
    merged
}

/// Corpus-level counterpart of [`augment_task_c_with_task_a`].
pub fn merge_task_a_into_c(task_c: &Corpus, task_a: &Corpus) -> Result<Corpus> {
    if task_c.augmented {
        return Err(Error::AlreadyAugmented);
    }
    let mut groups = task_c.groups.clone();
    groups.extend(task_a.groups.iter().map(|g| {
        let mut g = g.clone();
        g.id = format!("{TASK_A_PREFIX}{}", g.id);
        for c in &mut g.candidates {
            c.bridge = None;
            c.aux_labels = None;
        }
        g
    }));
    Ok(Corpus {
        task: Task::C,
        groups,
        augmented: true,
    })
}

pub(crate) fn provenance_of(query_id: &str) -> Provenance {
    if query_id.starts_with(AUGMENTED_PREFIX) {
        Provenance::Augmented
    } else if query_id.starts_with(TASK_A_PREFIX) {
        Provenance::TaskA
    } else {
        Provenance::Original
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{instances, parse_corpus, Candidate, Vocabulary};
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn group(labels: &[u8]) -> QueryGroup {
        QueryGroup {
            id: "q".into(),
            tokens: vec!["q".into()],
            candidates: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Candidate {
                    id: format!("r{i}"),
                    tokens: vec![format!("t{i}")],
                    label: Some(l),
                    ir_rank: None,
                    bridge: None,
                    aux_labels: None,
                })
                .collect(),
        }
    }

    #[test]
    fn one_one_zero_group() {
        let g = group(&[1, 1, 0]);
        let pairs = generated_pairs(&g).unwrap();
        assert_eq!(pairs, vec![(0, 1, 1), (0, 2, 0), (1, 2, 0)]);

        let corpus = Corpus {
            task: Task::B,
            groups: vec![g],
            augmented: false,
        };
        let aug = augment_question_pairs(&corpus).unwrap();
        assert_eq!(aug.num_instances(), 6);
        assert!(aug.augmented);
        assert!(matches!(augment_question_pairs(&aug), Err(Error::AlreadyAugmented)));

        let v = Vocabulary::from_corpora(&[&aug]);
        let inst = instances(&aug, &v);
        assert_eq!(inst.iter().filter(|i| i.provenance == Provenance::Augmented).count(), 3);
    }

    #[test]
    fn all_irrelevant_generates_nothing() {
        assert!(generated_pairs(&group(&[0, 0, 0, 0])).unwrap().is_empty());
    }

    #[test]
    fn orientation_follows_candidate_ids() {
        let mut g = group(&[1, 1]);
        g.candidates[0].id = "z".into();
        g.candidates[1].id = "a".into();
        assert_eq!(generated_pairs(&g).unwrap(), vec![(1, 0, 1)]);
    }

    #[test]
    fn missing_label_is_reported() {
        let mut g = group(&[1, 0]);
        g.candidates[1].label = None;
        assert!(matches!(generated_pairs(&g), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn task_a_reuse_counts_add() {
        let c = parse_corpus("o\tx\t1\t1\ta b\tc d\trel q\t1,1\n", Task::C).unwrap();
        let a = parse_corpus("q\tc1\t0\t-\tx y\tz\nq\tc2\t1\t-\tx y\tw\n", Task::A).unwrap();
        let v = Vocabulary::from_corpora(&[&c, &a]);
        let ci = instances(&c, &v);
        let ai = instances(&a, &v);
        assert_eq!(augment_task_c_with_task_a(&ci, &[]), ci);
        let merged = augment_task_c_with_task_a(&ci, &ai);
        assert_eq!(merged.len(), ci.len() + ai.len());
        assert!(merged[1..].iter().all(|i| i.provenance == Provenance::TaskA));

        let shuffle = |seed| {
            let mut m = merged.clone();
            Rng::new(seed).shuffle(&mut m);
            m
        };
        assert_eq!(shuffle(5), shuffle(5));

        let corpus = merge_task_a_into_c(&c, &a).unwrap();
        assert_eq!(corpus.num_instances(), 3);
        let inst = instances(&corpus, &v);
        assert_eq!(inst.iter().filter(|i| i.provenance == Provenance::TaskA).count(), 2);
    }

    proptest! {
        #[test]
        fn generated_counts_match_enumeration(labels in prop::collection::vec(0u8..2, 0..12)) {
            let g = group(&labels);
            let pairs = generated_pairs(&g).unwrap();
            let p = labels.iter().filter(|&&l| l == 1).count();
            let q = labels.len() - p;
            prop_assert_eq!(pairs.len(), p * p.saturating_sub(1) / 2 + p * q);

            let mut seen = std::collections::HashSet::new();
            for &(a, b, label) in &pairs {
                prop_assert!(a != b);
                prop_assert!(labels[a] == 1 || labels[b] == 1);
                prop_assert_eq!(label, labels[a] & labels[b]);
                prop_assert!(seen.insert((a.min(b), a.max(b))));
            }
        }
    }
}
