//! Ranking and classification metrics, baselines, rank combination,
//! attention export and the planted-keyword synthetic corpus.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifier::RELEVANT;
use crate::data::{Candidate, Corpus, PairInstance, QueryGroup, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub candidate_id: String,
    pub score: f64,
    pub gold: bool,
}

/// Candidates of one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    entries: Vec<RankedEntry>,
}

fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

impl RankedList {
    /// Sorts by descending score, ties by ascending candidate id.
    pub fn new(query_id: impl Into<String>, mut entries: Vec<RankedEntry>) -> Result<Self> {
        let query_id = query_id.into();
        if entries.is_empty() {
            return Err(Error::InvalidArgument(format!("ranked list for {query_id} is empty")));
        }
        entries.sort_by(rank_order);
        Ok(RankedList { query_id, entries })
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn relevant_count(&self) -> usize {
        self.entries.iter().filter(|e| e.gold).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mean of precision@k over the ranks k of relevant entries; 0 when none
/// is relevant.
pub fn average_precision(list: &RankedList) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, e) in list.entries.iter().enumerate() {
        if e.gold {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// MAP over queries with at least one relevant candidate.
pub fn map_score(lists: &[RankedList]) -> Result<f64> {
    let aps: Vec<f64> = lists
        .iter()
        .filter(|l| l.relevant_count() > 0)
        .map(average_precision)
        .collect();
    if aps.is_empty() {
        return Err(Error::NoRelevant);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// MAP that scores queries without relevant candidates as 0.
pub fn map_score_including_empty(lists: &[RankedList]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::NoQueries);
    }
    Ok(lists.iter().map(average_precision).sum::<f64>() / lists.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Positive-class precision, recall and F1; a zero denominator gives 0.
pub fn f1_score(predictions: &[bool], golds: &[bool]) -> Result<PrecisionRecall> {
    if predictions.len() != golds.len() {
        return Err(Error::shape("prediction/gold lists", golds.len(), predictions.len()));
    }
    if golds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let count = |p: bool, g: bool| predictions.iter().zip(golds).filter(|&(&a, &b)| a == p && b == g).count();
    let (tp, fp, fn_) = (count(true, true) as f64, count(true, false) as f64, count(false, true) as f64);
    let ratio = |n: f64, d: f64| if d == 0.0 { 0.0 } else { n / d };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(PrecisionRecall {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Queries contributing to MAP.
    pub queries: usize,
    pub instances: usize,
}

/// Groups scored pairs into per-query ranked lists, queries in first-seen order.
pub fn group_scores<'a>(scored: impl IntoIterator<Item = (&'a PairInstance, f64)>) -> Result<Vec<RankedList>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_query: HashMap<String, Vec<RankedEntry>> = HashMap::new();
    for (inst, score) in scored {
        let entries = by_query.entry(inst.query_id.clone()).or_insert_with(|| {
            order.push(inst.query_id.clone());
            Vec::new()
        });
        entries.push(RankedEntry {
            candidate_id: inst.candidate_id.clone(),
            score,
            gold: inst.label == Some(RELEVANT),
        });
    }
    order
        .into_iter()
        .map(|q| {
            let entries = by_query.remove(&q).unwrap_or_default();
            RankedList::new(q, entries)
        })
        .collect()
}

/// Relevant-class probability of every instance.
pub fn score_instances(params: &ModelParams, instances: &[PairInstance]) -> Result<Vec<f64>> {
    instances.iter().map(|i| params.forward(i).map(|p| p.score())).collect()
}

pub fn metrics_from_scores(instances: &[PairInstance], scores: &[f64], threshold: f64) -> Result<Metrics> {
    if instances.len() != scores.len() {
        return Err(Error::shape("scores", instances.len(), scores.len()));
    }
    if let Some(i) = instances.iter().find(|i| i.label.is_none()) {
        return Err(Error::MissingLabel(i.id()));
    }
    let lists = group_scores(instances.iter().zip(scores.iter().copied()))?;
    let map = map_score(&lists)?;
    let preds: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let golds: Vec<bool> = instances.iter().map(|i| i.label == Some(RELEVANT)).collect();
    let pr = f1_score(&preds, &golds)?;
    Ok(Metrics {
        map,
        precision: pr.precision,
        recall: pr.recall,
        f1: pr.f1,
        queries: lists.iter().filter(|l| l.relevant_count() > 0).count(),
        instances: instances.len(),
    })
}

/// MAP and positive-class F1 of a model on labelled instances.
pub fn evaluate(params: &ModelParams, instances: &[PairInstance], threshold: f64) -> Result<Metrics> {
    let scores = score_instances(params, instances)?;
    metrics_from_scores(instances, &scores, threshold)
}

/// Uniform random scores and fair-coin labels for every labelled pair.
pub fn random_baseline(corpus: &Corpus, rng: &mut Rng) -> Result<(Vec<RankedList>, Vec<bool>)> {
    let mut lists = Vec::with_capacity(corpus.groups.len());
    let mut predictions = Vec::with_capacity(corpus.num_instances());
    for g in &corpus.groups {
        let mut entries = Vec::with_capacity(g.candidates.len());
        for c in &g.candidates {
            let label = c.label.ok_or_else(|| Error::MissingLabel(format!("{}/{}", g.id, c.id)))?;
            entries.push(RankedEntry {
                candidate_id: c.id.clone(),
                score: rng.unit(),
                gold: label as usize == RELEVANT,
            });
            predictions.push(rng.bernoulli(0.5));
        }
        lists.push(RankedList::new(g.id.clone(), entries)?);
    }
    if lists.is_empty() {
        return Err(Error::NoQueries);
    }
    Ok((lists, predictions))
}

/// Lists ordered by ascending IR rank.
pub fn ir_lists(instances: &[PairInstance]) -> Result<Vec<RankedList>> {
    let scored: Vec<(&PairInstance, f64)> = instances
        .iter()
        .map(|i| {
            let rank = i.ir_rank.ok_or_else(|| Error::MissingIrRank(i.id()))?;
            Ok((i, -(rank as f64)))
        })
        .collect::<Result<_>>()?;
    group_scores(scored)
}

/// Rescores every candidate by the mean of its 1-based position in the
/// model list and its IR rank. The resulting score is the negated combined
/// rank, so lists stay sorted best first.
pub fn combine_with_ir(model_lists: &[RankedList], ir_ranks: &HashMap<(String, String), usize>) -> Result<Vec<RankedList>> {
    model_lists
        .iter()
        .map(|list| {
            let entries = list
                .entries
                .iter()
                .enumerate()
                .map(|(pos, e)| {
                    let key = (list.query_id.clone(), e.candidate_id.clone());
                    let ir = *ir_ranks
                        .get(&key)
                        .ok_or_else(|| Error::MissingIrRank(format!("{}/{}", key.0, key.1)))?;
                    Ok(RankedEntry {
                        candidate_id: e.candidate_id.clone(),
                        score: -((pos + 1) as f64 + ir as f64) / 2.0,
                        gold: e.gold,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            RankedList::new(list.query_id.clone(), entries)
        })
        .collect()
}

/// `(query_id, candidate_id) → IR rank` for every instance.
pub fn ir_rank_table(instances: &[PairInstance]) -> Result<HashMap<(String, String), usize>> {
    instances
        .iter()
        .map(|i| {
            let rank = i.ir_rank.ok_or_else(|| Error::MissingIrRank(i.id()))?;
            Ok(((i.query_id.clone(), i.candidate_id.clone()), rank))
        })
        .collect()
}

/// Object-one tokens of one instance with their attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub instance_id: String,
    pub tokens: Vec<String>,
    pub alphas: Vec<f64>,
    pub predicted: usize,
    pub gold: Option<usize>,
}

impl AttentionDump {
    /// `id<TAB>gold<TAB>predicted<TAB>token:alpha ...`, alphas to 6 decimals.
    pub fn to_line(&self) -> String {
        let gold = self.gold.map_or_else(|| "-".to_string(), |g| g.to_string());
        let mut line = format!("{}\t{}\t{}\t", self.instance_id, gold, self.predicted);
        for (k, (t, a)) in self.tokens.iter().zip(&self.alphas).enumerate() {
            if k > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{t}:{a:.6}");
        }
        line
    }
}

pub fn dump_attention(
    params: &ModelParams,
    instances: &[PairInstance],
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<Vec<AttentionDump>> {
    if !params.has_attention() {
        return Err(Error::NoAttention);
    }
    instances
        .iter()
        .map(|inst| {
            let pred = params.forward(inst)?;
            let alphas = pred.alphas().ok_or(Error::NoAttention)?.to_vec();
            Ok(AttentionDump {
                instance_id: inst.id(),
                tokens: vocab.decode(&inst.first),
                alphas,
                predicted: usize::from(pred.score() >= threshold),
                gold: inst.label,
            })
        })
        .collect()
}

pub fn write_attention_dump(records: &[AttentionDump], path: impl AsRef<Path>) -> Result<()> {
    let text: String = records.iter().map(|r| r.to_line() + "\n").collect();
    fs::write(path, text)?;
    Ok(())
}

/// Mean per-token attention on planted tokens and on the remaining tokens,
/// each averaged over records that contain both kinds.
pub fn attention_localization(records: &[AttentionDump], planted: impl Fn(&str) -> bool) -> Option<(f64, f64)> {
    let mut sums = (0.0, 0.0);
    let mut n = 0usize;
    for r in records {
        let (mut p, mut pc, mut d, mut dc) = (0.0, 0usize, 0.0, 0usize);
        for (t, a) in r.tokens.iter().zip(&r.alphas) {
            if planted(t) {
                p += a;
                pc += 1;
            } else {
                d += a;
                dc += 1;
            }
        }
        if pc > 0 && dc > 0 {
            sums.0 += p / pc as f64;
            sums.1 += d / dc as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sums.0 / n as f64, sums.1 / n as f64))
}

pub const KEYWORD_PREFIX: &str = "k";
pub const DISTRACTOR_PREFIX: &str = "w";

pub fn is_keyword(token: &str) -> bool {
    token.strip_prefix(KEYWORD_PREFIX).is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

/// Planted-keyword corpus: each query carries `query_keywords` distinct
/// keywords and each candidate one, among distractors. A pair is relevant iff
/// the candidate's keyword is one of the query's.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub task: Task,
    /// Keywords plus distractors.
    pub vocab_size: usize,
    pub keywords: usize,
    pub query_keywords: usize,
    pub groups: usize,
    pub candidates_per_group: usize,
    pub positive_rate: f64,
    /// Inclusive token-count range of each sequence, keyword included.
    pub query_len: (usize, usize),
    pub candidate_len: (usize, usize),
    /// Chance that a pair's IR rank is computed from the flipped label.
    pub ir_noise: f64,
    pub seed: u64,
    /// Query ids are `<prefix>q<index>`.
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::A,
            vocab_size: 50,
            keywords: 10,
            query_keywords: 1,
            groups: 200,
            candidates_per_group: 10,
            positive_rate: 0.4,
            query_len: (3, 6),
            candidate_len: (3, 6),
            ir_noise: 0.3,
            seed: 1,
            id_prefix: String::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.keywords < 2 || self.keywords > self.vocab_size {
            return bad(format!("need 2..={} keywords, got {}", self.vocab_size, self.keywords));
        }
        if self.query_keywords == 0 || self.query_keywords >= self.keywords {
            return bad(format!(
                "query_keywords must be in 1..{}, got {}",
                self.keywords, self.query_keywords
            ));
        }
        let planted = [("query_len", self.query_len, self.query_keywords), ("candidate_len", self.candidate_len, 1)];
        for (name, (lo, hi), keys) in planted {
            if lo < keys || lo > hi {
                return bad(format!("{name} range {lo}..={hi} is invalid for {keys} keyword(s)"));
            }
            if hi > keys && self.vocab_size == self.keywords {
                return bad(format!("{name} above 1 needs distractor tokens"));
            }
        }
        if self.groups == 0 || self.candidates_per_group == 0 {
            return bad("groups and candidates_per_group must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.positive_rate) || !(0.0..=1.0).contains(&self.ir_noise) {
            return bad("positive_rate and ir_noise must be probabilities".into());
        }
        Ok(())
    }
}

fn planted_sequence(keys: &[usize], (lo, hi): (usize, usize), distractors: usize, rng: &mut Rng) -> Vec<String> {
    let len = lo + rng.below(hi - lo + 1);
    let mut slots: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut slots);
    let mut tokens: Vec<Option<usize>> = vec![None; len];
    for (&slot, &k) in slots.iter().zip(keys) {
        tokens[slot] = Some(k);
    }
    tokens
        .into_iter()
        .map(|t| match t {
            Some(k) => format!("{KEYWORD_PREFIX}{k}"),
            None => format!("{DISTRACTOR_PREFIX}{}", rng.below(distractors)),
        })
        .collect()
}

/// `n` distinct keywords drawn uniformly from `0..count`, none in `exclude`.
fn draw_keywords(n: usize, count: usize, exclude: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..count).filter(|k| !exclude.contains(k)).collect();
    rng.shuffle(&mut pool);
    pool.truncate(n);
    pool
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let distractors = spec.vocab_size - spec.keywords;
    let mut groups = Vec::with_capacity(spec.groups);
    for g in 0..spec.groups {
        let keys = draw_keywords(spec.query_keywords, spec.keywords, &[], &mut rng);
        let query = planted_sequence(&keys, spec.query_len, distractors, &mut rng);
        let mut candidates = Vec::with_capacity(spec.candidates_per_group);
        let mut ir_scores = Vec::with_capacity(spec.candidates_per_group);
        for c in 0..spec.candidates_per_group {
            let relevant = rng.bernoulli(spec.positive_rate);
            let pick = |relevant: bool, rng: &mut Rng| {
                if relevant {
                    keys[rng.below(keys.len())]
                } else {
                    draw_keywords(1, spec.keywords, &keys, rng)[0]
                }
            };
            let cand_key = pick(relevant, &mut rng);
            let tokens = planted_sequence(&[cand_key], spec.candidate_len, distractors, &mut rng);
            let noisy = relevant != rng.bernoulli(spec.ir_noise);
            ir_scores.push(f64::from(u8::from(noisy)) + rng.unit());
            let (bridge, aux_labels) = if spec.task == Task::C {
                let related = rng.bernoulli(0.5);
                let bridge_key = pick(related, &mut rng);
                let bridge = planted_sequence(&[bridge_key], spec.candidate_len, distractors, &mut rng);
                (Some(bridge), Some([u8::from(related), u8::from(bridge_key == cand_key)]))
            } else {
                (None, None)
            };
            candidates.push(Candidate {
                id: format!("{}q{g}_c{c}", spec.id_prefix),
                tokens,
                label: Some(u8::from(relevant)),
                ir_rank: None,
                bridge,
                aux_labels,
            });
        }
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| ir_scores[b].total_cmp(&ir_scores[a]));
        for (rank, &i) in order.iter().enumerate() {
            candidates[i].ir_rank = Some(rank + 1);
        }
        groups.push(QueryGroup {
            id: format!("{}q{g}", spec.id_prefix),
            tokens: query,
            candidates,
        });
    }
    Ok(Corpus {
        task: spec.task,
        groups,
        augmented: false,
    })
}

/// Expected AP of a uniformly random ranking of `n` candidates with `r`
/// relevant, by enumerating every placement of the relevant set.
pub fn expected_random_ap(n: usize, r: usize) -> f64 {
    assert!(n <= 20 && r <= n && r > 0);
    let mut total = 0.0;
    let mut count = 0usize;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != r {
            continue;
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for k in 0..n {
            if mask & (1 << k) != 0 {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        total += sum / r as f64;
        count += 1;
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{instances, Provenance};
    use crate::model::{ModelConfig, Topology};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn list(golds: &[bool]) -> RankedList {
        let entries = golds
            .iter()
            .enumerate()
            .map(|(i, &g)| RankedEntry {
                candidate_id: format!("c{i:02}"),
                score: (golds.len() - i) as f64,
                gold: g,
            })
            .collect();
        RankedList::new("q", entries).unwrap()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&list(&[true, true, true])), 1.0);
        assert_abs_diff_eq!(average_precision(&list(&[true, false, true])), 5.0 / 6.0, epsilon = 1e-15);
        for n in 1..=10 {
            let mut golds = vec![false; n];
            golds[n - 1] = true;
            assert_abs_diff_eq!(average_precision(&list(&golds)), 1.0 / n as f64, epsilon = 1e-15);
        }
        assert_eq!(average_precision(&list(&[false, false])), 0.0);
    }

    #[test]
    fn ties_break_by_candidate_id() {
        let e = |id: &str, gold| RankedEntry {
            candidate_id: id.into(),
            score: 0.5,
            gold,
        };
        let l = RankedList::new("q", vec![e("b", false), e("a", true)]).unwrap();
        assert_eq!(l.entries()[0].candidate_id, "a");
        assert_eq!(average_precision(&l), 1.0);
        assert!(RankedList::new("q", vec![]).is_err());
    }

    #[test]
    fn map_examples() {
        let perfect = list(&[true, false]);
        let half = list(&[false, true]);
        assert_abs_diff_eq!(map_score(&[perfect.clone(), half.clone()]).unwrap(), 0.75, epsilon = 1e-15);
        let none = list(&[false, false]);
        assert_eq!(map_score(&[perfect.clone(), none.clone()]).unwrap(), 1.0);
        assert_eq!(map_score_including_empty(&[perfect.clone(), none.clone()]).unwrap(), 0.5);
        assert_eq!(
            map_score(&[perfect.clone(), half.clone(), perfect.clone(), half.clone()]).unwrap(),
            map_score(&[perfect, half]).unwrap()
        );
        assert!(matches!(map_score(&[none]), Err(Error::NoRelevant)));
    }

    #[test]
    fn f1_examples() {
        let p = f1_score(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));

        let p = f1_score(&[true, true, true, false, false], &[true, true, false, true, false]).unwrap();
        assert_abs_diff_eq!(p.precision, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.recall, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.f1, 2.0 / 3.0, epsilon = 1e-15);

        let p = f1_score(&[false, false], &[true, false]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert!(f1_score(&[true], &[true, false]).is_err());
    }

    #[test]
    fn random_ap_oracle_matches_small_cases() {
        // 3 candidates, 1 relevant: (1 + 1/2 + 1/3)/3
        assert_abs_diff_eq!(expected_random_ap(3, 1), 11.0 / 18.0, epsilon = 1e-15);
        assert_eq!(expected_random_ap(4, 4), 1.0);
    }

    #[test]
    fn combine_examples() {
        let e = |id: &str, score| RankedEntry {
            candidate_id: id.into(),
            score,
            gold: false,
        };
        let model = vec![RankedList::new("q", vec![e("a", 0.9), e("b", 0.1)]).unwrap()];
        let mut ir = HashMap::new();
        ir.insert(("q".to_string(), "a".to_string()), 2);
        ir.insert(("q".to_string(), "b".to_string()), 1);
        let out = combine_with_ir(&model, &ir).unwrap();
        let ids: Vec<&str> = out[0].entries().iter().map(|e| e.candidate_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(out[0].entries().iter().all(|e| e.score == -1.5));

        ir.insert(("q".to_string(), "a".to_string()), 1);
        ir.insert(("q".to_string(), "b".to_string()), 2);
        let out = combine_with_ir(&model, &ir).unwrap();
        assert_eq!(out[0].entries()[0].candidate_id, "a");

        ir.remove(&("q".to_string(), "b".to_string()));
        assert!(matches!(combine_with_ir(&model, &ir), Err(Error::MissingIrRank(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            groups: 1000,
            candidates_per_group: 5,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, generate_synthetic_corpus(&spec).unwrap());
        let pos = a.groups.iter().flat_map(|g| &g.candidates).filter(|c| c.label == Some(1)).count();
        let rate = pos as f64 / a.num_instances() as f64;
        assert!((rate - spec.positive_rate).abs() <= 0.05, "{rate}");
        for g in &a.groups {
            let qk: Vec<&String> = g.tokens.iter().filter(|t| is_keyword(t)).collect();
            assert_eq!(qk.len(), 1);
            for c in &g.candidates {
                let shares = c.tokens.iter().any(|t| t == qk[0]);
                assert_eq!(shares, c.label == Some(1));
            }
        }
    }

    #[test]
    fn several_query_keywords_any_match_is_relevant() {
        let spec = SyntheticSpec {
            keywords: 6,
            query_keywords: 3,
            query_len: (3, 8),
            groups: 300,
            candidates_per_group: 4,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        for g in &corpus.groups {
            let mut qk: Vec<&String> = g.tokens.iter().filter(|t| is_keyword(t)).collect();
            qk.sort();
            qk.dedup();
            assert_eq!(qk.len(), 3);
            for c in &g.candidates {
                let ck: Vec<&String> = c.tokens.iter().filter(|t| is_keyword(t)).collect();
                assert_eq!(ck.len(), 1);
                assert_eq!(qk.contains(&ck[0]), c.label == Some(1));
            }
        }
        let bad = SyntheticSpec {
            query_keywords: 10,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn synthetic_without_distractors_is_token_overlap() {
        let spec = SyntheticSpec {
            query_len: (1, 1),
            candidate_len: (1, 1),
            groups: 20,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        for g in &c.groups {
            for cand in &g.candidates {
                assert_eq!(cand.tokens == g.tokens, cand.label == Some(1));
            }
        }
    }

    #[test]
    fn task_c_synthetic_has_bridges() {
        let spec = SyntheticSpec {
            task: Task::C,
            groups: 3,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        assert!(c.groups.iter().flat_map(|g| &g.candidates).all(|c| c.bridge.is_some() && c.aux_labels.is_some()));
    }

    #[test]
    fn attention_dump_records() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            groups: 3,
            candidates_per_group: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let vocab = Vocabulary::from_corpora(&[&corpus]);
        let inst = instances(&corpus, &vocab);
        let cfg = ModelConfig {
            topology: Topology::Attention,
            vocab_size: vocab.len(),
            embed_dim: 4,
            cell_count: 3,
            attention_hidden: 2,
            mlp_hidden: 3,
            ..ModelConfig::default()
        };
        let p = ModelParams::random(&cfg, &mut Rng::new(1)).unwrap();
        let dump = dump_attention(&p, &inst, &vocab, 0.5).unwrap();
        assert_eq!(dump.len(), inst.len());
        for r in &dump {
            assert_eq!(r.tokens.len(), r.alphas.len());
            assert!((r.alphas.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            assert_eq!(r.to_line().split('\t').count(), 4);
        }

        let mut single = inst[0].clone();
        single.first.truncate(1);
        let d = dump_attention(&p, &[single], &vocab, 0.5).unwrap();
        assert_eq!(d[0].alphas, vec![1.0]);
        assert!(d[0].to_line().ends_with(":1.000000"));

        let parallel = ModelParams::random(&ModelConfig { topology: Topology::Parallel, ..cfg }, &mut Rng::new(1)).unwrap();
        assert!(matches!(dump_attention(&parallel, &inst, &vocab, 0.5), Err(Error::NoAttention)));
    }

    #[test]
    fn localization_of_uniform_attention_is_even() {
        let r = AttentionDump {
            instance_id: "q/c".into(),
            tokens: vec!["w1".into(), "k2".into(), "w3".into()],
            alphas: vec![0.25, 0.5, 0.25],
            predicted: 1,
            gold: Some(1),
        };
        assert_eq!(attention_localization(&[r], is_keyword), Some((0.5, 0.25)));
    }

    #[test]
    fn evaluate_requires_labels() {
        let inst = PairInstance {
            query_id: "q".into(),
            candidate_id: "c".into(),
            first: vec![1],
            second: vec![1],
            third: None,
            label: None,
            aux_labels: None,
            ir_rank: None,
            provenance: Provenance::Original,
        };
        assert!(matches!(metrics_from_scores(&[inst], &[0.5], 0.5), Err(Error::MissingLabel(_))));
    }

    fn brute_ap(golds: &[bool]) -> f64 {
        let r = golds.iter().filter(|&&g| g).count();
        if r == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 1..=golds.len() {
            if golds[k - 1] {
                let prefix = &golds[..k];
                total += prefix.iter().filter(|&&g| g).count() as f64 / k as f64;
            }
        }
        total / r as f64
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(golds in prop::collection::vec(any::<bool>(), 1..9)) {
            prop_assert_eq!(average_precision(&list(&golds)), brute_ap(&golds));
        }

        #[test]
        fn ap_depends_only_on_order(
            raw in prop::collection::vec((0u32..1000, any::<bool>()), 1..10),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let build = |f: &dyn Fn(f64) -> f64| {
                let entries = raw.iter().enumerate().map(|(i, &(s, g))| RankedEntry {
                    candidate_id: format!("c{i:02}"),
                    score: f(s as f64),
                    gold: g,
                }).collect();
                RankedList::new("q", entries).unwrap()
            };
            let a = build(&|s| s);
            let b = build(&|s| s * scale + shift);
            prop_assert_eq!(average_precision(&a), average_precision(&b));
        }

        #[test]
        fn f1_is_harmonic_mean(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
            let (p, g): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let s = f1_score(&p, &g).unwrap();
            if s.precision + s.recall > 0.0 {
                let h = 2.0 * s.precision * s.recall / (s.precision + s.recall);
                prop_assert!((s.f1 - h).abs() <= 1e-15);
            }
        }

        #[test]
        fn combine_is_symmetric(perm in Just((1..=6usize).collect::<Vec<_>>()).prop_shuffle()) {
            let n = perm.len();
            let entries: Vec<RankedEntry> = (0..n).map(|i| RankedEntry {
                candidate_id: format!("c{i}"),
                score: (n - i) as f64,
                gold: i % 2 == 0,
            }).collect();
            let model = RankedList::new("q", entries).unwrap();
            let ir: HashMap<(String, String), usize> =
                (0..n).map(|i| (("q".to_string(), format!("c{i}")), perm[i])).collect();
            let ab = combine_with_ir(std::slice::from_ref(&model), &ir).unwrap();

            let swapped = RankedList::new("q", (0..n).map(|i| RankedEntry {
                candidate_id: format!("c{i}"),
                score: -(perm[i] as f64),
                gold: i % 2 == 0,
            }).collect()).unwrap();
            let model_ranks: HashMap<(String, String), usize> =
                (0..n).map(|i| (("q".to_string(), format!("c{i}")), i + 1)).collect();
            let ba = combine_with_ir(&[swapped], &model_ranks).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
