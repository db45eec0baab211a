use cqa_core::data::{instances, Task, Vocabulary};
use cqa_core::eval::{generate_synthetic_corpus, score_instances, SyntheticSpec};
use cqa_core::model::{ModelConfig, ModelParams};
use cqa_core::numerics::Rng;
use cqa_core::training::{train_with_dev, TrainConfig};

#[test]
fn separable_corpus_reaches_high_training_accuracy() {
    // Keyword overlap with no distractors: 40 groups of 5 pairs over 20 tokens.
    let spec = SyntheticSpec {
        task: Task::A,
        vocab_size: 20,
        keywords: 20,
        groups: 40,
        candidates_per_group: 5,
        query_len: (1, 1),
        candidate_len: (1, 1),
        seed: 11,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let vocab = Vocabulary::from_corpora(&[&corpus]);
    let data = instances(&corpus, &vocab);
    assert_eq!(data.len(), 200);

    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let init = ModelParams::random(&model, &mut Rng::new(config.seed)).unwrap();
    let outcome = train_with_dev(init, &data, &[], &config).unwrap();

    let scores = score_instances(&outcome.params, &data).unwrap();
    let correct = data
        .iter()
        .zip(&scores)
        .filter(|(inst, &s)| (s >= config.threshold) == (inst.label == Some(1)))
        .count();
    let accuracy = correct as f64 / data.len() as f64;
    assert!(accuracy >= 0.95, "training accuracy {accuracy}");
}
