use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cqa_core::data::{save_checkpoint, Checkpoint, Vocabulary};
use cqa_core::data::{instances, load_checkpoint, load_corpus, Task};
use cqa_core::eval::{f1_score, map_score, random_baseline};
use cqa_core::model::{Model, ModelConfig, ModelParams, Topology};
use cqa_core::numerics::Rng;
use tempfile::TempDir;

const SMALL: [&str; 8] = [
    "-s",
    "embed_dim=4",
    "-s",
    "cell_count=6",
    "-s",
    "attention_hidden=6",
    "-s",
    "mlp_hidden=6",
];

fn cqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cqa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("cqa binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cqa(dir, args);
    assert!(
        out.status.success(),
        "cqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, name: &str, groups: usize, seed: u64) -> PathBuf {
    ok(
        dir,
        &["synth", "--groups", &groups.to_string(), "--candidates", "4", "--seed", &seed.to_string(), "-o", name],
    );
    dir.join(name)
}

fn train_small(dir: &Path, corpus: &str, ckpt: &str, epochs: usize, extra: &[&str]) -> String {
    let epochs = epochs.to_string();
    let mut args = vec!["train", "--corpus", corpus, "--checkpoint", ckpt, "--epochs", &epochs];
    args.extend(SMALL);
    args.extend(extra);
    ok(dir, &args)
}

fn json_field(line: &str, key: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {line}"))
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(cqa(dir.path(), &["train", "--checkpoint", "m.ck"]).status.code(), Some(2));
    assert_eq!(cqa(dir.path(), &["train", "-s", "colour=red"]).status.code(), Some(2));
    assert_eq!(cqa(dir.path(), &["train", "--bogus-flag"]).status.code(), Some(2));
    assert_eq!(cqa(dir.path(), &["evaluate", "-s", "baseline=oracle"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let out = cqa(dir.path(), &["evaluate", "--corpus", "missing.tsv", "--checkpoint", "missing.ck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "tr.tsv", 6, 1);
    train_small(dir.path(), "tr.tsv", "m.ck", 0, &["--seed", "9"]);
    let ck = load_checkpoint(dir.path().join("m.ck")).unwrap();
    let corpus = load_corpus(dir.path().join("tr.tsv"), Task::A).unwrap();
    let vocab = Vocabulary::from_corpora(&[&corpus]);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 4,
        cell_count: 6,
        attention_hidden: 6,
        mlp_hidden: 6,
        ..ModelConfig::default()
    };
    let init = ModelParams::random(&config, &mut Rng::new(9)).unwrap();
    assert_eq!(ck.model.config, config);
    assert_eq!(ck.model.params, init);
    assert_eq!(ck.vocab, vocab);
}

#[test]
fn architecture_mismatch_is_rejected() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "tr.tsv", 6, 1);
    train_small(dir.path(), "tr.tsv", "m.ck", 1, &[]);
    let out = cqa(
        dir.path(),
        &["evaluate", "--corpus", "tr.tsv", "--checkpoint", "m.ck", "-s", "cell_count=7"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cell_count"));
}

#[test]
fn evaluate_is_repeatable_and_reports_every_metric() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "tr.tsv", 10, 1);
    synth(dir.path(), "te.tsv", 5, 2);
    train_small(dir.path(), "tr.tsv", "m.ck", 1, &[]);
    let args = ["evaluate", "--corpus", "te.tsv", "--checkpoint", "m.ck"];
    let first = ok(dir.path(), &args);
    assert_eq!(first, ok(dir.path(), &args));
    for key in ["map", "precision", "recall", "f1"] {
        let v = json_field(first.trim(), key);
        assert!((0.0..=1.0).contains(&v), "{key}={v}");
    }
    assert_eq!(json_field(first.trim(), "instances"), 20.0);
}

#[test]
fn random_baseline_command_matches_direct_call() {
    let dir = TempDir::new().unwrap();
    let path = synth(dir.path(), "te.tsv", 8, 4);
    let out = ok(dir.path(), &["evaluate", "--corpus", "te.tsv", "-s", "baseline=random", "--seed", "11"]);
    let corpus = load_corpus(&path, Task::A).unwrap();
    let (lists, preds) = random_baseline(&corpus, &mut Rng::new(11)).unwrap();
    let golds: Vec<bool> = corpus.groups.iter().flat_map(|g| &g.candidates).map(|c| c.label == Some(1)).collect();
    let pr = f1_score(&preds, &golds).unwrap();
    assert_eq!(json_field(out.trim(), "map"), map_score(&lists).unwrap());
    assert_eq!(json_field(out.trim(), "f1"), pr.f1);
    assert_eq!(json_field(out.trim(), "precision"), pr.precision);
}

#[test]
fn ir_ordered_oracle_scores_map_one() {
    let dir = TempDir::new().unwrap();
    let fixture = "q1\tc1\t1\t1\ta b\tb c\nq1\tc2\t0\t2\ta b\tc d\nq1\tc3\t0\t3\ta b\td e\n\
                   q2\tc4\t1\t1\tb d\ta a\nq2\tc5\t1\t2\tb d\tc c\nq2\tc6\t0\t3\tb d\te e\n";
    fs::write(dir.path().join("te.tsv"), fixture).unwrap();
    let corpus = load_corpus(dir.path().join("te.tsv"), Task::A).unwrap();
    let vocab = Vocabulary::from_corpora(&[&corpus]);
    let config = ModelConfig {
        topology: Topology::Parallel,
        vocab_size: vocab.len(),
        embed_dim: 2,
        cell_count: 2,
        mlp_hidden: 2,
        ir_features: true,
        ir_rank_slots: 4,
        ..ModelConfig::default()
    };
    // Only the IR one-hot reaches the output; better ranks give higher scores.
    let mut params = ModelParams::zeros(&config);
    let first_slot = params.classifier.hidden.w.cols() - config.ir_rank_slots;
    for slot in 0..config.ir_rank_slots {
        params.classifier.hidden.w.set(0, first_slot + slot, -0.3 * slot as f64);
    }
    params.classifier.heads[0].w.set(1, 0, 4.0);
    save_checkpoint(&Checkpoint { model: Model { config, params }, vocab }, dir.path().join("oracle.ck")).unwrap();
    let out = ok(dir.path(), &["evaluate", "--corpus", "te.tsv", "--checkpoint", "oracle.ck"]);
    assert_eq!(json_field(out.trim(), "map"), 1.0);
}

#[test]
fn predict_writes_one_probability_per_candidate() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "tr.tsv", 6, 1);
    train_small(dir.path(), "tr.tsv", "m.ck", 1, &[]);
    let unlabeled: String = fs::read_to_string(synth(dir.path(), "te.tsv", 4, 5))
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split('\t').collect();
            f[2] = "-";
            f.join("\t") + "\n"
        })
        .collect();
    fs::write(dir.path().join("unlabeled.tsv"), unlabeled).unwrap();
    let args = ["predict", "--corpus", "unlabeled.tsv", "--checkpoint", "m.ck"];
    let text = ok(dir.path(), &args);
    assert_eq!(text, ok(dir.path(), &args));

    let ck = load_checkpoint(dir.path().join("m.ck")).unwrap();
    let corpus = load_corpus(dir.path().join("unlabeled.tsv"), Task::A).unwrap();
    let inst = instances(&corpus, &ck.vocab);
    let lines: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(lines.len(), inst.len());
    for w in lines.windows(2) {
        if w[0][0] == w[1][0] {
            assert!(w[0][2].parse::<f64>().unwrap() >= w[1][2].parse::<f64>().unwrap());
        }
    }
    for i in &inst {
        let line = lines.iter().find(|l| l[1] == i.candidate_id).unwrap();
        let score: f64 = line[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert_eq!(score, ck.model.forward(i).unwrap().score());
    }
}

#[test]
fn augment_counts_and_refuses_rework() {
    let dir = TempDir::new().unwrap();
    let fixture = "q1\tr1\t1\t1\tx y\ta b\nq1\tr2\t1\t2\tx y\tc d\nq1\tr3\t0\t3\tx y\te f\n";
    fs::write(dir.path().join("b.tsv"), fixture).unwrap();
    let out = ok(dir.path(), &["augment", "--task", "B", "--corpus", "b.tsv", "-o", "aug.tsv"]);
    assert_eq!(out.trim(), "instances: 3 -> 6");
    let again = cqa(dir.path(), &["augment", "--task", "B", "--corpus", "aug.tsv", "-o", "aug2.tsv"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(!dir.path().join("aug2.tsv").exists());
}

#[test]
fn augment_without_labels_fails() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("b.tsv"), "q1\tr1\t-\t1\tx y\ta b\nq1\tr2\t1\t2\tx y\tc d\n").unwrap();
    let out = cqa(dir.path(), &["augment", "--task", "B", "--corpus", "b.tsv", "-o", "aug.tsv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_lists_each_tensor_once_and_catches_corruption() {
    let dir = TempDir::new().unwrap();
    let text = ok(dir.path(), &["gradcheck"]);
    for topology in ["parallel", "serialized", "attention", "multitask"] {
        let names: Vec<&str> = text
            .lines()
            .filter_map(|l| l.strip_prefix(topology)?.strip_prefix('\t'))
            .map(|rest| rest.split('\t').next().unwrap())
            .filter(|n| *n != "max")
            .collect();
        assert!(!names.is_empty(), "{topology} missing");
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len(), "{topology} repeats a tensor");
        assert!(text.contains(&format!("{topology}\tmax\t")));
    }
    assert!(!text.contains("FAIL"));
    assert_ne!(cqa(dir.path(), &["gradcheck", "--corrupt-backward"]).status.code(), Some(0));
}

#[test]
fn train_log_matches_golden_and_echoes_config() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "tr.tsv", 20, 1);
    let stdout = train_small(dir.path(), "tr.tsv", "m.ck", 3, &["--log", "train.log", "--seed", "5"]);
    let log = fs::read_to_string(dir.path().join("train.log")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("# cqa train started at unix time "));
    let header: Vec<&str> = lines.clone().take_while(|l| l.starts_with("# ")).collect();
    for key in ["task=A", "topology=attention", "cell_count=6", "epochs=3", "seed=5", "optimizer=adagrad", "dropout_rate=0.4"] {
        assert!(header.iter().any(|l| l[2..] == *key), "header lacks {key}");
    }
    let body: String = lines.skip(header.len()).map(|l| format!("{l}\n")).collect();
    assert_eq!(body, stdout);
    let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/train_synth.log")).unwrap();
    assert_eq!(body, golden);
}

#[test]
fn resolved_header_replays_the_run() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "tr.tsv", 8, 1);
    train_small(dir.path(), "tr.tsv", "a.ck", 2, &["--log", "a.log", "-s", "l2=0.001"]);
    let config: String = fs::read_to_string(dir.path().join("a.log"))
        .unwrap()
        .lines()
        .skip(1)
        .filter_map(|l| l.strip_prefix("# "))
        .filter(|l| !l.starts_with("vocab_size=") && !l.starts_with("checkpoint=") && !l.starts_with("log="))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    ok(dir.path(), &["train", "--config", "run.cfg", "--checkpoint", "b.ck"]);
    assert_eq!(
        fs::read(dir.path().join("a.ck")).unwrap(),
        fs::read(dir.path().join("b.ck")).unwrap()
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "tr.tsv", 10, 1);
    synth(dir.path(), "again.tsv", 10, 1);
    assert_eq!(fs::read(dir.path().join("tr.tsv")).unwrap(), fs::read(dir.path().join("again.tsv")).unwrap());

    let a = train_small(dir.path(), "tr.tsv", "a.ck", 2, &[]);
    let b = train_small(dir.path(), "tr.tsv", "b.ck", 2, &[]);
    assert_eq!(a, b);
    assert_eq!(fs::read(dir.path().join("a.ck")).unwrap(), fs::read(dir.path().join("b.ck")).unwrap());

    for cmd in ["predict", "combine"] {
        let args = [cmd, "--corpus", "tr.tsv", "--checkpoint", "a.ck"];
        assert_eq!(ok(dir.path(), &args), ok(dir.path(), &args));
    }
    ok(dir.path(), &["dump-attention", "--corpus", "tr.tsv", "--checkpoint", "a.ck", "-o", "d1.txt"]);
    ok(dir.path(), &["dump-attention", "--corpus", "tr.tsv", "--checkpoint", "a.ck", "-o", "d2.txt"]);
    assert_eq!(fs::read(dir.path().join("d1.txt")).unwrap(), fs::read(dir.path().join("d2.txt")).unwrap());
}
