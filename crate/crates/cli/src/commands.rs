use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use cqa_core::data::{
    augment_question_pairs, instances, load_checkpoint, load_corpus, load_embeddings, merge_task_a_into_c,
    save_checkpoint, transfer_init, write_corpus, Checkpoint, Corpus, PairInstance, Task, Vocabulary,
};
use cqa_core::eval::{
    self, combine_with_ir, f1_score, generate_synthetic_corpus, group_scores, ir_lists, ir_rank_table, map_score,
    random_baseline, score_instances, write_attention_dump, SyntheticSpec,
};
use cqa_core::gradcheck::{run_all, GradCheckConfig, GRADCHECK_TOLERANCE};
use cqa_core::model::{Model, ModelConfig, ModelParams};
use cqa_core::numerics::Rng;
use cqa_core::training::{train_with_dev, split_dev};

use crate::config::RunConfig;
use crate::{CliError, SynthArgs};

/// Lines go to stdout and, when a log path is configured, to that file.
struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut lines = vec![format!("# cqa {command} started at unix time {started}")];
        lines.extend(cfg.resolved().into_iter().map(|(k, v)| format!("# {k}={v}")));
        RunLog { lines }
    }

    fn push(&mut self, line: String) {
        println!("{line}");
        self.lines.push(line);
    }

    fn finish(self, path: Option<&Path>) -> Result<(), CliError> {
        if let Some(path) = path {
            let text: String = self.lines.iter().map(|l| format!("{l}\n")).collect();
            fs::write(path, text).map_err(cqa_core::Error::from)?;
        }
        Ok(())
    }
}

fn load(cfg: &RunConfig, key: &str, path: &Option<std::path::PathBuf>, task: Task) -> Result<Corpus, CliError> {
    let p = cfg.require(key, path)?;
    Ok(load_corpus(p, task)?)
}

/// Vocabulary, model config and initial parameters for training.
fn initial_model(
    cfg: &RunConfig,
    corpora: &[&Corpus],
    rng: &mut Rng,
) -> Result<(Vocabulary, ModelConfig, ModelParams), CliError> {
    if let Some(path) = &cfg.pretrained {
        let pretrained = load_checkpoint(path)?;
        let mut target = pretrained.model.config.clone();
        for key in &cfg.model_overrides {
            let value = cfg
                .model
                .to_pairs()
                .into_iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .expect("override keys are model keys");
            target.apply(key, &value)?;
        }
        let params = transfer_init(&pretrained, &target, rng)?;
        return Ok((pretrained.vocab, target, params));
    }

    let vocab = Vocabulary::from_corpora(corpora);
    let mut mc = cfg.model.clone();
    mc.vocab_size = vocab.len();
    match &cfg.embeddings {
        Some(path) => {
            let table = load_embeddings(path, &vocab, rng)?;
            if cfg.model_overrides.iter().any(|k| k == "embed_dim") && mc.embed_dim != table.embed_dim() {
                return Err(CliError::Failed(format!(
                    "embed_dim={} but {} has {}-dimensional vectors",
                    mc.embed_dim,
                    path.display(),
                    table.embed_dim()
                )));
            }
            mc.embed_dim = table.embed_dim();
            log::info!("embeddings cover {} of {} tokens", table.covered, vocab.len());
            let mut params = ModelParams::random(&mc, rng)?;
            params.embedding = table.matrix;
            Ok((vocab, mc, params))
        }
        None => {
            let params = ModelParams::random(&mc, rng)?;
            Ok((vocab, mc, params))
        }
    }
}

pub fn train(mut cfg: RunConfig) -> Result<(), CliError> {
    let corpus = load(&cfg, "corpus", &cfg.corpus, cfg.task)?;
    let ckpt_path = cfg.require("checkpoint", &cfg.checkpoint)?.to_path_buf();
    let dev_corpus = match &cfg.dev_corpus {
        Some(p) => Some(load_corpus(p, cfg.task)?),
        None => None,
    };
    let mut corpora = vec![&corpus];
    corpora.extend(dev_corpus.as_ref());

    let mut rng = Rng::new(cfg.train.seed);
    let (vocab, mc, params) = initial_model(&cfg, &corpora, &mut rng)?;
    cfg.model = mc.clone();

    let all = instances(&corpus, &vocab);
    let (train_set, dev_set) = match &dev_corpus {
        Some(d) => (all, instances(d, &vocab)),
        None => split_dev(&all, cfg.train.dev_fraction, cfg.train.seed),
    };

    let mut log = RunLog::new("train", &cfg);
    let outcome = train_with_dev(params, &train_set, &dev_set, &cfg.train)?;
    for r in &outcome.log {
        log.push(
            json!({
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "dev_map": r.dev_map,
                "dev_f1": r.dev_f1,
            })
            .to_string(),
        );
    }
    log.push(
        json!({
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.log.len(),
            "train_instances": train_set.len(),
            "dev_instances": dev_set.len(),
        })
        .to_string(),
    );
    save_checkpoint(
        &Checkpoint {
            model: Model {
                config: mc,
                params: outcome.params,
            },
            vocab,
        },
        &ckpt_path,
    )?;
    log.finish(cfg.log.as_deref())
}

/// Loads the checkpoint and rejects explicitly configured architecture
/// settings that disagree with it.
fn checkpoint_for(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let ck = load_checkpoint(cfg.require("checkpoint", &cfg.checkpoint)?)?;
    let stored = ck.model.config.to_pairs();
    let wanted = cfg.model.to_pairs();
    let mismatched: Vec<String> = cfg
        .model_overrides
        .iter()
        .filter_map(|key| {
            let have = stored.iter().find(|(k, _)| k == key)?;
            let want = wanted.iter().find(|(k, _)| k == key)?;
            (have.1 != want.1).then(|| format!("{key}: checkpoint has {}, config asks for {}", have.1, want.1))
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(CliError::Failed(format!("architecture mismatch: {}", mismatched.join("; "))));
    }
    Ok(ck)
}

fn print_metrics(map: f64, pr: Option<eval::PrecisionRecall>, queries: usize, instances: usize) {
    println!(
        "{}",
        json!({
            "map": map,
            "precision": pr.map(|p| p.precision),
            "recall": pr.map(|p| p.recall),
            "f1": pr.map(|p| p.f1),
            "queries": queries,
            "instances": instances,
        })
    );
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load(cfg, "corpus", &cfg.corpus, cfg.task)?;
    match cfg.baseline.as_str() {
        "random" => {
            let (lists, preds) = random_baseline(&corpus, &mut Rng::new(cfg.train.seed))?;
            let golds: Vec<bool> = corpus
                .groups
                .iter()
                .flat_map(|g| &g.candidates)
                .map(|c| c.label == Some(1))
                .collect();
            let pr = f1_score(&preds, &golds)?;
            let queries = lists.iter().filter(|l| l.relevant_count() > 0).count();
            print_metrics(map_score(&lists)?, Some(pr), queries, golds.len());
        }
        "ir" => {
            let inst = instances(&corpus, &Vocabulary::from_corpora(&[&corpus]));
            let lists = ir_lists(&inst)?;
            let queries = lists.iter().filter(|l| l.relevant_count() > 0).count();
            print_metrics(map_score(&lists)?, None, queries, inst.len());
        }
        _ => {
            let ck = checkpoint_for(cfg)?;
            let inst = instances(&corpus, &ck.vocab);
            let m = eval::evaluate(&ck.model.params, &inst, cfg.train.threshold)?;
            let pr = eval::PrecisionRecall {
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            };
            print_metrics(m.map, Some(pr), m.queries, m.instances);
        }
    }
    Ok(())
}

fn write_output(cfg: &RunConfig, text: &str) -> Result<(), CliError> {
    match &cfg.output {
        Some(p) => fs::write(p, text).map_err(cqa_core::Error::from)?,
        None => io::stdout().write_all(text.as_bytes()).map_err(cqa_core::Error::from)?,
    }
    Ok(())
}

fn ranking_text(lists: &[eval::RankedList]) -> String {
    let mut out = String::new();
    for l in lists {
        for e in l.entries() {
            out.push_str(&format!("{}\t{}\t{}\n", l.query_id, e.candidate_id, e.score));
        }
    }
    out
}

fn scored(cfg: &RunConfig) -> Result<(Checkpoint, Vec<PairInstance>, Vec<f64>), CliError> {
    let ck = checkpoint_for(cfg)?;
    let corpus = load(cfg, "corpus", &cfg.corpus, cfg.task)?;
    let inst = instances(&corpus, &ck.vocab);
    let scores = score_instances(&ck.model.params, &inst)?;
    Ok((ck, inst, scores))
}

pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let (_, inst, scores) = scored(cfg)?;
    let lists = group_scores(inst.iter().zip(scores))?;
    write_output(cfg, &ranking_text(&lists))
}

pub fn combine(cfg: &RunConfig) -> Result<(), CliError> {
    let (_, inst, scores) = scored(cfg)?;
    let model_lists = group_scores(inst.iter().zip(scores))?;
    let ir = ir_rank_table(&inst)?;
    let combined = combine_with_ir(&model_lists, &ir)?;
    let map_or_null = |lists: &[eval::RankedList]| map_score(lists).ok();
    if let Some(p) = &cfg.output {
        fs::write(p, ranking_text(&combined)).map_err(cqa_core::Error::from)?;
    }
    println!(
        "{}",
        json!({
            "model_map": map_or_null(&model_lists),
            "ir_map": map_or_null(&ir_lists(&inst)?),
            "combined_map": map_or_null(&combined),
        })
    );
    Ok(())
}

pub fn augment(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load(cfg, "corpus", &cfg.corpus, cfg.task)?;
    let output = cfg.require("output", &cfg.output)?;
    let augmented = match &cfg.aux_corpus {
        Some(p) => {
            if cfg.task != Task::C {
                return Err(CliError::Usage("aux_corpus merging needs task=C".into()));
            }
            merge_task_a_into_c(&corpus, &load_corpus(p, Task::A)?)?
        }
        None => augment_question_pairs(&corpus)?,
    };
    write_corpus(&augmented, output)?;
    println!("instances: {} -> {}", corpus.num_instances(), augmented.num_instances());
    Ok(())
}

pub fn dump_attention(cfg: &RunConfig) -> Result<(), CliError> {
    let output = cfg.require("output", &cfg.output)?.to_path_buf();
    let ck = checkpoint_for(cfg)?;
    let corpus = load(cfg, "corpus", &cfg.corpus, cfg.task)?;
    let inst = instances(&corpus, &ck.vocab);
    let records = eval::dump_attention(&ck.model.params, &inst, &ck.vocab, cfg.train.threshold)?;
    write_attention_dump(&records, &output)?;
    println!("records: {}", records.len());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, corrupt_backward: bool) -> Result<(), CliError> {
    let mut gc = GradCheckConfig {
        seed: cfg.train.seed,
        corrupt_backward,
        ..GradCheckConfig::default()
    };
    for key in &cfg.model_overrides {
        match key.as_str() {
            "embed_dim" => gc.embed_dim = cfg.model.embed_dim,
            "cell_count" => gc.cell_count = cfg.model.cell_count,
            "attention_hidden" => gc.attention_hidden = cfg.model.attention_hidden,
            "mlp_hidden" => gc.mlp_hidden = cfg.model.mlp_hidden,
            "init_scale" => gc.init_scale = cfg.model.init_scale,
            _ => {}
        }
    }
    let reports = run_all(&gc)?;
    let mut failed = Vec::new();
    for r in &reports {
        for (name, err) in &r.report.per_tensor {
            println!("{}\t{name}\t{err:.3e}", r.topology);
        }
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{}\tmax\t{:.3e}\t{verdict}", r.topology, r.report.max_relative_error);
        if !r.passed() {
            failed.push(r.topology.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check above {GRADCHECK_TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}

pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    let output = cfg.require("output", &cfg.output)?;
    let spec = SyntheticSpec {
        task: cfg.task,
        vocab_size: args.vocab_size,
        keywords: args.keywords,
        query_keywords: args.query_keywords,
        query_len: args.query_len,
        candidate_len: args.candidate_len,
        groups: args.groups,
        candidates_per_group: args.candidates,
        positive_rate: args.positive_rate,
        seed: cfg.train.seed,
        id_prefix: args.id_prefix.clone(),
        ..SyntheticSpec::default()
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = generate_synthetic_corpus(&spec)?;
    write_corpus(&corpus, output)?;
    println!("groups: {} instances: {}", corpus.groups.len(), corpus.num_instances());
    Ok(())
}
