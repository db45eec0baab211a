//! Flat `key=value` run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use cqa_core::data::Task;
use cqa_core::model::ModelConfig;
use cqa_core::training::TrainConfig;

use crate::CliError;

/// Keys naming input and output files.
const PATH_KEYS: [&str; 8] = [
    "corpus",
    "dev_corpus",
    "aux_corpus",
    "embeddings",
    "checkpoint",
    "pretrained",
    "output",
    "log",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub corpus: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    /// Task-A corpus merged into task-C training data by `augment`.
    pub aux_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint whose non-softmax tensors initialize training.
    pub pretrained: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// `none`, `random` or `ir` for `evaluate`.
    pub baseline: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Architecture keys set explicitly, checked against checkpoints.
    pub model_overrides: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::A,
            corpus: None,
            dev_corpus: None,
            aux_corpus: None,
            embeddings: None,
            checkpoint: None,
            pretrained: None,
            output: None,
            log: None,
            baseline: "none".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            model_overrides: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim();
        let value = value.trim();
        let usage = |e: cqa_core::Error| CliError::Usage(e.to_string());
        let path = || (!value.is_empty() && value != "-").then(|| PathBuf::from(value));
        match key {
            "task" => self.task = value.parse().map_err(usage)?,
            "corpus" => self.corpus = path(),
            "dev_corpus" => self.dev_corpus = path(),
            "aux_corpus" => self.aux_corpus = path(),
            "embeddings" => self.embeddings = path(),
            "checkpoint" => self.checkpoint = path(),
            "pretrained" => self.pretrained = path(),
            "output" => self.output = path(),
            "log" => self.log = path(),
            "baseline" => match value {
                "none" | "random" | "ir" => self.baseline = value.to_string(),
                _ => return Err(CliError::Usage(format!("baseline must be none, random or ir, got {value:?}"))),
            },
            "vocab_size" => {
                return Err(CliError::Usage("vocab_size is derived from the corpus and cannot be set".into()))
            }
            _ => {
                if self.model.apply(key, value).map_err(usage)? {
                    if !self.model_overrides.iter().any(|k| k == key) {
                        self.model_overrides.push(key.to_string());
                    }
                } else if !self.train.apply(key, value).map_err(usage)? {
                    return Err(CliError::Usage(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
            self.apply(k, v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {pair:?} is not key=value")))?;
        self.apply(k, v)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Every setting with defaults filled in, in a fixed order.
    pub fn resolved(&self) -> Vec<(String, String)> {
        let show = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string());
        let paths = [
            &self.corpus,
            &self.dev_corpus,
            &self.aux_corpus,
            &self.embeddings,
            &self.checkpoint,
            &self.pretrained,
            &self.output,
            &self.log,
        ];
        let mut out = vec![("task".to_string(), self.task.to_string())];
        out.extend(PATH_KEYS.iter().zip(paths).map(|(k, p)| (k.to_string(), show(p))));
        out.push(("baseline".into(), self.baseline.clone()));
        out.extend(self.model.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.extend(self.train.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("this command needs `{key}` (use --{} or {key}=...)", key.replace('_', "-"))))
    }
}
