//! Corpus representation and the canonical line format.
//!
//! One record per line, tab separated:
//!
//! ```text
//! query_id  candidate_id  label(0|1|-)  ir_rank(int|-)  query_text  candidate_text  [bridge_text]  [aux_labels]
//! ```
//!
//! `bridge_text` carries the related question of a task-C triple and
//! `aux_labels` (`qq,cc`, e.g. `1,0`) its oriQ/relQ and relQ/relC labels for
//! multitask training. Lines starting with `#` are comments; the comment
//! `# provenance: augmented` marks a file written by an augmentation pass.

mod augment;
mod checkpoint;
mod embeddings;

pub use augment::{augment_question_pairs, augment_task_c_with_task_a, generated_pairs, merge_task_a_into_c};
pub use checkpoint::{load_checkpoint, save_checkpoint, transfer_init, Checkpoint, CHECKPOINT_VERSION};
pub use embeddings::{load_embeddings, parse_embeddings, random_embeddings, EmbeddingTable};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;
pub const AUGMENTED_MARKER: &str = "# provenance: augmented";

/// Which cQA relation a corpus holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// question / comment
    A,
    /// question / related question
    B,
    /// question / external comment (with the related question as bridge)
    C,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Task::A),
            "B" | "b" => Ok(Task::B),
            "C" | "c" => Ok(Task::C),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}, expected A, B or C"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::A => "A",
            Task::B => "B",
            Task::C => "C",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: Option<u8>,
    /// 1-based rank assigned by the IR system.
    pub ir_rank: Option<usize>,
    pub bridge: Option<Vec<String>>,
    /// `[oriQ/relQ, relQ/relC]` labels of a task-C triple.
    pub aux_labels: Option<[u8; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub id: String,
    pub tokens: Vec<String>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: Task,
    pub groups: Vec<QueryGroup>,
    pub augmented: bool,
}

impl Corpus {
    pub fn num_instances(&self) -> usize {
        self.groups.iter().map(|g| g.candidates.len()).sum()
    }

    pub fn is_labeled(&self) -> bool {
        self.groups.iter().flat_map(|g| &g.candidates).all(|c| c.label.is_some())
    }
}

/// Lowercase whitespace tokenization; punctuation stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn parse_label(field: &str, line: usize) -> Result<Option<u8>> {
    match field {
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        "-" => Ok(None),
        other => Err(Error::Parse {
            line,
            message: format!("label must be 0, 1 or -, got {other:?}"),
        }),
    }
}

/// Parses the canonical corpus format.
pub fn parse_corpus(text: &str, task: Task) -> Result<Corpus> {
    let mut groups: Vec<QueryGroup> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut augmented = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if raw.starts_with('#') {
            if raw.trim_end() == AUGMENTED_MARKER {
                augmented = true;
            }
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if !(6..=8).contains(&fields.len()) {
            return Err(Error::Parse {
                line,
                message: format!("expected 6 to 8 tab-separated fields, found {}", fields.len()),
            });
        }
        let (qid, cid) = (fields[0].trim(), fields[1].trim());
        if qid.is_empty() || cid.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty query or candidate id".into(),
            });
        }
        let label = parse_label(fields[2].trim(), line)?;
        let ir_rank = match fields[3].trim() {
            "-" => None,
            r => Some(r.parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad ir_rank {r:?}: {e}"),
            })?),
        };
        let query_tokens = tokenize(fields[4]);
        if query_tokens.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("query {qid} has no tokens"),
            });
        }
        let tokens = tokenize(fields[5]);
        if tokens.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("candidate {cid} has no tokens"),
            });
        }
        let bridge = match fields.get(6).map(|f| f.trim()) {
            None | Some("") | Some("-") => None,
            Some(text) => Some(tokenize(text)),
        };
        let aux_labels = match fields.get(7).map(|f| f.trim()) {
            None | Some("") | Some("-") => None,
            Some(text) => {
                let parts: Vec<&str> = text.split(',').collect();
                let parsed: Vec<Option<u8>> = parts.iter().map(|p| parse_label(p.trim(), line)).collect::<Result<_>>()?;
                match parsed.as_slice() {
                    [Some(a), Some(b)] => Some([*a, *b]),
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: format!("aux labels must look like 1,0 - got {text:?}"),
                        })
                    }
                }
            }
        };

        let gi = match by_id.get(qid) {
            Some(&gi) => {
                if groups[gi].tokens != query_tokens {
                    return Err(Error::Parse {
                        line,
                        message: format!("query {qid} text differs from its earlier record"),
                    });
                }
                gi
            }
            None => {
                by_id.insert(qid.to_string(), groups.len());
                groups.push(QueryGroup {
                    id: qid.to_string(),
                    tokens: query_tokens,
                    candidates: Vec::new(),
                });
                groups.len() - 1
            }
        };
        let group = &mut groups[gi];
        if group.candidates.iter().any(|c| c.id == cid) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate candidate {cid} in query {qid}"),
            });
        }
        if let Some(r) = ir_rank {
            if group.candidates.iter().any(|c| c.ir_rank == Some(r)) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate ir_rank {r} in query {qid}"),
                });
            }
        }
        group.candidates.push(Candidate {
            id: cid.to_string(),
            tokens,
            label,
            ir_rank,
            bridge,
            aux_labels,
        });
    }

    if groups.is_empty() {
        return Err(Error::NoQueries);
    }
    Ok(Corpus {
        task,
        groups,
        augmented,
    })
}

pub fn load_corpus(path: impl AsRef<Path>, task: Task) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?, task)
}

/// Serializes a corpus in the canonical format.
pub fn format_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    if corpus.augmented {
        out.push_str(AUGMENTED_MARKER);
        out.push('\n');
    }
    for g in &corpus.groups {
        for c in &g.candidates {
            let label = c.label.map_or("-".to_string(), |l| l.to_string());
            let rank = c.ir_rank.map_or("-".to_string(), |r| r.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                g.id,
                c.id,
                label,
                rank,
                g.tokens.join(" "),
                c.tokens.join(" ")
            ));
            if c.bridge.is_some() || c.aux_labels.is_some() {
                out.push('\t');
                out.push_str(&c.bridge.as_ref().map_or("-".to_string(), |b| b.join(" ")));
            }
            if let Some([a, b]) = c.aux_labels {
                out.push_str(&format!("\t{a},{b}"));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_corpus(corpus))?;
    Ok(())
}

/// Token ↔ id map; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            index: HashMap::from([(UNK.to_string(), UNK_ID)]),
            tokens: vec![UNK.to_string()],
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary::default();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Every token of every sequence in the given corpora.
    pub fn from_corpora(corpora: &[&Corpus]) -> Self {
        let mut v = Vocabulary::default();
        for corpus in corpora {
            for g in &corpus.groups {
                g.tokens.iter().for_each(|t| {
                    v.insert(t);
                });
                for c in &g.candidates {
                    c.tokens.iter().for_each(|t| {
                        v.insert(t);
                    });
                    if let Some(b) = &c.bridge {
                        b.iter().for_each(|t| {
                            v.insert(t);
                        });
                    }
                }
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.to_string(), id);
        self.tokens.push(token.to_string());
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, |t| t.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Where a training instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    /// Generated related-question pair.
    Augmented,
    /// Question/comment pair borrowed from task A.
    TaskA,
}

/// One object pair with its label, as the model consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInstance {
    pub query_id: String,
    pub candidate_id: String,
    /// Object one (question).
    pub first: Vec<usize>,
    /// Object two (comment or related question).
    pub second: Vec<usize>,
    /// Related question of a task-C triple.
    pub third: Option<Vec<usize>>,
    pub label: Option<usize>,
    pub aux_labels: Option<[usize; 2]>,
    pub ir_rank: Option<usize>,
    pub provenance: Provenance,
}

impl PairInstance {
    pub fn id(&self) -> String {
        format!("{}/{}", self.query_id, self.candidate_id)
    }
}

/// Flattens a corpus into model instances in file order.
pub fn instances(corpus: &Corpus, vocab: &Vocabulary) -> Vec<PairInstance> {
    corpus
        .groups
        .iter()
        .flat_map(|g| {
            let provenance = augment::provenance_of(&g.id);
            g.candidates.iter().map(move |c| PairInstance {
                query_id: g.id.clone(),
                candidate_id: c.id.clone(),
                first: vocab.encode(&g.tokens),
                second: vocab.encode(&c.tokens),
                third: c.bridge.as_ref().map(|b| vocab.encode(b)),
                label: c.label.map(usize::from),
                aux_labels: c.aux_labels.map(|[a, b]| [usize::from(a), usize::from(b)]),
                ir_rank: c.ir_rank,
                provenance,
            })
        })
        .collect()
}

/// Distinct query ids in first-seen order.
pub fn query_ids(instances: &[PairInstance]) -> Vec<String> {
    let mut seen = HashSet::new();
    instances
        .iter()
        .filter(|i| seen.insert(i.query_id.clone()))
        .map(|i| i.query_id.clone())
        .collect()
}
