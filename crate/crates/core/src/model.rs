//! The full pair model: embedding lookup, pair encoder(s), classifier.

use std::fmt;
use std::str::FromStr;

use crate::classifier::{classifier_input, AugmentedFeatures, FnnParams, FnnTrace, MAIN_HEAD, RELEVANT};
use crate::data::PairInstance;
use crate::encoder::{AttentionParams, LstmParams, PairEncoderParams, PairEncoding, PairTopology, PairTrace, Peephole};
use crate::error::{Error, Result};
use crate::numerics::{fill_uniform, Matrix, ParamSet, Rng, Vector};
use crate::training::dropout_mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Parallel,
    Serialized,
    /// Serialized with attention over object one.
    Attention,
    /// Three serialized attention encoders under a shared three-headed trunk.
    Multitask,
}

impl Topology {
    pub const ALL: [Topology; 4] = [Topology::Parallel, Topology::Serialized, Topology::Attention, Topology::Multitask];

    pub fn has_attention(self) -> bool {
        matches!(self, Topology::Attention | Topology::Multitask)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Parallel => "parallel",
            Topology::Serialized => "serialized",
            Topology::Attention => "attention",
            Topology::Multitask => "multitask",
        })
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parallel" => Ok(Topology::Parallel),
            "serialized" => Ok(Topology::Serialized),
            "attention" => Ok(Topology::Attention),
            "multitask" => Ok(Topology::Multitask),
            other => Err(Error::InvalidArgument(format!("unknown topology {other:?}"))),
        }
    }
}

/// Architecture of a model. Everything needed to allocate its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub topology: Topology,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub cell_count: usize,
    pub attention_hidden: usize,
    pub mlp_hidden: usize,
    pub lstm_shared: bool,
    pub peephole: Peephole,
    /// Append the one-hot IR rank to the classifier input.
    pub ir_features: bool,
    pub ir_rank_slots: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            topology: Topology::Attention,
            vocab_size: 1,
            embed_dim: 300,
            cell_count: 128,
            attention_hidden: 128,
            mlp_hidden: 256,
            lstm_shared: false,
            peephole: Peephole::Dense,
            ir_features: false,
            ir_rank_slots: 10,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("cell_count", self.cell_count),
            ("attention_hidden", self.attention_hidden),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.ir_features && self.ir_rank_slots == 0 {
            return Err(Error::InvalidArgument("ir_rank_slots must be positive when ir_features is on".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn augmented_len(&self) -> usize {
        if self.ir_features {
            self.ir_rank_slots
        } else {
            0
        }
    }

    /// `key=value` pairs covering every field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("topology", self.topology.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("cell_count", self.cell_count.to_string()),
            ("attention_hidden", self.attention_hidden.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("lstm_shared", self.lstm_shared.to_string()),
            (
                "peephole",
                match self.peephole {
                    Peephole::Dense => "dense".to_string(),
                    Peephole::Diagonal => "diagonal".to_string(),
                },
            ),
            ("ir_features", self.ir_features.to_string()),
            ("ir_rank_slots", self.ir_rank_slots.to_string()),
            ("init_scale", format!("{:?}", self.init_scale)),
        ]
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: &dyn fmt::Display| Error::InvalidArgument(format!("{key}={value}: {e}"));
        match key {
            "topology" => self.topology = value.parse()?,
            "vocab_size" => self.vocab_size = value.parse().map_err(|e| bad(&e))?,
            "embed_dim" => self.embed_dim = value.parse().map_err(|e| bad(&e))?,
            "cell_count" => self.cell_count = value.parse().map_err(|e| bad(&e))?,
            "attention_hidden" => self.attention_hidden = value.parse().map_err(|e| bad(&e))?,
            "mlp_hidden" => self.mlp_hidden = value.parse().map_err(|e| bad(&e))?,
            "lstm_shared" => self.lstm_shared = value.parse().map_err(|e| bad(&e))?,
            "peephole" => {
                self.peephole = match value {
                    "dense" => Peephole::Dense,
                    "diagonal" => Peephole::Diagonal,
                    _ => return Err(bad(&"expected dense or diagonal")),
                }
            }
            "ir_features" => self.ir_features = value.parse().map_err(|e| bad(&e))?,
            "ir_rank_slots" => self.ir_rank_slots = value.parse().map_err(|e| bad(&e))?,
            "init_scale" => self.init_scale = value.parse().map_err(|e| bad(&e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Every trainable tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `vocab_size × embed_dim`
    pub embedding: Matrix,
    /// One encoder, or three for multitask (oriQ/relQ, oriQ/relC, relQ/relC).
    pub encoders: Vec<PairEncoderParams>,
    pub classifier: FnnParams,
}

const ENCODER_ROLES: [&str; 3] = ["qq", "qc", "cc"];

/// Output of a forward pass on one instance.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// One two-class distribution per head.
    pub probs: Vec<Vector>,
    pub encodings: Vec<PairEncoding>,
}

impl Prediction {
    /// Probability of "relevant" from the main head.
    pub fn score(&self) -> f64 {
        let head = if self.probs.len() == 3 { MAIN_HEAD } else { 0 };
        self.probs[head][RELEVANT]
    }

    /// Attention weights over object one for the main pair, if any.
    pub fn alphas(&self) -> Option<&Vector> {
        let enc = if self.encodings.len() == 3 { MAIN_HEAD } else { 0 };
        self.encodings[enc].alphas.as_ref()
    }
}

struct ForwardTrace {
    inputs: Vec<Vec<usize>>,
    pairs: Vec<PairTrace>,
    /// (sequence index of object one, of object two) per encoder.
    routing: Vec<(usize, usize)>,
    fnn: FnnTrace,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let e = config.embed_dim;
        let n = config.cell_count;
        let encoder = |topology: PairTopology, attention: bool| PairEncoderParams {
            topology,
            first: LstmParams::zeros(e, n, config.peephole),
            second: (!config.lstm_shared).then(|| LstmParams::zeros(e, n, config.peephole)),
            attention: attention.then(|| AttentionParams::zeros(n, config.attention_hidden)),
        };
        let encoders = match config.topology {
            Topology::Parallel => vec![encoder(PairTopology::Parallel, false)],
            Topology::Serialized => vec![encoder(PairTopology::Serialized, false)],
            Topology::Attention => vec![encoder(PairTopology::Serialized, true)],
            Topology::Multitask => (0..3).map(|_| encoder(PairTopology::Serialized, true)).collect(),
        };
        let heads = if config.topology == Topology::Multitask { 3 } else { 1 };
        let input_len = encoders.iter().map(|e| e.feature_len()).sum::<usize>() + config.augmented_len();
        ModelParams {
            embedding: Matrix::zeros(config.vocab_size, e),
            encoders,
            classifier: FnnParams::zeros(input_len, config.mlp_hidden, heads),
        }
    }

    /// Uniform initialization in `[-init_scale, init_scale]` of every tensor.
    pub fn random(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ModelParams::zeros(config);
        for (_, t) in p.tensors_mut() {
            fill_uniform(t, config.init_scale, rng);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_multitask(&self) -> bool {
        self.encoders.len() == 3
    }

    pub fn head_count(&self) -> usize {
        self.classifier.heads.len()
    }

    pub fn has_attention(&self) -> bool {
        self.encoders.iter().all(|e| e.attention.is_some())
    }

    pub fn augmented_len(&self) -> usize {
        let enc: usize = self.encoders.iter().map(|e| e.feature_len()).sum();
        self.classifier.input_len().saturating_sub(enc)
    }

    /// A copy of a multitask model that keeps only the main softmax head.
    pub fn main_head_only(&self) -> Self {
        let mut p = self.clone();
        if p.classifier.heads.len() == 3 {
            p.classifier.heads = vec![self.classifier.heads[MAIN_HEAD].clone()];
        }
        p
    }

    fn embed(&self, tokens: &[usize]) -> Result<Vec<Vector>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        tokens
            .iter()
            .map(|&t| {
                if t >= self.embedding.rows() {
                    Err(Error::InvalidArgument(format!(
                        "token id {t} outside embedding table of {} rows",
                        self.embedding.rows()
                    )))
                } else {
                    Ok(Vector::from(self.embedding.row(t)))
                }
            })
            .collect()
    }

    fn augmented(&self, inst: &PairInstance) -> AugmentedFeatures {
        match self.augmented_len() {
            0 => AugmentedFeatures::none(),
            r => AugmentedFeatures::ir_rank_onehot(inst.ir_rank, r),
        }
    }

    fn golds(&self, inst: &PairInstance) -> Result<Vec<usize>> {
        let main = inst.label.ok_or_else(|| Error::MissingLabel(inst.id()))?;
        if self.head_count() == 3 {
            let [qq, cc] = inst
                .aux_labels
                .ok_or_else(|| Error::MissingLabel(format!("{} (auxiliary multitask labels)", inst.id())))?;
            Ok(vec![qq, main, cc])
        } else {
            Ok(vec![main])
        }
    }

    fn trace(&self, inst: &PairInstance, masks: Option<(&[f64], &[f64])>) -> Result<ForwardTrace> {
        let (inputs, routing) = if self.is_multitask() {
            let third = inst.third.clone().ok_or_else(|| {
                Error::InvalidArgument(format!("multitask model needs a bridge sequence for {}", inst.id()))
            })?;
            // sequences: 0 = oriQ, 1 = relC, 2 = relQ
            (
                vec![inst.first.clone(), inst.second.clone(), third],
                vec![(0, 2), (0, 1), (2, 1)],
            )
        } else {
            (vec![inst.first.clone(), inst.second.clone()], vec![(0, 1)])
        };
        let embedded: Vec<Vec<Vector>> = inputs.iter().map(|s| self.embed(s)).collect::<Result<_>>()?;
        let pairs: Vec<PairTrace> = self
            .encoders
            .iter()
            .zip(&routing)
            .map(|(enc, &(a, b))| enc.encode_traced(&embedded[a], &embedded[b]))
            .collect::<Result<_>>()?;
        let encodings: Vec<&PairEncoding> = pairs.iter().map(|p| &p.encoding).collect();
        let input = classifier_input(&encodings, &self.augmented(inst));
        let fnn = self.classifier.forward_traced(&input, masks)?;
        Ok(ForwardTrace {
            inputs,
            pairs,
            routing,
            fnn,
        })
    }

    pub fn forward(&self, inst: &PairInstance) -> Result<Prediction> {
        let t = self.trace(inst, None)?;
        Ok(Prediction {
            probs: t.fnn.probs,
            encodings: t.pairs.into_iter().map(|p| p.encoding).collect(),
        })
    }

    /// Weighted cross-entropy over the heads for one instance, accumulating
    /// its gradient into `grads`. `head_weights` has one entry per head.
    /// With `dropout = Some((rate, rng))` and `rate > 0`, fresh masks are
    /// drawn for the classifier input and hidden layer.
    pub fn loss_and_gradient(
        &self,
        inst: &PairInstance,
        head_weights: &[f64],
        dropout: Option<(f64, &mut Rng)>,
        grads: &mut ModelParams,
    ) -> Result<f64> {
        let golds = self.golds(inst)?;
        let masks = match dropout {
            Some((rate, rng)) if rate > 0.0 => Some((
                dropout_mask(self.classifier.input_len(), rate, rng),
                dropout_mask(self.classifier.hidden_len(), rate, rng),
            )),
            _ => None,
        };
        let t = self.trace(inst, masks.as_ref().map(|(a, b)| (&a[..], &b[..])))?;
        let (loss, d_input) = self.classifier.backward(&t.fnn, &golds, head_weights, &mut grads.classifier)?;

        let mut d_seq: Vec<Vec<Vector>> = t
            .inputs
            .iter()
            .map(|s| vec![Vector::zeros(self.embedding.cols()); s.len()])
            .collect();
        let mut offset = 0;
        for (k, enc) in self.encoders.iter().enumerate() {
            let len = enc.feature_len();
            let (da, db) = enc.backward(&t.pairs[k], &d_input[offset..offset + len], &mut grads.encoders[k]);
            offset += len;
            let (a, b) = t.routing[k];
            for (acc, d) in d_seq[a].iter_mut().zip(da) {
                acc.iter_mut().zip(d.iter()).for_each(|(x, y)| *x += y);
            }
            for (acc, d) in d_seq[b].iter_mut().zip(db) {
                acc.iter_mut().zip(d.iter()).for_each(|(x, y)| *x += y);
            }
        }
        for (tokens, ds) in t.inputs.iter().zip(&d_seq) {
            for (&tok, d) in tokens.iter().zip(ds) {
                grads.embedding.row_mut(tok).iter_mut().zip(d.iter()).for_each(|(g, v)| *g += v);
            }
        }
        Ok(loss)
    }

    /// Loss without gradient (no dropout).
    pub fn loss(&self, inst: &PairInstance, head_weights: &[f64]) -> Result<f64> {
        let golds = self.golds(inst)?;
        let t = self.trace(inst, None)?;
        let mut total = 0.0;
        for (k, probs) in t.fnn.probs.iter().enumerate() {
            total += head_weights[k] * crate::classifier::cross_entropy(probs, golds[k])?;
        }
        Ok(total)
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("embedding".into(), self.embedding.data())];
        let multi = self.encoders.len() == 3;
        for (k, enc) in self.encoders.iter().enumerate() {
            let prefix = if multi { format!("encoder.{}", ENCODER_ROLES[k]) } else { "encoder".into() };
            out.extend(enc.tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend(self.classifier.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![("embedding".into(), self.embedding.data_mut())];
        let multi = self.encoders.len() == 3;
        for (k, enc) in self.encoders.iter_mut().enumerate() {
            let prefix = if multi { format!("encoder.{}", ENCODER_ROLES[k]) } else { "encoder".into() };
            out.extend(enc.tensors_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend(self.classifier.tensors_mut());
        out
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = ModelParams::random(&config, rng)?;
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Self {
        let params = ModelParams::zeros(&config);
        Model { config, params }
    }

    pub fn forward(&self, inst: &PairInstance) -> Result<Prediction> {
        self.params.forward(inst)
    }
}
