//! Finite-difference verification of every topology's backward pass.

use crate::data::{PairInstance, Provenance};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams, Topology};
use crate::numerics::{grad_check, GradCheckReport, ParamSet, Rng};
use crate::training::{batch_gradient, TrainConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub embed_dim: usize,
    pub cell_count: usize,
    pub attention_hidden: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub ir_rank_slots: usize,
    pub init_scale: f64,
    pub l2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Scales one analytic gradient tensor so the check must fail.
    pub corrupt_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            embed_dim: 4,
            cell_count: 8,
            attention_hidden: 8,
            mlp_hidden: 8,
            vocab_size: 10,
            ir_rank_slots: 3,
            init_scale: 0.5,
            l2: 1e-3,
            // 1e-5 leaves roundoff of ~1e-11 against gradient entries near 1e-9
            epsilon: 1e-4,
            seed: 7,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TopologyReport {
    pub topology: Topology,
    pub report: GradCheckReport,
}

impl TopologyReport {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < GRADCHECK_TOLERANCE
    }
}

fn batch(rng: &mut Rng, vocab: usize, slots: usize) -> Vec<PairInstance> {
    let mut seq = |len: usize| (0..len).map(|_| rng.below(vocab)).collect::<Vec<_>>();
    vec![
        PairInstance {
            query_id: "q0".into(),
            candidate_id: "c0".into(),
            first: seq(5),
            second: seq(3),
            third: Some(seq(4)),
            label: Some(1),
            aux_labels: Some([0, 1]),
            ir_rank: Some(1),
            provenance: Provenance::Original,
        },
        PairInstance {
            query_id: "q0".into(),
            candidate_id: "c1".into(),
            first: seq(1),
            second: seq(2),
            third: Some(seq(1)),
            label: Some(0),
            aux_labels: Some([1, 0]),
            ir_rank: Some(slots),
            provenance: Provenance::Original,
        },
    ]
}

pub fn model_config(config: &GradCheckConfig, topology: Topology) -> ModelConfig {
    ModelConfig {
        topology,
        vocab_size: config.vocab_size,
        embed_dim: config.embed_dim,
        cell_count: config.cell_count,
        attention_hidden: config.attention_hidden,
        mlp_hidden: config.mlp_hidden,
        ir_features: true,
        ir_rank_slots: config.ir_rank_slots,
        init_scale: config.init_scale,
        ..ModelConfig::default()
    }
}

/// Checks `params` on a fixed two-instance batch (sequence lengths 1 to 5)
/// with the L2 term included and dropout off.
pub fn check_params(params: &ModelParams, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = Rng::new(config.seed ^ 0x5eed);
    let data = batch(&mut rng, params.embedding.rows(), config.ir_rank_slots);
    let refs: Vec<&PairInstance> = data.iter().collect();
    let train = TrainConfig {
        dropout_rate: 0.0,
        l2: config.l2,
        ..TrainConfig::default()
    };
    let mut grads = params.zeros_like();
    batch_gradient(params, &refs, &train, &mut Rng::new(0), &mut grads)?;
    if config.corrupt_backward {
        if let Some((_, g)) = grads.tensors_mut().into_iter().find(|(n, _)| n.contains("W_iX")) {
            g.iter_mut().for_each(|x| *x = *x * 1.5 + 1e-3);
        }
    }
    let objective = |p: &ModelParams| {
        let mut scratch = p.zeros_like();
        batch_gradient(p, &refs, &train, &mut Rng::new(0), &mut scratch)
    };
    grad_check(objective, params, &grads, config.epsilon)
}

/// One report per topology: parallel, serialized, attention, multitask.
pub fn run_all(config: &GradCheckConfig) -> Result<Vec<TopologyReport>> {
    Topology::ALL
        .iter()
        .map(|&topology| {
            let mc = model_config(config, topology);
            let params = ModelParams::random(&mc, &mut Rng::new(config.seed))?;
            Ok(TopologyReport {
                topology,
                report: check_params(&params, config)?,
            })
        })
        .collect()
}
