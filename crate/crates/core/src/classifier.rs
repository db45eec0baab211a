//! Feed-forward classification heads over pair encodings.
//!
//! The classifier is one tanh hidden layer followed by one or more softmax
//! output layers. A single-pair model has one head; the multitask model has
//! three heads sharing the hidden trunk, fed by the concatenation of three
//! pair encodings.

use crate::encoder::PairEncoding;
use crate::error::{Error, Result};
use crate::numerics::{fill_uniform, softmax_unchecked, Matrix, ParamSet, Rng, Vector};

/// Index of the "relevant" class in every two-class distribution.
pub const RELEVANT: usize = 1;
pub const NUM_CLASSES: usize = 2;

/// Order of the multitask heads: (oriQ/relQ, oriQ/relC, relQ/relC).
pub const MAIN_HEAD: usize = 1;
pub const DEFAULT_BETA: [f64; 3] = [0.1, 0.8, 0.1];

/// Affine layer `W·x + b`, `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseLayer {
            w: Matrix::zeros(output, input),
            b: Vector::zeros(output),
        }
    }

    pub fn random(input: usize, output: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut l = DenseLayer::zeros(input, output);
        for (_, t) in l.tensors_mut() {
            fill_uniform(t, scale, rng);
        }
        l
    }

    pub fn input_len(&self) -> usize {
        self.w.cols()
    }

    pub fn output_len(&self) -> usize {
        self.w.rows()
    }

    fn forward(&self, x: &[f64]) -> Vector {
        let mut z = self.b.clone();
        self.w.add_mul_into(x, &mut z);
        z
    }
}

impl ParamSet for DenseLayer {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![("W".into(), self.w.data()), ("b".into(), &self.b[..])]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("W".into(), self.w.data_mut()), ("b".into(), &mut self.b[..])]
    }
}

/// Hidden tanh layer plus softmax output layer(s).
#[derive(Debug, Clone, PartialEq)]
pub struct FnnParams {
    pub hidden: DenseLayer,
    pub heads: Vec<DenseLayer>,
}

/// Shared trunk with three softmax heads.
pub type MultitaskHead = FnnParams;

impl FnnParams {
    pub fn zeros(input: usize, hidden: usize, heads: usize) -> Self {
        FnnParams {
            hidden: DenseLayer::zeros(input, hidden),
            heads: (0..heads).map(|_| DenseLayer::zeros(hidden, NUM_CLASSES)).collect(),
        }
    }

    pub fn random(input: usize, hidden: usize, heads: usize, scale: f64, rng: &mut Rng) -> Self {
        let hidden_layer = DenseLayer::random(input, hidden, scale, rng);
        let heads = (0..heads)
            .map(|_| DenseLayer::random(hidden, NUM_CLASSES, scale, rng))
            .collect();
        FnnParams {
            hidden: hidden_layer,
            heads,
        }
    }

    pub fn input_len(&self) -> usize {
        self.hidden.input_len()
    }

    pub fn hidden_len(&self) -> usize {
        self.hidden.output_len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = self.hidden.w.shape();
        self.hidden.b.check_len("mlp hidden bias", h)?;
        if i == 0 || h == 0 {
            return Err(Error::shape("mlp hidden layer", "nonzero dimensions", format!("{h}x{i}")));
        }
        for (k, head) in self.heads.iter().enumerate() {
            head.w.check_shape(&format!("softmax head {k} weights"), NUM_CLASSES, h)?;
            head.b.check_len(&format!("softmax head {k} bias"), NUM_CLASSES)?;
        }
        Ok(())
    }

    /// Forward pass, optionally with dropout masks on the input and the
    /// hidden layer (entries are 0 or the inverted-dropout scale).
    pub fn forward_traced(&self, input: &[f64], masks: Option<(&[f64], &[f64])>) -> Result<FnnTrace> {
        self.validate()?;
        if input.len() != self.input_len() {
            return Err(Error::shape("classifier input", self.input_len(), input.len()));
        }
        let input = match masks {
            Some((m, _)) => input.iter().zip(m).map(|(x, k)| x * k).collect::<Vec<_>>().into(),
            None => Vector::from(input),
        };
        let mut hidden = self.hidden.forward(&input);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let dropped = match masks {
            Some((_, m)) => hidden.iter().zip(m).map(|(x, k)| x * k).collect::<Vec<_>>().into(),
            None => hidden.clone(),
        };
        let probs = self
            .heads
            .iter()
            .map(|head| softmax_unchecked(&head.forward(&dropped)))
            .collect();
        Ok(FnnTrace {
            input,
            input_mask: masks.map(|(m, _)| m.to_vec()),
            hidden,
            hidden_mask: masks.map(|(_, m)| m.to_vec()),
            dropped,
            probs,
        })
    }

    /// Backward pass for the loss `Σ_k weights[k]·CE(probs_k, golds[k])`.
    /// Accumulates parameter gradients and returns `(loss, d_input)`, where
    /// `d_input` is the gradient w.r.t. the undropped classifier input.
    pub fn backward(
        &self,
        trace: &FnnTrace,
        golds: &[usize],
        weights: &[f64],
        grads: &mut FnnParams,
    ) -> Result<(f64, Vector)> {
        if golds.len() != self.heads.len() || weights.len() != self.heads.len() {
            return Err(Error::shape(
                "head labels/weights",
                self.heads.len(),
                format!("{} labels, {} weights", golds.len(), weights.len()),
            ));
        }
        let mut loss = 0.0;
        let mut d_dropped = Vector::zeros(self.hidden_len());
        for (k, head) in self.heads.iter().enumerate() {
            let probs = &trace.probs[k];
            loss += weights[k] * cross_entropy(probs, golds[k])?;
            let d_logits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(c, &p)| weights[k] * (p - if c == golds[k] { 1.0 } else { 0.0 }))
                .collect();
            grads.heads[k].w.add_outer(&d_logits, &trace.dropped);
            for (g, d) in grads.heads[k].b.iter_mut().zip(&d_logits) {
                *g += d;
            }
            head.w.add_mul_transposed_into(&d_logits, &mut d_dropped);
        }

        let d_pre: Vec<f64> = (0..self.hidden_len())
            .map(|j| {
                let mask = trace.hidden_mask.as_ref().map_or(1.0, |m| m[j]);
                d_dropped[j] * mask * (1.0 - trace.hidden[j] * trace.hidden[j])
            })
            .collect();
        grads.hidden.w.add_outer(&d_pre, &trace.input);
        for (g, d) in grads.hidden.b.iter_mut().zip(&d_pre) {
            *g += d;
        }
        let mut d_input = Vector::zeros(self.input_len());
        self.hidden.w.add_mul_transposed_into(&d_pre, &mut d_input);
        if let Some(m) = &trace.input_mask {
            d_input.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
        }
        Ok((loss, d_input))
    }
}

impl ParamSet for FnnParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .hidden
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("mlp.hidden.{n}"), t))
            .collect();
        let single = self.heads.len() == 1;
        for (k, head) in self.heads.iter().enumerate() {
            for (n, t) in head.tensors() {
                let name = if single { format!("softmax.{n}") } else { format!("softmax.{k}.{n}") };
                out.push((name, t));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let single = self.heads.len() == 1;
        let mut out: Vec<(String, &mut [f64])> = self
            .hidden
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("mlp.hidden.{n}"), t))
            .collect();
        for (k, head) in self.heads.iter_mut().enumerate() {
            for (n, t) in head.tensors_mut() {
                let name = if single { format!("softmax.{n}") } else { format!("softmax.{k}.{n}") };
                out.push((name, t));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FnnTrace {
    /// Classifier input after dropout.
    pub input: Vector,
    pub input_mask: Option<Vec<f64>>,
    /// tanh activations before dropout.
    pub hidden: Vector,
    pub hidden_mask: Option<Vec<f64>>,
    pub dropped: Vector,
    pub probs: Vec<Vector>,
}

/// Extra classifier inputs beyond the encodings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentedFeatures {
    pub values: Vector,
}

impl AugmentedFeatures {
    pub fn none() -> Self {
        AugmentedFeatures::default()
    }

    /// One-hot of a 1-based IR rank over `size` slots; ranks outside
    /// `1..=size` (or no rank) give the all-zero vector.
    pub fn ir_rank_onehot(rank: Option<usize>, size: usize) -> Self {
        let mut values = Vector::zeros(size);
        if let Some(r) = rank {
            if (1..=size).contains(&r) {
                values[r - 1] = 1.0;
            }
        }
        AugmentedFeatures { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn classifier_input(encodings: &[&PairEncoding], aug: &AugmentedFeatures) -> Vector {
    let features: Vec<Vector> = encodings.iter().map(|e| e.features()).collect();
    let mut parts: Vec<&[f64]> = features.iter().map(|f| &f[..]).collect();
    parts.push(&aug.values);
    Vector::concat(&parts)
}

/// Relationship probabilities for one pair: softmax over `[h_N; h'; aug]`.
pub fn classify_pair(fnn: &FnnParams, enc: &PairEncoding, aug: &AugmentedFeatures) -> Result<Vector> {
    if fnn.heads.len() != 1 {
        return Err(Error::shape("single-pair classifier heads", 1, fnn.heads.len()));
    }
    let input = classifier_input(&[enc], aug);
    let mut trace = fnn.forward_traced(&input, None)?;
    Ok(trace.probs.swap_remove(0))
}

/// `-ln p[gold]`, with `p[gold]` clamped below at 1e-12.
pub fn cross_entropy(probs: &[f64], gold: usize) -> Result<f64> {
    let p = probs
        .get(gold)
        .ok_or_else(|| Error::InvalidArgument(format!("gold class {gold} out of range for {} classes", probs.len())))?;
    Ok(-p.max(1e-12).ln())
}

/// Three per-pair distributions from the shared trunk.
pub fn multitask_forward(
    head: &MultitaskHead,
    enc_qq: &PairEncoding,
    enc_qc: &PairEncoding,
    enc_cc: &PairEncoding,
    aug: &AugmentedFeatures,
) -> Result<[Vector; 3]> {
    if head.heads.len() != 3 {
        return Err(Error::shape("multitask heads", 3, head.heads.len()));
    }
    let input = classifier_input(&[enc_qq, enc_qc, enc_cc], aug);
    let trace = head.forward_traced(&input, None)?;
    let [a, b, c]: [Vector; 3] = trace.probs.try_into().expect("three heads");
    Ok([a, b, c])
}

/// `β₁L₁ + β₂L₂ + β₃L₃` with `L_k` the cross-entropy of head `k`.
pub fn multitask_loss(probs: &[Vector; 3], golds: [usize; 3], beta: [f64; 3]) -> Result<f64> {
    if beta.iter().any(|b| b.is_nan() || *b < 0.0) {
        return Err(Error::InvalidArgument(format!("beta weights must be nonnegative, got {beta:?}")));
    }
    let mut total = 0.0;
    for k in 0..3 {
        total += beta[k] * cross_entropy(&probs[k], golds[k])?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn enc(h: &[f64], hp: Option<&[f64]>) -> PairEncoding {
        PairEncoding {
            h_n: Vector::from(h),
            h_prime: hp.map(Vector::from),
            alphas: None,
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let fnn = FnnParams::zeros(5, 4, 1);
        let p = classify_pair(&fnn, &enc(&[0.3, -0.2], Some(&[0.9, 0.1])), &AugmentedFeatures::ir_rank_onehot(Some(1), 1))
            .unwrap();
        assert_eq!(&p[..], &[0.5, 0.5]);
    }

    #[test]
    fn bias_dominated_output() {
        let mut fnn = FnnParams::zeros(2, 3, 1);
        fnn.heads[0].b = Vector::from(vec![10.0, -10.0]);
        let p = classify_pair(&fnn, &enc(&[0.5, 0.5], None), &AugmentedFeatures::none()).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn classify_pair_matches_hand_composed_forward() {
        use crate::numerics::{matvec, softmax};
        let mut rng = Rng::new(77);
        let fnn = FnnParams::random(7, 5, 1, 0.8, &mut rng);
        let e = enc(&[0.1, -0.4, 0.3], Some(&[0.2, 0.0, -0.9]));
        let aug = AugmentedFeatures::ir_rank_onehot(Some(1), 1);
        let p = classify_pair(&fnn, &e, &aug).unwrap();

        let x = [0.1, -0.4, 0.3, 0.2, 0.0, -0.9, 1.0];
        let mut h = matvec(&fnn.hidden.w, &x).unwrap();
        for (v, b) in h.iter_mut().zip(fnn.hidden.b.iter()) {
            *v = (*v + b).tanh();
        }
        let mut z = matvec(&fnn.heads[0].w, &h).unwrap();
        for (v, b) in z.iter_mut().zip(fnn.heads[0].b.iter()) {
            *v += b;
        }
        let q = softmax(&z).unwrap();
        assert_abs_diff_eq!(p[0], q[0], epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], q[1], epsilon = 1e-15);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let again = classify_pair(&fnn, &e, &aug).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let fnn = FnnParams::zeros(4, 3, 1);
        assert!(classify_pair(&fnn, &enc(&[0.0; 3], None), &AugmentedFeatures::none()).is_err());
    }

    #[test]
    fn zero_augmented_features_are_additive() {
        let mut rng = Rng::new(4);
        let e = enc(&[0.3, -0.1], Some(&[0.5, 0.2]));
        let with = FnnParams::random(4 + 3, 6, 1, 0.5, &mut rng);
        let mut without = FnnParams::zeros(4, 6, 1);
        without.heads = with.heads.clone();
        without.hidden.b = with.hidden.b.clone();
        for r in 0..6 {
            without.hidden.w.row_mut(r).copy_from_slice(&with.hidden.w.row(r)[..4]);
        }
        let p_zero = classify_pair(&with, &e, &AugmentedFeatures::ir_rank_onehot(None, 3)).unwrap();
        let p_absent = classify_pair(&without, &e, &AugmentedFeatures::none()).unwrap();
        assert_eq!(p_zero, p_absent);
    }

    #[test]
    fn ir_rank_onehot_layout() {
        assert_eq!(&AugmentedFeatures::ir_rank_onehot(Some(3), 4).values[..], &[0.0, 0.0, 1.0, 0.0]);
        assert!(AugmentedFeatures::ir_rank_onehot(Some(11), 10).values.iter().all(|&v| v == 0.0));
        assert!(AugmentedFeatures::ir_rank_onehot(Some(0), 10).values.iter().all(|&v| v == 0.0));
        assert!(AugmentedFeatures::ir_rank_onehot(None, 10).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert_abs_diff_eq!(cross_entropy(&[0.5, 0.5], 1).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(cross_entropy(&[0.25, 0.75], 0).unwrap(), 1.386_294_361_119_890_6, epsilon = 1e-15);
        assert_abs_diff_eq!(cross_entropy(&[1.0, 0.0], 1).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn multitask_heads_are_independent() {
        let e = enc(&[0.2, 0.4], None);
        let zero = FnnParams::zeros(6, 3, 3);
        for p in multitask_forward(&zero, &e, &e, &e, &AugmentedFeatures::none()).unwrap() {
            assert_eq!(&p[..], &[0.5, 0.5]);
        }

        let mut rng = Rng::new(12);
        let head = FnnParams::random(6, 3, 3, 0.5, &mut rng);
        let before = multitask_forward(&head, &e, &e, &e, &AugmentedFeatures::none()).unwrap();
        let mut changed = head.clone();
        changed.heads[1].w.set(0, 0, 3.0);
        let after = multitask_forward(&changed, &e, &e, &e, &AugmentedFeatures::none()).unwrap();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
        for p in &after {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multitask_loss_examples() {
        let half = Vector::from(vec![0.5, 0.5]);
        let probs = [half.clone(), half.clone(), half];
        assert_abs_diff_eq!(multitask_loss(&probs, [0, 1, 0], DEFAULT_BETA).unwrap(), 2f64.ln(), epsilon = 1e-15);

        // losses 1, 2, 3 from p[gold] = e^-1, e^-2, e^-3
        let p = |l: f64| Vector::from(vec![(-l).exp(), 1.0 - (-l).exp()]);
        let probs = [p(1.0), p(2.0), p(3.0)];
        assert_abs_diff_eq!(multitask_loss(&probs, [0, 0, 0], DEFAULT_BETA).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(multitask_loss(&probs, [0, 0, 0], [1.0, 0.0, 0.0]).unwrap(), 1.0, epsilon = 1e-12);

        // linear in each head's loss
        let scaled = [p(1.0), p(4.0), p(3.0)];
        let delta = multitask_loss(&scaled, [0, 0, 0], DEFAULT_BETA).unwrap()
            - multitask_loss(&probs, [0, 0, 0], DEFAULT_BETA).unwrap();
        assert_abs_diff_eq!(delta, 0.8 * 2.0, epsilon = 1e-12);

        assert!(multitask_loss(&probs, [0, 0, 0], [-0.1, 1.0, 0.1]).is_err());
    }
}
