//! LSTM cell with peephole connections and the pair encoders built on it.
//!
//! A pair `(a, b)` is encoded in one of two ways:
//!
//! * **parallel**: two LSTMs read `a` and `b` independently from zero state
//!   and their last hidden outputs are concatenated;
//! * **serialized**: LSTM-1 reads `a`, LSTM-2 starts from LSTM-1's final
//!   `(h, c)` and reads `b`. Optionally an attention layer scores every
//!   LSTM-1 output `h_i` against LSTM-2's last output `h_N` and returns the
//!   softmax-weighted sum `h'` of the `h_i`.
//!
//! Every forward function has a traced twin used by training; the trace holds
//! what backpropagation through time needs.

use crate::error::{Error, Result};
use crate::numerics::{dot, fill_uniform, sigmoid, softmax_unchecked, Matrix, ParamSet, Rng, Vector};

/// How the peephole weights on `c_{t-1}` are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Peephole {
    /// Full matrix product, as the gate equations are written.
    #[default]
    Dense,
    /// Only the diagonal of each peephole matrix is used.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ix: Matrix,
    pub w_fx: Matrix,
    pub w_ox: Matrix,
    pub w_cx: Matrix,
    pub w_ic: Matrix,
    pub w_fc: Matrix,
    pub w_oc: Matrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
    pub b_c: Vector,
    pub peephole: Peephole,
}

impl LstmParams {
    pub fn zeros(embed_dim: usize, cell_count: usize, peephole: Peephole) -> Self {
        let x = Matrix::zeros(cell_count, embed_dim + cell_count);
        let c = Matrix::zeros(cell_count, cell_count);
        let b = Vector::zeros(cell_count);
        LstmParams {
            w_ix: x.clone(),
            w_fx: x.clone(),
            w_ox: x.clone(),
            w_cx: x,
            w_ic: c.clone(),
            w_fc: c.clone(),
            w_oc: c,
            b_i: b.clone(),
            b_f: b.clone(),
            b_o: b.clone(),
            b_c: b,
            peephole,
        }
    }

    pub fn random(embed_dim: usize, cell_count: usize, peephole: Peephole, scale: f64, rng: &mut Rng) -> Self {
        let mut p = LstmParams::zeros(embed_dim, cell_count, peephole);
        for (_, t) in p.tensors_mut() {
            fill_uniform(t, scale, rng);
        }
        p
    }

    pub fn cell_count(&self) -> usize {
        self.b_i.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_ix.cols() - self.cell_count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cell_count();
        if n == 0 || self.w_ix.cols() < n {
            return Err(Error::shape("lstm W_iX", "at least cell_count columns", self.w_ix.cols()));
        }
        let cols = self.w_ix.cols();
        for (name, m) in [("W_iX", &self.w_ix), ("W_fX", &self.w_fx), ("W_oX", &self.w_ox), ("W_cX", &self.w_cx)] {
            m.check_shape(&format!("lstm {name}"), n, cols)?;
        }
        for (name, m) in [("W_ic", &self.w_ic), ("W_fc", &self.w_fc), ("W_oc", &self.w_oc)] {
            m.check_shape(&format!("lstm {name}"), n, n)?;
        }
        for (name, b) in [("b_f", &self.b_f), ("b_o", &self.b_o), ("b_c", &self.b_c)] {
            b.check_len(&format!("lstm {name}"), n)?;
        }
        Ok(())
    }

    fn add_peephole(&self, w: &Matrix, c_prev: &[f64], out: &mut [f64]) {
        match self.peephole {
            Peephole::Dense => w.add_mul_into(c_prev, out),
            Peephole::Diagonal => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += w.get(j, j) * c_prev[j];
                }
            }
        }
    }

    fn backprop_peephole(&self, w: &Matrix, dz: &[f64], c_prev: &[f64], dw: &mut Matrix, dc_prev: &mut [f64]) {
        match self.peephole {
            Peephole::Dense => {
                dw.add_outer(dz, c_prev);
                w.add_mul_transposed_into(dz, dc_prev);
            }
            Peephole::Diagonal => {
                for j in 0..dz.len() {
                    dw.set(j, j, dw.get(j, j) + dz[j] * c_prev[j]);
                    dc_prev[j] += w.get(j, j) * dz[j];
                }
            }
        }
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("W_iX".into(), self.w_ix.data()),
            ("W_fX".into(), self.w_fx.data()),
            ("W_oX".into(), self.w_ox.data()),
            ("W_cX".into(), self.w_cx.data()),
            ("W_ic".into(), self.w_ic.data()),
            ("W_fc".into(), self.w_fc.data()),
            ("W_oc".into(), self.w_oc.data()),
            ("b_i".into(), &self.b_i[..]),
            ("b_f".into(), &self.b_f[..]),
            ("b_o".into(), &self.b_o[..]),
            ("b_c".into(), &self.b_c[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("W_iX".into(), self.w_ix.data_mut()),
            ("W_fX".into(), self.w_fx.data_mut()),
            ("W_oX".into(), self.w_ox.data_mut()),
            ("W_cX".into(), self.w_cx.data_mut()),
            ("W_ic".into(), self.w_ic.data_mut()),
            ("W_fc".into(), self.w_fc.data_mut()),
            ("W_oc".into(), self.w_oc.data_mut()),
            ("b_i".into(), &mut self.b_i[..]),
            ("b_f".into(), &mut self.b_f[..]),
            ("b_o".into(), &mut self.b_o[..]),
            ("b_c".into(), &mut self.b_c[..]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(cell_count: usize) -> Self {
        LstmState {
            h: Vector::zeros(cell_count),
            c: Vector::zeros(cell_count),
        }
    }
}

/// Everything one LSTM step computed, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// `[x_t; h_{t-1}]`
    pub input: Vector,
    pub c_prev: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    /// `tanh(W_cX·X + b_c)`
    pub g: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
    pub h: Vector,
}

impl StepTrace {
    pub fn state(&self) -> LstmState {
        LstmState {
            h: self.h.clone(),
            c: self.c.clone(),
        }
    }
}

fn check_step_inputs(params: &LstmParams, x_t: &[f64], prev: &LstmState) -> Result<()> {
    let n = params.cell_count();
    if x_t.len() != params.embed_dim() {
        return Err(Error::shape("lstm input x_t", params.embed_dim(), x_t.len()));
    }
    prev.h.check_len("lstm previous h", n)?;
    prev.c.check_len("lstm previous c", n)
}

fn step_traced(params: &LstmParams, x_t: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepTrace {
    let n = params.cell_count();
    let input = Vector::concat(&[x_t, h_prev]);

    let gate = |w: &Matrix, peep: &Matrix, b: &Vector| -> Vector {
        let mut z = b.clone();
        w.add_mul_into(&input, &mut z);
        params.add_peephole(peep, c_prev, &mut z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        z
    };
    let i = gate(&params.w_ix, &params.w_ic, &params.b_i);
    let f = gate(&params.w_fx, &params.w_fc, &params.b_f);
    let o = gate(&params.w_ox, &params.w_oc, &params.b_o);

    let mut g = params.b_c.clone();
    params.w_cx.add_mul_into(&input, &mut g);
    g.iter_mut().for_each(|v| *v = v.tanh());

    let mut c = Vector::zeros(n);
    let mut tanh_c = Vector::zeros(n);
    let mut h = Vector::zeros(n);
    for j in 0..n {
        c[j] = f[j] * c_prev[j] + i[j] * g[j];
        tanh_c[j] = c[j].tanh();
        h[j] = o[j] * tanh_c[j];
    }

    StepTrace {
        input,
        c_prev: Vector::from(c_prev),
        i,
        f,
        o,
        g,
        c,
        tanh_c,
        h,
    }
}

/// One LSTM step.
pub fn lstm_step(params: &LstmParams, x_t: &[f64], prev: &LstmState) -> Result<LstmState> {
    params.validate()?;
    check_step_inputs(params, x_t, prev)?;
    Ok(step_traced(params, x_t, &prev.h, &prev.c).state())
}

/// Like [`lstm_step`] but returns gate activations too.
pub fn lstm_step_traced(params: &LstmParams, x_t: &[f64], prev: &LstmState) -> Result<StepTrace> {
    params.validate()?;
    check_step_inputs(params, x_t, prev)?;
    Ok(step_traced(params, x_t, &prev.h, &prev.c))
}

pub fn encode_sequence_traced(params: &LstmParams, inputs: &[Vector], init: &LstmState) -> Result<Vec<StepTrace>> {
    if inputs.is_empty() {
        return Err(Error::EmptySequence);
    }
    params.validate()?;
    let mut steps: Vec<StepTrace> = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let step = match steps.last() {
            None => {
                check_step_inputs(params, x, init)?;
                step_traced(params, x, &init.h, &init.c)
            }
            Some(prev) => {
                if x.len() != params.embed_dim() {
                    return Err(Error::shape(format!("lstm input x_{t}"), params.embed_dim(), x.len()));
                }
                step_traced(params, x, &prev.h, &prev.c)
            }
        };
        steps.push(step);
    }
    Ok(steps)
}

/// Left fold of [`lstm_step`] over `inputs`, returning every intermediate state.
pub fn encode_sequence(params: &LstmParams, inputs: &[Vector], init: &LstmState) -> Result<Vec<LstmState>> {
    Ok(encode_sequence_traced(params, inputs, init)?
        .iter()
        .map(StepTrace::state)
        .collect())
}

/// Gradients flowing out of a backpropagated sequence.
#[derive(Debug, Clone)]
pub struct SequenceGrads {
    /// Gradient w.r.t. each input `x_t`.
    pub inputs: Vec<Vector>,
    pub h0: Vector,
    pub c0: Vector,
}

/// Backpropagation through time for one LSTM run.
///
/// `dh[t]` is the external gradient on `h_t` (from attention or the final
/// readout), `dc_last` the external gradient on the last cell state.
/// Parameter gradients are accumulated into `grads`.
pub fn backward_sequence(
    params: &LstmParams,
    steps: &[StepTrace],
    dh: &[Vector],
    dc_last: &[f64],
    grads: &mut LstmParams,
) -> SequenceGrads {
    let n = params.cell_count();
    let e = params.embed_dim();
    debug_assert_eq!(dh.len(), steps.len());

    let mut dh_next = Vector::zeros(n);
    let mut dc_next = Vector::from(dc_last);
    let mut dx_all = vec![Vector::zeros(e); steps.len()];

    let mut dzi = Vector::zeros(n);
    let mut dzf = Vector::zeros(n);
    let mut dzo = Vector::zeros(n);
    let mut dzg = Vector::zeros(n);

    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let mut d_input = Vector::zeros(e + n);
        let mut dc_prev = Vector::zeros(n);

        for j in 0..n {
            let dh_t = dh[t][j] + dh_next[j];
            let d_o = dh_t * s.tanh_c[j];
            let dc = dc_next[j] + dh_t * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
            let d_i = dc * s.g[j];
            let d_g = dc * s.i[j];
            let d_f = dc * s.c_prev[j];
            dc_prev[j] = dc * s.f[j];

            dzi[j] = d_i * s.i[j] * (1.0 - s.i[j]);
            dzf[j] = d_f * s.f[j] * (1.0 - s.f[j]);
            dzo[j] = d_o * s.o[j] * (1.0 - s.o[j]);
            dzg[j] = d_g * (1.0 - s.g[j] * s.g[j]);
        }

        grads.w_ix.add_outer(&dzi, &s.input);
        grads.w_fx.add_outer(&dzf, &s.input);
        grads.w_ox.add_outer(&dzo, &s.input);
        grads.w_cx.add_outer(&dzg, &s.input);
        for j in 0..n {
            grads.b_i[j] += dzi[j];
            grads.b_f[j] += dzf[j];
            grads.b_o[j] += dzo[j];
            grads.b_c[j] += dzg[j];
        }
        params.backprop_peephole(&params.w_ic, &dzi, &s.c_prev, &mut grads.w_ic, &mut dc_prev);
        params.backprop_peephole(&params.w_fc, &dzf, &s.c_prev, &mut grads.w_fc, &mut dc_prev);
        params.backprop_peephole(&params.w_oc, &dzo, &s.c_prev, &mut grads.w_oc, &mut dc_prev);

        params.w_ix.add_mul_transposed_into(&dzi, &mut d_input);
        params.w_fx.add_mul_transposed_into(&dzf, &mut d_input);
        params.w_ox.add_mul_transposed_into(&dzo, &mut d_input);
        params.w_cx.add_mul_transposed_into(&dzg, &mut d_input);

        dx_all[t] = Vector::from(&d_input[..e]);
        dh_next = Vector::from(&d_input[e..]);
        dc_next = dc_prev;
    }

    SequenceGrads {
        inputs: dx_all,
        h0: dh_next,
        c0: dc_next,
    }
}

/// Importance model scoring how useful `h_i` is given `h_N`:
/// `w_out · tanh(W1·h_i + W2·h_N + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub b: Vector,
    pub w_out: Vector,
}

impl AttentionParams {
    pub fn zeros(cell_count: usize, hidden_dim: usize) -> Self {
        AttentionParams {
            w1: Matrix::zeros(hidden_dim, cell_count),
            w2: Matrix::zeros(hidden_dim, cell_count),
            b: Vector::zeros(hidden_dim),
            w_out: Vector::zeros(hidden_dim),
        }
    }

    pub fn random(cell_count: usize, hidden_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut p = AttentionParams::zeros(cell_count, hidden_dim);
        for (_, t) in p.tensors_mut() {
            fill_uniform(t, scale, rng);
        }
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.b.len()
    }

    pub fn cell_count(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, n) = (self.hidden_dim(), self.cell_count());
        if k == 0 {
            return Err(Error::shape("attention hidden layer", "at least 1 unit", 0));
        }
        self.w1.check_shape("attention W1", k, n)?;
        self.w2.check_shape("attention W2", k, n)?;
        self.w_out.check_len("attention w_out", k)
    }
}

impl ParamSet for AttentionParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("W1".into(), self.w1.data()),
            ("W2".into(), self.w2.data()),
            ("b".into(), &self.b[..]),
            ("w_out".into(), &self.w_out[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("W1".into(), self.w1.data_mut()),
            ("W2".into(), self.w2.data_mut()),
            ("b".into(), &mut self.b[..]),
            ("w_out".into(), &mut self.w_out[..]),
        ]
    }
}

pub fn importance(att: &AttentionParams, h_i: &[f64], h_n: &[f64]) -> Result<f64> {
    att.validate()?;
    if h_i.len() != att.cell_count() {
        return Err(Error::shape("attention h_i", att.cell_count(), h_i.len()));
    }
    if h_n.len() != att.cell_count() {
        return Err(Error::shape("attention h_N", att.cell_count(), h_n.len()));
    }
    let mut z = att.b.clone();
    att.w2.add_mul_into(h_n, &mut z);
    att.w1.add_mul_into(h_i, &mut z);
    Ok(z.iter().zip(att.w_out.iter()).map(|(zk, wk)| wk * zk.tanh()).sum())
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// `tanh(W1·h_i + W2·h_N + b)` per position.
    pub hidden: Vec<Vector>,
    pub scores: Vector,
    pub alphas: Vector,
    pub h_prime: Vector,
}

fn attend(att: &AttentionParams, states: &[&[f64]], h_n: &[f64]) -> AttentionTrace {
    let mut shared = att.b.clone();
    att.w2.add_mul_into(h_n, &mut shared);
    let hidden: Vec<Vector> = states
        .iter()
        .map(|h| {
            let mut z = shared.clone();
            att.w1.add_mul_into(h, &mut z);
            z.iter_mut().for_each(|v| *v = v.tanh());
            z
        })
        .collect();
    let scores: Vector = hidden.iter().map(|u| dot(u, &att.w_out)).collect::<Vec<_>>().into();
    let alphas = softmax_unchecked(&scores);
    let h_prime = weighted_sum(&alphas, states);
    AttentionTrace {
        hidden,
        scores,
        alphas,
        h_prime,
    }
}

/// `Σ alphas[i] · states[i]`
pub fn weighted_sum(alphas: &[f64], states: &[&[f64]]) -> Vector {
    let mut out = Vector::zeros(states.first().map_or(0, |s| s.len()));
    for (a, h) in alphas.iter().zip(states) {
        for (o, v) in out.iter_mut().zip(h.iter()) {
            *o += a * v;
        }
    }
    out
}

/// Backward through attention. Returns gradients w.r.t. each attended state
/// and w.r.t. `h_N`.
fn attention_backward(
    att: &AttentionParams,
    trace: &AttentionTrace,
    states: &[&[f64]],
    h_n: &[f64],
    d_h_prime: &[f64],
    grads: &mut AttentionParams,
) -> (Vec<Vector>, Vector) {
    let len = states.len();
    let mut d_states: Vec<Vector> = (0..len)
        .map(|i| d_h_prime.iter().map(|g| g * trace.alphas[i]).collect::<Vec<_>>().into())
        .collect();
    let d_alpha: Vec<f64> = states.iter().map(|h| dot(d_h_prime, h)).collect();
    let mean = dot(&d_alpha, &trace.alphas);

    let mut d_h_n = Vector::zeros(h_n.len());
    let mut dz_sum = Vector::zeros(att.hidden_dim());
    for i in 0..len {
        let ds = trace.alphas[i] * (d_alpha[i] - mean);
        if ds == 0.0 {
            continue;
        }
        let u = &trace.hidden[i];
        let dz: Vec<f64> = (0..att.hidden_dim())
            .map(|k| ds * att.w_out[k] * (1.0 - u[k] * u[k]))
            .collect();
        for k in 0..att.hidden_dim() {
            grads.w_out[k] += ds * u[k];
            dz_sum[k] += dz[k];
        }
        grads.w1.add_outer(&dz, states[i]);
        att.w1.add_mul_transposed_into(&dz, &mut d_states[i]);
    }
    grads.w2.add_outer(&dz_sum, h_n);
    for k in 0..att.hidden_dim() {
        grads.b[k] += dz_sum[k];
    }
    att.w2.add_mul_transposed_into(&dz_sum, &mut d_h_n);
    (d_states, d_h_n)
}

/// Output of a pair encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEncoding {
    /// Last hidden output (serialized) or `[h_a; h_b]` (parallel).
    pub h_n: Vector,
    pub h_prime: Option<Vector>,
    pub alphas: Option<Vector>,
}

impl PairEncoding {
    /// The classifier-facing feature vector `[h_N; h']`.
    pub fn features(&self) -> Vector {
        match &self.h_prime {
            Some(hp) => Vector::concat(&[&self.h_n, hp]),
            None => self.h_n.clone(),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.h_n.len() + self.h_prime.as_ref().map_or(0, |h| h.len())
    }
}

pub fn encode_parallel(p1: &LstmParams, p2: &LstmParams, seq_a: &[Vector], seq_b: &[Vector]) -> Result<PairEncoding> {
    let a = encode_sequence_traced(p1, seq_a, &LstmState::zeros(p1.cell_count()))?;
    let b = encode_sequence_traced(p2, seq_b, &LstmState::zeros(p2.cell_count()))?;
    Ok(PairEncoding {
        h_n: Vector::concat(&[&a[a.len() - 1].h, &b[b.len() - 1].h]),
        h_prime: None,
        alphas: None,
    })
}

pub fn encode_serialized(
    p1: &LstmParams,
    p2: &LstmParams,
    seq_a: &[Vector],
    seq_b: &[Vector],
    attention: Option<&AttentionParams>,
) -> Result<PairEncoding> {
    Ok(serialized_traced(p1, p2, seq_a, seq_b, attention)?.encoding)
}

#[derive(Debug, Clone)]
pub struct PairTrace {
    pub first: Vec<StepTrace>,
    pub second: Vec<StepTrace>,
    pub attention: Option<AttentionTrace>,
    pub encoding: PairEncoding,
    serialized: bool,
}

fn serialized_traced(
    p1: &LstmParams,
    p2: &LstmParams,
    seq_a: &[Vector],
    seq_b: &[Vector],
    attention: Option<&AttentionParams>,
) -> Result<PairTrace> {
    if p1.cell_count() != p2.cell_count() {
        return Err(Error::shape(
            "serialized LSTM-2 cell count (must equal LSTM-1)",
            p1.cell_count(),
            p2.cell_count(),
        ));
    }
    if let Some(att) = attention {
        att.validate()?;
        if att.cell_count() != p1.cell_count() {
            return Err(Error::shape("attention input size", p1.cell_count(), att.cell_count()));
        }
    }
    let first = encode_sequence_traced(p1, seq_a, &LstmState::zeros(p1.cell_count()))?;
    if seq_b.is_empty() {
        return Err(Error::EmptySequence);
    }
    let handoff = first[first.len() - 1].state();
    let second = encode_sequence_traced(p2, seq_b, &handoff)?;
    let h_n = second[second.len() - 1].h.clone();

    let att_trace = attention.map(|att| {
        let states: Vec<&[f64]> = first.iter().map(|s| &s.h[..]).collect();
        attend(att, &states, &h_n)
    });
    let encoding = PairEncoding {
        h_n,
        h_prime: att_trace.as_ref().map(|t| t.h_prime.clone()),
        alphas: att_trace.as_ref().map(|t| t.alphas.clone()),
    };
    Ok(PairTrace {
        first,
        second,
        attention: att_trace,
        encoding,
        serialized: true,
    })
}

/// Topology of a single pair encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairTopology {
    Parallel,
    Serialized,
}

/// Parameters of one pair encoder. `second == None` means the two LSTMs share
/// one parameter set, and gradients from both passes accumulate into `first`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEncoderParams {
    pub topology: PairTopology,
    pub first: LstmParams,
    pub second: Option<LstmParams>,
    pub attention: Option<AttentionParams>,
}

impl PairEncoderParams {
    pub fn second_lstm(&self) -> &LstmParams {
        self.second.as_ref().unwrap_or(&self.first)
    }

    pub fn cell_count(&self) -> usize {
        self.first.cell_count()
    }

    /// Length of the feature vector this encoder hands to the classifier.
    pub fn feature_len(&self) -> usize {
        let n = self.cell_count();
        match (self.topology, &self.attention) {
            (PairTopology::Parallel, _) => 2 * n,
            (PairTopology::Serialized, Some(_)) => 2 * n,
            (PairTopology::Serialized, None) => n,
        }
    }

    pub fn encode_traced(&self, seq_a: &[Vector], seq_b: &[Vector]) -> Result<PairTrace> {
        match self.topology {
            PairTopology::Parallel => {
                let p2 = self.second_lstm();
                let first = encode_sequence_traced(&self.first, seq_a, &LstmState::zeros(self.cell_count()))?;
                let second = encode_sequence_traced(p2, seq_b, &LstmState::zeros(p2.cell_count()))?;
                let encoding = PairEncoding {
                    h_n: Vector::concat(&[&first[first.len() - 1].h, &second[second.len() - 1].h]),
                    h_prime: None,
                    alphas: None,
                };
                Ok(PairTrace {
                    first,
                    second,
                    attention: None,
                    encoding,
                    serialized: false,
                })
            }
            PairTopology::Serialized => {
                serialized_traced(&self.first, self.second_lstm(), seq_a, seq_b, self.attention.as_ref())
            }
        }
    }

    pub fn encode(&self, seq_a: &[Vector], seq_b: &[Vector]) -> Result<PairEncoding> {
        Ok(self.encode_traced(seq_a, seq_b)?.encoding)
    }

    /// Backpropagates `d_features` (gradient on [`PairEncoding::features`])
    /// through the encoder. Returns input gradients for `seq_a` and `seq_b`.
    pub fn backward(&self, trace: &PairTrace, d_features: &[f64], grads: &mut PairEncoderParams) -> (Vec<Vector>, Vec<Vector>) {
        let n = self.cell_count();
        let mut dh_first = vec![Vector::zeros(n); trace.first.len()];
        let mut dh_second = vec![Vector::zeros(n); trace.second.len()];

        let p2 = self.second_lstm();

        if !trace.serialized {
            let last_a = dh_first.len() - 1;
            let last_b = dh_second.len() - 1;
            dh_first[last_a] = Vector::from(&d_features[..n]);
            dh_second[last_b] = Vector::from(&d_features[n..2 * n]);
            let g2 = match grads.second.as_mut() {
                Some(g) => backward_sequence(p2, &trace.second, &dh_second, &vec![0.0; n], g),
                None => backward_sequence(p2, &trace.second, &dh_second, &vec![0.0; n], &mut grads.first),
            };
            let g1 = backward_sequence(&self.first, &trace.first, &dh_first, &vec![0.0; n], &mut grads.first);
            return (g1.inputs, g2.inputs);
        }

        let mut d_h_n = Vector::from(&d_features[..n]);
        if let (Some(att), Some(att_trace)) = (&self.attention, &trace.attention) {
            let d_hp = &d_features[n..2 * n];
            let states: Vec<&[f64]> = trace.first.iter().map(|s| &s.h[..]).collect();
            let g_att = grads.attention.as_mut().expect("gradient layout mirrors parameters");
            let (d_states, d_hn_att) =
                attention_backward(att, att_trace, &states, &trace.encoding.h_n, d_hp, g_att);
            for (acc, d) in dh_first.iter_mut().zip(d_states) {
                *acc = d;
            }
            for (a, b) in d_h_n.iter_mut().zip(d_hn_att.iter()) {
                *a += b;
            }
        }
        let last_b = dh_second.len() - 1;
        dh_second[last_b] = d_h_n;

        let g2 = match grads.second.as_mut() {
            Some(g) => backward_sequence(p2, &trace.second, &dh_second, &vec![0.0; n], g),
            None => backward_sequence(p2, &trace.second, &dh_second, &vec![0.0; n], &mut grads.first),
        };
        // LSTM-2's initial state is LSTM-1's final state.
        let last_a = dh_first.len() - 1;
        for (a, b) in dh_first[last_a].iter_mut().zip(g2.h0.iter()) {
            *a += b;
        }
        let g1 = backward_sequence(&self.first, &trace.first, &dh_first, &g2.c0, &mut grads.first);
        (g1.inputs, g2.inputs)
    }
}

impl ParamSet for PairEncoderParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.extend(self.first.tensors().into_iter().map(|(n, t)| (format!("lstm1.{n}"), t)));
        if let Some(p) = &self.second {
            out.extend(p.tensors().into_iter().map(|(n, t)| (format!("lstm2.{n}"), t)));
        }
        if let Some(a) = &self.attention {
            out.extend(a.tensors().into_iter().map(|(n, t)| (format!("attention.{n}"), t)));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.extend(self.first.tensors_mut().into_iter().map(|(n, t)| (format!("lstm1.{n}"), t)));
        if let Some(p) = &mut self.second {
            out.extend(p.tensors_mut().into_iter().map(|(n, t)| (format!("lstm2.{n}"), t)));
        }
        if let Some(a) = &mut self.attention {
            out.extend(a.tensors_mut().into_iter().map(|(n, t)| (format!("attention.{n}"), t)));
        }
        out
    }
}
