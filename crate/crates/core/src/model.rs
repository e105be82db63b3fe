//! Two-layer graph convolutional models and their exact gradients.
//!
//! Both model families share one shape:
//!
//! ```text
//! Z = log_softmax( S¹ · drop(ReLU( S⁰ · drop(X) · W⁰ )) · W¹ )
//! ```
//!
//! For the hop-mixing models `Sˡ = Σ_i γ_iˡ Ā_i` over the exact-distance
//! operators of a [`HopStack`]; each term is its own sparse product and `Sˡ`
//! is never formed. The baseline uses the single symmetric-normalized
//! operator `D̃^{-1/2}(A+I)D̃^{-1/2}` with a fixed coefficient of one.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::graph::HopStack;
use crate::rng::Prng;
use crate::sparse::{BlockedCsr, CsrMatrix, DenseMatrix, DEFAULT_BLOCK_COLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    /// First-neighbor model with symmetric normalization.
    Gcn,
    /// Hop mixing up to distance 2.
    Gcn2,
    /// Hop mixing up to distance 3.
    Gcn3,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Gcn, ModelKind::Gcn2, ModelKind::Gcn3];

    /// Hop order of the mixing operator; `None` for the baseline.
    pub fn hop_order(self) -> Option<usize> {
        match self {
            ModelKind::Gcn => None,
            ModelKind::Gcn2 => Some(2),
            ModelKind::Gcn3 => Some(3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gcn2 => "gcn2",
            ModelKind::Gcn3 => "gcn3",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(ModelKind::Gcn),
            "gcn2" | "gcn-2" => Ok(ModelKind::Gcn2),
            "gcn3" | "gcn-3" => Ok(ModelKind::Gcn3),
            other => Err(format!("unknown model '{other}' (expected gcn, gcn2 or gcn3)")),
        }
    }
}

/// Propagation operators plus their transposes (needed by the backward pass,
/// since row-normalized operators are not symmetric).
#[derive(Debug, Clone)]
pub struct Propagation {
    ops: Vec<BlockedCsr>,
    ops_t: Vec<BlockedCsr>,
    mixing: bool,
}

impl Propagation {
    /// Baseline operator from a binary symmetric adjacency.
    pub fn baseline(adjacency: &CsrMatrix) -> Result<Self> {
        let op = adjacency.sym_normalize()?;
        Ok(Propagation {
            ops_t: vec![blocked(&op.transpose())],
            ops: vec![blocked(&op)],
            mixing: false,
        })
    }

    /// Trainable mixing over `[Ā_0 … Ā_n]`.
    pub fn hops(stack: &HopStack) -> Self {
        Propagation {
            ops: stack.mats().iter().map(blocked).collect(),
            ops_t: stack.mats().iter().map(|m| blocked(&m.transpose())).collect(),
            mixing: true,
        }
    }

    /// Number of operator terms per layer (1 for the baseline, `n+1` for hops).
    pub fn n_terms(&self) -> usize {
        self.ops.len()
    }

    pub fn is_mixing(&self) -> bool {
        self.mixing
    }

    pub fn n_nodes(&self) -> usize {
        self.ops[0].n_rows()
    }

    /// Stored entries across all terms.
    pub fn nnz(&self) -> usize {
        self.ops.iter().map(BlockedCsr::nnz).sum()
    }
}

fn blocked(m: &CsrMatrix) -> BlockedCsr {
    BlockedCsr::new(m, DEFAULT_BLOCK_COLS).expect("default block width is valid")
}

/// Trainable parameters. `gamma[l][i]` weights hop `i` in layer `l`; it is
/// `None` for the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w0: DenseMatrix,
    pub w1: DenseMatrix,
    pub gamma: Option<[Vec<f64>; 2]>,
}

impl ModelParams {
    /// Glorot-uniform weights; every `γ` starts at 1.
    pub fn init(prop: &Propagation, n_features: usize, hidden: usize, n_classes: usize, rng: &mut Prng) -> Self {
        let w0 = glorot_init(n_features, hidden, rng);
        let w1 = glorot_init(hidden, n_classes, rng);
        let gamma = prop
            .is_mixing()
            .then(|| [vec![1.0; prop.n_terms()], vec![1.0; prop.n_terms()]]);
        ModelParams { w0, w1, gamma }
    }

    /// Zeros with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            w0: DenseMatrix::zeros(self.w0.n_rows(), self.w0.n_cols()),
            w1: DenseMatrix::zeros(self.w1.n_rows(), self.w1.n_cols()),
            gamma: self
                .gamma
                .as_ref()
                .map(|[a, b]| [vec![0.0; a.len()], vec![0.0; b.len()]]),
        }
    }

    fn layer_coeffs(&self, layer: usize, n_terms: usize) -> Result<Vec<f64>> {
        match &self.gamma {
            Some(g) if g[layer].len() == n_terms => Ok(g[layer].clone()),
            Some(g) => Err(contract(format!(
                "{} gamma coefficients for {n_terms} operator terms",
                g[layer].len()
            ))),
            None if n_terms == 1 => Ok(vec![1.0]),
            None => Err(contract("hop-mixing propagation needs gamma coefficients")),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w0.is_finite()
            && self.w1.is_finite()
            && self
                .gamma
                .as_ref()
                .is_none_or(|g| g.iter().flatten().all(|v| v.is_finite()))
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.w0.data().len()
            + self.w1.data().len()
            + self.gamma.as_ref().map_or(0, |g| g[0].len() + g[1].len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters as one slice-per-group view, in a fixed order:
    /// `W⁰`, `W¹`, `γ⁰`, `γ¹`.
    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w0.data_mut(), self.w1.data_mut()];
        if let Some([g0, g1]) = &mut self.gamma {
            out.push(g0.as_mut_slice());
            out.push(g1.as_mut_slice());
        }
        out
    }

    pub fn groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w0.data(), self.w1.data()];
        if let Some([g0, g1]) = &self.gamma {
            out.push(g0.as_slice());
            out.push(g1.as_slice());
        }
        out
    }
}

/// Glorot/Xavier uniform initialization on `±√(6 / (fan_in + fan_out))`.
pub fn glorot_init(fan_in: usize, fan_out: usize, rng: &mut Prng) -> DenseMatrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    DenseMatrix::from_vec(fan_in, fan_out, data).expect("shape matches length")
}

fn dropout_mask(len: usize, p: f64, rng: &mut Prng, training: bool) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout: in training, each entry is zeroed with probability `p`
/// and survivors are scaled by `1/(1-p)`. Returns the output and the mask
/// (entries 0 or `1/(1-p)`). Outside training this is the identity and no
/// random numbers are drawn.
pub fn apply_dropout(
    m: &DenseMatrix,
    p: f64,
    rng: &mut Prng,
    training: bool,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mask = dropout_mask(m.data().len(), p, rng, training)?;
    let data = m.data().iter().zip(&mask).map(|(v, k)| v * k).collect();
    Ok((
        DenseMatrix::from_vec(m.n_rows(), m.n_cols(), data)?,
        DenseMatrix::from_vec(m.n_rows(), m.n_cols(), mask)?,
    ))
}

/// Dropout over the stored entries of a sparse matrix. Unstored entries are
/// zero either way, so this is distributionally the same as dense dropout.
pub fn apply_dropout_sparse(
    m: &CsrMatrix,
    p: f64,
    rng: &mut Prng,
    training: bool,
) -> Result<(CsrMatrix, Vec<f64>)> {
    let mask = dropout_mask(m.nnz(), p, rng, training)?;
    let values = m.values().iter().zip(&mask).map(|(v, k)| v * k).collect();
    Ok((m.with_values(values)?, mask))
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(z: &DenseMatrix) -> DenseMatrix {
    let mut out = z.clone();
    for r in 0..out.n_rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Intermediates of one forward pass, sufficient for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    x_drop: CsrMatrix,
    /// `Ā_i · drop(X) · W⁰` for each term `i`.
    layer0_terms: Vec<DenseMatrix>,
    /// Pre-activation of the hidden layer, `S⁰ · drop(X) · W⁰`.
    pre_activation: DenseMatrix,
    hidden_mask: DenseMatrix,
    /// `drop(ReLU(pre_activation))`.
    hidden: DenseMatrix,
    /// `Ā_i · hidden · W¹` for each term `i`.
    layer1_terms: Vec<DenseMatrix>,
    logprobs: DenseMatrix,
}

impl ForwardTrace {
    pub fn pre_activation(&self) -> &DenseMatrix {
        &self.pre_activation
    }

    pub fn hidden(&self) -> &DenseMatrix {
        &self.hidden
    }

    pub fn hidden_mask(&self) -> &DenseMatrix {
        &self.hidden_mask
    }

    pub fn logprobs(&self) -> &DenseMatrix {
        &self.logprobs
    }

    pub fn into_logprobs(self) -> DenseMatrix {
        self.logprobs
    }
}

fn mix_terms(
    prop: &Propagation,
    input: &DenseMatrix,
    coeffs: &[f64],
) -> Result<(Vec<DenseMatrix>, DenseMatrix)> {
    let terms = prop
        .ops
        .iter()
        .map(|op| op.spmm(input))
        .collect::<Result<Vec<_>>>()?;
    let mut mixed = DenseMatrix::zeros(input.n_rows(), input.n_cols());
    for (t, &c) in terms.iter().zip(coeffs) {
        mixed.axpy(c, t);
    }
    Ok((terms, mixed))
}

/// Forward pass for either model family. `x` is the (row-normalized) node
/// feature matrix. Dropout hits `x` and the post-ReLU hidden matrix when
/// `training` is set.
pub fn forward(
    prop: &Propagation,
    x: &CsrMatrix,
    params: &ModelParams,
    dropout_p: f64,
    rng: &mut Prng,
    training: bool,
) -> Result<(DenseMatrix, ForwardTrace)> {
    let n = prop.n_nodes();
    if x.n_rows() != n {
        return Err(contract(format!("features have {} rows for {n} nodes", x.n_rows())));
    }
    if x.n_cols() != params.w0.n_rows() || params.w0.n_cols() != params.w1.n_rows() {
        return Err(contract(format!(
            "features {:?}, W0 {:?}, W1 {:?} do not chain",
            x.shape(),
            params.w0.shape(),
            params.w1.shape()
        )));
    }
    let c0 = params.layer_coeffs(0, prop.n_terms())?;
    let c1 = params.layer_coeffs(1, prop.n_terms())?;

    let (x_drop, _) = apply_dropout_sparse(x, dropout_p, rng, training)?;
    let xw = x_drop.spmm(&params.w0)?;
    let (layer0_terms, pre_activation) = mix_terms(prop, &xw, &c0)?;

    let mut relu = pre_activation.clone();
    relu.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let (hidden, hidden_mask) = apply_dropout(&relu, dropout_p, rng, training)?;

    let hw = hidden.matmul(&params.w1)?;
    let (layer1_terms, logits) = mix_terms(prop, &hw, &c1)?;
    let logprobs = log_softmax(&logits);

    let trace = ForwardTrace {
        x_drop,
        layer0_terms,
        pre_activation,
        hidden_mask,
        hidden,
        layer1_terms,
        logprobs: logprobs.clone(),
    };
    Ok((logprobs, trace))
}

/// Forward pass of a hop-mixing model.
pub fn forward_hop(
    prop: &Propagation,
    x: &CsrMatrix,
    params: &ModelParams,
    dropout_p: f64,
    rng: &mut Prng,
    training: bool,
) -> Result<(DenseMatrix, ForwardTrace)> {
    if !prop.is_mixing() {
        return Err(contract("forward_hop needs a hop-mixing propagation"));
    }
    forward(prop, x, params, dropout_p, rng, training)
}

/// Forward pass of the symmetric-normalized baseline.
pub fn forward_baseline(
    prop: &Propagation,
    x: &CsrMatrix,
    params: &ModelParams,
    dropout_p: f64,
    rng: &mut Prng,
    training: bool,
) -> Result<(DenseMatrix, ForwardTrace)> {
    if prop.is_mixing() || params.gamma.is_some() {
        return Err(contract("forward_baseline needs the baseline propagation"));
    }
    forward(prop, x, params, dropout_p, rng, training)
}

fn label_of(labels: &[Option<usize>], v: usize, n_classes: usize) -> Result<usize> {
    match labels.get(v).copied().flatten() {
        Some(c) if c < n_classes => Ok(c),
        Some(c) => Err(contract(format!("node {v} label {c} >= {n_classes} classes"))),
        None => Err(contract(format!("node {v} has no label"))),
    }
}

/// Mean negative log-likelihood over `mask`.
pub fn nll_loss(logprobs: &DenseMatrix, labels: &[Option<usize>], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(contract("nll_loss over an empty mask"));
    }
    let mut total = 0.0;
    for &v in mask {
        if v >= logprobs.n_rows() {
            return Err(contract(format!("mask node {v} out of range")));
        }
        total -= logprobs.get(v, label_of(labels, v, logprobs.n_cols())?);
    }
    Ok(total / mask.len() as f64)
}

/// Fraction of `nodes` whose arg-max class equals the label. Ties go to the
/// lowest class index.
pub fn accuracy(logprobs: &DenseMatrix, labels: &[Option<usize>], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(contract("accuracy over an empty node set"));
    }
    let mut correct = 0usize;
    for &v in nodes {
        let label = label_of(labels, v, logprobs.n_cols())?;
        let row = logprobs.row(v);
        let mut best = 0;
        for (c, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = c;
            }
        }
        correct += usize::from(best == label);
    }
    Ok(correct as f64 / nodes.len() as f64)
}

/// Exact gradient of [`nll_loss`] over `mask` through the forward map recorded
/// in `trace`, holding its dropout masks fixed.
pub fn backward(
    prop: &Propagation,
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: &[Option<usize>],
    mask: &[usize],
) -> Result<ModelParams> {
    let n = prop.n_nodes();
    let n_classes = params.w1.n_cols();
    let stale = || Error::Contract("trace does not match parameters/propagation".into());
    if trace.logprobs.shape() != (n, n_classes)
        || trace.hidden.shape() != (n, params.w0.n_cols())
        || trace.layer0_terms.len() != prop.n_terms()
        || trace.layer1_terms.len() != prop.n_terms()
        || trace.x_drop.n_cols() != params.w0.n_rows()
    {
        return Err(stale());
    }
    if mask.is_empty() {
        return Err(contract("backward over an empty mask"));
    }
    let c0 = params.layer_coeffs(0, prop.n_terms())?;
    let c1 = params.layer_coeffs(1, prop.n_terms())?;

    // d loss / d logits = (softmax - onehot) / |mask| on masked rows.
    let inv = 1.0 / mask.len() as f64;
    let mut d_logits = DenseMatrix::zeros(n, n_classes);
    for &v in mask {
        if v >= n {
            return Err(contract(format!("mask node {v} out of range")));
        }
        let label = label_of(labels, v, n_classes)?;
        let lp = trace.logprobs.row(v);
        let g = d_logits.row_mut(v);
        for (c, (gc, &l)) in g.iter_mut().zip(lp).enumerate() {
            *gc += inv * (l.exp() - if c == label { 1.0 } else { 0.0 });
        }
    }

    let mut grads = params.zeros_like();

    // Layer 1: logits = Σ_i c1_i Ā_i (H W¹)
    let mut d_hw = DenseMatrix::zeros(n, n_classes);
    for (op_t, &c) in prop.ops_t.iter().zip(&c1) {
        op_t.spmm_acc(c, &d_logits, &mut d_hw)?;
    }
    grads.w1 = trace.hidden.t_matmul(&d_hw)?;
    let mut d_pre = d_hw.matmul_t(&params.w1)?;
    for ((d, &m), &z) in d_pre
        .data_mut()
        .iter_mut()
        .zip(trace.hidden_mask.data())
        .zip(trace.pre_activation.data())
    {
        *d = if z > 0.0 { *d * m } else { 0.0 };
    }

    // Layer 0: pre = Σ_i c0_i Ā_i (X̃ W⁰)
    let mut d_xw = DenseMatrix::zeros(n, params.w0.n_cols());
    for (op_t, &c) in prop.ops_t.iter().zip(&c0) {
        op_t.spmm_acc(c, &d_pre, &mut d_xw)?;
    }
    grads.w0 = trace.x_drop.t_spmm(&d_xw)?;

    if let Some([g0, g1]) = &mut grads.gamma {
        for (g, term) in g0.iter_mut().zip(&trace.layer0_terms) {
            *g = d_pre.frobenius_dot(term);
        }
        for (g, term) in g1.iter_mut().zip(&trace.layer1_terms) {
            *g = d_logits.frobenius_dot(term);
        }
    }
    Ok(grads)
}
