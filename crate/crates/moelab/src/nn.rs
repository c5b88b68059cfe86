//! Micro neural network with hand-written gradients.
//!
//! The model is a token-wise residual feed-forward stack: each token's
//! hidden state starts as `token_embed[x] + task_embed[task]`, passes
//! through residual FFN blocks (`h <- h + W2 * relu(W1 * h + b1) + b2`),
//! and ends in a linear vocabulary projection. There is no mixing between
//! token positions.
//!
//! The sparse variant replaces alternating blocks with expert banks. A
//! sparse block scores each token against per-expert gate vectors
//! (`scores[t][j] = h_t . w_j`), routes with a balanced assignment during
//! training or greedy argmax at inference, and computes
//!
//! `h_t <- h_t + sigmoid(h_t . w_a) * FFN_a(h_t)`
//!
//! for the assigned expert `a`. The assignment itself is treated as a
//! constant of the forward pass: gradient reaches the gate vector only
//! through the sigmoid factor. All math is in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::routing::{self, AffinityMatrix, Assignment};
use crate::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform(rows: usize, cols: usize, half_width: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * half_width)
            .collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `out = v * m` for a row vector `v` of length `m.rows`.
fn vec_mat(v: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(v.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.fill(0.0);
    for (r, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(r)) {
            *o += x * w;
        }
    }
}

/// `out[r] = sum_c m[r][c] * v[c]` (multiplication by the transpose).
fn mat_vec(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(v.len(), m.cols);
    debug_assert_eq!(out.len(), m.rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = m.row(r).iter().zip(v).map(|(&w, &x)| w * x).sum();
    }
}

/// `g[r][c] += u[r] * v[c]`.
fn add_outer(g: &mut Matrix, u: &[f64], v: &[f64]) {
    debug_assert_eq!(u.len(), g.rows);
    debug_assert_eq!(v.len(), g.cols);
    for (r, &x) in u.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in g.row_mut(r).iter_mut().zip(v) {
            *o += x * y;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Architecture hyperparameters shared by the dense and sparse variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Every `moe_every`-th block (0-indexed positions `moe_every-1`,
    /// `2*moe_every-1`, ...) becomes an expert bank after sparsification.
    pub moe_every: usize,
    pub experts: usize,
    /// Half-width of the uniform gate initialization at sparsification.
    #[serde(default = "default_gate_scale")]
    pub gate_scale: f64,
}

fn default_gate_scale() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if self.dim == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::Config("dim, hidden, blocks must be positive".into()));
        }
        if self.moe_every == 0 {
            return Err(Error::Config("moe_every must be at least 1".into()));
        }
        if self.experts == 0 {
            return Err(Error::Config("experts must be at least 1".into()));
        }
        if !self.gate_scale.is_finite() || self.gate_scale < 0.0 {
            return Err(Error::Config("gate_scale must be nonnegative".into()));
        }
        Ok(())
    }

    /// Block positions that become expert banks after sparsification.
    pub fn moe_positions(&self) -> Vec<usize> {
        (0..self.blocks)
            .filter(|p| p % self.moe_every == self.moe_every - 1)
            .collect()
    }
}

/// One feed-forward block: `FFN(h) = relu(h W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FfnParams {
    fn zeros(dim: usize, hidden: usize) -> Self {
        FfnParams {
            w1: Matrix::zeros(dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, dim),
            b2: vec![0.0; dim],
        }
    }

    fn init(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: Matrix::uniform(dim, hidden, INIT_HALF_WIDTH, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::uniform(hidden, dim, INIT_HALF_WIDTH, rng),
            b2: vec![0.0; dim],
        }
    }
}

/// Bank of experts plus their gate vectors (one row per expert).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBlock {
    pub experts: Vec<FfnParams>,
    pub gates: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Ffn(FfnParams),
    Moe(MoeBlock),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseModel {
    pub config: ModelConfig,
    pub token_embed: Matrix,
    pub task_embed: Matrix,
    pub blocks: Vec<FfnParams>,
    pub out_proj: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseModel {
    pub config: ModelConfig,
    pub token_embed: Matrix,
    pub task_embed: Matrix,
    pub blocks: Vec<Block>,
    pub out_proj: Matrix,
}

/// Either training phase's model; checkpoints carry this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Model {
    Dense(DenseModel),
    Sparse(SparseModel),
}

const INIT_HALF_WIDTH: f64 = 0.1;

impl DenseModel {
    /// Fresh model: embeddings and FFN weights i.i.d. uniform in
    /// [-0.1, 0.1] from the seed, biases zero.
    pub fn init(config: ModelConfig, num_tasks: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_tasks == 0 {
            return Err(Error::Config("num_tasks must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_embed = Matrix::uniform(config.vocab, config.dim, INIT_HALF_WIDTH, &mut rng);
        let task_embed = Matrix::uniform(num_tasks, config.dim, INIT_HALF_WIDTH, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| FfnParams::init(config.dim, config.hidden, &mut rng))
            .collect();
        let out_proj = Matrix::uniform(config.dim, config.vocab, INIT_HALF_WIDTH, &mut rng);
        Ok(DenseModel {
            config,
            token_embed,
            task_embed,
            blocks,
            out_proj,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.task_embed.rows
    }

    fn zeros_like(&self) -> DenseModel {
        DenseModel {
            config: self.config,
            token_embed: Matrix::zeros(self.token_embed.rows, self.token_embed.cols),
            task_embed: Matrix::zeros(self.task_embed.rows, self.task_embed.cols),
            blocks: self
                .blocks
                .iter()
                .map(|_| FfnParams::zeros(self.config.dim, self.config.hidden))
                .collect(),
            out_proj: Matrix::zeros(self.out_proj.rows, self.out_proj.cols),
        }
    }
}

impl SparseModel {
    pub fn num_tasks(&self) -> usize {
        self.task_embed.rows
    }

    /// Block positions holding expert banks.
    pub fn moe_positions(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| matches!(b, Block::Moe(_)).then_some(i))
            .collect()
    }

    fn zeros_like(&self) -> SparseModel {
        let (dim, hidden) = (self.config.dim, self.config.hidden);
        SparseModel {
            config: self.config,
            token_embed: Matrix::zeros(self.token_embed.rows, self.token_embed.cols),
            task_embed: Matrix::zeros(self.task_embed.rows, self.task_embed.cols),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Ffn(_) => Block::Ffn(FfnParams::zeros(dim, hidden)),
                    Block::Moe(m) => Block::Moe(MoeBlock {
                        experts: (0..m.experts.len())
                            .map(|_| FfnParams::zeros(dim, hidden))
                            .collect(),
                        gates: Matrix::zeros(m.gates.rows, m.gates.cols),
                    }),
                })
                .collect(),
            out_proj: Matrix::zeros(self.out_proj.rows, self.out_proj.cols),
        }
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Dense(m) => &m.config,
            Model::Sparse(m) => &m.config,
        }
    }

    pub fn num_tasks(&self) -> usize {
        match self {
            Model::Dense(m) => m.num_tasks(),
            Model::Sparse(m) => m.num_tasks(),
        }
    }

    pub fn zeros_like(&self) -> Model {
        match self {
            Model::Dense(m) => Model::Dense(m.zeros_like()),
            Model::Sparse(m) => Model::Sparse(m.zeros_like()),
        }
    }
}

/// Converts a dense model into a sparse one: blocks at the configured
/// alternating positions become expert banks whose experts are bitwise
/// copies of the dense block, with gate vectors drawn i.i.d. uniform in
/// `[-gate_scale, gate_scale]` from `seed`. Everything else carries over
/// bitwise.
pub fn sparsify(m: &DenseModel, num_experts: usize, seed: u64, gate_scale: f64) -> SparseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moe_positions = m.config.moe_positions();
    let mut config = m.config;
    config.experts = num_experts;
    config.gate_scale = gate_scale;
    let blocks = m
        .blocks
        .iter()
        .enumerate()
        .map(|(pos, ffn)| {
            if moe_positions.contains(&pos) {
                Block::Moe(MoeBlock {
                    experts: vec![ffn.clone(); num_experts],
                    gates: Matrix::uniform(num_experts, m.config.dim, gate_scale, &mut rng),
                })
            } else {
                Block::Ffn(ffn.clone())
            }
        })
        .collect();
    SparseModel {
        config,
        token_embed: m.token_embed.clone(),
        task_embed: m.task_embed.clone(),
        blocks,
        out_proj: m.out_proj.clone(),
    }
}

/// Routing rule used in a sparse forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Balanced capacitated assignment.
    Train,
    /// Greedy per-token argmax.
    Eval,
}

/// What one expert bank did for one batch: the assignment actually used
/// for computation and the per-token argmax preference over the same
/// affinity scores (the instrumentation view).
#[derive(Debug, Clone)]
pub struct MoeRouting {
    pub block: usize,
    pub assignment: Assignment,
    pub preferred: Assignment,
}

enum BlockCache {
    Ffn {
        z: Vec<Vec<f64>>,
    },
    Moe {
        assignment: Assignment,
        z: Vec<Vec<f64>>,
        gate: Vec<f64>,
        fout: Vec<Vec<f64>>,
    },
}

/// Activations recorded by a forward pass, enough to run backward.
pub struct Cache {
    /// Hidden states: `h[b][t]` is token `t`'s state entering block `b`;
    /// `h[blocks][t]` is the final state.
    h: Vec<Vec<Vec<f64>>>,
    blocks: Vec<BlockCache>,
}

pub struct Forward {
    pub logits: Vec<Vec<f64>>,
    pub routing: Vec<MoeRouting>,
    pub cache: Cache,
}

fn check_ids(tokens: &[usize], task: usize, vocab: usize, num_tasks: usize) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocab {vocab}"
        )));
    }
    if task >= num_tasks {
        return Err(Error::Data(format!(
            "task id {task} out of range for {num_tasks} tasks"
        )));
    }
    Ok(())
}

fn embed(
    token_embed: &Matrix,
    task_embed: &Matrix,
    tokens: &[usize],
    task: usize,
) -> Vec<Vec<f64>> {
    tokens
        .iter()
        .map(|&x| {
            token_embed
                .row(x)
                .iter()
                .zip(task_embed.row(task))
                .map(|(&a, &b)| a + b)
                .collect()
        })
        .collect()
}

fn ffn_forward(ffn: &FfnParams, h: &[f64], z_out: &mut Vec<f64>, f_out: &mut Vec<f64>) {
    let hidden = ffn.b1.len();
    let dim = ffn.b2.len();
    z_out.resize(hidden, 0.0);
    f_out.resize(dim, 0.0);
    vec_mat(h, &ffn.w1, z_out);
    for (z, &b) in z_out.iter_mut().zip(&ffn.b1) {
        *z += b;
    }
    let a: Vec<f64> = z_out.iter().map(|&z| z.max(0.0)).collect();
    vec_mat(&a, &ffn.w2, f_out);
    for (f, &b) in f_out.iter_mut().zip(&ffn.b2) {
        *f += b;
    }
}

/// Dense forward: `h0 = token_embed[x] + task_embed[task]`, then
/// `h <- h + FFN(h)` per block, then `logits = h * out_proj`.
pub fn forward_dense(m: &DenseModel, tokens: &[usize], task: usize) -> Result<Forward> {
    check_ids(tokens, task, m.config.vocab, m.num_tasks())?;
    let mut h = embed(&m.token_embed, &m.task_embed, tokens, task);
    let mut h_states = vec![h.clone()];
    let mut caches = Vec::with_capacity(m.blocks.len());

    let mut z = Vec::new();
    let mut f = Vec::new();
    for ffn in &m.blocks {
        let mut zs = Vec::with_capacity(h.len());
        for ht in h.iter_mut() {
            ffn_forward(ffn, ht, &mut z, &mut f);
            for (hv, &fv) in ht.iter_mut().zip(&f) {
                *hv += fv;
            }
            zs.push(z.clone());
        }
        caches.push(BlockCache::Ffn { z: zs });
        h_states.push(h.clone());
    }

    let logits = h
        .iter()
        .map(|ht| {
            let mut out = vec![0.0; m.config.vocab];
            vec_mat(ht, &m.out_proj, &mut out);
            out
        })
        .collect();

    Ok(Forward {
        logits,
        routing: Vec::new(),
        cache: Cache {
            h: h_states,
            blocks: caches,
        },
    })
}

/// Sparse forward. `fixed` overrides the routing decision per expert bank
/// (in block order); when absent the mode picks balanced or greedy routing
/// over the scores `h_t . w_j`.
pub fn forward_sparse(
    m: &SparseModel,
    tokens: &[usize],
    task: usize,
    mode: RoutingMode,
    fixed: Option<&[Assignment]>,
) -> Result<Forward> {
    check_ids(tokens, task, m.config.vocab, m.num_tasks())?;
    let mut h = embed(&m.token_embed, &m.task_embed, tokens, task);
    let mut h_states = vec![h.clone()];
    let mut caches = Vec::with_capacity(m.blocks.len());
    let mut routing = Vec::new();
    let mut moe_seen = 0usize;

    let mut z = Vec::new();
    let mut f = Vec::new();
    for (pos, block) in m.blocks.iter().enumerate() {
        match block {
            Block::Ffn(ffn) => {
                let mut zs = Vec::with_capacity(h.len());
                for ht in h.iter_mut() {
                    ffn_forward(ffn, ht, &mut z, &mut f);
                    for (hv, &fv) in ht.iter_mut().zip(&f) {
                        *hv += fv;
                    }
                    zs.push(z.clone());
                }
                caches.push(BlockCache::Ffn { z: zs });
            }
            Block::Moe(moe) => {
                let num_experts = moe.experts.len();
                let mut scores = Vec::with_capacity(h.len() * num_experts);
                for ht in &h {
                    for j in 0..num_experts {
                        scores.push(dot(ht, moe.gates.row(j)));
                    }
                }
                let affinity = AffinityMatrix::new(h.len(), num_experts, scores)?;
                let preferred = routing::greedy_assign(&affinity);
                let assignment = match fixed {
                    Some(fixed) => {
                        let a = fixed.get(moe_seen).ok_or_else(|| {
                            Error::Data("missing fixed assignment for expert bank".into())
                        })?;
                        if a.expert_of.len() != h.len() {
                            return Err(Error::Data(
                                "fixed assignment length does not match token count".into(),
                            ));
                        }
                        a.clone()
                    }
                    None => match mode {
                        RoutingMode::Train => routing::balanced_assign(&affinity),
                        RoutingMode::Eval => preferred.clone(),
                    },
                };

                let mut zs = Vec::with_capacity(h.len());
                let mut gates = Vec::with_capacity(h.len());
                let mut fouts = Vec::with_capacity(h.len());
                for (t, ht) in h.iter_mut().enumerate() {
                    let a = assignment.expert_of[t];
                    let s = affinity.score(t, a);
                    let g = sigmoid(s);
                    ffn_forward(&moe.experts[a], ht, &mut z, &mut f);
                    for (hv, &fv) in ht.iter_mut().zip(&f) {
                        *hv += g * fv;
                    }
                    zs.push(z.clone());
                    gates.push(g);
                    fouts.push(f.clone());
                }
                routing.push(MoeRouting {
                    block: pos,
                    assignment: assignment.clone(),
                    preferred,
                });
                caches.push(BlockCache::Moe {
                    assignment,
                    z: zs,
                    gate: gates,
                    fout: fouts,
                });
                moe_seen += 1;
            }
        }
        h_states.push(h.clone());
    }

    let logits = h
        .iter()
        .map(|ht| {
            let mut out = vec![0.0; m.config.vocab];
            vec_mat(ht, &m.out_proj, &mut out);
            out
        })
        .collect();

    Ok(Forward {
        logits,
        routing,
        cache: Cache {
            h: h_states,
            blocks: caches,
        },
    })
}

pub fn forward(
    m: &Model,
    tokens: &[usize],
    task: usize,
    mode: RoutingMode,
    fixed: Option<&[Assignment]>,
) -> Result<Forward> {
    match m {
        Model::Dense(d) => forward_dense(d, tokens, task),
        Model::Sparse(s) => forward_sparse(s, tokens, task, mode, fixed),
    }
}

/// Mean cross-entropy of `logits` against `targets`, and the logit
/// gradient of that mean.
fn cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[y];
        let mut d: Vec<f64> = exps.iter().map(|&e| e / sum / n).collect();
        d[y] -= 1.0 / n;
        dlogits.push(d);
    }
    (loss / n, dlogits)
}

/// Mean cross-entropy only (used by the finite-difference oracle).
pub fn loss_only(
    m: &Model,
    tokens: &[usize],
    targets: &[usize],
    task: usize,
    mode: RoutingMode,
    fixed: Option<&[Assignment]>,
) -> Result<f64> {
    let fwd = forward(m, tokens, task, mode, fixed)?;
    Ok(cross_entropy(&fwd.logits, targets).0)
}

fn ffn_backward(
    ffn: &FfnParams,
    grad: &mut FfnParams,
    h_in: &[f64],
    z: &[f64],
    df: &[f64],
    dh_out: &mut [f64],
) {
    // f = relu(z) W2 + b2, with z = h W1 + b1. Accumulates parameter
    // gradients and adds the input-gradient contribution into dh_out.
    let a: Vec<f64> = z.iter().map(|&x| x.max(0.0)).collect();
    for (g, &d) in grad.b2.iter_mut().zip(df) {
        *g += d;
    }
    add_outer(&mut grad.w2, &a, df);
    let mut da = vec![0.0; a.len()];
    mat_vec(&ffn.w2, df, &mut da);
    let dz: Vec<f64> = da
        .iter()
        .zip(z)
        .map(|(&d, &zv)| if zv > 0.0 { d } else { 0.0 })
        .collect();
    for (g, &d) in grad.b1.iter_mut().zip(&dz) {
        *g += d;
    }
    add_outer(&mut grad.w1, h_in, &dz);
    let mut dh = vec![0.0; h_in.len()];
    mat_vec(&ffn.w1, &dz, &mut dh);
    for (o, d) in dh_out.iter_mut().zip(dh) {
        *o += d;
    }
}

/// Mean cross-entropy plus gradients for every parameter, computed by a
/// hand-written backward pass. For expert banks, each expert accumulates
/// gradient only from the tokens assigned to it; the routing decision is a
/// constant of the pass.
pub fn loss_and_grad(
    m: &Model,
    tokens: &[usize],
    targets: &[usize],
    task: usize,
    mode: RoutingMode,
) -> Result<(f64, Model, Vec<MoeRouting>)> {
    if tokens.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if tokens.len() != targets.len() {
        return Err(Error::Data("tokens and targets length mismatch".into()));
    }
    let fwd = forward(m, tokens, task, mode, None)?;
    let (loss, dlogits) = cross_entropy(&fwd.logits, targets);
    let mut grads = m.zeros_like();
    backward(m, &mut grads, &fwd.cache, tokens, task, &dlogits);
    Ok((loss, grads, fwd.routing))
}

fn backward(
    m: &Model,
    grads: &mut Model,
    cache: &Cache,
    tokens: &[usize],
    task: usize,
    dlogits: &[Vec<f64>],
) {
    let (dim, num_blocks) = (m.config().dim, m.config().blocks);
    let h_final = &cache.h[num_blocks];

    // Output projection and initial dh.
    let mut dh: Vec<Vec<f64>> = Vec::with_capacity(tokens.len());
    {
        let (out_proj, g_out) = match (m, &mut *grads) {
            (Model::Dense(m), Model::Dense(g)) => (&m.out_proj, &mut g.out_proj),
            (Model::Sparse(m), Model::Sparse(g)) => (&m.out_proj, &mut g.out_proj),
            _ => unreachable!("gradient container matches model variant"),
        };
        for (t, dl) in dlogits.iter().enumerate() {
            add_outer(g_out, &h_final[t], dl);
            let mut d = vec![0.0; dim];
            mat_vec(out_proj, dl, &mut d);
            dh.push(d);
        }
    }

    // Blocks in reverse.
    for b in (0..num_blocks).rev() {
        let h_in = &cache.h[b];
        match (m, &mut *grads, &cache.blocks[b]) {
            (Model::Dense(m), Model::Dense(g), BlockCache::Ffn { z }) => {
                for t in 0..tokens.len() {
                    let df = dh[t].clone();
                    ffn_backward(&m.blocks[b], &mut g.blocks[b], &h_in[t], &z[t], &df, &mut dh[t]);
                }
            }
            (Model::Sparse(m), Model::Sparse(g), BlockCache::Ffn { z }) => {
                let (Block::Ffn(ffn), Block::Ffn(gffn)) = (&m.blocks[b], &mut g.blocks[b]) else {
                    unreachable!("cache variant matches block variant");
                };
                for t in 0..tokens.len() {
                    let df = dh[t].clone();
                    ffn_backward(ffn, gffn, &h_in[t], &z[t], &df, &mut dh[t]);
                }
            }
            (
                Model::Sparse(m),
                Model::Sparse(g),
                BlockCache::Moe {
                    assignment,
                    z,
                    gate,
                    fout,
                },
            ) => {
                let (Block::Moe(moe), Block::Moe(gmoe)) = (&m.blocks[b], &mut g.blocks[b]) else {
                    unreachable!("cache variant matches block variant");
                };
                for t in 0..tokens.len() {
                    let a = assignment.expert_of[t];
                    let gv = gate[t];
                    let dh_out = dh[t].clone();
                    // Expert path: dL/df = g * dh_out.
                    let df: Vec<f64> = dh_out.iter().map(|&d| gv * d).collect();
                    ffn_backward(
                        &moe.experts[a],
                        &mut gmoe.experts[a],
                        &h_in[t],
                        &z[t],
                        &df,
                        &mut dh[t],
                    );
                    // Gate path: s = h . w_a, out += sigmoid(s) * f.
                    let ds = dot(&dh_out, &fout[t]) * gv * (1.0 - gv);
                    for (gw, &hv) in gmoe.gates.row_mut(a).iter_mut().zip(&h_in[t]) {
                        *gw += ds * hv;
                    }
                    for (d, &wv) in dh[t].iter_mut().zip(moe.gates.row(a)) {
                        *d += ds * wv;
                    }
                }
            }
            _ => unreachable!("gradient container matches model variant"),
        }
    }

    // Embeddings.
    let (tok_g, task_g) = match &mut *grads {
        Model::Dense(g) => (&mut g.token_embed, &mut g.task_embed),
        Model::Sparse(g) => (&mut g.token_embed, &mut g.task_embed),
    };
    for (t, &x) in tokens.iter().enumerate() {
        for (gv, &d) in tok_g.row_mut(x).iter_mut().zip(&dh[t]) {
            *gv += d;
        }
        for (gv, &d) in task_g.row_mut(task).iter_mut().zip(&dh[t]) {
            *gv += d;
        }
    }
}

fn axpy(param: &mut [f64], grad: &[f64], lr: f64) {
    for (p, &g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn update_ffn(p: &mut FfnParams, g: &FfnParams, lr: f64) {
    axpy(&mut p.w1.data, &g.w1.data, lr);
    axpy(&mut p.b1, &g.b1, lr);
    axpy(&mut p.w2.data, &g.w2.data, lr);
    axpy(&mut p.b2, &g.b2, lr);
}

/// Plain SGD step `theta <- theta - lr * g`. Parameters with zero gradient
/// (for example experts that received no tokens) are bitwise unchanged.
pub fn apply_update(m: &mut Model, grads: &Model, lr: f64) -> Result<()> {
    match (m, grads) {
        (Model::Dense(m), Model::Dense(g)) => {
            if m.blocks.len() != g.blocks.len() {
                return Err(Error::Data("gradient shape mismatch".into()));
            }
            axpy(&mut m.token_embed.data, &g.token_embed.data, lr);
            axpy(&mut m.task_embed.data, &g.task_embed.data, lr);
            for (p, gb) in m.blocks.iter_mut().zip(&g.blocks) {
                update_ffn(p, gb, lr);
            }
            axpy(&mut m.out_proj.data, &g.out_proj.data, lr);
            Ok(())
        }
        (Model::Sparse(m), Model::Sparse(g)) => {
            if m.blocks.len() != g.blocks.len() {
                return Err(Error::Data("gradient shape mismatch".into()));
            }
            axpy(&mut m.token_embed.data, &g.token_embed.data, lr);
            axpy(&mut m.task_embed.data, &g.task_embed.data, lr);
            for (p, gb) in m.blocks.iter_mut().zip(&g.blocks) {
                match (p, gb) {
                    (Block::Ffn(p), Block::Ffn(gf)) => update_ffn(p, gf, lr),
                    (Block::Moe(p), Block::Moe(gm)) => {
                        for (e, ge) in p.experts.iter_mut().zip(&gm.experts) {
                            update_ffn(e, ge, lr);
                        }
                        axpy(&mut p.gates.data, &gm.gates.data, lr);
                    }
                    _ => return Err(Error::Data("gradient block kind mismatch".into())),
                }
            }
            axpy(&mut m.out_proj.data, &g.out_proj.data, lr);
            Ok(())
        }
        _ => Err(Error::Data(
            "gradient phase does not match model phase".into(),
        )),
    }
}

fn param_arrays(m: &Model) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    match m {
        Model::Dense(m) => {
            out.push(&m.token_embed.data);
            out.push(&m.task_embed.data);
            for b in &m.blocks {
                out.extend([&b.w1.data[..], &b.b1[..], &b.w2.data[..], &b.b2[..]]);
            }
            out.push(&m.out_proj.data);
        }
        Model::Sparse(m) => {
            out.push(&m.token_embed.data);
            out.push(&m.task_embed.data);
            for b in &m.blocks {
                match b {
                    Block::Ffn(b) => {
                        out.extend([&b.w1.data[..], &b.b1[..], &b.w2.data[..], &b.b2[..]])
                    }
                    Block::Moe(moe) => {
                        for e in &moe.experts {
                            out.extend([&e.w1.data[..], &e.b1[..], &e.w2.data[..], &e.b2[..]]);
                        }
                        out.push(&moe.gates.data);
                    }
                }
            }
            out.push(&m.out_proj.data);
        }
    }
    out
}

fn param_arrays_mut(m: &mut Model) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    match m {
        Model::Dense(m) => {
            out.push(&mut m.token_embed.data);
            out.push(&mut m.task_embed.data);
            for b in &mut m.blocks {
                out.extend([
                    &mut b.w1.data[..],
                    &mut b.b1[..],
                    &mut b.w2.data[..],
                    &mut b.b2[..],
                ]);
            }
            out.push(&mut m.out_proj.data);
        }
        Model::Sparse(m) => {
            out.push(&mut m.token_embed.data);
            out.push(&mut m.task_embed.data);
            for b in &mut m.blocks {
                match b {
                    Block::Ffn(b) => out.extend([
                        &mut b.w1.data[..],
                        &mut b.b1[..],
                        &mut b.w2.data[..],
                        &mut b.b2[..],
                    ]),
                    Block::Moe(moe) => {
                        for e in &mut moe.experts {
                            out.extend([
                                &mut e.w1.data[..],
                                &mut e.b1[..],
                                &mut e.w2.data[..],
                                &mut e.b2[..],
                            ]);
                        }
                        out.push(&mut moe.gates.data);
                    }
                }
            }
            out.push(&mut m.out_proj.data);
        }
    }
    out
}

/// Total number of scalar parameters.
pub fn num_params(m: &Model) -> usize {
    param_arrays(m).iter().map(|a| a.len()).sum()
}

fn param_at(m: &Model, flat: usize) -> f64 {
    let mut idx = flat;
    for arr in param_arrays(m) {
        if idx < arr.len() {
            return arr[idx];
        }
        idx -= arr.len();
    }
    panic!("flat parameter index out of range");
}

fn nudge_param(m: &mut Model, flat: usize, delta: f64) {
    let mut idx = flat;
    for arr in param_arrays_mut(m) {
        if idx < arr.len() {
            arr[idx] += delta;
            return;
        }
        idx -= arr.len();
    }
    panic!("flat parameter index out of range");
}

/// Relative-error denominator floor. A central difference of a loss of
/// order 1 at epsilon = 1e-5 carries absolute roundoff of roughly 1e-10,
/// so gradients smaller than this floor cannot be measured relatively;
/// comparing against the floor keeps pure-noise differences near 1e-6
/// while still flagging any structural error at or above the floor scale.
const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares analytic gradients against central finite differences on a
/// random sample of scalar parameters, with the routing assignment frozen
/// across all evaluations. Returns the maximum relative error, where the
/// relative error of a pair `(ga, gn)` is `|ga - gn| / max(|ga|, |gn|,
/// floor)` and a pair of exact zeros scores 0.
pub fn gradient_check(
    m: &Model,
    tokens: &[usize],
    targets: &[usize],
    task: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::Domain(format!(
            "epsilon must be in (0, 1e-3], got {epsilon}"
        )));
    }
    let (_, grads, routing) = loss_and_grad(m, tokens, targets, task, RoutingMode::Train)?;
    let frozen: Vec<Assignment> = routing.iter().map(|r| r.assignment.clone()).collect();
    let fixed = (!frozen.is_empty()).then_some(&frozen[..]);

    let n = num_params(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..n)).collect()
    };

    let mut max_rel = 0.0f64;
    for idx in indices {
        let ga = param_at(&grads, idx);
        let mut plus = m.clone();
        nudge_param(&mut plus, idx, epsilon);
        let lp = loss_only(&plus, tokens, targets, task, RoutingMode::Train, fixed)?;
        let mut minus = m.clone();
        nudge_param(&mut minus, idx, -epsilon);
        let lm = loss_only(&minus, tokens, targets, task, RoutingMode::Train, fixed)?;
        let gn = (lp - lm) / (2.0 * epsilon);
        let denom = ga.abs().max(gn.abs()).max(GRAD_CHECK_FLOOR);
        let rel = if ga == 0.0 && gn == 0.0 {
            0.0
        } else {
            (ga - gn).abs() / denom
        };
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Fraction of positions whose argmax logit hits the target.
pub fn accuracy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits
        .iter()
        .zip(targets)
        .filter(|(row, &y)| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    hits as f64 / logits.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            dim: 4,
            hidden: 8,
            blocks: 2,
            moe_every: 2,
            experts: 2,
            gate_scale: 0.1,
        }
    }

    fn random_batch(cfg: &ModelConfig, len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..len).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let targets = (0..len).map(|_| rng.random_range(0..cfg.vocab)).collect();
        (tokens, targets)
    }

    #[test]
    fn residual_identity_dense() {
        let cfg = tiny_config();
        let mut m = DenseModel::init(cfg, 3, 1).unwrap();
        for b in &mut m.blocks {
            *b = FfnParams::zeros(cfg.dim, cfg.hidden);
        }
        m.out_proj = Matrix::zeros(cfg.dim, cfg.vocab);
        let tokens = vec![0, 5, 9];
        let fwd = forward_dense(&m, &tokens, 1).unwrap();
        assert!(fwd.logits.iter().flatten().all(|&l| l == 0.0));
        let h0 = embed(&m.token_embed, &m.task_embed, &tokens, 1);
        assert_eq!(fwd.cache.h[cfg.blocks], h0);
    }

    #[test]
    fn residual_identity_sparse() {
        let cfg = tiny_config();
        let mut m = DenseModel::init(cfg, 3, 1).unwrap();
        for b in &mut m.blocks {
            *b = FfnParams::zeros(cfg.dim, cfg.hidden);
        }
        let sparse = sparsify(&m, 2, 7, 0.5);
        let tokens = vec![0, 5, 9, 2];
        let fwd = forward_sparse(&sparse, &tokens, 0, RoutingMode::Train, None).unwrap();
        let h0 = embed(&m.token_embed, &m.task_embed, &tokens, 0);
        assert_eq!(fwd.cache.h[cfg.blocks], h0);
    }

    #[test]
    fn dense_forward_hand_computed() {
        let cfg = ModelConfig {
            vocab: 2,
            dim: 1,
            hidden: 1,
            blocks: 1,
            moe_every: 2,
            experts: 1,
            gate_scale: 0.0,
        };
        let m = DenseModel {
            config: cfg,
            token_embed: Matrix {
                rows: 2,
                cols: 1,
                data: vec![0.5, -0.3],
            },
            task_embed: Matrix {
                rows: 1,
                cols: 1,
                data: vec![0.2],
            },
            blocks: vec![FfnParams {
                w1: Matrix {
                    rows: 1,
                    cols: 1,
                    data: vec![2.0],
                },
                b1: vec![0.1],
                w2: Matrix {
                    rows: 1,
                    cols: 1,
                    data: vec![0.5],
                },
                b2: vec![-0.05],
            }],
            out_proj: Matrix {
                rows: 1,
                cols: 2,
                data: vec![1.5, -0.7],
            },
        };
        // h0 = 0.7; z = 1.5; f = 0.7; h = 1.4; logits = [2.1, -0.98]
        let fwd = forward_dense(&m, &[0], 0).unwrap();
        assert!((fwd.logits[0][0] - 2.1).abs() < 1e-12);
        assert!((fwd.logits[0][1] + 0.98).abs() < 1e-12);
    }

    #[test]
    fn tokenwise_permutation_equivariance() {
        let cfg = tiny_config();
        let m = DenseModel::init(cfg, 2, 3).unwrap();
        let fwd_a = forward_dense(&m, &[3, 11], 1).unwrap();
        let fwd_b = forward_dense(&m, &[11, 3], 1).unwrap();
        assert_eq!(fwd_a.logits[0], fwd_b.logits[1]);
        assert_eq!(fwd_a.logits[1], fwd_b.logits[0]);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let cfg = tiny_config();
        let m = DenseModel::init(cfg, 2, 3).unwrap();
        assert!(matches!(
            forward_dense(&m, &[cfg.vocab], 0),
            Err(Error::Data(_))
        ));
        assert!(matches!(forward_dense(&m, &[0], 2), Err(Error::Data(_))));
    }

    #[test]
    fn uniform_loss_with_zero_projection() {
        let cfg = ModelConfig {
            vocab: 32,
            dim: 4,
            hidden: 8,
            blocks: 2,
            moe_every: 2,
            experts: 2,
            gate_scale: 0.1,
        };
        let mut m = DenseModel::init(cfg, 1, 5).unwrap();
        m.out_proj = Matrix::zeros(cfg.dim, cfg.vocab);
        let model = Model::Dense(m);
        let (loss, _, _) =
            loss_and_grad(&model, &[1, 2, 3], &[4, 5, 6], 0, RoutingMode::Eval).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let cfg = ModelConfig {
            vocab: 2,
            dim: 1,
            hidden: 1,
            blocks: 1,
            moe_every: 2,
            experts: 1,
            gate_scale: 0.0,
        };
        let mut m = DenseModel::init(cfg, 1, 5).unwrap();
        m.token_embed.data = vec![1.0, 1.0];
        m.task_embed.data = vec![0.0];
        m.blocks[0] = FfnParams::zeros(1, 1);
        m.out_proj.data = vec![100.0, -100.0];
        let model = Model::Dense(m);
        let (loss, _, _) = loss_and_grad(&model, &[0, 1], &[0, 0], 0, RoutingMode::Eval).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = Model::Dense(DenseModel::init(tiny_config(), 1, 5).unwrap());
        assert!(matches!(
            loss_and_grad(&m, &[], &[], 0, RoutingMode::Train),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sparsify_copies_experts_bitwise() {
        let cfg = tiny_config();
        let dense = DenseModel::init(cfg, 2, 11).unwrap();
        let sparse = sparsify(&dense, 4, 42, 0.1);
        let mut seen_moe = false;
        for (pos, block) in sparse.blocks.iter().enumerate() {
            match block {
                Block::Moe(moe) => {
                    seen_moe = true;
                    assert_eq!(moe.experts.len(), 4);
                    for e in &moe.experts {
                        assert_eq!(e, &dense.blocks[pos]);
                    }
                }
                Block::Ffn(ffn) => assert_eq!(ffn, &dense.blocks[pos]),
            }
        }
        assert!(seen_moe);
        assert_eq!(sparse.token_embed, dense.token_embed);
        assert_eq!(sparse.out_proj, dense.out_proj);
    }

    #[test]
    fn sparsify_gate_determinism() {
        let dense = DenseModel::init(tiny_config(), 2, 11).unwrap();
        let a = sparsify(&dense, 4, 42, 0.1);
        let b = sparsify(&dense, 4, 42, 0.1);
        assert_eq!(a, b);
        let c = sparsify(&dense, 4, 43, 0.1);
        assert_ne!(a, c);
    }

    #[test]
    fn single_expert_zero_gate_composition() {
        // E=1 with zero gates: each expert bank computes h + 0.5 * FFN(h).
        let cfg = tiny_config();
        let dense = DenseModel::init(cfg, 2, 11).unwrap();
        let sparse = sparsify(&dense, 1, 0, 0.0);
        let tokens = vec![1, 2, 3];
        let fwd = forward_sparse(&sparse, &tokens, 0, RoutingMode::Train, None).unwrap();

        let h0 = embed(&dense.token_embed, &dense.task_embed, &tokens, 0);
        let mut z = Vec::new();
        let mut f = Vec::new();
        let mut h = h0;
        for (pos, ffn) in dense.blocks.iter().enumerate() {
            let is_moe = cfg.moe_positions().contains(&pos);
            for ht in h.iter_mut() {
                ffn_forward(ffn, ht, &mut z, &mut f);
                let scale = if is_moe { 0.5 } else { 1.0 };
                for (hv, &fv) in ht.iter_mut().zip(&f) {
                    *hv += scale * fv;
                }
            }
        }
        assert_eq!(fwd.cache.h[cfg.blocks], h);
    }

    #[test]
    fn zero_gates_make_logits_assignment_independent() {
        let cfg = tiny_config();
        let dense = DenseModel::init(cfg, 2, 11).unwrap();
        let sparse = sparsify(&dense, 2, 9, 0.0);
        let tokens = vec![1, 2, 3, 4];
        let moe_count = sparse.moe_positions().len();
        let assign_a = vec![
            Assignment {
                expert_of: vec![0, 0, 1, 1],
                loads: vec![2, 2],
            };
            moe_count
        ];
        let assign_b = vec![
            Assignment {
                expert_of: vec![1, 1, 0, 0],
                loads: vec![2, 2],
            };
            moe_count
        ];
        let fa = forward_sparse(&sparse, &tokens, 0, RoutingMode::Train, Some(&assign_a)).unwrap();
        let fb = forward_sparse(&sparse, &tokens, 0, RoutingMode::Train, Some(&assign_b)).unwrap();
        assert_eq!(fa.logits, fb.logits);
    }

    #[test]
    fn relabeling_symmetry_bitwise() {
        let cfg = tiny_config();
        let dense = DenseModel::init(cfg, 2, 13).unwrap();
        let sparse = sparsify(&dense, 3, 17, 0.2);
        let tokens = vec![0, 3, 7, 9, 12, 15];
        let fwd = forward_sparse(&sparse, &tokens, 1, RoutingMode::Train, None).unwrap();

        // Permute experts and gates jointly, relabel the assignment.
        let perm = [2usize, 0, 1]; // new index of old expert j is perm[j]
        let mut permuted = sparse.clone();
        for block in &mut permuted.blocks {
            if let Block::Moe(moe) = block {
                let mut experts = moe.experts.clone();
                let mut gates = moe.gates.clone();
                for (old, &new) in perm.iter().enumerate() {
                    experts[new] = moe.experts[old].clone();
                    gates.row_mut(new).copy_from_slice(moe.gates.row(old));
                }
                moe.experts = experts;
                moe.gates = gates;
            }
        }
        let relabeled: Vec<Assignment> = fwd
            .routing
            .iter()
            .map(|r| {
                let expert_of: Vec<usize> =
                    r.assignment.expert_of.iter().map(|&e| perm[e]).collect();
                let loads = routing::load_histogram(&expert_of, 3).unwrap();
                Assignment { expert_of, loads }
            })
            .collect();
        let fwd2 =
            forward_sparse(&permuted, &tokens, 1, RoutingMode::Train, Some(&relabeled)).unwrap();
        assert_eq!(fwd.logits, fwd2.logits);
    }

    #[test]
    fn gradient_check_dense_smooth_path() {
        let cfg = tiny_config();
        let m = Model::Dense(DenseModel::init(cfg, 2, 21).unwrap());
        let (tokens, targets) = random_batch(&cfg, 6, 99);
        let err = gradient_check(&m, &tokens, &targets, 1, 1e-5, 200, 7).unwrap();
        assert!(err < 1e-6, "dense gradient check failed: {err}");
    }

    #[test]
    fn gradient_check_sparse_model() {
        let cfg = ModelConfig {
            vocab: 16,
            dim: 4,
            hidden: 8,
            blocks: 2,
            moe_every: 2,
            experts: 2,
            gate_scale: 0.3,
        };
        let dense = DenseModel::init(cfg, 2, 23).unwrap();
        let m = Model::Sparse(sparsify(&dense, 2, 5, 0.3));
        let (tokens, targets) = random_batch(&cfg, 8, 101);
        let err = gradient_check(&m, &tokens, &targets, 0, 1e-5, 200, 11).unwrap();
        assert!(err < 1e-4, "sparse gradient check failed: {err}");
    }

    #[test]
    fn gradient_check_rejects_bad_epsilon() {
        let m = Model::Dense(DenseModel::init(tiny_config(), 1, 2).unwrap());
        assert!(gradient_check(&m, &[0], &[1], 0, 0.0, 10, 0).is_err());
        assert!(gradient_check(&m, &[0], &[1], 0, 1e-2, 10, 0).is_err());
    }

    #[test]
    fn apply_update_zero_lr_is_identity() {
        let m0 = Model::Dense(DenseModel::init(tiny_config(), 2, 31).unwrap());
        let mut m = m0.clone();
        let (_, grads, _) = loss_and_grad(&m, &[1, 2], &[3, 4], 0, RoutingMode::Eval).unwrap();
        apply_update(&mut m, &grads, 0.0).unwrap();
        assert_eq!(m, m0);
    }

    #[test]
    fn apply_update_sgd_definition() {
        let cfg = ModelConfig {
            vocab: 2,
            dim: 1,
            hidden: 1,
            blocks: 1,
            moe_every: 2,
            experts: 1,
            gate_scale: 0.0,
        };
        let mut m = Model::Dense(DenseModel::init(cfg, 1, 0).unwrap());
        let mut grads = m.zeros_like();
        // theta = 1, g = 2, lr = 0.1 -> 0.8 on a single chosen parameter.
        if let (Model::Dense(md), Model::Dense(gd)) = (&mut m, &mut grads) {
            md.out_proj.data[0] = 1.0;
            gd.out_proj.data[0] = 2.0;
        }
        apply_update(&mut m, &grads, 0.1).unwrap();
        if let Model::Dense(md) = &m {
            assert!((md.out_proj.data[0] - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn untouched_expert_unchanged_and_divergence() {
        let cfg = ModelConfig {
            vocab: 16,
            dim: 4,
            hidden: 8,
            blocks: 2,
            moe_every: 2,
            experts: 4,
            gate_scale: 0.2,
        };
        let dense = DenseModel::init(cfg, 2, 41).unwrap();
        let mut m = Model::Sparse(sparsify(&dense, 4, 3, 0.2));
        let before = m.clone();
        // 2 tokens, 4 experts: capacities [1,1,0,0], so exactly two experts
        // receive disjoint nonempty token sets and two receive nothing.
        let (_, grads, routing) =
            loss_and_grad(&m, &[1, 9], &[4, 12], 0, RoutingMode::Train).unwrap();
        let loads = routing[0].assignment.loads.clone();
        assert_eq!(loads.iter().sum::<usize>(), 2);
        apply_update(&mut m, &grads, 0.05).unwrap();

        let (Model::Sparse(after), Model::Sparse(orig)) = (&m, &before) else {
            unreachable!();
        };
        let (Block::Moe(moe_after), Block::Moe(moe_orig)) = (&after.blocks[1], &orig.blocks[1])
        else {
            unreachable!();
        };
        let mut changed = 0;
        for (j, load) in loads.iter().enumerate() {
            let same = moe_after.experts[j] == moe_orig.experts[j];
            if *load == 0 {
                assert!(same, "expert {j} had no tokens but changed");
            } else {
                changed += 1;
                assert!(!same, "expert {j} had tokens but did not change");
            }
        }
        assert!(changed >= 2);
        // Experts started bitwise-equal; after one step the served ones differ.
        assert_ne!(
            moe_after.experts[loads.iter().position(|&l| l > 0).unwrap()],
            moe_after.experts[loads.iter().rposition(|&l| l > 0).unwrap()]
        );
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        assert_eq!(accuracy(&logits, &[1, 0]), 1.0);
        assert_eq!(accuracy(&logits, &[0, 0]), 0.5);
    }
}
