//! Neural building blocks on top of [`crate::autodiff`].
//!
//! Parameters live in a [`ParamStore`]; each forward pass binds them onto a
//! fresh tape and modules refer to them by [`ParamId`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Var};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("parameter `{0}` registered twice")]
    DuplicateName(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: (usize, usize), got: (usize, usize) },
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

/// Parameters bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(NnError::DuplicateName(name));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(DenseMatrix::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[DenseMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Binds every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Binds every parameter as a constant.
    pub fn bind_const(&self, tape: &Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    /// Per-parameter gradients in declaration order (zeros when untouched).
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<DenseMatrix> {
        bound.vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// All entries concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.as_slice().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten); shapes are kept.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(NnError::Config(format!(
                "flat parameter vector has {} entries, store holds {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `(name, shape)` pairs in declaration order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        self.names.iter().cloned().zip(self.values.iter().map(DenseMatrix::shape)).collect()
    }
}

/// Deterministic RNG for one named module.
pub fn module_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

/// `y = x W + b` with `W: in×out`, applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, seed: u64) -> Result<Self> {
        let mut rng = module_rng(seed, name);
        let weight = store.add(format!("{name}.weight"), xavier_uniform(d_in, d_out, &mut rng))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), DenseMatrix::zeros(1, d_out))?) } else { None };
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        Ok(match self.bias {
            Some(b) => tape.add_row(y, p.var(b))?,
            None => y,
        })
    }
}

/// Affine layers with GELU between them; the last layer is affine.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NnError::Config(format!("mlp `{name}` needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), DenseMatrix::filled(1, d, 1.0))?;
        let bias = store.add(format!("{name}.bias"), DenseMatrix::zeros(1, d))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.layer_norm_rows(x, Self::EPS)?;
        let h = tape.mul_row(h, p.var(self.gain))?;
        Ok(tape.add_row(h, p.var(self.bias))?)
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, seed: u64) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(NnError::Config(format!("d_model {d_model} not divisible by n_heads {n_heads}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, seed)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, seed)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, seed)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, true, seed)?,
            n_heads,
        })
    }

    /// Queries attend over `kv` tokens; output has the shape of `queries`.
    pub fn forward(&self, tape: &Tape, p: &Bound, queries: Var, kv: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, queries)?;
        let k = self.k.forward(tape, p, kv)?;
        let v = self.v.forward(tape, p, kv)?;
        let d = q.cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.scale(tape.matmul(qh, kt)?, scale)?;
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.out.forward(tape, p, merged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub n_anchors: usize,
    /// Hidden width of the position-wise FFN, as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { n_blocks: 2, n_heads: 2, d_model: 32, n_anchors: 16, ffn_mult: 2, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(NnError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_anchors == 0 {
            return Err(NnError::Config("n_anchors must be at least 1".into()));
        }
        if self.ffn_mult == 0 {
            return Err(NnError::Config("ffn_mult must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln_anchor: LayerNorm,
    self_attn: Attention,
    ln_token: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

/// Inducing-point transformer: tokens interact only through a sampled set
/// of anchors, so one block costs `O(N·M + M²)`.
#[derive(Debug, Clone)]
pub struct AnchorEncoder {
    pub config: EncoderConfig,
    pub input: Linear,
    blocks: Vec<EncoderBlock>,
    ln_out: LayerNorm,
}

impl AnchorEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let seed = config.seed;
        let input = Linear::new(store, &format!("{name}.input"), d_in, d, true, seed)?;
        let blocks = (0..config.n_blocks)
            .map(|b| {
                let n = format!("{name}.block{b}");
                Ok(EncoderBlock {
                    ln_anchor: LayerNorm::new(store, &format!("{n}.ln_anchor"), d)?,
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, config.n_heads, seed)?,
                    ln_token: LayerNorm::new(store, &format!("{n}.ln_token"), d)?,
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, config.n_heads, seed)?,
                    ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), d)?,
                    ffn: Mlp::new(store, &format!("{n}.ffn"), &[d, config.ffn_mult * d, d], seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d)?;
        Ok(Self { config, input, blocks, ln_out })
    }

    /// Anchor index sets, one per block, drawn without replacement.
    pub fn sample_anchors(&self, n_tokens: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let m = self.config.n_anchors.min(n_tokens);
        (0..self.blocks.len()).map(|_| sample(rng, n_tokens, m).into_vec()).collect()
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, features: Var, rng: &mut impl Rng) -> Result<Var> {
        let anchors = self.sample_anchors(features.rows(), rng);
        self.forward_with_anchors(tape, p, features, &anchors)
    }

    pub fn forward_with_anchors(&self, tape: &Tape, p: &Bound, features: Var, anchors: &[Vec<usize>]) -> Result<Var> {
        if anchors.len() != self.blocks.len() {
            return Err(NnError::Config(format!(
                "{} anchor sets for {} blocks",
                anchors.len(),
                self.blocks.len()
            )));
        }
        let mut h = self.input.forward(tape, p, features)?;
        for (block, idx) in self.blocks.iter().zip(anchors) {
            let a = tape.gather_rows(h, idx)?;
            let an = block.ln_anchor.forward(tape, p, a)?;
            let a = tape.add(a, block.self_attn.forward(tape, p, an, an)?)?;
            let hn = block.ln_token.forward(tape, p, h)?;
            h = tape.add(h, block.cross_attn.forward(tape, p, hn, a)?)?;
            let hn = block.ln_ffn.forward(tape, p, h)?;
            h = tape.add(h, block.ffn.forward(tape, p, hn)?)?;
        }
        self.ln_out.forward(tape, p, h)
    }

    /// Zeroes every residual branch's output projection (tests, ablations).
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            for lin in [&b.self_attn.out, &b.cross_attn.out, b.ffn.last()] {
                zero_linear(store, lin);
            }
        }
    }
}

pub fn zero_linear(store: &mut ParamStore, lin: &Linear) {
    let w = store.get_mut(lin.weight);
    *w = DenseMatrix::zeros(w.rows(), w.cols());
    if let Some(b) = lin.bias {
        let bv = store.get_mut(b);
        *bv = DenseMatrix::zeros(bv.rows(), bv.cols());
    }
}

/// Learned latent queries cross-attending to node tokens: `c = Attn(L, z, z)`.
#[derive(Debug, Clone)]
pub struct PerceiverPool {
    pub latents: ParamId,
    pub attn: Attention,
}

impl PerceiverPool {
    pub fn new(store: &mut ParamStore, name: &str, n_latents: usize, d_model: usize, n_heads: usize, seed: u64) -> Result<Self> {
        let mut rng = module_rng(seed, &format!("{name}.latents"));
        let latents = store.add(format!("{name}.latents"), xavier_uniform(n_latents, d_model, &mut rng))?;
        let attn = Attention::new(store, &format!("{name}.attn"), d_model, n_heads, seed)?;
        Ok(Self { latents, attn })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, z: Var) -> Result<Var> {
        self.attn.forward(tape, p, p.var(self.latents), z)
    }
}

/// Rescales `a` to `a / max(1, √rows·‖a‖∞)` inside the graph, so the result
/// has spectral norm at most 1 (`‖A‖₂ ≤ √m·‖A‖∞` for `m` rows).
pub fn bounded_linear(tape: &Tape, a: Var) -> Result<Var> {
    let row_abs = tape.row_sums(tape.abs(a)?)?;
    let inf = tape.max_all(row_abs)?;
    let bound = tape.scale(inf, (a.rows() as f64).sqrt())?;
    let denom = tape.max_const(bound, 1.0)?;
    Ok(tape.scale_var(a, tape.recip(denom)?)?)
}

/// `√rows·‖a‖∞`, an upper bound on `‖a‖₂`.
pub fn certified_norm_bound(a: &DenseMatrix) -> f64 {
    (a.rows() as f64).sqrt() * a.inf_norm()
}
