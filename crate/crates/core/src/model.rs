//! A micro decoder-only language model in which every trainable scalar has a
//! stable address.
//!
//! The block layout follows the LLaMA family: RMS-norm → rotary attention →
//! residual → RMS-norm → SwiGLU feed-forward → residual, with an untied
//! lm-head. Weight matrices are stored row-major with the orientations fixed
//! so that rows of `attn.o` and columns of `attn.q/k/v` partition into
//! contiguous head blocks, `ffn.gate/up` rows and `ffn.down` columns index
//! the hidden (feed-forward) axis.

use crate::tensor::{Real, Tape, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u16, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("loss needs a sequence of length >= 2, got {0}")]
    SequenceTooShort(usize),
    #[error("unknown matrix name: {0}")]
    UnknownMatrix(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

// ── configuration ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub init_scale: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: ~0.26M trainable scalars, minutes-scale CPU
    /// pre-training, large enough for importance regions to form.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 512,
            dim: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 172,
            max_seq: 64,
            init_scale: 0.02,
            seed: 0,
        }
    }

    /// Tiny configuration for oracle tests.
    pub fn tiny(dim: usize, layers: usize, heads: usize, vocab: usize) -> Self {
        ModelConfig {
            vocab_size: vocab,
            dim,
            layers,
            heads,
            ffn_dim: dim * 2 + dim / 2,
            max_seq: 32,
            init_scale: 0.02,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab-size", self.vocab_size),
            ("model-dim", self.dim),
            ("layer-count", self.layers),
            ("head-count", self.heads),
            ("feed-forward-dim", self.ffn_dim),
            ("max-sequence-length", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model-dim {} not divisible by head-count {}",
                self.dim, self.heads
            )));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "head dimension {} must be even for rotary positions",
                self.dim / self.heads
            )));
        }
        if self.ffn_dim < self.dim {
            return Err(ModelError::InvalidConfig(format!(
                "feed-forward-dim {} smaller than model-dim {}",
                self.ffn_dim, self.dim
            )));
        }
        if self.init_scale <= 0.0 || !self.init_scale.is_finite() {
            return Err(ModelError::InvalidConfig("initializer-scale must be positive".into()));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(ModelError::InvalidConfig(
                "vocab-size exceeds the 16-bit token id range".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form trainable scalar count for this configuration.
    pub fn expected_param_count(&self) -> usize {
        let (v, d, l, f) = (self.vocab_size, self.dim, self.layers, self.ffn_dim);
        2 * v * d + l * (4 * d * d + 3 * f * d + 2 * d) + d
    }
}

// ── addressing ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnGate,
    FfnUp,
    FfnDown,
    InputNorm,
    PostAttnNorm,
    FinalNorm,
    Embedding,
    LmHead,
}

impl MatrixKind {
    pub fn base_name(self) -> &'static str {
        match self {
            MatrixKind::AttnQ => "attn.q",
            MatrixKind::AttnK => "attn.k",
            MatrixKind::AttnV => "attn.v",
            MatrixKind::AttnO => "attn.o",
            MatrixKind::FfnGate => "ffn.gate",
            MatrixKind::FfnUp => "ffn.up",
            MatrixKind::FfnDown => "ffn.down",
            MatrixKind::InputNorm => "input-norm",
            MatrixKind::PostAttnNorm => "post-attn-norm",
            MatrixKind::FinalNorm => "final-norm",
            MatrixKind::Embedding => "embedding",
            MatrixKind::LmHead => "lm-head",
        }
    }

    pub fn is_per_layer(self) -> bool {
        !matches!(
            self,
            MatrixKind::FinalNorm | MatrixKind::Embedding | MatrixKind::LmHead
        )
    }

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            MatrixKind::InputNorm | MatrixKind::PostAttnNorm | MatrixKind::FinalNorm
        )
    }

    /// Attention / feed-forward weight matrices: the selection domain for
    /// ratio-based region masks.
    pub fn is_region_weight(self) -> bool {
        matches!(
            self,
            MatrixKind::AttnQ
                | MatrixKind::AttnK
                | MatrixKind::AttnV
                | MatrixKind::AttnO
                | MatrixKind::FfnGate
                | MatrixKind::FfnUp
                | MatrixKind::FfnDown
        )
    }

    /// Importance is tracked for everything except the token embedding and
    /// the lm-head.
    pub fn tracks_importance(self) -> bool {
        self.is_region_weight() || self.is_norm()
    }
}

/// One named matrix (or norm vector) of the model, optionally per-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatrixId {
    pub kind: MatrixKind,
    pub layer: Option<u16>,
}

impl MatrixId {
    pub fn layered(kind: MatrixKind, layer: usize) -> Self {
        MatrixId { kind, layer: Some(layer as u16) }
    }

    pub fn global(kind: MatrixKind) -> Self {
        MatrixId { kind, layer: None }
    }
}

impl std::fmt::Display for MatrixId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layers.{}.{}", l, self.kind.base_name()),
            None => write!(f, "{}", self.kind.base_name()),
        }
    }
}

impl std::str::FromStr for MatrixId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, base) = match s.strip_prefix("layers.") {
            Some(rest) => {
                let (num, base) = rest
                    .split_once('.')
                    .ok_or_else(|| ModelError::UnknownMatrix(s.into()))?;
                let layer: u16 = num.parse().map_err(|_| ModelError::UnknownMatrix(s.into()))?;
                (Some(layer), base)
            }
            None => (None, s),
        };
        let kind = match base {
            "attn.q" => MatrixKind::AttnQ,
            "attn.k" => MatrixKind::AttnK,
            "attn.v" => MatrixKind::AttnV,
            "attn.o" => MatrixKind::AttnO,
            "ffn.gate" => MatrixKind::FfnGate,
            "ffn.up" => MatrixKind::FfnUp,
            "ffn.down" => MatrixKind::FfnDown,
            "input-norm" => MatrixKind::InputNorm,
            "post-attn-norm" => MatrixKind::PostAttnNorm,
            "final-norm" => MatrixKind::FinalNorm,
            "embedding" => MatrixKind::Embedding,
            "lm-head" => MatrixKind::LmHead,
            _ => return Err(ModelError::UnknownMatrix(s.into())),
        };
        if kind.is_per_layer() != layer.is_some() {
            return Err(ModelError::UnknownMatrix(s.into()));
        }
        Ok(MatrixId { kind, layer })
    }
}

/// Address of one trainable scalar. Norm vectors use `col = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub matrix: MatrixId,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixDesc {
    pub id: MatrixId,
    pub rows: usize,
    pub cols: usize,
    /// Offset of this matrix in the global scalar enumeration.
    pub offset: usize,
}

impl MatrixDesc {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical enumeration of every matrix in the model:
/// embedding, then per layer (input-norm, attn.q/k/v/o, post-attn-norm,
/// ffn.gate/up/down), then final-norm and lm-head.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    entries: Vec<MatrixDesc>,
    total: usize,
}

impl Layout {
    pub fn of(config: &ModelConfig) -> Layout {
        let (v, d, f) = (config.vocab_size, config.dim, config.ffn_dim);
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |id: MatrixId, rows: usize, cols: usize, offset: &mut usize| {
            entries.push(MatrixDesc { id, rows, cols, offset: *offset });
            *offset += rows * cols;
        };
        push(MatrixId::global(MatrixKind::Embedding), v, d, &mut offset);
        for l in 0..config.layers {
            push(MatrixId::layered(MatrixKind::InputNorm, l), d, 1, &mut offset);
            push(MatrixId::layered(MatrixKind::AttnQ, l), d, d, &mut offset);
            push(MatrixId::layered(MatrixKind::AttnK, l), d, d, &mut offset);
            push(MatrixId::layered(MatrixKind::AttnV, l), d, d, &mut offset);
            push(MatrixId::layered(MatrixKind::AttnO, l), d, d, &mut offset);
            push(MatrixId::layered(MatrixKind::PostAttnNorm, l), d, 1, &mut offset);
            push(MatrixId::layered(MatrixKind::FfnGate, l), f, d, &mut offset);
            push(MatrixId::layered(MatrixKind::FfnUp, l), f, d, &mut offset);
            push(MatrixId::layered(MatrixKind::FfnDown, l), d, f, &mut offset);
        }
        push(MatrixId::global(MatrixKind::FinalNorm), d, 1, &mut offset);
        push(MatrixId::global(MatrixKind::LmHead), v, d, &mut offset);
        Layout { entries, total: offset }
    }

    pub fn entries(&self) -> &[MatrixDesc] {
        &self.entries
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, id: MatrixId) -> Option<usize> {
        self.entries.iter().position(|d| d.id == id)
    }

    pub fn desc(&self, id: MatrixId) -> Option<&MatrixDesc> {
        self.entries.iter().find(|d| d.id == id)
    }

    /// Global scalar index of a coordinate, if the coordinate is in range.
    pub fn global_index(&self, coord: ParamCoord) -> Option<usize> {
        let desc = self.desc(coord.matrix)?;
        if coord.row >= desc.rows || coord.col >= desc.cols {
            return None;
        }
        Some(desc.offset + coord.row * desc.cols + coord.col)
    }

    /// Inverse of [`Layout::global_index`].
    pub fn coord_of(&self, index: usize) -> Option<ParamCoord> {
        if index >= self.total {
            return None;
        }
        let pos = match self
            .entries
            .binary_search_by(|d| d.offset.cmp(&index))
        {
            Ok(p) => p,
            Err(p) => p - 1,
        };
        let desc = &self.entries[pos];
        let local = index - desc.offset;
        Some(ParamCoord {
            matrix: desc.id,
            row: local / desc.cols,
            col: local % desc.cols,
        })
    }
}

// ── parameter storage ──────────────────────────────────────────────────

/// Every trainable scalar of the model, indexable by [`ParamCoord`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<F: Real = f32> {
    config: ModelConfig,
    layout: Layout,
    data: Vec<Vec<F>>,
}

impl ParameterStore<f32> {
    /// Draws weight matrices from N(0, (σ/√d)²) and sets every norm vector
    /// to exactly 1. Deterministic under the config seed.
    pub fn init(config: &ModelConfig) -> Result<ParameterStore<f32>> {
        config.validate()?;
        let layout = Layout::of(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = init_distribution(config);
        let data = layout
            .entries()
            .iter()
            .map(|desc| {
                if desc.id.kind.is_norm() {
                    vec![1.0f32; desc.len()]
                } else {
                    (0..desc.len()).map(|_| normal.sample(&mut rng)).collect()
                }
            })
            .collect();
        Ok(ParameterStore { config: config.clone(), layout, data })
    }

    pub fn to_f64(&self) -> ParameterStore<f64> {
        ParameterStore {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|m| m.iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }
}

pub(crate) fn init_distribution(config: &ModelConfig) -> Normal<f32> {
    let std = config.init_scale / (config.dim as f32).sqrt();
    Normal::new(0.0, std).expect("validated scale")
}

impl<F: Real> ParameterStore<F> {
    pub fn from_matrices(config: &ModelConfig, data: Vec<Vec<F>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::of(config);
        if data.len() != layout.entries().len()
            || layout
                .entries()
                .iter()
                .zip(&data)
                .any(|(d, m)| d.len() != m.len())
        {
            return Err(ModelError::InvalidConfig(
                "matrix data does not match the config layout".into(),
            ));
        }
        Ok(ParameterStore { config: config.clone(), layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn total_params(&self) -> usize {
        self.layout.total_params()
    }

    pub fn matrix(&self, index: usize) -> &[F] {
        &self.data[index]
    }

    pub fn matrix_mut(&mut self, index: usize) -> &mut [F] {
        &mut self.data[index]
    }

    pub fn matrix_by_id(&self, id: MatrixId) -> Option<&[F]> {
        self.layout.index_of(id).map(|i| self.data[i].as_slice())
    }

    pub fn matrix_by_id_mut(&mut self, id: MatrixId) -> Option<&mut [F]> {
        let i = self.layout.index_of(id)?;
        Some(self.data[i].as_mut_slice())
    }

    pub fn get(&self, coord: ParamCoord) -> Option<F> {
        let idx = self.layout.index_of(coord.matrix)?;
        let desc = &self.layout.entries()[idx];
        if coord.row >= desc.rows || coord.col >= desc.cols {
            return None;
        }
        Some(self.data[idx][coord.row * desc.cols + coord.col])
    }

    pub fn set(&mut self, coord: ParamCoord, value: F) -> bool {
        let Some(idx) = self.layout.index_of(coord.matrix) else {
            return false;
        };
        let desc = self.layout.entries()[idx];
        if coord.row >= desc.rows || coord.col >= desc.cols {
            return false;
        }
        self.data[idx][coord.row * desc.cols + coord.col] = value;
        true
    }

    /// Iterates every coordinate in canonical enumeration order.
    pub fn coords(&self) -> impl Iterator<Item = ParamCoord> + '_ {
        self.layout.entries().iter().flat_map(|desc| {
            let id = desc.id;
            let cols = desc.cols;
            (0..desc.rows).flat_map(move |r| {
                (0..cols).map(move |c| ParamCoord { matrix: id, row: r, col: c })
            })
        })
    }
}

// ── forward / loss ──────────────────────────────────────────────────────

/// Tape handles produced by one traced forward pass.
pub struct TracedForward {
    pub logits: TensorId,
    /// Leaf tensor per layout entry, in layout order.
    pub leaves: Vec<TensorId>,
}

fn validate_tokens(config: &ModelConfig, tokens: &[u16]) -> Result<()> {
    if tokens.len() > config.max_seq {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), max: config.max_seq });
    }
    for &t in tokens {
        if (t as usize) >= config.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: t, vocab: config.vocab_size });
        }
    }
    Ok(())
}

/// Runs the model on `tokens`, recording onto `tape`. Logit row `i` depends
/// only on tokens `0..=i`.
pub fn forward_on_tape<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    tokens: &[u16],
) -> Result<TracedForward> {
    validate_tokens(store.config(), tokens)?;
    if tokens.is_empty() {
        return Err(ModelError::SequenceTooShort(0));
    }
    let cfg = store.config();
    let (d, h) = (cfg.dim, cfg.heads);
    let dh = d / h;
    let n = tokens.len();

    let mut leaves = Vec::with_capacity(store.layout().entries().len());
    for (desc, values) in store.layout().entries().iter().zip(&store.data) {
        let shape: Vec<usize> = if desc.id.kind.is_norm() {
            vec![desc.rows]
        } else {
            vec![desc.rows, desc.cols]
        };
        leaves.push(tape.leaf(&shape, values.clone())?);
    }
    let leaf = |id: MatrixId| -> TensorId {
        leaves[store.layout().index_of(id).expect("layout id")]
    };

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = tape.gather_rows(leaf(MatrixId::global(MatrixKind::Embedding)), &ids)?;

    let inv_sqrt_dh = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.layers {
        let at = |kind: MatrixKind| leaf(MatrixId::layered(kind, l));

        let normed = tape.rms_norm(x, at(MatrixKind::InputNorm))?;
        let q = tape.matmul(normed, at(MatrixKind::AttnQ))?;
        let k = tape.matmul(normed, at(MatrixKind::AttnK))?;
        let v = tape.matmul(normed, at(MatrixKind::AttnV))?;

        let split = |tape: &mut Tape<F>, t: TensorId| -> crate::tensor::Result<TensorId> {
            let r = tape.reshape(t, &[n, h, dh])?;
            tape.permute(r, &[1, 0, 2])
        };
        let q3 = split(tape, q)?;
        let k3 = split(tape, k)?;
        let v3 = split(tape, v)?;
        let qr = tape.rope(q3)?;
        let kr = tape.rope(k3)?;

        let kt = tape.permute(kr, &[0, 2, 1])?;
        let scores = tape.batch_matmul(qr, kt)?;
        let scaled = tape.scale(scores, inv_sqrt_dh)?;
        let probs = tape.causal_row_softmax(scaled)?;
        let ctx = tape.batch_matmul(probs, v3)?;
        let merged_heads = tape.permute(ctx, &[1, 0, 2])?;
        let merged = tape.reshape(merged_heads, &[n, d])?;
        let attn_out = tape.matmul(merged, at(MatrixKind::AttnO))?;
        x = tape.add(x, attn_out)?;

        let normed2 = tape.rms_norm(x, at(MatrixKind::PostAttnNorm))?;
        // gate/up are stored [ffn,d] and down [d,ffn]; the transposed-B
        // product streams their rows without materializing transposes
        let gate = tape.matmul_bt(normed2, at(MatrixKind::FfnGate))?;
        let up = tape.matmul_bt(normed2, at(MatrixKind::FfnUp))?;
        let act = tape.silu(gate)?;
        let mixed = tape.hadamard(act, up)?;
        let ffn_out = tape.matmul_bt(mixed, at(MatrixKind::FfnDown))?;
        x = tape.add(x, ffn_out)?;
    }

    let final_normed = tape.rms_norm(x, leaf(MatrixId::global(MatrixKind::FinalNorm)))?;
    let logits = tape.matmul_bt(final_normed, leaf(MatrixId::global(MatrixKind::LmHead)))?;
    Ok(TracedForward { logits, leaves })
}

/// Mean negative log-likelihood of `tokens[1..]` given their prefixes.
/// Returns the scalar loss alongside the traced forward handles.
pub fn loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    tokens: &[u16],
) -> Result<(TensorId, TracedForward)> {
    if tokens.len() < 2 {
        return Err(ModelError::SequenceTooShort(tokens.len()));
    }
    validate_tokens(store.config(), tokens)?;
    // Causality makes the logits for the first n-1 positions identical
    // whether or not the final token is fed, so the forward pass runs on the
    // prefix only.
    let traced = forward_on_tape(tape, store, &tokens[..tokens.len() - 1])?;
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let loss = tape.mean_cross_entropy(traced.logits, &targets)?;
    Ok((loss, traced))
}
