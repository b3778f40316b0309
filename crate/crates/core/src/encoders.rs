//! Toy-scale decoupled text and image encoders over a shared feature space.
//!
//! The text encoder never sees image data: its signature admits no image
//! argument, which is the architectural point of the whole model. A frozen
//! copy of the text-encoder parameters (the teacher) provides targets for
//! the anchor regularizer.
//!
//! Both encoders are deliberately small — an embedding table with one
//! configurable mixing layer on the text side, a per-patch affine
//! projection on the image side. The objective is agnostic to whatever
//! produces (f_word, f_global, g_patch, g_global).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BufId, DenseMatrix, Tape};
use crate::error::{Error, Result};

/// Token-id sequence, length ≥ 1. Ids are validated against the vocabulary
/// at encode time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// M x M grid of raw patch feature vectors, stored as an (M², width) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    side: usize,
    patches: DenseMatrix,
}

impl PatchGrid {
    pub fn new(side: usize, patches: DenseMatrix) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidInput("patch grid side must be ≥ 1".into()));
        }
        if patches.rows() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "grid side {side} needs {} patches, got {}",
                side * side,
                patches.rows()
            )));
        }
        Ok(PatchGrid { side, patches })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn patch_count(&self) -> usize {
        self.patches.rows()
    }

    pub fn width(&self) -> usize {
        self.patches.cols()
    }

    /// (M², width) matrix, one patch per row.
    pub fn patches(&self) -> &DenseMatrix {
        &self.patches
    }
}

/// Per-word and global text features in the shared dimension.
/// `f_word` is (shared_dim x L): one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub f_word: DenseMatrix,
    pub f_global: Vec<f64>,
}

/// Per-patch and global image features in the shared dimension.
/// `g_patch` is (shared_dim x M²): one column per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub g_patch: DenseMatrix,
    pub g_global: Vec<f64>,
}

/// How token embeddings exchange information before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixing {
    /// Embedding lookup only.
    None,
    /// Add the sequence mean back onto every position.
    MeanResidual,
    /// One head of dot-product self-attention with a residual connection.
    SelfAttention,
}

/// How the global sentence feature is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextAggregation {
    /// A dedicated learned slot prepended to the sequence; its projected
    /// output is the sentence feature.
    AggSlot,
    /// Mean of the projected per-word columns.
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImagePooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Width of the shared text/image space. The full-scale reference value
    /// is 768; the toy default is 32.
    pub shared_dim: usize,
    /// Raw width of one image patch vector.
    pub patch_width: usize,
    pub max_len: usize,
    pub mixing: Mixing,
    pub aggregation: TextAggregation,
    pub pooling: ImagePooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 64,
            embed_dim: 16,
            shared_dim: 32,
            patch_width: 8,
            max_len: 64,
            mixing: Mixing::MeanResidual,
            aggregation: TextAggregation::AggSlot,
            pooling: ImagePooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("shared_dim", self.shared_dim),
            ("patch_width", self.patch_width),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        Ok(())
    }
}

/// Text-side parameters. Attention weights and the aggregate slot are
/// always allocated so the parameter layout is independent of the mixing
/// and aggregation modes; unused tensors simply receive zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    /// (vocab_size, embed_dim), one embedding per row.
    pub embedding: DenseMatrix,
    /// (1, embed_dim) learned aggregate-slot embedding.
    pub agg_embedding: DenseMatrix,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    /// (embed_dim, shared_dim)
    pub w_proj: DenseMatrix,
    /// (1, shared_dim)
    pub b_proj: DenseMatrix,
}

impl TextEncoderParams {
    pub(crate) fn tensors(&self) -> Vec<(&'static str, &DenseMatrix)> {
        vec![
            ("embedding", &self.embedding),
            ("agg_embedding", &self.agg_embedding),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }
}

/// Image-side parameters: an affine projection of raw patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    /// (patch_width, shared_dim)
    pub w_proj: DenseMatrix,
    /// (1, shared_dim)
    pub b_proj: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> DenseMatrix {
    let values = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    DenseMatrix::new(rows, cols, values).expect("finite init values")
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl EncoderParams {
    /// Seeded initialization: embeddings uniform in [-0.1, 0.1],
    /// projections with a Glorot-style bound, biases zero. Draw order is
    /// fixed so identical seeds give identical parameters.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let d = config.shared_dim;
        let text = TextEncoderParams {
            embedding: uniform_matrix(&mut rng, config.vocab_size, e, 0.1),
            agg_embedding: uniform_matrix(&mut rng, 1, e, 0.1),
            wq: uniform_matrix(&mut rng, e, e, glorot_bound(e, e)),
            wk: uniform_matrix(&mut rng, e, e, glorot_bound(e, e)),
            wv: uniform_matrix(&mut rng, e, e, glorot_bound(e, e)),
            w_proj: uniform_matrix(&mut rng, e, d, glorot_bound(e, d)),
            b_proj: DenseMatrix::zeros(1, d),
        };
        let image = ImageEncoderParams {
            w_proj: uniform_matrix(
                &mut rng,
                config.patch_width,
                d,
                glorot_bound(config.patch_width, d),
            ),
            b_proj: DenseMatrix::zeros(1, d),
        };
        Ok(EncoderParams {
            config,
            text,
            image,
        })
    }

    /// All tensors in the canonical (checkpoint and optimizer) order.
    pub fn tensors(&self) -> Vec<(&'static str, &DenseMatrix)> {
        vec![
            ("text.embedding", &self.text.embedding),
            ("text.agg_embedding", &self.text.agg_embedding),
            ("text.wq", &self.text.wq),
            ("text.wk", &self.text.wk),
            ("text.wv", &self.text.wv),
            ("text.w_proj", &self.text.w_proj),
            ("text.b_proj", &self.text.b_proj),
            ("image.w_proj", &self.image.w_proj),
            ("image.b_proj", &self.image.b_proj),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![
            &mut self.text.embedding,
            &mut self.text.agg_embedding,
            &mut self.text.wq,
            &mut self.text.wk,
            &mut self.text.wv,
            &mut self.text.w_proj,
            &mut self.text.b_proj,
            &mut self.image.w_proj,
            &mut self.image.b_proj,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.values().len()).sum()
    }

    /// Concatenation of all tensors in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Overwrite all tensors from a flat vector in canonical order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "flat parameter vector of {} for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.values().len();
            let (rows, cols) = (t.rows(), t.cols());
            *t = DenseMatrix::new(rows, cols, flat[off..off + n].to_vec())?;
            off += n;
        }
        Ok(())
    }
}

/// Frozen deep copy of the text encoder, taken at a designated time
/// (by default: initialization). Never updated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    config: EncoderConfig,
    text: TextEncoderParams,
}

impl TeacherSnapshot {
    pub fn of(params: &EncoderParams) -> Self {
        TeacherSnapshot {
            config: params.config.clone(),
            text: params.text.clone(),
        }
    }

    pub(crate) fn from_parts(config: EncoderConfig, text: TextEncoderParams) -> Self {
        TeacherSnapshot { config, text }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn text(&self) -> &TextEncoderParams {
        &self.text
    }
}

// ── Tape construction ───────────────────────────────────────────────

pub(crate) struct TextParamBufs {
    pub embedding: BufId,
    pub agg: BufId,
    pub wq: BufId,
    pub wk: BufId,
    pub wv: BufId,
    pub w_proj: BufId,
    pub b_proj: BufId,
}

pub(crate) struct ImageParamBufs {
    pub w_proj: BufId,
    pub b_proj: BufId,
}

pub(crate) struct ParamBufs {
    pub text: TextParamBufs,
    pub image: ImageParamBufs,
}

fn leaf_matrix(tape: &mut Tape, m: &DenseMatrix) -> BufId {
    tape.leaf(m.values().to_vec(), m.rows(), m.cols())
        .expect("matrix invariants hold")
}

pub(crate) fn bind_text_params(tape: &mut Tape, p: &TextEncoderParams) -> TextParamBufs {
    TextParamBufs {
        embedding: leaf_matrix(tape, &p.embedding),
        agg: leaf_matrix(tape, &p.agg_embedding),
        wq: leaf_matrix(tape, &p.wq),
        wk: leaf_matrix(tape, &p.wk),
        wv: leaf_matrix(tape, &p.wv),
        w_proj: leaf_matrix(tape, &p.w_proj),
        b_proj: leaf_matrix(tape, &p.b_proj),
    }
}

pub(crate) fn bind_image_params(tape: &mut Tape, p: &ImageEncoderParams) -> ImageParamBufs {
    ImageParamBufs {
        w_proj: leaf_matrix(tape, &p.w_proj),
        b_proj: leaf_matrix(tape, &p.b_proj),
    }
}

pub(crate) fn bind_params(tape: &mut Tape, p: &EncoderParams) -> ParamBufs {
    ParamBufs {
        text: bind_text_params(tape, &p.text),
        image: bind_image_params(tape, &p.image),
    }
}

/// Gradients of all bound parameters, flattened in canonical order.
/// Buffers the loss never touched contribute zeros.
pub(crate) fn collect_param_grads(
    tape: &Tape,
    bufs: &ParamBufs,
    params: &EncoderParams,
) -> Vec<f64> {
    let ids = [
        bufs.text.embedding,
        bufs.text.agg,
        bufs.text.wq,
        bufs.text.wk,
        bufs.text.wv,
        bufs.text.w_proj,
        bufs.text.b_proj,
        bufs.image.w_proj,
        bufs.image.b_proj,
    ];
    let mut out = Vec::with_capacity(params.num_params());
    for (&id, (_, t)) in ids.iter().zip(params.tensors()) {
        match tape.grad(id) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(0.0, t.values().len())),
        }
    }
    out
}

/// Text features on the tape: `word_rows` is (L, d) with one token per
/// row; `global` is (1, d).
pub(crate) struct TextFeatureBufs {
    pub word_rows: BufId,
    pub global: BufId,
}

pub(crate) struct ImageFeatureBufs {
    pub patch_rows: BufId,
    pub global: BufId,
}

pub(crate) fn build_text_features(
    tape: &mut Tape,
    x: &TokenSequence,
    pb: &TextParamBufs,
    cfg: &EncoderConfig,
) -> Result<TextFeatureBufs> {
    if x.len() > cfg.max_len {
        return Err(Error::InvalidInput(format!(
            "sequence of {} tokens exceeds max length {}",
            x.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = x.ids().iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of vocabulary (size {})",
            cfg.vocab_size
        )));
    }
    let indices: Vec<usize> = x.ids().iter().map(|&id| id as usize).collect();
    let gathered = tape.gather_rows(pb.embedding, &indices)?;

    let use_slot = cfg.aggregation == TextAggregation::AggSlot;
    let seq = if use_slot {
        let flat = tape.concat(&[pb.agg, gathered])?;
        tape.reshape(flat, x.len() + 1, cfg.embed_dim)?
    } else {
        gathered
    };

    let mixed = match cfg.mixing {
        Mixing::None => seq,
        Mixing::MeanResidual => {
            let m = tape.mean_rows(seq);
            tape.add_row_broadcast(seq, m)?
        }
        Mixing::SelfAttention => {
            let q = tape.matmul(seq, pb.wq)?;
            let k = tape.matmul(seq, pb.wk)?;
            let v = tape.matmul(seq, pb.wv)?;
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, 1.0 / (cfg.embed_dim as f64).sqrt());
            let attn = tape.softmax_rows(scaled);
            let ctx = tape.matmul(attn, v)?;
            tape.add(seq, ctx)?
        }
    };

    let proj = tape.matmul(mixed, pb.w_proj)?;
    let proj = tape.add_row_broadcast(proj, pb.b_proj)?;

    let (word_rows, global) = if use_slot {
        let global = tape.row(proj, 0)?;
        let words = tape.row_slice(proj, 1, x.len())?;
        (words, global)
    } else {
        let global = tape.mean_rows(proj);
        (proj, global)
    };
    Ok(TextFeatureBufs { word_rows, global })
}

pub(crate) fn build_image_features(
    tape: &mut Tape,
    y: &PatchGrid,
    pb: &ImageParamBufs,
    cfg: &EncoderConfig,
) -> Result<ImageFeatureBufs> {
    if y.width() != cfg.patch_width {
        return Err(Error::InvalidInput(format!(
            "patch width {} does not match configured width {}",
            y.width(),
            cfg.patch_width
        )));
    }
    let p = y.patches();
    let raw = tape.constant(p.values().to_vec(), p.rows(), p.cols())?;
    let proj = tape.matmul(raw, pb.w_proj)?;
    let proj = tape.add_row_broadcast(proj, pb.b_proj)?;
    let global = match cfg.pooling {
        ImagePooling::Mean => tape.mean_rows(proj),
        ImagePooling::Max => tape.max_rows(proj),
    };
    Ok(ImageFeatureBufs {
        patch_rows: proj,
        global,
    })
}

/// Register already-computed text features as constant leaves, in the
/// (L, d) row layout the loss builders expect.
pub(crate) fn leaf_text_features(tape: &mut Tape, xf: &TextFeatures) -> Result<TextFeatureBufs> {
    let t = xf.f_word.transposed();
    let word_rows = tape.leaf(t.values().to_vec(), t.rows(), t.cols())?;
    let global = tape.leaf_vec(xf.f_global.clone());
    Ok(TextFeatureBufs { word_rows, global })
}

pub(crate) fn leaf_image_features(tape: &mut Tape, yf: &ImageFeatures) -> Result<ImageFeatureBufs> {
    let t = yf.g_patch.transposed();
    let patch_rows = tape.leaf(t.values().to_vec(), t.rows(), t.cols())?;
    let global = tape.leaf_vec(yf.g_global.clone());
    Ok(ImageFeatureBufs { patch_rows, global })
}

fn text_features_from_tape(tape: &Tape, fb: &TextFeatureBufs) -> Result<TextFeatures> {
    let (rows, cols) = tape.shape(fb.word_rows);
    let rows_mat = DenseMatrix::new(rows, cols, tape.value(fb.word_rows).to_vec())?;
    Ok(TextFeatures {
        f_word: rows_mat.transposed(),
        f_global: tape.value(fb.global).to_vec(),
    })
}

fn image_features_from_tape(tape: &Tape, fb: &ImageFeatureBufs) -> Result<ImageFeatures> {
    let (rows, cols) = tape.shape(fb.patch_rows);
    let rows_mat = DenseMatrix::new(rows, cols, tape.value(fb.patch_rows).to_vec())?;
    Ok(ImageFeatures {
        g_patch: rows_mat.transposed(),
        g_global: tape.value(fb.global).to_vec(),
    })
}

// ── Plain forward passes ────────────────────────────────────────────

/// Encode a token sequence. Reads no image data anywhere.
pub fn encode_text(x: &TokenSequence, params: &EncoderParams) -> Result<TextFeatures> {
    let mut tape = Tape::new();
    let pb = bind_text_params(&mut tape, &params.text);
    let fb = build_text_features(&mut tape, x, &pb, &params.config)?;
    text_features_from_tape(&tape, &fb)
}

/// Encode a patch grid.
pub fn encode_image(y: &PatchGrid, params: &EncoderParams) -> Result<ImageFeatures> {
    let mut tape = Tape::new();
    let pb = bind_image_params(&mut tape, &params.image);
    let fb = build_image_features(&mut tape, y, &pb, &params.config)?;
    image_features_from_tape(&tape, &fb)
}

/// Encode with the frozen teacher parameters: identical computation to
/// [`encode_text`] under the snapshotted weights.
pub fn teacher_encode(x: &TokenSequence, snapshot: &TeacherSnapshot) -> Result<TextFeatures> {
    let mut tape = Tape::new();
    let pb = bind_text_params(&mut tape, &snapshot.text);
    let fb = build_text_features(&mut tape, x, &pb, &snapshot.config)?;
    text_features_from_tape(&tape, &fb)
}
