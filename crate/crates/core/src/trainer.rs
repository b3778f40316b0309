//! Minibatch gradient training of the combined objective with gradient
//! accumulation, seeded determinism, and binary checkpointing.
//!
//! Determinism contract: parameters initialize from `seed`, every epoch
//! shuffles with a seed derived from (seed, epoch), and accumulation
//! windows reset at epoch boundaries. Two runs with the same corpus and
//! config produce bit-identical loss histories, and a run resumed from a
//! checkpoint continues exactly where the uninterrupted run would be.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "DMCLCKPT" (8 bytes)
//! version: u32
//! payload_len: u64
//! payload:
//!   config_json_len: u64, config JSON (TrainConfig)
//!   step: u64, epochs_done: u64
//!   student tensor count: u32, then per tensor:
//!     name_len: u16, name bytes, rows: u64, cols: u64, values: f64 × rows·cols
//!   teacher tensor count: u32, same tensor encoding
//!   optimizer tag: u8 (0 = sgd, 1 = adam);
//!     adam: t: u64, len: u64, m: f64 × len, v: f64 × len
//! sha256(payload) (32 bytes)
//! ```

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_batches, Corpus};
use crate::diffcore::{DenseMatrix, Tape};
use crate::encoders::{
    self, EncoderConfig, EncoderParams, ImageEncoderParams, TeacherSnapshot, TextEncoderParams,
};
use crate::error::{Error, Result};
use crate::objective::{self, AnchorDirection, LossBreakdown, LossWeights};

const MAGIC: &[u8; 8] = b"DMCLCKPT";
const FORMAT_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    /// Moment-estimating update (β₁=0.9, β₂=0.999, eps=1e-8).
    #[default]
    Adam,
}

/// Training hyperparameters. Defaults: batch 64, lr 1e-4, 10 epochs,
/// 8-step gradient accumulation.
///
/// `batch_size` is the per-step batch (the in-batch noise count N); with
/// accumulation the effective batch per optimizer update is
/// `batch_size * grad_accumulation_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_accumulation_steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default)]
    pub anchor_direction: AnchorDirection,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            encoder: EncoderConfig::default(),
            batch_size: 64,
            learning_rate: 1e-4,
            epochs: 10,
            grad_accumulation_steps: 8,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            anchor_direction: AnchorDirection::TeacherTarget,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.encoder.validate()?;
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be finite and ≥ 0",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if self.grad_accumulation_steps == 0 {
            return Err(Error::InvalidConfig(
                "grad_accumulation_steps must be ≥ 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} too small: contrastive noise needs N ≥ 2",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState {
                t: 0,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            }),
        }
    }
}

/// Full resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub teacher: TeacherSnapshot,
    pub opt_state: OptimizerState,
    /// Batches processed so far.
    pub step: u64,
    pub epochs_done: u64,
    pub config: TrainConfig,
}

/// Per-epoch shuffle seed, decorrelated from the master seed by a
/// splitmix64 round.
pub(crate) fn epoch_seed(master: u64, epoch: u64) -> u64 {
    let mut z = master ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and flattened parameter gradient for one batch.
pub(crate) fn batch_loss_and_grads(
    params: &EncoderParams,
    teacher: &TeacherSnapshot,
    corpus: &Corpus,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let bufs = encoders::bind_params(&mut tape, params);
    let texts: Vec<_> = batch.iter().map(|&i| &corpus.samples[i].text).collect();
    let images: Vec<_> = batch.iter().map(|&i| &corpus.samples[i].image).collect();
    let loss = objective::build_total_loss_from_batch(
        &mut tape,
        &texts,
        &images,
        &bufs,
        params,
        teacher,
        &cfg.weights,
        cfg.anchor_direction,
    )?;
    tape.backward(loss.total)?;
    let grads = encoders::collect_param_grads(&tape, &bufs, params);
    Ok((loss.breakdown(&tape), grads))
}

fn apply_update(
    params: &mut EncoderParams,
    opt: &mut OptimizerState,
    mean_grad: &[f64],
    lr: f64,
    step: u64,
) -> Result<()> {
    let mut flat = params.flatten();
    match opt {
        OptimizerState::Sgd => {
            for (p, g) in flat.iter_mut().zip(mean_grad) {
                *p -= lr * g;
            }
        }
        OptimizerState::Adam(state) => {
            state.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
            for i in 0..flat.len() {
                let g = mean_grad[i];
                state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
                state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                flat[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    params.assign_flat(&flat).map_err(|e| {
        Error::Contract(format!(
            "non-finite parameters after update at step {step}: {e}"
        ))
    })
}

fn run_epochs(
    mut state: Checkpoint,
    corpus: &Corpus,
    until_epoch: u64,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    let cfg = state.config.clone();
    let n_params = state.params.num_params();
    let mut history = Vec::new();

    for epoch in state.epochs_done..until_epoch {
        let batches = make_batches(corpus, cfg.batch_size, epoch_seed(cfg.seed, epoch), true)?;
        let mut acc = vec![0.0; n_params];
        let mut window = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let (breakdown, grads) =
                batch_loss_and_grads(&state.params, &state.teacher, corpus, batch, &cfg)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite loss at step {} (epoch {epoch}, batch {bi}): {breakdown:?}",
                    state.step
                )));
            }
            for (a, g) in acc.iter_mut().zip(&grads) {
                *a += g;
            }
            window += 1;
            history.push(breakdown);
            state.step += 1;
            if window == cfg.grad_accumulation_steps || bi + 1 == batches.len() {
                // mean over the window keeps lr semantics batch-count free
                for a in acc.iter_mut() {
                    *a /= window as f64;
                }
                apply_update(
                    &mut state.params,
                    &mut state.opt_state,
                    &acc,
                    cfg.learning_rate,
                    state.step,
                )?;
                acc.iter_mut().for_each(|a| *a = 0.0);
                window = 0;
            }
        }
        state.epochs_done = epoch + 1;
    }

    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&state, path)?;
    }
    Ok((state, history))
}

/// Train from a fresh initialization: seed the encoders, snapshot the
/// teacher, then run `cfg.epochs` epochs. Returns the final state and one
/// [`LossBreakdown`] per batch.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("training on an empty corpus".into()));
    }
    if corpus.len() < cfg.batch_size {
        return Err(Error::Contract(format!(
            "corpus of {} samples cannot fill a batch of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let params = EncoderParams::init(cfg.encoder.clone(), cfg.seed)?;
    let teacher = TeacherSnapshot::of(&params);
    let opt_state = OptimizerState::new(cfg.optimizer, params.num_params());
    let state = Checkpoint {
        params,
        teacher,
        opt_state,
        step: 0,
        epochs_done: 0,
        config: cfg.clone(),
    };
    run_epochs(state, corpus, cfg.epochs as u64)
}

/// Continue a checkpointed run on the same corpus until `total_epochs`
/// epochs have been completed overall. Produces exactly the batches the
/// uninterrupted run would have seen.
pub fn resume_train(
    checkpoint: Checkpoint,
    corpus: &Corpus,
    total_epochs: usize,
) -> Result<(Checkpoint, Vec<LossBreakdown>)> {
    if (total_epochs as u64) < checkpoint.epochs_done {
        return Err(Error::Contract(format!(
            "checkpoint already at epoch {}, cannot rewind to {total_epochs}",
            checkpoint.epochs_done
        )));
    }
    run_epochs(checkpoint, corpus, total_epochs as u64)
}

// ── Checkpoint serialization ────────────────────────────────────────

fn write_matrix(buf: &mut Vec<u8>, name: &str, m: &DenseMatrix) -> Result<()> {
    buf.write_u16::<LittleEndian>(name.len() as u16)?;
    buf.extend_from_slice(name.as_bytes());
    buf.write_u64::<LittleEndian>(m.rows() as u64)?;
    buf.write_u64::<LittleEndian>(m.cols() as u64)?;
    for &v in m.values() {
        buf.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix(cur: &mut Cursor<&[u8]>, expect_name: &str) -> Result<DenseMatrix> {
    let integrity = |what: &str| Error::Integrity(format!("checkpoint truncated reading {what}"));
    let name_len = cur
        .read_u16::<LittleEndian>()
        .map_err(|_| integrity("tensor name length"))? as usize;
    let mut name = vec![0u8; name_len];
    cur.read_exact(&mut name)
        .map_err(|_| integrity("tensor name"))?;
    let name =
        String::from_utf8(name).map_err(|_| Error::Integrity("tensor name is not utf-8".into()))?;
    if name != expect_name {
        return Err(Error::Integrity(format!(
            "tensor order mismatch: found {name:?}, expected {expect_name:?}"
        )));
    }
    let rows = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("tensor rows"))? as usize;
    let cols = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("tensor cols"))? as usize;
    if rows.checked_mul(cols).is_none() || rows * cols > 1 << 32 {
        return Err(Error::Integrity(format!(
            "implausible tensor shape {rows}x{cols}"
        )));
    }
    let mut values = vec![0.0f64; rows * cols];
    cur.read_f64_into::<LittleEndian>(&mut values)
        .map_err(|_| integrity("tensor values"))?;
    DenseMatrix::new(rows, cols, values)
        .map_err(|e| Error::Integrity(format!("invalid tensor {expect_name}: {e}")))
}

fn encode_payload(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let config_json = serde_json::to_vec(&c.config)
        .map_err(|e| Error::InvalidInput(format!("config serialization: {e}")))?;
    buf.write_u64::<LittleEndian>(config_json.len() as u64)?;
    buf.extend_from_slice(&config_json);
    buf.write_u64::<LittleEndian>(c.step)?;
    buf.write_u64::<LittleEndian>(c.epochs_done)?;

    let student = c.params.tensors();
    buf.write_u32::<LittleEndian>(student.len() as u32)?;
    for (name, m) in student {
        write_matrix(&mut buf, name, m)?;
    }
    let teacher = c.teacher.text().tensors();
    buf.write_u32::<LittleEndian>(teacher.len() as u32)?;
    for (name, m) in teacher {
        write_matrix(&mut buf, name, m)?;
    }

    match &c.opt_state {
        OptimizerState::Sgd => buf.write_u8(0)?,
        OptimizerState::Adam(s) => {
            buf.write_u8(1)?;
            buf.write_u64::<LittleEndian>(s.t)?;
            buf.write_u64::<LittleEndian>(s.m.len() as u64)?;
            for &v in &s.m {
                buf.write_f64::<LittleEndian>(v)?;
            }
            for &v in &s.v {
                buf.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    Ok(buf)
}

fn decode_payload(payload: &[u8]) -> Result<Checkpoint> {
    let integrity = |what: &str| Error::Integrity(format!("checkpoint truncated reading {what}"));
    let mut cur = Cursor::new(payload);

    let json_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("config length"))? as usize;
    if json_len > payload.len() {
        return Err(Error::Integrity("config length exceeds payload".into()));
    }
    let mut json = vec![0u8; json_len];
    cur.read_exact(&mut json).map_err(|_| integrity("config"))?;
    let config: TrainConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::Integrity(format!("config echo does not parse: {e}")))?;

    let step = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("step"))?;
    let epochs_done = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| integrity("epochs_done"))?;

    let n_student = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| integrity("student tensor count"))?;
    if n_student != 9 {
        return Err(Error::Integrity(format!(
            "expected 9 student tensors, found {n_student}"
        )));
    }
    let text = TextEncoderParams {
        embedding: read_matrix(&mut cur, "text.embedding")?,
        agg_embedding: read_matrix(&mut cur, "text.agg_embedding")?,
        wq: read_matrix(&mut cur, "text.wq")?,
        wk: read_matrix(&mut cur, "text.wk")?,
        wv: read_matrix(&mut cur, "text.wv")?,
        w_proj: read_matrix(&mut cur, "text.w_proj")?,
        b_proj: read_matrix(&mut cur, "text.b_proj")?,
    };
    let image = ImageEncoderParams {
        w_proj: read_matrix(&mut cur, "image.w_proj")?,
        b_proj: read_matrix(&mut cur, "image.b_proj")?,
    };
    let params = EncoderParams {
        config: config.encoder.clone(),
        text,
        image,
    };

    let n_teacher = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| integrity("teacher tensor count"))?;
    if n_teacher != 7 {
        return Err(Error::Integrity(format!(
            "expected 7 teacher tensors, found {n_teacher}"
        )));
    }
    let teacher_text = TextEncoderParams {
        embedding: read_matrix(&mut cur, "embedding")?,
        agg_embedding: read_matrix(&mut cur, "agg_embedding")?,
        wq: read_matrix(&mut cur, "wq")?,
        wk: read_matrix(&mut cur, "wk")?,
        wv: read_matrix(&mut cur, "wv")?,
        w_proj: read_matrix(&mut cur, "w_proj")?,
        b_proj: read_matrix(&mut cur, "b_proj")?,
    };
    let teacher = TeacherSnapshot::from_parts(config.encoder.clone(), teacher_text);

    let tag = cur.read_u8().map_err(|_| integrity("optimizer tag"))?;
    let opt_state = match tag {
        0 => OptimizerState::Sgd,
        1 => {
            let t = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| integrity("adam t"))?;
            let len = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| integrity("adam len"))? as usize;
            if len != params.num_params() {
                return Err(Error::Integrity(format!(
                    "optimizer state of {len} values for {} parameters",
                    params.num_params()
                )));
            }
            let mut m = vec![0.0f64; len];
            cur.read_f64_into::<LittleEndian>(&mut m)
                .map_err(|_| integrity("adam m"))?;
            let mut v = vec![0.0f64; len];
            cur.read_f64_into::<LittleEndian>(&mut v)
                .map_err(|_| integrity("adam v"))?;
            OptimizerState::Adam(AdamState { t, m, v })
        }
        other => return Err(Error::Integrity(format!("unknown optimizer tag {other}"))),
    };

    if cur.position() != payload.len() as u64 {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after checkpoint payload",
            payload.len() as u64 - cur.position()
        )));
    }
    Ok(Checkpoint {
        params,
        teacher,
        opt_state,
        step,
        epochs_done,
        config,
    })
}

/// Write a checkpoint. The payload is digest-protected; truncation or
/// corruption surfaces as an integrity error on load.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let payload = encode_payload(c)?;
    let digest = Sha256::digest(&payload);
    let mut out = Vec::with_capacity(8 + 4 + 8 + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(payload.len() as u64)?;
    out.extend_from_slice(&payload);
    out.extend_from_slice(&digest);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

/// Read a checkpoint back. Fails with no partial state on any defect.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(Error::Integrity(
            "file shorter than checkpoint header".into(),
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Integrity("bad magic: not a checkpoint file".into()));
    }
    let mut cur = Cursor::new(&bytes[8..]);
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Integrity("truncated version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let payload_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Integrity("truncated length".into()))? as usize;
    let body_start = 8 + 4 + 8;
    if bytes.len() != body_start + payload_len + 32 {
        return Err(Error::Integrity(format!(
            "expected {} bytes, found {}",
            body_start + payload_len + 32,
            bytes.len()
        )));
    }
    let payload = &bytes[body_start..body_start + payload_len];
    let stored_digest = &bytes[body_start + payload_len..];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored_digest {
        return Err(Error::Integrity("payload digest mismatch".into()));
    }
    decode_payload(payload)
}

/// Render one training-log line: step index plus the loss components.
pub fn format_log_line(step: u64, b: &LossBreakdown) -> String {
    format!(
        "step={step} l_global={:.9} l_local={:.9} l_anchor={:.9} total={:.9}",
        b.l_global, b.l_local, b.l_anchor, b.total
    )
}
