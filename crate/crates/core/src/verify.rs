//! Gradient verification suite: every loss component's analytic gradient
//! is compared against central finite differences on randomly shaped
//! small instances (dim ≤ 8, L ≤ 5, M² ≤ 4, N ≤ 4).
//!
//! The suite is the library's own acceptance gate for the reverse-mode
//! tape; the command-line `gradcheck` subcommand runs exactly this.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{grad_check, BufId, DenseMatrix, GradCheckReport, Tape, DEFAULT_GRAD_STEP};
use crate::encoders::{
    build_image_features, build_text_features, EncoderConfig, ImageParamBufs, ImagePooling, Mixing,
    TextAggregation, TextParamBufs, TokenSequence,
};
use crate::error::{Error, Result};
use crate::objective::{
    build_anchor, build_attention, build_contexts_from_attention, build_global_nce,
    build_local_nce, build_nce_from_matrix, build_sigma_local, build_total_loss, AnchorDirection,
    Direction, LossWeights,
};

/// Default number of seeded random instances per check.
pub const DEFAULT_SUITE_SEEDS: u64 = 20;

/// Relative-error tolerance every check must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> DenseMatrix {
    // rejection keeps norms comfortably away from the zero-norm guard
    loop {
        let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.3 {
            return DenseMatrix::new(1, dim, values).expect("finite values");
        }
    }
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> DenseMatrix {
    let mut values = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        values.extend(random_vector(rng, dim).values().iter().copied());
    }
    DenseMatrix::new(rows, dim, values).expect("finite values")
}

fn check_sigma_global(seed: u64, w: &LossWeights) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=8);
    let tau = w.tau_sigma;
    let inputs = vec![random_vector(&mut rng, dim), random_vector(&mut rng, dim)];
    grad_check(
        move |t: &mut Tape, ids: &[BufId]| {
            let c = t.cosine(ids[0], ids[1])?;
            let scaled = t.scale(c, 1.0 / tau);
            Ok(t.exp(scaled))
        },
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

fn check_nce_from_matrix(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let inputs = vec![DenseMatrix::new(n, n, values)?];
    grad_check(
        move |t: &mut Tape, ids: &[BufId]| {
            let yx = build_nce_from_matrix(t, ids[0], Direction::ImageGivenText)?;
            let xy = build_nce_from_matrix(t, ids[0], Direction::TextGivenImage)?;
            t.add(yx, xy)
        },
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

fn check_global_nce(seed: u64, w: &LossWeights) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let dim = rng.gen_range(2..=8);
    let mut inputs = Vec::new();
    for _ in 0..2 * n {
        inputs.push(random_vector(&mut rng, dim));
    }
    let w = *w;
    grad_check(
        move |t: &mut Tape, ids: &[BufId]| {
            let texts = &ids[..n];
            let images = &ids[n..];
            build_global_nce(t, texts, images, &w)
        },
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

fn check_attention_contexts(seed: u64, w: &LossWeights) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=8);
    let l = rng.gen_range(1..=5);
    let m2 = rng.gen_range(1..=4);
    let inputs = vec![
        random_rows(&mut rng, l, dim),
        random_rows(&mut rng, m2, dim),
    ];
    // random projection turns the pipeline output into a scalar target
    let proj: Vec<f64> = (0..(2 * l * m2 + m2 * dim + l * dim))
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let tau_c = w.tau_c;
    grad_check(
        move |t: &mut Tape, ids: &[BufId]| {
            let (_, attn, attn_prime) = build_attention(t, ids[0], ids[1])?;
            let (text_ctx, image_ctx) =
                build_contexts_from_attention(t, ids[0], ids[1], attn, attn_prime, tau_c)?;
            let stacked = t.concat(&[attn, attn_prime, text_ctx, image_ctx])?;
            let p = t.constant_vec(proj.clone());
            t.dot(stacked, p)
        },
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

fn check_sigma_local(seed: u64, w: &LossWeights) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=8);
    let l = rng.gen_range(1..=5);
    let m2 = rng.gen_range(1..=4);
    let inputs = vec![
        random_rows(&mut rng, l, dim),
        random_rows(&mut rng, m2, dim),
    ];
    let w = *w;
    grad_check(
        move |t: &mut Tape, ids: &[BufId]| build_sigma_local(t, ids[0], ids[1], &w),
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

fn check_local_nce(seed: u64, w: &LossWeights) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let dim = rng.gen_range(2..=6);
    let l = rng.gen_range(1..=4);
    let m2 = rng.gen_range(1..=3);
    let mut inputs = Vec::new();
    for _ in 0..n {
        inputs.push(random_rows(&mut rng, l, dim));
    }
    for _ in 0..n {
        inputs.push(random_rows(&mut rng, m2, dim));
    }
    let w = *w;
    grad_check(
        move |t: &mut Tape, ids: &[BufId]| build_local_nce(t, &ids[..n], &ids[n..], &w),
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

fn check_anchor(seed: u64, w: &LossWeights) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=8);
    let inputs = vec![random_vector(&mut rng, dim)];
    let teacher = random_vector(&mut rng, dim).values().to_vec();
    let direction = if seed % 2 == 0 {
        AnchorDirection::TeacherTarget
    } else {
        AnchorDirection::StudentTarget
    };
    let w = *w;
    grad_check(
        move |t: &mut Tape, ids: &[BufId]| build_anchor(t, ids[0], &teacher, &w, direction),
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

fn check_total_loss(seed: u64, w: &LossWeights) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.gen_range(5..=8);
    let embed = rng.gen_range(2..=4);
    let dim = rng.gen_range(2..=6);
    let width = rng.gen_range(2..=4);
    let n = rng.gen_range(2..=3);
    let mixing = match seed % 3 {
        0 => Mixing::None,
        1 => Mixing::MeanResidual,
        _ => Mixing::SelfAttention,
    };
    let aggregation = if seed % 2 == 0 {
        TextAggregation::AggSlot
    } else {
        TextAggregation::MeanPool
    };
    let cfg = EncoderConfig {
        vocab_size: vocab,
        embed_dim: embed,
        shared_dim: dim,
        patch_width: width,
        max_len: 8,
        mixing,
        aggregation,
        pooling: ImagePooling::Mean,
    };

    // the nine parameter tensors, in canonical order
    let inputs = vec![
        random_rows(&mut rng, vocab, embed), // embedding
        random_vector(&mut rng, embed),      // agg slot
        random_rows(&mut rng, embed, embed), // wq
        random_rows(&mut rng, embed, embed), // wk
        random_rows(&mut rng, embed, embed), // wv
        random_rows(&mut rng, embed, dim),   // text w_proj
        random_vector(&mut rng, dim),        // text b_proj
        random_rows(&mut rng, width, dim),   // image w_proj
        random_vector(&mut rng, dim),        // image b_proj
    ];

    let texts: Vec<TokenSequence> = (0..n)
        .map(|_| {
            let l = rng.gen_range(1..=3);
            TokenSequence::new((0..l).map(|_| rng.gen_range(0..vocab as u32)).collect())
                .expect("nonempty")
        })
        .collect();
    let images: Vec<DenseMatrix> = (0..n).map(|_| random_rows(&mut rng, 4, width)).collect();
    let teacher_globals: Vec<Vec<f64>> = (0..n)
        .map(|_| random_vector(&mut rng, dim).values().to_vec())
        .collect();
    let w = *w;

    grad_check(
        move |t: &mut Tape, ids: &[BufId]| {
            let text_params = TextParamBufs {
                embedding: ids[0],
                agg: ids[1],
                wq: ids[2],
                wk: ids[3],
                wv: ids[4],
                w_proj: ids[5],
                b_proj: ids[6],
            };
            let image_params = ImageParamBufs {
                w_proj: ids[7],
                b_proj: ids[8],
            };
            let mut text_feats = Vec::with_capacity(texts.len());
            for x in &texts {
                text_feats.push(build_text_features(t, x, &text_params, &cfg)?);
            }
            let mut image_feats = Vec::with_capacity(images.len());
            for img in &images {
                let grid = crate::encoders::PatchGrid::new(2, img.clone())?;
                image_feats.push(build_image_features(t, &grid, &image_params, &cfg)?);
            }
            let loss = build_total_loss(
                t,
                &text_feats,
                &image_feats,
                &teacher_globals,
                &w,
                AnchorDirection::TeacherTarget,
            )?;
            Ok(loss.total)
        },
        &inputs,
        DEFAULT_GRAD_STEP,
        SUITE_TOLERANCE,
    )
}

/// Run every check across `n_seeds` random instances each. Entries for
/// every (check, seed) pair are returned; callers decide how to render.
pub fn gradient_suite(n_seeds: u64) -> Result<Vec<SuiteEntry>> {
    let w = LossWeights::default();
    let checks: Vec<(&'static str, Box<dyn Fn(u64) -> Result<GradCheckReport>>)> = vec![
        ("sigma_global", Box::new(move |s| check_sigma_global(s, &w))),
        ("nce_from_scores", Box::new(check_nce_from_matrix)),
        ("global_nce", Box::new(move |s| check_global_nce(s, &w))),
        (
            "attention_contexts",
            Box::new(move |s| check_attention_contexts(s, &w)),
        ),
        (
            "sigma_local_score",
            Box::new(move |s| check_sigma_local(s, &w)),
        ),
        ("local_nce", Box::new(move |s| check_local_nce(s, &w))),
        ("anchor_loss", Box::new(move |s| check_anchor(s, &w))),
        ("total_loss", Box::new(move |s| check_total_loss(s, &w))),
    ];
    let mut out = Vec::new();
    for (name, check) in &checks {
        for seed in 0..n_seeds {
            let report = check(seed)
                .map_err(|e| Error::Contract(format!("{name} (seed {seed}) failed to run: {e}")))?;
            out.push(SuiteEntry { name, seed, report });
        }
    }
    Ok(out)
}

/// Worst relative error per check name, for compact reporting.
pub fn summarize(entries: &[SuiteEntry]) -> Vec<(&'static str, f64, bool)> {
    let mut names: Vec<&'static str> = Vec::new();
    for e in entries {
        if !names.contains(&e.name) {
            names.push(e.name);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let worst = entries
                .iter()
                .filter(|e| e.name == n)
                .map(|e| e.report.max_rel_error)
                .fold(0.0, f64::max);
            let passed = entries
                .iter()
                .filter(|e| e.name == n)
                .all(|e| e.report.passed);
            (n, worst, passed)
        })
        .collect()
}
