//! Synthetic paired-corpus generation, JSON-lines ingestion, caption
//! overlap filtering, and minibatch construction.
//!
//! File formats (UTF-8, LF-terminated, one JSON object per line):
//!
//! corpus:  {"text": [int, ...], "image": [[float, ...], ...], "context": int?}
//!          with `image` holding M² rows of patch_width floats
//! eval:    {"s1": [int, ...], "s2": [int, ...], "score": float}
//!       or {"s1": ..., "s2": ..., "label": "entailment"|"neutral"|"contradiction"}

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::DenseMatrix;
use crate::encoders::{PatchGrid, TokenSequence};
use crate::error::{Error, Result};

/// Three-way inference label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }

    pub fn parse(s: &str) -> Result<Label> {
        match s {
            "entailment" => Ok(Label::Entailment),
            "neutral" => Ok(Label::Neutral),
            "contradiction" => Ok(Label::Contradiction),
            other => Err(Error::InvalidInput(format!("unknown label {other:?}"))),
        }
    }
}

/// One aligned text/image training pair. `context_id` is the generating
/// latent context and is present only for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub text: TokenSequence,
    pub image: PatchGrid,
    pub context_id: Option<u32>,
}

/// The text-to-image training set.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<PairedSample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Set of all training sentences, for overlap filtering.
    pub fn sentence_set(&self) -> HashSet<TokenSequence> {
        self.samples.iter().map(|s| s.text.clone()).collect()
    }
}

/// One evaluation sentence pair with either a similarity score (sts mode)
/// or a label (nli mode), never both.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub s1: TokenSequence,
    pub s2: TokenSequence,
    pub gold_score: Option<f64>,
    pub gold_label: Option<Label>,
}

impl EvalPair {
    pub fn scored(s1: TokenSequence, s2: TokenSequence, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite("eval gold score"));
        }
        Ok(EvalPair {
            s1,
            s2,
            gold_score: Some(score),
            gold_label: None,
        })
    }

    pub fn labeled(s1: TokenSequence, s2: TokenSequence, label: Label) -> Self {
        EvalPair {
            s1,
            s2,
            gold_score: None,
            gold_label: Some(label),
        }
    }
}

/// Parameters of the synthetic paired corpus.
///
/// Each of `num_contexts` latent contexts owns a token distribution (80%
/// of the mass on a context-specific block of the vocabulary, the rest
/// uniform) and a Gaussian patch prototype; samples draw tokens from the
/// distribution and emit patches = prototype + noise_scale · N(0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_contexts: usize,
    pub pairs_per_context: usize,
    pub vocab_size: usize,
    pub tokens_per_sentence: usize,
    pub grid_side: usize,
    pub patch_width: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_contexts: 8,
            pairs_per_context: 64,
            vocab_size: 64,
            tokens_per_sentence: 8,
            grid_side: 2,
            patch_width: 8,
            noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_contexts", self.num_contexts),
            ("pairs_per_context", self.pairs_per_context),
            ("vocab_size", self.vocab_size),
            ("tokens_per_sentence", self.tokens_per_sentence),
            ("grid_side", self.grid_side),
            ("patch_width", self.patch_width),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise_scale {} must be finite and ≥ 0",
                self.noise_scale
            )));
        }
        if self.vocab_size < self.num_contexts {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} cannot support {} contexts (need ≥ 1 token per context block)",
                self.vocab_size, self.num_contexts
            )));
        }
        Ok(())
    }
}

/// Fraction of each context's token mass that stays on its own block.
const CONTEXT_TOKEN_MASS: f64 = 0.8;

/// Generate a seeded synthetic corpus of
/// `num_contexts * pairs_per_context` samples with recorded context ids.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_contexts;
    let block = cfg.vocab_size / k;
    let patches = cfg.grid_side * cfg.grid_side;

    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..patches * cfg.patch_width)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(k * cfg.pairs_per_context);
    for ctx in 0..k {
        let block_start = (ctx * block) as u32;
        let block_end = block_start + block as u32;
        for _ in 0..cfg.pairs_per_context {
            let ids: Vec<u32> = (0..cfg.tokens_per_sentence)
                .map(|_| {
                    if rng.gen_bool(CONTEXT_TOKEN_MASS) {
                        rng.gen_range(block_start..block_end)
                    } else {
                        rng.gen_range(0..cfg.vocab_size as u32)
                    }
                })
                .collect();
            let values: Vec<f64> = prototypes[ctx]
                .iter()
                .map(|&p| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    p + cfg.noise_scale * noise
                })
                .collect();
            let image = PatchGrid::new(
                cfg.grid_side,
                DenseMatrix::new(patches, cfg.patch_width, values)?,
            )?;
            samples.push(PairedSample {
                text: TokenSequence::new(ids)?,
                image,
                context_id: Some(ctx as u32),
            });
        }
    }
    Ok(Corpus { samples })
}

// ── Serialization ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    text: Vec<u32>,
    image: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    context: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct EvalLine {
    s1: Vec<u32>,
    s2: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in &corpus.samples {
        let image: Vec<Vec<f64>> = (0..s.image.patch_count())
            .map(|i| s.image.patches().row(i).to_vec())
            .collect();
        let line = CorpusLine {
            text: s.text.ids().to_vec(),
            image,
            context: s.context_id,
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| Error::InvalidInput(format!("corpus serialization: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load a JSON-lines corpus. Errors carry 1-based line numbers; patch
/// geometry must be consistent across all samples.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    let mut geometry: Option<(usize, usize)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if parsed.text.is_empty() {
            return Err(Error::Schema {
                line: lineno,
                msg: "empty token sequence".into(),
            });
        }
        let rows = parsed.image.len();
        if rows == 0 {
            return Err(Error::Schema {
                line: lineno,
                msg: "image with zero patches".into(),
            });
        }
        let width = parsed.image[0].len();
        if parsed.image.iter().any(|r| r.len() != width) {
            return Err(Error::Schema {
                line: lineno,
                msg: "ragged patch rows".into(),
            });
        }
        match geometry {
            None => geometry = Some((rows, width)),
            Some((r, w)) if r != rows || w != width => {
                return Err(Error::Schema {
                    line: lineno,
                    msg: format!(
                        "inconsistent patch geometry: {rows}x{width} vs first sample {r}x{w}"
                    ),
                });
            }
            _ => {}
        }
        let side = (rows as f64).sqrt().round() as usize;
        if side * side != rows {
            return Err(Error::Schema {
                line: lineno,
                msg: format!("{rows} patches is not a square grid"),
            });
        }
        let flat: Vec<f64> = parsed.image.into_iter().flatten().collect();
        let patches = DenseMatrix::new(rows, width, flat).map_err(|e| Error::Schema {
            line: lineno,
            msg: e.to_string(),
        })?;
        samples.push(PairedSample {
            text: TokenSequence::new(parsed.text).map_err(|e| Error::Schema {
                line: lineno,
                msg: e.to_string(),
            })?,
            image: PatchGrid::new(side, patches).map_err(|e| Error::Schema {
                line: lineno,
                msg: e.to_string(),
            })?,
            context_id: parsed.context,
        });
    }
    Ok(Corpus { samples })
}

pub fn save_eval(pairs: &[EvalPair], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in pairs {
        let line = EvalLine {
            s1: p.s1.ids().to_vec(),
            s2: p.s2.ids().to_vec(),
            score: p.gold_score,
            label: p.gold_label.map(|l| l.as_str().to_string()),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| Error::InvalidInput(format!("eval serialization: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load a JSON-lines evaluation set. Each pair must carry exactly one of
/// `score` / `label`.
pub fn load_eval(path: &Path) -> Result<Vec<EvalPair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EvalLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if parsed.s1.is_empty() || parsed.s2.is_empty() {
            return Err(Error::Schema {
                line: lineno,
                msg: "empty sentence".into(),
            });
        }
        let (gold_score, gold_label) = match (parsed.score, parsed.label) {
            (Some(s), None) => {
                if !s.is_finite() {
                    return Err(Error::Schema {
                        line: lineno,
                        msg: "non-finite score".into(),
                    });
                }
                (Some(s), None)
            }
            (None, Some(l)) => {
                let label = Label::parse(&l).map_err(|e| Error::Schema {
                    line: lineno,
                    msg: e.to_string(),
                })?;
                (None, Some(label))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Schema {
                    line: lineno,
                    msg: "both score and label present".into(),
                })
            }
            (None, None) => {
                return Err(Error::Schema {
                    line: lineno,
                    msg: "neither score nor label present".into(),
                })
            }
        };
        let s1 = TokenSequence::new(parsed.s1).map_err(|e| Error::Schema {
            line: lineno,
            msg: e.to_string(),
        })?;
        let s2 = TokenSequence::new(parsed.s2).map_err(|e| Error::Schema {
            line: lineno,
            msg: e.to_string(),
        })?;
        pairs.push(EvalPair {
            s1,
            s2,
            gold_score,
            gold_label,
        });
    }
    Ok(pairs)
}

/// Drop every pair whose `s1` or `s2` exactly matches (token-id equality)
/// a sentence in the exclusion set. Survivors keep their order.
pub fn filter_overlap(pairs: Vec<EvalPair>, exclusion: &HashSet<TokenSequence>) -> Vec<EvalPair> {
    pairs
        .into_iter()
        .filter(|p| !exclusion.contains(&p.s1) && !exclusion.contains(&p.s2))
        .collect()
}

/// Seeded shuffle followed by contiguous slicing into batches of sample
/// indices. With `drop_last` (the default for training) every batch has
/// exactly `batch_size` members, keeping the in-batch noise count
/// constant across steps.
pub fn make_batches(
    corpus: &Corpus,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Contract(format!(
            "batch_size {batch_size} too small: contrastive noise needs N ≥ 2"
        )));
    }
    if drop_last && corpus.len() < batch_size {
        return Err(Error::Contract(format!(
            "corpus of {} samples cannot fill a batch of {batch_size}",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    let mut start = 0;
    while start + batch_size <= order.len() {
        batches.push(order[start..start + batch_size].to_vec());
        start += batch_size;
    }
    if !drop_last && start < order.len() {
        batches.push(order[start..].to_vec());
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn zero_noise_single_context_gives_identical_grids() {
        let cfg = SynthConfig {
            num_contexts: 1,
            pairs_per_context: 5,
            noise_scale: 0.0,
            ..Default::default()
        };
        let corpus = gen_synthetic(&cfg).unwrap();
        let first = corpus.samples[0].image.clone();
        for s in &corpus.samples {
            assert_eq!(s.image, first);
        }
    }

    #[test]
    fn sample_counts_and_context_ids() {
        let cfg = SynthConfig {
            num_contexts: 5,
            pairs_per_context: 20,
            ..Default::default()
        };
        let corpus = gen_synthetic(&cfg).unwrap();
        assert_eq!(corpus.len(), 100);
        let mut seen = HashSet::new();
        for s in &corpus.samples {
            let c = s.context_id.unwrap();
            assert!(c < 5);
            seen.insert(c);
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn nearest_centroid_recovers_context_under_low_noise() {
        let cfg = SynthConfig {
            num_contexts: 6,
            pairs_per_context: 30,
            noise_scale: 0.01,
            seed: 42,
            ..Default::default()
        };
        let corpus = gen_synthetic(&cfg).unwrap();
        // Estimate per-context centroids from the data, then classify
        // every image by nearest centroid (L2).
        let dim = corpus.samples[0].image.patches().values().len();
        let mut centroids = vec![vec![0.0f64; dim]; 6];
        let mut counts = vec![0usize; 6];
        for s in &corpus.samples {
            let c = s.context_id.unwrap() as usize;
            counts[c] += 1;
            for (acc, v) in centroids[c].iter_mut().zip(s.image.patches().values()) {
                *acc += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        for s in &corpus.samples {
            let vals = s.image.patches().values();
            let best = (0..6)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(vals)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(vals)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == s.context_id.unwrap() as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / corpus.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn gen_synthetic_is_bit_reproducible() {
        let cfg = SynthConfig {
            seed: 7,
            ..Default::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn vocab_too_small_for_contexts_is_config_error() {
        let cfg = SynthConfig {
            num_contexts: 10,
            vocab_size: 5,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let cfg = SynthConfig {
            num_contexts: 3,
            pairs_per_context: 4,
            ..Default::default()
        };
        let corpus = gen_synthetic(&cfg).unwrap();
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(corpus.samples, loaded.samples);
    }

    #[test]
    fn single_line_corpus_loads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        std::fs::write(&path, "{\"text\": [1, 2], \"image\": [[0.5, -0.25]]}\n").unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.samples[0].text.ids(), &[1, 2]);
        assert_eq!(corpus.samples[0].image.side(), 1);
        assert_eq!(corpus.samples[0].context_id, None);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"text\": [1], \"image\": [[0.0]]}\nnot json at all\n",
        )
        .unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_patch_counts_are_schema_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ragged.jsonl");
        std::fs::write(
            &path,
            "{\"text\": [1], \"image\": [[0.0], [1.0], [2.0], [3.0]]}\n{\"text\": [2], \"image\": [[0.0]]}\n",
        )
        .unwrap();
        match load_corpus(&path) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_square_patch_count_is_schema_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nonsquare.jsonl");
        std::fs::write(&path, "{\"text\": [1], \"image\": [[0.0], [1.0], [2.0]]}\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn eval_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("eval.jsonl");
        let pairs = vec![
            EvalPair::scored(seq(&[1, 2]), seq(&[3]), 0.7).unwrap(),
            EvalPair::labeled(seq(&[4]), seq(&[5, 6]), Label::Contradiction),
        ];
        save_eval(&pairs, &path).unwrap();
        let loaded = load_eval(&path).unwrap();
        assert_eq!(pairs, loaded);

        std::fs::write(&path, "{\"s1\": [1], \"s2\": [2]}\n").unwrap();
        assert!(matches!(
            load_eval(&path),
            Err(Error::Schema { line: 1, .. })
        ));
        std::fs::write(
            &path,
            "{\"s1\": [1], \"s2\": [2], \"score\": 1.0, \"label\": \"neutral\"}\n",
        )
        .unwrap();
        assert!(matches!(
            load_eval(&path),
            Err(Error::Schema { line: 1, .. })
        ));
        std::fs::write(
            &path,
            "{\"s1\": [1], \"s2\": [2], \"label\": \"sideways\"}\n",
        )
        .unwrap();
        assert!(matches!(
            load_eval(&path),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn filter_with_empty_exclusion_is_identity() {
        let pairs = vec![
            EvalPair::scored(seq(&[1]), seq(&[2]), 0.5).unwrap(),
            EvalPair::scored(seq(&[3]), seq(&[4]), 0.1).unwrap(),
        ];
        let out = filter_overlap(pairs.clone(), &HashSet::new());
        assert_eq!(out, pairs);
    }

    #[test]
    fn filter_removes_matching_pairs_preserving_order() {
        let pairs = vec![
            EvalPair::scored(seq(&[1]), seq(&[2]), 0.5).unwrap(),
            EvalPair::scored(seq(&[3]), seq(&[4]), 0.1).unwrap(),
            EvalPair::scored(seq(&[5]), seq(&[6]), 0.9).unwrap(),
        ];
        let exclusion: HashSet<TokenSequence> = [seq(&[3])].into_iter().collect();
        let out = filter_overlap(pairs.clone(), &exclusion);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], pairs[0]);
        assert_eq!(out[1], pairs[2]);
    }

    #[test]
    fn filter_all_first_sentences_empties_result() {
        let pairs = vec![
            EvalPair::scored(seq(&[1]), seq(&[2]), 0.5).unwrap(),
            EvalPair::scored(seq(&[3]), seq(&[4]), 0.1).unwrap(),
        ];
        let exclusion: HashSet<TokenSequence> = pairs.iter().map(|p| p.s1.clone()).collect();
        assert!(filter_overlap(pairs, &exclusion).is_empty());
    }

    #[test]
    fn filter_is_idempotent() {
        let pairs = vec![
            EvalPair::scored(seq(&[1]), seq(&[2]), 0.5).unwrap(),
            EvalPair::scored(seq(&[3]), seq(&[4]), 0.1).unwrap(),
        ];
        let exclusion: HashSet<TokenSequence> = [seq(&[1])].into_iter().collect();
        let once = filter_overlap(pairs, &exclusion);
        let twice = filter_overlap(once.clone(), &exclusion);
        assert_eq!(once, twice);
    }

    fn corpus_of(n: usize) -> Corpus {
        let cfg = SynthConfig {
            num_contexts: 1,
            pairs_per_context: n,
            vocab_size: 8,
            ..Default::default()
        };
        gen_synthetic(&cfg).unwrap()
    }

    #[test]
    fn batching_arithmetic() {
        let corpus = corpus_of(10);
        let full = make_batches(&corpus, 4, 0, true).unwrap();
        assert_eq!(full.len(), 2);
        assert!(full.iter().all(|b| b.len() == 4));
        let all = make_batches(&corpus, 4, 0, false).unwrap();
        assert_eq!(all.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn batching_is_deterministic_and_a_partition() {
        let corpus = corpus_of(17);
        let a = make_batches(&corpus, 5, 9, false).unwrap();
        let b = make_batches(&corpus, 5, 9, false).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<usize> = a.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn batching_contract_errors() {
        let corpus = corpus_of(3);
        assert!(matches!(
            make_batches(&corpus, 1, 0, true),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            make_batches(&corpus, 8, 0, true),
            Err(Error::Contract(_))
        ));
        // without drop_last a short corpus yields one short batch
        let short = make_batches(&corpus, 8, 0, false).unwrap();
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].len(), 3);
    }
}
