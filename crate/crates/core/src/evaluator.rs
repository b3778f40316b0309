//! Downstream evaluation using only the decoupled text encoder: pairwise
//! similarity, correlation metrics, threshold classification with grid
//! search, L1 nearest neighbors, and per-label similarity summaries.
//!
//! Nothing in this module touches image-encoder parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{EvalPair, Label};
use crate::diffcore::cosine;
use crate::encoders::{encode_text, EncoderParams, TokenSequence};
use crate::error::{Error, Result};

/// Similarity cutoffs for the three-way decision: ≥ ψ1 entailment,
/// < ψ2 contradiction, otherwise neutral. Defaults ψ1=0.80, ψ2=0.55.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub psi1: f64,
    pub psi2: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            psi1: 0.80,
            psi2: 0.55,
        }
    }
}

impl Thresholds {
    pub fn new(psi1: f64, psi2: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&psi1) || !(-1.0..=1.0).contains(&psi2) {
            return Err(Error::InvalidConfig(format!(
                "thresholds ψ1={psi1}, ψ2={psi2} outside [-1, 1]"
            )));
        }
        if psi2 > psi1 {
            return Err(Error::InvalidConfig(format!(
                "ψ2={psi2} must be ≤ ψ1={psi1}"
            )));
        }
        Ok(Thresholds { psi1, psi2 })
    }
}

/// Five-number summary of one label's similarity distribution. Quartiles
/// are Tukey hinges: with an odd count the median belongs to both halves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Sts,
    Nli,
}

/// Evaluation outcome. Which metrics are present depends on the mode:
/// sts fills the correlations, nli fills accuracy and per-label stats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_label_stats: Option<BTreeMap<Label, LabelStats>>,
    /// Thresholds actually used in nli mode (given or grid-searched).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    pub n_pairs: usize,
}

/// cosine(f(s1), f(s2)) on the global text features. Uses no image input.
pub fn sentence_similarity(
    s1: &TokenSequence,
    s2: &TokenSequence,
    params: &EncoderParams,
) -> Result<f64> {
    let a = encode_text(s1, params)?;
    let b = encode_text(s2, params)?;
    cosine(&a.f_global, &b.f_global)
}

/// Product-moment correlation. Errors on constant input.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "correlation of {} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Contract("correlation needs ≥ 2 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant input sequence".into(),
        ));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks with ties receiving the mean rank of their block (1-based).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j hold ties; their ranks i+1 ..= j+1 average to
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson over average-ranked data.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "correlation of {} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Map a similarity to the three-way label under the given thresholds.
pub fn classify(sim: f64, t: &Thresholds) -> Label {
    if sim >= t.psi1 {
        Label::Entailment
    } else if sim < t.psi2 {
        Label::Contradiction
    } else {
        Label::Neutral
    }
}

fn accuracy_under(sims: &[f64], gold: &[Label], t: &Thresholds) -> f64 {
    let correct = sims
        .iter()
        .zip(gold)
        .filter(|(s, g)| classify(**s, t) == **g)
        .count();
    correct as f64 / sims.len() as f64
}

/// Exhaustive search of the 41-value grid {-1, -0.95, ..., 1} over all
/// pairs with ψ2 ≤ ψ1. Ties go to the smallest ψ1, then the smallest ψ2.
pub fn grid_search_thresholds(sims: &[f64], gold: &[Label]) -> Result<(Thresholds, f64)> {
    if sims.len() != gold.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} similarities vs {} labels",
            sims.len(),
            gold.len()
        )));
    }
    if sims.is_empty() {
        return Err(Error::Contract("grid search over zero pairs".into()));
    }
    let grid: Vec<f64> = (0..=40).map(|k| k as f64 / 20.0 - 1.0).collect();
    let mut best: Option<(Thresholds, f64)> = None;
    for &psi1 in &grid {
        for &psi2 in grid.iter().take_while(|&&v| v <= psi1) {
            let t = Thresholds { psi1, psi2 };
            let acc = accuracy_under(sims, gold, &t);
            let better = match &best {
                None => true,
                Some((_, b)) => acc > *b,
            };
            if better {
                best = Some((t, acc));
            }
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Rank corpus sentences by L1 distance between global embeddings,
/// ascending, ties broken by corpus index. Returns (index, distance).
pub fn nearest_neighbors(
    query: &TokenSequence,
    corpus: &[TokenSequence],
    k: usize,
    params: &EncoderParams,
) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::Contract(
            "nearest-neighbor query over an empty corpus".into(),
        ));
    }
    if k > corpus.len() {
        return Err(Error::Contract(format!(
            "k={k} exceeds corpus size {}",
            corpus.len()
        )));
    }
    let q = encode_text(query, params)?.f_global;
    let mut scored = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.iter().enumerate() {
        let e = encode_text(s, params)?.f_global;
        let d: f64 = q.iter().zip(&e).map(|(a, b)| (a - b).abs()).sum();
        scored.push((i, d));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn five_number_summary(values: &[f64]) -> LabelStats {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Tukey hinges: an odd-length middle element belongs to both halves.
    let lower = &sorted[..n.div_ceil(2)];
    let upper = &sorted[n / 2..];
    LabelStats {
        min: sorted[0],
        q1: median_of_sorted(lower),
        median: median_of_sorted(&sorted),
        q3: median_of_sorted(upper),
        max: sorted[n - 1],
    }
}

/// Five-number summary per label. Empty groups are dropped with a warning.
pub fn label_distribution_stats(groups: &BTreeMap<Label, Vec<f64>>) -> BTreeMap<Label, LabelStats> {
    let mut out = BTreeMap::new();
    for (label, values) in groups {
        if values.is_empty() {
            log::warn!(
                "label {} has no similarities; omitted from stats",
                label.as_str()
            );
            continue;
        }
        out.insert(*label, five_number_summary(values));
    }
    out
}

/// Run the full text-only evaluation.
///
/// sts mode correlates similarities with gold scores. nli mode classifies
/// under the given thresholds, or — when none are given — grid-searches
/// them on a dev split (the first half of the pairs) and reports accuracy
/// on the disjoint remainder.
pub fn evaluate(
    pairs: &[EvalPair],
    params: &EncoderParams,
    mode: EvalMode,
    thresholds: Option<Thresholds>,
) -> Result<EvalReport> {
    match mode {
        EvalMode::Sts => {
            let mut sims = Vec::with_capacity(pairs.len());
            let mut gold = Vec::with_capacity(pairs.len());
            for p in pairs {
                let score = p.gold_score.ok_or_else(|| {
                    Error::InvalidInput("sts mode needs a gold score on every pair".into())
                })?;
                sims.push(sentence_similarity(&p.s1, &p.s2, params)?);
                gold.push(score);
            }
            Ok(EvalReport {
                pearson: Some(pearson(&sims, &gold)?),
                spearman: Some(spearman(&sims, &gold)?),
                accuracy: None,
                per_label_stats: None,
                thresholds: None,
                n_pairs: pairs.len(),
            })
        }
        EvalMode::Nli => {
            let mut sims = Vec::with_capacity(pairs.len());
            let mut gold = Vec::with_capacity(pairs.len());
            for p in pairs {
                let label = p.gold_label.ok_or_else(|| {
                    Error::InvalidInput("nli mode needs a gold label on every pair".into())
                })?;
                sims.push(sentence_similarity(&p.s1, &p.s2, params)?);
                gold.push(label);
            }
            let (t, eval_sims, eval_gold) = match thresholds {
                Some(t) => (t, &sims[..], &gold[..]),
                None => {
                    if pairs.len() < 2 {
                        return Err(Error::Contract(
                            "grid search needs ≥ 2 pairs to form dev and test splits".into(),
                        ));
                    }
                    let dev = pairs.len().div_ceil(2);
                    let (t, _) = grid_search_thresholds(&sims[..dev], &gold[..dev])?;
                    (t, &sims[dev..], &gold[dev..])
                }
            };
            let accuracy = accuracy_under(eval_sims, eval_gold, &t);
            let mut groups: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
            for (s, g) in eval_sims.iter().zip(eval_gold) {
                groups.entry(*g).or_default().push(*s);
            }
            Ok(EvalReport {
                pearson: None,
                spearman: None,
                accuracy: Some(accuracy),
                per_label_stats: Some(label_distribution_stats(&groups)),
                thresholds: Some(t),
                n_pairs: eval_sims.len(),
            })
        }
    }
}

/// CSV rendering of per-label stats: label,min,q1,median,q3,max.
pub fn stats_to_csv(stats: &BTreeMap<Label, LabelStats>) -> String {
    let mut out = String::from("label,min,q1,median,q3,max\n");
    for (label, s) in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            label.as_str(),
            s.min,
            s.q1,
            s.median,
            s.q3,
            s.max
        ));
    }
    out
}
