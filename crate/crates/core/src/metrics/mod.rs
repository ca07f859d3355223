//! Scalar metrics over logits and sequences.
//!
//! Sign conventions: a positive logit difference means the anti-stereotypical
//! target is preferred; exact ties count as stereotypical both for logit
//! order and for pair preference, so ties never inflate reversal or debias
//! figures.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, TokenId, Vocab};
use crate::patch::{ActivationCache, HookSite};
use crate::tensor::{Scalar, Tensor};

/// The stereotypical / anti-stereotypical token pair scored at a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounTarget {
    pub stereo: TokenId,
    pub anti: TokenId,
}

impl PronounTarget {
    pub fn new(stereo: TokenId, anti: TokenId) -> Result<Self> {
        if stereo == anti {
            return Err(Error::Metric(
                "stereotypical and anti-stereotypical targets must differ".into(),
            ));
        }
        Ok(Self { stereo, anti })
    }

    pub fn swapped(self) -> Self {
        Self {
            stereo: self.anti,
            anti: self.stereo,
        }
    }

    fn check(&self, vocab: usize) -> Result<()> {
        if self.stereo >= vocab || self.anti >= vocab {
            return Err(Error::TokenOutOfRange {
                id: self.stereo.max(self.anti),
                vocab,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `logit[anti] − logit[stereo]`
    LogitDiff,
    /// `log p(anti) − log p(stereo)`; equal to the logit difference since the
    /// log-partition cancels, kept as a separately named kind.
    LogProbDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// `None` scores the final position.
    pub position: Option<usize>,
    pub target: PronounTarget,
}

impl MetricSpec {
    pub fn logit_diff(target: PronounTarget) -> Self {
        Self {
            kind: MetricKind::LogitDiff,
            position: None,
            target,
        }
    }

    pub fn at(mut self, position: usize) -> Self {
        self.position = Some(position);
        self
    }

    pub fn resolve_position(&self, seq: usize) -> Result<usize> {
        match self.position {
            None if seq > 0 => Ok(seq - 1),
            Some(p) if p < seq => Ok(p),
            _ => Err(Error::Metric(format!(
                "metric position {:?} outside a sequence of {seq}",
                self.position
            ))),
        }
    }

    pub fn value<T: Scalar>(&self, logits: &Tensor<T>) -> Result<T> {
        let pos = self.resolve_position(logits.rows())?;
        self.target.check(logits.row_len())?;
        let row = logits.row(pos);
        let (s, a) = (row[self.target.stereo], row[self.target.anti]);
        Ok(match self.kind {
            MetricKind::LogitDiff => a - s,
            MetricKind::LogProbDiff => {
                let lz = log_sum_exp(row);
                (a - lz) - (s - lz)
            }
        })
    }

    /// Gradient of [`MetricSpec::value`] with respect to the logits.
    pub fn logit_grad<T: Scalar>(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        let pos = self.resolve_position(logits.rows())?;
        self.target.check(logits.row_len())?;
        let mut g = Tensor::zeros_like(logits);
        // identical for both kinds: the log-partition terms cancel
        let out = g.row_mut(pos);
        out[self.target.anti] += T::one();
        out[self.target.stereo] -= T::one();
        Ok(g)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a logit row, computed in f64.
pub fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Ranks starting at 1, ties sharing their mean rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric(format!(
            "spearman needs two equal series of length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("spearman of a constant series is undefined".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// `logits[pos, anti] − logits[pos, stereo]`.
pub fn logit_diff<T: Scalar>(logits: &Tensor<T>, spec: &MetricSpec) -> Result<T> {
    MetricSpec {
        kind: MetricKind::LogitDiff,
        ..*spec
    }
    .value(logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitOrder {
    Stereotypical,
    AntiStereotypical,
}

impl LogitOrder {
    pub fn is_reversed(self) -> bool {
        self == LogitOrder::AntiStereotypical
    }
}

/// Order of the two targets in one logit row.
pub fn logit_order<T: Scalar>(row: &[T], target: PronounTarget) -> LogitOrder {
    if row[target.stereo] >= row[target.anti] {
        LogitOrder::Stereotypical
    } else {
        LogitOrder::AntiStereotypical
    }
}

/// Per-layer readout of the residual stream through the final norm and
/// unembedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReadout {
    pub orders: Vec<LogitOrder>,
    /// `logit[anti] − logit[stereo]` per layer.
    pub diffs: Vec<f64>,
}

impl LensReadout {
    /// First layer from which the order is stereotypical at every later layer.
    pub fn settled_layer(&self) -> Option<usize> {
        let last_anti = self.orders.iter().rposition(|o| o.is_reversed());
        match last_anti {
            None if self.orders.is_empty() => None,
            None => Some(0),
            Some(l) if l + 1 < self.orders.len() => Some(l + 1),
            Some(_) => None,
        }
    }
}

pub fn logit_lens<T: Scalar>(
    cache: &ActivationCache<T>,
    checkpoint: &Checkpoint<T>,
    position: usize,
    target: PronounTarget,
) -> Result<LensReadout> {
    target.check(checkpoint.config.vocab_size)?;
    let mut orders = Vec::with_capacity(checkpoint.config.n_layers);
    let mut diffs = Vec::with_capacity(checkpoint.config.n_layers);
    for l in 0..checkpoint.config.n_layers {
        let row = cache.row(HookSite::ResidPost(l), position)?;
        let logits = checkpoint.unembed_residual(row)?;
        let r = logits.row(0);
        orders.push(logit_order(r, target));
        diffs.push((r[target.anti] - r[target.stereo]).as_f64());
    }
    Ok(LensReadout { orders, diffs })
}

/// `KL(softmax(p) ‖ softmax(q))` in nats.
pub fn kl_divergence<T: Scalar>(p_logits: &[T], q_logits: &[T]) -> Result<f64> {
    if p_logits.len() != q_logits.len() || p_logits.is_empty() {
        return Err(Error::shape("kl_divergence", p_logits.len(), q_logits.len()));
    }
    let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let (p, q) = (to64(p_logits), to64(q_logits));
    let (lp, lq) = (log_sum_exp(&p), log_sum_exp(&q));
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| {
            let log_p = a - lp;
            let log_q = b - lq;
            let pa = log_p.exp();
            if pa == 0.0 {
                0.0
            } else {
                pa * (log_p - log_q)
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Sum over positions `1..n` of the log-probability of the realized token.
pub fn sequence_logprob_tokens<T: Scalar>(checkpoint: &Checkpoint<T>, tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Metric(format!(
            "sequence scoring needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let out = checkpoint.forward(tokens, &Default::default())?;
    let mut total = 0.0;
    for t in 0..tokens.len() - 1 {
        let row: Vec<f64> = out.logits.row(t).iter().map(|v| v.as_f64()).collect();
        total += row[tokens[t + 1]] - log_sum_exp(&row);
    }
    Ok(total)
}

pub fn sequence_logprob<T: Scalar>(text: &str, checkpoint: &Checkpoint<T>, vocab: &Vocab) -> Result<f64> {
    sequence_logprob_tokens(checkpoint, &vocab.encode(text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    #[serde(rename = "stereo")]
    pub stereo_text: String,
    #[serde(rename = "anti")]
    pub anti_text: String,
    #[serde(rename = "category")]
    pub bias_category: String,
}

/// Scores for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub stereo_logprob: f64,
    pub anti_logprob: f64,
    pub prefers_stereo: bool,
    pub token_length_mismatch: bool,
}

pub fn score_pair<T: Scalar>(pair: &MinimalPair, checkpoint: &Checkpoint<T>, vocab: &Vocab) -> Result<PairScore> {
    let s = vocab.encode(&pair.stereo_text);
    let a = vocab.encode(&pair.anti_text);
    let stereo_logprob = sequence_logprob_tokens(checkpoint, &s)?;
    let anti_logprob = sequence_logprob_tokens(checkpoint, &a)?;
    Ok(PairScore {
        stereo_logprob,
        anti_logprob,
        prefers_stereo: stereo_logprob >= anti_logprob,
        token_length_mismatch: s.len() != a.len(),
    })
}

/// Fraction of pairs whose stereotypical sentence scores at least as high as
/// the anti-stereotypical one. 0.5 is the unbiased reference point.
pub fn preference_fraction<T: Scalar>(pairs: &[MinimalPair], checkpoint: &Checkpoint<T>, vocab: &Vocab) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("preference over an empty pair list".into()));
    }
    let scores: Vec<PairScore> = pairs
        .par_iter()
        .map(|p| score_pair(p, checkpoint, vocab))
        .collect::<Result<_>>()?;
    Ok(scores.iter().filter(|s| s.prefers_stereo).count() as f64 / pairs.len() as f64)
}

/// Reads a JSON-lines pair file: `{"stereo": .., "anti": .., "category": ..}`.
pub fn load_pairs(path: &Path) -> Result<Vec<MinimalPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<MinimalPair>(l).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[MinimalPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::json("pair", e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
