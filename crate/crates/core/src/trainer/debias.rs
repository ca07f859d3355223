use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mask::ComponentMask;
use super::optim::TrainConfig;
use super::train::{encode_corpus, perplexity, train_lm_tokens, EpochLoss, TrainOutcome};
use crate::error::Result;
use crate::metrics::{preference_fraction, MinimalPair};
use crate::model::{Checkpoint, Vocab};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub eval_set: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasReport {
    pub mask: String,
    pub trainable_parameters: usize,
    pub steps: u64,
    pub preference: Vec<PreferenceRow>,
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    pub curve: Vec<EpochLoss>,
    pub config: TrainConfig,
}

impl DebiasReport {
    pub fn perplexity_increase(&self) -> f64 {
        self.perplexity_after / self.perplexity_before - 1.0
    }
}

/// Preference on every eval set, masked fine-tuning on `corpus`, then
/// preference again, with neutral perplexity measured on both sides.
pub fn debias_run<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    vocab: &Vocab,
    mask: &ComponentMask,
    corpus: &[String],
    eval_sets: &BTreeMap<String, Vec<MinimalPair>>,
    neutral: &[String],
    config: &TrainConfig,
) -> Result<(DebiasReport, TrainOutcome<T>)> {
    let max_seq = checkpoint.config.max_seq;
    let neutral = encode_corpus(neutral, vocab, max_seq)?;
    let seqs = encode_corpus(corpus, vocab, max_seq)?;
    let before: Vec<f64> = eval_sets
        .values()
        .map(|pairs| preference_fraction(pairs, checkpoint, vocab))
        .collect::<Result<_>>()?;
    let perplexity_before = perplexity(checkpoint, &neutral)?;

    let outcome = train_lm_tokens(&seqs, checkpoint, mask, config)?;

    let mut preference = Vec::with_capacity(eval_sets.len());
    for ((name, pairs), before) in eval_sets.iter().zip(before) {
        preference.push(PreferenceRow {
            eval_set: name.clone(),
            before,
            after: preference_fraction(pairs, &outcome.checkpoint, vocab)?,
        });
    }
    let report = DebiasReport {
        mask: mask.to_string(),
        trainable_parameters: outcome.trainable_parameters,
        steps: outcome.steps,
        preference,
        perplexity_before,
        perplexity_after: perplexity(&outcome.checkpoint, &neutral)?,
        curve: outcome.curve.clone(),
        config: config.clone(),
    };
    Ok((report, outcome))
}
