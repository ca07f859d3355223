//! The reference toy model: a fixed recipe from synthetic corpus to trained
//! 4-layer checkpoint.

use serde::{Deserialize, Serialize};

use super::optim::TrainConfig;
use super::synth::{gen_synth_corpus, toy_config, toy_init, toy_train_mask, toy_vocab, SynthCorpus, SynthCorpusSpec};
use super::train::{encode_corpus, train_lm_tokens_with_dropout, ComponentDropout, EpochLoss};
use crate::error::Result;
use crate::model::{Checkpoint, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub corpus: SynthCorpusSpec,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub dropout: ComponentDropout,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            corpus: SynthCorpusSpec::default(),
            init_seed: 0,
            train: TrainConfig {
                learning_rate: 3e-3,
                weight_decay: 0.0,
                batch_size: 16,
                epochs: 5,
                validation_fraction: 0.05,
                ..TrainConfig::default()
            },
            dropout: ComponentDropout {
                head: 0.2,
                mlp: 0.5,
                mlp_layers: [2, 3].into(),
            },
        }
    }
}

impl ToyRecipe {
    pub fn with_bias(bias: f64) -> Self {
        let mut r = Self::default();
        r.corpus.bias = bias;
        r
    }
}

pub struct ToyModel {
    pub checkpoint: Checkpoint<f32>,
    pub vocab: Vocab,
    pub corpus: SynthCorpus,
    pub curve: Vec<EpochLoss>,
}

/// Generates the corpus, initializes and trains in `f32`. Deterministic for a
/// fixed recipe.
pub fn build_toy(recipe: &ToyRecipe) -> Result<ToyModel> {
    recipe.corpus.validate()?;
    let corpus = gen_synth_corpus(&recipe.corpus)?;
    let vocab = toy_vocab(&recipe.corpus.professions, &recipe.corpus.templates)?;
    let config = toy_config(vocab.len());
    let init = toy_init::<f32>(config.clone(), &vocab, &recipe.corpus.professions, recipe.init_seed)?;
    let seqs = encode_corpus(&corpus.lines, &vocab, config.max_seq)?;
    let out = train_lm_tokens_with_dropout(&seqs, &init, &toy_train_mask(&config), &recipe.train, &recipe.dropout)?;
    Ok(ToyModel {
        checkpoint: out.checkpoint,
        vocab,
        corpus,
        curve: out.curve,
    })
}
