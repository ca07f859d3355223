//! Masked AdamW training, synthetic biased corpora and targeted debiasing.

mod debias;
mod mask;
mod optim;
mod synth;
mod toy;
mod train;

pub use debias::{debias_run, DebiasReport, PreferenceRow};
pub use mask::{mask_parameters, parse_layer_set, trainable_count, ComponentMask, Region};
pub use optim::{adamw_step, OptimizerState, TrainConfig};
pub use synth::{
    gen_synth_corpus, gendered_token_groups, object_prompt, toy_config, toy_init, toy_train_mask, toy_vocab,
    ProfessionLine, SynthCorpus, SynthCorpusSpec, FEMALE_OBJECTS, FEMALE_PERSONS, MALE_OBJECTS, MALE_PERSONS,
    NEUTRAL_OBJECTS, OBJECT_TEMPLATE, SUBWORD_SPLITS,
};
pub use toy::{build_toy, ToyModel, ToyRecipe};
pub use train::{
    batch_gradient, encode_corpus, mean_nll, perplexity, split_validation, train_lm, train_lm_tokens,
    train_lm_tokens_with_dropout, ComponentDropout, EpochLoss, TrainOutcome,
};
