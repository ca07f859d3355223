//! Prompt data, counterfactual pairing and the experiment runners.

mod data;
mod experiments;
mod report;

pub(crate) use data::words;

pub use data::{
    build_samples, default_templates, load_templates, pair_counterfactual, parse_templates, CounterfactualPair, Gender,
    GenderWordFilter, PairingMode, Professions, PronounTokens, SpanMode, TemplateSample, DEFAULT_GENDER_FILTER,
    DEFAULT_PROFESSIONS, DEFAULT_TEMPLATES, FEMALE_ANCHOR, MALE_ANCHOR, PLACEHOLDER,
};
pub use experiments::{
    build_pairs, exp_attn_topk, exp_attribution_oracle, exp_feature_probe, exp_generation_check, exp_logit_lens,
    exp_mlp_sweep, exp_upper_mlp, filter_perturbation_corpus, is_gender_swap, write_perturbation_records, FeatureProbe,
    FilterOutcome, PerturbationRecord, ProbeSite, RankedToken, SpanPatch,
};
pub use report::{emit_report, ExperimentReport, ARTIFACT_VERSION};
