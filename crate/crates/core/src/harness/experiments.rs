//! The experiment runners. Each fans out over samples with rayon and merges
//! rows in sample order, so reports do not depend on scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::data::{
    pair_counterfactual, CounterfactualPair, GenderWordFilter, PairingMode, Professions, PronounTokens, SpanMode,
    TemplateSample,
};
use super::report::{fraction, ExperimentReport};
use crate::error::{Error, Result};
use crate::metrics::{logit_lens, logit_order, MetricSpec, PronounTarget};
use crate::model::{Checkpoint, TokenId, Vocab};
use crate::patch::{
    attribution_patch, heads_to_layers, make_profession_patchset, patch_hooks, top_k, ActivationCache,
    AttributionQuery, AttributionScore, Capture, HookPoint, HookSite, PatchSpec, Position, SiteFamily,
};
use crate::tensor::Scalar;

/// Final-position readout of one (possibly patched) run.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Outcome {
    stereo: f64,
    anti: f64,
    reversed: bool,
}

fn score_final<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    tokens: &[TokenId],
    patches: &PatchSpec<T>,
    target: PronounTarget,
) -> Result<Outcome> {
    let out = checkpoint.run_with_patches(tokens, patches, &Capture::Nothing)?;
    let row = out.logits.row(tokens.len() - 1);
    Ok(Outcome {
        stereo: row[target.stereo].as_f64(),
        anti: row[target.anti].as_f64(),
        reversed: logit_order(row, target).is_reversed(),
    })
}

fn outcome_cells(o: &Result<Outcome>) -> [Value; 4] {
    match o {
        Ok(o) => [json!(o.stereo), json!(o.anti), json!(o.reversed), Value::Null],
        Err(e) => [Value::Null, Value::Null, Value::Null, json!(e.to_string())],
    }
}

fn corrupt_cache<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    pair: &CounterfactualPair,
    families: impl IntoIterator<Item = SiteFamily>,
) -> Result<Arc<ActivationCache<T>>> {
    let run = checkpoint.forward(&pair.corrupt.tokens, &Capture::families(families))?;
    Ok(Arc::new(run.cache))
}

fn layer_label(layers: &BTreeSet<usize>) -> String {
    if layers.is_empty() {
        return "none".into();
    }
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn check_layers<'a>(n_layers: usize, sets: impl IntoIterator<Item = &'a BTreeSet<usize>>) -> Result<()> {
    match sets.into_iter().flatten().find(|&&l| l >= n_layers) {
        Some(l) => Err(Error::Config(format!("layer {l} outside a {n_layers}-layer model"))),
        None => Ok(()),
    }
}

fn pair_cells(i: usize, pair: &CounterfactualPair) -> Vec<Value> {
    vec![
        json!(i),
        json!(pair.clean.template),
        json!(pair.clean.profession),
        json!(pair.clean.gender.as_str()),
        json!(pair.corrupt.profession),
    ]
}

const PAIR_COLUMNS: [&str; 5] = ["sample", "template", "profession", "gender", "corrupt_profession"];
const OUTCOME_COLUMNS: [&str; 4] = ["stereo_logit", "anti_logit", "reversed", "error"];

fn columns(middle: &[&'static str]) -> Vec<&'static str> {
    PAIR_COLUMNS
        .iter()
        .chain(middle)
        .chain(&OUTCOME_COLUMNS)
        .copied()
        .collect()
}

/// Counterfactual pairs for every sample that can be paired; failures are
/// returned with the sample index.
pub fn build_pairs(
    samples: &[TemplateSample],
    professions: &Professions,
    vocab: &Vocab,
    pronouns: PronounTokens,
    mode: PairingMode,
    alignment: SpanMode,
) -> (Vec<CounterfactualPair>, Vec<(usize, Error)>) {
    let mut pairs = Vec::with_capacity(samples.len());
    let mut failed = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match pair_counterfactual(s, professions, vocab, pronouns, mode, alignment) {
            Ok(p) => pairs.push(p),
            Err(e) => failed.push((i, e)),
        }
    }
    (pairs, failed)
}

/// Fraction of reversed outcomes among rows matching `select`.
fn reversed_fraction(report: &ExperimentReport, select: impl Fn(&[Value]) -> bool, column: &str) -> Option<f64> {
    let idx = report.column(column)?;
    fraction(report.rows.iter().filter(|r| select(r)).map(|r| &r[idx]))
}

fn put(report: &mut ExperimentReport, key: String, value: Option<f64>) {
    if let Some(v) = value {
        report.aggregates.insert(key, v);
    }
}

/// MLP-output patching at the profession span for each layer set.
pub fn exp_mlp_sweep<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    pairs: &[CounterfactualPair],
    layer_sets: &[BTreeSet<usize>],
    seed: u64,
) -> Result<ExperimentReport> {
    check_layers(checkpoint.config.n_layers, layer_sets)?;
    let config = json!({
        "layer_sets": layer_sets.iter().map(layer_label).collect::<Vec<_>>(),
        "family": SiteFamily::MlpOut.as_str(),
        "samples": pairs.len(),
    });
    let mut report = ExperimentReport::new("mlp_sweep", seed, config, &columns(&["alignment", "layers"]));
    let rows: Vec<Vec<Vec<Value>>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let corrupt = corrupt_cache(checkpoint, pair, [SiteFamily::MlpOut]);
            layer_sets
                .iter()
                .map(|layers| {
                    let outcome = corrupt.as_ref().map_err(|e| Error::Cache(e.to_string())).and_then(|c| {
                        let spec = if layers.is_empty() {
                            PatchSpec::new()
                        } else {
                            make_profession_patchset(pair, c, layers, SiteFamily::MlpOut)?
                        };
                        score_final(checkpoint, &pair.clean.tokens, &spec, pair.clean.target)
                    });
                    let mut row = pair_cells(i, pair);
                    row.push(json!(pair.alignment));
                    row.push(json!(layer_label(layers)));
                    row.extend(outcome_cells(&outcome));
                    row
                })
                .collect()
        })
        .collect();
    rows.into_iter().flatten().for_each(|r| report.push_row(r));

    let layers_col = report.column("layers").expect("column exists");
    for layers in layer_sets {
        let label = layer_label(layers);
        let v = reversed_fraction(&report, |r| r[layers_col] == json!(label), "reversed");
        put(&mut report, format!("reversed[{label}]"), v);
    }
    Ok(report)
}

/// Per-layer `max / median` of summed |score| across heads, averaged over
/// samples.
fn head_dispersion(scores: &[AttributionScore]) -> BTreeMap<usize, f64> {
    let mut per_head: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for s in scores {
        if let HookSite::AttnHeadOut(l, h) = s.hook.site {
            *per_head.entry((l, h)).or_default() += s.score.abs();
        }
    }
    let mut by_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((l, _), v) in per_head {
        by_layer.entry(l).or_default().push(v);
    }
    by_layer
        .into_iter()
        .filter_map(|(l, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let median = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            (median > 0.0).then(|| (l, v[n - 1] / median))
        })
        .collect()
}

fn hook_label(h: &HookPoint) -> String {
    match (h.site, h.position) {
        (HookSite::AttnHeadOut(l, hd), Position::At(p)) => format!("{l}.{hd}@{p}"),
        _ => h.to_string(),
    }
}

/// Attribution-ranked head patching: the top-k hooks directly, then every
/// layer those hooks touch as whole `attn_out` patches at the same positions.
pub fn exp_attn_topk<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    pairs: &[CounterfactualPair],
    k_values: &[usize],
    layer_ceiling: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if k_values.contains(&0) {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if layer_ceiling >= checkpoint.config.n_layers {
        return Err(Error::Config(format!(
            "layer ceiling {layer_ceiling} outside a {}-layer model",
            checkpoint.config.n_layers
        )));
    }
    let k_max = k_values.iter().copied().max().unwrap_or(1);
    let config = json!({ "k_values": k_values, "layer_ceiling": layer_ceiling, "samples": pairs.len() });
    let mut report = ExperimentReport::new(
        "attn_topk",
        seed,
        config,
        &[
            "sample",
            "template",
            "profession",
            "gender",
            "corrupt_profession",
            "k",
            "hooks",
            "layers",
            "n_layers",
            "direct_stereo_logit",
            "direct_anti_logit",
            "direct_reversed",
            "grouped_stereo_logit",
            "grouped_anti_logit",
            "grouped_reversed",
            "error",
        ],
    );
    type PairOut = (Vec<Vec<Value>>, BTreeMap<usize, f64>);
    let per_pair: Vec<PairOut> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let metric = MetricSpec::logit_diff(pair.clean.target);
            let query = AttributionQuery::heads(k_max, layer_ceiling);
            let prepared = attribution_patch(pair, checkpoint, &metric, &query).and_then(|scores| {
                Ok((
                    scores,
                    corrupt_cache(checkpoint, pair, [SiteFamily::AttnHeadOut, SiteFamily::AttnOut])?,
                ))
            });
            let (scores, corrupt) = match prepared {
                Ok(p) => p,
                Err(e) => {
                    let rows = k_values
                        .iter()
                        .map(|&k| {
                            let mut row = pair_cells(i, pair);
                            row.extend([json!(k), Value::Null, Value::Null, Value::Null]);
                            row.extend(std::iter::repeat_n(Value::Null, 6));
                            row.push(json!(e.to_string()));
                            row
                        })
                        .collect();
                    return (rows, BTreeMap::new());
                }
            };
            let positions: Vec<usize> = pair.clean.positions_after_span().collect();
            let rows = k_values
                .iter()
                .map(|&k| {
                    let top = top_k(&scores, k);
                    let layers = heads_to_layers(top, layer_ceiling);
                    let direct = patch_hooks(top, &corrupt)
                        .and_then(|spec| score_final(checkpoint, &pair.clean.tokens, &spec, pair.clean.target));
                    let grouped = (|| {
                        let mut spec = PatchSpec::new();
                        for &l in &layers {
                            for &p in &positions {
                                spec.push_counterfactual(
                                    HookPoint::at(HookSite::AttnOut(l), p),
                                    &corrupt,
                                    Position::At(p),
                                )?;
                            }
                        }
                        score_final(checkpoint, &pair.clean.tokens, &spec, pair.clean.target)
                    })();
                    let mut row = pair_cells(i, pair);
                    row.push(json!(k));
                    row.push(json!(top
                        .iter()
                        .map(|s| hook_label(&s.hook))
                        .collect::<Vec<_>>()
                        .join(";")));
                    row.push(json!(layer_label(&layers)));
                    row.push(json!(layers.len()));
                    let [ds, da, dr, de] = outcome_cells(&direct);
                    let [gs, ga, gr, ge] = outcome_cells(&grouped);
                    row.extend([ds, da, dr, gs, ga, gr]);
                    row.push(if de.is_null() { ge } else { de });
                    row
                })
                .collect();
            (rows, head_dispersion(&scores))
        })
        .collect();

    let mut dispersion: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (rows, disp) in per_pair {
        rows.into_iter().for_each(|r| report.push_row(r));
        for (l, v) in disp {
            let e = dispersion.entry(l).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    let k_col = report.column("k").expect("column exists");
    let n_col = report.column("n_layers").expect("column exists");
    for &k in k_values {
        let sel = |r: &[Value]| r[k_col] == json!(k);
        let v = reversed_fraction(&report, sel, "direct_reversed");
        put(&mut report, format!("direct_reversed[k={k}]"), v);
        let v = reversed_fraction(&report, sel, "grouped_reversed");
        put(&mut report, format!("grouped_reversed[k={k}]"), v);
        let counts: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| sel(r))
            .filter_map(|r| r[n_col].as_f64())
            .collect();
        if !counts.is_empty() {
            report.aggregates.insert(
                format!("mean_layers[k={k}]"),
                counts.iter().sum::<f64>() / counts.len() as f64,
            );
        }
    }
    for (l, (sum, n)) in dispersion {
        report
            .aggregates
            .insert(format!("head_max_over_median[layer={l}]"), sum / n as f64);
    }
    Ok(report)
}

/// Attribution scores next to the exact single-hook patching delta of every
/// head at every position right of the profession span, over at most
/// `max_pairs` seeded pairs. The `spearman` aggregate pools all hooks of all
/// pairs; `mean_pair_spearman` averages the per-pair correlations.
pub fn exp_attribution_oracle<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    pairs: &[CounterfactualPair],
    layer_ceiling: usize,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<ExperimentReport> {
    if layer_ceiling >= checkpoint.config.n_layers {
        return Err(Error::Config(format!(
            "layer ceiling {layer_ceiling} outside a {}-layer model",
            checkpoint.config.n_layers
        )));
    }
    let mut chosen: Vec<usize> = match max_pairs {
        Some(n) if n < pairs.len() => sample_indices(&mut ChaCha8Rng::seed_from_u64(seed), pairs.len(), n).into_vec(),
        _ => (0..pairs.len()).collect(),
    };
    chosen.sort_unstable();
    let config = json!({ "layer_ceiling": layer_ceiling, "pairs": chosen.len(), "max_pairs": max_pairs });
    let mut report = ExperimentReport::new(
        "attribution_oracle",
        seed,
        config,
        &["sample", "template", "profession", "hook", "attribution", "patch_delta"],
    );
    let per_pair: Vec<Result<Vec<(HookPoint, f64, f64)>>> = chosen
        .par_iter()
        .map(|&i| {
            let pair = &pairs[i];
            let metric = MetricSpec::logit_diff(pair.clean.target);
            let query = AttributionQuery::heads(usize::MAX, layer_ceiling);
            let scores = attribution_patch(pair, checkpoint, &metric, &query)?;
            let corrupt = corrupt_cache(checkpoint, pair, [SiteFamily::AttnHeadOut])?;
            let base = checkpoint.run_with_patches(&pair.clean.tokens, &PatchSpec::new(), &Capture::Nothing)?;
            let base = metric.value(&base.logits)?.as_f64();
            let mut hooks: Vec<AttributionScore> = scores;
            hooks.sort_by_key(|s| s.hook);
            hooks
                .iter()
                .map(|s| {
                    let spec = patch_hooks(std::slice::from_ref(s), &corrupt)?;
                    let out = checkpoint.run_with_patches(&pair.clean.tokens, &spec, &Capture::Nothing)?;
                    Ok((s.hook, s.score, metric.value(&out.logits)?.as_f64() - base))
                })
                .collect()
        })
        .collect();
    let (mut all_a, mut all_d, mut per_rho) = (Vec::new(), Vec::new(), Vec::new());
    for (&i, result) in chosen.iter().zip(per_pair) {
        let rows = result?;
        let (a, d): (Vec<f64>, Vec<f64>) = rows.iter().map(|&(_, a, d)| (a, d)).unzip();
        if let Ok(r) = crate::metrics::spearman(&a, &d) {
            per_rho.push(r);
        }
        for (hook, a, d) in rows {
            let pair = &pairs[i];
            report.push_row(vec![
                json!(i),
                json!(pair.clean.template),
                json!(pair.clean.profession),
                json!(hook_label(&hook)),
                json!(a),
                json!(d),
            ]);
        }
        all_a.extend(a);
        all_d.extend(d);
    }
    report.aggregates.insert("hooks".into(), all_a.len() as f64);
    if let Ok(r) = crate::metrics::spearman(&all_a, &all_d) {
        report.aggregates.insert("spearman".into(), r);
    }
    if !per_rho.is_empty() {
        report.aggregates.insert(
            "mean_pair_spearman".into(),
            per_rho.iter().sum::<f64>() / per_rho.len() as f64,
        );
    }
    Ok(report)
}

/// MLP-output patching at the final position for every layer ≥ `layer_floor`.
pub fn exp_upper_mlp<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    pairs: &[CounterfactualPair],
    layer_floor: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    let n_layers = checkpoint.config.n_layers;
    if layer_floor > n_layers {
        return Err(Error::Config(format!(
            "layer floor {layer_floor} above a {n_layers}-layer model"
        )));
    }
    let layers: BTreeSet<usize> = (layer_floor..n_layers).collect();
    let config = json!({ "layer_floor": layer_floor, "layers": layer_label(&layers), "samples": pairs.len() });
    let mut report = ExperimentReport::new("upper_mlp", seed, config, &columns(&["layers"]));
    let rows: Vec<Vec<Value>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let outcome = corrupt_cache(checkpoint, pair, [SiteFamily::MlpOut]).and_then(|corrupt| {
                let mut spec = PatchSpec::new();
                let (clean_last, corrupt_last) = (pair.clean.last(), pair.corrupt.last());
                for &l in &layers {
                    spec.push_counterfactual(
                        HookPoint::at(HookSite::MlpOut(l), clean_last),
                        &corrupt,
                        Position::At(corrupt_last),
                    )?;
                }
                score_final(checkpoint, &pair.clean.tokens, &spec, pair.clean.target)
            });
            let mut row = pair_cells(i, pair);
            row.push(json!(layer_label(&layers)));
            row.extend(outcome_cells(&outcome));
            row
        })
        .collect();
    rows.into_iter().for_each(|r| report.push_row(r));

    let v = reversed_fraction(&report, |_| true, "reversed");
    put(&mut report, "reversed".into(), v);
    let t_col = report.column("template").expect("column exists");
    let templates: BTreeSet<String> = report
        .rows
        .iter()
        .filter_map(|r| r[t_col].as_str().map(str::to_string))
        .collect();
    for t in templates {
        let sel = |r: &[Value]| r[t_col].as_str() == Some(t.as_str());
        let count = report.rows.iter().filter(|r| sel(r)).count();
        report.aggregates.insert(format!("count[{t}]"), count as f64);
        let v = reversed_fraction(&report, sel, "reversed");
        put(&mut report, format!("reversed[{t}]"), v);
    }
    Ok(report)
}

/// Residual-stream lens at the final position of each sample.
pub fn exp_logit_lens<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    samples: &[TemplateSample],
    seed: u64,
) -> Result<ExperimentReport> {
    let n_layers = checkpoint.config.n_layers;
    let mut cols: Vec<String> = [
        "sample",
        "template",
        "profession",
        "gender",
        "settled_layer",
        "final_lens_error",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..n_layers).map(|l| format!("diff_layer_{l}")));
    cols.push("error".into());
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let config = json!({ "samples": samples.len(), "position": "final" });
    let mut report = ExperimentReport::new("logit_lens", seed, config, &col_refs);
    let capture = Capture::families([SiteFamily::ResidPost]);
    let rows: Vec<Vec<Value>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![
                json!(i),
                json!(s.template),
                json!(s.profession),
                json!(s.gender.as_str()),
            ];
            let res = checkpoint.forward(&s.tokens, &capture).and_then(|run| {
                let lens = logit_lens(&run.cache, checkpoint, s.last(), s.target)?;
                let top = checkpoint.unembed_residual(run.cache.row(HookSite::ResidPost(n_layers - 1), s.last())?)?;
                let err = top
                    .row(0)
                    .iter()
                    .zip(run.logits.row(s.last()))
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                    .fold(0.0, f64::max);
                Ok((lens, err))
            });
            match res {
                Ok((lens, err)) => {
                    row.push(lens.settled_layer().map_or(Value::Null, |l| json!(l)));
                    row.push(json!(err));
                    row.extend(lens.diffs.iter().map(|d| json!(d)));
                    row.push(Value::Null);
                }
                Err(e) => {
                    row.extend(std::iter::repeat_n(Value::Null, 2 + n_layers));
                    row.push(json!(e.to_string()));
                }
            }
            row
        })
        .collect();
    rows.into_iter().for_each(|r| report.push_row(r));

    let settled: Vec<Option<u64>> = report.values("settled_layer").map(Value::as_u64).collect();
    let half = (n_layers / 2) as u64;
    if !settled.is_empty() {
        let by_half = settled.iter().filter(|s| s.is_some_and(|l| l <= half)).count();
        report
            .aggregates
            .insert("settled_by_half".into(), by_half as f64 / settled.len() as f64);
    }
    let max_err = report
        .values("final_lens_error")
        .filter_map(Value::as_f64)
        .fold(0.0, f64::max);
    report.aggregates.insert("max_final_lens_error".into(), max_err);
    Ok(report)
}

/// Span patch used by the generation check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanPatch {
    pub family: SiteFamily,
    pub layers: BTreeSet<usize>,
}

fn first_gendered_label(filter: &GenderWordFilter, text: &str) -> Value {
    filter.first_gendered(text).map_or(Value::Null, |g| json!(g.as_str()))
}

/// Greedy generations with and without a span patch on seeded reversal cases.
#[allow(clippy::too_many_arguments)]
pub fn exp_generation_check<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    vocab: &Vocab,
    pairs: &[CounterfactualPair],
    patch: &SpanPatch,
    filter: &GenderWordFilter,
    n_samples: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if n_tokens == 0 {
        return Err(Error::Config("generation needs at least one new token".into()));
    }
    check_layers(checkpoint.config.n_layers, [&patch.layers])?;
    let specs: Vec<Result<PatchSpec<T>>> = pairs
        .par_iter()
        .map(|pair| {
            let c = corrupt_cache(checkpoint, pair, [patch.family])?;
            make_profession_patchset(pair, &c, &patch.layers, patch.family)
        })
        .collect();
    let reversed: Vec<bool> = pairs
        .par_iter()
        .zip(&specs)
        .map(|(pair, spec)| {
            spec.as_ref()
                .ok()
                .and_then(|s| score_final(checkpoint, &pair.clean.tokens, s, pair.clean.target).ok())
                .is_some_and(|o| o.reversed)
        })
        .collect();
    let candidates: Vec<usize> = (0..pairs.len()).filter(|&i| reversed[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample_indices(&mut rng, candidates.len(), n_samples.min(candidates.len()))
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    chosen.sort_unstable();

    let config = json!({
        "family": patch.family.as_str(),
        "layers": layer_label(&patch.layers),
        "n_samples": n_samples,
        "n_tokens": n_tokens,
        "candidates": candidates.len(),
    });
    let mut report = ExperimentReport::new(
        "gen_check",
        seed,
        config,
        &[
            "sample",
            "template",
            "profession",
            "gender",
            "corrupt_profession",
            "prompt",
            "unpatched",
            "patched",
            "unpatched_repeat",
            "pronoun_unpatched",
            "pronoun_patched",
            "ambiguous",
            "pronoun_switched",
            "control_switched",
            "differs",
            "profession_retained",
            "error",
        ],
    );
    let empty = PatchSpec::new();
    let rows: Vec<Vec<Value>> = chosen
        .par_iter()
        .map(|&i| {
            let pair = &pairs[i];
            let mut row = pair_cells(i, pair);
            row.push(json!(pair.clean.prompt));
            let gens = (|| {
                let spec = specs[i].as_ref().map_err(|e| Error::Patch {
                    index: 0,
                    reason: e.to_string(),
                })?;
                let tokens = &pair.clean.tokens;
                let a = checkpoint.generate_greedy(tokens, n_tokens, &empty)?;
                let b = checkpoint.generate_greedy(tokens, n_tokens, spec)?;
                let c = checkpoint.generate_greedy(tokens, n_tokens, &empty)?;
                Ok::<_, Error>([a, b, c].map(|ids| vocab.detokenize(&ids)))
            })();
            match gens {
                Ok([plain, patched, repeat]) => {
                    let (pu, pp, pr) = (
                        first_gendered_label(filter, &plain),
                        first_gendered_label(filter, &patched),
                        first_gendered_label(filter, &repeat),
                    );
                    let ambiguous = pu.is_null() || pp.is_null();
                    let switched = if ambiguous { Value::Null } else { json!(pu != pp) };
                    let control = if pu.is_null() || pr.is_null() {
                        Value::Null
                    } else {
                        json!(pu != pr)
                    };
                    let retained = patched.contains(&pair.clean.profession);
                    let differs = plain != patched;
                    row.extend([json!(plain), json!(patched), json!(repeat), pu, pp]);
                    row.extend([
                        json!(ambiguous),
                        switched,
                        control,
                        json!(differs),
                        json!(retained),
                        Value::Null,
                    ]);
                }
                Err(e) => {
                    row.extend(std::iter::repeat_n(Value::Null, 11));
                    row.push(json!(e.to_string()));
                }
            }
            row
        })
        .collect();
    rows.into_iter().for_each(|r| report.push_row(r));

    report.aggregates.insert("candidates".into(), candidates.len() as f64);
    report.aggregates.insert("sampled".into(), chosen.len() as f64);
    let emitted = report.values("patched").filter(|v| v.is_string()).count();
    report.aggregates.insert("emitted".into(), emitted as f64);
    let ambiguous = report.values("ambiguous").filter(|v| v.as_bool() == Some(true)).count();
    report.aggregates.insert("ambiguous".into(), ambiguous as f64);
    let v = fraction(report.values("pronoun_switched"));
    put(&mut report, "pronoun_switched".into(), v);
    let v = fraction(report.values("control_switched"));
    put(&mut report, "control_switched".into(), v);
    let v = fraction(report.values("differs"));
    put(&mut report, "differs".into(), v);
    let v = fraction(report.values("profession_retained"));
    put(&mut report, "profession_retained".into(), v);
    Ok(report)
}

/// Where the feature probe patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeSite {
    /// The positions where the two prompts differ.
    Span,
    Final,
}

impl std::str::FromStr for ProbeSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(ProbeSite::Span),
            "final" => Ok(ProbeSite::Final),
            _ => Err(Error::Config(format!(
                "unknown probe site {s:?}; expected span or final"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub id: TokenId,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProbe {
    pub diff_positions: Vec<usize>,
    pub patched: Vec<String>,
    pub before: Vec<RankedToken>,
    pub after: Vec<RankedToken>,
    pub entered: Vec<String>,
    pub left: Vec<String>,
}

fn ranked<T: Scalar>(row: &[T], vocab: &Vocab, top_n: usize) -> Vec<RankedToken> {
    let probs = crate::metrics::softmax_f64(row);
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids.truncate(top_n);
    ids.into_iter()
        .map(|id| RankedToken {
            token: vocab.token(id).map_or_else(|| format!("<0x{id:02x}>"), str::to_string),
            id,
            prob: probs[id],
        })
        .collect()
}

/// Top-n next tokens at the final position before and after patching
/// `family` at `layers` with the counter prompt's activations.
#[allow(clippy::too_many_arguments)]
pub fn exp_feature_probe<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    vocab: &Vocab,
    prompt: &str,
    counter_prompt: &str,
    family: SiteFamily,
    layers: &BTreeSet<usize>,
    site: ProbeSite,
    top_n: usize,
) -> Result<FeatureProbe> {
    check_layers(checkpoint.config.n_layers, [layers])?;
    let a = vocab.encode(prompt);
    let b = vocab.encode(counter_prompt);
    if a.len() != b.len() {
        return Err(Error::Alignment(format!(
            "prompt has {} tokens, counter prompt has {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Alignment("empty prompt".into()));
    }
    let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    let positions = match site {
        ProbeSite::Span => diff.clone(),
        ProbeSite::Final => vec![a.len() - 1],
    };
    let counter = Arc::new(checkpoint.forward(&b, &Capture::families([family]))?.cache);
    let mut spec = PatchSpec::new();
    let mut patched = Vec::new();
    for &l in layers {
        for s in family.sites_at(l, checkpoint.config.n_heads) {
            for &p in &positions {
                let hook = HookPoint::at(s, p);
                patched.push(hook.to_string());
                spec.push_counterfactual(hook, &counter, Position::At(p))?;
            }
        }
    }
    let last = a.len() - 1;
    let before_run = checkpoint.forward(&a, &Capture::Nothing)?;
    let after_run = checkpoint.run_with_patches(&a, &spec, &Capture::Nothing)?;
    let before = ranked(before_run.logits.row(last), vocab, top_n);
    let after = ranked(after_run.logits.row(last), vocab, top_n);
    let names = |v: &[RankedToken]| v.iter().map(|t| t.token.clone()).collect::<BTreeSet<_>>();
    let (nb, na) = (names(&before), names(&after));
    Ok(FeatureProbe {
        diff_positions: diff,
        patched,
        entered: after
            .iter()
            .filter(|t| !nb.contains(&t.token))
            .map(|t| t.token.clone())
            .collect(),
        left: before
            .iter()
            .filter(|t| !na.contains(&t.token))
            .map(|t| t.token.clone())
            .collect(),
        before,
        after,
    })
}

impl FeatureProbe {
    pub fn to_report(&self, config: Value, seed: u64) -> ExperimentReport {
        let mut r = ExperimentReport::new(
            "feature_probe",
            seed,
            config,
            &["rank", "before_token", "before_prob", "after_token", "after_prob"],
        );
        for i in 0..self.before.len().max(self.after.len()) {
            let cell = |v: &[RankedToken]| {
                v.get(i)
                    .map_or((Value::Null, Value::Null), |t| (json!(t.token), json!(t.prob)))
            };
            let (bt, bp) = cell(&self.before);
            let (at, ap) = cell(&self.after);
            r.push_row(vec![json!(i + 1), bt, bp, at, ap]);
        }
        r.aggregates.insert("entered".into(), self.entered.len() as f64);
        r.aggregates.insert("left".into(), self.left.len() as f64);
        r.extra.insert("entered".into(), json!(self.entered));
        r.extra.insert("left".into(), json!(self.left));
        r.extra.insert("diff_positions".into(), json!(self.diff_positions));
        r.extra.insert("patched".into(), json!(self.patched));
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub original: String,
    pub perturbed: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<PerturbationRecord>,
    pub dropped: usize,
    pub malformed: usize,
}

/// Whether every word that differs between the two texts is a gendered word
/// swapped for one of the opposite gender, with at least one such swap.
pub fn is_gender_swap(record: &PerturbationRecord, filter: &GenderWordFilter) -> bool {
    let a: Vec<&str> = super::data::words(&record.original).collect();
    let b: Vec<&str> = super::data::words(&record.perturbed).collect();
    if a.len() != b.len() {
        return false;
    }
    let mut swaps = 0;
    for (x, y) in a.iter().zip(&b) {
        if x == y {
            continue;
        }
        match (filter.gender_of(x), filter.gender_of(y)) {
            (Some(g), Some(h)) if g != h => swaps += 1,
            _ => return false,
        }
    }
    swaps > 0
}

/// Keeps JSON-lines records whose edits are all binary gender-word swaps.
/// Blank lines are ignored; unparsable lines are counted as malformed.
pub fn filter_perturbation_corpus(text: &str, filter: &GenderWordFilter) -> FilterOutcome {
    let mut out = FilterOutcome {
        kept: Vec::new(),
        dropped: 0,
        malformed: 0,
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<PerturbationRecord>(line) {
            Ok(r) if is_gender_swap(&r, filter) => out.kept.push(r),
            Ok(_) => out.dropped += 1,
            Err(_) => out.malformed += 1,
        }
    }
    if out.malformed > 0 {
        log::warn!("skipped {} malformed perturbation records", out.malformed);
    }
    out
}

pub fn write_perturbation_records(records: &[PerturbationRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("strings serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{build_samples, default_templates, Gender};
    use crate::model::ModelConfig;
    use crate::trainer::toy_vocab;

    struct Fixture {
        ck: Checkpoint<f64>,
        vocab: Vocab,
        samples: Vec<TemplateSample>,
        pairs: Vec<CounterfactualPair>,
    }

    fn fixture() -> Fixture {
        let professions = Professions::shipped();
        let templates: Vec<String> = default_templates().into_iter().take(3).collect();
        let vocab = toy_vocab(&professions, &default_templates()).unwrap();
        let config = ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: vocab.len(),
            max_seq: 48,
            norm_eps: 1e-5,
            rope_base: 10000.0,
        };
        let ck = Checkpoint::init_random(config, 3).unwrap();
        let pron = PronounTokens::from_vocab(&vocab).unwrap();
        let samples = build_samples(&templates, &professions, &vocab, pron).unwrap();
        let (pairs, failed) = build_pairs(
            &samples,
            &professions,
            &vocab,
            pron,
            PairingMode::Anchor,
            SpanMode::AllTokens,
        );
        assert!(failed.is_empty());
        Fixture {
            ck,
            vocab,
            samples,
            pairs,
        }
    }

    fn unpatched_reversed(f: &Fixture, tokens: impl Fn(&CounterfactualPair) -> &[TokenId]) -> f64 {
        let hits = f
            .pairs
            .iter()
            .filter(|p| {
                let t = tokens(p);
                let out = f.ck.forward(t, &Capture::Nothing).unwrap();
                logit_order(out.logits.row(t.len() - 1), p.clean.target).is_reversed()
            })
            .count();
        hits as f64 / f.pairs.len() as f64
    }

    #[test]
    fn empty_layer_set_is_the_baseline() {
        let f = fixture();
        let r = exp_mlp_sweep(&f.ck, &f.pairs, &[BTreeSet::new()], 0).unwrap();
        assert_eq!(r.rows.len(), f.pairs.len());
        assert_eq!(
            r.aggregate("reversed[none]").unwrap(),
            unpatched_reversed(&f, |p| &p.clean.tokens)
        );
    }

    #[test]
    fn sweep_aggregates_recompute_from_rows() {
        let f = fixture();
        let sets = [BTreeSet::from([0]), BTreeSet::from([0, 1]), BTreeSet::from([0, 1, 2])];
        let r = exp_mlp_sweep(&f.ck, &f.pairs, &sets, 0).unwrap();
        assert_eq!(r.rows.len(), 3 * f.pairs.len());
        let (lc, rc) = (r.column("layers").unwrap(), r.column("reversed").unwrap());
        for label in ["0", "0;1", "0;1;2"] {
            let sel: Vec<bool> = r
                .rows
                .iter()
                .filter(|row| row[lc] == json!(label))
                .map(|row| row[rc].as_bool().unwrap())
                .collect();
            let frac = sel.iter().filter(|&&b| b).count() as f64 / sel.len() as f64;
            assert_eq!(r.aggregate(&format!("reversed[{label}]")).unwrap(), frac);
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let f = fixture();
        let sets = [BTreeSet::from([0, 1])];
        let a = exp_mlp_sweep(&f.ck, &f.pairs, &sets, 5).unwrap();
        let b = exp_mlp_sweep(&f.ck, &f.pairs, &sets, 5).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn upper_mlp_floor_at_depth_is_baseline_and_templates_partition() {
        let f = fixture();
        let n = f.ck.config.n_layers;
        let r = exp_upper_mlp(&f.ck, &f.pairs, n, 0).unwrap();
        assert_eq!(
            r.aggregate("reversed").unwrap(),
            unpatched_reversed(&f, |p| &p.clean.tokens)
        );
        let r = exp_upper_mlp(&f.ck, &f.pairs, 1, 0).unwrap();
        let total: f64 = r
            .aggregates
            .iter()
            .filter(|(k, _)| k.starts_with("count["))
            .map(|(_, v)| v)
            .sum();
        assert_eq!(total as usize, f.pairs.len());
        assert!(exp_upper_mlp(&f.ck, &f.pairs, n + 1, 0).is_err());
    }

    #[test]
    fn saturating_k_groups_every_layer_and_reproduces_the_corrupt_order() {
        let f = fixture();
        let ceiling = f.ck.config.n_layers - 1;
        let r = exp_attn_topk(&f.ck, &f.pairs, &[1, 10_000], ceiling, 0).unwrap();
        assert_eq!(r.aggregate("mean_layers[k=10000]").unwrap(), (ceiling + 1) as f64);
        assert_eq!(r.aggregate("mean_layers[k=1]").unwrap(), 1.0);
        // Every attention output right of the span comes from the corrupt run,
        // so those positions replay the corrupt run exactly.
        let grouped = r.aggregate("grouped_reversed[k=10000]").unwrap();
        assert_eq!(grouped, unpatched_reversed(&f, |p| &p.corrupt.tokens));
        assert!(r.aggregates.keys().any(|k| k.starts_with("head_max_over_median")));
        assert!(exp_attn_topk(&f.ck, &f.pairs, &[0], ceiling, 0).is_err());
    }

    #[test]
    fn lens_final_layer_matches_logits() {
        let f = fixture();
        let r = exp_logit_lens(&f.ck, &f.samples, 0).unwrap();
        assert_eq!(r.rows.len(), f.samples.len());
        assert!(r.aggregate("max_final_lens_error").unwrap() < 1e-10);
        let settled = r.aggregate("settled_by_half").unwrap();
        assert!((0.0..=1.0).contains(&settled));
    }

    #[test]
    fn generation_control_never_switches() {
        let f = fixture();
        let filter = GenderWordFilter::shipped();
        let patch = SpanPatch {
            family: SiteFamily::MlpOut,
            layers: [0, 1, 2].into(),
        };
        let r = exp_generation_check(&f.ck, &f.vocab, &f.pairs, &patch, &filter, 5, 6, 1).unwrap();
        let sampled = r.aggregate("sampled").unwrap();
        assert!(sampled <= 5.0);
        assert_eq!(r.aggregate("emitted").unwrap(), sampled);
        if let Ok(c) = r.aggregate("control_switched") {
            assert_eq!(c, 0.0);
        }
        let again = exp_generation_check(&f.ck, &f.vocab, &f.pairs, &patch, &filter, 5, 6, 1).unwrap();
        assert_eq!(r.to_csv().unwrap(), again.to_csv().unwrap());
        assert!(exp_generation_check(&f.ck, &f.vocab, &f.pairs, &patch, &filter, 5, 0, 1).is_err());
    }

    #[test]
    fn feature_probe_edge_cases() {
        let f = fixture();
        let p = "Cleaning the dishes is the duty of the";
        let layers = BTreeSet::from([0]);
        let same = exp_feature_probe(&f.ck, &f.vocab, p, p, SiteFamily::MlpOut, &layers, ProbeSite::Span, 10).unwrap();
        assert_eq!(same.before, same.after);
        assert!(same.entered.is_empty() && same.left.is_empty() && same.diff_positions.is_empty());

        let q = "Cleaning the car is the duty of the";
        let all = exp_feature_probe(
            &f.ck,
            &f.vocab,
            p,
            q,
            SiteFamily::MlpOut,
            &layers,
            ProbeSite::Span,
            100_000,
        )
        .unwrap();
        assert_eq!(all.before.len(), f.vocab.len());
        assert!(all.before.windows(2).all(|w| w[0].prob >= w[1].prob));
        assert_eq!(all.diff_positions, vec![2]);

        let err = exp_feature_probe(
            &f.ck,
            &f.vocab,
            p,
            "Cleaning the",
            SiteFamily::MlpOut,
            &layers,
            ProbeSite::Span,
            5,
        );
        assert!(matches!(err, Err(Error::Alignment(_))));
    }

    #[test]
    fn attribution_oracle_covers_every_head_hook() {
        let f = fixture();
        let r = exp_attribution_oracle(&f.ck, &f.pairs, 2, Some(4), 0).unwrap();
        let per_pair: usize = r
            .rows
            .iter()
            .map(|row| row[0].as_u64().unwrap())
            .collect::<BTreeSet<_>>()
            .len();
        assert_eq!(per_pair, 4);
        let expected: usize = {
            let ids: BTreeSet<u64> = r.rows.iter().map(|row| row[0].as_u64().unwrap()).collect();
            ids.iter()
                .map(|&i| f.pairs[i as usize].clean.positions_after_span().len() * 3 * 2)
                .sum()
        };
        assert_eq!(r.rows.len(), expected);
        assert!(r.aggregate("spearman").unwrap().abs() <= 1.0);
    }

    fn record(a: &str, b: &str) -> String {
        serde_json::to_string(&PerturbationRecord {
            original: a.into(),
            perturbed: b.into(),
        })
        .unwrap()
    }

    #[test]
    fn perturbation_filter() {
        let filter = GenderWordFilter::shipped();
        let text = [
            record("He had no passion about anything", "She had no passion about anything"),
            record("John went home", "Mary went home"),
            record("his dog", "her dog"),
            record("the man and his son", "the woman and her son"),
            "not json".to_string(),
            record("he ran", "he ran"),
        ]
        .join("\n");
        let once = filter_perturbation_corpus(&text, &filter);
        assert_eq!(once.kept.len(), 3);
        assert_eq!((once.dropped, once.malformed), (2, 1));
        assert_eq!(once.kept[0].perturbed, "She had no passion about anything");
        let twice = filter_perturbation_corpus(&write_perturbation_records(&once.kept), &filter);
        assert_eq!(twice.kept, once.kept);
        assert_eq!((twice.dropped, twice.malformed), (0, 0));
    }

    #[test]
    fn pairs_cross_genders() {
        let f = fixture();
        for p in &f.pairs {
            assert_ne!(p.clean.gender, p.corrupt.gender);
            assert_eq!(p.clean.tokens.len(), p.corrupt.tokens.len());
            let anchor = if p.clean.gender == Gender::Female {
                "wrestler"
            } else {
                "nanny"
            };
            if p.clean.span.len() == 1 {
                assert_eq!(p.corrupt.profession, anchor);
            }
        }
    }

    #[test]
    fn out_of_range_layers_are_config_errors() {
        let f = fixture();
        let err = exp_mlp_sweep(&f.ck, &f.pairs, &[BTreeSet::from([0, 3])], 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let patch = SpanPatch {
            family: SiteFamily::MlpOut,
            layers: [7].into(),
        };
        let err = exp_generation_check(&f.ck, &f.vocab, &f.pairs, &patch, &GenderWordFilter::shipped(), 2, 3, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
