//! Profession-span patch sets and gradient-based attribution patching.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::CounterfactualPair;
use crate::metrics::MetricSpec;
use crate::model::Checkpoint;
use crate::patch::{
    AblationSource, ActivationCache, Capture, HookPoint, HookSite, PatchEntry, PatchSpec, Position, SiteFamily,
};
use crate::tensor::Scalar;

/// One entry per (site, aligned span position) for every site of `family` at
/// the given layers, sourced from `corrupt` at the aligned position.
pub fn make_profession_patchset<T: Scalar>(
    pair: &CounterfactualPair,
    corrupt: &Arc<ActivationCache<T>>,
    layers: &BTreeSet<usize>,
    family: SiteFamily,
) -> Result<PatchSpec<T>> {
    if !matches!(
        family,
        SiteFamily::MlpOut | SiteFamily::ResidPre | SiteFamily::AttnHeadOut
    ) {
        return Err(Error::Config(format!(
            "profession patch sets use mlp_out, resid_pre or attn_head_out, not {family}"
        )));
    }
    let positions = pair.aligned_positions();
    let mut spec = PatchSpec::new();
    for &layer in layers {
        let sites: Vec<HookSite> = corrupt
            .sites()
            .filter(|s| s.family() == family && s.layer() == layer)
            .collect();
        if sites.is_empty() {
            return Err(Error::Cache(format!(
                "corrupt cache has no {family} sites at layer {layer}"
            )));
        }
        for site in sites {
            for &(clean_pos, corrupt_pos) in &positions {
                spec.push_counterfactual(HookPoint::at(site, clean_pos), corrupt, Position::At(corrupt_pos))?;
            }
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionQuery {
    pub families: BTreeSet<SiteFamily>,
    /// Number of top hooks [`top_k`] keeps.
    pub k: usize,
    /// Highest layer included.
    pub layer_ceiling: usize,
    /// Explicit positions; `None` means every position right of the clean
    /// profession span.
    pub positions: Option<Vec<usize>>,
}

impl AttributionQuery {
    pub fn heads(k: usize, layer_ceiling: usize) -> Self {
        Self {
            families: BTreeSet::from([SiteFamily::AttnHeadOut]),
            k,
            layer_ceiling,
            positions: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub hook: HookPoint,
    pub score: f64,
}

/// `Σ (corrupt − clean) · grad` over the hook's row, for each hook, ranked by
/// descending signed score. Ties keep hook order.
pub fn attribution_from_caches<T: Scalar>(
    clean: &ActivationCache<T>,
    corrupt: &ActivationCache<T>,
    grads: &ActivationCache<T>,
    hooks: &[HookPoint],
) -> Result<Vec<AttributionScore>> {
    let mut scores = Vec::with_capacity(hooks.len());
    for &hook in hooks {
        let pos = match hook.position {
            Position::At(p) => p,
            Position::All => return Err(Error::Hook(format!("attribution needs a single position, got {hook}"))),
        };
        let a = clean.row(hook.site, pos)?;
        let b = corrupt.row(hook.site, pos)?;
        let g = grads.row(hook.site, pos)?;
        let score: f64 = a
            .iter()
            .zip(b)
            .zip(g)
            .map(|((&a, &b), &g)| (b - a).as_f64() * g.as_f64())
            .sum();
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("attribution score at {hook}")));
        }
        scores.push(AttributionScore { hook, score });
    }
    scores.sort_by(|x, y| y.score.total_cmp(&x.score));
    Ok(scores)
}

/// Attribution patching: one forward on the corrupt prompt, one forward and
/// one backward on the clean prompt.
pub fn attribution_patch<T: Scalar>(
    pair: &CounterfactualPair,
    checkpoint: &Checkpoint<T>,
    metric: &MetricSpec,
    query: &AttributionQuery,
) -> Result<Vec<AttributionScore>> {
    let (clean, corrupt) = (&pair.clean.tokens, &pair.corrupt.tokens);
    if clean.len() != corrupt.len() {
        return Err(Error::Alignment(format!(
            "clean has {} tokens, corrupt has {}",
            clean.len(),
            corrupt.len()
        )));
    }
    if query.layer_ceiling >= checkpoint.config.n_layers {
        return Err(Error::Config(format!(
            "layer ceiling {} outside a {}-layer model",
            query.layer_ceiling, checkpoint.config.n_layers
        )));
    }
    let positions: Vec<usize> = match &query.positions {
        Some(p) => p.clone(),
        None => pair.clean.positions_after_span().collect(),
    };
    let mut sites = BTreeSet::new();
    for l in 0..=query.layer_ceiling {
        for f in &query.families {
            sites.extend(f.sites_at(l, checkpoint.config.n_heads));
        }
    }
    let capture = Capture::Sites(sites.clone());
    let corrupt_run = checkpoint.forward(corrupt, &capture)?;
    let clean_run = checkpoint.backward_metric(clean, metric, &capture, false)?;
    let hooks: Vec<HookPoint> = sites
        .iter()
        .flat_map(|&s| positions.iter().map(move |&p| HookPoint::at(s, p)))
        .collect();
    attribution_from_caches(&clean_run.activations, &corrupt_run.cache, &clean_run.hooks, &hooks)
}

/// The first `k` entries of a ranked score list.
pub fn top_k(scores: &[AttributionScore], k: usize) -> &[AttributionScore] {
    &scores[..k.min(scores.len())]
}

/// Distinct layers at or below `layer_ceiling` holding at least one scored
/// hook.
pub fn heads_to_layers(scores: &[AttributionScore], layer_ceiling: usize) -> BTreeSet<usize> {
    scores
        .iter()
        .map(|s| s.hook.site.layer())
        .filter(|&l| l <= layer_ceiling)
        .collect()
}

/// Counterfactual entries for each scored hook.
pub fn patch_hooks<T: Scalar>(scores: &[AttributionScore], corrupt: &Arc<ActivationCache<T>>) -> Result<PatchSpec<T>> {
    PatchSpec::from_entries(scores.iter().map(|s| PatchEntry {
        hook: s.hook,
        source: AblationSource::Counterfactual {
            cache: Arc::clone(corrupt),
            position: Position::All,
        },
    }))
}
