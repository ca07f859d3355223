use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, RunOutput, RunRequest, TokenId};
use crate::patch::{ActivationCache, Capture, HookPoint, HookSite, Position};
use crate::tensor::{c, Scalar};

/// Where a patched activation comes from.
#[derive(Debug, Clone)]
pub enum AblationSource<T> {
    /// Another run's activation at the same site. `position` addresses the
    /// source row; `Position::All` aligns positions one-to-one.
    Counterfactual {
        cache: Arc<ActivationCache<T>>,
        position: Position,
    },
    Zero,
    /// Mean of the site's activation over every row of every supplied cache.
    Mean(Arc<Vec<ActivationCache<T>>>),
}

#[derive(Debug, Clone)]
pub struct PatchEntry<T> {
    pub hook: HookPoint,
    pub source: AblationSource<T>,
}

/// A set of interventions, disjoint by (site, position).
#[derive(Debug, Clone)]
pub struct PatchSpec<T> {
    entries: Vec<PatchEntry<T>>,
}

impl<T> Default for PatchSpec<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> PatchSpec<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = PatchEntry<T>>) -> Result<Self> {
        let mut spec = Self::new();
        for e in entries {
            spec.push(e)?;
        }
        Ok(spec)
    }

    pub fn push(&mut self, entry: PatchEntry<T>) -> Result<()> {
        if let Some(i) = self
            .entries
            .iter()
            .position(|e| e.hook.site == entry.hook.site && e.hook.position.overlaps(entry.hook.position))
        {
            return Err(Error::Patch {
                index: self.entries.len(),
                reason: format!("{} overlaps entry {i} ({})", entry.hook, self.entries[i].hook),
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Counterfactual patch of `hook` from `cache` at `source_pos`.
    pub fn push_counterfactual(
        &mut self,
        hook: HookPoint,
        cache: &Arc<ActivationCache<T>>,
        source_pos: Position,
    ) -> Result<()> {
        self.push(PatchEntry {
            hook,
            source: AblationSource::Counterfactual {
                cache: Arc::clone(cache),
                position: source_pos,
            },
        })
    }

    pub fn merge(mut self, other: PatchSpec<T>) -> Result<Self> {
        for e in other.entries {
            self.push(e)?;
        }
        Ok(self)
    }

    pub fn entries(&self) -> &[PatchEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest explicit target position, if any.
    pub fn max_position(&self) -> Option<usize> {
        self.entries
            .iter()
            .filter_map(|e| match e.hook.position {
                Position::At(p) => Some(p),
                Position::All => None,
            })
            .max()
    }

    /// Resolves every source into concrete replacement values.
    pub(crate) fn resolve(&self, checkpoint: &Checkpoint<T>, seq_len: usize) -> Result<PatchPlan<T>> {
        let d = checkpoint.config.d_model;
        let mut by_site: HashMap<HookSite, Vec<(Position, Vec<T>)>> = HashMap::new();
        for (index, e) in self.entries.iter().enumerate() {
            let err = |reason: String| Error::Patch { index, reason };
            e.hook
                .validate(&checkpoint.config, seq_len)
                .map_err(|x| err(x.to_string()))?;
            let rows = match e.hook.position {
                Position::At(_) => 1,
                Position::All => seq_len,
            };
            let values = match &e.source {
                AblationSource::Zero => vec![T::zero(); rows * d],
                AblationSource::Counterfactual { cache, position } => {
                    if cache.width() != d {
                        return Err(err(format!("source width {} != site width {d}", cache.width())));
                    }
                    let src = cache
                        .get(e.hook.site)
                        .ok_or_else(|| err(format!("source cache has no {}", e.hook.site)))?;
                    match (e.hook.position, *position) {
                        (Position::At(_), Position::At(q)) => {
                            if q >= cache.seq_len() {
                                return Err(err(format!(
                                    "source position {q} beyond source length {}",
                                    cache.seq_len()
                                )));
                            }
                            src.row(q).to_vec()
                        }
                        (Position::At(p), Position::All) => {
                            if p >= cache.seq_len() {
                                return Err(err(format!(
                                    "aligned source position {p} beyond source length {}",
                                    cache.seq_len()
                                )));
                            }
                            src.row(p).to_vec()
                        }
                        (Position::All, Position::All) => {
                            if cache.seq_len() != seq_len {
                                return Err(err(format!(
                                    "source has {} positions, target has {seq_len}",
                                    cache.seq_len()
                                )));
                            }
                            src.data().to_vec()
                        }
                        (Position::All, Position::At(q)) => {
                            return Err(err(format!(
                                "cannot patch every position from single source position {q}"
                            )))
                        }
                    }
                }
                AblationSource::Mean(caches) => {
                    let mut mean = vec![T::zero(); d];
                    let mut count = 0usize;
                    for cache in caches.iter() {
                        if cache.width() != d {
                            return Err(err(format!("mean source width {} != site width {d}", cache.width())));
                        }
                        let t = cache
                            .get(e.hook.site)
                            .ok_or_else(|| err(format!("mean source cache has no {}", e.hook.site)))?;
                        for r in 0..t.rows() {
                            for (m, &v) in mean.iter_mut().zip(t.row(r)) {
                                *m += v;
                            }
                            count += 1;
                        }
                    }
                    if count == 0 {
                        return Err(err("mean ablation over an empty cache set".into()));
                    }
                    let inv = T::one() / c::<T>(count as f64);
                    mean.iter_mut().for_each(|m| *m *= inv);
                    mean.repeat(rows)
                }
            };
            by_site.entry(e.hook.site).or_default().push((e.hook.position, values));
        }
        Ok(PatchPlan { by_site })
    }
}

/// Concrete replacement rows keyed by site.
#[derive(Debug, Clone, Default)]
pub(crate) struct PatchPlan<T> {
    by_site: HashMap<HookSite, Vec<(Position, Vec<T>)>>,
}

impl<T: Scalar> PatchPlan<T> {
    pub(crate) fn apply(&self, site: HookSite, buf: &mut [T], seq: usize) -> Result<()> {
        let Some(reps) = self.by_site.get(&site) else {
            return Ok(());
        };
        let d = buf.len() / seq.max(1);
        for (index, (pos, values)) in reps.iter().enumerate() {
            match *pos {
                Position::At(p) => {
                    if p >= seq || values.len() != d {
                        return Err(Error::Patch {
                            index,
                            reason: format!("{site}@{p} does not fit a run of {seq}×{d}"),
                        });
                    }
                    buf[p * d..(p + 1) * d].copy_from_slice(values);
                }
                Position::All => {
                    if values.len() != buf.len() {
                        return Err(Error::Patch {
                            index,
                            reason: format!("{site}@* does not fit a run of {seq}×{d}"),
                        });
                    }
                    buf.copy_from_slice(values);
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Forward pass with every entry of `patches` substituted at its site
    /// before downstream use.
    pub fn run_with_patches(
        &self,
        tokens: &[TokenId],
        patches: &PatchSpec<T>,
        capture: &Capture,
    ) -> Result<RunOutput<T>> {
        let plan = patches.resolve(self, tokens.len())?;
        let raw = self.run_raw(
            tokens,
            None,
            &RunRequest {
                plan: Some(&plan),
                capture,
                tape: false,
                gates: None,
            },
        )?;
        Ok(RunOutput {
            logits: raw.logits,
            cache: raw.cache,
        })
    }
}
