//! Hook points, activation caches and activation patching.

mod attribution;
mod cache;
mod hook;
mod spec;

pub use attribution::{
    attribution_from_caches, attribution_patch, heads_to_layers, make_profession_patchset, patch_hooks, top_k,
    AttributionQuery, AttributionScore,
};
pub use cache::{ActivationCache, Capture};
pub use hook::{HookPoint, HookSite, Position, SiteFamily};
pub use spec::{AblationSource, PatchEntry, PatchSpec};

pub(crate) use spec::PatchPlan;
