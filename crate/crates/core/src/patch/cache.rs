use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::patch::hook::{HookPoint, HookSite, Position, SiteFamily};
use crate::tensor::{Scalar, Tensor};

/// Which sites a run should record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Capture {
    #[default]
    Nothing,
    Sites(BTreeSet<HookSite>),
    Families(BTreeSet<SiteFamily>),
    Everything,
}

impl Capture {
    pub fn sites(sites: impl IntoIterator<Item = HookSite>) -> Self {
        Capture::Sites(sites.into_iter().collect())
    }

    pub fn families(families: impl IntoIterator<Item = SiteFamily>) -> Self {
        Capture::Families(families.into_iter().collect())
    }

    pub fn contains(&self, site: HookSite) -> bool {
        match self {
            Capture::Nothing => false,
            Capture::Sites(s) => s.contains(&site),
            Capture::Families(f) => f.contains(&site.family()),
            Capture::Everything => true,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Capture::Nothing => true,
            Capture::Sites(s) => s.is_empty(),
            Capture::Families(f) => f.is_empty(),
            Capture::Everything => false,
        }
    }
}

/// Per-run recorded activations, one `[seq, d_model]` tensor per site.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T> {
    seq_len: usize,
    width: usize,
    map: BTreeMap<HookSite, Tensor<T>>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn new(seq_len: usize, width: usize) -> Self {
        Self {
            seq_len,
            width,
            map: BTreeMap::new(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, site: HookSite, value: Tensor<T>) -> Result<()> {
        if value.shape() != [self.seq_len, self.width] {
            return Err(Error::Cache(format!(
                "{site}: expected [{}, {}], got {:?}",
                self.seq_len,
                self.width,
                value.shape()
            )));
        }
        self.map.insert(site, value);
        Ok(())
    }

    pub fn get(&self, site: HookSite) -> Option<&Tensor<T>> {
        self.map.get(&site)
    }

    pub fn require(&self, site: HookSite) -> Result<&Tensor<T>> {
        self.get(site)
            .ok_or_else(|| Error::Cache(format!("{site} was not captured")))
    }

    /// The activation at a single position.
    pub fn row(&self, site: HookSite, pos: usize) -> Result<&[T]> {
        let t = self.require(site)?;
        if pos >= self.seq_len {
            return Err(Error::Cache(format!(
                "{site}@{pos}: run has {} positions",
                self.seq_len
            )));
        }
        Ok(t.row(pos))
    }

    /// The activation addressed by a hook point, as `[1, w]` or `[seq, w]`.
    pub fn point(&self, hp: HookPoint) -> Result<Tensor<T>> {
        match hp.position {
            Position::All => Ok(self.require(hp.site)?.clone()),
            Position::At(p) => {
                let row = self.row(hp.site, p)?;
                Tensor::new(vec![1, self.width], row.to_vec())
            }
        }
    }

    pub fn sites(&self) -> impl Iterator<Item = HookSite> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (HookSite, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}
