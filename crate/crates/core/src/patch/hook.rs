use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// An addressable activation inside the forward pass. Every site is
/// `d_model` wide; per-head outputs are taken after the head's `W_O` slice so
/// heads sum to `attn_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HookSite {
    ResidPre(usize),
    AttnHeadOut(usize, usize),
    AttnOut(usize),
    MlpOut(usize),
    ResidPost(usize),
}

/// Family of a site, without indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteFamily {
    ResidPre,
    ResidPost,
    AttnOut,
    AttnHeadOut,
    MlpOut,
}

impl SiteFamily {
    /// Every site of this family at `layer`.
    pub fn sites_at(self, layer: usize, n_heads: usize) -> Vec<HookSite> {
        match self {
            SiteFamily::ResidPre => vec![HookSite::ResidPre(layer)],
            SiteFamily::ResidPost => vec![HookSite::ResidPost(layer)],
            SiteFamily::AttnOut => vec![HookSite::AttnOut(layer)],
            SiteFamily::MlpOut => vec![HookSite::MlpOut(layer)],
            SiteFamily::AttnHeadOut => (0..n_heads).map(|h| HookSite::AttnHeadOut(layer, h)).collect(),
        }
    }
}

impl SiteFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteFamily::ResidPre => "resid_pre",
            SiteFamily::ResidPost => "resid_post",
            SiteFamily::AttnOut => "attn_out",
            SiteFamily::AttnHeadOut => "attn_head_out",
            SiteFamily::MlpOut => "mlp_out",
        }
    }
}

impl fmt::Display for SiteFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SiteFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resid_pre" => SiteFamily::ResidPre,
            "resid_post" => SiteFamily::ResidPost,
            "attn_out" => SiteFamily::AttnOut,
            "attn_head_out" => SiteFamily::AttnHeadOut,
            "mlp_out" => SiteFamily::MlpOut,
            other => return Err(Error::Hook(format!("unknown site family {other:?}"))),
        })
    }
}

impl HookSite {
    pub fn layer(self) -> usize {
        match self {
            HookSite::ResidPre(l)
            | HookSite::ResidPost(l)
            | HookSite::AttnOut(l)
            | HookSite::MlpOut(l)
            | HookSite::AttnHeadOut(l, _) => l,
        }
    }

    pub fn family(self) -> SiteFamily {
        match self {
            HookSite::ResidPre(_) => SiteFamily::ResidPre,
            HookSite::ResidPost(_) => SiteFamily::ResidPost,
            HookSite::AttnOut(_) => SiteFamily::AttnOut,
            HookSite::AttnHeadOut(..) => SiteFamily::AttnHeadOut,
            HookSite::MlpOut(_) => SiteFamily::MlpOut,
        }
    }

    pub fn validate(self, config: &ModelConfig) -> Result<()> {
        if self.layer() >= config.n_layers {
            return Err(Error::Hook(format!(
                "{self}: layer out of range for {} layers",
                config.n_layers
            )));
        }
        if let HookSite::AttnHeadOut(_, h) = self {
            if h >= config.n_heads {
                return Err(Error::Hook(format!(
                    "{self}: head out of range for {} heads",
                    config.n_heads
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookSite::ResidPre(l) => write!(f, "resid_pre.{l}"),
            HookSite::ResidPost(l) => write!(f, "resid_post.{l}"),
            HookSite::AttnOut(l) => write!(f, "attn_out.{l}"),
            HookSite::AttnHeadOut(l, h) => write!(f, "attn_head_out.{l}.{h}"),
            HookSite::MlpOut(l) => write!(f, "mlp_out.{l}"),
        }
    }
}

fn parse_index(s: &str, what: &str, full: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Hook(format!("{full:?}: bad {what} index {s:?}")))
}

impl FromStr for HookSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let site = match parts.as_slice() {
            ["resid_pre", l] => HookSite::ResidPre(parse_index(l, "layer", s)?),
            ["resid_post", l] => HookSite::ResidPost(parse_index(l, "layer", s)?),
            ["attn_out", l] => HookSite::AttnOut(parse_index(l, "layer", s)?),
            ["mlp_out", l] => HookSite::MlpOut(parse_index(l, "layer", s)?),
            ["attn_head_out", l, h] => HookSite::AttnHeadOut(parse_index(l, "layer", s)?, parse_index(h, "head", s)?),
            _ => return Err(Error::Hook(format!("unrecognised hook {s:?}"))),
        };
        Ok(site)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    At(usize),
    All,
}

impl Position {
    pub fn overlaps(self, other: Position) -> bool {
        match (self, other) {
            (Position::All, _) | (_, Position::All) => true,
            (Position::At(a), Position::At(b)) => a == b,
        }
    }
}

/// A site at a token position (or every position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookPoint {
    pub site: HookSite,
    pub position: Position,
}

impl HookPoint {
    pub fn new(site: HookSite, position: Position) -> Self {
        Self { site, position }
    }

    pub fn at(site: HookSite, pos: usize) -> Self {
        Self::new(site, Position::At(pos))
    }

    pub fn all(site: HookSite) -> Self {
        Self::new(site, Position::All)
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        self.site.validate(config)?;
        if let Position::At(p) = self.position {
            if p >= seq_len {
                return Err(Error::Hook(format!(
                    "{self}: position out of range for {seq_len} tokens"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position {
            Position::At(p) => write!(f, "{}@{p}", self.site),
            Position::All => write!(f, "{}@*", self.site),
        }
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    /// Accepts `site@pos`, `site@*`, or a bare site (all positions).
    fn from_str(s: &str) -> Result<Self> {
        let (site, pos) = match s.split_once('@') {
            Some((site, "*")) => (site, Position::All),
            Some((site, p)) => (site, Position::At(parse_index(p, "position", s)?)),
            None => (s, Position::All),
        };
        Ok(HookPoint::new(site.parse()?, pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_documented_syntax() {
        let hp: HookPoint = "attn_head_out.3.1@7".parse().unwrap();
        assert_eq!(hp, HookPoint::at(HookSite::AttnHeadOut(3, 1), 7));
        let hp: HookPoint = "mlp_out.0@*".parse().unwrap();
        assert_eq!(hp, HookPoint::all(HookSite::MlpOut(0)));
        assert!("mlp_out.x@1".parse::<HookPoint>().is_err());
        assert!("attn_head_out.1@2".parse::<HookPoint>().is_err());
        assert!("embed.0".parse::<HookSite>().is_err());
    }

    #[test]
    fn validation_bounds() {
        let cfg = ModelConfig::tiny_for_tests();
        assert!(HookSite::MlpOut(cfg.n_layers).validate(&cfg).is_err());
        assert!(HookSite::AttnHeadOut(0, cfg.n_heads).validate(&cfg).is_err());
        assert!(HookPoint::at(HookSite::MlpOut(0), 5).validate(&cfg, 5).is_err());
        assert!(HookPoint::all(HookSite::MlpOut(0)).validate(&cfg, 5).is_ok());
    }

    fn any_site() -> impl Strategy<Value = HookSite> {
        prop_oneof![
            (0..64usize).prop_map(HookSite::ResidPre),
            (0..64usize).prop_map(HookSite::ResidPost),
            (0..64usize).prop_map(HookSite::AttnOut),
            (0..64usize).prop_map(HookSite::MlpOut),
            (0..64usize, 0..64usize).prop_map(|(l, h)| HookSite::AttnHeadOut(l, h)),
        ]
    }

    proptest! {
        #[test]
        fn display_parse_round_trip(site in any_site(), pos in proptest::option::of(0..512usize)) {
            let hp = HookPoint::new(site, pos.map_or(Position::All, Position::At));
            prop_assert_eq!(hp.to_string().parse::<HookPoint>().unwrap(), hp);
        }
    }
}
