use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_layout, ModelConfig};

/// Which parameters a training run may change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentMask {
    Full,
    /// `W_gate`, `W_up`, `W_down` and `ln2.w` of each layer.
    MlpLayers(BTreeSet<usize>),
    /// The head's slices of `W_Q`, `W_K`, `W_V` and `W_O`.
    AttnHeads(BTreeSet<(usize, usize)>),
    /// Whole tensors by canonical name; empty freezes everything.
    Tensors(BTreeSet<String>),
}

/// A contiguous trainable range of one tensor, in elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    /// Index into the canonical tensor order.
    pub tensor: usize,
    pub start: usize,
    pub end: usize,
}

impl Region {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Trainable regions selected by `mask`, in canonical tensor order.
pub fn mask_parameters(config: &ModelConfig, mask: &ComponentMask) -> Result<Vec<Region>> {
    let layout = tensor_layout(config);
    let index = |name: &str| layout.iter().position(|(n, _)| n == name);
    let whole = |name: &str| -> Result<Region> {
        let i = index(name).ok_or_else(|| Error::Mask(format!("no tensor named {name:?}")))?;
        Ok(Region {
            name: name.to_string(),
            tensor: i,
            start: 0,
            end: layout[i].1.iter().product(),
        })
    };
    let mut regions = match mask {
        ComponentMask::Full => layout.iter().map(|(n, _)| whole(n)).collect::<Result<Vec<_>>>()?,
        ComponentMask::Tensors(names) => names.iter().map(|n| whole(n)).collect::<Result<Vec<_>>>()?,
        ComponentMask::MlpLayers(layers) => {
            if layers.is_empty() {
                return Err(Error::Mask("empty MLP layer set".into()));
            }
            let mut out = Vec::new();
            for &l in layers {
                if l >= config.n_layers {
                    return Err(Error::Mask(format!(
                        "MLP layer {l} outside a {}-layer model",
                        config.n_layers
                    )));
                }
                for t in ["ln2.w", "mlp.W_gate", "mlp.W_up", "mlp.W_down"] {
                    out.push(whole(&format!("blocks.{l}.{t}"))?);
                }
            }
            out
        }
        ComponentMask::AttnHeads(heads) => {
            if heads.is_empty() {
                return Err(Error::Mask("empty head set".into()));
            }
            let slice = config.d_model * config.d_head;
            let mut out = Vec::new();
            for &(l, h) in heads {
                if l >= config.n_layers || h >= config.n_heads {
                    return Err(Error::Mask(format!(
                        "head ({l}, {h}) outside {} layers × {} heads",
                        config.n_layers, config.n_heads
                    )));
                }
                for t in ["attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O"] {
                    let name = format!("blocks.{l}.{t}");
                    let w = whole(&name)?;
                    out.push(Region {
                        start: h * slice,
                        end: (h + 1) * slice,
                        ..w
                    });
                }
            }
            out
        }
    };
    regions.sort_by_key(|r| (r.tensor, r.start));
    Ok(regions)
}

pub fn trainable_count(regions: &[Region]) -> usize {
    regions.iter().map(Region::len).sum()
}

/// Parses `full`, `mlp:0..4`, `mlp:0,2`, `heads:1.2,3.0` or `none`.
impl FromStr for ComponentMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Mask(format!("cannot parse mask {s:?}"));
        match s.split_once(':') {
            None if s == "full" => Ok(ComponentMask::Full),
            None if s == "none" => Ok(ComponentMask::Tensors(BTreeSet::new())),
            Some(("mlp", rest)) => Ok(ComponentMask::MlpLayers(parse_layer_set(rest)?)),
            Some(("heads", rest)) => {
                let mut heads = BTreeSet::new();
                for item in rest.split(',').filter(|x| !x.is_empty()) {
                    let (l, h) = item.split_once('.').ok_or_else(bad)?;
                    heads.insert((l.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?));
                }
                Ok(ComponentMask::AttnHeads(heads))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(",");
        match self {
            ComponentMask::Full => f.write_str("full"),
            ComponentMask::Tensors(t) if t.is_empty() => f.write_str("none"),
            ComponentMask::Tensors(t) => write!(f, "tensors:{}", join(&mut t.iter().cloned())),
            ComponentMask::MlpLayers(l) => write!(f, "mlp:{}", join(&mut l.iter().map(|x| x.to_string()))),
            ComponentMask::AttnHeads(h) => write!(f, "heads:{}", join(&mut h.iter().map(|(l, h)| format!("{l}.{h}")))),
        }
    }
}

/// `a..b` (inclusive start, exclusive end) or a comma list; items may mix.
pub fn parse_layer_set(s: &str) -> Result<BTreeSet<usize>> {
    let bad = |item: &str| Error::Config(format!("cannot parse layer item {item:?} in {s:?}"));
    let mut out = BTreeSet::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let a: usize = a.parse().map_err(|_| bad(item))?;
            let b: usize = b.parse().map_err(|_| bad(item))?;
            out.extend(a..b);
        } else {
            out.insert(item.parse().map_err(|_| bad(item))?);
        }
    }
    Ok(out)
}
