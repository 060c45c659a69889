use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vit::{ViTConfig, VIT_CLS, VIT_PREFIX, VIT_PROJ};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Which ViT components are released for training.
///
/// Text form: `none`, `cls`, `cls+proj`, `cls+proj+blocks:A-B` (1-based,
/// inclusive) or `all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum UnlockSelector {
    #[default]
    None,
    Cls,
    ClsProj,
    ClsProjBlocks {
        first: usize,
        last: usize,
    },
    All,
}

impl fmt::Display for UnlockSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnlockSelector::None => f.write_str("none"),
            UnlockSelector::Cls => f.write_str("cls"),
            UnlockSelector::ClsProj => f.write_str("cls+proj"),
            UnlockSelector::ClsProjBlocks { first, last } => {
                write!(f, "cls+proj+blocks:{first}-{last}")
            }
            UnlockSelector::All => f.write_str("all"),
        }
    }
}

impl FromStr for UnlockSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(UnlockSelector::None),
            "cls" => Ok(UnlockSelector::Cls),
            "cls+proj" => Ok(UnlockSelector::ClsProj),
            "all" => Ok(UnlockSelector::All),
            other => {
                let range = other
                    .strip_prefix("cls+proj+blocks:")
                    .ok_or_else(|| Error::Config(format!("unknown unlock selector `{other}`")))?;
                let (a, b) = range.split_once('-').unwrap_or((range, range));
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad block index `{v}` in `{other}`")))
                };
                Ok(UnlockSelector::ClsProjBlocks {
                    first: parse(a)?,
                    last: parse(b)?,
                })
            }
        }
    }
}

impl TryFrom<String> for UnlockSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<UnlockSelector> for String {
    fn from(s: UnlockSelector) -> String {
        s.to_string()
    }
}

impl UnlockSelector {
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if let UnlockSelector::ClsProjBlocks { first, last } = *self {
            if first == 0 || first > last || last > n_blocks {
                return Err(Error::Config(format!(
                    "block range {first}-{last} outside 1..={n_blocks}"
                )));
            }
        }
        Ok(())
    }

    /// Whether the ViT parameter `name` is trainable under this selector.
    pub fn selects(&self, name: &str) -> bool {
        let cls_proj = name == VIT_CLS || name == VIT_PROJ;
        match *self {
            UnlockSelector::None => false,
            UnlockSelector::Cls => name == VIT_CLS,
            UnlockSelector::ClsProj => cls_proj,
            UnlockSelector::ClsProjBlocks { first, last } => {
                cls_proj
                    || (first..=last)
                        .any(|b| name.starts_with(&format!("{}.", ViTConfig::block_prefix(b - 1))))
            }
            UnlockSelector::All => name.starts_with(VIT_PREFIX),
        }
    }
}

/// Sets the trainable flag of every ViT tensor from `selector` and returns the
/// resulting number of trainable ViT parameters.
pub fn unlock_components(
    store: &mut ParamStore,
    cfg: &ViTConfig,
    selector: UnlockSelector,
) -> Result<usize> {
    selector.validate(cfg.n_blocks)?;
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(VIT_PREFIX))
        .map(str::to_string)
        .collect();
    for n in &names {
        store.set_trainable(n, selector.selects(n))?;
    }
    Ok(vit_trainable_count(store))
}

pub fn vit_trainable_count(store: &ParamStore) -> usize {
    store.numel_where(|n| n.starts_with(VIT_PREFIX) && store.is_trainable(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::vit::init_vit;

    #[test]
    fn text_round_trip() {
        for s in ["none", "cls", "cls+proj", "cls+proj+blocks:1-2", "all"] {
            let sel: UnlockSelector = s.parse().unwrap();
            assert_eq!(sel.to_string(), s);
        }
        assert!("cls+blocks".parse::<UnlockSelector>().is_err());
    }

    #[test]
    fn counts_are_monotone() {
        let cfg = ViTConfig::default();
        let mut s = ParamStore::new();
        init_vit(&mut s, &cfg);
        let mut counts = Vec::new();
        for sel in [
            UnlockSelector::None,
            UnlockSelector::Cls,
            UnlockSelector::ClsProj,
            UnlockSelector::ClsProjBlocks { first: 1, last: 2 },
            UnlockSelector::All,
        ] {
            counts.push(unlock_components(&mut s, &cfg, sel).unwrap());
        }
        assert_eq!(counts[0], 0);
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        assert_eq!(counts[1], cfg.embed_dim);
        assert_eq!(counts[2], cfg.embed_dim + cfg.embed_dim * cfg.joint_dim);
        assert_eq!(counts[4], cfg.total_param_count());
    }

    #[test]
    fn out_of_range_blocks_rejected() {
        let cfg = ViTConfig::default();
        let mut s = ParamStore::new();
        init_vit(&mut s, &cfg);
        for (first, last) in [(0, 1), (2, 1), (1, cfg.n_blocks + 1)] {
            let sel = UnlockSelector::ClsProjBlocks { first, last };
            assert!(unlock_components(&mut s, &cfg, sel).is_err());
        }
    }
}
