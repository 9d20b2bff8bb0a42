//! Weight-sharing search space.
//!
//! Every width-searchable layer of a supernet [`ArchConfig`] is one gene
//! (depthwise layers follow their input, head outputs are fixed by the joint
//! count). A [`SubnetChoice`] picks an input resolution and one width ratio
//! per gene; the sub-network keeps `round_channels(ratio·c)` channels of each
//! such layer and reuses the leading slices of the supernet weights.

mod store;

use std::path::Path;

use num_rational::Rational64;
use num_traits::ToPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archspec::{self, arch_preset, preset_file, ArchConfig};
use crate::costmodel::model_cost;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

pub use store::{extract, extract_to, ConvWeights, LayerWeights, WeightStore};

/// `max(2, nearest even integer to ratio·c)`, ties rounded up.
pub fn round_channels(ratio: Rational64, c: u32) -> u32 {
    let x = ratio * Rational64::from_integer(c as i64);
    let n = (x / 2 + Rational64::new(1, 2)).floor().to_integer();
    (2 * n).max(2) as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub arch: ArchConfig,
    pub resolutions: Vec<u32>,
    pub width_ratios: Vec<Rational64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ArchRef {
    Name(String),
    Inline(Box<ArchConfig>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    arch: ArchRef,
    resolutions: Vec<u32>,
    width_ratios: Vec<f64>,
}

impl SearchSpace {
    pub fn new(arch: ArchConfig, resolutions: Vec<u32>, width_ratios: Vec<Rational64>) -> Result<Self> {
        let s = Self { arch, resolutions, width_ratios };
        s.check()?;
        Ok(s)
    }

    /// Parse a space file. `arch` is a preset name, a path (relative to
    /// `base_dir`) or an inline architecture.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let f: SpaceFile = serde_json::from_str(text).map_err(|e| Error::json("search space", e))?;
        let arch = match f.arch {
            ArchRef::Inline(a) => *a,
            ArchRef::Name(n) => match arch_preset(&n) {
                Ok(a) => a,
                Err(Error::UnknownPreset(_)) => {
                    let p = base_dir.map(|d| d.join(&n)).unwrap_or_else(|| n.clone().into());
                    ArchConfig::load(p)?
                }
                Err(e) => return Err(e),
            },
        };
        let ratios = f
            .width_ratios
            .iter()
            .map(|&r| {
                archspec::ratio_serde::to_ratio(r)
                    .ok_or_else(|| Error::InvalidSpace(format!("width ratio {r} is not positive")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(arch, f.resolutions, ratios)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    /// Bundled spaces: `space-lsm` (L/M/S) and `space-xs`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = preset_file(&format!("{name}.json"))
            .filter(|_| name.starts_with("space-"))
            .ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
        Self::from_json(text, None)
    }

    pub fn check(&self) -> Result<()> {
        let v = archspec::validate(&self.arch);
        if !v.is_empty() {
            return Err(Error::InvalidArch(v));
        }
        if self.resolutions.is_empty() || self.width_ratios.is_empty() {
            return Err(Error::InvalidSpace("resolutions and width ratios must be non-empty".into()));
        }
        let factor = self.arch.downsampling_factor();
        if let Some(r) = self.resolutions.iter().find(|&&r| r == 0 || r % factor != 0) {
            return Err(Error::InvalidSpace(format!("resolution {r} is not a multiple of {factor}")));
        }
        let one = Rational64::from_integer(1);
        if let Some(r) = self.width_ratios.iter().find(|&&r| r <= Rational64::from_integer(0) || r > one) {
            return Err(Error::InvalidSpace(format!("width ratio {r} outside (0, 1]")));
        }
        Ok(())
    }

    /// Full channel count `c_k` of every gene.
    pub fn base_channels(&self) -> Vec<u32> {
        gene_channels(&self.arch)
    }

    pub fn num_genes(&self) -> usize {
        self.base_channels().len()
    }

    /// Number of distinct choices.
    pub fn size(&self) -> f64 {
        self.resolutions.len() as f64 * (self.width_ratios.len() as f64).powi(self.num_genes() as i32)
    }

    pub fn max_choice(&self) -> SubnetChoice {
        SubnetChoice {
            resolution: *self.resolutions.iter().max().expect("non-empty"),
            ratios: vec![*self.width_ratios.iter().max().expect("non-empty"); self.num_genes()],
        }
    }

    pub fn min_choice(&self) -> SubnetChoice {
        SubnetChoice {
            resolution: *self.resolutions.iter().min().expect("non-empty"),
            ratios: vec![*self.width_ratios.iter().min().expect("non-empty"); self.num_genes()],
        }
    }

    /// Every choice, resolution-major. Only sensible for toy spaces.
    pub fn enumerate(&self) -> Vec<SubnetChoice> {
        let k = self.num_genes();
        let mut out = Vec::new();
        for &resolution in &self.resolutions {
            let mut digits = vec![0usize; k];
            loop {
                out.push(SubnetChoice {
                    resolution,
                    ratios: digits.iter().map(|&d| self.width_ratios[d]).collect(),
                });
                let mut i = 0;
                while i < k {
                    digits[i] += 1;
                    if digits[i] < self.width_ratios.len() {
                        break;
                    }
                    digits[i] = 0;
                    i += 1;
                }
                if i == k {
                    break;
                }
            }
        }
        out
    }

    /// MACs of the sub-network selected by `choice`.
    pub fn macs(&self, choice: &SubnetChoice) -> Result<u64> {
        let sub = subnet_arch(&self.arch, choice)?;
        Ok(model_cost(&sub, choice.resolution)?.total_macs)
    }
}

fn gene_channels(cfg: &ArchConfig) -> Vec<u32> {
    cfg.blocks().filter(|(_, b)| b.is_width_searchable()).map(|(_, b)| b.cout).collect()
}

/// A point in a [`SearchSpace`]. Ordering is the lexicographic encoding
/// (resolution, then ratios in layer order).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetChoice {
    pub resolution: u32,
    #[serde(with = "ratio_list")]
    pub ratios: Vec<Rational64>,
}

impl SubnetChoice {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("subnet choice", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("choice serializes")
    }

    /// Channel counts `c'_k` under `space`.
    pub fn channels(&self, space: &SearchSpace) -> Vec<u32> {
        space
            .base_channels()
            .iter()
            .zip(&self.ratios)
            .map(|(&c, &r)| round_channels(r, c))
            .collect()
    }

    pub fn check(&self, space: &SearchSpace) -> Result<()> {
        if !space.resolutions.contains(&self.resolution) {
            return Err(Error::InvalidChoice(format!("resolution {} not in the space", self.resolution)));
        }
        if self.ratios.len() != space.num_genes() {
            return Err(Error::InvalidChoice(format!(
                "{} ratios for {} layers",
                self.ratios.len(),
                space.num_genes()
            )));
        }
        if let Some(r) = self.ratios.iter().find(|r| !space.width_ratios.contains(r)) {
            return Err(Error::InvalidChoice(format!("ratio {r} not in the space")));
        }
        Ok(())
    }
}

mod ratio_list {
    use num_rational::Rational64;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    use crate::archspec::ratio_serde::to_ratio;

    pub fn serialize<S: Serializer>(v: &[Rational64], s: S) -> Result<S::Ok, S::Error> {
        use num_traits::ToPrimitive;
        v.iter().map(|r| r.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rational64>, D::Error> {
        Vec::<f64>::deserialize(d)?
            .into_iter()
            .map(|x| to_ratio(x).ok_or_else(|| D::Error::custom(format!("{x} is not a positive ratio"))))
            .collect()
    }
}

/// Each ratio and the resolution drawn independently and uniformly.
pub fn sample_uniform(space: &SearchSpace, seed: u64) -> SubnetChoice {
    let mut rng = SeedTree::new(seed).split("sample").rng();
    sample_with(space, &mut rng)
}

pub(crate) fn sample_with(space: &SearchSpace, rng: &mut impl Rng) -> SubnetChoice {
    let resolution = space.resolutions[rng.gen_range(0..space.resolutions.len())];
    let ratios = (0..space.num_genes())
        .map(|_| space.width_ratios[rng.gen_range(0..space.width_ratios.len())])
        .collect();
    SubnetChoice { resolution, ratios }
}

/// Sub-network architecture: gene widths scaled, wiring recomputed,
/// resolution set to the choice's.
pub fn subnet_arch(cfg: &ArchConfig, choice: &SubnetChoice) -> Result<ArchConfig> {
    let genes = gene_channels(cfg).len();
    if choice.ratios.len() != genes {
        return Err(Error::InvalidChoice(format!("{} ratios for {genes} layers", choice.ratios.len())));
    }
    let one = Rational64::from_integer(1);
    if let Some(r) = choice.ratios.iter().find(|&&r| r <= Rational64::from_integer(0) || r > one) {
        return Err(Error::InvalidChoice(format!("ratio {} outside (0, 1]", r.to_f64().unwrap_or(f64::NAN))));
    }
    let mut sub = cfg.with_resolution(choice.resolution);
    let mut ratios = choice.ratios.iter();
    for b in sub.blocks_mut() {
        if b.is_width_searchable() {
            b.cout = round_channels(*ratios.next().expect("counted above"), b.cout);
        }
    }
    sub.rewire();
    let v = archspec::validate(&sub);
    if !v.is_empty() {
        return Err(Error::InvalidArch(v));
    }
    Ok(sub)
}
