use super::validate::validate;
use super::{ArchConfig, MultiBranchConfig};
use crate::error::{Error, Result};
use crate::shrink::ShrinkConfig;

/// A named architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Preset {
    Single(ArchConfig),
    MultiBranch(MultiBranchConfig),
}

impl Preset {
    pub fn name(&self) -> &str {
        match self {
            Preset::Single(c) => &c.name,
            Preset::MultiBranch(c) => &c.name,
        }
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "LitePose-XS",
    "LitePose-S",
    "LitePose-M",
    "LitePose-L",
    "0.5-LitePose",
    "LitePose-supernet",
    "Scaled-HigherHRNet-W16",
    "Scaled-HigherHRNet-W16-shrink1",
    "Scaled-HigherHRNet-W16-shrink2",
    "Scaled-HigherHRNet-W16-shrink3",
];

const FILES: &[(&str, &str)] = &[
    ("litepose-xs.json", include_str!("../../presets/litepose-xs.json")),
    ("litepose-s.json", include_str!("../../presets/litepose-s.json")),
    ("litepose-m.json", include_str!("../../presets/litepose-m.json")),
    ("litepose-l.json", include_str!("../../presets/litepose-l.json")),
    ("litepose-0.5.json", include_str!("../../presets/litepose-0.5.json")),
    ("litepose-supernet.json", include_str!("../../presets/litepose-supernet.json")),
    ("litepose-xs.choice.json", include_str!("../../presets/litepose-xs.choice.json")),
    ("litepose-s.choice.json", include_str!("../../presets/litepose-s.choice.json")),
    ("litepose-m.choice.json", include_str!("../../presets/litepose-m.choice.json")),
    ("litepose-l.choice.json", include_str!("../../presets/litepose-l.choice.json")),
    ("space-lsm.json", include_str!("../../presets/space-lsm.json")),
    ("space-xs.json", include_str!("../../presets/space-xs.json")),
];

/// Bundled preset data by file name.
pub(crate) fn preset_file(file: &str) -> Option<&'static str> {
    FILES.iter().find(|(f, _)| *f == file).map(|(_, s)| *s)
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESET_NAMES.iter().copied()
}

/// Look up a preset by name (case-insensitive).
pub fn preset(name: &str) -> Result<Preset> {
    let canonical = PRESET_NAMES
        .iter()
        .find(|n| n.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
    let single = |file: &str| -> Result<Preset> {
        let cfg = ArchConfig::from_json(preset_file(file).expect("bundled preset"))?;
        let v = validate(&cfg);
        if !v.is_empty() {
            return Err(Error::InvalidArch(v));
        }
        Ok(Preset::Single(cfg))
    };
    let multi = |shrink: ShrinkConfig, ch: u32| -> Result<Preset> {
        let cfg = MultiBranchConfig::new(*canonical, shrink, ch, 512);
        cfg.validate()?;
        Ok(Preset::MultiBranch(cfg))
    };
    match *canonical {
        "LitePose-XS" => single("litepose-xs.json"),
        "LitePose-S" => single("litepose-s.json"),
        "LitePose-M" => single("litepose-m.json"),
        "LitePose-L" => single("litepose-l.json"),
        "0.5-LitePose" => single("litepose-0.5.json"),
        "LitePose-supernet" => single("litepose-supernet.json"),
        "Scaled-HigherHRNet-W16" => multi(ShrinkConfig::c1(), 16),
        "Scaled-HigherHRNet-W16-shrink1" => multi(ShrinkConfig::c2(), 16),
        "Scaled-HigherHRNet-W16-shrink2" => multi(ShrinkConfig::c3(), 18),
        "Scaled-HigherHRNet-W16-shrink3" => multi(ShrinkConfig::c4(), 18),
        _ => unreachable!("every listed name is handled"),
    }
}

/// Single-branch preset; errors for multi-branch names.
pub fn arch_preset(name: &str) -> Result<ArchConfig> {
    match preset(name)? {
        Preset::Single(c) => Ok(c),
        Preset::MultiBranch(c) => Err(Error::InvalidInput(format!(
            "{} is a multi-branch network",
            c.name
        ))),
    }
}
