//! Typed architecture descriptions.
//!
//! An [`ArchConfig`] is a single-branch network: a list of backbone stages
//! (stage 0 is the stem) followed by a head that upsamples with transposed
//! convolutions, optionally concatenating earlier stage outputs, and emits
//! one prediction per `head-conv` entry. A [`MultiBranchConfig`] describes
//! the HRNet-style multi-branch family used for shrinking studies.
//!
//! Head semantics, in order of the `deconv_head` list:
//!
//! * `concat` appends the output of stage `fuse_from` to the running tensor,
//! * `transposed-conv` upsamples the running tensor by two,
//! * `head-conv` branches off the running tensor and produces an output; it
//!   does not replace the running tensor.

mod multibranch;
mod presets;
mod trace;
mod validate;

use std::fmt;
use std::path::Path;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use multibranch::MultiBranchConfig;
pub use presets::{arch_preset, preset, preset_names, Preset, PRESET_NAMES};
pub use trace::{shape_trace, TraceEntry};
pub use validate::{validate, Rule, Violation};

pub(crate) use presets::preset_file;
pub(crate) use validate::check_block_local;
pub use multibranch::PlanLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    StemConv,
    InvertedResidual,
    PlainConv,
    TransposedConv,
    Concat,
    HeadConv,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::StemConv => "stem-conv",
            BlockKind::InvertedResidual => "inverted-residual",
            BlockKind::PlainConv => "plain-conv",
            BlockKind::TransposedConv => "transposed-conv",
            BlockKind::Concat => "concat",
            BlockKind::HeadConv => "head-conv",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One layer of a network.
///
/// For `concat`, `cin` is the running channel count and `cout` the count
/// after appending stage `fuse_from`. For `head-conv` with `k > 1` the layer
/// is a depthwise `k×k` conv followed by a biased `1×1` projection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub k: u32,
    pub s: u32,
    pub cin: u32,
    pub cout: u32,
    #[serde(with = "ratio_serde")]
    pub expand: Rational64,
    pub groups: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuse_from: Option<usize>,
}

impl BlockSpec {
    fn base(kind: BlockKind, k: u32, s: u32, cin: u32, cout: u32) -> Self {
        Self {
            kind,
            k,
            s,
            cin,
            cout,
            expand: Rational64::from_integer(1),
            groups: 1,
            fuse_from: None,
        }
    }

    pub fn stem_conv(k: u32, s: u32, cin: u32, cout: u32) -> Self {
        Self::base(BlockKind::StemConv, k, s, cin, cout)
    }

    pub fn plain_conv(k: u32, s: u32, cin: u32, cout: u32) -> Self {
        Self::base(BlockKind::PlainConv, k, s, cin, cout)
    }

    pub fn depthwise(k: u32, s: u32, channels: u32) -> Self {
        Self {
            groups: channels,
            ..Self::base(BlockKind::PlainConv, k, s, channels, channels)
        }
    }

    pub fn inverted_residual(k: u32, s: u32, cin: u32, cout: u32, expand: i64) -> Self {
        Self {
            expand: Rational64::from_integer(expand),
            ..Self::base(BlockKind::InvertedResidual, k, s, cin, cout)
        }
    }

    pub fn transposed(cin: u32, cout: u32) -> Self {
        Self::base(BlockKind::TransposedConv, 4, 2, cin, cout)
    }

    pub fn concat(cin: u32, skip_channels: u32, from_stage: usize) -> Self {
        Self {
            fuse_from: Some(from_stage),
            ..Self::base(BlockKind::Concat, 1, 1, cin, cin + skip_channels)
        }
    }

    pub fn head(k: u32, cin: u32, cout: u32) -> Self {
        Self::base(BlockKind::HeadConv, k, 1, cin, cout)
    }

    /// Depthwise plain conv: one group per channel.
    pub fn is_depthwise(&self) -> bool {
        self.kind == BlockKind::PlainConv
            && self.groups > 1
            && self.groups == self.cin
            && self.cin == self.cout
    }

    pub fn is_weight_bearing(&self) -> bool {
        self.kind != BlockKind::Concat
    }

    /// Whether the output width is a free parameter (a search gene).
    /// Depthwise layers follow their input and head outputs are fixed by the
    /// joint count.
    pub fn is_width_searchable(&self) -> bool {
        match self.kind {
            BlockKind::StemConv | BlockKind::InvertedResidual | BlockKind::TransposedConv => true,
            BlockKind::PlainConv => !self.is_depthwise(),
            BlockKind::Concat | BlockKind::HeadConv => false,
        }
    }

    pub fn has_residual(&self) -> bool {
        self.kind == BlockKind::InvertedResidual && self.s == 1 && self.cin == self.cout
    }

    /// Expanded width of an inverted-residual block, rounded half up.
    pub fn hidden_channels(&self) -> u32 {
        let scaled = self.expand * Rational64::from_integer(self.cin as i64);
        (scaled + Rational64::new(1, 2)).floor().to_integer().max(0) as u32
    }

    /// Whether an inverted-residual block has a 1×1 expansion conv.
    pub fn has_expand_conv(&self) -> bool {
        self.kind == BlockKind::InvertedResidual && self.expand != Rational64::from_integer(1)
    }

    pub fn padding(&self) -> u32 {
        match self.kind {
            BlockKind::TransposedConv => 1,
            _ => self.k / 2,
        }
    }
}

/// Position of a block inside an [`ArchConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerRef {
    Stage { stage: usize, block: usize },
    Head(usize),
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerRef::Stage { stage, block } => write!(f, "s{stage}.b{block}"),
            LayerRef::Head(i) => write!(f, "head.{i}"),
        }
    }
}

/// Single-branch network description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    pub input_resolution: u32,
    pub num_joints: u32,
    pub stages: Vec<Vec<BlockSpec>>,
    pub deconv_head: Vec<BlockSpec>,
    /// Downsampling factor of each `head-conv` output, in head order.
    pub outputs: Vec<u32>,
}

impl ArchConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("architecture", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// All blocks in execution order.
    pub fn blocks(&self) -> impl Iterator<Item = (LayerRef, &BlockSpec)> + '_ {
        let stages = self.stages.iter().enumerate().flat_map(|(s, blocks)| {
            blocks
                .iter()
                .enumerate()
                .map(move |(b, spec)| (LayerRef::Stage { stage: s, block: b }, spec))
        });
        let head = self
            .deconv_head
            .iter()
            .enumerate()
            .map(|(i, spec)| (LayerRef::Head(i), spec));
        stages.chain(head)
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut BlockSpec> + '_ {
        self.stages
            .iter_mut()
            .flat_map(|s| s.iter_mut())
            .chain(self.deconv_head.iter_mut())
    }

    pub fn block(&self, layer: LayerRef) -> Option<&BlockSpec> {
        match layer {
            LayerRef::Stage { stage, block } => self.stages.get(stage)?.get(block),
            LayerRef::Head(i) => self.deconv_head.get(i),
        }
    }

    /// Number of weight-bearing layers.
    pub fn num_layers(&self) -> usize {
        self.blocks().filter(|(_, b)| b.is_weight_bearing()).count()
    }

    /// Product of backbone strides.
    pub fn downsampling_factor(&self) -> u32 {
        self.stages
            .iter()
            .flatten()
            .filter(|b| b.s == 2)
            .fold(1u32, |f, _| f.saturating_mul(2))
    }

    pub fn with_resolution(&self, resolution: u32) -> Self {
        Self {
            input_resolution: resolution,
            ..self.clone()
        }
    }

    /// Replace the depthwise kernel of every inverted-residual block.
    pub fn with_depthwise_kernel(&self, k: u32) -> Self {
        let mut cfg = self.clone();
        for b in cfg.blocks_mut() {
            if b.kind == BlockKind::InvertedResidual {
                b.k = k;
            }
        }
        cfg
    }

    /// Drop every skip concatenation from the head, leaving a plain
    /// deconvolution head.
    pub fn without_fusion(&self) -> Self {
        let mut cfg = self.clone();
        cfg.deconv_head.retain(|b| b.kind != BlockKind::Concat);
        cfg.rewire();
        cfg
    }

    /// Output channels of every stage, following the stored wiring.
    pub fn stage_channels(&self) -> Vec<u32> {
        let mut current = 0;
        self.stages
            .iter()
            .map(|stage| {
                if let Some(last) = stage.last() {
                    current = last.cout;
                }
                current
            })
            .collect()
    }

    /// Recompute every `cin` (and concat/depthwise `cout`) from the producing
    /// layers, keeping the output widths of width-searchable layers.
    pub fn rewire(&mut self) {
        let mut current = 3u32;
        let mut stage_out = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            for b in stage.iter_mut() {
                rewire_block(b, current, &stage_out);
                current = b.cout;
            }
            stage_out.push(current);
        }
        for b in &mut self.deconv_head {
            rewire_block(b, current, &stage_out);
            if b.kind != BlockKind::HeadConv {
                current = b.cout;
            }
        }
    }
}

fn rewire_block(b: &mut BlockSpec, input: u32, stage_out: &[u32]) {
    let depthwise = b.is_depthwise();
    b.cin = input;
    if depthwise {
        b.cout = input;
        b.groups = input;
    } else if b.kind == BlockKind::Concat {
        let skip = b.fuse_from.and_then(|s| stage_out.get(s)).copied().unwrap_or(0);
        b.cout = input + skip;
    }
}

/// Serialize rationals as plain JSON numbers (integers when exact).
pub(crate) mod ratio_serde {
    use num_rational::Rational64;
    use num_traits::ToPrimitive;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational64, s: S) -> Result<S::Ok, S::Error> {
        if r.is_integer() {
            s.serialize_i64(r.to_integer())
        } else {
            s.serialize_f64(r.to_f64().unwrap_or(f64::NAN))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational64, D::Error> {
        let v = f64::deserialize(d)?;
        to_ratio(v).ok_or_else(|| D::Error::custom(format!("{v} is not a positive ratio")))
    }

    pub fn to_ratio(v: f64) -> Option<Rational64> {
        if !(v.is_finite() && v > 0.0) {
            return None;
        }
        Rational64::approximate_float(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_json_rejects_unknown_fields() {
        let ok = r#"{"kind":"plain-conv","k":3,"s":1,"cin":4,"cout":4,"expand":1,"groups":1}"#;
        let b: BlockSpec = serde_json::from_str(ok).unwrap();
        assert_eq!(b, BlockSpec::plain_conv(3, 1, 4, 4));
        let bad = r#"{"kind":"plain-conv","k":3,"s":1,"cin":4,"cout":4,"expand":1,"groups":1,"bias":true}"#;
        assert!(serde_json::from_str::<BlockSpec>(bad).is_err());
    }

    #[test]
    fn fractional_expand_round_trips() {
        let j = r#"{"kind":"inverted-residual","k":3,"s":1,"cin":8,"cout":8,"expand":0.5,"groups":1}"#;
        let b: BlockSpec = serde_json::from_str(j).unwrap();
        assert_eq!(b.expand, Rational64::new(1, 2));
        assert_eq!(b.hidden_channels(), 4);
        let back = serde_json::to_string(&b).unwrap();
        assert!(back.contains("\"expand\":0.5"));
    }

    #[test]
    fn residual_rule() {
        assert!(BlockSpec::inverted_residual(7, 1, 16, 16, 6).has_residual());
        assert!(!BlockSpec::inverted_residual(7, 2, 16, 16, 6).has_residual());
        assert!(!BlockSpec::inverted_residual(7, 1, 16, 24, 6).has_residual());
    }

    #[test]
    fn without_fusion_rewires_head() {
        let cfg = arch_preset("0.5-LitePose").unwrap();
        let plain = cfg.without_fusion();
        assert!(plain.deconv_head.iter().all(|b| b.kind != BlockKind::Concat));
        assert!(validate(&plain).is_empty(), "{:?}", validate(&plain));
        // First transposed conv now reads only the last stage.
        let last = *cfg.stage_channels().last().unwrap();
        assert_eq!(plain.deconv_head[0].cin, last);
    }
}
