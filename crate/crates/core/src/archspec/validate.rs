use std::fmt;

use num_rational::Rational64;

use super::trace::walk;
use super::{ArchConfig, BlockKind, BlockSpec, LayerRef};

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    KernelSize,
    Stride,
    Channels,
    Groups,
    Expand,
    /// `cin` does not match the producing layer.
    Wiring,
    /// Spatial sizes disagree (concat sources, odd input to a stride-2 layer).
    Spatial,
    /// Block kind not allowed at this position.
    Placement,
    Fusion,
    HeadOutput,
    Outputs,
    Resolution,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::KernelSize => "kernel-size",
            Rule::Stride => "stride",
            Rule::Channels => "channels",
            Rule::Groups => "groups",
            Rule::Expand => "expand",
            Rule::Wiring => "wiring",
            Rule::Spatial => "spatial",
            Rule::Placement => "placement",
            Rule::Fusion => "fusion",
            Rule::HeadOutput => "head-output",
            Rule::Outputs => "outputs",
            Rule::Resolution => "resolution",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Layer id (`s1.b3`, `head.2`) or a config-level field name.
    pub layer: String,
    pub rule: Rule,
    pub detail: String,
}

impl Violation {
    pub(crate) fn new(layer: impl ToString, rule: Rule, detail: impl Into<String>) -> Self {
        Self {
            layer: layer.to_string(),
            rule,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] {}", self.layer, self.rule, self.detail)
    }
}

/// Check every invariant of `cfg`; an empty list means the config is valid.
pub fn validate(cfg: &ArchConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if cfg.num_joints == 0 {
        out.push(Violation::new("num_joints", Rule::Channels, "must be positive"));
    }
    if cfg.stages.is_empty() {
        out.push(Violation::new("stages", Rule::Placement, "no stages"));
    }
    for (s, stage) in cfg.stages.iter().enumerate() {
        if stage.is_empty() {
            out.push(Violation::new(format!("s{s}"), Rule::Placement, "empty stage"));
        }
    }
    for (layer, b) in cfg.blocks() {
        check_block(layer, b, cfg, &mut out);
    }
    let factor = cfg.downsampling_factor();
    if cfg.input_resolution == 0 || !cfg.input_resolution.is_multiple_of(factor) {
        out.push(Violation::new(
            "input_resolution",
            Rule::Resolution,
            format!(
                "{} is not a positive multiple of the downsampling factor {factor}",
                cfg.input_resolution
            ),
        ));
    }
    let (_, walk_violations) = walk(cfg, cfg.input_resolution.max(1));
    out.extend(walk_violations);
    out
}

/// Rules that only look at a single block.
/// Head-output widths are only checked when `num_joints` is known.
pub(crate) fn check_block_local(layer: &str, b: &BlockSpec, num_joints: Option<u32>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |rule, detail: String| out.push(Violation::new(layer, rule, detail));

    if b.cin == 0 || b.cout == 0 {
        push(Rule::Channels, format!("channels must be positive ({}→{})", b.cin, b.cout));
    }
    if b.groups == 0 || !b.cin.is_multiple_of(b.groups.max(1)) || !b.cout.is_multiple_of(b.groups.max(1)) {
        push(
            Rule::Groups,
            format!("groups {} must divide cin {} and cout {}", b.groups, b.cin, b.cout),
        );
    }
    match b.kind {
        BlockKind::TransposedConv => {
            if b.k != 4 {
                push(Rule::KernelSize, format!("transposed conv kernel must be 4, got {}", b.k));
            }
            if b.s != 2 {
                push(Rule::Stride, format!("transposed conv stride must be 2, got {}", b.s));
            }
            if b.groups != 1 {
                push(Rule::Groups, "transposed conv must be dense".into());
            }
        }
        BlockKind::Concat => {
            if b.k != 1 || b.s != 1 || b.groups != 1 {
                push(Rule::Placement, "concat must have k=1, s=1, groups=1".into());
            }
            if b.fuse_from.is_none() {
                push(Rule::Fusion, "concat needs fuse_from".into());
            }
        }
        _ => {
            if !matches!(b.k, 1 | 3 | 5 | 7 | 9) {
                push(Rule::KernelSize, format!("kernel {} not in {{1,3,5,7,9}}", b.k));
            }
            if !matches!(b.s, 1 | 2) {
                push(Rule::Stride, format!("stride {} not in {{1,2}}", b.s));
            }
        }
    }
    if b.kind != BlockKind::Concat && b.fuse_from.is_some() {
        push(Rule::Fusion, "only concat blocks may fuse".into());
    }
    if b.kind == BlockKind::InvertedResidual {
        if b.expand <= Rational64::from_integer(0) {
            push(Rule::Expand, "expand ratio must be positive".into());
        } else if b.hidden_channels() == 0 {
            push(Rule::Expand, "expanded width rounds to zero".into());
        }
        if b.groups != 1 {
            push(Rule::Groups, "inverted residual groups must be 1".into());
        }
    } else if b.expand != Rational64::from_integer(1) {
        push(Rule::Expand, format!("expand only applies to inverted-residual blocks ({})", b.kind));
    }
    if b.kind == BlockKind::HeadConv {
        if b.s != 1 {
            push(Rule::Stride, "head conv must have stride 1".into());
        }
        if b.groups != 1 {
            push(Rule::Groups, "head conv must be dense".into());
        }
        if let Some(j) = num_joints {
            if b.cout != j && b.cout != 2 * j {
                push(Rule::HeadOutput, format!("head emits {} channels, expected {j} or {}", b.cout, 2 * j));
            }
        }
    }
    out
}

fn check_block(layer: LayerRef, b: &BlockSpec, cfg: &ArchConfig, out: &mut Vec<Violation>) {
    let id = layer.to_string();
    out.extend(check_block_local(&id, b, Some(cfg.num_joints)));
    let in_stage = matches!(layer, LayerRef::Stage { .. });
    let placement_ok = match b.kind {
        BlockKind::StemConv => matches!(layer, LayerRef::Stage { stage: 0, .. }),
        BlockKind::InvertedResidual => in_stage,
        BlockKind::PlainConv => true,
        BlockKind::TransposedConv | BlockKind::Concat | BlockKind::HeadConv => !in_stage,
    };
    if !placement_ok {
        out.push(Violation::new(&id, Rule::Placement, format!("{} not allowed here", b.kind)));
    }
}
