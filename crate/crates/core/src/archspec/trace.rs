use serde::Serialize;

use super::validate::{Rule, Violation};
use super::{ArchConfig, BlockKind, BlockSpec, LayerRef};
use crate::error::{Error, Result};

/// Output shape of one layer (batch dimension omitted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub layer: String,
    pub block: BlockSpec,
    pub h_in: u32,
    pub w_in: u32,
    pub h: u32,
    pub w: u32,
    pub c: u32,
    /// Index into the network outputs for `head-conv` layers.
    pub output: Option<usize>,
}

/// Per-layer output shapes of `cfg` evaluated at `resolution`.
pub fn shape_trace(cfg: &ArchConfig, resolution: u32) -> Result<Vec<TraceEntry>> {
    let factor = cfg.downsampling_factor();
    if resolution == 0 || !resolution.is_multiple_of(factor) {
        return Err(Error::IndivisibleResolution { resolution, factor });
    }
    let (entries, violations) = walk(cfg, resolution);
    if violations.is_empty() {
        Ok(entries)
    } else {
        Err(Error::InvalidArch(violations))
    }
}

pub(crate) fn walk(cfg: &ArchConfig, resolution: u32) -> (Vec<TraceEntry>, Vec<Violation>) {
    let mut entries = Vec::new();
    let mut violations = Vec::new();
    let (mut h, mut w, mut c) = (resolution, resolution, 3u32);
    let mut stage_out: Vec<(u32, u32, u32)> = Vec::with_capacity(cfg.stages.len());

    let check_wiring = |id: &str, b: &BlockSpec, c: u32, v: &mut Vec<Violation>| {
        if b.cin != c {
            v.push(Violation::new(id, Rule::Wiring, format!("cin {} but producer emits {c}", b.cin)));
        }
    };

    for (s, stage) in cfg.stages.iter().enumerate() {
        for (bi, b) in stage.iter().enumerate() {
            let id = LayerRef::Stage { stage: s, block: bi }.to_string();
            check_wiring(&id, b, c, &mut violations);
            let (h_in, w_in) = (h, w);
            if b.s == 2 {
                if h % 2 != 0 || w % 2 != 0 {
                    violations.push(Violation::new(
                        &id,
                        Rule::Spatial,
                        format!("stride-2 layer receives odd size {h}×{w}"),
                    ));
                }
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            c = b.cout;
            entries.push(TraceEntry { layer: id, block: b.clone(), h_in, w_in, h, w, c, output: None });
        }
        stage_out.push((h, w, c));
    }

    let mut strides = Vec::new();
    for (i, b) in cfg.deconv_head.iter().enumerate() {
        let id = LayerRef::Head(i).to_string();
        check_wiring(&id, b, c, &mut violations);
        let (h_in, w_in) = (h, w);
        match b.kind {
            BlockKind::Concat => {
                match b.fuse_from.and_then(|f| stage_out.get(f).map(|o| (f, *o))) {
                    Some((f, (sh, sw, sc))) => {
                        if (sh, sw) != (h, w) {
                            violations.push(Violation::new(
                                &id,
                                Rule::Spatial,
                                format!("stage {f} is {sh}×{sw}, running tensor is {h}×{w}"),
                            ));
                        }
                        if b.cout != b.cin + sc {
                            violations.push(Violation::new(
                                &id,
                                Rule::Wiring,
                                format!("concat cout {} != {} + {sc}", b.cout, b.cin),
                            ));
                        }
                    }
                    None => violations.push(Violation::new(
                        &id,
                        Rule::Fusion,
                        format!("fuse_from {:?} does not name a stage", b.fuse_from),
                    )),
                }
                c = b.cout;
                entries.push(TraceEntry { layer: id, block: b.clone(), h_in, w_in, h, w, c, output: None });
            }
            BlockKind::HeadConv => {
                let idx = strides.len();
                strides.push(if h > 0 && resolution.is_multiple_of(h) { resolution / h } else { 0 });
                entries.push(TraceEntry {
                    layer: id,
                    block: b.clone(),
                    h_in,
                    w_in,
                    h,
                    w,
                    c: b.cout,
                    output: Some(idx),
                });
            }
            _ => {
                match b.kind {
                    BlockKind::TransposedConv => {
                        h *= 2;
                        w *= 2;
                    }
                    _ if b.s == 2 => {
                        if h % 2 != 0 || w % 2 != 0 {
                            violations.push(Violation::new(
                                &id,
                                Rule::Spatial,
                                format!("stride-2 layer receives odd size {h}×{w}"),
                            ));
                        }
                        h = h.div_ceil(2);
                        w = w.div_ceil(2);
                    }
                    _ => {}
                }
                c = b.cout;
                entries.push(TraceEntry { layer: id, block: b.clone(), h_in, w_in, h, w, c, output: None });
            }
        }
    }

    if strides.is_empty() {
        violations.push(Violation::new("outputs", Rule::Outputs, "no head-conv output"));
    } else if strides != cfg.outputs {
        violations.push(Violation::new(
            "outputs",
            Rule::Outputs,
            format!("head emits scales {strides:?}, config declares {:?}", cfg.outputs),
        ));
    }
    (entries, violations)
}
