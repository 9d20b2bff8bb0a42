//! Reference forward pass.
//!
//! Every conv is followed by its folded norm (per-channel scale and shift).
//! Stem, plain and transposed convs and the expand/depthwise convs of an
//! inverted residual end in ReLU6; the projection of an inverted residual
//! and the convs of a head output are linear. An inverted residual adds its
//! input when its stride is 1 and its widths match.
//!
//! The first output carries `J` heatmaps followed by `J` tag maps; later
//! outputs carry heatmaps only.

mod ops;
mod tensor;

use std::collections::BTreeMap;

use serde::Serialize;

pub use ops::{add_in_place, channel_affine, concat_channels, conv2d, conv_transpose2d, relu6};
pub use tensor::{tensor_paths, Tensor};

use crate::archspec::{validate, ArchConfig, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::supernet::WeightStore;

/// One convolution inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: &'static str,
    /// `[cout, cin/groups, k, k]`, or `[cin, cout, k, k]` when transposed.
    pub shape: [usize; 4],
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
    /// Folded norm (scale and shift) rather than a plain bias.
    pub norm: bool,
    pub relu6: bool,
}

impl ConvSpec {
    fn new(name: &'static str, k: u32, cin: u32, cout: u32, groups: u32, stride: u32) -> Self {
        let (k, cin, cout, groups) = (k as usize, cin as usize, cout as usize, groups as usize);
        Self {
            name,
            shape: [cout, cin / groups, k, k],
            groups,
            stride: stride as usize,
            padding: k / 2,
            transposed: false,
            norm: true,
            relu6: true,
        }
    }

    pub fn cout(&self) -> usize {
        if self.transposed {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }

    pub fn num_weights(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The convs a block executes, in order.
pub fn block_convs(b: &BlockSpec) -> Vec<ConvSpec> {
    match b.kind {
        BlockKind::Concat => vec![],
        BlockKind::StemConv | BlockKind::PlainConv => vec![ConvSpec::new("conv", b.k, b.cin, b.cout, b.groups, b.s)],
        BlockKind::TransposedConv => vec![ConvSpec {
            shape: [b.cin as usize, b.cout as usize, b.k as usize, b.k as usize],
            padding: b.padding() as usize,
            transposed: true,
            ..ConvSpec::new("deconv", b.k, b.cin, b.cout, 1, b.s)
        }],
        BlockKind::InvertedResidual => {
            let hidden = b.hidden_channels();
            let mut v = Vec::with_capacity(3);
            if b.has_expand_conv() {
                v.push(ConvSpec::new("expand", 1, b.cin, hidden, 1, 1));
            }
            v.push(ConvSpec::new("dw", b.k, hidden, hidden, hidden, b.s));
            v.push(ConvSpec { relu6: false, ..ConvSpec::new("project", 1, hidden, b.cout, 1, 1) });
            v
        }
        BlockKind::HeadConv => {
            let mut v = Vec::with_capacity(2);
            if b.k > 1 {
                v.push(ConvSpec { relu6: false, ..ConvSpec::new("dw", b.k, b.cin, b.cin, b.cin, 1) });
            }
            v.push(ConvSpec { norm: false, relu6: false, ..ConvSpec::new("pw", 1, b.cin, b.cout, 1, 1) });
            v
        }
    }
}

/// MACs per layer, measured from the tensors each conv actually produced.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    pub macs_by_layer: BTreeMap<String, u64>,
}

impl OpCounter {
    /// Record a conv that produced `out` with weights of `shape`:
    /// every output value of every image costs one MAC per weight tap feeding it.
    fn record(&mut self, layer: &str, spec: &ConvSpec, out: &Tensor<impl Scalar>) {
        let [_, cout, h, w] = out.dims();
        let taps_per_output = if spec.transposed {
            spec.shape[0] * spec.shape[2] * spec.shape[3]
        } else {
            spec.shape[1] * spec.shape[2] * spec.shape[3]
        };
        *self.macs_by_layer.entry(layer.to_string()).or_default() += (taps_per_output * cout * h * w) as u64;
    }

    pub fn total(&self) -> u64 {
        self.macs_by_layer.values().sum()
    }
}

fn run_conv<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &crate::supernet::ConvWeights<T>,
) -> Result<Tensor<T>> {
    let mut y = if spec.transposed {
        conv_transpose2d(x, &w.weight, spec.shape, None, spec.stride, spec.padding)?
    } else {
        conv2d(x, &w.weight, spec.shape, None, spec.stride, spec.padding, spec.groups)?
    };
    channel_affine(&mut y, w.scale.as_deref(), &w.shift);
    if spec.relu6 {
        relu6(&mut y);
    }
    Ok(y)
}

/// Run `cfg` with `store` on `x` (`N×3×R×R`, `R` the config's resolution).
pub fn forward<T: Scalar>(cfg: &ArchConfig, store: &WeightStore<T>, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, OpCounter)> {
    forward_with(cfg, store, x, |_, _| {})
}

/// [`forward`] with a hook that sees (and may modify) the output of every
/// weight-bearing block before it is consumed.
pub fn forward_with<T: Scalar>(
    cfg: &ArchConfig,
    store: &WeightStore<T>,
    x: &Tensor<T>,
    mut hook: impl FnMut(&str, &mut Tensor<T>),
) -> Result<(Vec<Tensor<T>>, OpCounter)> {
    let v = validate(cfg);
    if !v.is_empty() {
        return Err(Error::InvalidArch(v));
    }
    let r = cfg.input_resolution as usize;
    if x.c() != 3 || x.h() != r || x.w() != r {
        return Err(Error::ShapeMismatch {
            layer: "input".into(),
            reason: format!("expected N×3×{r}×{r}, got {:?}", x.dims()),
        });
    }
    store.check_against(cfg)?;

    let mut counter = OpCounter::default();
    let mut outputs = Vec::new();
    let mut stage_out: Vec<Tensor<T>> = Vec::with_capacity(cfg.stages.len());
    let mut cur = x.clone();
    let mut weights = store.layers.iter();

    for (layer, b) in cfg.blocks() {
        let id = layer.to_string();
        let wrap = |e: Error| match e {
            Error::ShapeMismatch { reason, .. } => Error::ShapeMismatch { layer: id.clone(), reason },
            other => other,
        };
        let y = if b.kind == BlockKind::Concat {
            let skip = &stage_out[b.fuse_from.expect("validated")];
            concat_channels(&cur, skip).map_err(wrap)?
        } else {
            let lw = weights.next().expect("store checked against config");
            let mut y = cur.clone();
            for (spec, w) in block_convs(b).iter().zip(&lw.convs) {
                y = run_conv(&y, spec, w).map_err(wrap)?;
                counter.record(&id, spec, &y);
            }
            if b.has_residual() {
                add_in_place(&mut y, &cur).map_err(wrap)?;
            }
            hook(&id, &mut y);
            y
        };
        if b.kind == BlockKind::HeadConv {
            outputs.push(y);
        } else {
            cur = y;
        }
        if let crate::archspec::LayerRef::Stage { stage, block } = layer {
            if block + 1 == cfg.stages[stage].len() {
                stage_out.push(cur.clone());
            }
        }
    }
    Ok((outputs, counter))
}
