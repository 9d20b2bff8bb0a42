//! Analytic parameter and multiply–accumulate counts.
//!
//! A convolution costs `k²·cin·cout·h·w/groups` MACs at its output size
//! `h×w` and `k²·cin·cout/groups + 2·cout` parameters, the last term being
//! the per-channel scale and shift of a folded batch norm. Transposed convs
//! use the same formula at their output size. Concatenation and activations
//! are free.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::archspec::{self, shape_trace, ArchConfig, BlockKind, BlockSpec, MultiBranchConfig, Preset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: BlockKind,
    pub k: u32,
    pub cin: u32,
    pub cout: u32,
    pub h: u32,
    pub w: u32,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub resolution: u32,
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    fn from_layers(name: &str, resolution: u32, per_layer: Vec<LayerCost>) -> Self {
        Self {
            name: name.to_string(),
            resolution,
            total_params: per_layer.iter().map(|l| l.params).sum(),
            total_macs: per_layer.iter().map(|l| l.macs).sum(),
            per_layer,
        }
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer_id,kind,k,cin,cout,h,w,params,macs,flops\n");
        for l in &self.per_layer {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                l.layer,
                l.kind,
                l.k,
                l.cin,
                l.cout,
                l.h,
                l.w,
                l.params,
                l.macs,
                2 * l.macs
            );
        }
        s
    }

    /// Totals only.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "resolution": self.resolution,
            "layers": self.per_layer.len(),
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops(),
            "mparams": sig3(self.mparams()),
            "gmacs": sig3(self.gmacs()),
        })
    }
}

/// Format with three significant digits.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (2 - mag).max(0) as usize;
    let rounded = format!("{x:.decimals$}");
    // Rounding may carry into a new digit (9.995 → 10.00); redo at that magnitude.
    let carried: f64 = rounded.parse().unwrap_or(x);
    if carried.abs() >= 10f64.powi(mag + 1) && decimals > 0 {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        rounded
    }
}

/// Plain convolution: `(params, macs)` at output size `h×w`.
pub fn conv_cost(k: u32, cin: u32, cout: u32, groups: u32, h: u32, w: u32) -> (u64, u64) {
    let kk = (k as u64).pow(2);
    let dense = kk * cin as u64 * cout as u64 / groups as u64;
    (dense + 2 * cout as u64, dense * h as u64 * w as u64)
}

/// `(params, macs)` of one block given its output size.
pub fn layer_cost(b: &BlockSpec, h_out: u32, w_out: u32) -> Result<(u64, u64)> {
    let v = archspec::check_block_local("block", b, None);
    if !v.is_empty() {
        return Err(Error::InvalidArch(v));
    }
    if h_out == 0 || w_out == 0 {
        return Err(Error::InvalidBlock {
            layer: b.kind.to_string(),
            reason: "output size must be positive".into(),
        });
    }
    let (h, w) = (h_out as u64, w_out as u64);
    let cost = match b.kind {
        BlockKind::Concat => (0, 0),
        BlockKind::StemConv | BlockKind::PlainConv | BlockKind::TransposedConv => {
            conv_cost(b.k, b.cin, b.cout, b.groups, h_out, w_out)
        }
        BlockKind::InvertedResidual => {
            let hidden = b.hidden_channels();
            let mut p = 0;
            let mut m = 0;
            if b.has_expand_conv() {
                let (ep, em) = conv_cost(1, b.cin, hidden, 1, h_out * b.s, w_out * b.s);
                p += ep;
                m += em;
            }
            let (dp, dm) = conv_cost(b.k, hidden, hidden, hidden, h_out, w_out);
            let (pp, pm) = conv_cost(1, hidden, b.cout, 1, h_out, w_out);
            (p + dp + pp, m + dm + pm)
        }
        BlockKind::HeadConv => {
            let (cin, cout) = (b.cin as u64, b.cout as u64);
            // Biased 1×1 projection, no norm.
            let mut p = cin * cout + cout;
            let mut m = cin * cout * h * w;
            if b.k > 1 {
                let kk = (b.k as u64).pow(2);
                p += kk * cin + 2 * cin;
                m += kk * cin * h * w;
            }
            (p, m)
        }
    };
    Ok(cost)
}

fn trace_costs(cfg: &ArchConfig, resolution: u32) -> Result<Vec<LayerCost>> {
    let trace = shape_trace(cfg, resolution)?;
    trace
        .par_iter()
        .map(|e| {
            let (params, macs) = layer_cost(&e.block, e.h, e.w).map_err(|err| Error::InvalidBlock {
                layer: e.layer.clone(),
                reason: err.to_string(),
            })?;
            Ok(LayerCost {
                layer: e.layer.clone(),
                kind: e.block.kind,
                k: e.block.k,
                cin: e.block.cin,
                cout: e.block.cout,
                h: e.h,
                w: e.w,
                params,
                macs,
            })
        })
        .collect()
}

/// Cost of `cfg` evaluated at `resolution`.
pub fn model_cost(cfg: &ArchConfig, resolution: u32) -> Result<CostReport> {
    let v = archspec::validate(&cfg.with_resolution(resolution));
    if !v.is_empty() {
        if v.iter().any(|v| v.rule == archspec::Rule::Resolution) {
            return Err(Error::IndivisibleResolution {
                resolution,
                factor: cfg.downsampling_factor(),
            });
        }
        return Err(Error::InvalidArch(v));
    }
    Ok(CostReport::from_layers(&cfg.name, resolution, trace_costs(cfg, resolution)?))
}

pub fn multibranch_cost(cfg: &MultiBranchConfig) -> Result<CostReport> {
    let per_layer = cfg
        .layer_plan()?
        .into_iter()
        .map(|l| {
            let (params, macs) = layer_cost(&l.block, l.h, l.w)?;
            Ok(LayerCost {
                layer: l.layer,
                kind: l.block.kind,
                k: l.block.k,
                cin: l.block.cin,
                cout: l.block.cout,
                h: l.h,
                w: l.w,
                params,
                macs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_layers(&cfg.name, cfg.input_resolution, per_layer))
}

/// Cost of any preset at its own resolution (or `resolution` if given).
pub fn preset_cost(p: &Preset, resolution: Option<u32>) -> Result<CostReport> {
    match p {
        Preset::Single(cfg) => model_cost(cfg, resolution.unwrap_or(cfg.input_resolution)),
        Preset::MultiBranch(cfg) => {
            let mut cfg = cfg.clone();
            if let Some(r) = resolution {
                cfg.input_resolution = r;
            }
            multibranch_cost(&cfg)
        }
    }
}

/// Cost of `cfg` with every inverted-residual depthwise kernel set to each `k`.
pub fn kernel_sweep(cfg: &ArchConfig, kernels: &[u32]) -> Result<Vec<(u32, CostReport)>> {
    if let Some(k) = kernels.iter().find(|k| !matches!(k, 3 | 5 | 7 | 9)) {
        return Err(Error::InvalidInput(format!("sweep kernel {k} not in {{3,5,7,9}}")));
    }
    kernels
        .iter()
        .map(|&k| Ok((k, model_cost(&cfg.with_depthwise_kernel(k), cfg.input_resolution)?)))
        .collect()
}
