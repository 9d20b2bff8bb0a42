use serde::{Deserialize, Serialize};

use super::BlockSpec;
use crate::error::{Error, Result};
use crate::shrink::ShrinkConfig;

/// HRNet-style multi-branch network.
///
/// A two-conv stem reduces the input by 4. Stage `n` (1-based) has `n`
/// parallel branches; branch `i` (0-based) runs at `1/2^(i+2)` of the input
/// with `base_channel·2^i` channels. Every module of a stage applies
/// `block_counts[n][i]` residual blocks to branch `i` and then exchanges
/// information between all branches. A zero block count removes the
/// refinement blocks of a branch but keeps its exchange unit.
///
/// The head predicts `2J` channels (heatmaps and tags) at 1/4, concatenates
/// them with the 1/4 features, upsamples with one transposed conv and
/// predicts `J` heatmaps at 1/2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiBranchConfig {
    pub name: String,
    pub input_resolution: u32,
    pub num_joints: u32,
    pub base_channel: u32,
    pub block_counts: ShrinkConfig,
    pub stem_channels: u32,
    /// Width of the single stage-1 branch.
    pub stage1_channels: u32,
    /// Modules per stage.
    pub modules: [u32; 4],
    /// Kernel of the convs inside a residual block.
    pub block_kernel: u32,
    pub convs_per_block: u32,
}

/// One conv of an expanded multi-branch network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanLayer {
    pub layer: String,
    pub block: BlockSpec,
    /// Output spatial size.
    pub h: u32,
    pub w: u32,
}

impl MultiBranchConfig {
    pub fn new(name: impl Into<String>, block_counts: ShrinkConfig, base_channel: u32, resolution: u32) -> Self {
        Self {
            name: name.into(),
            input_resolution: resolution,
            num_joints: 14,
            base_channel,
            block_counts,
            stem_channels: 64,
            stage1_channels: 64,
            modules: [1, 1, 1, 3],
            block_kernel: 3,
            convs_per_block: 2,
        }
    }

    pub fn branch_channels(&self, i: usize) -> u32 {
        self.base_channel << i
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("{}: {m}", self.name)));
        if self.base_channel == 0 || self.stem_channels == 0 || self.stage1_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.num_joints == 0 {
            return bad("num_joints must be positive");
        }
        if !matches!(self.block_kernel, 1 | 3 | 5 | 7 | 9) {
            return bad("block kernel must be one of 1,3,5,7,9");
        }
        if self.modules[3] == 0 {
            return bad("the last stage needs at least one module");
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(32) {
            return Err(Error::IndivisibleResolution {
                resolution: self.input_resolution,
                factor: 32,
            });
        }
        self.block_counts.check()
    }

    /// Expand into the flat list of convs with their output sizes.
    pub fn layer_plan(&self) -> Result<Vec<PlanLayer>> {
        self.validate()?;
        let mut plan = Vec::new();
        let mut push = |layer: String, block: BlockSpec, h: u32| plan.push(PlanLayer { layer, block, h, w: h });
        let k = self.block_kernel;
        let h = self.input_resolution / 4;
        let size = |i: usize| h >> i;

        push("stem.0".into(), BlockSpec::stem_conv(3, 2, 3, self.stem_channels), h * 2);
        push("stem.1".into(), BlockSpec::plain_conv(3, 2, self.stem_channels, self.stem_channels), h);

        let w1 = self.stage1_channels;
        let mut cin = self.stem_channels;
        for b in 0..self.block_counts.stages[0][0] as usize {
            for c in 0..self.convs_per_block {
                let from = if c == 0 { cin } else { w1 };
                push(format!("s1.b{b}.c{c}"), BlockSpec::plain_conv(k, 1, from, w1), h);
            }
            if cin != w1 {
                push(format!("s1.b{b}.down"), BlockSpec::plain_conv(1, 1, cin, w1), h);
            }
            cin = w1;
        }

        let mut chans = vec![cin];
        for n in 2..=4usize {
            let new: Vec<u32> = (0..n).map(|i| self.branch_channels(i)).collect();
            for i in 0..n {
                let id = format!("t{n}.{i}");
                match chans.get(i) {
                    Some(&c) if c != new[i] => push(id, BlockSpec::plain_conv(3, 1, c, new[i]), size(i)),
                    Some(_) => {}
                    None => push(id, BlockSpec::plain_conv(3, 2, chans[chans.len() - 1], new[i]), size(i)),
                }
            }
            chans = new;
            let modules = self.modules[n - 1] as usize;
            for m in 0..modules {
                for (i, &c) in chans.iter().enumerate() {
                    for b in 0..self.block_counts.stages[n - 1][i] {
                        for cv in 0..self.convs_per_block {
                            push(format!("s{n}.m{m}.br{i}.b{b}.c{cv}"), BlockSpec::plain_conv(k, 1, c, c), size(i));
                        }
                    }
                }
                let last = n == 4 && m + 1 == modules;
                let targets = if last { 1 } else { n };
                for i in 0..targets {
                    for j in 0..n {
                        let id = format!("s{n}.m{m}.fuse{i}.{j}");
                        if j > i {
                            // 1×1 at the source size; the upsample is free.
                            push(id, BlockSpec::plain_conv(1, 1, chans[j], chans[i]), size(j));
                        } else if j < i {
                            for s in 0..i - j {
                                let cout = if s + 1 == i - j { chans[i] } else { chans[j] };
                                push(format!("{id}.{s}"), BlockSpec::plain_conv(3, 2, chans[j], cout), size(j + s + 1));
                            }
                        }
                    }
                }
            }
        }

        let c = self.base_channel;
        let j = self.num_joints;
        push("head.0".into(), BlockSpec::head(1, c, 2 * j), h);
        push("head.1".into(), BlockSpec::transposed(c + 2 * j, c), h * 2);
        push("head.2".into(), BlockSpec::head(1, c, j), h * 2);
        Ok(plan)
    }
}
