use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{subnet_arch, SubnetChoice};
use crate::archspec::{ArchConfig, BlockKind, BlockSpec};
use crate::engine::{block_convs, ConvSpec};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::scalar::Scalar;

/// Weights of one conv: `weight` in the layout of [`ConvSpec::shape`],
/// folded-norm `scale` (absent for biased heads) and `shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T> {
    pub name: String,
    pub shape: [usize; 4],
    pub weight: Vec<T>,
    pub scale: Option<Vec<T>>,
    pub shift: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub layer: String,
    pub convs: Vec<ConvWeights<T>>,
}

/// Weights for every weight-bearing layer of `arch`, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T> {
    pub arch: ArchConfig,
    pub layers: Vec<LayerWeights<T>>,
}

fn mismatch(layer: &str, reason: impl Into<String>) -> Error {
    Error::ShapeMismatch { layer: layer.to_string(), reason: reason.into() }
}

impl<T: Scalar> WeightStore<T> {
    /// Seeded random weights. Each layer draws from its own stream, so a
    /// layer's weights depend only on the seed, its id and its shape.
    pub fn random(arch: &ArchConfig, seed: u64) -> Self {
        let root = SeedTree::new(seed).split("weights");
        let layers = arch
            .blocks()
            .filter(|(_, b)| b.is_weight_bearing())
            .map(|(l, b)| {
                let id = l.to_string();
                let mut rng = root.split(&id).rng();
                let convs = block_convs(b)
                    .iter()
                    .map(|spec| {
                        let fan_in = if spec.transposed {
                            spec.shape[0] * spec.shape[2] * spec.shape[3] / (spec.stride * spec.stride)
                        } else {
                            spec.shape[1] * spec.shape[2] * spec.shape[3]
                        };
                        let a = (3.0 / fan_in.max(1) as f64).sqrt();
                        let cout = spec.cout();
                        ConvWeights {
                            name: spec.name.to_string(),
                            shape: spec.shape,
                            weight: (0..spec.num_weights()).map(|_| T::of(rng.gen_range(-a..a))).collect(),
                            scale: spec.norm.then(|| (0..cout).map(|_| T::of(rng.gen_range(0.5..1.0))).collect()),
                            shift: (0..cout).map(|_| T::of(rng.gen_range(-0.1..0.1))).collect(),
                        }
                    })
                    .collect();
                LayerWeights { layer: id, convs }
            })
            .collect();
        Self { arch: arch.clone(), layers }
    }

    /// Total stored values; equals the analytic parameter count.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.convs)
            .map(|c| c.weight.len() + c.scale.as_ref().map_or(0, Vec::len) + c.shift.len())
            .sum()
    }

    /// Check that every tensor has the shape `cfg` requires.
    pub fn check_against(&self, cfg: &ArchConfig) -> Result<()> {
        let blocks: Vec<_> = cfg.blocks().filter(|(_, b)| b.is_weight_bearing()).collect();
        if blocks.len() != self.layers.len() {
            return Err(mismatch(
                "store",
                format!("{} weight layers for {} in the config", self.layers.len(), blocks.len()),
            ));
        }
        for ((l, b), lw) in blocks.iter().zip(&self.layers) {
            let id = l.to_string();
            if lw.layer != id {
                return Err(mismatch(&id, format!("store holds {}", lw.layer)));
            }
            let specs = block_convs(b);
            if specs.len() != lw.convs.len() {
                return Err(mismatch(&id, format!("{} convs, expected {}", lw.convs.len(), specs.len())));
            }
            for (spec, c) in specs.iter().zip(&lw.convs) {
                let cout = spec.cout();
                let ok = c.name == spec.name
                    && c.shape == spec.shape
                    && c.weight.len() == spec.num_weights()
                    && c.shift.len() == cout
                    && c.scale.as_ref().map(Vec::len) == spec.norm.then_some(cout);
                if !ok {
                    return Err(mismatch(
                        &id,
                        format!("{} weight {:?}, expected {} {:?}", c.name, c.shape, spec.name, spec.shape),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    arch: ArchConfig,
    dtype: String,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    layer: String,
    conv: String,
    field: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl<T: Scalar> WeightStore<T> {
    /// Write `<stem>.json` (manifest with byte offsets) and `<stem>.bin`
    /// (little-endian f32).
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let (mp, bp) = (stem.with_extension("json"), stem.with_extension("bin"));
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for l in &self.layers {
            for c in &l.convs {
                let mut put = |field: &str, shape: Vec<usize>, data: &[T]| {
                    tensors.push(Entry {
                        layer: l.layer.clone(),
                        conv: c.name.clone(),
                        field: field.into(),
                        shape,
                        offset: blob.len(),
                        len: data.len(),
                    });
                    for v in data {
                        blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                    }
                };
                put("weight", c.shape.to_vec(), &c.weight);
                if let Some(s) = &c.scale {
                    put("scale", vec![s.len()], s);
                }
                put("shift", vec![c.shift.len()], &c.shift);
            }
        }
        let manifest = Manifest {
            arch: self.arch.clone(),
            dtype: "f32".into(),
            blob: bp.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            tensors,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mp, text + "\n").map_err(|e| Error::io(&mp, e))?;
        std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        Ok((mp, bp))
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        if m.dtype != "f32" {
            return Err(Error::InvalidInput(format!("unsupported weight dtype {}", m.dtype)));
        }
        let bp = manifest_path.with_file_name(&m.blob);
        let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let mut by_key: HashMap<(String, String, String), Vec<T>> = HashMap::new();
        for e in &m.tensors {
            let end = e.offset + 4 * e.len;
            if end > blob.len() || e.len != e.shape.iter().product::<usize>() {
                return Err(mismatch(&e.layer, format!("{} {} out of range or misshaped", e.conv, e.field)));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            by_key.insert((e.layer.clone(), e.conv.clone(), e.field.clone()), data);
        }
        let mut layers = Vec::new();
        for (l, b) in m.arch.blocks().filter(|(_, b)| b.is_weight_bearing()) {
            let id = l.to_string();
            let mut convs = Vec::new();
            for spec in block_convs(b) {
                let mut take = |field: &str| by_key.remove(&(id.clone(), spec.name.to_string(), field.to_string()));
                let weight = take("weight").ok_or_else(|| mismatch(&id, format!("missing {} weight", spec.name)))?;
                let scale = take("scale");
                let shift = take("shift").ok_or_else(|| mismatch(&id, format!("missing {} shift", spec.name)))?;
                convs.push(ConvWeights { name: spec.name.to_string(), shape: spec.shape, weight, scale, shift });
            }
            layers.push(LayerWeights { layer: id, convs });
        }
        let store = Self { arch: m.arch, layers };
        store.check_against(&store.arch)?;
        Ok(store)
    }
}

/// Weights of the sub-network `choice` selects from `store.arch`.
pub fn extract<T: Scalar>(store: &WeightStore<T>, choice: &SubnetChoice) -> Result<WeightStore<T>> {
    extract_to(store, &subnet_arch(&store.arch, choice)?)
}

/// Slice `store` down to `target`, which must have the same layers as
/// `store.arch` with no wider outputs.
///
/// Each layer keeps its leading output channels. Its input channels are the
/// ones the previous layer kept, so after a concat they are the leading
/// channels of each concatenated part.
pub fn extract_to<T: Scalar>(store: &WeightStore<T>, target: &ArchConfig) -> Result<WeightStore<T>> {
    let src = &store.arch;
    if src.stages.len() != target.stages.len()
        || src.stages.iter().zip(&target.stages).any(|(a, b)| a.len() != b.len())
        || src.deconv_head.len() != target.deconv_head.len()
        || src.num_joints != target.num_joints
    {
        return Err(Error::InvalidChoice("target has a different layer structure".into()));
    }
    let mut cur: Vec<usize> = (0..3).collect();
    let mut stage_idx: Vec<Vec<usize>> = Vec::new();
    let mut weights = store.layers.iter();
    let mut layers = Vec::new();

    for ((layer, sb), (_, tb)) in src.blocks().zip(target.blocks()) {
        let id = layer.to_string();
        if (sb.kind, sb.k, sb.s, sb.expand, sb.fuse_from) != (tb.kind, tb.k, tb.s, tb.expand, tb.fuse_from) {
            return Err(Error::InvalidChoice(format!("{id}: block differs beyond channel widths")));
        }
        if tb.cout > sb.cout || tb.cin > sb.cin {
            return Err(Error::InvalidChoice(format!(
                "{id}: {}→{} exceeds the stored {}→{}",
                tb.cin, tb.cout, sb.cin, sb.cout
            )));
        }
        if tb.cin as usize != cur.len() {
            return Err(mismatch(&id, format!("target cin {} but {} channels arrive", tb.cin, cur.len())));
        }
        if sb.kind == BlockKind::Concat {
            let f = sb.fuse_from.expect("validated");
            cur.extend(stage_idx[f].iter().map(|&j| sb.cin as usize + j));
        } else {
            let lw = weights.next().ok_or_else(|| mismatch(&id, "store has too few layers"))?;
            let (convs, out) = slice_block(&id, sb, tb, lw, &cur)?;
            layers.push(LayerWeights { layer: id, convs });
            if sb.kind != BlockKind::HeadConv {
                cur = out;
            }
        }
        if let crate::archspec::LayerRef::Stage { stage, block } = layer {
            if block + 1 == src.stages[stage].len() {
                stage_idx.push(cur.clone());
            }
        }
    }
    let out = WeightStore { arch: target.clone(), layers };
    out.check_against(target)?;
    Ok(out)
}

fn prefix(n: u32) -> Vec<usize> {
    (0..n as usize).collect()
}

/// Returns the sliced convs and the kept output indices.
fn slice_block<T: Scalar>(
    id: &str,
    sb: &BlockSpec,
    tb: &BlockSpec,
    lw: &LayerWeights<T>,
    input: &[usize],
) -> Result<(Vec<ConvWeights<T>>, Vec<usize>)> {
    let specs: Vec<ConvSpec> = block_convs(tb);
    let find = |name: &str| {
        lw.convs
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| mismatch(id, format!("missing {name} weights")))
    };
    let depthwise = |c: &ConvWeights<T>, idx: &[usize]| gather(c, idx, &[0], idx);
    let mut convs = Vec::with_capacity(specs.len());
    let out = match sb.kind {
        BlockKind::StemConv | BlockKind::PlainConv => {
            let c = find("conv")?;
            if sb.is_depthwise() {
                convs.push(depthwise(c, input));
                input.to_vec()
            } else if sb.groups == 1 {
                let o = prefix(tb.cout);
                convs.push(gather(c, &o, input, &o));
                o
            } else if sb == tb {
                convs.push(c.clone());
                prefix(tb.cout)
            } else {
                return Err(Error::InvalidChoice(format!("{id}: grouped conv cannot be narrowed")));
            }
        }
        BlockKind::TransposedConv => {
            let o = prefix(tb.cout);
            convs.push(gather(find("deconv")?, input, &o, &o));
            o
        }
        BlockKind::InvertedResidual => {
            let hidden = if tb.has_expand_conv() {
                let h = prefix(tb.hidden_channels());
                convs.push(gather(find("expand")?, &h, input, &h));
                h
            } else {
                input.to_vec()
            };
            convs.push(depthwise(find("dw")?, &hidden));
            let o = prefix(tb.cout);
            convs.push(gather(find("project")?, &o, &hidden, &o));
            o
        }
        BlockKind::HeadConv => {
            if tb.k > 1 {
                convs.push(depthwise(find("dw")?, input));
            }
            let o = prefix(tb.cout);
            convs.push(gather(find("pw")?, &o, input, &o));
            o
        }
        BlockKind::Concat => unreachable!("concat has no weights"),
    };
    Ok((convs, out))
}

/// Keep indices `d0` × `d1` of the first two weight dims and `ch` of the
/// per-channel vectors.
fn gather<T: Scalar>(c: &ConvWeights<T>, d0: &[usize], d1: &[usize], ch: &[usize]) -> ConvWeights<T> {
    let [_, n1, kh, kw] = c.shape;
    let kk = kh * kw;
    let mut weight = Vec::with_capacity(d0.len() * d1.len() * kk);
    for &a in d0 {
        for &b in d1 {
            let start = (a * n1 + b) * kk;
            weight.extend_from_slice(&c.weight[start..start + kk]);
        }
    }
    let pick = |v: &[T]| ch.iter().map(|&i| v[i]).collect::<Vec<T>>();
    ConvWeights {
        name: c.name.clone(),
        shape: [d0.len(), d1.len(), kh, kw],
        weight,
        scale: c.scale.as_deref().map(pick),
        shift: pick(&c.shift),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::arch_preset;
    use crate::costmodel::model_cost;
    use crate::supernet::{sample_uniform, SearchSpace};
    use num_rational::Rational64;

    #[test]
    fn param_count_matches_cost_model() {
        for name in ["LitePose-XS", "LitePose-S"] {
            let cfg = arch_preset(name).unwrap();
            let store = WeightStore::<f32>::random(&cfg, 0);
            assert_eq!(store.num_params() as u64, model_cost(&cfg, cfg.input_resolution).unwrap().total_params);
        }
    }

    #[test]
    fn full_choice_is_identity() {
        let space = SearchSpace::bundled("space-xs").unwrap();
        let store = WeightStore::<f32>::random(&space.arch, 4);
        let full = SubnetChoice { resolution: 448, ratios: vec![Rational64::from_integer(1); space.num_genes()] };
        assert_eq!(extract(&store, &full).unwrap(), store);
    }

    #[test]
    fn leading_prefix_rule() {
        let space = SearchSpace::bundled("space-xs").unwrap();
        let store = WeightStore::<f32>::random(&space.arch, 5);
        let choice = sample_uniform(&space, 11);
        let sub = extract(&store, &choice).unwrap();
        // s1.b3: dense expand conv with both widths narrowed.
        let i = store.layers.iter().position(|l| l.layer == "s1.b3").unwrap();
        let (big, small) = (&store.layers[i].convs[0], &sub.layers[i].convs[0]);
        let [o, ii, _, _] = small.shape;
        let n1 = big.shape[1];
        for a in 0..o {
            for b in 0..ii {
                assert_eq!(small.weight[a * ii + b], big.weight[a * n1 + b]);
            }
        }
    }

    #[test]
    fn extraction_composes() {
        let space = SearchSpace::bundled("space-xs").unwrap();
        let store = WeightStore::<f32>::random(&space.arch, 6);
        for seed in 0..5 {
            let small = sample_uniform(&space, seed);
            // A choice that dominates `small` channelwise.
            let large = SubnetChoice {
                resolution: small.resolution,
                ratios: small.ratios.iter().map(|&r| if r < Rational64::new(3, 4) { r * 2 } else { r }).collect(),
            };
            let mid = extract(&store, &large).unwrap();
            let target = subnet_arch(&space.arch, &small).unwrap();
            assert_eq!(extract_to(&mid, &target).unwrap(), extract(&store, &small).unwrap());
        }
    }

    #[test]
    fn wider_target_rejected() {
        let cfg = arch_preset("LitePose-XS").unwrap();
        let store = WeightStore::<f32>::random(&cfg, 1);
        let wide = arch_preset("LitePose-S").unwrap();
        assert!(extract_to(&store, &wide).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = arch_preset("LitePose-XS").unwrap();
        let store = WeightStore::<f32>::random(&cfg, 8);
        let (mp, _) = store.save(&dir.path().join("w")).unwrap();
        assert_eq!(WeightStore::<f32>::load(&mp).unwrap(), store);
    }
}
