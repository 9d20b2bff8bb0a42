//! Synthetic scenes with known keypoints.
//!
//! Each visible joint is an integer-centred unit Gaussian in its joint's
//! heatmap channel (overlaps combined by max). Person `p` carries the tag
//! `p·tag_gap` over the pixels its Gaussian dominates. Joints of the same
//! type are kept more than one NMS window apart, so peak finding and
//! grouping recover the scene exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::eval::GtAnnotation;
use crate::rng::SeedTree;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub persons: usize,
    pub joints: usize,
    /// Heatmap side length.
    pub size: usize,
    pub sigma: f64,
    /// Same-joint peaks are at least `window + 1` pixels apart (Chebyshev).
    pub window: usize,
    pub tag_gap: f64,
    pub p_invisible: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { persons: 2, joints: 14, size: 64, sigma: 2.0, window: 5, tag_gap: 3.0, p_invisible: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthPerson {
    /// `(x, y, visible)` per joint, heatmap pixels.
    pub keypoints: Vec<(usize, usize, bool)>,
    pub tag: f64,
}

impl SynthPerson {
    /// Bounding-box area of the visible joints, padded by one pixel per side.
    pub fn area(&self) -> f64 {
        let vis: Vec<_> = self.keypoints.iter().filter(|k| k.2).collect();
        let (x0, x1) = (vis.iter().map(|k| k.0).min().unwrap_or(0), vis.iter().map(|k| k.0).max().unwrap_or(0));
        let (y0, y1) = (vis.iter().map(|k| k.1).min().unwrap_or(0), vis.iter().map(|k| k.1).max().unwrap_or(0));
        ((x1 - x0 + 3) * (y1 - y0 + 3)) as f64
    }

    pub fn flat_keypoints(&self) -> Vec<f64> {
        self.keypoints
            .iter()
            .flat_map(|&(x, y, v)| if v { [x as f64, y as f64, 2.0] } else { [0.0, 0.0, 0.0] })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub size: usize,
    pub num_joints: usize,
    pub sigma: f64,
    pub persons: Vec<SynthPerson>,
}

pub fn generate(seed: u64, p: &SynthParams) -> Result<Scene> {
    if p.joints == 0 || p.size < 2 * p.window + 2 || !(p.sigma > 0.0) || !(p.tag_gap > 0.0) {
        return Err(Error::InvalidInput("synthetic scene parameters out of range".into()));
    }
    if !(0.0..1.0).contains(&p.p_invisible) {
        return Err(Error::InvalidInput("p_invisible must be in [0, 1)".into()));
    }
    let mut rng = SeedTree::new(seed).split("synth").rng();
    let margin = 2;
    let gap = p.window + 1;
    let mut persons: Vec<SynthPerson> = Vec::with_capacity(p.persons);
    for idx in 0..p.persons {
        let mut keypoints = Vec::with_capacity(p.joints);
        for j in 0..p.joints {
            let mut tries = 0;
            let pos = loop {
                let x = rng.gen_range(margin..p.size - margin);
                let y = rng.gen_range(margin..p.size - margin);
                let clear = persons.iter().all(|q| {
                    let (qx, qy, _) = q.keypoints[j];
                    x.abs_diff(qx).max(y.abs_diff(qy)) >= gap
                });
                if clear {
                    break (x, y);
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::InvalidInput(format!(
                        "cannot place {} persons {gap} px apart on a {}-pixel map",
                        p.persons, p.size
                    )));
                }
            };
            let visible = !rng.gen_bool(p.p_invisible);
            keypoints.push((pos.0, pos.1, visible));
        }
        if !keypoints.iter().any(|k| k.2) {
            let j = rng.gen_range(0..p.joints);
            keypoints[j].2 = true;
        }
        persons.push(SynthPerson { keypoints, tag: idx as f64 * p.tag_gap });
    }
    Ok(Scene { size: p.size, num_joints: p.joints, sigma: p.sigma, persons })
}

impl Scene {
    /// `1×2J×S×S`: heatmaps then tag maps. Invisible joints are not drawn.
    pub fn render<T: Scalar>(&self) -> Tensor<T> {
        let (j, s) = (self.num_joints, self.size);
        let mut t = Tensor::<T>::zeros([1, 2 * j, s, s]);
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        for joint in 0..j {
            for y in 0..s {
                for x in 0..s {
                    let mut best = (0.0f64, 0.0f64);
                    for p in &self.persons {
                        let (px, py, vis) = p.keypoints[joint];
                        if !vis {
                            continue;
                        }
                        let d2 = (x as f64 - px as f64).powi(2) + (y as f64 - py as f64).powi(2);
                        let g = (-d2 * inv).exp();
                        if g > best.0 {
                            best = (g, p.tag);
                        }
                    }
                    t.set(0, joint, y, x, T::of(best.0));
                    if best.0 > 0.0 {
                        t.set(0, j + joint, y, x, T::of(best.1));
                    }
                }
            }
        }
        t
    }

    /// `1×3×R×R` input image: each joint's Gaussian, upscaled by `R/S`,
    /// added to channel `joint mod 3`.
    pub fn render_image<T: Scalar>(&self, resolution: usize) -> Tensor<T> {
        let f = resolution as f64 / self.size as f64;
        let inv = 1.0 / (2.0 * (self.sigma * f).powi(2));
        let mut t = Tensor::<T>::zeros([1, 3, resolution, resolution]);
        for p in &self.persons {
            for (j, &(px, py, vis)) in p.keypoints.iter().enumerate() {
                if !vis {
                    continue;
                }
                let (cx, cy) = ((px as f64 + 0.5) * f - 0.5, (py as f64 + 0.5) * f - 0.5);
                for y in 0..resolution {
                    for x in 0..resolution {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let i = t.index(0, j % 3, y, x);
                        t.data_mut()[i] += T::of((-d2 * inv).exp());
                    }
                }
            }
        }
        t
    }

    pub fn gt_annotations(&self, image_id: u64) -> Vec<GtAnnotation> {
        self.persons
            .iter()
            .map(|p| GtAnnotation { image_id, keypoints: p.flat_keypoints(), area: p.area() })
            .collect()
    }
}
