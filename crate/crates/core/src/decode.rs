//! Bottom-up decoding: heatmap peaks plus greedy grouping by scalar
//! associative-embedding tags.
//!
//! Network outputs are resized to the largest output size (bilinear) and
//! their heatmaps averaged. Tags come from the first output, whose channels
//! are `J` heatmaps followed by `J` tag maps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub joint: usize,
    /// Heatmap pixel coordinates.
    pub x: T,
    pub y: T,
    pub score: T,
    pub tag: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Keypoint<T> {
    pub x: T,
    pub y: T,
    /// 0 = not detected, 2 = detected.
    pub v: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pose<T> {
    pub keypoints: Vec<Keypoint<T>>,
    /// Mean score of the member detections.
    pub score: T,
    /// Mean tag of the member detections.
    pub tag: T,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct KeypointSet<T> {
    pub persons: Vec<Pose<T>>,
}

/// One person in the keypoint-results layout: `keypoints = [x1, y1, v1, …]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonJson {
    pub score: f64,
    pub keypoints: Vec<f64>,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn to_json(&self) -> Vec<PersonJson> {
        self.persons
            .iter()
            .map(|p| PersonJson {
                score: p.score.to_f64_lossy(),
                keypoints: p
                    .keypoints
                    .iter()
                    .flat_map(|k| [k.x.to_f64_lossy(), k.y.to_f64_lossy(), k.v as f64])
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub window: usize,
    pub tag_threshold: f64,
    pub max_per_joint: usize,
    pub threshold: f64,
    /// Quarter-pixel shift toward the higher neighbour.
    pub refine: bool,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { window: 5, tag_threshold: 1.0, max_per_joint: 30, threshold: 0.1, refine: false }
    }
}

fn by_score<T: Scalar>(a: &Detection<T>, b: &Detection<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.y.partial_cmp(&b.y).unwrap_or(Ordering::Equal))
        .then(a.x.partial_cmp(&b.x).unwrap_or(Ordering::Equal))
        .then(a.tag.partial_cmp(&b.tag).unwrap_or(Ordering::Equal))
}

/// Window-maximum peaks of every channel of the first image.
///
/// A pixel is a peak when no pixel in its `window×window` neighbourhood is
/// larger, no equal pixel precedes it in `(y, x)` order, and it exceeds
/// `threshold`. Each channel keeps its `max_per_joint` best peaks.
pub fn nms_peaks<T: Scalar>(heatmaps: &Tensor<T>, window: usize, max_per_joint: usize, threshold: T) -> Vec<Detection<T>> {
    let [_, j, h, w] = heatmaps.dims();
    let r = window / 2;
    let mut out = Vec::new();
    for joint in 0..j {
        let plane = heatmaps.plane(0, joint);
        let mut dets = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if !(v > threshold) {
                    continue;
                }
                let is_peak = (y.saturating_sub(r)..(y + r + 1).min(h)).all(|qy| {
                    (x.saturating_sub(r)..(x + r + 1).min(w)).all(|qx| {
                        let q = plane[qy * w + qx];
                        q < v || (q == v && (qy, qx) >= (y, x))
                    })
                });
                if is_peak {
                    dets.push(Detection { joint, x: T::of(x as f64), y: T::of(y as f64), score: v, tag: T::zero() });
                }
            }
        }
        dets.sort_by(by_score);
        dets.truncate(max_per_joint);
        out.extend(dets);
    }
    out
}

/// Greedy grouping: joints in index order, detections by descending score.
/// A detection joins the person lacking that joint whose mean tag is nearest,
/// if within `tag_threshold`; otherwise it starts a new person.
pub fn group_by_tags<T: Scalar>(detections: &[Detection<T>], num_joints: usize, tag_threshold: T) -> KeypointSet<T> {
    let mut dets: Vec<&Detection<T>> = detections.iter().filter(|d| d.joint < num_joints).collect();
    dets.sort_by(|a, b| a.joint.cmp(&b.joint).then(by_score(a, b)));

    struct Acc<T> {
        pose: Vec<Option<Keypoint<T>>>,
        tag_sum: T,
        score_sum: T,
        n: usize,
    }
    let mut people: Vec<Acc<T>> = Vec::new();
    for d in dets {
        let mut best: Option<(usize, T)> = None;
        for (i, p) in people.iter().enumerate() {
            if p.pose[d.joint].is_some() {
                continue;
            }
            let dist = (p.tag_sum / T::of(p.n as f64) - d.tag).abs();
            if dist <= tag_threshold && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        let i = match best {
            Some((i, _)) => i,
            None => {
                people.push(Acc { pose: vec![None; num_joints], tag_sum: T::zero(), score_sum: T::zero(), n: 0 });
                people.len() - 1
            }
        };
        let p = &mut people[i];
        p.pose[d.joint] = Some(Keypoint { x: d.x, y: d.y, v: 2 });
        p.tag_sum += d.tag;
        p.score_sum += d.score;
        p.n += 1;
    }
    KeypointSet {
        persons: people
            .into_iter()
            .map(|p| {
                let n = T::of(p.n as f64);
                Pose {
                    keypoints: p
                        .pose
                        .into_iter()
                        .map(|k| k.unwrap_or(Keypoint { x: T::zero(), y: T::zero(), v: 0 }))
                        .collect(),
                    score: p.score_sum / n,
                    tag: p.tag_sum / n,
                }
            })
            .collect(),
    }
}

/// Bilinear resize (half-pixel centres, edge clamped).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, ih, iw] = x.dims();
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    let coord = |o: usize, inl: usize, outl: usize| {
        let s = ((o as f64 + 0.5) * inl as f64 / outl as f64 - 0.5).clamp(0.0, (inl - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(inl - 1), s - i0 as f64)
    };
    Tensor::from_fn([n, c, h, w], |b, ch, y, xx| {
        let (y0, y1, fy) = coord(y, ih, h);
        let (x0, x1, fx) = coord(xx, iw, w);
        let (fy, fx) = (T::of(fy), T::of(fx));
        let one = T::one();
        let top = x.at(b, ch, y0, x0) * (one - fx) + x.at(b, ch, y0, x1) * fx;
        let bot = x.at(b, ch, y1, x0) * (one - fx) + x.at(b, ch, y1, x1) * fx;
        top * (one - fy) + bot * fy
    })
}

/// Average of the heatmaps of every output at the largest output size, and
/// the tag maps of the first output at that size.
pub fn aggregate<T: Scalar>(outputs: &[Tensor<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = outputs.first().ok_or_else(|| Error::InvalidInput("no outputs to decode".into()))?;
    if first.c() % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "first output has {} channels; expected heatmaps and tags (2J)",
            first.c()
        )));
    }
    let j = first.c() / 2;
    let h = outputs.iter().map(|o| o.h()).max().expect("non-empty");
    let w = outputs.iter().map(|o| o.w()).max().expect("non-empty");
    for o in outputs {
        if h % o.h() != 0 || w % o.w() != 0 || h / o.h() != w / o.w() || o.n() != first.n() {
            return Err(Error::InvalidInput(format!(
                "output {:?} is not an integer rescale of {h}×{w}",
                o.dims()
            )));
        }
        if o.c() != j && o.c() != 2 * j {
            return Err(Error::InvalidInput(format!("output with {} channels for {j} joints", o.c())));
        }
    }
    let mut sum = Tensor::zeros([first.n(), j, h, w]);
    for o in outputs {
        let up = resize_bilinear(&o.channels(0..j), h, w);
        for (a, &b) in sum.data_mut().iter_mut().zip(up.data()) {
            *a += b;
        }
    }
    let inv = T::one() / T::of(outputs.len() as f64);
    let heat = sum.map(|v| v * inv);
    let tags = resize_bilinear(&first.channels(j..2 * j), h, w);
    Ok((heat, tags))
}

fn refine<T: Scalar>(d: &mut Detection<T>, heat: &Tensor<T>) {
    let (x, y) = (d.x.to_f64_lossy() as usize, d.y.to_f64_lossy() as usize);
    let [_, _, h, w] = heat.dims();
    let q = T::of(0.25);
    let v = |yy: usize, xx: usize| heat.at(0, d.joint, yy, xx);
    if x > 0 && x + 1 < w {
        let diff = v(y, x + 1) - v(y, x - 1);
        d.x += if diff > T::zero() { q } else if diff < T::zero() { -q } else { T::zero() };
    }
    if y > 0 && y + 1 < h {
        let diff = v(y + 1, x) - v(y - 1, x);
        d.y += if diff > T::zero() { q } else if diff < T::zero() { -q } else { T::zero() };
    }
}

/// Full decode of the first image of `outputs`.
pub fn decode<T: Scalar>(outputs: &[Tensor<T>], params: &DecodeParams) -> Result<KeypointSet<T>> {
    if params.window < 3 || params.window.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("NMS window {} must be odd and ≥ 3", params.window)));
    }
    let (heat, tags) = aggregate(outputs)?;
    let mut dets = nms_peaks(&heat, params.window, params.max_per_joint, T::of(params.threshold));
    for d in &mut dets {
        let (x, y) = (d.x.to_f64_lossy() as usize, d.y.to_f64_lossy() as usize);
        d.tag = tags.at(0, d.joint, y, x);
        if params.refine {
            refine(d, &heat);
        }
    }
    Ok(group_by_tags(&dets, heat.c(), T::of(params.tag_threshold)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(h: usize, w: usize, centres: &[(usize, usize)]) -> Tensor<f64> {
        Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
            centres
                .iter()
                .map(|&(cy, cx)| (-(((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)) / 8.0)).exp())
                .fold(0.0, f64::max)
        })
    }

    /// Every pixel that is the strict-or-first maximum of its window.
    fn brute_peaks(t: &Tensor<f64>, window: usize, thr: f64) -> Vec<(usize, usize)> {
        let [_, _, h, w] = t.dims();
        let r = window as isize / 2;
        let mut v = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = t.at(0, 0, y as usize, x as usize);
                let mut ok = p > thr;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qy, qx) = (y + dy, x + dx);
                        if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                            continue;
                        }
                        let q = t.at(0, 0, qy as usize, qx as usize);
                        if q > p || (q == p && (qy, qx) < (y, x)) {
                            ok = false;
                        }
                    }
                }
                if ok {
                    v.push((y as usize, x as usize));
                }
            }
        }
        v
    }

    #[test]
    fn single_gaussian_single_peak() {
        let t = gaussian(16, 16, &[(5, 9)]);
        let d = nms_peaks(&t, 5, 30, 0.1);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].y, d[0].x), (5.0, 9.0));
    }

    #[test]
    fn separated_gaussians_match_brute_force() {
        let t = gaussian(24, 24, &[(4, 4), (4, 15), (18, 10)]);
        let mut got: Vec<(usize, usize)> =
            nms_peaks(&t, 5, 30, 0.1).iter().map(|d| (d.y as usize, d.x as usize)).collect();
        got.sort();
        assert_eq!(got, brute_peaks(&t, 5, 0.1));
        assert_eq!(got, vec![(4, 4), (4, 15), (18, 10)]);
    }

    #[test]
    fn plateau_yields_first_pixel_only_when_above_threshold() {
        let t = Tensor::<f64>::from_fn([1, 1, 8, 8], |_, _, _, _| 0.05);
        assert!(nms_peaks(&t, 5, 30, 0.1).is_empty());
        let t = Tensor::<f64>::from_fn([1, 1, 3, 3], |_, _, _, _| 0.5);
        let d = nms_peaks(&t, 5, 30, 0.1);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].y, d[0].x), (0.0, 0.0));
    }

    fn det(joint: usize, score: f64, tag: f64) -> Detection<f64> {
        Detection { joint, x: joint as f64, y: score, score, tag }
    }

    #[test]
    fn two_tag_clusters() {
        let dets: Vec<_> = (0..4)
            .flat_map(|j| [det(j, 0.9 - j as f64 * 0.1, 0.1 * j as f64), det(j, 0.8, 10.0 - 0.1 * j as f64)])
            .collect();
        let set = group_by_tags(&dets, 4, 1.0);
        assert_eq!(set.persons.len(), 2);
        for p in &set.persons {
            assert!(p.keypoints.iter().all(|k| k.v == 2));
        }
        assert!(set.persons[0].tag < 1.0 && set.persons[1].tag > 9.0);
    }

    #[test]
    fn single_detection_single_person() {
        let set = group_by_tags(&[det(2, 0.7, 3.0)], 4, 1.0);
        assert_eq!(set.persons.len(), 1);
        assert_eq!(set.persons[0].keypoints.iter().filter(|k| k.v > 0).count(), 1);
        assert_eq!(set.persons[0].score, 0.7);
    }

    #[test]
    fn same_joint_conflicts_spawn_persons() {
        // Hand trace: joint 0 at 0.9 starts A; joint 0 at 0.8 cannot join A
        // (slot taken) and starts B; joint 1 joins A, the older tied person.
        let dets = [det(0, 0.9, 1.0), det(0, 0.8, 1.0), det(1, 0.5, 1.0)];
        let set = group_by_tags(&dets, 2, 1.0);
        assert_eq!(set.persons.len(), 2);
        assert_eq!(set.persons[0].keypoints[1].v, 2);
        assert_eq!(set.persons[1].keypoints[1].v, 0);
    }

    #[test]
    fn grouping_ignores_input_order() {
        let mut dets: Vec<_> = (0..3).flat_map(|j| [det(j, 0.5 + j as f64 * 0.1, 0.0), det(j, 0.4, 5.0)]).collect();
        let a = group_by_tags(&dets, 3, 1.0);
        dets.reverse();
        assert_eq!(group_by_tags(&dets, 3, 1.0), a);
    }

    #[test]
    fn identical_scales_equal_single_scale() {
        let mut heat = gaussian(16, 16, &[(4, 6)]).data().to_vec();
        heat.extend(vec![2.0; 256]);
        let out = Tensor::from_vec([1, 2, 16, 16], heat).unwrap();
        let one = decode(std::slice::from_ref(&out), &DecodeParams::default()).unwrap();
        let two = decode(&[out.clone(), out.channels(0..1)], &DecodeParams::default()).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.persons.len(), 1);
    }

    #[test]
    fn empty_heatmaps_empty_set() {
        let out = Tensor::<f32>::zeros([1, 28, 8, 8]);
        assert!(decode(&[out], &DecodeParams::default()).unwrap().persons.is_empty());
    }

    #[test]
    fn scale_mismatch_is_an_error() {
        let a = Tensor::<f32>::zeros([1, 4, 8, 8]);
        let b = Tensor::<f32>::zeros([1, 2, 12, 12]);
        assert!(decode(&[a, b], &DecodeParams::default()).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let t = gaussian(4, 4, &[(1, 1)]);
        assert_eq!(resize_bilinear(&t, 4, 4), t);
        let c = Tensor::<f64>::from_fn([1, 1, 3, 3], |_, _, _, _| 2.5);
        assert!(resize_bilinear(&c, 6, 6).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn raising_threshold_never_adds_detections() {
        let t = gaussian(24, 24, &[(4, 4), (4, 15), (18, 10)]).map(|v| v * 0.7);
        let mut last = usize::MAX;
        for thr in [0.0, 0.1, 0.3, 0.6, 0.69, 0.71] {
            let n = nms_peaks(&t, 5, 30, thr).len();
            assert!(n <= last);
            last = n;
        }
        assert_eq!(last, 0);
    }
}
