//! Object keypoint similarity and COCO-style average precision.
//!
//! `OKS = Σᵢ exp(−dᵢ² / 2s²kᵢ²)·δ(vᵢ>0) / Σᵢ δ(vᵢ>0)` over the ground-truth
//! visible joints, with `s² ` the object area. AP averages 101-point
//! interpolated precision over OKS thresholds 0.50, 0.55, …, 0.95. A dataset
//! without any ground-truth person has AP 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct OksParams<T> {
    /// Object scale: square root of the object area.
    pub s: T,
    /// Per-joint falloff constants.
    pub k: Vec<T>,
}

impl<T: Scalar> OksParams<T> {
    pub fn new(s: T, k: Vec<T>) -> Result<Self> {
        if !(s > T::zero()) || k.is_empty() || k.iter().any(|&k| !(k > T::zero())) {
            return Err(Error::InvalidInput("OKS scale and constants must be positive".into()));
        }
        Ok(Self { s, k })
    }
}

#[derive(Deserialize)]
struct SigmaTable {
    sigmas: Vec<f64>,
}

/// Per-joint constants `k = 2σ` for `coco` (17 joints) or `crowdpose` (14).
pub fn joint_constants(table: &str) -> Result<Vec<f64>> {
    let text = match table.to_ascii_lowercase().as_str() {
        "coco" => include_str!("../data/coco_sigmas.json"),
        "crowdpose" => include_str!("../data/crowdpose_sigmas.json"),
        other => return Err(Error::InvalidInput(format!("unknown keypoint table `{other}`"))),
    };
    let t: SigmaTable = serde_json::from_str(text).map_err(|e| Error::json(table, e))?;
    Ok(t.sigmas.iter().map(|s| 2.0 * s).collect())
}

/// Constants for `num_joints` joints: the matching bundled table.
pub fn joint_constants_for(num_joints: usize) -> Result<Vec<f64>> {
    match num_joints {
        17 => joint_constants("coco"),
        14 => joint_constants("crowdpose"),
        n => Err(Error::InvalidInput(format!("no bundled keypoint constants for {n} joints"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Person<T> {
    /// `(x, y, v)` per joint.
    pub keypoints: Vec<[T; 3]>,
    pub score: T,
    /// Object area (ground truth only).
    pub area: T,
}

impl<T: Scalar> Person<T> {
    pub fn from_flat(keypoints: &[f64], score: f64, area: f64) -> Result<Self> {
        if !keypoints.len().is_multiple_of(3) {
            return Err(Error::InvalidInput(format!("{} keypoint values is not a multiple of 3", keypoints.len())));
        }
        Ok(Self {
            keypoints: keypoints.chunks_exact(3).map(|c| [T::of(c[0]), T::of(c[1]), T::of(c[2])]).collect(),
            score: T::of(score),
            area: T::of(area),
        })
    }

    pub fn visible(&self) -> usize {
        self.keypoints.iter().filter(|k| k[2] > T::zero()).count()
    }
}

pub fn oks<T: Scalar>(gt: &Person<T>, pred: &Person<T>, p: &OksParams<T>) -> Result<T> {
    if gt.keypoints.len() != p.k.len() || pred.keypoints.len() != p.k.len() {
        return Err(Error::InvalidInput(format!(
            "{} ground-truth and {} predicted joints for {} constants",
            gt.keypoints.len(),
            pred.keypoints.len(),
            p.k.len()
        )));
    }
    let two = T::of(2.0);
    let mut num = T::zero();
    let mut den = 0usize;
    for ((g, q), &k) in gt.keypoints.iter().zip(&pred.keypoints).zip(&p.k) {
        if g[2] > T::zero() {
            let d2 = (g[0] - q[0]).powi(2) + (g[1] - q[1]).powi(2);
            num += (-d2 / (two * p.s * p.s * k * k)).exp();
            den += 1;
        }
    }
    if den == 0 {
        return Err(Error::InvalidInput("ground truth has no visible joints".into()));
    }
    Ok(num / T::of(den as f64))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalImage<T> {
    pub gt: Vec<Person<T>>,
    pub pred: Vec<Person<T>>,
}

/// OKS thresholds 0.50:0.05:0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrRow {
    pub oks_threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(threshold, AP)` for every threshold averaged into `ap`.
    pub per_threshold: Vec<(f64, f64)>,
    /// Interpolated precision at the 101 recall points, per threshold.
    pub pr: Vec<PrRow>,
}

impl ApReport {
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("oks_threshold,recall,precision\n");
        for r in &self.pr {
            s.push_str(&format!("{:.2},{:.2},{:.6}\n", r.oks_threshold, r.recall, r.precision));
        }
        s
    }
}

/// 101-point interpolated AP at one threshold and its precision curve.
fn ap_at(dataset: &[EvalImage<f64>], k: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
    // (score, is_tp) for every prediction of every image.
    let mut marks: Vec<(f64, bool)> = Vec::new();
    let mut npos = 0usize;
    for img in dataset {
        let gts: Vec<&Person<f64>> = img.gt.iter().filter(|g| g.visible() > 0).collect();
        npos += gts.len();
        let params: Vec<OksParams<f64>> = gts
            .iter()
            .map(|g| OksParams::new(g.area.sqrt(), k.to_vec()))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..img.pred.len()).collect();
        order.sort_by(|&a, &b| img.pred[b].score.total_cmp(&img.pred[a].score));
        let mut taken = vec![false; gts.len()];
        for &pi in &order {
            let pred = &img.pred[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let o = oks(g, pred, &params[gi])?;
                if o >= t && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            marks.push((pred.score, best.is_some()));
        }
    }
    let recall_points: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    if npos == 0 {
        return Ok((0.0, vec![0.0; recall_points.len()]));
    }
    // Stable, so equal scores keep image order.
    marks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(marks.len());
    let mut precision = Vec::with_capacity(marks.len());
    for &(_, is_tp) in &marks {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let q: Vec<f64> = recall_points
        .iter()
        .map(|&r| {
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .collect();
    Ok((q.iter().sum::<f64>() / q.len() as f64, q))
}

/// AP averaged over `thresholds`, plus AP at 0.50 and 0.75.
pub fn average_precision(dataset: &[EvalImage<f64>], k: &[f64], thresholds: &[f64]) -> Result<ApReport> {
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    let mut pr = Vec::new();
    for &t in thresholds {
        let (ap, q) = ap_at(dataset, k, t)?;
        per_threshold.push((t, ap));
        pr.extend(q.iter().enumerate().map(|(i, &p)| PrRow { oks_threshold: t, recall: i as f64 / 100.0, precision: p }));
    }
    let ap = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, a)| a).sum::<f64>() / per_threshold.len() as f64
    };
    let at = |t: f64| -> Result<f64> {
        match per_threshold.iter().find(|(x, _)| (x - t).abs() < 1e-12) {
            Some(&(_, a)) => Ok(a),
            None => Ok(ap_at(dataset, k, t)?.0),
        }
    };
    Ok(ApReport { ap50: at(0.5)?, ap75: at(0.75)?, ap, per_threshold, pr })
}

#[derive(Deserialize)]
struct GtFile {
    annotations: Vec<GtAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub image_id: u64,
    pub keypoints: Vec<f64>,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredAnnotation {
    pub image_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

/// Build per-image pairs from a ground-truth file (`{"annotations": […]}`)
/// and a prediction list (`[{image_id, keypoints, score}, …]`).
pub fn load_dataset(gt_json: &str, pred_json: &str) -> Result<Vec<EvalImage<f64>>> {
    let gt: GtFile = serde_json::from_str(gt_json).map_err(|e| Error::json("ground truth", e))?;
    let preds: Vec<PredAnnotation> = serde_json::from_str(pred_json).map_err(|e| Error::json("predictions", e))?;
    let mut images: BTreeMap<u64, EvalImage<f64>> = BTreeMap::new();
    for a in gt.annotations {
        images.entry(a.image_id).or_default().gt.push(Person::from_flat(&a.keypoints, 1.0, a.area)?);
    }
    for p in preds {
        images.entry(p.image_id).or_default().pred.push(Person::from_flat(&p.keypoints, p.score, 0.0)?);
    }
    Ok(images.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn person(kp: &[(f64, f64, f64)], score: f64, area: f64) -> Person<f64> {
        Person { keypoints: kp.iter().map(|&(x, y, v)| [x, y, v]).collect(), score, area }
    }

    #[test]
    fn constants_tables() {
        let c = joint_constants("crowdpose").unwrap();
        assert_eq!(c.len(), 14);
        assert!((c[0] - 0.158).abs() < 1e-12);
        assert_eq!(joint_constants("coco").unwrap().len(), 17);
        assert!(joint_constants("mpii").is_err());
    }

    #[test]
    fn perfect_match_is_one() {
        let g = person(&[(1.0, 2.0, 2.0), (5.0, 5.0, 1.0)], 1.0, 100.0);
        let p = OksParams::new(10.0, vec![0.1, 0.2]).unwrap();
        assert_eq!(oks(&g, &g, &p).unwrap(), 1.0);
    }

    #[test]
    fn one_over_e() {
        let (s, k) = (3.0f64, 0.5f64);
        let d = (2.0 * s * s * k * k).sqrt();
        let g = person(&[(0.0, 0.0, 2.0)], 1.0, 9.0);
        let q = person(&[(d, 0.0, 2.0)], 1.0, 0.0);
        let o = oks(&g, &q, &OksParams::new(s, vec![k]).unwrap()).unwrap();
        assert!((o - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn invisible_joints_ignored() {
        let g = person(&[(0.0, 0.0, 2.0), (3.0, 3.0, 0.0)], 1.0, 4.0);
        let a = person(&[(0.5, 0.0, 2.0), (3.0, 3.0, 2.0)], 1.0, 0.0);
        let b = person(&[(0.5, 0.0, 2.0), (300.0, -8.0, 2.0)], 1.0, 0.0);
        let p = OksParams::new(2.0, vec![0.3, 0.3]).unwrap();
        assert_eq!(oks(&g, &a, &p).unwrap(), oks(&g, &b, &p).unwrap());
    }

    #[test]
    fn no_visible_joints_is_an_error() {
        let g = person(&[(0.0, 0.0, 0.0)], 1.0, 4.0);
        assert!(oks(&g, &g, &OksParams::new(2.0, vec![0.3]).unwrap()).is_err());
    }

    fn image(gt: Vec<Person<f64>>, pred: Vec<Person<f64>>) -> EvalImage<f64> {
        EvalImage { gt, pred }
    }

    #[test]
    fn perfect_predictions() {
        let g = person(&[(10.0, 10.0, 2.0), (20.0, 12.0, 2.0)], 1.0, 400.0);
        let ds = vec![image(vec![g.clone()], vec![g.clone()]), image(vec![g.clone()], vec![g])];
        let r = average_precision(&ds, &[0.1, 0.1], &oks_thresholds()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn oks_point_six() {
        // One joint: OKS = exp(−d²/2s²k²) = 0.6 → d² = −2s²k² ln 0.6.
        let (s, k) = (10.0f64, 0.1f64);
        let d = (-2.0 * s * s * k * k * 0.6f64.ln()).sqrt();
        let g = person(&[(0.0, 0.0, 2.0)], 1.0, s * s);
        let p = person(&[(d, 0.0, 2.0)], 0.9, 0.0);
        let r = average_precision(&[image(vec![g], vec![p])], &[k], &oks_thresholds()).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
        // TP at 0.50, 0.55, 0.60 only (0.6 ≥ 0.60 modulo rounding of d).
        let tps = r.per_threshold.iter().filter(|(_, a)| *a == 1.0).count();
        assert!(tps == 2 || tps == 3, "{:?}", r.per_threshold);
    }

    #[test]
    fn duplicate_prediction_is_fp() {
        let g = person(&[(5.0, 5.0, 2.0)], 1.0, 100.0);
        let p1 = Person { score: 0.9, ..g.clone() };
        let p2 = Person { score: 0.8, ..g.clone() };
        let ds = [image(vec![g], vec![p1, p2])];
        // Recall reaches 1 at the first prediction with precision 1; the FP
        // comes after and interpolation keeps precision 1.
        let r = average_precision(&ds, &[0.1], &oks_thresholds()).unwrap();
        assert_eq!(r.ap, 1.0);
        // With the duplicate scoring higher, precision at full recall is 1/2.
        let g = person(&[(5.0, 5.0, 2.0)], 1.0, 100.0);
        let bad = person(&[(50.0, 50.0, 2.0)], 0.95, 0.0);
        let ds = [image(vec![g.clone()], vec![bad, Person { score: 0.9, ..g }])];
        let r = average_precision(&ds, &[0.1], &[0.5]).unwrap();
        assert!((r.ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_zero() {
        let r = average_precision(&[], &[0.1], &oks_thresholds()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn json_loading() {
        let gt = r#"{"images":[{"id":1}],"annotations":[{"image_id":1,"keypoints":[1,2,2],"area":4.0}]}"#;
        let pr = r#"[{"image_id":1,"keypoints":[1,2,2],"score":0.5,"category_id":1}]"#;
        let ds = load_dataset(gt, pr).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(average_precision(&ds, &[0.1], &oks_thresholds()).unwrap().ap, 1.0);
    }

    proptest! {
        #[test]
        fn oks_in_unit_interval_and_decreasing(
            d1 in 0.0f64..50.0, extra in 0.01f64..50.0, other in 0.0f64..50.0, s in 1.0f64..40.0,
        ) {
            let g = person(&[(0.0, 0.0, 2.0), (10.0, 10.0, 2.0)], 1.0, s * s);
            let p = OksParams::new(s, vec![0.2, 0.3]).unwrap();
            let near = person(&[(d1, 0.0, 2.0), (10.0 + other, 10.0, 2.0)], 1.0, 0.0);
            let far = person(&[(d1 + extra, 0.0, 2.0), (10.0 + other, 10.0, 2.0)], 1.0, 0.0);
            let (a, b) = (oks(&g, &near, &p).unwrap(), oks(&g, &far, &p).unwrap());
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!(b < a || (a - b).abs() < 1e-300);
        }

        #[test]
        fn ap_invariant_to_score_rescaling(
            offsets in prop::collection::vec((0.0f64..6.0, 0.01f64..1.0), 1..8), c in 0.1f64..100.0,
        ) {
            let g = person(&[(0.0, 0.0, 2.0), (4.0, 0.0, 2.0)], 1.0, 25.0);
            let preds: Vec<_> = offsets
                .iter()
                .map(|&(d, sc)| person(&[(d, 0.0, 2.0), (4.0 + d, 0.0, 2.0)], sc, 0.0))
                .collect();
            let scaled: Vec<_> = preds.iter().map(|p| Person { score: p.score * c, ..p.clone() }).collect();
            let k = [0.3, 0.3];
            let a = average_precision(&[image(vec![g.clone()], preds)], &k, &oks_thresholds()).unwrap();
            let b = average_precision(&[image(vec![g], scaled)], &k, &oks_thresholds()).unwrap();
            prop_assert_eq!(a.ap, b.ap);
        }

        #[test]
        fn top_true_positive_never_lowers_ap(
            offsets in prop::collection::vec((0.0f64..8.0, 0.01f64..0.99), 0..6), extra_gt in 0usize..3,
        ) {
            let g = person(&[(0.0, 0.0, 2.0)], 1.0, 25.0);
            let mut gts: Vec<_> = (0..extra_gt).map(|i| person(&[(100.0 * (i + 1) as f64, 0.0, 2.0)], 1.0, 25.0)).collect();
            gts.push(g.clone());
            let preds: Vec<_> = offsets.iter().map(|&(d, s)| person(&[(d, 0.0, 2.0)], s, 0.0)).collect();
            let before = average_precision(&[image(gts.clone(), preds.clone())], &[0.3], &oks_thresholds()).unwrap();
            let mut with = preds;
            with.push(Person { score: 1.0, ..g });
            let after = average_precision(&[image(gts, with)], &[0.3], &oks_thresholds()).unwrap();
            prop_assert!(after.ap >= before.ap - 1e-12, "{} < {}", after.ap, before.ap);
        }
    }
}
