//! Pose, size and shape accuracy metrics and their summary table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::pose::{dot, geodesic_angle, mat_vec, norm, sub, Pose, Vec3};

/// Rotational symmetry of a shape in its canonical frame: any rotation
/// about `axis`, and with `flip` also the half turns that reverse it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Symmetry {
    pub axis: Vec3,
    pub flip: bool,
}

/// Rotation error in degrees and translation error in centimetres, for
/// poses whose translations are in metres.
///
/// With a symmetry the rotation error is the angle between the axis as
/// placed by each pose (or its reverse, under `flip`), which is the
/// geodesic error minimized over the symmetry group.
pub fn pose_error(pred: &Pose, gt: &Pose, symmetry: Option<Symmetry>) -> (f64, f64) {
    let rot = match symmetry {
        None => geodesic_angle(pred.rotation, gt.rotation),
        Some(sym) => {
            let a = mat_vec(&pred.matrix(), &sym.axis);
            let b = mat_vec(&gt.matrix(), &sym.axis);
            let c = dot(&a, &b) / (norm(&a) * norm(&b));
            (if sym.flip { c.abs() } else { c }).clamp(-1.0, 1.0).acos()
        }
    };
    let trans = norm(&sub(&pred.translation, &gt.translation));
    (rot.to_degrees(), trans * 100.0)
}

/// One evaluated instance. Column order is the CSV layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub category: String,
    pub symmetric: bool,
    pub gt_qw: f64,
    pub gt_qx: f64,
    pub gt_qy: f64,
    pub gt_qz: f64,
    pub gt_tx: f64,
    pub gt_ty: f64,
    pub gt_tz: f64,
    pub gt_scale: f64,
    pub pred_qw: f64,
    pub pred_qx: f64,
    pub pred_qy: f64,
    pub pred_qz: f64,
    pub pred_tx: f64,
    pub pred_ty: f64,
    pub pred_tz: f64,
    pub pred_scale: f64,
    pub rot_err_deg: f64,
    pub trans_err_cm: f64,
    /// Translation error divided by the ground-truth size.
    pub trans_err_rel: f64,
    pub iou: f64,
    pub cd: f64,
}

impl EvalRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: &str,
        category: &str,
        symmetry: Option<Symmetry>,
        gt: &Pose,
        gt_scale: f64,
        pred: &Pose,
        pred_scale: f64,
        iou: f64,
        cd: f64,
    ) -> Self {
        let (rot, cm) = pose_error(pred, gt, symmetry);
        Self {
            id: id.to_string(),
            category: category.to_string(),
            symmetric: symmetry.is_some(),
            gt_qw: gt.rotation[0],
            gt_qx: gt.rotation[1],
            gt_qy: gt.rotation[2],
            gt_qz: gt.rotation[3],
            gt_tx: gt.translation[0],
            gt_ty: gt.translation[1],
            gt_tz: gt.translation[2],
            gt_scale,
            pred_qw: pred.rotation[0],
            pred_qx: pred.rotation[1],
            pred_qy: pred.rotation[2],
            pred_qz: pred.rotation[3],
            pred_tx: pred.translation[0],
            pred_ty: pred.translation[1],
            pred_tz: pred.translation[2],
            pred_scale,
            rot_err_deg: rot,
            trans_err_cm: cm,
            trans_err_rel: cm / 100.0 / gt_scale,
            iou,
            cd,
        }
    }
}

/// Fraction of records with rotation error below `a_deg` and translation error below `b_cm`.
pub fn accuracy_at(records: &[EvalRecord], a_deg: f64, b_cm: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy over no records".into()));
    }
    let hits = records.iter().filter(|r| r.rot_err_deg < a_deg && r.trans_err_cm < b_cm).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction with rotation error below `a_deg` and size-relative translation error below `rel`.
pub fn relative_accuracy_at(records: &[EvalRecord], a_deg: f64, rel: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy over no records".into()));
    }
    let hits = records.iter().filter(|r| r.rot_err_deg < a_deg && r.trans_err_rel < rel).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction with IoU at or above `threshold`.
pub fn iou_accuracy(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy over no records".into()));
    }
    Ok(records.iter().filter(|r| r.iou >= threshold).count() as f64 / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(rename = "IoU50")]
    pub iou50: f64,
    #[serde(rename = "IoU75")]
    pub iou75: f64,
    #[serde(rename = "5deg2cm")]
    pub deg5_cm2: f64,
    #[serde(rename = "5deg5cm")]
    pub deg5_cm5: f64,
    #[serde(rename = "10deg2cm")]
    pub deg10_cm2: f64,
    #[serde(rename = "10deg5cm")]
    pub deg10_cm5: f64,
    pub mean_cd: f64,
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    Ok(Summary {
        count: records.len(),
        iou50: iou_accuracy(records, 0.5)?,
        iou75: iou_accuracy(records, 0.75)?,
        deg5_cm2: accuracy_at(records, 5.0, 2.0)?,
        deg5_cm5: accuracy_at(records, 5.0, 5.0)?,
        deg10_cm2: accuracy_at(records, 10.0, 2.0)?,
        deg10_cm5: accuracy_at(records, 10.0, 5.0)?,
        mean_cd: records.iter().map(|r| r.cd).sum::<f64>() / records.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::{axis_angle, quat_mul};

    fn record(rot: f64, cm: f64) -> EvalRecord {
        let mut r = EvalRecord::new("x", "box", None, &Pose::identity(), 1.0, &Pose::identity(), 1.0, 1.0, 0.0);
        r.rot_err_deg = rot;
        r.trans_err_cm = cm;
        r
    }

    #[test]
    fn pose_error_cases() {
        let gt = Pose::new(axis_angle([0.2, 0.3, 1.0], 0.4), [0.1, 0.2, 0.3]).unwrap();
        assert_eq!(pose_error(&gt, &gt, None), (0.0, 0.0));
        let quarter = Pose::new(quat_mul(gt.rotation, axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2)), gt.translation).unwrap();
        assert!((pose_error(&quarter, &gt, None).0 - 90.0).abs() < 1e-9);
        let spin = Symmetry { axis: [0.0, 0.0, 1.0], flip: false };
        assert!(pose_error(&quarter, &gt, Some(spin)).0 < 1e-6);
        let over = Pose::new(quat_mul(gt.rotation, axis_angle([1.0, 0.0, 0.0], 3.0)), gt.translation).unwrap();
        assert!((pose_error(&over, &gt, Some(spin)).0 - 3.0f64.to_degrees()).abs() < 1e-6);
        let both = Symmetry { flip: true, ..spin };
        assert!((pose_error(&over, &gt, Some(both)).0 - (180.0 - 3.0f64.to_degrees())).abs() < 1e-6);
        let moved = Pose::new(gt.rotation, [0.1, 0.2, 0.33]).unwrap();
        assert!((pose_error(&moved, &gt, None).1 - 3.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_error_ignores_spin_about_the_axis() {
        let pred = Pose::new(axis_angle([1.0, 0.0, 0.2], 0.3), [0.0; 3]).unwrap();
        let gt = Pose::new(axis_angle([0.0, 1.0, 0.0], 0.1), [0.0; 3]).unwrap();
        let spin = Some(Symmetry { axis: [0.0, 0.0, 1.0], flip: false });
        let base = pose_error(&pred, &gt, spin).0;
        for k in 0..8 {
            let spun = Pose::new(quat_mul(gt.rotation, axis_angle([0.0, 0.0, 1.0], 0.7 * k as f64)), [0.0; 3]).unwrap();
            assert!((pose_error(&pred, &spun, spin).0 - base).abs() < 1e-9);
        }
    }

    #[test]
    fn accuracy_hand_counts() {
        let rs = vec![record(3.0, 1.0), record(7.0, 1.5), record(4.0, 6.0)];
        assert_eq!(accuracy_at(&rs, 5.0, 2.0).unwrap(), 1.0 / 3.0);
        assert_eq!(accuracy_at(&rs, 10.0, 2.0).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy_at(&rs, 10.0, 10.0).unwrap(), 1.0);
        assert_eq!(accuracy_at(&rs, 0.0, 0.0).unwrap(), 0.0);
        assert!(accuracy_at(&[], 5.0, 5.0).is_err());
        let exact = vec![record(0.0, 0.0); 4];
        assert_eq!(accuracy_at(&exact, 1e-9, 1e-9).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_is_monotone_in_thresholds() {
        let rs: Vec<_> = (0..20).map(|i| record(i as f64 * 0.7, (i * 7 % 11) as f64)).collect();
        let mut prev = 0.0;
        for a in 0..15 {
            let v = accuracy_at(&rs, a as f64, 5.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        prev = 0.0;
        for b in 0..15 {
            let v = accuracy_at(&rs, 10.0, b as f64).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }
}
