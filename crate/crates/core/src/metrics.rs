//! MPJPE and Procrustes-aligned MPJPE.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::pose::Pose3D;

fn check(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::SkeletonMismatch(format!(
            "prediction has {} joints, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn mean_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    total / a.len() as f64
}

/// Mean per-joint position error. Inputs are expected root-centred; see
/// [`root_centered_mpjpe`].
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check(pred, gt)?;
    Ok(mean_distance(&pred.joints, &gt.joints))
}

pub fn root_centered_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    mpjpe(&pred.root_centered(), &gt.root_centered())
}

/// Best similarity transform (scale, rotation, translation) taking `pred`
/// onto `gt` in the least-squares sense.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    check(pred, gt)?;
    let to_vecs =
        |p: &Pose3D| -> Vec<Vector3<f64>> { p.joints.iter().map(|j| Vector3::new(j[0], j[1], j[2])).collect() };
    let (x, y) = (to_vecs(gt), to_vecs(pred));
    let n = x.len() as f64;
    let mu_x = x.iter().sum::<Vector3<f64>>() / n;
    let mu_y = y.iter().sum::<Vector3<f64>>() / n;
    let x0: Vec<_> = x.iter().map(|v| v - mu_x).collect();
    let y0: Vec<_> = y.iter().map(|v| v - mu_y).collect();
    let var_x: f64 = x0.iter().map(|v| v.norm_squared()).sum();
    if var_x <= f64::EPSILON {
        return Err(Error::DegeneratePose("ground truth has zero spatial variance".into()));
    }
    let var_y: f64 = y0.iter().map(|v| v.norm_squared()).sum();
    if var_y <= f64::EPSILON {
        // Any rotation works; the best fit collapses onto the centroid.
        return Ok(Pose3D::new(vec![[mu_x.x, mu_x.y, mu_x.z]; x.len()]));
    }
    let cov: Matrix3<f64> = x0.iter().zip(&y0).map(|(a, b)| a * b.transpose()).sum();
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * v_t;
    let scale = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_y;
    Ok(Pose3D::new(
        y0.iter()
            .map(|v| {
                let a = rot * v * scale + mu_x;
                [a.x, a.y, a.z]
            })
            .collect(),
    ))
}

/// MPJPE after optimal similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let aligned = procrustes_align(pred, gt)?;
    Ok(mean_distance(&aligned.joints, &gt.joints))
}

/// Mean root-centred MPJPE and PA-MPJPE over paired batches.
pub fn batch_errors(preds: &[Pose3D], gts: &[Pose3D]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::shape(gts.len(), preds.len()));
    }
    let mut m = 0.0;
    let mut pa = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        m += root_centered_mpjpe(p, g)?;
        pa += pa_mpjpe(p, g)?;
    }
    let n = preds.len() as f64;
    Ok((m / n, pa / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose3D {
        Pose3D::new(
            (0..16)
                .map(|_| {
                    [
                        rng.random_range(-800.0..800.0),
                        rng.random_range(-800.0..800.0),
                        rng.random_range(-800.0..800.0),
                    ]
                })
                .collect(),
        )
    }

    fn similarity(p: &Pose3D, rng: &mut impl Rng, s: f64) -> Pose3D {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let r = Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0));
        let t = Vector3::new(120.0, -40.0, 800.0);
        Pose3D::new(
            p.joints
                .iter()
                .map(|j| {
                    let v = r * Vector3::new(j[0], j[1], j[2]) * s + t;
                    [v.x, v.y, v.z]
                })
                .collect(),
        )
    }

    #[test]
    fn identity_and_three_four_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_pose(&mut rng);
        assert_eq!(mpjpe(&p, &p).unwrap(), 0.0);
        let gt = Pose3D::zeros(16);
        let pred = Pose3D::new(vec![[3.0, 4.0, 0.0]; 16]);
        assert_eq!(mpjpe(&pred, &gt).unwrap(), 5.0);
        // A uniform offset disappears once both poses are root-centred.
        assert_eq!(root_centered_mpjpe(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn mpjpe_matches_direct_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let (ac, bc) = (a.root_centered(), b.root_centered());
            let mut s = 0.0;
            for j in 0..16 {
                let d: f64 = (0..3).map(|k| (ac.joints[j][k] - bc.joints[j][k]).powi(2)).sum();
                s += d.sqrt();
            }
            assert!((root_centered_mpjpe(&a, &b).unwrap() - s / 16.0).abs() < 1e-12);
            assert_eq!(mpjpe(&a, &b).unwrap(), mpjpe(&b, &a).unwrap());
        }
    }

    #[test]
    fn similarity_copy_aligns_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let gt = random_pose(&mut rng);
            let pred = similarity(&gt, &mut rng, 1.3);
            assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-6);
        }
    }

    #[test]
    fn pa_never_exceeds_mpjpe() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            assert!(pa_mpjpe(&a, &b).unwrap() <= root_centered_mpjpe(&a, &b).unwrap() + 1e-9);
        }
    }

    #[test]
    fn invariant_to_similarity_of_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, gt) = (random_pose(&mut rng), random_pose(&mut rng));
        let moved = similarity(&a, &mut rng, 0.7);
        let (e1, e2) = (pa_mpjpe(&a, &gt).unwrap(), pa_mpjpe(&moved, &gt).unwrap());
        assert!((e1 - e2).abs() < 1e-6);
    }

    #[test]
    fn degenerate_ground_truth() {
        let p = random_pose(&mut ChaCha8Rng::seed_from_u64(5));
        let gt = Pose3D::new(vec![[1.0, 2.0, 3.0]; 16]);
        assert!(matches!(pa_mpjpe(&p, &gt), Err(Error::DegeneratePose(_))));
    }

    #[test]
    fn mismatched_joint_counts() {
        let a = Pose3D::zeros(16);
        let b = Pose3D::zeros(15);
        assert!(matches!(mpjpe(&a, &b), Err(Error::SkeletonMismatch(_))));
    }
}
