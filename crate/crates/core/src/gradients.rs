//! Reverse-mode derivative of the final ICP pose error with respect to the scan
//! points, through a fixed number of unrolled point-to-plane iterations.
//!
//! Data association and trimming are piecewise constant and carry no gradient.
//! Each Gauss-Newton solve `H delta = -g` is differentiated implicitly: the
//! adjoint `a = H^-1 delta_bar` reuses the forward Cholesky factor, and the
//! sensitivity of every point enters through `dH` and `dg`. Pose adjoints are
//! left-perturbation 6-vectors, matching the left update `T <- exp(delta) T`.

use nalgebra::{Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AdversarialObjective;
use crate::error::{Error, Result};
use crate::geometry::{
    exp_se3, left_jacobian_se3, left_jacobian_se3_inv, log_se3, Pose, PoseError,
};
use crate::icp::{
    cauchy_weight_derivative, free_dofs, jacobian_row, run_icp_recorded, IcpConfig, IcpResult,
    IterationRecord, MapModel,
};
use crate::pointcloud::PointCloud;

pub const DEFAULT_UNROLL: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub unroll_iterations: usize,
    pub icp: IcpConfig,
    pub fd_epsilon: f64,
    /// Differentiate the Cauchy weights through the residuals; when false the
    /// weights are treated as constants of each solve.
    pub differentiate_weights: bool,
}

impl GradientConfig {
    pub fn new(icp: IcpConfig) -> Self {
        Self {
            unroll_iterations: DEFAULT_UNROLL,
            icp,
            fd_epsilon: 1e-5,
            differentiate_weights: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll_iterations == 0 {
            return Err(Error::invalid("unroll_iterations must be at least 1"));
        }
        if !(self.fd_epsilon > 0.0) {
            return Err(Error::invalid("fd_epsilon must be positive"));
        }
        self.icp.validate()
    }

    fn forward_config(&self) -> IcpConfig {
        self.icp.clone().with_max_iterations(self.unroll_iterations)
    }
}

/// Forward record of an unrolled ICP solve.
#[derive(Clone, Debug)]
pub struct Tape {
    pub iterations: Vec<IterationRecord>,
    pub final_pose: Pose,
    pub scan_len: usize,
    cauchy_k: f64,
    free: Vec<usize>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// `(scan index, map index)` pairs per iteration.
    pub fn association_signature(&self) -> Vec<Vec<(usize, usize)>> {
        self.iterations
            .iter()
            .map(|it| {
                it.correspondences
                    .iter()
                    .map(|c| (c.scan_index, c.map_index))
                    .collect()
            })
            .collect()
    }
}

/// Runs ICP for at most `unroll_iterations` and records every step.
pub fn icp_forward_with_tape(
    scan: &PointCloud,
    map: &MapModel,
    config: &GradientConfig,
) -> Result<(IcpResult, Tape)> {
    config.validate()?;
    let forward = config.forward_config();
    let mut records = Vec::with_capacity(config.unroll_iterations);
    let result = run_icp_recorded(scan, map, &forward, Some(&mut records))?;
    let tape = Tape {
        iterations: records,
        final_pose: result.estimate,
        scan_len: scan.len(),
        cauchy_k: forward.cauchy_k,
        free: free_dofs(&forward.dof_mask),
    };
    Ok((result, tape))
}

/// Gradient of the adversarial loss with respect to every scan point.
pub fn pose_error_gradient(
    tape: &Tape,
    ground_truth: &Pose,
    objective: &AdversarialObjective,
) -> Result<Vec<Vector3<f64>>> {
    pose_error_gradient_with(tape, ground_truth, objective, true)
}

pub fn pose_error_gradient_with(
    tape: &Tape,
    ground_truth: &Pose,
    objective: &AdversarialObjective,
    differentiate_weights: bool,
) -> Result<Vec<Vector3<f64>>> {
    let xi = log_se3(&tape.final_pose.compose(&ground_truth.inverse()));
    let xi_bar = objective.gradient(&PoseError::from_twist(&xi));
    let pose_bar = left_jacobian_se3_inv(&xi).transpose() * xi_bar;
    backpropagate(tape, pose_bar, differentiate_weights)
}

/// Pulls a left-perturbation adjoint of the final pose back to the scan points.
pub fn backpropagate(
    tape: &Tape,
    final_pose_bar: Vector6<f64>,
    differentiate_weights: bool,
) -> Result<Vec<Vector3<f64>>> {
    let mut grad = vec![Vector3::zeros(); tape.scan_len];
    let mut pose_bar = final_pose_bar;
    let k = tape.cauchy_k;

    for rec in tape.iterations.iter().rev() {
        let solve = &rec.solve;
        if !solve.delta.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateGeometry {
                iteration: 0,
                condition: f64::INFINITY,
            });
        }
        let delta = solve.delta;
        let step = exp_se3(&delta);
        let mut prev_bar = step.adjoint().transpose() * pose_bar;
        let delta_bar_full = left_jacobian_se3(&delta).transpose() * pose_bar;

        let delta_bar = nalgebra::DVector::from_iterator(
            tape.free.len(),
            tape.free.iter().map(|&d| delta_bar_full[d]),
        );
        let a_free = solve.factor.solve(&delta_bar);
        let mut a = Vector6::zeros();
        for (i, &d) in tape.free.iter().enumerate() {
            a[d] = a_free[i];
        }
        let a_rot = Vector3::new(a[3], a[4], a[5]);
        let d_rot = Vector3::new(delta[3], delta[4], delta[5]);
        let rt = rec.pose.rotation.transpose();

        for (idx, c) in rec.correspondences.iter().enumerate() {
            let y = rec.pose.transform_point(&c.source);
            let n = c.normal;
            let r = solve.residuals[idx];
            let w = solve.weights[idx];
            let row = Vector6::from(jacobian_row(&y, &n));
            let s_a = a.dot(&row);
            let fitted = delta.dot(&row) + r;
            let mut y_bar =
                n.cross(&a_rot) * (w * fitted) + n.cross(&d_rot) * (w * s_a) + n * (w * s_a);
            if differentiate_weights {
                y_bar += n * (cauchy_weight_derivative(r, k) * s_a * fitted);
            }
            let y_bar = -y_bar;
            grad[c.scan_index] += rt * y_bar;
            let moment = y.cross(&y_bar);
            prev_bar += Vector6::new(y_bar.x, y_bar.y, y_bar.z, moment.x, moment.y, moment.z);
        }
        pose_bar = prev_bar;
    }
    Ok(grad)
}

/// Adversarial loss of the unrolled solve, as seen by the gradient.
pub fn unrolled_loss(
    scan: &PointCloud,
    map: &MapModel,
    config: &GradientConfig,
    ground_truth: &Pose,
    objective: &AdversarialObjective,
) -> Result<(f64, Tape)> {
    let (_, tape) = icp_forward_with_tape(scan, map, config)?;
    let err = crate::geometry::pose_error(&tape.final_pose, ground_truth);
    Ok((objective.loss(&err), tape))
}

/// One probed coordinate of a finite-difference check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub point: usize,
    pub axis: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub probes: Vec<ProbeResult>,
    /// Coordinates skipped because the association changed within `+-epsilon`.
    pub excluded: usize,
    pub pass_fraction: f64,
}

impl GradCheckReport {
    pub fn passes(&self, required_fraction: f64) -> bool {
        !self.probes.is_empty() && self.pass_fraction >= required_fraction
    }
}

/// Relative error with an absolute floor so that vanishing gradients compare equal.
pub const GRADCHECK_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Checks [`pose_error_gradient`] against central differences on sampled coordinates.
pub fn finite_difference_check(
    scan: &PointCloud,
    map: &MapModel,
    config: &GradientConfig,
    ground_truth: &Pose,
    objective: &AdversarialObjective,
    sample_coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, tape) = icp_forward_with_tape(scan, map, config)?;
    let analytic =
        pose_error_gradient_with(&tape, ground_truth, objective, config.differentiate_weights)?;
    finite_difference_check_against(
        scan,
        map,
        config,
        ground_truth,
        objective,
        &analytic,
        sample_coordinates,
        seed,
    )
}

/// Same as [`finite_difference_check`] but against a caller-supplied gradient.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check_against(
    scan: &PointCloud,
    map: &MapModel,
    config: &GradientConfig,
    ground_truth: &Pose,
    objective: &AdversarialObjective,
    analytic: &[Vector3<f64>],
    sample_coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if analytic.len() != scan.len() {
        return Err(Error::LengthMismatch {
            left: scan.len(),
            right: analytic.len(),
        });
    }
    let (_, base_tape) = icp_forward_with_tape(scan, map, config)?;
    let base_sig = base_tape.association_signature();
    let total = 3 * scan.len();
    let count = sample_coordinates.min(total);
    let mut coords = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, count).into_vec();
    coords.sort_unstable();
    let eps = config.fd_epsilon;

    let probes: Vec<Option<ProbeResult>> = coords
        .par_iter()
        .map(|&coord| -> Result<Option<ProbeResult>> {
            let (point, axis) = (coord / 3, coord % 3);
            let eval = |sign: f64| -> Result<Option<f64>> {
                let mut moved = scan.clone();
                moved.points[point][axis] += sign * eps;
                let (loss, tape) = unrolled_loss(&moved, map, config, ground_truth, objective)?;
                Ok((tape.association_signature() == base_sig).then_some(loss))
            };
            let (plus, minus) = match (eval(1.0)?, eval(-1.0)?) {
                (Some(p), Some(m)) => (p, m),
                _ => return Ok(None),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[point][axis];
            let rel = relative_error(a, numeric);
            Ok(Some(ProbeResult {
                point,
                axis,
                analytic: a,
                numeric,
                relative_error: rel,
                passed: rel <= GRADCHECK_TOLERANCE,
            }))
        })
        .collect::<Result<_>>()?;

    let excluded = probes.iter().filter(|p| p.is_none()).count();
    let probes: Vec<ProbeResult> = probes.into_iter().flatten().collect();
    let pass_fraction = if probes.is_empty() {
        0.0
    } else {
        probes.iter().filter(|p| p.passed).count() as f64 / probes.len() as f64
    };
    Ok(GradCheckReport {
        epsilon: eps,
        tolerance: GRADCHECK_TOLERANCE,
        probes,
        excluded,
        pass_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AdversarialObjective;
    use crate::geometry::{exp_se3, Twist};
    use crate::icp::{run_icp_with_model, IcpConfig, FULL_DOF};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn corner_scene(spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        let n = (1.0 / spacing) as i32;
        for i in 0..=n {
            for j in 0..=n {
                let (a, b) = (i as f64 * spacing, j as f64 * spacing);
                pts.push(Vector3::new(a, b, 0.0));
                pts.push(Vector3::new(0.0, a, b + spacing));
                pts.push(Vector3::new(a + spacing, 0.0, b + spacing));
            }
        }
        PointCloud::new(pts)
    }

    fn noisy_scan(map: &PointCloud, truth: &Pose, n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample(&mut rng, map.len(), n).into_vec();
        let mut scan = map.select(&idx);
        scan.normals = None;
        for p in &mut scan.points {
            *p += Vector3::new(
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            );
        }
        scan.transformed(&truth.inverse())
    }

    fn six_dof_config(k: usize) -> GradientConfig {
        let icp = IcpConfig {
            cauchy_k: 0.15,
            trim_distance: 0.3,
            ..IcpConfig::boreas()
        };
        GradientConfig {
            unroll_iterations: k,
            ..GradientConfig::new(icp)
        }
    }

    #[test]
    fn taped_forward_matches_plain_solver() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let truth = exp_se3(&Twist::new(0.05, -0.03, 0.02, 0.02, 0.01, -0.04));
        let scan = noisy_scan(&map.cloud, &truth, 150, 1);
        let cfg = six_dof_config(5);
        let (res, tape) = icp_forward_with_tape(&scan, &map, &cfg).unwrap();
        let plain =
            run_icp_with_model(&scan, &map, &cfg.icp.clone().with_max_iterations(5)).unwrap();
        assert_eq!(res, plain);
        assert_eq!(tape.final_pose, plain.estimate);
        assert_eq!(tape.len(), res.iterations);
    }

    #[test]
    fn aligned_inputs_tape_one_iteration() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let mut scan = map.cloud.clone();
        scan.normals = None;
        let (_, tape) = icp_forward_with_tape(&scan, &map, &six_dof_config(25)).unwrap();
        assert_eq!(tape.len(), 1);
        assert!(tape.iterations[0].solve.delta.norm() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let truth = exp_se3(&Twist::new(0.05, -0.03, 0.02, 0.02, 0.01, -0.04));
        let scan = noisy_scan(&map.cloud, &truth, 100, 2);
        let (_, tape) = icp_forward_with_tape(&scan, &map, &six_dof_config(10)).unwrap();
        let g = pose_error_gradient(&tape, &truth, &AdversarialObjective::new([0.0; 6])).unwrap();
        assert!(g.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn single_point_closed_form() {
        // planar map x = 0 with normals +x; a lone scan point; only x is free
        let pts: Vec<_> = (0..25)
            .map(|i| Vector3::new(0.0, (i % 5) as f64 * 0.05, (i / 5) as f64 * 0.05))
            .collect();
        let map =
            MapModel::new(&PointCloud::with_normals(pts, vec![Vector3::x(); 25]).unwrap()).unwrap();
        let mut icp = IcpConfig::boreas();
        icp.dof_mask = [true, false, false, false, false, false];
        let cfg = GradientConfig {
            unroll_iterations: 1,
            ..GradientConfig::new(icp)
        };
        let objective = AdversarialObjective::new([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        for (px, sign) in [(0.2, -1.0), (-0.2, 1.0)] {
            let scan = PointCloud::new(vec![Vector3::new(px, 0.1, 0.1)]);
            let (_, tape) = icp_forward_with_tape(&scan, &map, &cfg).unwrap();
            // estimate x = -px, so rho_x = -px and L = -|rho_x|
            assert_relative_eq!(tape.final_pose.translation.x, -px, epsilon = 1e-12);
            let g = pose_error_gradient(&tape, &Pose::identity(), &objective).unwrap();
            // L = -|px|, so moving the point away from the plane lowers the loss
            assert_relative_eq!(g[0].x, sign, epsilon = 1e-9);
            assert_eq!((g[0].y, g[0].z), (0.0, 0.0));
        }
    }

    #[test]
    fn normal_components_dominate_at_alignment() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let mut scan = map.cloud.clone();
        scan.normals = None;
        // a slightly offset ground truth keeps the translation error away from the norm's kink
        let truth = Pose::from_translation(Vector3::new(0.01, 0.02, 0.0));
        let (_, tape) = icp_forward_with_tape(&scan, &map, &six_dof_config(25)).unwrap();
        let objective = AdversarialObjective::new([1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let g = pose_error_gradient(&tape, &truth, &objective).unwrap();
        let normals = map.cloud.normals.as_ref().unwrap();
        let (mut along, mut across) = (0.0, 0.0);
        for (gi, n) in g.iter().zip(normals) {
            assert!(gi.iter().all(|v| v.is_finite()));
            let a = gi.dot(n);
            along += a.abs();
            across += (gi - n * a).norm();
        }
        assert!(along > across, "normal {along} tangential {across}");
    }

    #[test]
    fn matches_finite_differences_6dof() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let truth = exp_se3(&Twist::new(0.05, -0.03, 0.02, 0.02, 0.01, -0.04));
        let scan = noisy_scan(&map.cloud, &truth, 40, 3);
        let objective = AdversarialObjective::new([1.0, 1.0, 0.5, 0.3, 0.3, 1.0]);
        let report =
            finite_difference_check(&scan, &map, &six_dof_config(8), &truth, &objective, 120, 1)
                .unwrap();
        assert!(report.passes(0.95), "{:?}", report.pass_fraction);
    }

    #[test]
    fn frozen_weight_variant_differs() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let truth = exp_se3(&Twist::new(0.05, -0.03, 0.02, 0.02, 0.01, -0.04));
        let scan = noisy_scan(&map.cloud, &truth, 40, 4);
        let objective = AdversarialObjective::new([1.0; 6]);
        let (_, tape) = icp_forward_with_tape(&scan, &map, &six_dof_config(8)).unwrap();
        let full = pose_error_gradient_with(&tape, &truth, &objective, true).unwrap();
        let frozen = pose_error_gradient_with(&tape, &truth, &objective, false).unwrap();
        assert_ne!(full, frozen);
    }

    #[test]
    fn negated_gradient_fails_check() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let truth = exp_se3(&Twist::new(0.05, -0.03, 0.02, 0.02, 0.01, -0.04));
        let scan = noisy_scan(&map.cloud, &truth, 30, 5);
        let cfg = six_dof_config(6);
        let objective = AdversarialObjective::new([1.0; 6]);
        let (_, tape) = icp_forward_with_tape(&scan, &map, &cfg).unwrap();
        let bad: Vec<_> = pose_error_gradient(&tape, &truth, &objective)
            .unwrap()
            .into_iter()
            .map(|g| -g)
            .collect();
        let report =
            finite_difference_check_against(&scan, &map, &cfg, &truth, &objective, &bad, 90, 2)
                .unwrap();
        assert!(!report.probes.is_empty());
        assert!(report
            .probes
            .iter()
            .all(|p| !p.passed || p.analytic.abs() < GRADCHECK_FLOOR));
        let zero = AdversarialObjective::new([0.0; 6]);
        let report = finite_difference_check(&scan, &map, &cfg, &truth, &zero, 30, 2).unwrap();
        assert_eq!(report.pass_fraction, 1.0);
    }

    #[test]
    fn rotates_covariantly() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap().cloud;
        let truth = exp_se3(&Twist::new(0.05, -0.03, 0.02, 0.02, 0.01, -0.04));
        let scan = noisy_scan(&map, &truth, 60, 6);
        let objective = AdversarialObjective::new([1.0; 6]);
        let cfg = six_dof_config(10);
        let grad = |scan: &PointCloud, map: &PointCloud, truth: &Pose| {
            let model = MapModel::new(map).unwrap();
            let (_, tape) = icp_forward_with_tape(scan, &model, &cfg).unwrap();
            pose_error_gradient(&tape, truth, &objective).unwrap()
        };
        let base = grad(&scan, &map, &truth);
        let s = Pose::from_rotation(exp_se3(&Twist::new(0.0, 0.0, 0.0, 0.4, -0.3, 0.8)).rotation);
        // rotating both clouds maps the ground truth to S T S^-1
        let rotated = grad(
            &scan.transformed(&s),
            &map.transformed(&s),
            &(s * truth * s.inverse()),
        );
        // L depends on the error twist's components, which rotate with S as well,
        // so compare under the rotation-invariant unit weights
        for (a, b) in base.iter().zip(&rotated) {
            assert_relative_eq!(s.rotation * a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn doubling_weights_doubles_gradient() {
        let map = MapModel::new(&corner_scene(0.1)).unwrap();
        let truth = exp_se3(&Twist::new(0.05, -0.03, 0.02, 0.02, 0.01, -0.04));
        let scan = noisy_scan(&map.cloud, &truth, 60, 7);
        let (_, tape) = icp_forward_with_tape(&scan, &map, &six_dof_config(10)).unwrap();
        let w = [1.0, 0.5, 0.2, 0.3, 0.1, 1.0];
        let g1 = pose_error_gradient(&tape, &truth, &AdversarialObjective::new(w)).unwrap();
        let g2 = pose_error_gradient(
            &tape,
            &truth,
            &AdversarialObjective::new(w.map(|v| 2.0 * v)),
        )
        .unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_relative_eq!(a * 2.0, *b, epsilon = 1e-12);
        }
        let _ = FULL_DOF;
    }
}
