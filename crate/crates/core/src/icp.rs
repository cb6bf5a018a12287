//! Point-to-plane ICP with a per-iteration trim filter and Cauchy IRLS weights.
//!
//! Updates are applied on the left, `T <- exp(delta) T`, and the solver stops once
//! the norm of `delta` falls below the configured tolerance.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_se3, Pose, Twist};
use crate::pointcloud::{estimate_normals_auto, PointCloud, SpatialIndex, DEFAULT_NORMAL_K};

/// Normal systems with a larger condition number are treated as degenerate.
pub const MAX_CONDITION: f64 = 1e12;

/// Free twist components, ordered `[x, y, z, roll, pitch, yaw]`.
pub type DofMask = [bool; 6];

pub const FULL_DOF: DofMask = [true; 6];
pub const PLANAR_DOF: DofMask = [true, true, false, false, false, true];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the twist-update norm.
    pub tolerance: f64,
    pub trim_distance: f64,
    pub cauchy_k: f64,
    pub dof_mask: DofMask,
    pub initial_guess: Pose,
}

impl IcpConfig {
    /// Normalized planar objects: Cauchy 0.15, trim 0.3, 150 iterations, x/y/yaw only.
    pub fn shapenet() -> Self {
        Self {
            max_iterations: 150,
            tolerance: 1e-4,
            trim_distance: 0.3,
            cauchy_k: 0.15,
            dof_mask: PLANAR_DOF,
            initial_guess: Pose::identity(),
        }
    }

    /// Metric driving scans: Cauchy 1 m, trim 5 m, 100 iterations, full 6-DOF.
    pub fn boreas() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-4,
            trim_distance: 5.0,
            cauchy_k: 1.0,
            dof_mask: FULL_DOF,
            initial_guess: Pose::identity(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "shapenet" => Ok(Self::shapenet()),
            "boreas" => Ok(Self::boreas()),
            other => Err(Error::Unknown {
                what: "ICP profile",
                name: other.to_string(),
            }),
        }
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.tolerance, "tolerance")?;
        positive(self.trim_distance, "trim_distance")?;
        positive(self.cauchy_k, "cauchy_k")?;
        if !self.dof_mask.iter().any(|&b| b) {
            return Err(Error::invalid("dof_mask frees no degree of freedom"));
        }
        self.initial_guess.validate()
    }

    pub(crate) fn free_dofs(&self) -> Vec<usize> {
        free_dofs(&self.dof_mask)
    }
}

pub(crate) fn free_dofs(mask: &DofMask) -> Vec<usize> {
    (0..6).filter(|&i| mask[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    #[serde(rename = "pose")]
    pub estimate: Pose,
    pub iterations: usize,
    pub converged: bool,
    pub final_cost: f64,
    pub correspondence_count: usize,
}

/// The map side of ICP: points with normals and an exact NN index over them.
#[derive(Clone, Debug)]
pub struct MapModel {
    pub cloud: PointCloud,
    pub index: SpatialIndex,
}

impl MapModel {
    /// Estimates normals (k = 10) when the cloud does not carry any.
    pub fn new(map: &PointCloud) -> Result<Self> {
        map.validate()?;
        let cloud = if map.has_normals() {
            map.clone()
        } else {
            estimate_normals_auto(map, DEFAULT_NORMAL_K.min(map.len()).max(3))?.cloud
        };
        let index = cloud.build_index();
        Ok(Self { cloud, index })
    }

    fn normal(&self, i: usize) -> Vector3<f64> {
        self.cloud
            .normals
            .as_ref()
            .expect("map model always has normals")[i]
    }
}

/// One scan-to-map pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub scan_index: usize,
    pub map_index: usize,
    /// Scan point in the scan frame.
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub distance: f64,
}

impl Correspondence {
    pub fn residual(&self, pose: &Pose) -> f64 {
        self.normal
            .dot(&(pose.transform_point(&self.source) - self.target))
    }
}

/// Nearest-map-point association with trimming at the current pose.
pub fn associate(
    scan: &PointCloud,
    map: &MapModel,
    current: &Pose,
    trim_distance: f64,
) -> Result<Vec<Correspondence>> {
    let trim_sq = trim_distance * trim_distance;
    let pairs: Vec<_> = scan
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let y = current.transform_point(p);
            let nn = map.index.nearest(&y);
            (nn.dist_sq <= trim_sq).then(|| Correspondence {
                scan_index: i,
                map_index: nn.index,
                source: *p,
                target: map.cloud.points[nn.index],
                normal: map.normal(nn.index),
                distance: nn.dist_sq.sqrt(),
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::AssociationEmpty { iteration: 0 });
    }
    Ok(pairs)
}

/// Cauchy M-estimator weight `1 / (1 + (r/k)^2)`.
pub fn cauchy_weight(residual: f64, k: f64) -> f64 {
    let u = residual / k;
    1.0 / (1.0 + u * u)
}

/// Derivative of [`cauchy_weight`] with respect to the residual.
pub fn cauchy_weight_derivative(residual: f64, k: f64) -> f64 {
    let w = cauchy_weight(residual, k);
    -2.0 * residual / (k * k) * w * w
}

/// Cauchy cost `k^2/2 ln(1 + (r/k)^2)`, the objective IRLS with [`cauchy_weight`] minimizes.
pub fn cauchy_cost(residual: f64, k: f64) -> f64 {
    let u = residual / k;
    0.5 * k * k * (u * u).ln_1p()
}

pub fn total_cost(correspondences: &[Correspondence], pose: &Pose, k: f64) -> f64 {
    correspondences
        .iter()
        .map(|c| cauchy_cost(c.residual(pose), k))
        .sum()
}

/// Linearized residual row `[n; y x n]` for the transformed point `y`.
pub(crate) fn jacobian_row(y: &Vector3<f64>, n: &Vector3<f64>) -> [f64; 6] {
    let m = y.cross(n);
    [n.x, n.y, n.z, m.x, m.y, m.z]
}

/// Everything one Gauss-Newton step computed, kept for differentiation.
#[derive(Clone, Debug)]
pub struct StepSolve {
    pub residuals: Vec<f64>,
    pub weights: Vec<f64>,
    /// Normal matrix over the free DOFs.
    pub hessian: DMatrix<f64>,
    /// Cholesky factor of `hessian`, reused for adjoint solves.
    pub factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub delta: Twist,
    pub cost: f64,
}

pub(crate) fn solve_step(
    correspondences: &[Correspondence],
    current: &Pose,
    cauchy_k: f64,
    free: &[usize],
) -> Result<StepSolve> {
    let m = free.len();
    if correspondences.len() < m {
        return Err(Error::DegenerateGeometry {
            iteration: 0,
            condition: f64::INFINITY,
        });
    }
    let mut h = DMatrix::zeros(m, m);
    let mut g = DVector::zeros(m);
    let mut residuals = Vec::with_capacity(correspondences.len());
    let mut weights = Vec::with_capacity(correspondences.len());
    let mut cost = 0.0;
    let mut row = vec![0.0; m];
    for c in correspondences {
        let y = current.transform_point(&c.source);
        let r = c.normal.dot(&(y - c.target));
        let w = cauchy_weight(r, cauchy_k);
        let full = jacobian_row(&y, &c.normal);
        for (a, &d) in free.iter().enumerate() {
            row[a] = full[d];
        }
        for a in 0..m {
            g[a] += w * row[a] * r;
            for b in 0..=a {
                h[(a, b)] += w * row[a] * row[b];
            }
        }
        cost += cauchy_cost(r, cauchy_k);
        residuals.push(r);
        weights.push(w);
    }
    for a in 0..m {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }

    let eig = SymmetricEigen::new(h.clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::DegenerateGeometry {
            iteration: 0,
            condition,
        });
    }
    let factor = h.clone().cholesky().ok_or(Error::DegenerateGeometry {
        iteration: 0,
        condition,
    })?;
    let step = factor.solve(&(-g));
    let mut delta = Twist::zeros();
    for (a, &d) in free.iter().enumerate() {
        delta[d] = step[a];
    }
    Ok(StepSolve {
        residuals,
        weights,
        hessian: h,
        factor,
        delta,
        cost,
    })
}

/// Result of a single Gauss-Newton update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub pose: Pose,
    pub delta: Twist,
    /// Cauchy cost at the pose the step was linearized around.
    pub cost: f64,
}

/// One weighted point-to-plane least-squares update on fixed correspondences.
pub fn icp_step(
    correspondences: &[Correspondence],
    current: &Pose,
    cauchy_k: f64,
    dof_mask: &DofMask,
) -> Result<StepOutcome> {
    let solve = solve_step(correspondences, current, cauchy_k, &free_dofs(dof_mask))?;
    Ok(StepOutcome {
        pose: exp_se3(&solve.delta).compose(current),
        delta: solve.delta,
        cost: solve.cost,
    })
}

/// Per-iteration record used by the differentiable solver.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    /// Pose the iteration linearized around.
    pub pose: Pose,
    pub correspondences: Vec<Correspondence>,
    pub solve: StepSolve,
}

pub(crate) fn run_icp_recorded(
    scan: &PointCloud,
    map: &MapModel,
    config: &IcpConfig,
    mut record: Option<&mut Vec<IterationRecord>>,
) -> Result<IcpResult> {
    config.validate()?;
    scan.validate()?;
    let free = config.free_dofs();
    let mut pose = config.initial_guess;
    let mut converged = false;
    let mut iterations = 0;
    let mut last: Option<Vec<Correspondence>> = None;

    while iterations < config.max_iterations {
        let correspondences = associate(scan, map, &pose, config.trim_distance)
            .map_err(|e| e.at_iteration(iterations))?;
        let solve = solve_step(&correspondences, &pose, config.cauchy_k, &free)
            .map_err(|e| e.at_iteration(iterations))?;
        let next = exp_se3(&solve.delta).compose(&pose);
        let step_norm = solve.delta.norm();
        iterations += 1;
        match record.as_deref_mut() {
            Some(tape) => tape.push(IterationRecord {
                pose,
                correspondences: correspondences.clone(),
                solve,
            }),
            None => drop(solve),
        }
        pose = next;
        last = Some(correspondences);
        if step_norm < config.tolerance {
            converged = true;
            break;
        }
    }

    let (final_cost, correspondence_count) = match &last {
        Some(c) => (total_cost(c, &pose, config.cauchy_k), c.len()),
        None => match associate(scan, map, &pose, config.trim_distance) {
            Ok(c) => (total_cost(&c, &pose, config.cauchy_k), c.len()),
            Err(_) => (0.0, 0),
        },
    };
    Ok(IcpResult {
        estimate: pose,
        iterations,
        converged,
        final_cost,
        correspondence_count,
    })
}

/// Runs ICP of `scan` against a prepared map.
pub fn run_icp_with_model(
    scan: &PointCloud,
    map: &MapModel,
    config: &IcpConfig,
) -> Result<IcpResult> {
    run_icp_recorded(scan, map, config, None)
}

/// Runs ICP of `scan` against `map`, estimating map normals if absent.
pub fn run_icp(scan: &PointCloud, map: &PointCloud, config: &IcpConfig) -> Result<IcpResult> {
    run_icp_with_model(scan, &MapModel::new(map)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{log_se3, pose_error};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two perpendicular walls plus a floor patch: fully constrained in 6-DOF.
    fn box_corner(spacing: f64) -> PointCloud {
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

    fn planar_map(n: usize, normal_x: bool) -> MapModel {
        let pts: Vec<_> = (0..n)
            .map(|i| Vector3::new(0.0, (i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1))
            .collect();
        let normals = vec![if normal_x { Vector3::x() } else { Vector3::y() }; n];
        MapModel::new(&PointCloud::with_normals(pts, normals).unwrap()).unwrap()
    }

    #[test]
    fn cauchy_weight_values() {
        assert_eq!(cauchy_weight(0.0, 0.15), 1.0);
        assert_eq!(cauchy_weight(0.15, 0.15), 0.5);
        assert_relative_eq!(cauchy_weight(0.45, 0.15), 0.1, epsilon = 1e-15);
        for r in [-3.0, -0.1, 0.0, 0.2, 50.0] {
            let w = cauchy_weight(r, 0.3);
            assert!(w > 0.0 && w <= 1.0);
            let h = 1e-6;
            let fd = (cauchy_weight(r + h, 0.3) - cauchy_weight(r - h, 0.3)) / (2.0 * h);
            assert_relative_eq!(cauchy_weight_derivative(r, 0.3), fd, epsilon = 1e-8);
            // IRLS weight is cost'(r) / r
            let dc = (cauchy_cost(r + h, 0.3) - cauchy_cost(r - h, 0.3)) / (2.0 * h);
            if r != 0.0 {
                assert_relative_eq!(dc / r, w, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn self_association() {
        let map = MapModel::new(&box_corner(0.1)).unwrap();
        let c = associate(&map.cloud, &map, &Pose::identity(), 0.3).unwrap();
        assert_eq!(c.len(), map.cloud.len());
        assert!(c
            .iter()
            .all(|c| c.scan_index == c.map_index && c.distance == 0.0));
    }

    #[test]
    fn trim_boundary() {
        let map = planar_map(100, true);
        let trim = 0.3;
        let scan = PointCloud::new(vec![
            Vector3::new(trim + 0.01, 0.5, 0.5),
            Vector3::new(0.1, 0.5, 0.5),
        ]);
        let c = associate(&scan, &map, &Pose::identity(), trim).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].scan_index, 1);
        let far = PointCloud::new(vec![Vector3::new(5.0, 0.0, 0.0)]);
        assert!(matches!(
            associate(&far, &map, &Pose::identity(), trim),
            Err(Error::AssociationEmpty { .. })
        ));
    }

    #[test]
    fn association_matches_brute_force() {
        let map = MapModel::new(&box_corner(0.05)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scan = PointCloud::new(
            (0..300)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect(),
        );
        let pose = exp_se3(&Twist::new(0.03, -0.02, 0.01, 0.02, -0.01, 0.03));
        let got = associate(&scan, &map, &pose, 0.2).unwrap();
        let mut expect = Vec::new();
        for (i, p) in scan.points.iter().enumerate() {
            let y = pose.transform_point(p);
            let (j, d) = map
                .cloud
                .points
                .iter()
                .enumerate()
                .map(|(j, q)| (j, (q - y).norm()))
                .fold((usize::MAX, f64::INFINITY), |best, cur| {
                    if cur.1 < best.1 {
                        cur
                    } else {
                        best
                    }
                });
            if d <= 0.2 {
                expect.push((i, j));
            }
        }
        let got: Vec<_> = got.iter().map(|c| (c.scan_index, c.map_index)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn aligned_step_is_zero() {
        let map = MapModel::new(&box_corner(0.1)).unwrap();
        let c = associate(&map.cloud, &map, &Pose::identity(), 0.3).unwrap();
        let out = icp_step(&c, &Pose::identity(), 0.15, &FULL_DOF).unwrap();
        assert!(out.delta.norm() < 1e-12);
    }

    #[test]
    fn planar_offset_single_step() {
        // Wall x = 0 with normals +x, a floor (normal +z) and a side wall (normal +y)
        // so a 3-DOF translation mask is well posed; only x is offset.
        let mut scan_pts = Vec::new();
        let mut corr = Vec::new();
        for i in 0..30 {
            let t = i as f64 * 0.1;
            for (n, p) in [
                (Vector3::x(), Vector3::new(0.0, t, 1.0)),
                (Vector3::y(), Vector3::new(t, 0.0, 1.0)),
                (Vector3::z(), Vector3::new(t, 1.0, 0.0)),
            ] {
                let source = p + Vector3::new(0.2, 0.0, 0.0);
                scan_pts.push(source);
                corr.push(Correspondence {
                    scan_index: corr.len(),
                    map_index: corr.len(),
                    source,
                    target: p,
                    normal: n,
                    distance: 0.2,
                });
            }
        }
        let mask = [true, true, true, false, false, false];
        let out = icp_step(&corr, &Pose::identity(), 0.15, &mask).unwrap();
        assert_relative_eq!(
            out.delta,
            Twist::new(-0.2, 0.0, 0.0, 0.0, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn corridor_is_degenerate() {
        let map = planar_map(100, true);
        let c = associate(&map.cloud, &map, &Pose::identity(), 0.3).unwrap();
        assert!(matches!(
            icp_step(&c, &Pose::identity(), 0.15, &FULL_DOF),
            Err(Error::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn zero_iterations_returns_initial_guess() {
        let map = box_corner(0.1);
        let guess = exp_se3(&Twist::new(0.01, 0.0, 0.0, 0.0, 0.0, 0.0));
        let mut cfg = IcpConfig::boreas().with_max_iterations(0);
        cfg.initial_guess = guess;
        let r = run_icp(&map, &map, &cfg).unwrap();
        assert_eq!(r.estimate, guess);
        assert!(!r.converged);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn recovers_rigid_offset_in_3d() {
        let map = box_corner(0.05);
        let truth = exp_se3(&Twist::new(0.05, -0.04, 0.03, 0.03, -0.02, 0.05));
        let scan = map.transformed(&truth.inverse());
        let cfg = IcpConfig {
            cauchy_k: 0.15,
            trim_distance: 0.3,
            ..IcpConfig::boreas()
        };
        let r = run_icp(&scan, &map, &cfg).unwrap();
        assert!(r.converged);
        assert!(pose_error(&r.estimate, &truth).twist().norm() < 1e-5);
        assert!(r.iterations <= cfg.max_iterations);
    }

    #[test]
    fn cost_non_increasing_with_frozen_associations() {
        let map = MapModel::new(&box_corner(0.05)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = exp_se3(&Twist::new(0.04, 0.03, -0.02, 0.02, 0.03, -0.04));
        let mut scan = map.cloud.transformed(&truth.inverse());
        for p in &mut scan.points {
            *p += Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            );
        }
        scan.normals = None;
        let mut pose = Pose::identity();
        for _ in 0..5 {
            let c = associate(&scan, &map, &pose, 0.3).unwrap();
            let mut prev = total_cost(&c, &pose, 0.15);
            for _ in 0..4 {
                pose = icp_step(&c, &pose, 0.15, &FULL_DOF).unwrap().pose;
                let now = total_cost(&c, &pose, 0.15);
                assert!(now <= prev + 1e-12, "{now} > {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn deterministic_and_masked() {
        let map = box_corner(0.05);
        let truth = exp_se3(&Twist::new(0.05, -0.04, 0.0, 0.0, 0.0, 0.05));
        let scan = map.transformed(&truth.inverse());
        let mut cfg = IcpConfig::shapenet();
        cfg.initial_guess = exp_se3(&Twist::new(0.01, 0.0, 0.0, 0.0, 0.0, 0.01));
        let a = run_icp(&scan, &map, &cfg).unwrap();
        let b = run_icp(&scan, &map, &cfg).unwrap();
        assert_eq!(a, b);
        let rel = log_se3(&a.estimate.compose(&cfg.initial_guess.inverse()));
        assert_eq!((rel[2], rel[3], rel[4]), (0.0, 0.0, 0.0));

        cfg.dof_mask = [true, true, true, false, false, false];
        let t = run_icp(&scan, &map, &cfg).unwrap();
        let rel = log_se3(&t.estimate.compose(&cfg.initial_guess.inverse()));
        assert_eq!((rel[3], rel[4], rel[5]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn equivariant_under_rigid_motion() {
        let map = MapModel::new(&box_corner(0.05)).unwrap().cloud;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = exp_se3(&Twist::new(0.04, -0.03, 0.02, 0.02, -0.03, 0.04));
        let mut scan = map.transformed(&truth.inverse());
        scan.normals = None;
        for p in &mut scan.points {
            *p += Vector3::new(
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            );
        }
        let cfg = IcpConfig {
            cauchy_k: 0.15,
            trim_distance: 0.3,
            ..IcpConfig::boreas()
        };
        let base = run_icp(&scan, &map, &cfg).unwrap();
        let s = exp_se3(&Twist::new(1.0, -2.0, 0.5, 0.3, -0.5, 1.1));
        let moved = run_icp(&scan.transformed(&s), &map.transformed(&s), &cfg).unwrap();
        let expect = s.compose(&base.estimate).compose(&s.inverse());
        assert_relative_eq!(
            moved.estimate.to_matrix(),
            expect.to_matrix(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn result_json_shape() {
        let map = box_corner(0.1);
        let r = run_icp(&map, &map, &IcpConfig::boreas()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in [
            "pose",
            "iterations",
            "converged",
            "final_cost",
            "correspondence_count",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["pose"].as_array().unwrap().len(), 4);
        assert_eq!(r.iterations, 1);
    }
}
