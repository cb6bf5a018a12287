//! Attack objectives, the per-scan perturbation optimizer and the two heuristic
//! corruption baselines.

use std::path::Path;

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LocalizationPair;
use crate::error::{Error, Result};
use crate::geometry::{pose_error, PoseError};
use crate::gradients::{icp_forward_with_tape, pose_error_gradient_with, GradientConfig};
use crate::icp::{run_icp_with_model, IcpConfig, MapModel};
use crate::pointcloud::{estimate_normals_auto, unify_normal_sign, write_ply, PointCloud};

/// Momentum coefficient of the perturbation optimizer.
pub const MOMENTUM: f64 = 0.9;
/// Consecutive solver failures tolerated before the optimizer gives up.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;
/// Step size used when `lambda = 0` leaves the proportional default at zero.
pub const FALLBACK_STEP_SIZE: f64 = 0.005;
/// Neighbourhood size for the normal baseline's scan normals. Wider than the
/// map default because scan noise swamps small neighbourhoods.
pub const BASELINE_NORMAL_K: usize = 30;

/// How the six pose-error weights enter the adversarial loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightForm {
    /// `-||w_t * rho|| - ||w_r * phi||` with elementwise products.
    #[default]
    Elementwise,
    /// `-|w_t . rho| - |w_r . phi|`, the literal inner-product reading.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialObjective {
    pub weights: [f64; 6],
    #[serde(default)]
    pub form: WeightForm,
}

impl AdversarialObjective {
    pub fn new(weights: [f64; 6]) -> Self {
        Self {
            weights,
            form: WeightForm::Elementwise,
        }
    }

    pub fn scalar(weights: [f64; 6]) -> Self {
        Self {
            weights,
            form: WeightForm::Scalar,
        }
    }

    fn blocks(&self, err: &PoseError) -> [(Vector3<f64>, Vector3<f64>); 2] {
        let w = self.weights;
        [
            (Vector3::new(w[0], w[1], w[2]), err.rho),
            (Vector3::new(w[3], w[4], w[5]), err.phi),
        ]
    }

    pub fn loss(&self, err: &PoseError) -> f64 {
        self.blocks(err)
            .iter()
            .map(|(w, v)| match self.form {
                WeightForm::Elementwise => -w.component_mul(v).norm(),
                WeightForm::Scalar => -w.dot(v).abs(),
            })
            .sum()
    }

    /// Derivative of [`loss`](Self::loss) with respect to the twist `(rho; phi)`.
    /// The kink at a zero block is assigned a zero subgradient.
    pub fn gradient(&self, err: &PoseError) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        for (b, (w, v)) in self.blocks(err).iter().enumerate() {
            let g = match self.form {
                WeightForm::Elementwise => {
                    let wv = w.component_mul(v);
                    let norm = wv.norm();
                    if norm == 0.0 {
                        Vector3::zeros()
                    } else {
                        -w.component_mul(&wv) / norm
                    }
                }
                WeightForm::Scalar => {
                    let s = w.dot(v);
                    if s == 0.0 {
                        Vector3::zeros()
                    } else {
                        -s.signum() * w
                    }
                }
            };
            out.fixed_rows_mut::<3>(3 * b).copy_from(&g);
        }
        out
    }
}

/// Adversarial loss with elementwise weights.
pub fn adversarial_loss(err: &PoseError, w: &[f64; 6]) -> f64 {
    AdversarialObjective::new(*w).loss(err)
}

/// Dead zone of half-width `lambda`.
pub fn softshrink(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Mean squared soft-shrunk displacement norm.
pub fn reconstruction_loss(
    original: &PointCloud,
    adversarial: &PointCloud,
    lambda: f64,
) -> Result<f64> {
    check_counts(original, adversarial)?;
    if original.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = original
        .points
        .iter()
        .zip(&adversarial.points)
        .map(|(x, y)| softshrink((y - x).norm(), lambda).powi(2))
        .sum();
    Ok(sum / original.len() as f64)
}

fn check_counts(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

fn reconstruction_gradient(displacements: &[Vector3<f64>], lambda: f64) -> Vec<Vector3<f64>> {
    let n = displacements.len() as f64;
    displacements
        .iter()
        .map(|d| {
            let norm = d.norm();
            let s = softshrink(norm, lambda);
            if s == 0.0 {
                Vector3::zeros()
            } else {
                d * (2.0 * s / (n * norm))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub w: [f64; 6],
    #[serde(default)]
    pub form: WeightForm,
    pub steps: usize,
    pub step_size: f64,
    pub unroll: GradientConfig,
    pub seed: u64,
}

impl AttackConfig {
    /// Defaults: planar-translation weights, 50 steps, step size `0.05 lambda`.
    pub fn new(lambda: f64, icp: IcpConfig) -> Self {
        Self {
            lambda,
            alpha: 1.0,
            beta: 10.0,
            w: [1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            form: WeightForm::Elementwise,
            steps: 50,
            step_size: default_step_size(lambda),
            unroll: GradientConfig::new(icp),
            seed: 0,
        }
    }

    /// Sets `lambda` and rescales the step size to its default for that bound.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self.step_size = default_step_size(lambda);
        self
    }

    pub fn objective(&self) -> AdversarialObjective {
        AdversarialObjective {
            weights: self.w,
            form: self.form,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if ![self.alpha, self.beta]
            .iter()
            .chain(&self.w)
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("alpha, beta and w must be finite"));
        }
        self.unroll.validate()
    }
}

pub fn default_step_size(lambda: f64) -> f64 {
    if lambda > 0.0 {
        0.05 * lambda
    } else {
        FALLBACK_STEP_SIZE
    }
}

/// `alpha * L_adv + beta * L_rec`.
pub fn total_loss(
    err: &PoseError,
    original: &PointCloud,
    adversarial: &PointCloud,
    config: &AttackConfig,
) -> Result<f64> {
    let adv = config.objective().loss(err);
    let rec = reconstruction_loss(original, adversarial, config.lambda)?;
    Ok(config.alpha * adv + config.beta * rec)
}

/// Quantiles of the displacement excess `max(||d|| - lambda, 0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OvershootQuantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub p997: f64,
    pub max: f64,
}

impl OvershootQuantiles {
    pub fn from_displacements(displacements: &[Vector3<f64>], lambda: f64) -> Self {
        let mut excess = overshoots(displacements, lambda);
        excess.sort_by(f64::total_cmp);
        Self {
            p50: quantile_sorted(&excess, 0.5),
            p90: quantile_sorted(&excess, 0.9),
            p99: quantile_sorted(&excess, 0.99),
            p997: quantile_sorted(&excess, 0.997),
            max: excess.last().copied().unwrap_or(0.0),
        }
    }
}

pub fn overshoots(displacements: &[Vector3<f64>], lambda: f64) -> Vec<f64> {
    displacements
        .iter()
        .map(|d| (d.norm() - lambda).max(0.0))
        .collect()
}

/// Linear-interpolation quantile of ascending data (0 for an empty slice).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMethod {
    Attack,
    Uniform,
    Normal,
}

impl PerturbationMethod {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationMethod::Attack => "attack",
            PerturbationMethod::Uniform => "uniform",
            PerturbationMethod::Normal => "normal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub method: PerturbationMethod,
    pub lambda: f64,
    pub adversarial: PointCloud,
    pub displacements: Vec<Vector3<f64>>,
    /// Evaluation-solver pose errors; absent for baselines until evaluated.
    pub pose_error_before: Option<PoseError>,
    pub pose_error_after: Option<PoseError>,
    /// Whether the evaluation solver converged on the perturbed scan.
    pub converged_after: Option<bool>,
    pub overshoot_quantiles: OvershootQuantiles,
    pub loss_trace: Vec<f64>,
    /// Index into `loss_trace` of the returned iterate.
    pub best_step: usize,
    pub warning: Option<String>,
}

impl PerturbationResult {
    fn from_displacements(
        method: PerturbationMethod,
        scan: &PointCloud,
        lambda: f64,
        displacements: Vec<Vector3<f64>>,
    ) -> Self {
        let adversarial = PointCloud::new(
            scan.points
                .iter()
                .zip(&displacements)
                .map(|(p, d)| p + d)
                .collect(),
        );
        Self {
            method,
            lambda,
            adversarial,
            overshoot_quantiles: OvershootQuantiles::from_displacements(&displacements, lambda),
            displacements,
            pose_error_before: None,
            pose_error_after: None,
            converged_after: None,
            loss_trace: Vec::new(),
            best_step: 0,
            warning: None,
        }
    }

    /// Runs the evaluation solver on the perturbed scan and records its error.
    pub fn evaluate(
        &mut self,
        pair: &LocalizationPair,
        map: &MapModel,
        icp: &IcpConfig,
    ) -> Result<()> {
        match run_icp_with_model(&self.adversarial, map, icp) {
            Ok(res) => {
                self.pose_error_after = Some(pose_error(&res.estimate, &pair.ground_truth));
                self.converged_after = Some(res.converged);
            }
            Err(e) if e.is_numerical() => {
                self.pose_error_after = None;
                self.converged_after = Some(false);
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Planar error after perturbation, if the evaluation solver converged.
    pub fn planar_error(&self) -> Option<f64> {
        match (self.converged_after, self.pose_error_after) {
            (Some(true), Some(err)) => Some(err.planar_norm()),
            _ => None,
        }
    }

    /// Writes the perturbed scan with displacements in the normal slot.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let cloud = PointCloud {
            points: self.adversarial.points.clone(),
            normals: Some(self.displacements.clone()),
        };
        write_ply(path, &cloud)
    }
}

struct Iterate {
    points: Vec<Vector3<f64>>,
    loss: f64,
    gradient: Vec<Vector3<f64>>,
}

fn evaluate_iterate(
    original: &PointCloud,
    points: Vec<Vector3<f64>>,
    pair: &LocalizationPair,
    map: &MapModel,
    config: &AttackConfig,
) -> Result<Iterate> {
    let cloud = PointCloud::new(points);
    let (_, tape) = icp_forward_with_tape(&cloud, map, &config.unroll)?;
    let err = pose_error(&tape.final_pose, &pair.ground_truth);
    let loss = total_loss(&err, original, &cloud, config)?;
    let adv = pose_error_gradient_with(
        &tape,
        &pair.ground_truth,
        &config.objective(),
        config.unroll.differentiate_weights,
    )?;
    let displacements: Vec<_> = cloud
        .points
        .iter()
        .zip(&original.points)
        .map(|(y, x)| y - x)
        .collect();
    let rec = reconstruction_gradient(&displacements, config.lambda);
    let gradient = adv
        .iter()
        .zip(&rec)
        .map(|(a, r)| a * config.alpha + r * config.beta)
        .collect();
    Ok(Iterate {
        points: cloud.points,
        loss,
        gradient,
    })
}

/// Worst-case perturbation of `pair.scan` by momentum gradient descent on the
/// total loss through the unrolled solver.
///
/// Each step moves the iterate along the momentum buffer scaled so that the
/// largest per-point gradient has length `step_size`. A solver failure reverts
/// the step and halves the step size; after three in a row the best iterate so
/// far is returned with a warning.
pub fn optimize_perturbation(
    pair: &LocalizationPair,
    config: &AttackConfig,
) -> Result<PerturbationResult> {
    let map = MapModel::new(&pair.map)?;
    optimize_perturbation_with_model(pair, &map, config)
}

pub fn optimize_perturbation_with_model(
    pair: &LocalizationPair,
    map: &MapModel,
    config: &AttackConfig,
) -> Result<PerturbationResult> {
    config.validate()?;
    let original = PointCloud::new(pair.scan.points.clone());
    original.validate()?;
    let eval_icp = &config.unroll.icp;
    let before = run_icp_with_model(&original, map, eval_icp)?;
    if !before.converged {
        return Err(Error::NotConverged {
            iterations: before.iterations,
        });
    }

    let mut current = evaluate_iterate(&original, original.points.clone(), pair, map, config)?;
    let mut trace = vec![current.loss];
    let mut best = (0usize, current.loss, current.points.clone());
    let mut velocity = vec![Vector3::zeros(); original.len()];
    let mut step_size = config.step_size;
    let mut failures = 0usize;
    let mut warning = None;

    for _ in 0..config.steps {
        let scale = current
            .gradient
            .iter()
            .map(|g| g.norm())
            .fold(0.0, f64::max);
        if scale == 0.0 || !scale.is_finite() {
            break;
        }
        for (v, g) in velocity.iter_mut().zip(&current.gradient) {
            *v = *v * MOMENTUM + g / scale;
        }
        let candidate: Vec<_> = current
            .points
            .iter()
            .zip(&velocity)
            .map(|(p, v)| p - v * step_size)
            .collect();
        match evaluate_iterate(&original, candidate, pair, map, config) {
            Ok(next) => {
                failures = 0;
                trace.push(next.loss);
                if next.loss < best.1 {
                    best = (trace.len() - 1, next.loss, next.points.clone());
                }
                current = next;
            }
            Err(e) if e.is_numerical() => {
                failures += 1;
                step_size *= 0.5;
                velocity.iter_mut().for_each(|v| *v = Vector3::zeros());
                log::debug!("attack step failed ({e}); step size now {step_size}");
                if failures == MAX_CONSECUTIVE_FAILURES {
                    warning = Some(format!(
                        "stopped after {failures} consecutive solver failures: {e}"
                    ));
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }

    let displacements = best
        .2
        .iter()
        .zip(&original.points)
        .map(|(y, x)| y - x)
        .collect();
    let mut result = PerturbationResult::from_displacements(
        PerturbationMethod::Attack,
        &original,
        config.lambda,
        displacements,
    );
    result.adversarial.points = best.2;
    result.pose_error_before = Some(pose_error(&before.estimate, &pair.ground_truth));
    result.loss_trace = trace;
    result.best_step = best.0;
    result.warning = warning;
    result.evaluate(pair, map, eval_icp)?;
    Ok(result)
}

/// Translates the whole scan by `lambda` along one random planar direction.
pub fn baseline_uniform(scan: &PointCloud, lambda: f64, seed: u64) -> Result<PerturbationResult> {
    check_lambda(lambda)?;
    let angle = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..std::f64::consts::TAU);
    let d = Vector3::new(angle.cos(), angle.sin(), 0.0) * lambda;
    Ok(PerturbationResult::from_displacements(
        PerturbationMethod::Uniform,
        scan,
        lambda,
        vec![d; scan.len()],
    ))
}

/// Moves every point by `lambda` along its sign-unified normal projected onto
/// the x-y plane. Points whose normal has no planar component stay put.
/// Missing normals are estimated from the unperturbed scan with
/// `BASELINE_NORMAL_K` neighbours.
pub fn baseline_normal(scan: &PointCloud, lambda: f64) -> Result<PerturbationResult> {
    baseline_normal_with_k(scan, lambda, BASELINE_NORMAL_K)
}

/// `baseline_normal` with an explicit neighbourhood size for normal estimation.
pub fn baseline_normal_with_k(
    scan: &PointCloud,
    lambda: f64,
    k: usize,
) -> Result<PerturbationResult> {
    check_lambda(lambda)?;
    let estimated;
    let normals = match &scan.normals {
        Some(n) => n,
        None => {
            estimated = estimate_normals_auto(scan, k)?.cloud;
            estimated.normals.as_ref().expect("estimator sets normals")
        }
    };
    let displacements = normals
        .iter()
        .map(|n| normal_direction(n) * lambda)
        .collect();
    Ok(PerturbationResult::from_displacements(
        PerturbationMethod::Normal,
        scan,
        lambda,
        displacements,
    ))
}

/// Unit planar direction of the normal baseline, or zero when degenerate.
pub fn normal_direction(n: &Vector3<f64>) -> Vector3<f64> {
    let u = unify_normal_sign(*n);
    let planar = Vector3::new(u.x, u.y, 0.0);
    let norm = planar.norm();
    if norm < 1e-9 {
        Vector3::zeros()
    } else {
        planar / norm
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}
