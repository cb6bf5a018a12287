//! Benchmark tables, baseline allowances and route vulnerability maps.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    baseline_normal, baseline_uniform, optimize_perturbation_with_model, overshoots,
    quantile_sorted, AttackConfig, PerturbationResult,
};
use crate::data::{split_seed, LocalizationPair};
use crate::error::{Error, Result};
use crate::geometry::{pose_error, PoseError};
use crate::icp::{run_icp_with_model, MapModel};

pub const DEFAULT_ALLOWANCE_QUANTILE: f64 = 0.997;
/// Arc length of one route bin.
pub const ROUTE_BIN: f64 = 1.0;

/// Longitudinal and lateral error only.
pub fn planar_translation_error(err: &PoseError) -> f64 {
    err.planar_norm()
}

/// Quantile of the positive displacement excess over `lambda`, pooled over every
/// point of every result.
pub fn compute_allowance(attack_results: &[PerturbationResult], quantile: f64) -> Result<f64> {
    if attack_results.is_empty() {
        return Err(Error::invalid("allowance needs at least one attack result"));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::invalid(format!(
            "quantile must lie in (0, 1], got {quantile}"
        )));
    }
    let mut pooled: Vec<f64> = attack_results
        .iter()
        .flat_map(|r| overshoots(&r.displacements, r.lambda))
        .collect();
    pooled.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&pooled, quantile))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Original,
    Uniform,
    Normal,
    Attack,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Original,
        Method::Uniform,
        Method::Normal,
        Method::Attack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Uniform => "uniform",
            Method::Normal => "normal",
            Method::Attack => "attack",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub lambda: f64,
    /// Bound the method actually ran with (`lambda + allowance` for baselines).
    pub bound: f64,
    pub mean_error: f64,
    pub std_error: f64,
    /// Share of samples where the attack's error is strictly larger; absent on the attack row.
    pub pct_attack_larger: Option<f64>,
    pub samples_used: usize,
    pub samples_dropped: usize,
}

/// Planar errors of all four methods on one pair at one bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub id: String,
    pub group: String,
    pub lambda: f64,
    pub original: Option<f64>,
    pub uniform: Option<f64>,
    pub normal: Option<f64>,
    pub attack: Option<f64>,
    /// Whether the attack optimizer hit its failure limit.
    pub attack_warning: bool,
}

impl PairOutcome {
    pub fn error(&self, method: Method) -> Option<f64> {
        match method {
            Method::Original => self.original,
            Method::Uniform => self.uniform,
            Method::Normal => self.normal,
            Method::Attack => self.attack,
        }
    }

    /// Kept only when every method produced a converged estimate.
    pub fn usable(&self) -> bool {
        Method::ALL.iter().all(|m| self.error(*m).is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRows {
    pub group: String,
    pub rows: Vec<BenchmarkRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub allowance_quantile: f64,
    /// `(lambda, allowance)` per bound.
    pub allowances: Vec<(f64, f64)>,
    pub rows: Vec<BenchmarkRow>,
    pub groups: Vec<GroupRows>,
    pub outcomes: Vec<PairOutcome>,
}

impl BenchmarkReport {
    pub fn row(&self, method: Method, lambda: f64) -> Option<&BenchmarkRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.lambda == lambda)
    }

    /// Table with one line per `(lambda, method)`, mirroring the paper's layout.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "group",
            "lambda",
            "method",
            "bound",
            "mean_error",
            "std_error",
            "pct_attack_larger",
            "samples_used",
            "samples_dropped",
        ])
        .map_err(csv_error)?;
        let pooled = std::iter::once(("all", &self.rows));
        for (group, rows) in pooled.chain(self.groups.iter().map(|g| (g.group.as_str(), &g.rows))) {
            for r in rows {
                w.write_record([
                    group.to_string(),
                    r.lambda.to_string(),
                    r.method.name().to_string(),
                    r.bound.to_string(),
                    r.mean_error.to_string(),
                    r.std_error.to_string(),
                    r.pct_attack_larger
                        .map(|p| p.to_string())
                        .unwrap_or_default(),
                    r.samples_used.to_string(),
                    r.samples_dropped.to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::parse("csv output", e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub lambdas: Vec<f64>,
    pub attack: AttackConfig,
    pub seed: u64,
    pub allowance_quantile: f64,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl BenchmarkOptions {
    pub fn new(lambdas: Vec<f64>, attack: AttackConfig, seed: u64) -> Self {
        Self {
            lambdas,
            attack,
            seed,
            allowance_quantile: DEFAULT_ALLOWANCE_QUANTILE,
            workers: None,
        }
    }
}

/// A pair tagged with the dataset it came from.
#[derive(Clone, Debug)]
pub struct GroupedPair {
    pub group: String,
    pub pair: LocalizationPair,
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::invalid("worker count must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn evaluate(
    result: &mut PerturbationResult,
    pair: &LocalizationPair,
    map: &MapModel,
    config: &AttackConfig,
) -> Result<Option<f64>> {
    result.evaluate(pair, map, &config.unroll.icp)?;
    Ok(result.planar_error())
}

fn original_error(
    pair: &LocalizationPair,
    map: &MapModel,
    config: &AttackConfig,
) -> Result<Option<f64>> {
    match run_icp_with_model(&pair.scan, map, &config.unroll.icp) {
        Ok(r) if r.converged => Ok(Some(planar_translation_error(&pose_error(
            &r.estimate,
            &pair.ground_truth,
        )))),
        Ok(_) => Ok(None),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Attack at one bound, or `None` when the sample has to be dropped.
pub fn attack_pair(
    pair: &LocalizationPair,
    map: &MapModel,
    config: &AttackConfig,
) -> Result<Option<PerturbationResult>> {
    match optimize_perturbation_with_model(pair, map, config) {
        Ok(r) => Ok(Some(r)),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

struct AttackOutcome {
    original: Option<f64>,
    per_lambda: Vec<Option<PerturbationResult>>,
}

/// Table-1 style comparison of the attack against both baselines over `pairs`.
pub fn run_benchmark(
    pairs: &[LocalizationPair],
    lambdas: &[f64],
    attack_config: &AttackConfig,
    seed: u64,
) -> Result<BenchmarkReport> {
    let grouped: Vec<_> = pairs
        .iter()
        .map(|p| GroupedPair {
            group: "all".into(),
            pair: p.clone(),
        })
        .collect();
    run_benchmark_grouped(
        &grouped,
        &BenchmarkOptions::new(lambdas.to_vec(), attack_config.clone(), seed),
    )
}

pub fn run_benchmark_grouped(
    pairs: &[GroupedPair],
    options: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("benchmark needs at least one pair"));
    }
    if options.lambdas.is_empty() {
        return Err(Error::invalid("benchmark needs at least one lambda"));
    }
    for &l in &options.lambdas {
        options.attack.clone().with_lambda(l).validate()?;
    }
    // canonical order so per-pair seeds do not depend on input order
    let mut order: Vec<&GroupedPair> = pairs.iter().collect();
    order.sort_by(|a, b| (&a.group, &a.pair.id).cmp(&(&b.group, &b.pair.id)));

    with_workers(options.workers, || benchmark_inner(&order, options))?
}

fn benchmark_inner(order: &[&GroupedPair], options: &BenchmarkOptions) -> Result<BenchmarkReport> {
    let configs: Vec<AttackConfig> = options
        .lambdas
        .iter()
        .map(|&l| {
            let mut c = options.attack.clone().with_lambda(l);
            c.seed = options.seed;
            c
        })
        .collect();

    let attacked: Vec<AttackOutcome> = order
        .par_iter()
        .map(|gp| -> Result<AttackOutcome> {
            let map = MapModel::new(&gp.pair.map)?;
            let original = original_error(&gp.pair, &map, &options.attack)?;
            let per_lambda = configs
                .iter()
                .map(|c| attack_pair(&gp.pair, &map, c))
                .collect::<Result<_>>()?;
            Ok(AttackOutcome {
                original,
                per_lambda,
            })
        })
        .collect::<Result<_>>()?;

    let mut allowances = Vec::with_capacity(configs.len());
    for (li, c) in configs.iter().enumerate() {
        let results: Vec<PerturbationResult> = attacked
            .iter()
            .filter_map(|a| a.per_lambda[li].clone())
            .collect();
        let allowance = if results.is_empty() {
            0.0
        } else {
            compute_allowance(&results, options.allowance_quantile)?
        };
        allowances.push((c.lambda, allowance));
    }

    let outcomes: Vec<Vec<PairOutcome>> = order
        .par_iter()
        .enumerate()
        .map(|(pi, gp)| -> Result<Vec<PairOutcome>> {
            let pair = &gp.pair;
            let map = MapModel::new(&pair.map)?;
            let mut out = Vec::with_capacity(configs.len());
            for (li, c) in configs.iter().enumerate() {
                let bound = c.lambda + allowances[li].1;
                let attack = attacked[pi].per_lambda[li].as_ref();
                let mut uniform = baseline_uniform(
                    &pair.scan,
                    bound,
                    split_seed(split_seed(options.seed, pi as u64), li as u64),
                )?;
                let mut normal = baseline_normal(&pair.scan, bound)?;
                out.push(PairOutcome {
                    id: pair.id.clone(),
                    group: gp.group.clone(),
                    lambda: c.lambda,
                    original: attacked[pi].original,
                    uniform: evaluate(&mut uniform, pair, &map, c)?,
                    normal: evaluate(&mut normal, pair, &map, c)?,
                    attack: attack.and_then(|r| r.planar_error()),
                    attack_warning: attack.is_some_and(|r| r.warning.is_some()),
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<PairOutcome> = (0..configs.len())
        .flat_map(|li| outcomes.iter().map(move |per_pair| per_pair[li].clone()))
        .collect();

    let rows = summarize(&outcomes, &allowances)?;
    let mut by_group: BTreeMap<&str, Vec<PairOutcome>> = BTreeMap::new();
    for o in &outcomes {
        by_group
            .entry(o.group.as_str())
            .or_default()
            .push(o.clone());
    }
    let groups = if by_group.len() > 1 {
        by_group
            .into_iter()
            .map(|(g, os)| {
                Ok(GroupRows {
                    group: g.to_string(),
                    rows: summarize_lenient(&os, &allowances),
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    Ok(BenchmarkReport {
        seed: options.seed,
        allowance_quantile: options.allowance_quantile,
        allowances,
        rows,
        groups,
        outcomes,
    })
}

fn summarize(outcomes: &[PairOutcome], allowances: &[(f64, f64)]) -> Result<Vec<BenchmarkRow>> {
    for &(lambda, _) in allowances {
        if !outcomes.iter().any(|o| o.lambda == lambda && o.usable()) {
            return Err(Error::AllSamplesDropped);
        }
    }
    Ok(summarize_lenient(outcomes, allowances))
}

fn summarize_lenient(outcomes: &[PairOutcome], allowances: &[(f64, f64)]) -> Vec<BenchmarkRow> {
    let mut rows = Vec::new();
    for &(lambda, allowance) in allowances {
        let at: Vec<&PairOutcome> = outcomes.iter().filter(|o| o.lambda == lambda).collect();
        let used: Vec<&PairOutcome> = at.iter().copied().filter(|o| o.usable()).collect();
        let dropped = at.len() - used.len();
        for method in Method::ALL {
            let errors: Vec<f64> = used
                .iter()
                .map(|o| o.error(method).expect("usable"))
                .collect();
            let (mean, std) = mean_std(&errors);
            let pct = (method != Method::Attack && !used.is_empty()).then(|| {
                let wins = used
                    .iter()
                    .filter(|o| o.attack.expect("usable") > o.error(method).expect("usable"))
                    .count();
                wins as f64 / used.len() as f64
            });
            let bound = match method {
                Method::Original => 0.0,
                Method::Attack => lambda,
                Method::Uniform | Method::Normal => lambda + allowance,
            };
            rows.push(BenchmarkRow {
                method,
                lambda,
                bound,
                mean_error: mean,
                std_error: std,
                pct_attack_larger: pct,
                samples_used: used.len(),
                samples_dropped: dropped,
            });
        }
    }
    rows
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub bin: usize,
    /// Route position of the bin centre.
    pub location: [f64; 2],
    /// Mean attack-induced planar error over the repeats in this bin.
    pub worst_error: f64,
    /// `worst_error` clipped to the cap for display.
    pub visual_error: f64,
    pub cap_applied: bool,
    pub samples: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub cap: f64,
    pub bin_size: f64,
    pub lambda: f64,
    pub entries: Vec<RouteEntry>,
}

impl RouteReport {
    /// Linear-interpolation percentile of the per-bin errors.
    pub fn percentile(&self, q: f64) -> f64 {
        let mut v: Vec<f64> = self.entries.iter().map(|e| e.worst_error).collect();
        v.sort_by(f64::total_cmp);
        quantile_sorted(&v, q)
    }
}

/// Route polyline through the distinct locations in id order, as cumulative arc lengths.
struct Polyline {
    vertices: Vec<Vector2<f64>>,
    arc: Vec<f64>,
}

impl Polyline {
    fn new(vertices: Vec<Vector2<f64>>) -> Self {
        let mut arc = vec![0.0];
        for w in vertices.windows(2) {
            arc.push(arc.last().unwrap() + (w[1] - w[0]).norm());
        }
        Self { vertices, arc }
    }

    /// Arc length of the closest point on the polyline.
    fn project(&self, p: &Vector2<f64>) -> f64 {
        if self.vertices.len() == 1 {
            return 0.0;
        }
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.vertices.windows(2).enumerate() {
            let seg = w[1] - w[0];
            let len2 = seg.norm_squared();
            let t = if len2 == 0.0 {
                0.0
            } else {
                ((p - w[0]).dot(&seg) / len2).clamp(0.0, 1.0)
            };
            let d = (w[0] + seg * t - p).norm_squared();
            if d < best.0 {
                best = (d, self.arc[i] + t * len2.sqrt());
            }
        }
        best.1
    }

    fn point_at(&self, s: f64) -> Vector2<f64> {
        if self.vertices.len() == 1 {
            return self.vertices[0];
        }
        for (i, w) in self.vertices.windows(2).enumerate() {
            let (a, b) = (self.arc[i], self.arc[i + 1]);
            if s <= b || i + 2 == self.vertices.len() {
                let t = if b > a {
                    ((s - a) / (b - a)).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                return w[0] + (w[1] - w[0]) * t;
            }
        }
        unreachable!()
    }
}

/// Per-bin mean of attack-induced planar error along a route.
pub fn route_map(
    pairs: &[LocalizationPair],
    attack_config: &AttackConfig,
    cap: f64,
    workers: Option<usize>,
) -> Result<RouteReport> {
    if !(cap > 0.0) {
        return Err(Error::invalid(format!("cap must be positive, got {cap}")));
    }
    attack_config.validate()?;
    let mut order: Vec<&LocalizationPair> = pairs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut locations = Vec::with_capacity(order.len());
    for p in &order {
        locations.push(
            p.location
                .ok_or_else(|| Error::invalid(format!("pair {} has no location", p.id)))?,
        );
    }
    let mut vertices: Vec<Vector2<f64>> = Vec::new();
    for l in &locations {
        if vertices.last() != Some(l) {
            vertices.push(*l);
        }
    }
    let line = Polyline::new(vertices);

    let errors: Vec<Option<f64>> = with_workers(workers, || {
        order
            .par_iter()
            .map(|p| {
                let map = MapModel::new(&p.map)?;
                Ok(attack_pair(p, &map, attack_config)?.and_then(|r| r.planar_error()))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut bins: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (loc, err) in locations.iter().zip(&errors) {
        let bin = (line.project(loc) / ROUTE_BIN).floor() as usize;
        let slot = bins.entry(bin).or_default();
        match err {
            Some(e) => slot.0.push(*e),
            None => slot.1 += 1,
        }
    }
    let entries = bins
        .into_iter()
        .filter(|(_, (errs, _))| !errs.is_empty())
        .map(|(bin, (errs, dropped))| {
            let raw = errs.iter().sum::<f64>() / errs.len() as f64;
            let centre = line.point_at((bin as f64 + 0.5) * ROUTE_BIN);
            RouteEntry {
                bin,
                location: [centre.x, centre.y],
                worst_error: raw,
                visual_error: raw.min(cap),
                cap_applied: raw > cap,
                samples: errs.len(),
                dropped,
            }
        })
        .collect();
    Ok(RouteReport {
        cap,
        bin_size: ROUTE_BIN,
        lambda: attack_config.lambda,
        entries,
    })
}

/// Visual capping rule of the route map.
pub fn cap_error(raw: f64, cap: f64) -> (f64, bool) {
    (raw.min(cap), raw > cap)
}
