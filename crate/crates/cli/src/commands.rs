use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icp_attack::attack::{
    baseline_normal_with_k, baseline_uniform, optimize_perturbation_with_model, AttackConfig,
    PerturbationResult, WeightForm,
};
use icp_attack::data::{
    generate_pairs, generate_route, load_manifest, split_seed, write_dataset, DatasetManifest,
    LoadedDataset, LocalizationPair, Profile, ShapeKind,
};
use icp_attack::gradients::{finite_difference_check, GradientConfig};
use icp_attack::harness::{
    route_map, run_benchmark_grouped, with_workers, BenchmarkOptions, GroupedPair,
};
use icp_attack::icp::{run_icp_with_model, MapModel};
use icp_attack::{pose_error, Error};
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    AttackArgs, AttackOptions, BaselineArgs, BaselineMethod, BenchArgs, Command, GenData,
    GradCheckArgs, IcpArgs, NumericalFailure, PairSelect, RouteArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Icp(a) => icp(a),
        Command::Attack(a) => attack(a),
        Command::Baseline(a) => baseline(a),
        Command::Bench(a) => bench(a),
        Command::RouteMap(a) => route(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_kinds(spec: &str) -> Result<Vec<ShapeKind>> {
    if spec == "mixed" {
        return Ok(ShapeKind::LANDMARK_RICH.to_vec());
    }
    Ok(spec
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<_>, Error>>()?)
}

fn gen_data(a: GenData) -> Result<()> {
    let profile: Profile = a.profile.parse()?;
    if a.count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()).into());
    }
    let pairs = if a.kind == "route" {
        if profile != Profile::Shapenet {
            return Err(Error::InvalidInput(
                "routes are generated with the shapenet profile only".into(),
            )
            .into());
        }
        generate_route(&ShapeKind::DEFAULT_ROUTE, a.count, a.density, a.seed)?
    } else {
        generate_pairs(&parse_kinds(&a.kind)?, a.count, profile, a.density, a.seed)?
    };
    let manifest = write_dataset(&a.out, &pairs, profile)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), manifest.display());
    Ok(())
}

fn load_pair(select: &PairSelect) -> Result<(LocalizationPair, Profile)> {
    let manifest = DatasetManifest::read(&select.pair)?;
    let index = match (&select.entry, manifest.entries.len()) {
        (Some(id), _) => manifest
            .entries
            .iter()
            .position(|e| &e.id == id)
            .ok_or_else(|| {
                Error::InvalidInput(format!("no entry {id} in {}", select.pair.display()))
            })?,
        (None, 1) => 0,
        (None, n) => {
            return Err(Error::InvalidInput(format!(
                "{} holds {n} pairs; choose one with --entry",
                select.pair.display()
            ))
            .into())
        }
    };
    let base = select.pair.parent().unwrap_or(Path::new("."));
    Ok((manifest.load_entry(index, base)?, manifest.profile()?))
}

#[derive(Serialize)]
struct IcpReport {
    id: String,
    #[serde(flatten)]
    result: icp_attack::icp::IcpResult,
    pose_error: icp_attack::PoseError,
    planar_error: f64,
}

fn icp(a: IcpArgs) -> Result<()> {
    let (pair, manifest_profile) = load_pair(&a.select)?;
    let profile = match &a.profile {
        Some(p) => p.parse()?,
        None => manifest_profile,
    };
    let mut cfg = profile.icp_config();
    if let Some(k) = a.max_iters {
        cfg.max_iterations = k;
    }
    if let Some(t) = a.tol {
        cfg.tolerance = t;
    }
    let map = MapModel::new(&pair.map)?;
    let result = run_icp_with_model(&pair.scan, &map, &cfg)?;
    let err = pose_error(&result.estimate, &pair.ground_truth);
    let converged = result.converged;
    print_json(&IcpReport {
        id: pair.id,
        result,
        pose_error: err,
        planar_error: err.planar_norm(),
    })?;
    if !converged {
        return Err(NumericalFailure(format!(
            "ICP did not converge within {} iterations",
            cfg.max_iterations
        ))
        .into());
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let data = load_manifest(path)?;
    for e in &data.errors {
        log::warn!("skipping {}: {}", e.id, e.error);
    }
    if data.pairs.is_empty() {
        return Err(
            Error::InvalidInput(format!("{} has no loadable pairs", path.display())).into(),
        );
    }
    Ok(data)
}

fn attack_config(opts: &AttackOptions, lambda: f64, profile: Profile) -> Result<AttackConfig> {
    let mut cfg = AttackConfig::new(lambda, profile.icp_config());
    cfg.alpha = opts.alpha;
    cfg.beta = opts.beta;
    cfg.w = opts
        .w
        .as_slice()
        .try_into()
        .context("--w takes exactly six values")?;
    cfg.form = if opts.scalar_weights {
        WeightForm::Scalar
    } else {
        WeightForm::Elementwise
    };
    cfg.steps = opts.steps;
    if let Some(k) = opts.unroll {
        cfg.unroll.unroll_iterations = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One line of the per-pair summary written by `attack` and `baseline`.
#[derive(Serialize)]
struct PairSummary {
    id: String,
    status: String,
    planar_error_before: Option<f64>,
    planar_error_after: Option<f64>,
    max_displacement: Option<f64>,
    warning: Option<String>,
}

fn summarize(id: &str, outcome: &std::result::Result<PerturbationResult, Error>) -> PairSummary {
    match outcome {
        Ok(r) => PairSummary {
            id: id.to_string(),
            status: "ok".into(),
            planar_error_before: r.pose_error_before.map(|e| e.planar_norm()),
            planar_error_after: r.planar_error(),
            max_displacement: Some(r.displacements.iter().map(|d| d.norm()).fold(0.0, f64::max)),
            warning: r.warning.clone(),
        },
        Err(e) => PairSummary {
            id: id.to_string(),
            status: format!("skipped: {e}"),
            planar_error_before: None,
            planar_error_after: None,
            max_displacement: None,
            warning: None,
        },
    }
}

/// Writes `<id>.json` and `<id>.ply` per result plus `summary.json`.
fn write_results(
    out: &Path,
    pairs: &[LocalizationPair],
    outcomes: &[std::result::Result<PerturbationResult, Error>],
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut summary = Vec::with_capacity(pairs.len());
    for (pair, outcome) in pairs.iter().zip(outcomes) {
        if let Ok(r) = outcome {
            write_json(&out.join(format!("{}.json", pair.id)), r)?;
            r.write_ply(&out.join(format!("{}.ply", pair.id)))?;
        }
        summary.push(summarize(&pair.id, outcome));
    }
    write_json(&out.join("summary.json"), &summary)?;
    let done = outcomes.iter().filter(|o| o.is_ok()).count();
    eprintln!("{done}/{} pairs written to {}", pairs.len(), out.display());
    // numerical skips are expected; anything else is a real failure
    if let Some(Err(e)) = outcomes
        .iter()
        .find(|o| matches!(o, Err(e) if !e.is_numerical()))
    {
        bail!("{e}");
    }
    if done == 0 {
        return Err(Error::AllSamplesDropped.into());
    }
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let profile = data.manifest.profile()?;
    let mut cfg = attack_config(&a.attack, a.lambda, profile)?;
    if let Some(s) = a.step_size {
        cfg.step_size = s;
    }
    cfg.validate()?;
    let outcomes = with_workers(a.workers, || {
        data.pairs
            .par_iter()
            .map(|pair| {
                let map = MapModel::new(&pair.map)?;
                optimize_perturbation_with_model(pair, &map, &cfg)
            })
            .collect::<Vec<_>>()
    })?;
    write_results(&a.out, &data.pairs, &outcomes)
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let icp = data.manifest.profile()?.icp_config();
    let outcomes = with_workers(a.workers, || {
        data.pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let map = MapModel::new(&pair.map)?;
                let mut r = match a.method {
                    BaselineMethod::Uniform => {
                        baseline_uniform(&pair.scan, a.lambda, split_seed(a.seed, i as u64))?
                    }
                    BaselineMethod::Normal => {
                        baseline_normal_with_k(&pair.scan, a.lambda, a.normal_k)?
                    }
                };
                let before = run_icp_with_model(&pair.scan, &map, &icp)?;
                r.pose_error_before = Some(pose_error(&before.estimate, &pair.ground_truth));
                r.evaluate(pair, &map, &icp)?;
                Ok(r)
            })
            .collect::<Vec<_>>()
    })?;
    write_results(&a.out, &data.pairs, &outcomes)
}

/// Group label for a manifest: its file stem, or its directory for `manifest.json`.
fn group_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) if stem == "manifest" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut pairs = Vec::new();
    let mut profile = None;
    for path in &a.manifest {
        let data = load_dataset(path)?;
        let p = data.manifest.profile()?;
        if profile.is_some_and(|q| q != p) {
            return Err(Error::InvalidInput("all manifests must share one profile".into()).into());
        }
        profile = Some(p);
        let group = group_name(path);
        pairs.extend(data.pairs.into_iter().map(|pair| GroupedPair {
            group: group.clone(),
            pair,
        }));
    }
    let profile = profile.expect("at least one manifest");
    let first = *a
        .lambdas
        .first()
        .context("--lambdas needs at least one value")?;
    let mut opts = BenchmarkOptions::new(
        a.lambdas.clone(),
        attack_config(&a.attack, first, profile)?,
        a.seed,
    );
    opts.allowance_quantile = a.allowance_quantile;
    opts.workers = a.workers;
    let report = run_benchmark_grouped(&pairs, &opts)?;
    write_json(&a.out, &report)?;
    let csv_path: PathBuf = a.out.with_extension("csv");
    let file =
        fs::File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    report.write_csv(file)?;
    eprintln!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(())
}

fn route(a: RouteArgs) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let cfg = attack_config(&a.attack, a.lambda, data.manifest.profile()?)?;
    let report = route_map(&data.pairs, &cfg, a.cap, a.workers)?;
    write_json(&a.out, &report)
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let (pair, profile) = load_pair(&a.select)?;
    let mut cfg = GradientConfig::new(profile.icp_config());
    if let Some(k) = a.unroll {
        cfg.unroll_iterations = k;
    }
    cfg.validate()?;
    let weights: [f64; 6] =
        a.w.as_slice()
            .try_into()
            .context("--w takes exactly six values")?;
    let objective = icp_attack::attack::AdversarialObjective::new(weights);
    let map = MapModel::new(&pair.map)?;
    let report = finite_difference_check(
        &pair.scan,
        &map,
        &cfg,
        &pair.ground_truth,
        &objective,
        a.samples,
        a.seed,
    )?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    let passed = report.passes(a.required);
    println!(
        "{}: {}/{} probes agree ({:.1}%), {} excluded",
        if passed { "PASS" } else { "FAIL" },
        report.probes.iter().filter(|p| p.passed).count(),
        report.probes.len(),
        100.0 * report.pass_fraction,
        report.excluded
    );
    if !passed {
        return Err(NumericalFailure(format!(
            "gradient check below the required {:.0}% agreement",
            100.0 * a.required
        ))
        .into());
    }
    Ok(())
}
