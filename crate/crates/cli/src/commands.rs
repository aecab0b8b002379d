use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use tbcure::data::{ingest_by_arm, write_arms_csv, write_schema, Schema, StudyDataset};
use tbcure::inference::{
    self, average_treatment_effect, marginal_trajectory, replicate_config, trajectory_stream, write_ate_csv, write_trajectory_csv, AteEstimate,
    Landmarks, TrajectoryEstimate, TrajectoryOptions,
};
use tbcure::mcem::{FitConfig, FitResult};
use tbcure::rng::derive_seed;
use tbcure::simulation::{generate_dataset, run_benchmark, BenchmarkOptions, SimConfig, TrueEffects};

use crate::io::{parse_grid, parse_list, parse_vec4, read_config, read_json, OutDir};
use crate::{BenchmarkArgs, BootstrapArgs, DataArgs, FitArgs, ScenarioArgs, SimulateArgs, TrajectoryArgs};

pub enum Outcome {
    Converged,
    NotConverged,
}

impl Outcome {
    fn from(converged: bool) -> Self {
        if converged {
            Outcome::Converged
        } else {
            Outcome::NotConverged
        }
    }
}

const BOOT_TAG: u64 = 0x424f_4f54;

fn default_mu_r() -> nalgebra::Vector4<f64> {
    nalgebra::Vector4::new(0.5, 0.0, -0.5, 0.5)
}

fn scenario_from(a: &ScenarioArgs) -> Result<SimConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_config::<SimConfig>(p)?,
        None => SimConfig::scenario(200, 0.2, default_mu_r()),
    };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(pi) = a.pi {
        cfg.truth.stable_rate = pi;
    }
    if let Some(m) = &a.mu_r {
        cfg.truth.re_mean = parse_vec4(m, "--mu-r")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn file_name(stem: &str, arm: &str, ext: &str) -> String {
    if arm.is_empty() {
        format!("{stem}.{ext}")
    } else {
        let safe: String = arm
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{stem}_{safe}.{ext}")
    }
}

fn with_prefix(data: &StudyDataset, prefix: &str) -> Result<StudyDataset> {
    let subjects = data
        .subjects()
        .iter()
        .map(|s| s.relabeled(format!("{prefix}{}", s.subject_id)))
        .collect();
    Ok(StudyDataset::new(subjects)?)
}

#[derive(Serialize)]
struct ArmTruth<'a> {
    arm: &'a str,
    scenario: &'a SimConfig,
}

pub fn simulate(a: &SimulateArgs) -> Result<Outcome> {
    let seed = a.out.seed;
    let mut base = scenario_from(&a.scenario)?;
    base.seed = seed;
    let arms: Vec<(String, SimConfig)> = match &a.arms {
        None => {
            if a.control_mu_r.is_some() {
                bail!("--control-mu-r needs --arms");
            }
            vec![(String::new(), base)]
        }
        Some(sizes) => {
            let sizes = parse_list(sizes, "--arms")?;
            let [t, c] = sizes[..] else {
                bail!("--arms needs two sizes, got {}", sizes.len());
            };
            if t < 1.0 || c < 1.0 || t.fract() != 0.0 || c.fract() != 0.0 {
                bail!("--arms sizes must be positive integers");
            }
            let treatment = SimConfig { n: t as usize, ..base.clone() };
            let mut control = SimConfig { n: c as usize, ..base };
            if let Some(m) = &a.control_mu_r {
                control.truth.re_mean = parse_vec4(m, "--control-mu-r")?;
                control.validate()?;
            }
            vec![("treatment".into(), treatment), ("control".into(), control)]
        }
    };

    let mut out = OutDir::create(&a.out.out)?;
    let mut datasets = Vec::new();
    let mut latent = csv::Writer::from_writer(out.file("latent.csv")?);
    latent.write_record(["subject_id", "arm", "group", "omega", "b0", "b1", "b2", "progression_time"])?;
    for (k, (arm, cfg)) in arms.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64]));
        let sim = generate_dataset(cfg, &mut rng)?;
        let data = if arms.len() > 1 { with_prefix(&sim.dataset, &format!("{}-", &arm[..1].to_uppercase()))? } else { sim.dataset };
        for (s, e) in data.subjects().iter().zip(&sim.effects) {
            let f = |v: f64| v.to_string();
            let row = match e {
                TrueEffects::ChangePoint { omega, b, progression_time } => {
                    vec![s.subject_id.clone(), arm.clone(), "change_point".into(), f(*omega), f(b[0]), f(b[1]), f(b[2]), f(*progression_time)]
                }
                TrueEffects::Stable { b } => {
                    vec![s.subject_id.clone(), arm.clone(), "stable".into(), String::new(), f(b[0]), f(b[1]), String::new(), String::new()]
                }
            };
            latent.write_record(&row)?;
        }
        if sim.regenerated > 0 {
            log::info!("arm '{arm}': regenerated {} subjects", sim.regenerated);
        }
        datasets.push((arm.clone(), data));
    }
    latent.flush()?;
    drop(latent);

    let refs: Vec<(String, &StudyDataset)> = datasets.iter().map(|(a, d)| (a.clone(), d)).collect();
    let schema = write_arms_csv(&refs, &out.path("long.csv"), &out.path("events.csv"))?;
    write_schema(&schema, &out.path("schema.json"))?;
    let truth: Vec<ArmTruth> = arms.iter().map(|(arm, scenario)| ArmTruth { arm, scenario }).collect();
    out.json("truth.json", &truth)?;
    out.finish("simulate", seed, BTreeMap::new(), serde_json::to_value(&truth)?)?;
    Ok(Outcome::Converged)
}

fn load_schema(schema: &Option<std::path::PathBuf>, input_days: bool) -> Result<Schema> {
    let mut s = match schema {
        Some(p) => Schema::from_json_file(p)?,
        None => Schema::default(),
    };
    if input_days {
        s.days = true;
    }
    Ok(s)
}

fn load_arms(long: &Path, events: &Path, schema: &Schema) -> Result<Vec<(String, StudyDataset)>> {
    Ok(ingest_by_arm(long, events, schema)?.into_iter().collect())
}

fn data_inputs(d: &DataArgs) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::from([("long", d.long.display().to_string()), ("events", d.events.display().to_string())]);
    if let Some(s) = &d.schema {
        m.insert("schema", s.display().to_string());
    }
    m
}

fn fit_config(path: &Option<std::path::PathBuf>, baseline: bool, seed: u64) -> Result<FitConfig> {
    let mut c = match path {
        Some(p) => read_config::<FitConfig>(p)?,
        None => FitConfig::default(),
    };
    if baseline {
        c.baseline_mode = true;
    }
    c.seed = seed;
    c.validate()?;
    Ok(c)
}

/// Arm `k` of `total`: a single arm keeps the run seed.
fn arm_seed(seed: u64, k: usize, total: usize) -> u64 {
    if total == 1 {
        seed
    } else {
        derive_seed(seed, &[k as u64])
    }
}

fn fit_arms(arms: &[(String, StudyDataset)], config: &FitConfig) -> Result<Vec<FitResult>> {
    arms.iter()
        .enumerate()
        .map(|(k, (name, data))| {
            let cfg = FitConfig { seed: arm_seed(config.seed, k, arms.len()), ..config.clone() };
            let r = tbcure::mcem::fit(data, &cfg).with_context(|| if name.is_empty() { "fit failed".to_string() } else { format!("fit failed for arm '{name}'") })?;
            if !r.converged {
                log::warn!("arm '{name}': no convergence after {} iterations", r.iterations_used);
            }
            Ok(r)
        })
        .collect()
}

pub fn fit(a: &FitArgs) -> Result<Outcome> {
    let schema = load_schema(&a.data.schema, a.data.input_days)?;
    let arms = load_arms(&a.data.long, &a.data.events, &schema)?;
    let config = fit_config(&a.config, a.baseline, a.out.seed)?;
    let fits = fit_arms(&arms, &config)?;
    let mut out = OutDir::create(&a.out.out)?;
    for ((name, _), r) in arms.iter().zip(&fits) {
        out.json(&file_name("fit", name, "json"), r)?;
    }
    out.finish("fit", a.out.seed, data_inputs(&a.data), serde_json::to_value(&config)?)?;
    Ok(Outcome::from(fits.iter().all(|r| r.converged)))
}

pub fn bootstrap(a: &BootstrapArgs) -> Result<Outcome> {
    let f = &a.fit;
    let schema = load_schema(&f.data.schema, f.data.input_days)?;
    let arms = load_arms(&f.data.long, &f.data.events, &schema)?;
    let config = fit_config(&f.config, f.baseline, f.out.seed)?;
    let fits = fit_arms(&arms, &config)?;
    let mut out = OutDir::create(&f.out.out)?;
    let mut converged = true;
    for (k, ((name, data), full)) in arms.iter().zip(&fits).enumerate() {
        let rep = if a.cold { config.clone() } else { replicate_config(&config, &full.params) };
        let boot = inference::bootstrap(data, &rep, a.b, derive_seed(f.out.seed, &[BOOT_TAG, k as u64]))?;
        converged &= full.converged;
        out.json(&file_name("fit", name, "json"), full)?;
        out.json(&file_name("bootstrap", name, "json"), &boot)?;
        let mut w = csv::Writer::from_writer(out.file(&file_name("intervals", name, "csv"))?);
        w.write_record(["parameter", "estimate", "lower", "upper", "se"])?;
        let (est, lo, hi, se) = (full.params.to_vec(), boot.ci_lower.to_vec(), boot.ci_upper.to_vec(), boot.standard_errors());
        for (j, p) in full.params.names().iter().enumerate() {
            w.write_record([p.clone(), est[j].to_string(), lo[j].to_string(), hi[j].to_string(), se[j].to_string()])?;
        }
        w.flush()?;
        for msg in &boot.warnings {
            log::warn!("{msg}");
        }
    }
    let echo = serde_json::json!({ "fit": config, "B": a.b, "warm_start": !a.cold });
    out.finish("bootstrap", f.out.seed, data_inputs(&f.data), echo)?;
    Ok(Outcome::from(converged))
}

fn arm_labels(paths: &[std::path::PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let distinct = stems.len() < 2 || stems[0] != stems[1];
    if distinct && stems.iter().all(|s| !s.is_empty()) {
        stems
    } else {
        (1..=paths.len()).map(|k| format!("arm{k}")).collect()
    }
}

#[derive(Serialize)]
struct LandmarkFile<'a> {
    #[serde(flatten)]
    landmarks: &'a Landmarks,
    treatment: &'a str,
    control: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
}

fn write_trajectories(out: &mut OutDir, labels: &[String], trajs: &[&TrajectoryEstimate], ate: Option<&AteEstimate>, marks: Option<&Landmarks>, days: bool) -> Result<()> {
    for (label, t) in labels.iter().zip(trajs) {
        let mut w = out.file(&file_name("trajectory", label, "csv"))?;
        write_trajectory_csv(t, days, &mut w)?;
        w.flush()?;
    }
    if let Some(ate) = ate {
        let mut w = out.file("ate.csv")?;
        write_ate_csv(ate, days, &mut w)?;
        w.flush()?;
        let empty = Landmarks { separation_years: None, separation_days: None, significance_years: None, significance_days: None };
        let file = LandmarkFile {
            landmarks: marks.unwrap_or(&empty),
            treatment: &labels[0],
            control: &labels[1],
            note: marks.is_none().then_some("landmarks need bootstrap bands; rerun with --long, --events and --B"),
        };
        out.json("landmarks.json", &file)?;
    }
    Ok(())
}

pub fn trajectory(a: &TrajectoryArgs) -> Result<Outcome> {
    let grid = parse_grid(&a.grid)?;
    if a.draws == 0 {
        bail!("--draws must be positive");
    }
    if a.fits.len() > 2 {
        bail!("at most two --fit files (treatment, control), got {}", a.fits.len());
    }
    let seed = a.out.seed;
    let mut inputs: BTreeMap<&str, String> = BTreeMap::new();
    for (k, p) in a.fits.iter().enumerate() {
        inputs.insert(if k == 0 { "fit_treatment" } else { "fit_control" }, p.display().to_string());
    }
    let fits: Vec<FitResult> = a.fits.iter().map(|p| read_json(p)).collect::<Result<_>>()?;

    let Some(b) = a.b else {
        if a.long.is_some() || a.events.is_some() {
            bail!("data files are only used for bootstrap bands; add --B");
        }
        if fits.is_empty() {
            bail!("give one or two --fit files, or data files with --B");
        }
        let labels = arm_labels(&a.fits);
        let trajs: Vec<TrajectoryEstimate> = fits
            .iter()
            .map(|f| marginal_trajectory(&f.params, &f.design_means, &grid, a.draws, &mut trajectory_stream(seed, u64::MAX)))
            .collect::<tbcure::Result<_>>()?;
        let ate = (trajs.len() == 2)
            .then(|| -> Result<AteEstimate> {
                Ok(AteEstimate { grid: grid.clone(), ate: average_treatment_effect(&trajs[0], &trajs[1])?, ci_lower: None, ci_upper: None })
            })
            .transpose()?;
        let mut out = OutDir::create(&a.out.out)?;
        write_trajectories(&mut out, &labels, &trajs.iter().collect::<Vec<_>>(), ate.as_ref(), None, a.days)?;
        out.json("trajectory.json", &trajs)?;
        let echo = serde_json::json!({ "grid": grid, "draws": a.draws, "days": a.days });
        out.finish("trajectory", seed, inputs, echo)?;
        return Ok(Outcome::Converged);
    };

    let (Some(long), Some(events)) = (&a.long, &a.events) else {
        bail!("--B needs --long and --events");
    };
    inputs.insert("long", long.display().to_string());
    inputs.insert("events", events.display().to_string());
    let schema = load_schema(&a.schema, a.input_days)?;
    let mut arms = load_arms(long, events, &schema)?;
    if arms.len() > 2 {
        bail!("the data hold {} arms; trajectory handles one or two", arms.len());
    }
    if let Some(t) = &a.treatment {
        let k = arms.iter().position(|(n, _)| n == t).with_context(|| format!("no arm named '{t}' in the data"))?;
        arms.swap(0, k);
    }
    if !fits.is_empty() && fits.len() != arms.len() {
        bail!("{} --fit files for {} arms in the data", fits.len(), arms.len());
    }
    let config = fit_config(&a.config, false, seed)?;
    let options = TrajectoryOptions { replicates: b, draws: a.draws, warm_start: true, seed };
    let ci = if fits.is_empty() {
        inference::trajectory_ci(&arms, &config, &grid, options)?
    } else {
        let with_fits: Vec<_> = arms.into_iter().zip(fits).map(|((n, d), f)| (n, d, f)).collect();
        inference::trajectory_ci_from_fits(&with_fits, &config, &grid, options)?
    };
    let labels: Vec<String> = ci
        .arms
        .iter()
        .enumerate()
        .map(|(k, arm)| if arm.arm.is_empty() { format!("arm{}", k + 1) } else { arm.arm.clone() })
        .collect();
    let trajs: Vec<&TrajectoryEstimate> = ci.arms.iter().map(|arm| &arm.trajectory).collect();
    let mut out = OutDir::create(&a.out.out)?;
    write_trajectories(&mut out, &labels, &trajs, ci.ate.as_ref(), ci.landmarks.as_ref(), a.days)?;
    for (label, arm) in labels.iter().zip(&ci.arms) {
        out.json(&file_name("fit", label, "json"), &arm.fit)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        arms: Vec<(&'a str, usize, usize)>,
        landmarks: &'a Option<Landmarks>,
        replicates: usize,
        draws: usize,
        warnings: &'a [String],
    }
    let summary = Summary {
        arms: ci.arms.iter().zip(&labels).map(|(a, l)| (l.as_str(), a.replicates_used, a.failures)).collect(),
        landmarks: &ci.landmarks,
        replicates: ci.replicates,
        draws: ci.draws,
        warnings: &ci.warnings,
    };
    out.json("trajectory.json", &summary)?;
    for w in &ci.warnings {
        log::warn!("{w}");
    }
    let echo = serde_json::json!({ "fit": config, "B": b, "grid": grid, "draws": a.draws, "days": a.days });
    out.finish("trajectory", seed, inputs, echo)?;
    Ok(Outcome::from(ci.arms.iter().all(|arm| arm.fit.converged)))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchmarkConfig {
    scenario: Option<SimConfig>,
    fit: Option<FitConfig>,
    options: Option<BenchmarkOptions>,
}

pub fn benchmark(a: &BenchmarkArgs) -> Result<Outcome> {
    let file: BenchmarkConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => BenchmarkConfig::default(),
    };
    let mut scenario = file.scenario.unwrap_or_else(|| SimConfig::scenario(200, 0.2, default_mu_r()));
    if let Some(n) = a.n {
        scenario.n = n;
    }
    if let Some(pi) = a.pi {
        scenario.truth.stable_rate = pi;
    }
    if let Some(m) = &a.mu_r {
        scenario.truth.re_mean = parse_vec4(m, "--mu-r")?;
    }
    if let Some(r) = a.reps {
        scenario.replications = r;
    }
    scenario.seed = a.out.seed;
    let fit = file.fit.unwrap_or_default();
    let mut options = file.options.unwrap_or_default();
    if let Some(b) = a.b {
        options.bootstrap_replicates = b;
    }
    if a.baseline {
        options.include_baseline = true;
    }
    if let Some(g) = &a.grid {
        options.grid = parse_grid(g)?;
    }
    let report = run_benchmark(&scenario, &fit, &options)?;
    let mut out = OutDir::create(&a.out.out)?;
    let mut w = out.file("parameters.csv")?;
    report.write_parameter_csv(&mut w)?;
    w.flush()?;
    let mut w = out.file("trajectory.csv")?;
    report.write_trajectory_csv(&mut w)?;
    w.flush()?;
    out.json("report.json", &report)?;
    for m in std::iter::once(&report.full).chain(&report.baseline) {
        if m.failures > 0 || m.non_converged > 0 {
            log::warn!("{} model: {} failed replications, {} non-converged fits", m.model, m.failures, m.non_converged);
        }
    }
    let echo = serde_json::json!({ "scenario": scenario, "fit": fit, "options": options });
    let mut inputs = BTreeMap::new();
    if let Some(p) = &a.config {
        inputs.insert("config", p.display().to_string());
    }
    out.finish("benchmark", a.out.seed, inputs, echo)?;
    Ok(Outcome::Converged)
}
