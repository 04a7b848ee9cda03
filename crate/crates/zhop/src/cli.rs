//! Command-line layer: flat key=value configuration resolved through
//! preset → file → environment → flag stages, CSV/JSON run artifacts with
//! checksums, and the compare / plotdata post-processing commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::coords::BasisLabels;
use crate::ensemble::{
    run_ensemble, BasisKind, BasisSpec, EnsembleObservables, Method, RunConfig, RunSetup,
};
use crate::error::{Error, Result};
use crate::fssh::HopOutcome;
use crate::model::{
    build_hq, electronic_eigenbasis, participation_ratio, ModelParams, TruncationRule,
};

/// Environment prefix for config overrides: `ZHOP_<KEY>` (key uppercased)
/// overrides the file value of `<key>`; flags override both. `ZHOP_LOG`
/// is reserved for the logger.
pub const ENV_PREFIX: &str = "ZHOP_";

/// Every recognized config key, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "n_sites",
    "hopping",
    "frequency",
    "coupling",
    "temperature",
    "mass",
    "detuning",
    "impurity_site",
    "basis",
    "classical_basis",
    "truncate_frac",
    "ecut",
    "kcut",
    "method",
    "n_traj",
    "dt",
    "t_max",
    "cadence",
    "seed",
    "workers",
    "hop_log",
    "reverse_frustrated",
];

fn base_map(params: &ModelParams, preset: &str, basis: &str, method: &str) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("preset", preset.into());
    put("n_sites", params.n_sites.to_string());
    put("hopping", params.hopping.to_string());
    put("frequency", params.frequency.to_string());
    put("coupling", params.coupling.to_string());
    put("temperature", params.temperature.to_string());
    put("mass", params.mass.to_string());
    put("detuning", params.detuning.to_string());
    // Empty means "derive as n_sites / 2", so the anchor follows a
    // resized lattice unless pinned explicitly.
    put("impurity_site", String::new());
    put("basis", basis.into());
    put("classical_basis", "same".into());
    put("truncate_frac", String::new());
    put("ecut", String::new());
    put("kcut", String::new());
    put("method", method.into());
    put("n_traj", "2000".into());
    put("dt", "0.005".into());
    put("t_max", "30".into());
    put("cadence", "0.05".into());
    put("seed", "1".into());
    put("workers", "0".into());
    put("hop_log", "false".into());
    put("reverse_frustrated", "false".into());
    m
}

/// Default config map of a named preset.
pub fn preset_defaults(name: &str) -> Result<BTreeMap<String, String>> {
    match name {
        "pristine" => Ok(base_map(&ModelParams::pristine(), name, "fourier", "fssh")),
        "impurity" => Ok(base_map(&ModelParams::impurity(), name, "eigen", "fssh")),
        "eigeninspect" => Ok(base_map(
            &ModelParams::eigeninspect(),
            name,
            "eigen",
            "fssh",
        )),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (expected pristine, impurity, or eigeninspect)"
        ))),
    }
}

fn check_key(key: &str) -> Result<()> {
    if CONFIG_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unknown config key '{key}' (known keys: {})",
            CONFIG_KEYS.join(", ")
        )))
    }
}

/// Applies a `key = value` config file on top of `map`. Blank lines and
/// `#` comments are ignored; unknown keys are schema errors.
pub fn apply_config_file(map: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
    let body = std::fs::read_to_string(path)?;
    for (ln, raw) in body.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected 'key = value', got '{}'",
                path.display(),
                ln + 1,
                raw.trim()
            ))
        })?;
        let key = key.trim();
        check_key(key)?;
        if key == "preset" {
            return Err(Error::Config(format!(
                "{}:{}: 'preset' cannot be set from a config file; pass it on the command line",
                path.display(),
                ln + 1
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(())
}

/// Applies `ZHOP_<KEY>` environment overrides via the given lookup.
pub fn apply_env_overrides<F>(map: &mut BTreeMap<String, String>, lookup: F)
where
    F: Fn(&str) -> Option<String>,
{
    for key in CONFIG_KEYS {
        if *key == "preset" {
            continue;
        }
        let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
        if let Some(v) = lookup(&var) {
            map.insert((*key).to_string(), v);
        }
    }
}

fn get_parsed<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing config key '{key}'")))?;
    raw.parse::<T>().map_err(|_| {
        Error::Config(format!(
            "config key '{key}' has invalid value '{raw}' (expected {})",
            std::any::type_name::<T>()
        ))
    })
}

fn get_opt_f64(map: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>> {
    match map.get(key).map(String::as_str) {
        None | Some("") => Ok(None),
        Some(raw) => raw.parse::<f64>().map(Some).map_err(|_| {
            Error::Config(format!("config key '{key}' has invalid value '{raw}'"))
        }),
    }
}

fn parse_basis_kind(raw: &str) -> Result<BasisKind> {
    match raw {
        "site" => Ok(BasisKind::Site),
        "fourier" => Ok(BasisKind::Fourier),
        "eigen" => Ok(BasisKind::Eigen),
        other => Err(Error::Config(format!(
            "unknown basis '{other}' (expected site, fourier, or eigen)"
        ))),
    }
}

fn resolve_impurity_site(map: &BTreeMap<String, String>, n_sites: usize) -> Result<usize> {
    match map.get("impurity_site").map(String::as_str) {
        None | Some("") => Ok(n_sites / 2),
        Some(raw) => raw.parse().map_err(|_| {
            Error::Config(format!(
                "config key 'impurity_site' has invalid value '{raw}'"
            ))
        }),
    }
}

/// Builds the typed run description from a fully resolved config map.
pub fn to_run_config(map: &BTreeMap<String, String>) -> Result<RunConfig> {
    let n_sites: usize = get_parsed(map, "n_sites")?;
    let params = ModelParams {
        n_sites,
        hopping: get_parsed(map, "hopping")?,
        detuning: get_parsed(map, "detuning")?,
        impurity_site: resolve_impurity_site(map, n_sites)?,
        frequency: get_parsed(map, "frequency")?,
        coupling: get_parsed(map, "coupling")?,
        temperature: get_parsed(map, "temperature")?,
        mass: get_parsed(map, "mass")?,
    };
    let method = match map.get("method").map(String::as_str) {
        Some("fssh") => Method::Fssh,
        Some("ehrenfest") => Method::Ehrenfest,
        other => {
            return Err(Error::Config(format!(
                "unknown method '{}' (expected fssh or ehrenfest)",
                other.unwrap_or("")
            )))
        }
    };

    let truncation = {
        let frac = get_opt_f64(map, "truncate_frac")?;
        let ecut = get_opt_f64(map, "ecut")?;
        let kcut = get_opt_f64(map, "kcut")?;
        let mut rules = Vec::new();
        if let Some(f) = frac {
            rules.push(TruncationRule::KeepFraction(f));
        }
        if let Some(e) = ecut {
            rules.push(TruncationRule::EnergyCutoff(e));
        }
        if let Some(k) = kcut {
            rules.push(TruncationRule::WavevectorCutoff(k));
        }
        if rules.len() > 1 {
            return Err(Error::Config(
                "at most one of truncate_frac, ecut, kcut may be set".into(),
            ));
        }
        rules.pop()
    };

    let q_kind = parse_basis_kind(
        map.get("basis")
            .ok_or_else(|| Error::Config("missing config key 'basis'".into()))?,
    )?;
    let c_kind = match map.get("classical_basis").map(String::as_str) {
        None | Some("") | Some("same") => q_kind,
        Some(raw) => parse_basis_kind(raw)?,
    };
    let spec = |kind| BasisSpec {
        kind,
        truncation,
    };

    let mut cfg = RunConfig::new(params, method);
    cfg.quantum_basis = spec(q_kind);
    cfg.classical_basis = spec(c_kind);
    cfg.dt = get_parsed(map, "dt")?;
    cfg.t_max = get_parsed(map, "t_max")?;
    cfg.cadence = get_parsed(map, "cadence")?;
    cfg.n_traj = get_parsed(map, "n_traj")?;
    cfg.seed = get_parsed(map, "seed")?;
    cfg.workers = get_parsed(map, "workers")?;
    cfg.collect_hops = get_parsed::<bool>(map, "hop_log")?;
    cfg.reverse_frustrated = get_parsed::<bool>(map, "reverse_frustrated")?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "zhop",
    version,
    about = "Mixed quantum-classical lattice dynamics in arbitrary unitary bases"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run an ensemble (or the eigeninspect snapshot) and write artifacts.
    Run(Box<RunArgs>),
    /// Compare one observable column between two run directories.
    Compare(CompareArgs),
    /// Emit a long-format (t, series, value) table for plotting.
    Plotdata(PlotdataArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Preset name (pristine | impurity | eigeninspect) or a config file path.
    pub target: Option<String>,
    /// Preset name, if not given positionally.
    #[arg(long)]
    pub preset: Option<String>,
    /// Quantum working basis: site | fourier | eigen.
    #[arg(long)]
    pub basis: Option<String>,
    /// Classical working basis (defaults to --basis).
    #[arg(long)]
    pub classical_basis: Option<String>,
    /// Keep this fraction of basis rows (lowest energy / smallest |k|).
    #[arg(long, conflicts_with_all = ["ecut", "kcut"])]
    pub truncate_frac: Option<f64>,
    /// Keep eigenstate rows with energy at most this cutoff.
    #[arg(long, conflicts_with = "kcut")]
    pub ecut: Option<f64>,
    /// Keep wavevector rows with |k| at most this cutoff.
    #[arg(long)]
    pub kcut: Option<f64>,
    /// Dynamics method: fssh | ehrenfest.
    #[arg(long)]
    pub method: Option<String>,
    /// Lattice size N.
    #[arg(long)]
    pub n_sites: Option<usize>,
    /// Number of trajectories.
    #[arg(long)]
    pub n_traj: Option<usize>,
    /// Integrator step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Time horizon.
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Observable recording interval.
    #[arg(long)]
    pub cadence: Option<f64>,
    /// Master seed; trajectory i uses stream i of this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores). Never changes the results.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "zhop-out")]
    pub out: PathBuf,
    /// Record every hop event to hops.csv.
    #[arg(long)]
    pub hop_log: bool,
    /// Reverse momenta along the coupling direction on frustrated hops.
    #[arg(long)]
    pub reverse_frustrated: bool,
    /// Print the resolved config and exit without running.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// First run directory.
    pub run_a: PathBuf,
    /// Second run directory.
    pub run_b: PathBuf,
    /// Observable column, e.g. P_j0, P_n15, P_i1, leakage, total.
    pub observable: String,
    /// Max-abs deviation threshold; omitting it reports without judging.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PlotdataArgs {
    /// Run directory.
    pub run_dir: PathBuf,
    /// Column name, family prefix (P_n | P_j | P_i), `populations`,
    /// `leakage`, or `energies`.
    pub observable: String,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolves the full config map for a run request: preset (or file on top
/// of its own base preset) → config file → environment → flags.
pub fn resolve_run_config(args: &RunArgs) -> Result<BTreeMap<String, String>> {
    let target = match (&args.target, &args.preset) {
        (Some(t), None) => t.clone(),
        (None, Some(p)) => p.clone(),
        (Some(t), Some(p)) if t == p => t.clone(),
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either a positional target or --preset, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config(
                "missing run target: pass a preset name (pristine, impurity, eigeninspect) \
                 or a config file path"
                    .into(),
            ))
        }
    };

    let mut map = if preset_defaults(&target).is_ok() {
        preset_defaults(&target)?
    } else if Path::new(&target).is_file() {
        // Config files start from the pristine defaults.
        let mut m = preset_defaults("pristine")?;
        m.insert("preset".into(), format!("file:{target}"));
        apply_config_file(&mut m, Path::new(&target))?;
        m
    } else {
        return Err(Error::Config(format!(
            "'{target}' is neither a preset name nor a readable config file"
        )));
    };

    apply_env_overrides(&mut map, |var| std::env::var(var).ok());

    let mut set = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    };
    set("basis", args.basis.clone());
    set("classical_basis", args.classical_basis.clone());
    set("truncate_frac", args.truncate_frac.map(|v| v.to_string()));
    set("ecut", args.ecut.map(|v| v.to_string()));
    set("kcut", args.kcut.map(|v| v.to_string()));
    set("method", args.method.clone());
    set("n_sites", args.n_sites.map(|v| v.to_string()));
    set("n_traj", args.n_traj.map(|v| v.to_string()));
    set("dt", args.dt.map(|v| v.to_string()));
    set("t_max", args.t_max.map(|v| v.to_string()));
    set("cadence", args.cadence.map(|v| v.to_string()));
    set("seed", args.seed.map(|v| v.to_string()));
    set("workers", args.workers.map(|v| v.to_string()));
    if args.hop_log {
        set("hop_log", Some("true".into()));
    }
    if args.reverse_frustrated {
        set("reverse_frustrated", Some("true".into()));
    }
    // Flags imply exclusivity; config-file leftovers must not linger when a
    // flag picks a different truncation family.
    if args.truncate_frac.is_some() {
        map.insert("ecut".into(), String::new());
        map.insert("kcut".into(), String::new());
    }
    if args.ecut.is_some() {
        map.insert("truncate_frac".into(), String::new());
        map.insert("kcut".into(), String::new());
    }
    if args.kcut.is_some() {
        map.insert("truncate_frac".into(), String::new());
        map.insert("ecut".into(), String::new());
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_artifact(dir: &Path, name: &str, body: &str) -> Result<(String, String)> {
    std::fs::write(dir.join(name), body)?;
    Ok((name.to_string(), sha256_hex(body.as_bytes())))
}

/// Column labels of the retained quantum rows, in row order.
fn population_labels(labels: &BasisLabels) -> Vec<String> {
    match labels {
        BasisLabels::Site(idx) => idx.iter().map(|n| format!("P_n{n}")).collect(),
        BasisLabels::Wavevector { j, .. } => j.iter().map(|j| format!("P_j{j}")).collect(),
        // Eigenstate rank labels are 1-based: i1 is the ground state.
        BasisLabels::Eigenstate { index, .. } => {
            index.iter().map(|i| format!("P_i{i}")).collect()
        }
    }
}

fn populations_csv(setup: &RunSetup, ens: &EnsembleObservables) -> String {
    let q = setup.quantum_basis();
    let labels = population_labels(q.labels());
    let native = match setup.config().quantum_basis.kind {
        BasisKind::Site => &ens.p_site,
        BasisKind::Fourier => &ens.p_fourier,
        BasisKind::Eigen => &ens.p_eigen,
    };
    let kept = q.kept();
    let mut body = String::from("t");
    for l in &labels {
        let _ = write!(body, ",{l}");
    }
    body.push_str(",leakage\n");
    for (r, &t) in ens.times.iter().enumerate() {
        let _ = write!(body, "{t}");
        for &col in kept {
            let _ = write!(body, ",{}", native[(r, col)]);
        }
        let _ = writeln!(body, ",{}", ens.leakage[r]);
    }
    body
}

fn energies_csv(ens: &EnsembleObservables) -> String {
    let mut body = String::from("t,classical,quantum,total\n");
    for (r, &t) in ens.times.iter().enumerate() {
        let _ = writeln!(
            body,
            "{t},{},{},{}",
            ens.classical_energy[r], ens.quantum_energy[r], ens.total_energy[r]
        );
    }
    body
}

fn hops_csv(ens: &EnsembleObservables) -> String {
    let mut body = String::from("trajectory,time,from,to,gamma,outcome,residual\n");
    for (idx, h) in &ens.hop_events {
        let outcome = match h.outcome {
            HopOutcome::Accepted => "accepted",
            HopOutcome::Frustrated => "frustrated",
        };
        let _ = writeln!(
            body,
            "{idx},{},{},{},{},{outcome},{}",
            h.time, h.from, h.to, h.gamma, h.residual
        );
    }
    body
}

#[derive(serde::Serialize)]
struct Units {
    energy: &'static str,
    time: &'static str,
}

const UNITS: Units = Units {
    energy: "1 energy unit = 25 meV",
    time: "1 time unit = 164 fs",
};

#[derive(serde::Serialize)]
struct Manifest<'a> {
    config: &'a BTreeMap<String, String>,
    seed: u64,
    version: &'static str,
    units: Units,
    outputs: BTreeMap<String, String>,
    summary: serde_json::Value,
}

fn write_manifest(
    dir: &Path,
    config: &BTreeMap<String, String>,
    seed: u64,
    outputs: BTreeMap<String, String>,
    summary: serde_json::Value,
) -> Result<()> {
    let manifest = Manifest {
        config,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        units: UNITS,
        outputs,
        summary,
    };
    let mut body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    body.push('\n');
    std::fs::write(dir.join("manifest.json"), body)?;
    Ok(())
}

/// Runs the resolved dynamics config and writes populations.csv,
/// energies.csv, hops.csv (when hop logging is on), and manifest.json.
pub fn run_dynamics(map: &BTreeMap<String, String>, out: &Path) -> Result<EnsembleObservables> {
    let cfg = to_run_config(map)?;
    let seed = cfg.seed;
    let setup = RunSetup::new(cfg)?;
    let ens = run_ensemble(&setup)?;

    std::fs::create_dir_all(out)?;
    let mut outputs = BTreeMap::new();
    let (name, sum) = write_artifact(out, "populations.csv", &populations_csv(&setup, &ens))?;
    outputs.insert(name, sum);
    let (name, sum) = write_artifact(out, "energies.csv", &energies_csv(&ens))?;
    outputs.insert(name, sum);
    if setup.config().collect_hops {
        let (name, sum) = write_artifact(out, "hops.csv", &hops_csv(&ens))?;
        outputs.insert(name, sum);
    }
    let summary = serde_json::json!({
        "n_traj": ens.n_traj,
        "n_failed": ens.n_failed,
        "n_records": ens.times.len(),
        "retained_quantum_rows": setup.quantum_basis().n_rows(),
        "retained_classical_rows": setup.classical_basis().n_rows(),
        "initial_capture": setup.capture(),
        "total_hops": ens.total_hops,
        "frustrated_hops": ens.frustrated_hops,
        "renormalizations": ens.renormalizations,
        "mean_initial_classical_energy": ens.mean_initial_classical_energy,
    });
    write_manifest(out, map, seed, outputs, summary)?;

    if ens.n_failed > 0 {
        let (first_idx, first_msg) = &ens.failures[0];
        return Err(Error::Numeric(format!(
            "{} of {} trajectories failed (first: trajectory {first_idx}: {first_msg})",
            ens.n_failed, ens.n_traj
        )));
    }
    Ok(ens)
}

/// Writes the purely-electronic snapshot: the eight lowest eigenvectors of
/// the pristine and impurity lattices, the full spectra, and a manifest.
pub fn run_eigeninspect(map: &BTreeMap<String, String>, out: &Path) -> Result<()> {
    let n_sites: usize = get_parsed(map, "n_sites")?;
    let hopping: f64 = get_parsed(map, "hopping")?;
    let detuning: f64 = get_parsed(map, "detuning")?;
    let impurity_site = resolve_impurity_site(map, n_sites)?;
    let base = ModelParams {
        n_sites,
        hopping,
        impurity_site,
        ..ModelParams::eigeninspect()
    };

    std::fs::create_dir_all(out)?;
    let mut outputs = BTreeMap::new();
    let mut spectra = String::from("variant,i,energy\n");
    let mut summary = serde_json::Map::new();
    summary.insert("n_sites".into(), n_sites.into());

    for (variant, delta) in [("pristine", 0.0), ("impurity", detuning)] {
        let params = ModelParams {
            detuning: delta,
            ..base.clone()
        };
        let eig = electronic_eigenbasis(&build_hq(&params)?)?;
        let n_low = 8.min(eig.len());
        let mut body = String::from("n");
        for rank in 0..n_low {
            let _ = write!(body, ",i{}", rank + 1);
        }
        body.push('\n');
        for site in 0..n_sites {
            let _ = write!(body, "{site}");
            for rank in 0..n_low {
                let _ = write!(body, ",{}", eig.rows()[(rank, site)]);
            }
            body.push('\n');
        }
        let (name, sum) = write_artifact(out, &format!("eigenvectors_{variant}.csv"), &body)?;
        outputs.insert(name, sum);

        for (rank, &e) in eig.energies().iter().enumerate() {
            let _ = writeln!(spectra, "{variant},{},{e}", rank + 1);
        }
        summary.insert(
            format!("lowest_{variant}_energy"),
            eig.energies()[0].into(),
        );
        if variant == "impurity" {
            summary.insert(
                "impurity_ground_participation_ratio".into(),
                participation_ratio(&eig.rows().row(0)).into(),
            );
        }
    }

    let (name, sum) = write_artifact(out, "eigenvalues.csv", &spectra)?;
    outputs.insert(name, sum);
    let seed: u64 = get_parsed(map, "seed")?;
    write_manifest(out, map, seed, outputs, serde_json::Value::Object(summary))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// compare / plotdata
// ---------------------------------------------------------------------------

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let body = std::fs::read_to_string(path)?;
    let mut lines = body.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Domain(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(str::parse::<f64>).collect();
        let row = row.map_err(|e| {
            Error::Domain(format!("{}:{}: bad number: {e}", path.display(), ln + 2))
        })?;
        if row.len() != header.len() {
            return Err(Error::Domain(format!(
                "{}:{}: {} fields, header has {}",
                path.display(),
                ln + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Loads the file holding `observable` for a run: populations.csv for
/// population/leakage columns, energies.csv for energy columns.
fn load_observable(dir: &Path, observable: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let candidates = ["populations.csv", "energies.csv"];
    let mut seen = Vec::new();
    for file in candidates {
        let path = dir.join(file);
        if !path.is_file() {
            continue;
        }
        let (header, rows) = read_csv(&path)?;
        if let Some(col) = header.iter().position(|h| h == observable) {
            let t = rows.iter().map(|r| r[0]).collect();
            let v = rows.iter().map(|r| r[col]).collect();
            return Ok((t, v));
        }
        seen.extend(header.into_iter().skip(1));
    }
    Err(Error::Domain(format!(
        "observable '{observable}' not found in {} (available: {})",
        dir.display(),
        seen.join(", ")
    )))
}

/// Deviation report between two runs on a shared time grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareReport {
    pub observable: String,
    pub n_rows: usize,
    pub max_abs: f64,
    pub rms: f64,
    pub tolerance: Option<f64>,
    pub passed: bool,
}

pub fn compare_runs(
    dir_a: &Path,
    dir_b: &Path,
    observable: &str,
    tolerance: Option<f64>,
) -> Result<CompareReport> {
    let (ta, va) = load_observable(dir_a, observable)?;
    let (tb, vb) = load_observable(dir_b, observable)?;
    if ta.len() != tb.len() {
        return Err(Error::Domain(format!(
            "time grids differ: {} vs {} rows",
            ta.len(),
            tb.len()
        )));
    }
    let grid_gap = ta
        .iter()
        .zip(tb.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if grid_gap > 1e-9 {
        return Err(Error::Domain(format!(
            "time grids differ by up to {grid_gap:.3e}"
        )));
    }
    let mut max_abs = 0.0f64;
    let mut sq = 0.0;
    for (a, b) in va.iter().zip(vb.iter()) {
        let d = (a - b).abs();
        max_abs = max_abs.max(d);
        sq += d * d;
    }
    let rms = (sq / va.len().max(1) as f64).sqrt();
    let passed = tolerance.is_none_or(|tol| max_abs <= tol);
    Ok(CompareReport {
        observable: observable.to_string(),
        n_rows: va.len(),
        max_abs,
        rms,
        tolerance,
        passed,
    })
}

/// Long-format (t, series, value) table for one observable selection.
pub fn plot_data(dir: &Path, observable: &str) -> Result<String> {
    let select = |header: &[String]| -> Vec<usize> {
        match observable {
            "populations" => (1..header.len())
                .filter(|&i| header[i].starts_with("P_"))
                .collect(),
            "energies" => (1..header.len()).collect(),
            prefix @ ("P_n" | "P_j" | "P_i") => (1..header.len())
                .filter(|&i| {
                    header[i].strip_prefix(prefix).is_some_and(|rest| {
                        !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit() || c == '-')
                    })
                })
                .collect(),
            name => (1..header.len()).filter(|&i| header[i] == name).collect(),
        }
    };
    let file = if observable == "energies"
        || ["classical", "quantum", "total"].contains(&observable)
    {
        "energies.csv"
    } else {
        "populations.csv"
    };
    let path = dir.join(file);
    if !path.is_file() {
        return Err(Error::Domain(format!("{} not found", path.display())));
    }
    let (header, rows) = read_csv(&path)?;
    let cols = select(&header);
    if cols.is_empty() {
        return Err(Error::Domain(format!(
            "unknown observable '{observable}' (available: {})",
            header[1..].join(", ")
        )));
    }
    let mut body = String::from("t,series,value\n");
    for row in &rows {
        for &c in &cols {
            let _ = writeln!(body, "{},{},{}", row[0], header[c], row[c]);
        }
    }
    Ok(body)
}

// ---------------------------------------------------------------------------
// Logger and entry point
// ---------------------------------------------------------------------------

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level().as_str().to_lowercase(), record.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

/// Installs the stderr logger. Level comes from `ZHOP_LOG`
/// (error|warn|info|debug|trace); default warn.
pub fn init_logger() {
    let level = match std::env::var("ZHOP_LOG").as_deref() {
        Ok("error") => log::LevelFilter::Error,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("trace") => log::LevelFilter::Trace,
        Ok("off") => log::LevelFilter::Off,
        _ => log::LevelFilter::Warn,
    };
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(level);
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dimension(_) | Error::Domain(_) => 1,
        Error::Numeric(_) | Error::Io(_) => 2,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => {
            let map = resolve_run_config(&args)?;
            if args.show_config {
                for key in CONFIG_KEYS {
                    println!("{key} = {}", map.get(*key).map(String::as_str).unwrap_or(""));
                }
                return Ok(0);
            }
            if map.get("preset").map(String::as_str) == Some("eigeninspect") {
                run_eigeninspect(&map, &args.out)?;
                println!(
                    "wrote eigenvectors_pristine.csv, eigenvectors_impurity.csv, \
                     eigenvalues.csv, manifest.json to {}",
                    args.out.display()
                );
                return Ok(0);
            }
            let ens = run_dynamics(&map, &args.out)?;
            println!(
                "completed {} trajectories ({} records each) into {}",
                ens.n_traj,
                ens.times.len(),
                args.out.display()
            );
            println!(
                "hops: {} total, {} frustrated; final leakage {:.3e}",
                ens.total_hops,
                ens.frustrated_hops,
                ens.leakage.last().copied().unwrap_or(0.0)
            );
            Ok(0)
        }
        Command::Compare(args) => {
            let report = compare_runs(&args.run_a, &args.run_b, &args.observable, args.tolerance)?;
            println!(
                "observable {}: max-abs {:.6e}, rms {:.6e} over {} rows",
                report.observable, report.max_abs, report.rms, report.n_rows
            );
            match (report.tolerance, report.passed) {
                (Some(tol), true) => {
                    println!("PASS (tolerance {tol:.6e})");
                    Ok(0)
                }
                (Some(tol), false) => {
                    println!("FAIL (tolerance {tol:.6e})");
                    Ok(3)
                }
                (None, _) => Ok(0),
            }
        }
        Command::Plotdata(args) => {
            let table = plot_data(&args.run_dir, &args.observable)?;
            match &args.out {
                Some(path) => std::fs::write(path, table)?,
                None => print!("{table}"),
            }
            Ok(0)
        }
    }
}

/// Full CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    init_logger();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version exit successfully; real parse errors are
            // config errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn run_args(target: &str) -> RunArgs {
        RunArgs {
            target: Some(target.to_string()),
            ..RunArgs::default()
        }
    }

    #[test]
    fn preset_resolution_and_flag_precedence() {
        let mut args = run_args("pristine");
        args.n_traj = Some(7);
        args.seed = Some(42);
        args.basis = Some("site".into());
        let map = resolve_run_config(&args).unwrap();
        assert_eq!(map["preset"], "pristine");
        assert_eq!(map["n_traj"], "7");
        assert_eq!(map["seed"], "42");
        assert_eq!(map["basis"], "site");
        assert_eq!(map["detuning"], "0");

        let cfg = to_run_config(&map).unwrap();
        assert_eq!(cfg.n_traj, 7);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.quantum_basis.kind, BasisKind::Site);
        assert_eq!(cfg.classical_basis.kind, BasisKind::Site);
        assert_eq!(cfg.method, Method::Fssh);
    }

    #[test]
    fn config_file_overrides_preset_and_rejects_unknown_keys() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nn_sites = 8\nmethod = ehrenfest\n").unwrap();
        let map = resolve_run_config(&run_args(path.to_str().unwrap())).unwrap();
        assert_eq!(map["n_sites"], "8");
        assert_eq!(map["method"], "ehrenfest");

        std::fs::write(&path, "n_sites = 8\nbogus = 1\n").unwrap();
        let err = resolve_run_config(&run_args(path.to_str().unwrap())).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn env_overrides_sit_between_file_and_flags() {
        let mut map = preset_defaults("pristine").unwrap();
        apply_env_overrides(&mut map, |var| {
            (var == "ZHOP_N_TRAJ").then(|| "5".to_string())
        });
        assert_eq!(map["n_traj"], "5");
    }

    #[test]
    fn truncation_keys_are_mutually_exclusive() {
        let mut map = preset_defaults("pristine").unwrap();
        map.insert("truncate_frac".into(), "0.5".into());
        map.insert("kcut".into(), "1.0".into());
        let err = to_run_config(&map).unwrap_err();
        assert!(err.to_string().contains("at most one"), "{err}");
    }

    #[test]
    fn classical_basis_defaults_to_quantum_choice() {
        let mut map = preset_defaults("impurity").unwrap();
        assert_eq!(map["basis"], "eigen");
        let cfg = to_run_config(&map).unwrap();
        assert_eq!(cfg.classical_basis.kind, BasisKind::Eigen);
        map.insert("classical_basis".into(), "site".into());
        let cfg = to_run_config(&map).unwrap();
        assert_eq!(cfg.quantum_basis.kind, BasisKind::Eigen);
        assert_eq!(cfg.classical_basis.kind, BasisKind::Site);
    }

    fn tiny_map() -> BTreeMap<String, String> {
        let mut map = preset_defaults("impurity").unwrap();
        map.insert("n_sites".into(), "6".into());
        map.insert("impurity_site".into(), "3".into());
        map.insert("n_traj".into(), "2".into());
        map.insert("t_max".into(), "0.5".into());
        map.insert("cadence".into(), "0.1".into());
        map.insert("hop_log".into(), "true".into());
        map
    }

    #[test]
    fn run_artifacts_are_complete_and_checksummed() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        let ens = run_dynamics(&tiny_map(), &out).unwrap();
        assert_eq!(ens.n_failed, 0);

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        let outputs = manifest["outputs"].as_object().unwrap();
        for name in ["populations.csv", "energies.csv", "hops.csv"] {
            let body = std::fs::read(out.join(name)).unwrap();
            assert_eq!(
                outputs[name].as_str().unwrap(),
                sha256_hex(&body),
                "checksum mismatch for {name}"
            );
        }
        // Config echo: the stored config resolves to the identical map.
        let stored: BTreeMap<String, String> =
            serde_json::from_value(manifest["config"].clone()).unwrap();
        assert_eq!(stored, tiny_map());

        let (header, rows) = read_csv(&out.join("populations.csv")).unwrap();
        assert_eq!(header.first().map(String::as_str), Some("t"));
        assert_eq!(header.last().map(String::as_str), Some("leakage"));
        assert_eq!(header.len(), 8); // t + 6 eigen rows + leakage
        assert!(header[1..7].iter().all(|h| h.starts_with("P_i")));
        assert_eq!(rows.len(), 6); // t = 0.0..0.5 at cadence 0.1
    }

    #[test]
    fn rerun_with_manifest_config_is_bit_identical() {
        let dir = tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run_dynamics(&tiny_map(), &out_a).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap())
                .unwrap();
        let stored: BTreeMap<String, String> =
            serde_json::from_value(manifest["config"].clone()).unwrap();
        run_dynamics(&stored, &out_b).unwrap();
        for name in ["populations.csv", "energies.csv", "hops.csv", "manifest.json"] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn compare_judges_deviation_against_tolerance() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        run_dynamics(&tiny_map(), &out).unwrap();
        let report = compare_runs(&out, &out, "P_i1", Some(1e-12)).unwrap();
        assert_eq!(report.max_abs, 0.0);
        assert!(report.passed);

        // A doctored copy must fail a tight tolerance.
        let out2 = dir.path().join("copy");
        std::fs::create_dir_all(&out2).unwrap();
        let body = std::fs::read_to_string(out.join("populations.csv")).unwrap();
        let mut lines: Vec<String> = body.lines().map(str::to_string).collect();
        let mut last: Vec<String> = lines.last().unwrap().split(',').map(str::to_string).collect();
        let bumped: f64 = last[1].parse::<f64>().unwrap() + 0.25;
        last[1] = bumped.to_string();
        let n = lines.len();
        lines[n - 1] = last.join(",");
        std::fs::write(out2.join("populations.csv"), lines.join("\n")).unwrap();
        let report = compare_runs(&out, &out2, "P_i1", Some(0.1)).unwrap();
        assert!(report.max_abs > 0.2);
        assert!(!report.passed);

        let err = compare_runs(&out, &out, "P_q9", None).unwrap_err();
        assert!(err.to_string().contains("not found"), "{err}");
    }

    #[test]
    fn plotdata_selects_families_and_rejects_unknowns() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("run");
        run_dynamics(&tiny_map(), &out).unwrap();
        let table = plot_data(&out, "P_i").unwrap();
        // 6 rows x 6 eigen series + header
        assert_eq!(table.lines().count(), 1 + 6 * 6);
        assert!(table.starts_with("t,series,value\n"));
        let single = plot_data(&out, "P_i1").unwrap();
        assert_eq!(single.lines().count(), 1 + 6);
        let energies = plot_data(&out, "energies").unwrap();
        assert_eq!(energies.lines().count(), 1 + 6 * 3);
        assert!(plot_data(&out, "P_x").is_err());
    }

    #[test]
    fn eigeninspect_writes_spectra_and_low_eigenvectors() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("eig");
        let mut map = preset_defaults("eigeninspect").unwrap();
        map.insert("n_sites".into(), "20".into());
        map.insert("impurity_site".into(), "10".into());
        run_eigeninspect(&map, &out).unwrap();

        let (header, rows) = read_csv(&out.join("eigenvectors_impurity.csv")).unwrap();
        assert_eq!(header.len(), 9); // n + 8 ranks
        assert_eq!(rows.len(), 20);
        // Ground state localized on the impurity site.
        let ground_at_impurity = rows[10][1].abs();
        assert!(
            rows.iter().all(|r| r[1].abs() <= ground_at_impurity + 1e-12),
            "ground state should peak on the impurity site"
        );

        let body = std::fs::read_to_string(out.join("eigenvalues.csv")).unwrap();
        assert_eq!(body.lines().count(), 1 + 2 * 20);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        let lowest = manifest["summary"]["lowest_impurity_energy"].as_f64().unwrap();
        assert!((lowest - -(4.0 + 4.0f64).sqrt()).abs() < 1e-2);
    }
}
