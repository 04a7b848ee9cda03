//! The same impurity problem truncated in two different working bases:
//! cutting the electronic eigenbasis in half barely moves the impurity-site
//! population, while cutting the wavevector basis in half visibly drains it.
//!
//! Run with `cargo run --example impurity_bases [n_traj]`
//! (default 50 trajectories; the figure-quality setting is 2000).

use zhop::ensemble::{run_ensemble, BasisKind, BasisSpec, Method, RunConfig, RunSetup};
use zhop::error::Result;
use zhop::model::{ModelParams, TruncationRule};

struct Outcome {
    label: &'static str,
    late_site_population: f64,
    se: f64,
}

fn run(n_traj: usize, kind: BasisKind, truncate: bool, label: &'static str) -> Result<Outcome> {
    let mut cfg = RunConfig::new(ModelParams::impurity(), Method::Fssh);
    let spec = BasisSpec {
        kind,
        truncation: truncate.then_some(TruncationRule::KeepFraction(0.5)),
    };
    cfg.quantum_basis = spec;
    cfg.classical_basis = spec;
    cfg.n_traj = n_traj;
    let ens = run_ensemble(&RunSetup::new(cfg)?)?;
    let late: Vec<f64> = ens
        .per_trajectory
        .iter()
        .map(|s| s.second_half_site_population)
        .collect();
    let n = late.len() as f64;
    let mean = late.iter().sum::<f64>() / n;
    let var = late.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Outcome {
        label,
        late_site_population: mean,
        se: (var / n).sqrt(),
    })
}

fn main() -> Result<()> {
    let n_traj: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("n_traj must be a positive integer"))
        .unwrap_or(50);

    println!(
        "impurity lattice, {n_traj} trajectories each; impurity-site population \
         averaged over the second half of the run:\n"
    );
    let runs = [
        run(n_traj, BasisKind::Eigen, false, "eigenbasis, full")?,
        run(n_traj, BasisKind::Eigen, true, "eigenbasis, half")?,
        run(n_traj, BasisKind::Fourier, true, "wavevectors, half")?,
    ];
    for o in &runs {
        println!(
            "  {:<20} P_site(impurity) = {:.4} +/- {:.4}",
            o.label, o.late_site_population, o.se
        );
    }
    let eigen_gap = (runs[0].late_site_population - runs[1].late_site_population).abs();
    let fourier_gap = runs[0].late_site_population - runs[2].late_site_population;
    println!(
        "\n  eigenbasis truncation shifts the result by {eigen_gap:.4}; \
         the wavevector cut loses {fourier_gap:.4}"
    );
    println!("  the right basis makes half the coordinates disposable.");
    Ok(())
}
