//! Truncation robustness on the pristine lattice: the k=0 population decay
//! is unchanged when half of the wavevector basis is discarded for both the
//! quantum state and the classical coordinates.
//!
//! Run with `cargo run --example pristine_truncation [n_traj]`
//! (default 50 trajectories; the figure-quality setting is 2000).

use zhop::ensemble::{run_ensemble, BasisKind, BasisSpec, Method, RunConfig, RunSetup};
use zhop::error::Result;
use zhop::model::{ModelParams, TruncationRule};

fn run(n_traj: usize, truncation: Option<TruncationRule>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cfg = RunConfig::new(ModelParams::pristine(), Method::Fssh);
    let spec = BasisSpec {
        kind: BasisKind::Fourier,
        truncation,
    };
    cfg.quantum_basis = spec;
    cfg.classical_basis = spec;
    cfg.n_traj = n_traj;
    let setup = RunSetup::new(cfg)?;
    let k0 = setup.k0_index();
    let ens = run_ensemble(&setup)?;
    let p_k0 = (0..ens.times.len()).map(|r| ens.p_fourier[(r, k0)]).collect();
    Ok((ens.times, p_k0))
}

fn main() -> Result<()> {
    let n_traj: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("n_traj must be a positive integer"))
        .unwrap_or(50);

    println!("pristine lattice, k=0 initial state, {n_traj} trajectories each:");
    let (times, full) = run(n_traj, None)?;
    let (_, half) = run(n_traj, Some(TruncationRule::KeepFraction(0.5)))?;

    println!("{:>8} {:>12} {:>12} {:>12}", "t", "P_k0 full", "P_k0 half", "|diff|");
    for (r, &t) in times.iter().enumerate() {
        if r % 100 == 0 || r == times.len() - 1 {
            println!(
                "{t:>8.2} {:>12.4} {:>12.4} {:>12.4}",
                full[r],
                half[r],
                (full[r] - half[r]).abs()
            );
        }
    }
    let max_dev = full
        .iter()
        .zip(half.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("\nmax deviation over the whole horizon: {max_dev:.4}");
    println!("(statistical noise at this ensemble size; the curves coincide)");
    Ok(())
}
