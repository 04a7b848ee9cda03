//! Working in the reciprocal (wavevector) basis: labels, round trips,
//! realized-real frames, and what a smallest-|k| truncation keeps.
//!
//! Run with `cargo run --example reciprocal_basis`.

use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use std::sync::Arc;

use zhop::coords::{
    build_fourier, inverse_transform, realize_symmetric_wavevectors, to_complex, transform,
    BasisLabels, CanonicalState, CoordinateMap,
};
use zhop::error::Result;
use zhop::model::{truncation_mask, TruncationRule};

fn main() -> Result<()> {
    let n = 8;
    let basis = Arc::new(build_fourier(n)?);

    println!("wavevector basis for a ring of {n} sites:");
    println!("{:>6} {:>10}", "j", "k");
    if let BasisLabels::Wavevector { j, k } = basis.labels() {
        for (jj, kk) in j.iter().zip(k.iter()) {
            println!("{jj:>6} {kk:>10.5}");
        }
    }

    // A kick on one site spreads evenly over the reciprocal grid and
    // returns exactly on the way back.
    let map = CoordinateMap::uniform(n, 0.2, 1.0)?;
    let mut q = Array1::zeros(n);
    q[3] = 1.0;
    let state = CanonicalState::new(q, Array1::zeros(n), Array1::ones(n))?;
    let z_site = to_complex(&state, &map)?;
    let z_wave = transform(&z_site, &basis)?;
    let back = inverse_transform(&z_wave, &basis)?;
    let round_trip = z_site
        .z
        .iter()
        .zip(back.z.iter())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    println!("\nsite kick at n=3: |z_k| uniform over the grid:");
    let mags: Vec<String> = z_wave.z.iter().map(|z| format!("{:.4}", z.norm())).collect();
    println!("  [{}]", mags.join(", "));
    println!("  round-trip error {round_trip:.2e}");

    // When the retained grid closes under conjugation (every +k with its
    // -k partner), the rows recombine into cos/sin standing waves — a
    // purely real frame with the same span that keeps the eigensolver
    // real. Keeping 5 of 8 rows by smallest |k| retains {0, +/-1, +/-2};
    // an even cut of 4 would orphan one member of a +/- pair and force
    // the complex frame instead.
    for rule in [TruncationRule::KeepFraction(0.625), TruncationRule::KeepFraction(0.5)] {
        let keep = truncation_mask(&basis, rule)?;
        let truncated = basis.apply_mask(&keep)?;
        println!("\nkeep rows {keep:?} by smallest |k|:");
        match realize_symmetric_wavevectors(&truncated) {
            Some(real_rows) => {
                println!(
                    "  retained grid closes under conjugation: realized {}x{} real frame",
                    real_rows.nrows(),
                    real_rows.ncols()
                );
                // One cos row as a picture of the standing wave it carries.
                let row = real_rows.row(1);
                let cells: Vec<String> = row.iter().map(|v| format!("{v:+.3}")).collect();
                println!("  row 1: [{}]", cells.join(", "));
            }
            None => println!("  retained grid splits a +/-k pair; complex frame required"),
        }
    }

    // Projection of the site kick onto the five retained rows.
    let keep = truncation_mask(&basis, TruncationRule::KeepFraction(0.625))?;
    let truncated = Arc::new(basis.apply_mask(&keep)?);
    let z_trunc = transform(&z_site, &truncated)?;
    let kept_norm: f64 = z_trunc.z.iter().map(C64::norm_sqr).sum();
    let full_norm: f64 = z_site.z.iter().map(C64::norm_sqr).sum();
    println!(
        "\nthe kick keeps {:.1}% of its weight in the retained rows",
        100.0 * kept_norm / full_norm
    );
    Ok(())
}
