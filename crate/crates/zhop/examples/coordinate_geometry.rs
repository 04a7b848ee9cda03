//! Geometry of the complex-coordinate map for one harmonic mode.
//!
//! When the map scale matches the oscillator frequency the trajectory is a
//! circle in the complex plane; doubling the scale stretches it into a 2:1
//! ellipse. Run with `cargo run --example coordinate_geometry`.

use ndarray::array;
use zhop::classical::{rk4_step, HKernel, ZeroPotential};
use zhop::coords::{to_complex, CanonicalState, CoordinateMap, UnitaryBasis};
use zhop::error::Result;

fn trace(scale: f64, omega: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    let map = CoordinateMap::uniform(1, scale, 1.0)?;
    let basis = UnitaryBasis::identity(1);
    let kernel = HKernel::with_spring(&basis, &map, &array![omega])?;
    let state = CanonicalState::new(array![1.0], array![0.0], array![1.0])?;
    let mut z = to_complex(&state, &map)?;
    let dt = std::f64::consts::TAU / omega / steps as f64;
    let mut points = vec![(z.z[0].re, z.z[0].im)];
    for _ in 0..steps {
        z = rk4_step(&z, &kernel, &ZeroPotential, dt)?;
        points.push((z.z[0].re, z.z[0].im));
    }
    Ok(points)
}

fn main() -> Result<()> {
    let omega = 0.2;
    let steps = 400;

    println!("one harmonic mode, q(0)=1, p(0)=0, omega={omega}\n");
    for (label, scale) in [("scale = omega (circle)", omega), ("scale = 2*omega (ellipse)", 2.0 * omega)] {
        let points = trace(scale, omega, steps)?;
        println!("{label}:");
        println!("{:>10} {:>12} {:>12} {:>12}", "step", "Re z", "Im z", "|z|");
        for &k in &[0, steps / 8, steps / 4, 3 * steps / 8, steps / 2] {
            let (re, im) = points[k];
            println!("{k:>10} {re:>12.6} {im:>12.6} {:>12.6}", (re * re + im * im).sqrt());
        }
        let max_re = points.iter().map(|(re, _)| re.abs()).fold(0.0, f64::max);
        let max_im = points.iter().map(|(_, im)| im.abs()).fold(0.0, f64::max);
        println!("    semi-axes {:.6} x {:.6}, ratio {:.6}\n", max_re, max_im, max_re / max_im);
    }
    println!("the circle is the natural gauge: with scale = omega the motion");
    println!("is a pure phase rotation and |z| is a constant of the motion.");
    Ok(())
}
