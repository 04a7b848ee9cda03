//! Surface hopping and mean-field forces: finite-difference time-derivative
//! couplings, switching probabilities, the stochastic surface draw, and the
//! energy-conserving rescale of complex classical coordinates after a hop,
//! plus the per-site force expectations both methods feed back to the
//! classical subsystem.

use ndarray::prelude::*;
use rand::Rng;

use crate::classical::momenta;
use crate::coords::{ComplexCoords, CoordinateMap, UnitaryBasis};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::quantum::{real_project, AdiabaticSet};
use crate::C64;

/// Below this energy gap two surfaces are treated as degenerate: hops are
/// free (γ = 0) and Hellmann–Feynman couplings are suppressed.
pub const DEGENERATE_GAP: f64 = 1e-10;

/// What happened when a hop was attempted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HopOutcome {
    Accepted,
    Frustrated,
}

/// Record of one attempted surface switch.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HopEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    /// Rescaling magnitude actually applied (0 for plain frustrated hops,
    /// the reversal magnitude when frustrated reversal is enabled).
    pub gamma: f64,
    pub outcome: HopOutcome,
    /// Total-energy change implied by the applied shift (kinetic change
    /// plus the surface gap for accepted hops).
    pub residual: f64,
}

/// Nonadiabatic coupling between two surfaces, as the physical-basis
/// direction c_n and its image D over the working classical-basis rows.
#[derive(Debug, Clone)]
pub struct CouplingVector {
    /// c_n = ⟨α̃|∂H/∂q_n|β̃⟩ / (ε_β − ε_α), real in the site basis.
    pub c: Array1<f64>,
    /// D_ξ = Σ_n U_{ξn} c_n / √(2 m_n h_n): the shift direction for z.
    pub d: Array1<C64>,
}

impl CouplingVector {
    pub fn zero(n_sites: usize, n_rows: usize) -> Self {
        CouplingVector {
            c: Array1::zeros(n_sites),
            d: Array1::zeros(n_rows),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.d.iter().all(|v| v.norm_sqr() == 0.0)
    }
}

/// Finite-difference time-derivative coupling between consecutive aligned
/// eigenbases: T_{αβ} = (⟨α(t)|β(t+dt)⟩ − ⟨α(t+dt)|β(t)⟩) / (2 dt),
/// anti-Hermitian with a zeroed diagonal.
pub fn time_derivative_coupling(
    prev: &Array2<C64>,
    cur: &Array2<C64>,
    dt: f64,
) -> Result<Array2<C64>> {
    if prev.dim() != cur.dim() || prev.nrows() != prev.ncols() {
        return Err(Error::Dimension(format!(
            "eigenvector matrices {:?} and {:?} must be square and equal",
            prev.dim(),
            cur.dim()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {dt}")));
    }
    let m = prev.nrows();
    // overlap[α, β] = ⟨α(t)|β(t+dt)⟩
    let mut overlap = Array2::<C64>::zeros((m, m));
    for a in 0..m {
        for b in 0..m {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..m {
                acc += prev[(i, a)].conj() * cur[(i, b)];
            }
            overlap[(a, b)] = acc;
        }
    }
    let mut t = Array2::<C64>::zeros((m, m));
    for a in 0..m {
        for b in 0..m {
            if a != b {
                t[(a, b)] = (overlap[(a, b)] - overlap[(b, a)].conj()) / (2.0 * dt);
            }
        }
    }
    Ok(t)
}

/// Switching probabilities out of the active surface for one step:
/// P_β = max(0, 2 Re(T_{aβ} A_β / A_a) dt) for β ≠ a, entry a holding the
/// stay probability. If the raw hop probabilities exceed one they are
/// proportionally renormalized (logged); a vanishing active coefficient
/// yields all zeros (logged).
pub fn hop_probabilities(
    t_mat: &Array2<C64>,
    coeffs: &Array1<C64>,
    active: usize,
    dt: f64,
) -> Result<Array1<f64>> {
    let m = coeffs.len();
    if t_mat.dim() != (m, m) {
        return Err(Error::Dimension(format!(
            "coupling matrix {:?} does not match {m} coefficients",
            t_mat.dim()
        )));
    }
    if active >= m {
        return Err(Error::Domain(format!(
            "active surface {active} out of range {m}"
        )));
    }
    let mut probs = Array1::zeros(m);
    let a_act = coeffs[active];
    if a_act.norm_sqr() < 1e-30 {
        log::debug!("active coefficient vanished; emitting zero hop probabilities");
        return Ok(probs);
    }
    let mut total = 0.0;
    for b in 0..m {
        if b == active {
            continue;
        }
        let raw = 2.0 * (t_mat[(active, b)] * coeffs[b] / a_act).re * dt;
        let p = raw.max(0.0);
        probs[b] = p;
        total += p;
    }
    if total > 1.0 {
        log::debug!("hop probabilities summed to {total:.3e}; renormalizing");
        for b in 0..m {
            probs[b] /= total;
        }
        probs[active] = 0.0;
    } else {
        probs[active] = 1.0 - total;
    }
    Ok(probs)
}

/// Draws from a probability vector by walking its cumulative sum in index
/// order with a single uniform variate; returns the selected index, or
/// `None` when the draw falls beyond the total mass.
pub fn select_hop<R: Rng + ?Sized>(probs: &Array1<f64>, rng: &mut R) -> Option<usize> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(i);
        }
    }
    None
}

/// Samples the initial active surface from the weights |A_α|².
pub fn sample_initial_surface<R: Rng + ?Sized>(
    coeffs: &Array1<C64>,
    rng: &mut R,
) -> Result<usize> {
    let total: f64 = coeffs.iter().map(|a| a.norm_sqr()).sum();
    if total < 1e-30 {
        return Err(Error::Numeric(
            "cannot sample a surface from an all-zero coefficient vector".into(),
        ));
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, a) in coeffs.iter().enumerate() {
        acc += a.norm_sqr();
        if u < acc {
            return Ok(i);
        }
    }
    Ok(coeffs.len() - 1)
}

/// Coupling direction for an interaction that is diagonal in the physical
/// basis with per-site derivative weight dh_n = ⟨α̃|∂H/∂q_n|β̃⟩ = w α̃_n β̃_n:
/// builds c and its working-basis image D from real site-basis vectors.
pub fn coupling_from_site_vectors(
    alpha_site: &Array1<f64>,
    beta_site: &Array1<f64>,
    gap: f64,
    weight: f64,
    classical_basis: &UnitaryBasis,
    map: &CoordinateMap,
) -> Result<CouplingVector> {
    let n = alpha_site.len();
    if beta_site.len() != n || classical_basis.full_dim() != n || map.h.len() != n {
        return Err(Error::Dimension(
            "site vectors, classical basis, and coordinate map disagree".into(),
        ));
    }
    if gap.abs() < DEGENERATE_GAP {
        log::debug!("surface gap {gap:.3e} below degeneracy threshold; zero coupling");
        return Ok(CouplingVector::zero(n, classical_basis.n_rows()));
    }
    let mut c = Array1::zeros(n);
    let mut scaled = Array1::<C64>::zeros(n);
    for i in 0..n {
        c[i] = weight * alpha_site[i] * beta_site[i] / gap;
        scaled[i] = C64::new(c[i] / (2.0 * map.m[i] * map.h[i]).sqrt(), 0.0);
    }
    let d = classical_basis.coords_forward(&scaled);
    Ok(CouplingVector { c, d })
}

/// Hellmann–Feynman nonadiabatic coupling between two surfaces of a
/// decomposition in the quantum working basis, for the site-diagonal
/// linear interaction ∂H/∂q_n = g√(2ω³)|n⟩⟨n|. Eigenvectors are
/// reconstructed to the physical basis and real-projected first.
pub fn hellmann_feynman_coupling(
    set: &AdiabaticSet,
    from: usize,
    to: usize,
    params: &ModelParams,
    quantum_basis: &UnitaryBasis,
    classical_basis: &UnitaryBasis,
    map: &CoordinateMap,
) -> Result<CouplingVector> {
    let m = set.dim();
    if from >= m || to >= m {
        return Err(Error::Domain(format!(
            "surfaces {from}->{to} out of range {m}"
        )));
    }
    if quantum_basis.n_rows() != m {
        return Err(Error::Dimension(
            "quantum basis does not match the decomposition".into(),
        ));
    }
    let gap = set.energies[to] - set.energies[from];
    if gap.abs() < DEGENERATE_GAP {
        log::debug!(
            "surfaces {from} and {to} are degenerate (gap {gap:.3e}); zero coupling"
        );
        return Ok(CouplingVector::zero(
            quantum_basis.full_dim(),
            classical_basis.n_rows(),
        ));
    }
    let alpha_phys = quantum_basis.state_reconstruct(&set.vectors.column(from).to_owned());
    let beta_phys = quantum_basis.state_reconstruct(&set.vectors.column(to).to_owned());
    let (alpha_tilde, _) = real_project(&alpha_phys.view())?;
    let (beta_tilde, _) = real_project(&beta_phys.view())?;
    coupling_from_site_vectors(
        &alpha_tilde,
        &beta_tilde,
        gap,
        params.qc_prefactor(),
        classical_basis,
        map,
    )
}

/// Kinetic energy Σ p_n²/2m_n of the physical momenta carried by z.
fn kinetic(z: &ComplexCoords, map: &CoordinateMap) -> f64 {
    let p = momenta(z, map);
    p.iter()
        .zip(map.m.iter())
        .map(|(&pn, &mn)| pn * pn / (2.0 * mn))
        .sum()
}

/// Attempts the coordinate rescale for a hop between surfaces.
///
/// The shift z' = z − iγD moves only the physical momenta (for symmetric
/// retained sets), so total-energy conservation reduces to the quadratic
/// a γ² − b γ + Δε = 0 with a = Σ e_n²/2m_n, b = Σ p_n e_n/m_n over the
/// effective physical shift direction e_n = √(2 m_n h_n) Re[(U†D)_n].
/// Real roots: the smaller-magnitude root is applied and the hop accepted.
/// Negative discriminant (or no direction at all): frustrated — the
/// coordinates and surface stay put, unless `reverse_frustrated` reflects
/// the momenta along the coupling direction (which conserves energy
/// exactly).
#[allow(clippy::too_many_arguments)]
pub fn rescale(
    z: &ComplexCoords,
    from: usize,
    to: usize,
    eps_from: f64,
    eps_to: f64,
    coupling: &CouplingVector,
    map: &CoordinateMap,
    time: f64,
    reverse_frustrated: bool,
) -> Result<(ComplexCoords, HopEvent)> {
    if from == to {
        return Err(Error::Domain(format!("cannot hop from surface {from} to itself")));
    }
    if coupling.d.len() != z.z.len() {
        return Err(Error::Dimension(format!(
            "coupling direction ({}) does not match coordinates ({})",
            coupling.d.len(),
            z.z.len()
        )));
    }
    let gap = eps_to - eps_from;
    let event = |gamma: f64, outcome: HopOutcome, residual: f64| HopEvent {
        time,
        from,
        to,
        gamma,
        outcome,
        residual,
    };

    if gap.abs() < DEGENERATE_GAP {
        return Ok((z.clone(), event(0.0, HopOutcome::Accepted, gap)));
    }
    let d_norm = coupling.d.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if d_norm < 1e-14 {
        log::debug!("hop {from}->{to} frustrated: no coupling direction");
        return Ok((z.clone(), event(0.0, HopOutcome::Frustrated, 0.0)));
    }

    // Effective physical momentum-shift direction of −iD.
    let back = z.basis.coords_back(&coupling.d);
    let n = back.len();
    let mut e = Array1::zeros(n);
    let mut imag_leak = 0.0f64;
    for i in 0..n {
        e[i] = (2.0 * map.m[i] * map.h[i]).sqrt() * back[i].re;
        imag_leak = imag_leak.max(back[i].im.abs());
    }
    if imag_leak > 1e-10 * d_norm.max(1.0) {
        log::warn!(
            "rescale direction leaks into positions (imaginary part {imag_leak:.3e}); \
             the retained classical rows are not conjugation-symmetric"
        );
    }
    let p = momenta(z, map);
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..n {
        a += e[i] * e[i] / (2.0 * map.m[i]);
        b += p[i] * e[i] / map.m[i];
    }
    if a < 1e-28 {
        log::debug!("hop {from}->{to} frustrated: projected direction vanished");
        return Ok((z.clone(), event(0.0, HopOutcome::Frustrated, 0.0)));
    }
    let disc = b * b - 4.0 * a * gap;
    if disc < 0.0 {
        if reverse_frustrated {
            let gamma_r = b / a;
            let shifted = apply_shift(z, gamma_r, &coupling.d)?;
            let residual = kinetic(&shifted, map) - kinetic(z, map);
            log::debug!("hop {from}->{to} frustrated: momenta reversed along the coupling");
            return Ok((shifted, event(gamma_r, HopOutcome::Frustrated, residual)));
        }
        return Ok((z.clone(), event(0.0, HopOutcome::Frustrated, 0.0)));
    }
    let gamma = if b != 0.0 {
        2.0 * gap / (b + b.signum() * disc.sqrt())
    } else {
        (-gap / a).sqrt()
    };
    let shifted = apply_shift(z, gamma, &coupling.d)?;
    let residual = kinetic(&shifted, map) - kinetic(z, map) + gap;
    Ok((shifted, event(gamma, HopOutcome::Accepted, residual)))
}

fn apply_shift(z: &ComplexCoords, gamma: f64, d: &Array1<C64>) -> Result<ComplexCoords> {
    let minus_i_gamma = C64::new(0.0, -gamma);
    let mut out = z.z.clone();
    for i in 0..out.len() {
        out[i] += minus_i_gamma * d[i];
    }
    ComplexCoords::new(out, z.basis.clone())
}

/// Mean-field per-site occupation ⟨n̂⟩_n = |⟨n|ψ⟩|², reconstructed through
/// the quantum working basis. Sums to ‖ψ‖² (exactly 1 for a normalized
/// state, the retained-capture weight under truncation).
pub fn ehrenfest_force_expectation(
    psi: &Array1<C64>,
    quantum_basis: &UnitaryBasis,
) -> Result<Array1<f64>> {
    if psi.len() != quantum_basis.n_rows() {
        return Err(Error::Dimension(format!(
            "wavefunction ({}) does not match basis rows ({})",
            psi.len(),
            quantum_basis.n_rows()
        )));
    }
    let phys = quantum_basis.state_reconstruct(psi);
    Ok(phys.mapv(|v| v.norm_sqr()))
}

/// Active-surface per-site occupation |⟨n|a⟩|² for the surface-hopping
/// force.
pub fn fssh_force_expectation(
    active: usize,
    set: &AdiabaticSet,
    quantum_basis: &UnitaryBasis,
) -> Result<Array1<f64>> {
    if active >= set.dim() {
        return Err(Error::Domain(format!(
            "active surface {active} out of range {}",
            set.dim()
        )));
    }
    if set.dim() != quantum_basis.n_rows() {
        return Err(Error::Dimension(
            "decomposition does not match the quantum basis".into(),
        ));
    }
    let col = set.vectors.column(active).to_owned();
    let phys = quantum_basis.state_reconstruct(&col);
    Ok(phys.mapv(|v| v.norm_sqr()))
}
