//! Quantum subsystem: the total electronic Hamiltonian at given classical
//! coordinates, its instantaneous eigendecomposition with deterministic
//! phase continuity, wavefunction propagation (ħ = 1), real projection of
//! eigenvectors, and surface-hopping density matrices / populations.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, UPLO};

use crate::classical::positions;
use crate::coords::{ComplexCoords, CoordinateMap, UnitaryBasis};
use crate::error::{Error, Result};
use crate::model::{build_hq, ModelParams};
use crate::C64;

/// Instantaneous eigendecomposition of the total quantum Hamiltonian in
/// the working quantum basis, together with the wavefunction expanded in
/// it.
#[derive(Debug, Clone)]
pub struct AdiabaticSet {
    /// Eigenvalues ε_α, ascending.
    pub energies: Array1<f64>,
    /// Eigenvectors as columns, phase-fixed (see [`adiabatic_decompose`]).
    pub vectors: Array2<C64>,
    /// Coefficients A_α = ⟨α|Ψ⟩.
    pub coeffs: Array1<C64>,
}

impl AdiabaticSet {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// Recomputes A = V†ψ for a new wavefunction in the same basis.
    pub fn project(&self, psi: &Array1<C64>) -> Array1<C64> {
        conj_t_dot(&self.vectors, psi)
    }
}

/// Wavefunction, its adiabatic decomposition, and the active surface.
#[derive(Debug, Clone)]
pub struct WaveState {
    pub psi: Array1<C64>,
    pub adiabatic: AdiabaticSet,
    pub active: usize,
}

impl WaveState {
    /// Checks the structural invariants: unit norm (1e-9), consistent
    /// coefficients (1e-12), active surface in range.
    pub fn validate(&self) -> Result<()> {
        let norm = self.psi.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "wavefunction norm drifted to {norm}"
            )));
        }
        if self.active >= self.adiabatic.dim() {
            return Err(Error::Domain(format!(
                "active surface {} out of range {}",
                self.active,
                self.adiabatic.dim()
            )));
        }
        let back = self.adiabatic.vectors.dot(&self.adiabatic.coeffs);
        let err = back
            .iter()
            .zip(self.psi.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        if err > 1e-12 {
            return Err(Error::Numeric(format!(
                "adiabatic coefficients inconsistent with wavefunction by {err:.3e}"
            )));
        }
        Ok(())
    }
}

/// v† w over columns: out_j = Σ_i conj(m[i,j]) w_i.
pub(crate) fn conj_t_dot(m: &Array2<C64>, w: &Array1<C64>) -> Array1<C64> {
    let (rows, cols) = m.dim();
    let mut out = Array1::zeros(cols);
    for j in 0..cols {
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..rows {
            acc += m[(i, j)].conj() * w[i];
        }
        out[j] = acc;
    }
    out
}

/// Total quantum Hamiltonian H_q + H_q−c(z), compressed into the working
/// quantum basis.
///
/// The coupling is diagonal in the physical basis, g√(2ω³) q_n on site n,
/// with positions reconstructed from the classical coordinates in whatever
/// basis they are expressed (a projection under truncation). The compressed
/// operator is W* (H_q + diag) Wᵀ, matching the component convention
/// ψ_ξ = Σ_n W*_{ξn} ψ_n.
pub fn total_hq(
    z: &ComplexCoords,
    params: &ModelParams,
    quantum_basis: &UnitaryBasis,
) -> Result<Array2<C64>> {
    if quantum_basis.full_dim() != params.n_sites || z.basis.full_dim() != params.n_sites {
        return Err(Error::Dimension(format!(
            "lattice has {} sites; quantum basis spans {}, classical basis {}",
            params.n_sites,
            quantum_basis.full_dim(),
            z.basis.full_dim()
        )));
    }
    let map = CoordinateMap::uniform(params.n_sites, params.frequency, params.mass)?;
    let q = positions(z, &map);
    let mut h_phys = build_hq(params)?;
    let pref = params.qc_prefactor();
    for n in 0..params.n_sites {
        h_phys[(n, n)] += pref * q[n];
    }
    Ok(compress_real_symmetric(&h_phys, quantum_basis))
}

/// W* H Wᵀ for a real symmetric physical-basis operator H.
pub fn compress_real_symmetric(h_phys: &Array2<f64>, basis: &UnitaryBasis) -> Array2<C64> {
    let m = basis.n_rows();
    let n = basis.full_dim();
    let u = basis.matrix();
    // tmp[a, col] = Σ_n conj(U[a, n]) H[n, col]
    let mut tmp = Array2::<C64>::zeros((m, n));
    for a in 0..m {
        for col in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..n {
                acc += u[(a, k)].conj() * h_phys[(k, col)];
            }
            tmp[(a, col)] = acc;
        }
    }
    let mut out = Array2::<C64>::zeros((m, m));
    for a in 0..m {
        for b in 0..m {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..n {
                acc += tmp[(a, k)] * u[(b, k)];
            }
            out[(a, b)] = acc;
        }
    }
    out
}

/// Relative gap below which neighboring eigenvalues form one degenerate
/// block for alignment purposes.
const DEGENERACY_TOL: f64 = 1e-9;

/// Fixes each column's free phase so its largest-magnitude entry (first on
/// ties) is real and positive.
fn canonical_column_phases(vectors: &mut Array2<C64>) {
    let (rows, cols) = vectors.dim();
    for j in 0..cols {
        let mut best = 0usize;
        for i in 0..rows {
            if vectors[(i, j)].norm_sqr() > vectors[(best, j)].norm_sqr() {
                best = i;
            }
        }
        let pivot = vectors[(best, j)];
        if pivot.norm() > 0.0 {
            let phase = pivot.conj() / pivot.norm();
            for i in 0..rows {
                vectors[(i, j)] *= phase;
            }
        }
    }
}

/// Splits ascending energies into maximal runs of near-degenerate values.
fn degenerate_blocks(energies: &Array1<f64>) -> Vec<(usize, usize)> {
    let n = energies.len();
    let scale = energies.iter().fold(1.0f64, |m, &e| m.max(e.abs()));
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let mut stop = start + 1;
        while stop < n && (energies[stop] - energies[stop - 1]).abs() < DEGENERACY_TOL * scale {
            stop += 1;
        }
        blocks.push((start, stop));
        start = stop;
    }
    blocks
}

/// Jacobi-style one-sided SVD of a small complex matrix, returning (U, V)
/// with A = U Σ V† and singular values implicitly ascendingly ordered by
/// construction sweeps; adequate for the tiny degenerate blocks seen here.
fn small_svd(a: &Array2<C64>) -> (Array2<C64>, Array2<C64>) {
    // A† A = V Σ² V† via Hermitian eigensolve, then U = A V Σ⁻¹.
    let d = a.ncols();
    let mut ata = Array2::<C64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..a.nrows() {
                acc += a[(k, i)].conj() * a[(k, j)];
            }
            ata[(i, j)] = acc;
        }
    }
    let (vals, v) = ata.eigh(UPLO::Lower).expect("tiny Hermitian eigensolve");
    let mut u = a.dot(&v);
    for j in 0..d {
        let s = vals[j].max(0.0).sqrt();
        if s > 1e-14 {
            for i in 0..u.nrows() {
                u[(i, j)] /= s;
            }
        }
    }
    (u, v)
}

/// Instantaneous eigendecomposition with deterministic phases.
///
/// Eigenvalues ascend. Without `prev`, each eigenvector's free phase is
/// fixed canonically (largest entry real-positive). With `prev` (the
/// aligned vectors of the preceding step), degenerate blocks are first
/// rotated to maximize overlap with their predecessors (orthogonal
/// Procrustes via the singular vectors of the overlap block), then every
/// column is phased so ⟨α_prev|α_now⟩ is real and positive.
pub fn adiabatic_decompose(
    h_tot: &Array2<C64>,
    psi: &Array1<C64>,
    prev: Option<&Array2<C64>>,
) -> Result<AdiabaticSet> {
    let m = h_tot.nrows();
    if h_tot.ncols() != m || psi.len() != m {
        return Err(Error::Dimension(format!(
            "Hamiltonian {}x{} and wavefunction {} disagree",
            m,
            h_tot.ncols(),
            psi.len()
        )));
    }
    let (energies, mut vectors) = h_tot
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numeric(format!("eigensolve failed: {e}")))?;
    // The solver hands back the eigenvectors of the transposed (conjugate)
    // matrix for row-major complex input; conjugate so the columns satisfy
    // H v = E v for the matrix actually passed in. A unit test pins this.
    vectors.mapv_inplace(|x| x.conj());
    match prev {
        None => canonical_column_phases(&mut vectors),
        Some(p) => {
            if p.dim() != vectors.dim() {
                return Err(Error::Dimension(
                    "previous eigenvector matrix has mismatched shape".into(),
                ));
            }
            for (start, stop) in degenerate_blocks(&energies) {
                if stop - start < 2 {
                    continue;
                }
                // Overlap O = N† P restricted to the block; rotate the new
                // block by U V† so it lands as close to the old as possible.
                let d = stop - start;
                let mut overlap = Array2::<C64>::zeros((d, d));
                for a in 0..d {
                    for b in 0..d {
                        let mut acc = C64::new(0.0, 0.0);
                        for i in 0..m {
                            acc += vectors[(i, start + a)].conj() * p[(i, start + b)];
                        }
                        overlap[(a, b)] = acc;
                    }
                }
                let (u, v) = small_svd(&overlap);
                let mut vt = Array2::<C64>::zeros((d, d));
                for a in 0..d {
                    for b in 0..d {
                        vt[(a, b)] = v[(b, a)].conj();
                    }
                }
                let rot = u.dot(&vt);
                let block = vectors.slice(s![.., start..stop]).to_owned();
                let rotated = block.dot(&rot);
                vectors.slice_mut(s![.., start..stop]).assign(&rotated);
            }
            for j in 0..m {
                let mut o = C64::new(0.0, 0.0);
                for i in 0..m {
                    o += p[(i, j)].conj() * vectors[(i, j)];
                }
                if o.norm() > 1e-12 {
                    let phase = o.conj() / o.norm();
                    for i in 0..m {
                        vectors[(i, j)] *= phase;
                    }
                } else {
                    // Consecutive vectors became orthogonal (hard crossing
                    // within one step); fall back to the canonical phase.
                    log::debug!("phase alignment lost continuity on surface {j}");
                    let mut col = vectors.slice_mut(s![.., j..j + 1]);
                    let mut single = col.to_owned();
                    canonical_column_phases(&mut single);
                    col.assign(&single);
                }
            }
        }
    }
    let coeffs = conj_t_dot(&vectors, psi);
    Ok(AdiabaticSet {
        energies,
        vectors,
        coeffs,
    })
}

/// Fixes each column's free sign so its largest-magnitude entry (first on
/// ties) is positive.
fn canonical_column_signs(vectors: &mut Array2<f64>) {
    let (rows, cols) = vectors.dim();
    for j in 0..cols {
        let mut best = 0usize;
        for i in 0..rows {
            if vectors[(i, j)].abs() > vectors[(best, j)].abs() {
                best = i;
            }
        }
        if vectors[(best, j)] < 0.0 {
            for i in 0..rows {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
}

/// Real orthogonal Procrustes of a small block: returns U Vᵀ for A = UΣVᵀ.
fn small_procrustes_real(a: &Array2<f64>) -> Array2<f64> {
    let d = a.ncols();
    let mut ata = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..a.nrows() {
                acc += a[(k, i)] * a[(k, j)];
            }
            ata[(i, j)] = acc;
        }
    }
    let (vals, v) = ata.eigh(UPLO::Lower).expect("tiny symmetric eigensolve");
    let mut u = a.dot(&v);
    for j in 0..d {
        let s = vals[j].max(0.0).sqrt();
        if s > 1e-14 {
            for i in 0..u.nrows() {
                u[(i, j)] /= s;
            }
        }
    }
    u.dot(&v.t())
}

/// Real-symmetric counterpart of [`adiabatic_decompose`]: ascending
/// eigenvalues, deterministic signs (largest entry positive without
/// `prev`; degenerate-block Procrustes plus sign continuity against
/// `prev`). The coefficient projection is left to the caller.
pub fn adiabatic_decompose_real(
    h: &Array2<f64>,
    prev: Option<&Array2<f64>>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let m = h.nrows();
    if h.ncols() != m {
        return Err(Error::Dimension(format!(
            "Hamiltonian is {}x{}, expected square",
            m,
            h.ncols()
        )));
    }
    let (energies, mut vectors) = h
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numeric(format!("eigensolve failed: {e}")))?;
    match prev {
        None => canonical_column_signs(&mut vectors),
        Some(p) => {
            if p.dim() != vectors.dim() {
                return Err(Error::Dimension(
                    "previous eigenvector matrix has mismatched shape".into(),
                ));
            }
            for (start, stop) in degenerate_blocks(&energies) {
                if stop - start < 2 {
                    continue;
                }
                let d = stop - start;
                let mut overlap = Array2::<f64>::zeros((d, d));
                for a in 0..d {
                    for b in 0..d {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += vectors[(i, start + a)] * p[(i, start + b)];
                        }
                        overlap[(a, b)] = acc;
                    }
                }
                let rot = small_procrustes_real(&overlap);
                let block = vectors.slice(s![.., start..stop]).to_owned();
                let rotated = block.dot(&rot);
                vectors.slice_mut(s![.., start..stop]).assign(&rotated);
            }
            for j in 0..m {
                let mut o = 0.0;
                for i in 0..m {
                    o += p[(i, j)] * vectors[(i, j)];
                }
                if o.abs() > 1e-12 {
                    if o < 0.0 {
                        for i in 0..m {
                            vectors[(i, j)] = -vectors[(i, j)];
                        }
                    }
                } else {
                    log::debug!("sign alignment lost continuity on surface {j}");
                    let mut col = vectors.slice_mut(s![.., j..j + 1]);
                    let mut single = col.to_owned();
                    canonical_column_signs(&mut single);
                    col.assign(&single);
                }
            }
        }
    }
    Ok((energies, vectors))
}

/// One RK4 step of iψ̇ = H(t)ψ with ħ = 1.
///
/// `h_at` supplies the Hamiltonian at the stage offsets 0, dt/2, and dt —
/// typically built from stage-consistent classical coordinates. Returns
/// the new wavefunction and whether a norm renormalization (relative
/// drift beyond 1e-12 within the step) was applied.
pub fn propagate_psi<F>(psi: &Array1<C64>, mut h_at: F, dt: f64) -> Result<(Array1<C64>, bool)>
where
    F: FnMut(f64) -> Result<Array2<C64>>,
{
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {dt}")));
    }
    let h0 = h_at(0.0)?;
    let hh = h_at(0.5 * dt)?;
    let h1 = h_at(dt)?;
    if h0.nrows() != psi.len() || h0.ncols() != psi.len() {
        return Err(Error::Dimension(format!(
            "Hamiltonian {}x{} does not act on wavefunction of length {}",
            h0.nrows(),
            h0.ncols(),
            psi.len()
        )));
    }
    let minus_i = C64::new(0.0, -1.0);
    let k1 = h0.dot(psi).mapv(|v| v * minus_i);
    let s2 = psi + &k1.mapv(|v| v * (0.5 * dt));
    let k2 = hh.dot(&s2).mapv(|v| v * minus_i);
    let s3 = psi + &k2.mapv(|v| v * (0.5 * dt));
    let k3 = hh.dot(&s3).mapv(|v| v * minus_i);
    let s4 = psi + &k3.mapv(|v| v * dt);
    let k4 = h1.dot(&s4).mapv(|v| v * minus_i);
    let mut out = psi.clone();
    for i in 0..out.len() {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let norm_in = psi.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let norm_out = out.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let mut renormalized = false;
    if norm_in > 0.0 && ((norm_out - norm_in) / norm_in).abs() > 1e-12 {
        let scale = norm_in / norm_out;
        out.mapv_inplace(|v| v * scale);
        renormalized = true;
        log::debug!(
            "renormalized wavefunction: relative drift {:.3e}",
            (norm_out - norm_in) / norm_in
        );
    }
    Ok((out, renormalized))
}

/// Real projection of a (unit) complex vector: the global phase θ* =
/// −arg(Σ_j v_j²)/2 maximizes ‖Re(e^{iθ}v)‖; the projected real part is
/// normalized and sign-fixed (largest entry positive, first on ties).
///
/// Returns the real vector and a flag marking the degenerate case
/// Σ v_j² ≈ 0, where every phase yields the same real-part norm and θ = 0
/// is used as the documented fallback.
pub fn real_project(v: &ArrayView1<C64>) -> Result<(Array1<f64>, bool)> {
    let s: C64 = v.iter().map(|x| x * x).sum();
    let degenerate = s.norm() < 1e-12;
    if degenerate {
        log::debug!("real projection hit a phase-degenerate vector; using θ = 0");
    }
    let theta = if degenerate { 0.0 } else { -0.5 * s.arg() };
    let rot = C64::from_polar(1.0, theta);
    let mut w: Array1<f64> = v.iter().map(|x| (rot * x).re).collect();
    let norm = w.dot(&w).sqrt();
    if norm < 1e-14 {
        return Err(Error::Numeric(
            "real projection annihilated the vector".into(),
        ));
    }
    w.mapv_inplace(|x| x / norm);
    let mut best = 0usize;
    for (i, x) in w.iter().enumerate() {
        if x.abs() > w[best].abs() {
            best = i;
        }
    }
    if w[best] < 0.0 {
        w.mapv_inplace(|x| -x);
    }
    Ok((w, degenerate))
}

/// Surface-hopping density matrix in the instantaneous eigenbasis: the
/// diagonal is the active-surface indicator, off-diagonals carry the
/// wavefunction coherences A_α A*_β (ket-side components, so that the
/// congruence S ρ S† reproduces the pure-state populations |S A|²).
pub fn density_matrix(active: usize, coeffs: &Array1<C64>) -> Result<Array2<C64>> {
    let m = coeffs.len();
    if active >= m {
        return Err(Error::Domain(format!(
            "active surface {active} out of range {m}"
        )));
    }
    let mut rho = Array2::zeros((m, m));
    for a in 0..m {
        for b in 0..m {
            if a == b {
                rho[(a, a)] = C64::new(if a == active { 1.0 } else { 0.0 }, 0.0);
            } else {
                rho[(a, b)] = coeffs[a] * coeffs[b].conj();
            }
        }
    }
    Ok(rho)
}

/// Coefficient chain from the working quantum basis into a target basis:
/// X = G* Wᵀ, so that target components are X · (working components).
/// Under truncation the chain carries only the retained subspace.
pub fn population_chain(working: &UnitaryBasis, target: &UnitaryBasis) -> Result<Array2<C64>> {
    if working.full_dim() != target.full_dim() {
        return Err(Error::Dimension(format!(
            "working basis spans {} sites, target {}",
            working.full_dim(),
            target.full_dim()
        )));
    }
    let n = working.full_dim();
    let (mt, mw) = (target.n_rows(), working.n_rows());
    let g = target.matrix();
    let w = working.matrix();
    let mut x = Array2::zeros((mt, mw));
    for t in 0..mt {
        for s in 0..mw {
            let mut acc = C64::new(0.0, 0.0);
            for col in 0..n {
                acc += g[(t, col)].conj() * w[(s, col)];
            }
            x[(t, s)] = acc;
        }
    }
    Ok(x)
}

/// Populations in a target basis: the diagonal of S ρ S†, where S maps
/// instantaneous-eigenbasis coefficients to target components (typically
/// S = population_chain(working, target) · eigenvectors).
///
/// Diagonal entries are checked real to 1e-12 and returned as reals; under
/// truncation they describe the retained subspace's projection and may sum
/// below one (the deficit is the leakage reported elsewhere, never folded
/// back in).
pub fn populations(rho: &Array2<C64>, s: &Array2<C64>) -> Result<Array1<f64>> {
    let (mt, mq) = s.dim();
    if rho.nrows() != mq || rho.ncols() != mq {
        return Err(Error::Dimension(format!(
            "density matrix {}x{} does not match chain width {}",
            rho.nrows(),
            rho.ncols(),
            mq
        )));
    }
    let mut out = Array1::zeros(mt);
    for t in 0..mt {
        let mut acc = C64::new(0.0, 0.0);
        for a in 0..mq {
            let mut row = C64::new(0.0, 0.0);
            for b in 0..mq {
                row += rho[(a, b)] * s[(t, b)].conj();
            }
            acc += s[(t, a)] * row;
        }
        if acc.im.abs() > 1e-12 {
            return Err(Error::Numeric(format!(
                "population {t} has imaginary residue {:.3e}",
                acc.im
            )));
        }
        out[t] = acc.re;
    }
    Ok(out)
}

/// Fast-path populations for the surface-hopping density matrix, avoiding
/// the dense M×M transform: with X the eigen→target coefficient map,
/// P_t = |X_{ta}|² + |(X A)_t|² − Σ_α |X_{tα}|² |A_α|².
pub fn populations_active(
    active: usize,
    coeffs: &Array1<C64>,
    x: &Array2<C64>,
) -> Result<Array1<f64>> {
    let (mt, mq) = x.dim();
    if coeffs.len() != mq {
        return Err(Error::Dimension(format!(
            "coefficients ({}) do not match chain width ({mq})",
            coeffs.len()
        )));
    }
    if active >= mq {
        return Err(Error::Domain(format!(
            "active surface {active} out of range {mq}"
        )));
    }
    let mut out = Array1::zeros(mt);
    for t in 0..mt {
        let mut y = C64::new(0.0, 0.0);
        let mut sub = 0.0;
        for a in 0..mq {
            y += x[(t, a)] * coeffs[a];
            sub += x[(t, a)].norm_sqr() * coeffs[a].norm_sqr();
        }
        out[t] = x[(t, active)].norm_sqr() + y.norm_sqr() - sub;
    }
    Ok(out)
}
