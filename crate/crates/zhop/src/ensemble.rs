//! Trajectory engine: Boltzmann initial conditions, the coupled
//! quantum–classical RK4 co-step for surface hopping and mean-field
//! dynamics in arbitrary (possibly truncated) working bases, and the
//! deterministic ensemble reduction.

use std::sync::Arc;

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::classical::{
    classical_hamiltonian, kinetic_spring_rhs, positions, wirtinger_site_gradient, HKernel,
    ZeroPotential,
};
use crate::coords::{
    build_fourier, realize_symmetric_wavevectors, to_complex, transform, BasisLabels,
    CanonicalState, ComplexCoords, CoordinateMap, UnitaryBasis,
};
use crate::error::{Error, Result};
use crate::fssh::{
    coupling_from_site_vectors, hop_probabilities, rescale, sample_initial_surface, select_hop,
    HopEvent, HopOutcome,
};
use crate::model::{
    build_hq, electronic_eigenbasis, initial_wavefunction, truncation_mask, ModelParams,
    TruncationRule,
};
use crate::quantum::{adiabatic_decompose, adiabatic_decompose_real, real_project};
use crate::C64;

/// Dynamics method for the classical force and the surface machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fssh,
    Ehrenfest,
}

/// Which unitary family a subsystem works in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Site,
    Fourier,
    Eigen,
}

/// A working basis: the family plus an optional truncation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub truncation: Option<TruncationRule>,
}

impl BasisSpec {
    pub fn full(kind: BasisKind) -> Self {
        BasisSpec {
            kind,
            truncation: None,
        }
    }

    pub fn truncated(kind: BasisKind, rule: TruncationRule) -> Self {
        BasisSpec {
            kind,
            truncation: Some(rule),
        }
    }
}

/// Complete description of one ensemble run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub params: ModelParams,
    pub method: Method,
    pub quantum_basis: BasisSpec,
    pub classical_basis: BasisSpec,
    pub dt: f64,
    pub t_max: f64,
    /// Observable recording interval (rounded to a whole number of steps).
    pub cadence: f64,
    pub n_traj: usize,
    pub seed: u64,
    /// Worker threads for the trajectory loop; 0 uses the process default.
    /// The reduction is order-fixed, so results never depend on this.
    pub workers: usize,
    /// Reverse momenta along the coupling direction on frustrated hops.
    pub reverse_frustrated: bool,
    /// Keep every hop event (with its trajectory index) in the output.
    pub collect_hops: bool,
}

impl RunConfig {
    /// Defaults: dt 0.005, horizon 30, cadence 0.05, 2000 trajectories,
    /// full site bases, no frustrated reversal.
    pub fn new(params: ModelParams, method: Method) -> Self {
        RunConfig {
            params,
            method,
            quantum_basis: BasisSpec::full(BasisKind::Site),
            classical_basis: BasisSpec::full(BasisKind::Site),
            dt: 0.005,
            t_max: 30.0,
            cadence: 0.05,
            n_traj: 2000,
            seed: 1,
            workers: 0,
            reverse_frustrated: false,
            collect_hops: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_max >= self.dt) || !self.t_max.is_finite() {
            return Err(Error::Config(format!(
                "t_max ({}) must be at least one step ({})",
                self.t_max, self.dt
            )));
        }
        if self.n_traj < 1 {
            return Err(Error::Config("n_traj must be at least 1".into()));
        }
        if !(self.cadence >= self.dt) || !self.cadence.is_finite() {
            return Err(Error::Config(format!(
                "cadence ({}) must be at least dt ({})",
                self.cadence, self.dt
            )));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        ((self.t_max / self.dt).round() as usize).max(1)
    }

    fn record_every(&self) -> usize {
        ((self.cadence / self.dt).round() as usize).max(1)
    }
}

/// Quantum working frame. Wavevector bases whose retained rows close under
/// conjugation are realized as real cosine/sine rows, so the per-step
/// eigensolve runs in real arithmetic; populations are reported against
/// the nominal (complex) rows through the chains, which makes the two
/// frames observationally identical.
enum QuantumFrame {
    Real { rows: Array2<f64>, hqw: Array2<f64> },
    Cplx { rows: Array2<C64>, hqw: Array2<C64> },
}

/// Eigenvectors in whichever arithmetic the frame uses.
enum EigVecs {
    Real(Array2<f64>),
    Cplx(Array2<C64>),
}

impl QuantumFrame {
    fn n_rows(&self) -> usize {
        match self {
            QuantumFrame::Real { rows, .. } => rows.nrows(),
            QuantumFrame::Cplx { rows, .. } => rows.nrows(),
        }
    }

    fn is_real(&self) -> bool {
        matches!(self, QuantumFrame::Real { .. })
    }

    /// ψ_n = Σ_ξ W_{ξn} ψ_ξ.
    fn reconstruct(&self, psi: &Array1<C64>) -> Array1<C64> {
        match self {
            QuantumFrame::Real { rows, .. } => {
                let (m, n) = rows.dim();
                let mut out = Array1::zeros(n);
                for xi in 0..m {
                    let c = psi[xi];
                    for col in 0..n {
                        out[col] += c * rows[(xi, col)];
                    }
                }
                out
            }
            QuantumFrame::Cplx { rows, .. } => {
                let (m, n) = rows.dim();
                let mut out = Array1::zeros(n);
                for xi in 0..m {
                    let c = psi[xi];
                    for col in 0..n {
                        out[col] += c * rows[(xi, col)];
                    }
                }
                out
            }
        }
    }

    /// ψ_ξ = Σ_n W*_{ξn} v_n.
    fn components(&self, v: &Array1<C64>) -> Array1<C64> {
        match self {
            QuantumFrame::Real { rows, .. } => {
                let (m, n) = rows.dim();
                let mut out = Array1::zeros(m);
                for xi in 0..m {
                    let mut acc = C64::new(0.0, 0.0);
                    for col in 0..n {
                        acc += rows[(xi, col)] * v[col];
                    }
                    out[xi] = acc;
                }
                out
            }
            QuantumFrame::Cplx { rows, .. } => {
                let (m, n) = rows.dim();
                let mut out = Array1::zeros(m);
                for xi in 0..m {
                    let mut acc = C64::new(0.0, 0.0);
                    for col in 0..n {
                        acc += rows[(xi, col)].conj() * v[col];
                    }
                    out[xi] = acc;
                }
                out
            }
        }
    }

    /// H_W ψ for H = H_q + diag(v), using the precomputed reconstruction
    /// of ψ: (hqw ψ) + W*(v ⊙ ψ_phys).
    fn apply_h(&self, psi: &Array1<C64>, psi_phys: &Array1<C64>, v: &Array1<f64>) -> Array1<C64> {
        let weighted: Array1<C64> = psi_phys
            .iter()
            .zip(v.iter())
            .map(|(p, w)| p * *w)
            .collect();
        let mut out = self.components(&weighted);
        match self {
            QuantumFrame::Real { hqw, .. } => {
                let m = hqw.nrows();
                for i in 0..m {
                    let mut acc = C64::new(0.0, 0.0);
                    for j in 0..m {
                        acc += psi[j] * hqw[(i, j)];
                    }
                    out[i] += acc;
                }
            }
            QuantumFrame::Cplx { hqw, .. } => {
                let m = hqw.nrows();
                for i in 0..m {
                    let mut acc = C64::new(0.0, 0.0);
                    for j in 0..m {
                        acc += hqw[(i, j)] * psi[j];
                    }
                    out[i] += acc;
                }
            }
        }
        out
    }

    /// Dense working-basis Hamiltonian and its aligned eigendecomposition.
    fn decompose(
        &self,
        v: &Array1<f64>,
        prev: Option<&EigVecs>,
    ) -> Result<(Array1<f64>, EigVecs)> {
        match self {
            QuantumFrame::Real { rows, hqw } => {
                let (m, n) = rows.dim();
                let mut h = hqw.clone();
                for a in 0..m {
                    for b in 0..m {
                        let mut acc = 0.0;
                        for col in 0..n {
                            acc += rows[(a, col)] * v[col] * rows[(b, col)];
                        }
                        h[(a, b)] += acc;
                    }
                }
                let p = match prev {
                    Some(EigVecs::Real(p)) => Some(p),
                    None => None,
                    Some(EigVecs::Cplx(_)) => {
                        return Err(Error::Domain("mismatched eigenvector frame".into()))
                    }
                };
                let (e, vecs) = adiabatic_decompose_real(&h, p)?;
                Ok((e, EigVecs::Real(vecs)))
            }
            QuantumFrame::Cplx { rows, hqw } => {
                let (m, n) = rows.dim();
                let mut h = hqw.clone();
                for a in 0..m {
                    for b in 0..m {
                        let mut acc = C64::new(0.0, 0.0);
                        for col in 0..n {
                            acc += rows[(a, col)].conj() * v[col] * rows[(b, col)];
                        }
                        h[(a, b)] += acc;
                    }
                }
                let p = match prev {
                    Some(EigVecs::Cplx(p)) => Some(p),
                    None => None,
                    Some(EigVecs::Real(_)) => {
                        return Err(Error::Domain("mismatched eigenvector frame".into()))
                    }
                };
                // The engine tracks coefficients itself; feed a unit dummy.
                let mut dummy = Array1::<C64>::zeros(m);
                dummy[0] = C64::new(1.0, 0.0);
                let set = adiabatic_decompose(&h, &dummy, p)?;
                Ok((set.energies, EigVecs::Cplx(set.vectors)))
            }
        }
    }

    /// A = V†ψ.
    fn coeffs(&self, vecs: &EigVecs, psi: &Array1<C64>) -> Array1<C64> {
        match vecs {
            EigVecs::Real(v) => {
                let (m, cols) = v.dim();
                let mut out = Array1::zeros(cols);
                for j in 0..cols {
                    let mut acc = C64::new(0.0, 0.0);
                    for i in 0..m {
                        acc += psi[i] * v[(i, j)];
                    }
                    out[j] = acc;
                }
                out
            }
            EigVecs::Cplx(v) => crate::quantum::conj_t_dot(v, psi),
        }
    }

    /// Finite-difference time-derivative coupling, lifted to complex.
    fn t_matrix(&self, prev: &EigVecs, cur: &EigVecs, dt: f64) -> Result<Array2<C64>> {
        match (prev, cur) {
            (EigVecs::Real(p), EigVecs::Real(c)) => {
                let m = p.nrows();
                let mut t = Array2::zeros((m, m));
                for a in 0..m {
                    for b in 0..m {
                        if a == b {
                            continue;
                        }
                        let mut forward = 0.0;
                        let mut backward = 0.0;
                        for i in 0..m {
                            forward += p[(i, a)] * c[(i, b)];
                            backward += c[(i, a)] * p[(i, b)];
                        }
                        t[(a, b)] = C64::new((forward - backward) / (2.0 * dt), 0.0);
                    }
                }
                Ok(t)
            }
            (EigVecs::Cplx(p), EigVecs::Cplx(c)) => {
                crate::fssh::time_derivative_coupling(p, c, dt)
            }
            _ => Err(Error::Domain("mismatched eigenvector frames".into())),
        }
    }

    /// Physical-basis site vector of one eigenvector, real-projected and
    /// sign-fixed.
    fn site_eigvec(&self, vecs: &EigVecs, j: usize) -> Result<Array1<f64>> {
        match (self, vecs) {
            (QuantumFrame::Real { rows, .. }, EigVecs::Real(v)) => {
                let (m, n) = rows.dim();
                let mut out = Array1::<f64>::zeros(n);
                for xi in 0..m {
                    let c = v[(xi, j)];
                    for col in 0..n {
                        out[col] += c * rows[(xi, col)];
                    }
                }
                let mut best = 0usize;
                for (i, x) in out.iter().enumerate() {
                    if x.abs() > out[best].abs() {
                        best = i;
                    }
                }
                if out[best] < 0.0 {
                    out.mapv_inplace(|x| -x);
                }
                Ok(out)
            }
            (QuantumFrame::Cplx { .. }, EigVecs::Cplx(v)) => {
                let col = v.column(j).to_owned();
                let phys = self.reconstruct(&col);
                let (w, _) = real_project(&phys.view())?;
                Ok(w)
            }
            _ => Err(Error::Domain("mismatched eigenvector frames".into())),
        }
    }

    /// Per-site weights |⟨n|j⟩|² of one eigenvector.
    fn site_weights(&self, vecs: &EigVecs, j: usize) -> Result<Array1<f64>> {
        match (self, vecs) {
            (QuantumFrame::Real { .. }, EigVecs::Real(_)) => {
                let u = self.site_eigvec(vecs, j)?;
                Ok(u.mapv(|x| x * x))
            }
            (QuantumFrame::Cplx { .. }, EigVecs::Cplx(v)) => {
                let col = v.column(j).to_owned();
                let phys = self.reconstruct(&col);
                Ok(phys.mapv(|x| x.norm_sqr()))
            }
            _ => Err(Error::Domain("mismatched eigenvector frames".into())),
        }
    }

    /// Lifts eigenvectors to complex for the population chains.
    fn lift(&self, vecs: &EigVecs) -> Array2<C64> {
        match vecs {
            EigVecs::Real(v) => v.mapv(|x| C64::new(x, 0.0)),
            EigVecs::Cplx(v) => v.clone(),
        }
    }
}

/// Everything shared immutably across trajectories: bases, frames,
/// kernels, population chains, and the initial wavefunction.
pub struct RunSetup {
    cfg: RunConfig,
    map: CoordinateMap,
    q_basis: Arc<UnitaryBasis>,
    c_basis: Arc<UnitaryBasis>,
    frame: QuantumFrame,
    kernel: HKernel,
    /// Stacked population chains (site, then wavevector, then eigenstate
    /// targets — n_sites rows each) against the frame rows.
    x_stack: Array2<C64>,
    psi0: Array1<C64>,
    capture: f64,
    k0_index: usize,
    native_kind: BasisKind,
}

fn build_basis(
    spec: &BasisSpec,
    params: &ModelParams,
    hq: &Array2<f64>,
) -> Result<UnitaryBasis> {
    let base = match spec.kind {
        BasisKind::Site => UnitaryBasis::identity(params.n_sites),
        BasisKind::Fourier => build_fourier(params.n_sites)?,
        BasisKind::Eigen => electronic_eigenbasis(hq)?.to_unitary_basis()?,
    };
    match &spec.truncation {
        None => Ok(base),
        Some(rule) => {
            let mask = truncation_mask(&base, *rule)?;
            base.apply_mask(&mask)
        }
    }
}

impl RunSetup {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = &cfg.params;
        let n = params.n_sites;
        let map = CoordinateMap::uniform(n, params.frequency, params.mass)?;
        let hq = build_hq(params)?;
        let q_basis = Arc::new(build_basis(&cfg.quantum_basis, params, &hq)?);
        let c_basis = Arc::new(build_basis(&cfg.classical_basis, params, &hq)?);

        let frame = match realize_symmetric_wavevectors(&q_basis) {
            Some(rows) => {
                let hqw = rows.dot(&hq).dot(&rows.t());
                QuantumFrame::Real { rows, hqw }
            }
            None if q_basis.is_real() => {
                let rows = q_basis.real_rows();
                let hqw = rows.dot(&hq).dot(&rows.t());
                QuantumFrame::Real { rows, hqw }
            }
            None => {
                let rows = q_basis.matrix().clone();
                let hqw = crate::quantum::compress_real_symmetric(&hq, &q_basis);
                QuantumFrame::Cplx { rows, hqw }
            }
        };

        let omega = Array1::from_elem(n, params.frequency);
        let kernel = HKernel::with_spring(&c_basis, &map, &omega)?;

        // Population chains X[t, ξ] = Σ_n G*_{tn} W_{ξn} into the three
        // full reporting targets, stacked target-major.
        let fourier_target = build_fourier(n)?;
        let eigen_target = electronic_eigenbasis(&hq)?.to_unitary_basis()?;
        let mq = frame.n_rows();
        let mut x_stack = Array2::<C64>::zeros((3 * n, mq));
        {
            let mut fill = |offset: usize, g: Option<&Array2<C64>>| {
                for t in 0..n {
                    for s in 0..mq {
                        let mut acc = C64::new(0.0, 0.0);
                        for col in 0..n {
                            let gtn = match g {
                                None => {
                                    if t == col {
                                        C64::new(1.0, 0.0)
                                    } else {
                                        continue;
                                    }
                                }
                                Some(g) => g[(t, col)].conj(),
                            };
                            let w = match &frame {
                                QuantumFrame::Real { rows, .. } => {
                                    C64::new(rows[(s, col)], 0.0)
                                }
                                QuantumFrame::Cplx { rows, .. } => rows[(s, col)],
                            };
                            acc += gtn * w;
                        }
                        x_stack[(offset + t, s)] = acc;
                    }
                }
            };
            fill(0, None);
            fill(n, Some(fourier_target.matrix()));
            fill(2 * n, Some(eigen_target.matrix()));
        }

        let k0_index = match fourier_target.labels() {
            BasisLabels::Wavevector { j, .. } => j
                .iter()
                .position(|&jj| jj == 0)
                .ok_or_else(|| Error::Domain("wavevector grid lacks k = 0".into()))?,
            _ => unreachable!("build_fourier always yields wavevector labels"),
        };

        let uniform = initial_wavefunction(n)?;
        let psi0 = frame.components(&uniform);
        let capture: f64 = psi0.iter().map(|v| v.norm_sqr()).sum();

        let native_kind = cfg.quantum_basis.kind;
        Ok(RunSetup {
            cfg,
            map,
            q_basis,
            c_basis,
            frame,
            kernel,
            x_stack,
            psi0,
            capture,
            k0_index,
            native_kind,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn quantum_basis(&self) -> &Arc<UnitaryBasis> {
        &self.q_basis
    }

    pub fn classical_basis(&self) -> &Arc<UnitaryBasis> {
        &self.c_basis
    }

    /// Norm² of the initial wavefunction retained by the working basis.
    pub fn capture(&self) -> f64 {
        self.capture
    }

    /// Whether the per-step eigensolves run in real arithmetic.
    pub fn frame_is_real(&self) -> bool {
        self.frame.is_real()
    }

    /// Row index of k = 0 in the wavevector reporting target.
    pub fn k0_index(&self) -> usize {
        self.k0_index
    }
}

/// Draws one classical configuration from the harmonic Boltzmann
/// distribution: q_n ~ N(0, T/mω²), p_n ~ N(0, mT). At T = 0 the draw is
/// exactly the phase-space origin (the same number of variates is always
/// consumed, keeping trajectory streams aligned across temperatures).
pub fn sample_boltzmann<R: Rng + ?Sized>(
    params: &ModelParams,
    rng: &mut R,
) -> Result<CanonicalState> {
    params.validate()?;
    let n = params.n_sites;
    let sq = (params.temperature / (params.mass * params.frequency * params.frequency)).sqrt();
    let sp = (params.mass * params.temperature).sqrt();
    let mut q = Array1::zeros(n);
    let mut p = Array1::zeros(n);
    for i in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        q[i] = sq * x;
    }
    for i in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        p[i] = sp * x;
    }
    CanonicalState::new(q, p, Array1::from_elem(n, params.mass))
}

/// Time series of one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// Site populations, one row per record (n_sites columns).
    pub p_site: Array2<f64>,
    /// Wavevector populations over the full reciprocal grid.
    pub p_fourier: Array2<f64>,
    /// Populations over the full electronic eigenstate grid.
    pub p_eigen: Array2<f64>,
    /// Population outside the retained subspace (zero for trace-one
    /// surface-hopping densities; 1 − ‖ψ‖² for mean-field runs).
    pub leakage: Vec<f64>,
    pub classical_energy: Vec<f64>,
    /// Active-surface energy (surface hopping) or ⟨ψ|H|ψ⟩ (mean field).
    pub quantum_energy: Vec<f64>,
    pub total_energy: Vec<f64>,
    pub hops: Vec<HopEvent>,
    pub initial_classical_energy: f64,
    /// Initial retained norm² of the wavefunction.
    pub capture: f64,
    pub renormalizations: usize,
    /// Time averages over the second half of the run.
    pub second_half_site_population: f64,
    pub second_half_k0_population: f64,
}

struct RecordBuffers {
    times: Vec<f64>,
    p_site: Array2<f64>,
    p_fourier: Array2<f64>,
    p_eigen: Array2<f64>,
    leakage: Vec<f64>,
    e_c: Vec<f64>,
    e_q: Vec<f64>,
    e_t: Vec<f64>,
    row: usize,
}

impl RecordBuffers {
    fn new(n_records: usize, n_sites: usize) -> Self {
        RecordBuffers {
            times: Vec::with_capacity(n_records),
            p_site: Array2::zeros((n_records, n_sites)),
            p_fourier: Array2::zeros((n_records, n_sites)),
            p_eigen: Array2::zeros((n_records, n_sites)),
            leakage: Vec::with_capacity(n_records),
            e_c: Vec::with_capacity(n_records),
            e_q: Vec::with_capacity(n_records),
            e_t: Vec::with_capacity(n_records),
            row: 0,
        }
    }
}

/// One combined RK4 step of (z, ψ). The quantum stage Hamiltonian follows
/// the stage coordinates; the classical force follows the method policy:
/// the frozen active-surface weights for surface hopping, the
/// instantaneous |ψ_phys|² for the mean field (which keeps the mean-field
/// flow autonomous and its energy conserved to integrator order).
fn co_step(
    setup: &RunSetup,
    z: &Array1<C64>,
    psi: &Array1<C64>,
    frozen_w: Option<&Array1<f64>>,
    dt: f64,
) -> Result<(Array1<C64>, Array1<C64>, bool)> {
    let pref = setup.cfg.params.qc_prefactor();
    let minus_i = C64::new(0.0, -1.0);
    let deriv = |zv: &Array1<C64>, pv: &Array1<C64>| -> Result<(Array1<C64>, Array1<C64>)> {
        let zc = ComplexCoords {
            z: zv.clone(),
            basis: Arc::clone(&setup.c_basis),
        };
        let psi_phys = setup.frame.reconstruct(pv);
        let q = positions(&zc, &setup.map);
        let v = q.mapv(|x| pref * x);
        let hpsi = setup.frame.apply_h(pv, &psi_phys, &v);
        let dpsi = hpsi.mapv(|x| minus_i * x);
        let w_owned;
        let w = match frozen_w {
            Some(w) => w,
            None => {
                w_owned = psi_phys.mapv(|x| x.norm_sqr());
                &w_owned
            }
        };
        let dvdq = w.mapv(|x| pref * x);
        let mut dz = kinetic_spring_rhs(&zc, &setup.kernel)?;
        let grad = wirtinger_site_gradient(&dvdq, &setup.c_basis, &setup.map);
        for i in 0..dz.len() {
            dz[i] += minus_i * grad[i];
        }
        Ok((dz, dpsi))
    };

    let (kz1, kp1) = deriv(z, psi)?;
    let z2 = z + &kz1.mapv(|x| x * (0.5 * dt));
    let p2 = psi + &kp1.mapv(|x| x * (0.5 * dt));
    let (kz2, kp2) = deriv(&z2, &p2)?;
    let z3 = z + &kz2.mapv(|x| x * (0.5 * dt));
    let p3 = psi + &kp2.mapv(|x| x * (0.5 * dt));
    let (kz3, kp3) = deriv(&z3, &p3)?;
    let z4 = z + &kz3.mapv(|x| x * dt);
    let p4 = psi + &kp3.mapv(|x| x * dt);
    let (kz4, kp4) = deriv(&z4, &p4)?;

    let sixth = dt / 6.0;
    let mut z_out = z.clone();
    let mut p_out = psi.clone();
    for i in 0..z_out.len() {
        z_out[i] += sixth * (kz1[i] + 2.0 * kz2[i] + 2.0 * kz3[i] + kz4[i]);
    }
    for i in 0..p_out.len() {
        p_out[i] += sixth * (kp1[i] + 2.0 * kp2[i] + 2.0 * kp3[i] + kp4[i]);
    }

    let norm_in = psi.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let norm_out = p_out.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let mut renormalized = false;
    if norm_in > 0.0 && ((norm_out - norm_in) / norm_in).abs() > 1e-12 {
        let scale = norm_in / norm_out;
        p_out.mapv_inplace(|x| x * scale);
        renormalized = true;
    }
    Ok((z_out, p_out, renormalized))
}

fn record_row(
    setup: &RunSetup,
    t: f64,
    z: &ComplexCoords,
    psi: &Array1<C64>,
    adiab: Option<(&Array1<f64>, &EigVecs, &Array1<C64>, usize)>,
    bufs: &mut RecordBuffers,
) -> Result<()> {
    let n = setup.cfg.params.n_sites;
    let pref = setup.cfg.params.qc_prefactor();
    let zero = ZeroPotential;
    let e_c = classical_hamiltonian(z, &setup.kernel, &zero)?;

    let (e_q, p_all, leakage) = match adiab {
        None => {
            // Mean field: populations are the squared target components.
            let psi_phys = setup.frame.reconstruct(psi);
            let q = positions(z, &setup.map);
            let v = q.mapv(|x| pref * x);
            let hpsi = setup.frame.apply_h(psi, &psi_phys, &v);
            let e_q: f64 = psi
                .iter()
                .zip(hpsi.iter())
                .map(|(a, b)| (a.conj() * b).re)
                .sum();
            let comp = setup.x_stack.dot(psi);
            let p_all: Array1<f64> = comp.mapv(|x| x.norm_sqr());
            let nrm2: f64 = psi.iter().map(|x| x.norm_sqr()).sum();
            (e_q, p_all, 1.0 - nrm2)
        }
        Some((eps, vecs, coeffs, active)) => {
            let e_q = eps[active];
            let v_lift = setup.frame.lift(vecs);
            let s = setup.x_stack.dot(&v_lift);
            let p_all = crate::quantum::populations_active(active, coeffs, &s)?;
            // The surface-hopping density has unit trace by construction;
            // report the measured deficit over the native full grid.
            let offset = match setup.native_kind {
                BasisKind::Site => 0,
                BasisKind::Fourier => n,
                BasisKind::Eigen => 2 * n,
            };
            let native_sum: f64 = (0..n).map(|i| p_all[offset + i]).sum();
            (e_q, p_all, 1.0 - native_sum)
        }
    };
    let e_t = e_c + e_q;
    if !e_t.is_finite() || !p_all.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric(format!(
            "trajectory lost numeric validity at t = {t}"
        )));
    }

    let r = bufs.row;
    bufs.times.push(t);
    for i in 0..n {
        bufs.p_site[(r, i)] = p_all[i];
        bufs.p_fourier[(r, i)] = p_all[n + i];
        bufs.p_eigen[(r, i)] = p_all[2 * n + i];
    }
    bufs.leakage.push(leakage);
    bufs.e_c.push(e_c);
    bufs.e_q.push(e_q);
    bufs.e_t.push(e_t);
    bufs.row += 1;
    Ok(())
}

/// Runs one trajectory of the configured ensemble. The trajectory RNG is
/// the master-seeded ChaCha stream whose stream id is the trajectory
/// index, so trajectories are independent and order-free.
pub fn run_trajectory(setup: &RunSetup, index: u64) -> Result<TrajectoryRecord> {
    let cfg = &setup.cfg;
    let params = &cfg.params;
    let n = params.n_sites;
    let pref = params.qc_prefactor();
    let dt = cfg.dt;
    let n_steps = cfg.n_steps();
    let record_every = cfg.record_every();
    let n_records = n_steps / record_every + 1;
    let fssh = cfg.method == Method::Fssh;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let state = sample_boltzmann(params, &mut rng)?;
    let initial_classical_energy: f64 = (0..n)
        .map(|i| {
            state.p[i] * state.p[i] / (2.0 * params.mass)
                + 0.5 * params.mass * params.frequency * params.frequency * state.q[i] * state.q[i]
        })
        .sum();
    let z_phys = to_complex(&state, &setup.map)?;
    let mut z = transform(&z_phys, &setup.c_basis)?;
    let mut psi = setup.psi0.clone();

    let mut adiab: Option<(Array1<f64>, EigVecs, Array1<C64>)> = None;
    let mut active = 0usize;
    if fssh {
        let q = positions(&z, &setup.map);
        let v = q.mapv(|x| pref * x);
        let (eps, vecs) = setup.frame.decompose(&v, None)?;
        let coeffs = setup.frame.coeffs(&vecs, &psi);
        active = sample_initial_surface(&coeffs, &mut rng)?;
        adiab = Some((eps, vecs, coeffs));
    }

    let mut bufs = RecordBuffers::new(n_records, n);
    let mut hops: Vec<HopEvent> = Vec::new();
    let mut renormalizations = 0usize;

    record_row(
        setup,
        0.0,
        &z,
        &psi,
        adiab
            .as_ref()
            .map(|(e, v, c)| (e, v, c, active)),
        &mut bufs,
    )?;

    for step in 1..=n_steps {
        let t = step as f64 * dt;
        let frozen_w = match &adiab {
            Some((_, vecs, _)) if fssh => Some(setup.frame.site_weights(vecs, active)?),
            _ => None,
        };
        let (z_new, psi_new, renorm) = co_step(setup, &z.z, &psi, frozen_w.as_ref(), dt)?;
        z = ComplexCoords {
            z: z_new,
            basis: Arc::clone(&setup.c_basis),
        };
        psi = psi_new;
        if renorm {
            renormalizations += 1;
        }

        if fssh {
            let (_, prev_vecs, _) = adiab.as_ref().expect("surface hopping keeps a decomposition");
            let q = positions(&z, &setup.map);
            let v = q.mapv(|x| pref * x);
            let (eps2, vecs2) = setup.frame.decompose(&v, Some(prev_vecs))?;
            let t_mat = setup.frame.t_matrix(prev_vecs, &vecs2, dt)?;
            let coeffs = setup.frame.coeffs(&vecs2, &psi);
            let probs = hop_probabilities(&t_mat, &coeffs, active, dt)?;
            let draw = select_hop(&probs, &mut rng);
            if let Some(b) = draw {
                if b != active {
                    let alpha = setup.frame.site_eigvec(&vecs2, active)?;
                    let beta = setup.frame.site_eigvec(&vecs2, b)?;
                    let cv = coupling_from_site_vectors(
                        &alpha,
                        &beta,
                        eps2[b] - eps2[active],
                        pref,
                        &setup.c_basis,
                        &setup.map,
                    )?;
                    let (z_shift, event) = rescale(
                        &z,
                        active,
                        b,
                        eps2[active],
                        eps2[b],
                        &cv,
                        &setup.map,
                        t,
                        cfg.reverse_frustrated,
                    )?;
                    // The shift moves momenta only, so the decomposition at
                    // the (position-dependent) Hamiltonian stays valid.
                    z = z_shift;
                    if event.outcome == HopOutcome::Accepted {
                        active = b;
                    }
                    hops.push(event);
                }
            }
            let coeffs = setup.frame.coeffs(&vecs2, &psi);
            adiab = Some((eps2, vecs2, coeffs));
        }

        if step % record_every == 0 {
            record_row(
                setup,
                t,
                &z,
                &psi,
                adiab.as_ref().map(|(e, v, c)| (e, v, c, active)),
                &mut bufs,
            )?;
        }
    }

    // Time averages over the second half of the horizon.
    let half = cfg.t_max * 0.5 - 1e-12;
    let mut n_half = 0usize;
    let mut site_acc = 0.0;
    let mut k0_acc = 0.0;
    let nbar = params.impurity_site;
    for (r, &t) in bufs.times.iter().enumerate() {
        if t >= half {
            site_acc += bufs.p_site[(r, nbar)];
            k0_acc += bufs.p_fourier[(r, setup.k0_index)];
            n_half += 1;
        }
    }
    let denom = n_half.max(1) as f64;

    Ok(TrajectoryRecord {
        times: bufs.times,
        p_site: bufs.p_site,
        p_fourier: bufs.p_fourier,
        p_eigen: bufs.p_eigen,
        leakage: bufs.leakage,
        classical_energy: bufs.e_c,
        quantum_energy: bufs.e_q,
        total_energy: bufs.e_t,
        hops,
        initial_classical_energy,
        capture: setup.capture,
        renormalizations,
        second_half_site_population: site_acc / denom,
        second_half_k0_population: k0_acc / denom,
    })
}

/// Scalar summary of one trajectory kept alongside the ensemble means.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PerTrajStats {
    pub index: u64,
    pub second_half_site_population: f64,
    pub second_half_k0_population: f64,
    pub n_hops: usize,
    pub initial_classical_energy: f64,
}

/// Ensemble means plus bookkeeping. All series are trajectory means on the
/// common record grid.
#[derive(Debug, Clone)]
pub struct EnsembleObservables {
    pub times: Vec<f64>,
    pub p_site: Array2<f64>,
    pub p_fourier: Array2<f64>,
    pub p_eigen: Array2<f64>,
    pub leakage: Vec<f64>,
    pub classical_energy: Vec<f64>,
    pub quantum_energy: Vec<f64>,
    pub total_energy: Vec<f64>,
    pub n_traj: usize,
    pub n_failed: usize,
    pub failures: Vec<(u64, String)>,
    pub mean_initial_classical_energy: f64,
    pub mean_capture: f64,
    pub total_hops: usize,
    pub frustrated_hops: usize,
    pub renormalizations: usize,
    pub per_trajectory: Vec<PerTrajStats>,
    /// Hop events tagged by trajectory (populated when `collect_hops`).
    pub hop_events: Vec<(u64, HopEvent)>,
}

struct Partial {
    n_ok: usize,
    times: Vec<f64>,
    p_site: Array2<f64>,
    p_fourier: Array2<f64>,
    p_eigen: Array2<f64>,
    leakage: Vec<f64>,
    e_c: Vec<f64>,
    e_q: Vec<f64>,
    e_t: Vec<f64>,
    init_ec: f64,
    capture: f64,
    total_hops: usize,
    frustrated: usize,
    renorms: usize,
    failures: Vec<(u64, String)>,
    per_traj: Vec<PerTrajStats>,
    events: Vec<(u64, HopEvent)>,
}

impl Partial {
    fn new(n_records: usize, n_sites: usize) -> Self {
        Partial {
            n_ok: 0,
            times: Vec::new(),
            p_site: Array2::zeros((n_records, n_sites)),
            p_fourier: Array2::zeros((n_records, n_sites)),
            p_eigen: Array2::zeros((n_records, n_sites)),
            leakage: vec![0.0; n_records],
            e_c: vec![0.0; n_records],
            e_q: vec![0.0; n_records],
            e_t: vec![0.0; n_records],
            init_ec: 0.0,
            capture: 0.0,
            total_hops: 0,
            frustrated: 0,
            renorms: 0,
            failures: Vec::new(),
            per_traj: Vec::new(),
            events: Vec::new(),
        }
    }

    fn add(&mut self, index: u64, rec: &TrajectoryRecord, collect_events: bool) {
        self.n_ok += 1;
        if self.times.is_empty() {
            self.times = rec.times.clone();
        }
        self.p_site += &rec.p_site;
        self.p_fourier += &rec.p_fourier;
        self.p_eigen += &rec.p_eigen;
        for (a, b) in self.leakage.iter_mut().zip(rec.leakage.iter()) {
            *a += b;
        }
        for (a, b) in self.e_c.iter_mut().zip(rec.classical_energy.iter()) {
            *a += b;
        }
        for (a, b) in self.e_q.iter_mut().zip(rec.quantum_energy.iter()) {
            *a += b;
        }
        for (a, b) in self.e_t.iter_mut().zip(rec.total_energy.iter()) {
            *a += b;
        }
        self.init_ec += rec.initial_classical_energy;
        self.capture += rec.capture;
        self.total_hops += rec.hops.len();
        self.frustrated += rec
            .hops
            .iter()
            .filter(|h| h.outcome == HopOutcome::Frustrated)
            .count();
        self.renorms += rec.renormalizations;
        self.per_traj.push(PerTrajStats {
            index,
            second_half_site_population: rec.second_half_site_population,
            second_half_k0_population: rec.second_half_k0_population,
            n_hops: rec.hops.len(),
            initial_classical_energy: rec.initial_classical_energy,
        });
        if collect_events {
            for h in &rec.hops {
                self.events.push((index, h.clone()));
            }
        }
    }

    fn merge(&mut self, other: Partial) {
        self.n_ok += other.n_ok;
        if self.times.is_empty() {
            self.times = other.times;
        }
        self.p_site += &other.p_site;
        self.p_fourier += &other.p_fourier;
        self.p_eigen += &other.p_eigen;
        for (a, b) in self.leakage.iter_mut().zip(other.leakage.iter()) {
            *a += b;
        }
        for (a, b) in self.e_c.iter_mut().zip(other.e_c.iter()) {
            *a += b;
        }
        for (a, b) in self.e_q.iter_mut().zip(other.e_q.iter()) {
            *a += b;
        }
        for (a, b) in self.e_t.iter_mut().zip(other.e_t.iter()) {
            *a += b;
        }
        self.init_ec += other.init_ec;
        self.capture += other.capture;
        self.total_hops += other.total_hops;
        self.frustrated += other.frustrated;
        self.renorms += other.renorms;
        self.failures.extend(other.failures);
        self.per_traj.extend(other.per_traj);
        self.events.extend(other.events);
    }
}

/// Trajectories per reduction chunk. Partial sums are accumulated inside
/// fixed index ranges and merged in range order, so the ensemble result is
/// bit-identical for any worker count.
const CHUNK: usize = 16;

/// Runs the whole ensemble with a deterministic, order-fixed reduction.
pub fn run_ensemble(setup: &RunSetup) -> Result<EnsembleObservables> {
    let cfg = &setup.cfg;
    let n = cfg.params.n_sites;
    let n_records = cfg.n_steps() / cfg.record_every() + 1;
    let n_chunks = cfg.n_traj.div_ceil(CHUNK);

    let work = |chunk: usize| -> Partial {
        let lo = chunk * CHUNK;
        let hi = ((chunk + 1) * CHUNK).min(cfg.n_traj);
        let mut acc = Partial::new(n_records, n);
        for idx in lo..hi {
            match run_trajectory(setup, idx as u64) {
                Ok(rec) => acc.add(idx as u64, &rec, cfg.collect_hops),
                Err(e) => acc.failures.push((idx as u64, e.to_string())),
            }
        }
        acc
    };

    let partials: Vec<Partial> = if cfg.workers == 1 {
        (0..n_chunks).map(work).collect()
    } else if cfg.workers == 0 {
        (0..n_chunks).into_par_iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| (0..n_chunks).into_par_iter().map(work).collect())
    };

    let mut total = Partial::new(n_records, n);
    for p in partials {
        total.merge(p);
    }

    let n_ok = total.n_ok.max(1) as f64;
    let scale = 1.0 / n_ok;
    Ok(EnsembleObservables {
        times: total.times,
        p_site: total.p_site.mapv(|x| x * scale),
        p_fourier: total.p_fourier.mapv(|x| x * scale),
        p_eigen: total.p_eigen.mapv(|x| x * scale),
        leakage: total.leakage.iter().map(|x| x * scale).collect(),
        classical_energy: total.e_c.iter().map(|x| x * scale).collect(),
        quantum_energy: total.e_q.iter().map(|x| x * scale).collect(),
        total_energy: total.e_t.iter().map(|x| x * scale).collect(),
        n_traj: cfg.n_traj,
        n_failed: total.failures.len(),
        failures: total.failures,
        mean_initial_classical_energy: total.init_ec * scale,
        mean_capture: total.capture * scale,
        total_hops: total.total_hops,
        frustrated_hops: total.frustrated,
        renormalizations: total.renorms,
        per_trajectory: total.per_traj,
        hop_events: total.events,
    })
}
