//! Phase-space coordinates of the classical modes, their packing into
//! complex-valued coordinates, and unitary changes of basis.
//!
//! Each classical mode n with mass m_n and positive scale factor h_n is
//! folded into a single complex number
//!
//! ```text
//! z_n = sqrt(m_n h_n / 2) * (q_n + i p_n / (m_n h_n))
//! ```
//!
//! so that positions sit in the real part and momenta in the imaginary
//! part. For a harmonic mode with h_n equal to its frequency, free motion
//! traces a circle in the complex plane; any other h_n gives an ellipse
//! whose real/imaginary extents differ by h_n/omega.
//!
//! A `UnitaryBasis` stores M orthonormal rows over the N physical modes.
//! Complex coordinates transform with the rows themselves (z_xi = sum_n
//! U_{xi n} z_n), while quantum state components transform with the
//! conjugated rows; both directions are provided here.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::prelude::*;

use crate::error::{Error, Result};
use crate::C64;

/// Positions, momenta, and masses of the classical modes.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalState {
    pub q: Array1<f64>,
    pub p: Array1<f64>,
    pub m: Array1<f64>,
}

impl CanonicalState {
    pub fn new(q: Array1<f64>, p: Array1<f64>, m: Array1<f64>) -> Result<Self> {
        if q.len() != p.len() || q.len() != m.len() {
            return Err(Error::Dimension(format!(
                "canonical state needs matching lengths, got q={} p={} m={}",
                q.len(),
                p.len(),
                m.len()
            )));
        }
        if m.iter().any(|&mi| !(mi > 0.0)) {
            return Err(Error::Domain("masses must be positive".into()));
        }
        Ok(Self { q, p, m })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Per-mode scale factors h_n and masses used by the complex packing.
///
/// h_n is a free positive parameter; choosing h_n equal to the harmonic
/// frequency of mode n makes the packed dynamics circular.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub h: Array1<f64>,
    pub m: Array1<f64>,
}

impl CoordinateMap {
    pub fn new(h: Array1<f64>, m: Array1<f64>) -> Result<Self> {
        if h.len() != m.len() {
            return Err(Error::Dimension(format!(
                "coordinate map needs matching lengths, got h={} m={}",
                h.len(),
                m.len()
            )));
        }
        if h.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain("scale factors h must be positive".into()));
        }
        if m.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain("masses must be positive".into()));
        }
        Ok(Self { h, m })
    }

    pub fn uniform(n: usize, h: f64, m: f64) -> Result<Self> {
        Self::new(Array1::from_elem(n, h), Array1::from_elem(n, m))
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Row labels of a basis: plain site indices, wavevectors, or electronic
/// eigenstates (numbered from 1 in increasing energy).
#[derive(Debug, Clone, PartialEq)]
pub enum BasisLabels {
    Site(Vec<usize>),
    /// k = 2*pi*j/N stored together with the integer index j.
    Wavevector { j: Vec<i64>, k: Vec<f64> },
    Eigenstate { index: Vec<usize>, energy: Vec<f64> },
}

impl BasisLabels {
    pub fn len(&self) -> usize {
        match self {
            BasisLabels::Site(v) => v.len(),
            BasisLabels::Wavevector { j, .. } => j.len(),
            BasisLabels::Eigenstate { index, .. } => index.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Short per-row names used for output columns: "n3", "k-2", "i1".
    pub fn names(&self) -> Vec<String> {
        match self {
            BasisLabels::Site(v) => v.iter().map(|n| format!("n{n}")).collect(),
            BasisLabels::Wavevector { j, .. } => j.iter().map(|j| format!("k{j}")).collect(),
            BasisLabels::Eigenstate { index, .. } => {
                index.iter().map(|i| format!("i{i}")).collect()
            }
        }
    }

    fn select(&self, keep: &[usize]) -> BasisLabels {
        match self {
            BasisLabels::Site(v) => BasisLabels::Site(keep.iter().map(|&i| v[i]).collect()),
            BasisLabels::Wavevector { j, k } => BasisLabels::Wavevector {
                j: keep.iter().map(|&i| j[i]).collect(),
                k: keep.iter().map(|&i| k[i]).collect(),
            },
            BasisLabels::Eigenstate { index, energy } => BasisLabels::Eigenstate {
                index: keep.iter().map(|&i| index[i]).collect(),
                energy: keep.iter().map(|&i| energy[i]).collect(),
            },
        }
    }
}

/// M orthonormal rows over N physical modes, with per-row labels and the
/// indices these rows occupy in their parent full basis.
#[derive(Debug, Clone)]
pub struct UnitaryBasis {
    u: Array2<C64>,
    labels: BasisLabels,
    kept: Vec<usize>,
    identity: bool,
    real: bool,
}

/// Row orthonormality tolerance enforced on construction.
pub const UNITARITY_TOL: f64 = 1e-12;

impl UnitaryBasis {
    /// Wraps a row matrix after checking U U^dagger = I to 1e-12.
    pub fn new(u: Array2<C64>, labels: BasisLabels) -> Result<Self> {
        let (rows, cols) = u.dim();
        if rows == 0 && labels.is_empty() {
            // Degenerate but valid: the empty subspace.
            return Ok(Self {
                u,
                labels,
                kept: Vec::new(),
                identity: false,
                real: true,
            });
        }
        if rows > cols {
            return Err(Error::Dimension(format!(
                "basis cannot have more rows ({rows}) than columns ({cols})"
            )));
        }
        if labels.len() != rows {
            return Err(Error::Dimension(format!(
                "basis has {rows} rows but {} labels",
                labels.len()
            )));
        }
        for a in 0..rows {
            for b in a..rows {
                let mut dot = C64::new(0.0, 0.0);
                for n in 0..cols {
                    dot += u[(a, n)].conj() * u[(b, n)];
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).norm() > UNITARITY_TOL {
                    return Err(Error::Numeric(format!(
                        "basis rows {a},{b} not orthonormal: residue {:.3e}",
                        (dot - expect).norm()
                    )));
                }
            }
        }
        let identity = rows == cols
            && u.indexed_iter().all(|((r, c), v)| {
                let expect = if r == c { 1.0 } else { 0.0 };
                v.re == expect && v.im == 0.0
            });
        let real = u.iter().all(|v| v.im == 0.0);
        Ok(Self {
            u,
            labels,
            kept: (0..rows).collect(),
            identity,
            real,
        })
    }

    /// The physical basis itself: the N x N identity with site labels.
    pub fn identity(n: usize) -> Self {
        let mut u = Array2::zeros((n, n));
        for i in 0..n {
            u[(i, i)] = C64::new(1.0, 0.0);
        }
        Self {
            u,
            labels: BasisLabels::Site((0..n).collect()),
            kept: (0..n).collect(),
            identity: true,
            real: true,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn full_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.u
    }

    pub fn labels(&self) -> &BasisLabels {
        &self.labels
    }

    /// Indices of these rows in the parent full basis.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// True when every entry is purely real.
    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn is_truncated(&self) -> bool {
        self.n_rows() < self.full_dim()
    }

    /// Real part of the row matrix; meaningful when `is_real()`.
    pub fn real_rows(&self) -> Array2<f64> {
        self.u.mapv(|v| v.re)
    }

    /// Coordinate transform z_xi = sum_n U_{xi n} z_n (rows act directly).
    pub fn coords_forward(&self, z_phys: &Array1<C64>) -> Array1<C64> {
        self.u.dot(z_phys)
    }

    /// Least-norm reconstruction z_n = sum_xi conj(U_{xi n}) z_xi.
    /// For a truncated basis this is the projection onto the retained rows.
    pub fn coords_back(&self, z: &Array1<C64>) -> Array1<C64> {
        let m = self.n_rows();
        let n = self.full_dim();
        let mut out = Array1::zeros(n);
        for xi in 0..m {
            let zx = z[xi];
            for col in 0..n {
                out[col] += self.u[(xi, col)].conj() * zx;
            }
        }
        out
    }

    /// Components of a quantum state in this basis: psi_xi = sum_n
    /// conj(U_{xi n}) psi_n. State coefficients transform with the
    /// conjugated rows, unlike classical coordinates.
    pub fn state_components(&self, psi_phys: &Array1<C64>) -> Array1<C64> {
        let m = self.n_rows();
        let n = self.full_dim();
        let mut out = Array1::zeros(m);
        for xi in 0..m {
            let mut acc = C64::new(0.0, 0.0);
            for col in 0..n {
                acc += self.u[(xi, col)].conj() * psi_phys[col];
            }
            out[xi] = acc;
        }
        out
    }

    /// Physical components of a state given in this basis: psi_n = sum_xi
    /// U_{xi n} psi_xi.
    pub fn state_reconstruct(&self, psi: &Array1<C64>) -> Array1<C64> {
        let m = self.n_rows();
        let n = self.full_dim();
        let mut out = Array1::zeros(n);
        for xi in 0..m {
            let px = psi[xi];
            for col in 0..n {
                out[col] += self.u[(xi, col)] * px;
            }
        }
        out
    }

    /// Row-subset basis. `keep` must be strictly increasing current-row
    /// indices; labels and parent indices follow the surviving rows.
    pub fn apply_mask(&self, keep: &[usize]) -> Result<UnitaryBasis> {
        if keep.is_empty() {
            return Err(Error::Domain("empty keep set".into()));
        }
        if keep.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "keep indices must be strictly increasing (duplicates are not allowed)".into(),
            ));
        }
        if *keep.last().unwrap() >= self.n_rows() {
            return Err(Error::Domain(format!(
                "keep index {} out of range for {} rows",
                keep.last().unwrap(),
                self.n_rows()
            )));
        }
        let mut u = Array2::zeros((keep.len(), self.full_dim()));
        for (r, &i) in keep.iter().enumerate() {
            u.row_mut(r).assign(&self.u.row(i));
        }
        let real = u.iter().all(|v: &C64| v.im == 0.0);
        Ok(UnitaryBasis {
            u,
            labels: self.labels.select(keep),
            kept: keep.iter().map(|&i| self.kept[i]).collect(),
            identity: false,
            real,
        })
    }

    /// Writes the documented text form: one header line with M, N, the
    /// label kind and the label payload, then M rows of 2N floats with
    /// real and imaginary parts interleaved.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let m = self.n_rows();
        let n = self.full_dim();
        match &self.labels {
            BasisLabels::Site(v) => {
                out.push_str(&format!("{m} {n} site"));
                for s in v {
                    out.push_str(&format!(" {s}"));
                }
            }
            BasisLabels::Wavevector { j, .. } => {
                out.push_str(&format!("{m} {n} wavevector"));
                for jj in j {
                    out.push_str(&format!(" {jj}"));
                }
            }
            BasisLabels::Eigenstate { index, energy } => {
                out.push_str(&format!("{m} {n} eigenstate"));
                for i in index {
                    out.push_str(&format!(" {i}"));
                }
                for e in energy {
                    out.push_str(&format!(" {e}"));
                }
            }
        }
        out.push('\n');
        for r in 0..m {
            let mut first = true;
            for c in 0..n {
                let v = self.u[(r, c)];
                if !first {
                    out.push(' ');
                }
                out.push_str(&format!("{} {}", v.re, v.im));
                first = false;
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads the text form written by [`UnitaryBasis::write_text`].
    pub fn read_text(path: &Path) -> Result<UnitaryBasis> {
        let body = std::fs::read_to_string(path)?;
        let mut lines = body.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("basis file is empty".into()))?;
        let mut toks = header.split_whitespace();
        let m: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Config("basis header must start with row count".into()))?;
        let n: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Config("basis header must carry the column count".into()))?;
        let kind = toks
            .next()
            .ok_or_else(|| Error::Config("basis header must name the label kind".into()))?;
        let rest: Vec<&str> = toks.collect();
        let labels = match kind {
            "site" => {
                let v: std::result::Result<Vec<usize>, _> =
                    rest.iter().map(|t| t.parse()).collect();
                BasisLabels::Site(v.map_err(|_| Error::Config("bad site labels".into()))?)
            }
            "wavevector" => {
                let j: std::result::Result<Vec<i64>, _> =
                    rest.iter().map(|t| t.parse()).collect();
                let j = j.map_err(|_| Error::Config("bad wavevector labels".into()))?;
                let k = j.iter().map(|&jj| 2.0 * PI * jj as f64 / n as f64).collect();
                BasisLabels::Wavevector { j, k }
            }
            "eigenstate" => {
                if rest.len() != 2 * m {
                    return Err(Error::Config(format!(
                        "eigenstate header needs {m} indices and {m} energies"
                    )));
                }
                let index: std::result::Result<Vec<usize>, _> =
                    rest[..m].iter().map(|t| t.parse()).collect();
                let energy: std::result::Result<Vec<f64>, _> =
                    rest[m..].iter().map(|t| t.parse()).collect();
                BasisLabels::Eigenstate {
                    index: index.map_err(|_| Error::Config("bad eigenstate indices".into()))?,
                    energy: energy.map_err(|_| Error::Config("bad eigenstate energies".into()))?,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown basis label kind '{other}' (expected site, wavevector, or eigenstate)"
                )))
            }
        };
        if labels.len() != m && !(m == 0 && labels.is_empty()) {
            return Err(Error::Config(format!(
                "basis header promises {m} rows but carries {} labels",
                labels.len()
            )));
        }
        let mut u = Array2::zeros((m, n));
        for r in 0..m {
            let line = lines
                .next()
                .ok_or_else(|| Error::Config(format!("basis file ends before row {r}")))?;
            let vals: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(|t| t.parse()).collect();
            let vals = vals.map_err(|_| Error::Config(format!("bad float in basis row {r}")))?;
            if vals.len() != 2 * n {
                return Err(Error::Config(format!(
                    "basis row {r} has {} values, expected {}",
                    vals.len(),
                    2 * n
                )));
            }
            for c in 0..n {
                u[(r, c)] = C64::new(vals[2 * c], vals[2 * c + 1]);
            }
        }
        UnitaryBasis::new(u, labels)
    }
}

/// Complex coordinates together with the basis they are expressed in.
#[derive(Debug, Clone)]
pub struct ComplexCoords {
    pub z: Array1<C64>,
    pub basis: Arc<UnitaryBasis>,
}

impl ComplexCoords {
    pub fn new(z: Array1<C64>, basis: Arc<UnitaryBasis>) -> Result<Self> {
        if z.len() != basis.n_rows() {
            return Err(Error::Dimension(format!(
                "coordinate vector has {} entries but the basis has {} rows",
                z.len(),
                basis.n_rows()
            )));
        }
        Ok(Self { z, basis })
    }

    /// Wraps physical-basis coordinates (identity basis of matching size).
    pub fn physical(z: Array1<C64>) -> Self {
        let n = z.len();
        Self {
            z,
            basis: Arc::new(UnitaryBasis::identity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

fn check_map(map: &CoordinateMap, m: &Array1<f64>) -> Result<()> {
    if map.m != *m {
        return Err(Error::Domain(
            "coordinate map masses differ from the state's masses".into(),
        ));
    }
    Ok(())
}

/// Packs canonical coordinates into complex ones (physical basis).
pub fn to_complex(state: &CanonicalState, map: &CoordinateMap) -> Result<ComplexCoords> {
    if state.len() != map.len() {
        return Err(Error::Dimension(format!(
            "state has {} modes, map has {}",
            state.len(),
            map.len()
        )));
    }
    check_map(map, &state.m)?;
    let z = raw_to_complex(&state.q, &state.p, &map.m, &map.h);
    Ok(ComplexCoords::physical(z))
}

/// Unpacks physical-basis complex coordinates back to canonical ones.
pub fn from_complex(z: &ComplexCoords, map: &CoordinateMap) -> Result<CanonicalState> {
    if !z.basis.is_identity() {
        return Err(Error::Domain(
            "coordinates are not in the physical basis; apply inverse_transform first".into(),
        ));
    }
    if z.len() != map.len() {
        return Err(Error::Dimension(format!(
            "coordinates have {} modes, map has {}",
            z.len(),
            map.len()
        )));
    }
    let (q, p) = raw_from_complex(&z.z, &map.m, &map.h);
    CanonicalState::new(q, p, map.m.clone())
}

/// z_n = sqrt(m h / 2) (q + i p / (m h)) on raw arrays.
pub fn raw_to_complex(
    q: &Array1<f64>,
    p: &Array1<f64>,
    m: &Array1<f64>,
    h: &Array1<f64>,
) -> Array1<C64> {
    let n = q.len();
    let mut z = Array1::zeros(n);
    for i in 0..n {
        let mh = m[i] * h[i];
        let scale = (mh / 2.0).sqrt();
        z[i] = C64::new(scale * q[i], scale * p[i] / mh);
    }
    z
}

/// q_n = sqrt(2/(m h)) Re z, p_n = sqrt(2 m h) Im z on raw arrays.
pub fn raw_from_complex(
    z: &Array1<C64>,
    m: &Array1<f64>,
    h: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let n = z.len();
    let mut q = Array1::zeros(n);
    let mut p = Array1::zeros(n);
    for i in 0..n {
        let mh = m[i] * h[i];
        q[i] = (2.0 / mh).sqrt() * z[i].re;
        p[i] = (2.0 * mh).sqrt() * z[i].im;
    }
    (q, p)
}

/// Applies a basis to physical coordinates: z_xi = sum_n U_{xi n} z_n.
pub fn transform(z: &ComplexCoords, basis: &Arc<UnitaryBasis>) -> Result<ComplexCoords> {
    if !z.basis.is_identity() {
        return Err(Error::Domain(
            "transform expects physical-basis coordinates".into(),
        ));
    }
    if z.len() != basis.full_dim() {
        return Err(Error::Dimension(format!(
            "coordinates have {} modes but the basis covers {}",
            z.len(),
            basis.full_dim()
        )));
    }
    Ok(ComplexCoords {
        z: basis.coords_forward(&z.z),
        basis: Arc::clone(basis),
    })
}

/// Maps transformed coordinates back to the physical basis. For truncated
/// bases this is the least-norm reconstruction on the retained subspace.
pub fn inverse_transform(z: &ComplexCoords, basis: &UnitaryBasis) -> Result<ComplexCoords> {
    if z.len() != basis.n_rows() {
        return Err(Error::Dimension(format!(
            "coordinates have {} entries but the basis has {} rows",
            z.len(),
            basis.n_rows()
        )));
    }
    Ok(ComplexCoords::physical(basis.coords_back(&z.z)))
}

/// Discrete plane-wave rows U_{kn} = exp(i k n)/sqrt(N) on the ring of N
/// sites, k = 2*pi*j/N for j in {-floor(N/2), ..., ceil(N/2)-1}.
pub fn build_fourier(n: usize) -> Result<UnitaryBasis> {
    if n == 0 {
        return Err(Error::Domain("cannot build a basis over zero sites".into()));
    }
    let half = (n / 2) as i64;
    let js: Vec<i64> = (-half..(n as i64 - half)).collect();
    let norm = 1.0 / (n as f64).sqrt();
    let mut u = Array2::zeros((n, n));
    for (row, &j) in js.iter().enumerate() {
        for col in 0..n {
            // Reduce j*col mod N before the trig call to keep rows unitary
            // to machine precision for any N.
            let r = (j * col as i64).rem_euclid(n as i64);
            let phase = 2.0 * PI * r as f64 / n as f64;
            u[(row, col)] = C64::from_polar(norm, phase);
        }
    }
    let k = js.iter().map(|&j| 2.0 * PI * j as f64 / n as f64).collect();
    UnitaryBasis::new(u, BasisLabels::Wavevector { j: js, k })
}

/// Real orthonormal rows spanning the same subspace as a wavevector basis
/// whose retained k-set is symmetric under k -> -k. Rows pair each (+k, -k)
/// into cosine and sine standing waves; k = 0 and the k = -pi row (even N)
/// are already real. Returns None when the retained set is asymmetric or
/// the labels are not wavevectors.
///
/// The result spans exactly the same coordinates, so propagating in it is
/// an exact reformulation; it is used as a fast working frame because every
/// compressed operator becomes real symmetric.
pub fn realize_symmetric_wavevectors(basis: &UnitaryBasis) -> Option<Array2<f64>> {
    let (js, _) = match basis.labels() {
        BasisLabels::Wavevector { j, k } => (j.clone(), k.clone()),
        _ => return None,
    };
    let n = basis.full_dim();
    let m = basis.n_rows();
    let self_conj = |j: i64| -> bool { j == 0 || 2 * j == -(n as i64) };
    for &j in &js {
        if !self_conj(j) && !js.contains(&-j) {
            return None;
        }
    }
    let mut rows = Array2::zeros((m, n));
    let scale = 1.0 / (n as f64).sqrt();
    for (r, &j) in js.iter().enumerate() {
        if self_conj(j) {
            // exp(i k n) is already real for k = 0 and k = -pi.
            for col in 0..n {
                let red = (j * col as i64).rem_euclid(n as i64);
                rows[(r, col)] = scale * (2.0 * PI * red as f64 / n as f64).cos();
            }
        } else {
            let amp = std::f64::consts::SQRT_2 * scale;
            for col in 0..n {
                let red = (j.abs() * col as i64).rem_euclid(n as i64);
                let ang = 2.0 * PI * red as f64 / n as f64;
                rows[(r, col)] = if j < 0 { amp * ang.cos() } else { amp * ang.sin() };
            }
        }
    }
    Some(rows)
}
