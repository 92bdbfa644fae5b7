//! Truncated Fourier representation of complex 3-vector fields on the
//! periodic 3-torus, with the differential and algebraic primitives shared by
//! every other module.
//!
//! Convention: `f(x) = Σ_k c_k e^{i k·x/s}` over the cube `|k_i| ≤ N`, where
//! `s` is the period scale (period `2πs` per axis). Coefficients are stored
//! densely, component-major, each component in lexicographic `k` order with
//! `k₁` slowest.

use crate::error::{Error, Result};
use crate::fft;
use crate::C64;
use rand::Rng;
use std::f64::consts::PI;

/// Safety factor applied to grid-estimated sup-norms before they are used as
/// upper bounds.
pub const SUP_SAFETY_FACTOR: f64 = 1.05;
/// Default oversampling of the grid used by [`norms`].
pub const DEFAULT_OVERSAMPLE: usize = 4;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Integer mode index (period-2π convention).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WaveVector(pub [i64; 3]);

impl WaveVector {
    pub const ZERO: WaveVector = WaveVector([0, 0, 0]);

    pub fn new(k1: i64, k2: i64, k3: i64) -> Self {
        WaveVector([k1, k2, k3])
    }

    /// Cubic radius `max |k_i|`.
    pub fn radius(&self) -> i64 {
        self.0.iter().map(|k| k.abs()).max().unwrap_or(0)
    }

    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|k| k * k).sum()
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }
}

impl std::ops::Neg for WaveVector {
    type Output = WaveVector;
    fn neg(self) -> WaveVector {
        WaveVector([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl std::ops::Add for WaveVector {
    type Output = WaveVector;
    fn add(self, o: WaveVector) -> WaveVector {
        WaveVector([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl std::ops::Sub for WaveVector {
    type Output = WaveVector;
    fn sub(self, o: WaveVector) -> WaveVector {
        WaveVector([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Real,
    Complex,
}

impl FieldKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FieldKind::Real => "real",
            FieldKind::Complex => "complex",
        }
    }

    fn join(self, other: FieldKind) -> FieldKind {
        if self == FieldKind::Real && other == FieldKind::Real {
            FieldKind::Real
        } else {
            FieldKind::Complex
        }
    }
}

impl std::str::FromStr for FieldKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(FieldKind::Real),
            "complex" => Ok(FieldKind::Complex),
            other => Err(Error::Format(format!("unknown field kind {other:?}"))),
        }
    }
}

/// Amplitudes of the ABC flow
/// `(a sin x₃ + c cos x₂, b sin x₁ + a cos x₃, c sin x₂ + b cos x₁)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbcParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl AbcParams {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        AbcParams { a, b, c }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    n: usize,
    kind: FieldKind,
    period_scale: f64,
    coeffs: Vec<C64>,
}

#[inline]
pub fn cross3(a: &[C64; 3], b: &[C64; 3]) -> [C64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Bilinear (non-conjugating) dot product.
#[inline]
pub fn dot3(a: &[C64; 3], b: &[C64; 3]) -> C64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: &[C64; 3]) -> f64 {
    (a[0].norm_sqr() + a[1].norm_sqr() + a[2].norm_sqr()).sqrt()
}

impl SpectralField {
    pub fn zeros(n: usize, kind: FieldKind) -> Self {
        let side = 2 * n + 1;
        SpectralField { n, kind, period_scale: 1.0, coeffs: vec![ZERO; 3 * side * side * side] }
    }

    /// Builds a field from a coefficient function over the cube of radius `n`.
    pub fn from_fn(n: usize, kind: FieldKind, mut f: impl FnMut(WaveVector) -> [C64; 3]) -> Self {
        let mut out = SpectralField::zeros(n, kind);
        let modes = out.modes();
        for idx in 0..modes {
            let c = f(out.wave_vector(idx));
            for (comp, v) in c.into_iter().enumerate() {
                out.coeffs[comp * modes + idx] = v;
            }
        }
        out
    }

    /// Wraps raw component-major coefficients.
    pub fn from_vec(n: usize, kind: FieldKind, coeffs: Vec<C64>) -> Result<Self> {
        let side = 2 * n + 1;
        if coeffs.len() != 3 * side * side * side {
            return Err(Error::InvalidParameter(format!(
                "expected {} coefficients for N = {n}, got {}",
                3 * side * side * side,
                coeffs.len()
            )));
        }
        Ok(SpectralField { n, kind, period_scale: 1.0, coeffs })
    }

    /// Constant field `v`.
    pub fn constant(n: usize, v: [C64; 3]) -> Self {
        let kind = if v.iter().all(|c| c.im == 0.0) { FieldKind::Real } else { FieldKind::Complex };
        let mut out = SpectralField::zeros(n, kind);
        out.set_coeff(WaveVector::ZERO, v);
        out
    }

    /// Random field with Gaussian coefficients damped by `exp(−|k|²/(2 width²))`.
    /// Real fields get Hermitian-symmetric coefficients.
    pub fn random<R: Rng + ?Sized>(n: usize, kind: FieldKind, width: f64, rng: &mut R) -> Self {
        let mut out = SpectralField::zeros(n, kind);
        let modes = out.modes();
        for idx in 0..modes {
            let k = out.wave_vector(idx);
            let damp = (-(k.norm_sq() as f64) / (2.0 * width * width)).exp();
            for comp in 0..3 {
                let re: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let im: f64 = rng.random::<f64>() * 2.0 - 1.0;
                out.coeffs[comp * modes + idx] = C64::new(re, im) * damp;
            }
        }
        if kind == FieldKind::Real {
            out.symmetrize();
        }
        out
    }

    pub fn truncation(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> usize {
        2 * self.n + 1
    }

    /// Number of wave vectors per component.
    pub fn modes(&self) -> usize {
        let s = self.side();
        s * s * s
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn set_kind(&mut self, kind: FieldKind) {
        self.kind = kind;
    }

    pub fn period_scale(&self) -> f64 {
        self.period_scale
    }

    pub fn with_period_scale(mut self, scale: f64) -> Self {
        self.period_scale = scale;
        self
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.coeffs
    }

    /// A field with this one's truncation, kind, and scale but new coefficients.
    pub fn like(&self, coeffs: Vec<C64>) -> Self {
        assert_eq!(coeffs.len(), self.coeffs.len());
        SpectralField { n: self.n, kind: self.kind, period_scale: self.period_scale, coeffs }
    }

    pub fn component(&self, c: usize) -> &[C64] {
        let m = self.modes();
        &self.coeffs[c * m..(c + 1) * m]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [C64] {
        let m = self.modes();
        &mut self.coeffs[c * m..(c + 1) * m]
    }

    /// Lexicographic position of `k`, if inside the truncation.
    pub fn index(&self, k: WaveVector) -> Option<usize> {
        if k.radius() > self.n as i64 {
            return None;
        }
        let n = self.n as i64;
        let side = self.side() as i64;
        Some((((k.0[0] + n) * side + (k.0[1] + n)) * side + (k.0[2] + n)) as usize)
    }

    pub fn wave_vector(&self, idx: usize) -> WaveVector {
        let side = self.side();
        let n = self.n as i64;
        let k3 = (idx % side) as i64 - n;
        let k2 = ((idx / side) % side) as i64 - n;
        let k1 = (idx / (side * side)) as i64 - n;
        WaveVector([k1, k2, k3])
    }

    pub fn coeff(&self, k: WaveVector) -> [C64; 3] {
        match self.index(k) {
            Some(i) => self.coeff_at(i),
            None => [ZERO; 3],
        }
    }

    #[inline]
    pub fn coeff_at(&self, idx: usize) -> [C64; 3] {
        let m = self.modes();
        [self.coeffs[idx], self.coeffs[m + idx], self.coeffs[2 * m + idx]]
    }

    #[inline]
    pub fn set_coeff_at(&mut self, idx: usize, v: [C64; 3]) {
        let m = self.modes();
        self.coeffs[idx] = v[0];
        self.coeffs[m + idx] = v[1];
        self.coeffs[2 * m + idx] = v[2];
    }

    /// Sets the coefficient at `k`; panics if `k` is outside the truncation.
    pub fn set_coeff(&mut self, k: WaveVector, v: [C64; 3]) {
        let idx = self.index(k).expect("wave vector outside truncation");
        self.set_coeff_at(idx, v);
    }

    /// Physical wavenumber `k/s` of mode `idx`.
    #[inline]
    pub fn wavenumber(&self, idx: usize) -> [f64; 3] {
        let k = self.wave_vector(idx).as_f64();
        let s = self.period_scale;
        [k[0] / s, k[1] / s, k[2] / s]
    }

    /// Modes with a nonzero coefficient.
    pub fn support(&self) -> Vec<(WaveVector, [C64; 3])> {
        (0..self.modes())
            .filter_map(|i| {
                let c = self.coeff_at(i);
                (c.iter().any(|v| *v != ZERO)).then(|| (self.wave_vector(i), c))
            })
            .collect()
    }

    /// Largest cubic radius carrying a nonzero coefficient.
    pub fn support_radius(&self) -> usize {
        (0..self.modes())
            .filter(|&i| self.coeff_at(i).iter().any(|v| *v != ZERO))
            .map(|i| self.wave_vector(i).radius() as usize)
            .max()
            .unwrap_or(0)
    }

    /// Copy truncated or zero-padded to radius `n`.
    pub fn resized(&self, n: usize) -> Self {
        let mut out = SpectralField::zeros(n, self.kind);
        out.period_scale = self.period_scale;
        let r = n.min(self.n);
        for idx in 0..self.modes() {
            let k = self.wave_vector(idx);
            if k.radius() <= r as i64 {
                out.set_coeff(k, self.coeff_at(idx));
            }
        }
        out
    }

    pub fn scaled(&self, alpha: C64) -> Self {
        let mut out = self.clone();
        out.scale_mut(alpha);
        out
    }

    pub fn scale_mut(&mut self, alpha: C64) {
        if alpha.im != 0.0 {
            self.kind = FieldKind::Complex;
        }
        for v in self.coeffs.iter_mut() {
            *v *= alpha;
        }
    }

    /// `self += alpha·other` (same truncation).
    pub fn axpy(&mut self, alpha: C64, other: &SpectralField) {
        assert_eq!(self.n, other.n, "truncation mismatch");
        if alpha.im != 0.0 {
            self.kind = FieldKind::Complex;
        }
        self.kind = self.kind.join(other.kind);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += alpha * b;
        }
    }

    pub fn add(&self, other: &SpectralField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(1.0, 0.0), other);
        out
    }

    pub fn sub(&self, other: &SpectralField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(-1.0, 0.0), other);
        out
    }

    /// Coefficient inner product `Σ conj(self)·other`.
    pub fn dot(&self, other: &SpectralField) -> C64 {
        assert_eq!(self.n, other.n, "truncation mismatch");
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a.conj() * b).sum()
    }

    /// Euclidean norm of the coefficient vector, i.e. the L² norm divided by
    /// the square root of the cell volume.
    pub fn coeff_norm(&self) -> f64 {
        self.coeffs.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Volume of one periodic cell, `(2πs)³`.
    pub fn cell_volume(&self) -> f64 {
        (2.0 * PI * self.period_scale).powi(3)
    }

    /// L² norm over one periodic cell (Parseval).
    pub fn l2_norm(&self) -> f64 {
        self.cell_volume().sqrt() * self.coeff_norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Pointwise complex conjugate as a field: coefficient at `k` becomes
    /// `conj(c(−k))`.
    pub fn conj_field(&self) -> Self {
        let mut out = self.clone();
        for idx in 0..self.modes() {
            let k = self.wave_vector(idx);
            let c = self.coeff(-k);
            out.set_coeff_at(idx, [c[0].conj(), c[1].conj(), c[2].conj()]);
        }
        out
    }

    /// `max_k |c(−k) − conj c(k)|`; zero for exactly real fields.
    pub fn reality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for idx in 0..self.modes() {
            let k = self.wave_vector(idx);
            let a = self.coeff_at(idx);
            let b = self.coeff(-k);
            for c in 0..3 {
                worst = worst.max((b[c] - a[c].conj()).norm());
            }
        }
        worst
    }

    /// Replaces coefficients by their Hermitian-symmetric part, making the
    /// synthesized field exactly real.
    pub fn symmetrize(&mut self) {
        let conj = self.conj_field();
        for (a, b) in self.coeffs.iter_mut().zip(&conj.coeffs) {
            *a = (*a + b) * 0.5;
        }
        self.kind = FieldKind::Real;
    }

    /// `max_k |(k/s + j)·c(k)|`, the modal-divergence residual.
    pub fn divergence_residual(&self, j: [f64; 3]) -> f64 {
        (0..self.modes())
            .map(|idx| {
                let kappa = shifted(self.wavenumber(idx), j);
                let c = self.coeff_at(idx);
                (c[0] * kappa[0] + c[1] * kappa[1] + c[2] * kappa[2]).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Leray projection onto fields with `(k/s + j)·c(k) = 0`; modes with
    /// `k/s + j = 0` are left unchanged.
    pub fn project_solenoidal(&self, j: [f64; 3]) -> Self {
        let mut out = self.clone();
        for idx in 0..self.modes() {
            let kappa = shifted(self.wavenumber(idx), j);
            let k2 = kappa.iter().map(|v| v * v).sum::<f64>();
            if k2 == 0.0 {
                continue;
            }
            let c = self.coeff_at(idx);
            let d = (c[0] * kappa[0] + c[1] * kappa[1] + c[2] * kappa[2]) / k2;
            out.set_coeff_at(idx, [c[0] - d * kappa[0], c[1] - d * kappa[1], c[2] - d * kappa[2]]);
        }
        out
    }

    /// Samples on the uniform grid `x = 2πs·i/m`, one vector per component,
    /// each in `(i₀, i₁, i₂)` row-major order.
    pub fn to_grid(&self, m: usize) -> [Vec<C64>; 3] {
        assert!(m >= self.side(), "grid too coarse for truncation");
        let plan = fft::plan(m);
        let mut out: [Vec<C64>; 3] = std::array::from_fn(|_| vec![ZERO; m * m * m]);
        for (c, grid) in out.iter_mut().enumerate() {
            fft::scatter(self.component(c), self.n, m, grid);
            plan.synthesize(grid);
        }
        out
    }

    /// Value, gradient `∂_a f_c` (as `[c][a]`), and Hessian `∂_a∂_b f_c`
    /// (as `[c][a][b]`) at a physical point, by direct Fourier summation
    /// over the support.
    pub fn jet_at(&self, x: [f64; 3]) -> Jet {
        let mut jet = Jet::default();
        let s = self.period_scale;
        for idx in 0..self.modes() {
            let c = self.coeff_at(idx);
            if c.iter().all(|v| *v == ZERO) {
                continue;
            }
            let k = self.wave_vector(idx).as_f64();
            let kk = [k[0] / s, k[1] / s, k[2] / s];
            let phase = kk[0] * x[0] + kk[1] * x[1] + kk[2] * x[2];
            let e = C64::from_polar(1.0, phase);
            for comp in 0..3 {
                let v = c[comp] * e;
                jet.value[comp] += v;
                for a in 0..3 {
                    jet.grad[comp][a] += v * C64::new(0.0, kk[a]);
                    for b in 0..3 {
                        jet.hessian[comp][a][b] -= v * (kk[a] * kk[b]);
                    }
                }
            }
        }
        jet
    }

    pub fn value_at(&self, x: [f64; 3]) -> [C64; 3] {
        let s = self.period_scale;
        let mut out = [ZERO; 3];
        for idx in 0..self.modes() {
            let c = self.coeff_at(idx);
            if c.iter().all(|v| *v == ZERO) {
                continue;
            }
            let k = self.wave_vector(idx).as_f64();
            let phase = (k[0] * x[0] + k[1] * x[1] + k[2] * x[2]) / s;
            let e = C64::from_polar(1.0, phase);
            for comp in 0..3 {
                out[comp] += c[comp] * e;
            }
        }
        out
    }
}

/// Pointwise value and first two derivatives of a vector field.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub value: [C64; 3],
    pub grad: [[C64; 3]; 3],
    pub hessian: [[[C64; 3]; 3]; 3],
}

#[inline]
fn shifted(k: [f64; 3], j: [f64; 3]) -> [f64; 3] {
    [k[0] + j[0], k[1] + j[1], k[2] + j[2]]
}

/// The ABC flow at truncation `n`, supported on the six modes `±e₁, ±e₂, ±e₃`.
pub fn make_abc(params: AbcParams, n: usize) -> Result<SpectralField> {
    if n < 1 {
        return Err(Error::InvalidTruncation(n as i64));
    }
    let AbcParams { a, b, c } = params;
    let half = |v: f64| C64::new(v / 2.0, 0.0);
    // sin t = (e^{it} − e^{−it})/(2i): coefficient −i/2 at +1, +i/2 at −1.
    let sin_pos = |v: f64| C64::new(0.0, -v / 2.0);
    let sin_neg = |v: f64| C64::new(0.0, v / 2.0);
    let mut f = SpectralField::zeros(n, FieldKind::Real);
    f.set_coeff(WaveVector::new(0, 0, 1), [sin_pos(a), half(a), ZERO]);
    f.set_coeff(WaveVector::new(0, 0, -1), [sin_neg(a), half(a), ZERO]);
    f.set_coeff(WaveVector::new(0, 1, 0), [half(c), ZERO, sin_pos(c)]);
    f.set_coeff(WaveVector::new(0, -1, 0), [half(c), ZERO, sin_neg(c)]);
    f.set_coeff(WaveVector::new(1, 0, 0), [ZERO, sin_pos(b), half(b)]);
    f.set_coeff(WaveVector::new(-1, 0, 0), [ZERO, sin_neg(b), half(b)]);
    Ok(f)
}

/// `∇×f`: coefficient `i(k/s) × c(k)`.
pub fn curl(f: &SpectralField) -> SpectralField {
    let mut out = f.clone();
    for idx in 0..f.modes() {
        let k = f.wavenumber(idx);
        let ik = [C64::new(0.0, k[0]), C64::new(0.0, k[1]), C64::new(0.0, k[2])];
        out.set_coeff_at(idx, cross3(&ik, &f.coeff_at(idx)));
    }
    out
}

/// `Δf`: coefficient `−|k/s|² c(k)`.
pub fn laplacian(f: &SpectralField) -> SpectralField {
    let mut out = f.clone();
    for idx in 0..f.modes() {
        let k = f.wavenumber(idx);
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        let c = f.coeff_at(idx);
        out.set_coeff_at(idx, [c[0] * -k2, c[1] * -k2, c[2] * -k2]);
    }
    out
}

/// Relative size below which a mean coefficient counts as zero.
const MEAN_FREE_TOL: f64 = 1e-12;

/// `Δ⁻¹f` on mean-free fields.
pub fn inv_laplacian(f: &SpectralField) -> Result<SpectralField> {
    let m = norm3(&mean(f));
    if m > MEAN_FREE_TOL * f.coeff_norm() {
        return Err(Error::NotMeanFree(m));
    }
    let mut out = f.clone();
    for idx in 0..f.modes() {
        let k = f.wavenumber(idx);
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        let c = f.coeff_at(idx);
        if k2 == 0.0 {
            out.set_coeff_at(idx, [ZERO; 3]);
        } else {
            out.set_coeff_at(idx, [c[0] / -k2, c[1] / -k2, c[2] / -k2]);
        }
    }
    Ok(out)
}

pub fn mean(f: &SpectralField) -> [C64; 3] {
    f.coeff(WaveVector::ZERO)
}

/// Pointwise `f × g`, exact up to radius `N_f + N_g`.
pub fn cross(f: &SpectralField, g: &SpectralField) -> SpectralField {
    cross_capped(f, g, f.truncation() + g.truncation())
}

/// Pointwise `f × g` re-truncated to radius `cap`. The transform grid is
/// large enough that every retained coefficient is alias-free.
pub fn cross_capped(f: &SpectralField, g: &SpectralField, cap: usize) -> SpectralField {
    debug_assert!(
        (f.period_scale() - g.period_scale()).abs() <= 1e-14 * f.period_scale(),
        "cross product of fields with different periods"
    );
    let (nf, ng) = (f.truncation(), g.truncation());
    let m = (nf + ng + cap.min(nf + ng) + 1).max(2 * cap + 1).max(2 * nf.max(ng) + 1);
    let plan = fft::plan(m);
    let fg = f.to_grid(m);
    let gg = g.to_grid(m);
    let len = m * m * m;
    let mut prod: [Vec<C64>; 3] = std::array::from_fn(|_| vec![ZERO; len]);
    for p in 0..len {
        let a = [fg[0][p], fg[1][p], fg[2][p]];
        let b = [gg[0][p], gg[1][p], gg[2][p]];
        let c = cross3(&a, &b);
        prod[0][p] = c[0];
        prod[1][p] = c[1];
        prod[2][p] = c[2];
    }
    let mut out = SpectralField::zeros(cap, f.kind().join(g.kind()));
    out.period_scale = f.period_scale;
    for (c, grid) in prod.iter_mut().enumerate() {
        plan.analyze(grid);
        fft::gather(grid, m, cap, out.component_mut(c));
    }
    out
}

/// L² and sup-type norms of a field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormReport {
    /// L² norm over one periodic cell.
    pub l2: f64,
    /// Grid maximum of the ℓ∞-induced (max absolute row sum) norm of `∇f`.
    /// A lower bound on the true sup.
    pub sup_grad_estimate: f64,
    /// Grid maximum of the pointwise spectral norm of `∇f`.
    pub sup_grad_spectral: f64,
    /// Grid maximum of the Euclidean length `|f(x)|`.
    pub sup_abs: f64,
}

impl NormReport {
    /// Upper-bound surrogate for `‖∇f‖_{L∞}` valid in either matrix norm.
    pub fn sup_grad_bound(&self) -> f64 {
        SUP_SAFETY_FACTOR * self.sup_grad_estimate.max(self.sup_grad_spectral)
    }

    pub fn sup_abs_bound(&self) -> f64 {
        SUP_SAFETY_FACTOR * self.sup_abs
    }
}

pub fn norms(f: &SpectralField) -> NormReport {
    norms_with(f, DEFAULT_OVERSAMPLE)
}

/// Norms with grid side `oversample·(2N+1)`.
pub fn norms_with(f: &SpectralField, oversample: usize) -> NormReport {
    let m = oversample.max(1) * f.side();
    let len = m * m * m;
    let plan = fft::plan(m);
    let mut grads: Vec<Vec<C64>> = Vec::with_capacity(9);
    for c in 0..3 {
        for a in 0..3 {
            let mut comp = vec![ZERO; f.modes()];
            for (idx, v) in comp.iter_mut().enumerate() {
                let k = f.wavenumber(idx);
                *v = f.component(c)[idx] * C64::new(0.0, k[a]);
            }
            let mut grid = vec![ZERO; len];
            fft::scatter(&comp, f.truncation(), m, &mut grid);
            plan.synthesize(&mut grid);
            grads.push(grid);
        }
    }
    let values = f.to_grid(m);
    let real = f.kind() == FieldKind::Real;
    let fix = |v: C64| if real { C64::new(v.re, 0.0) } else { v };
    let mut row_max: f64 = 0.0;
    let mut spec_max: f64 = 0.0;
    let mut abs_max: f64 = 0.0;
    for p in 0..len {
        let mut g = [[ZERO; 3]; 3];
        for c in 0..3 {
            for a in 0..3 {
                g[c][a] = fix(grads[3 * c + a][p]);
            }
        }
        for row in &g {
            row_max = row_max.max(row.iter().map(|v| v.norm()).sum());
        }
        spec_max = spec_max.max(spectral_norm3(&g));
        let v = [fix(values[0][p]), fix(values[1][p]), fix(values[2][p])];
        abs_max = abs_max.max(norm3(&v));
    }
    NormReport { l2: f.l2_norm(), sup_grad_estimate: row_max, sup_grad_spectral: spec_max, sup_abs: abs_max }
}

/// Largest singular value of a complex 3×3 matrix.
pub fn spectral_norm3(g: &[[C64; 3]; 3]) -> f64 {
    // B = Gᴴ G is Hermitian positive semidefinite.
    let mut b = [[ZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (0..3).map(|r| g[r][i].conj() * g[r][j]).sum();
        }
    }
    hermitian3_max_eig(&b).max(0.0).sqrt()
}

/// Largest eigenvalue of a Hermitian 3×3 matrix (trigonometric cubic solution).
fn hermitian3_max_eig(b: &[[C64; 3]; 3]) -> f64 {
    let p1 = b[0][1].norm_sqr() + b[0][2].norm_sqr() + b[1][2].norm_sqr();
    let (d0, d1, d2) = (b[0][0].re, b[1][1].re, b[2][2].re);
    if p1 == 0.0 {
        return d0.max(d1).max(d2);
    }
    let q = (d0 + d1 + d2) / 3.0;
    let p2 = (d0 - q).powi(2) + (d1 - q).powi(2) + (d2 - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let c = |i: usize, j: usize| {
        let v = b[i][j] - if i == j { C64::new(q, 0.0) } else { ZERO };
        v / p
    };
    let det = c(0, 0) * (c(1, 1) * c(2, 2) - c(1, 2) * c(2, 1)) - c(0, 1) * (c(1, 0) * c(2, 2) - c(1, 2) * c(2, 0))
        + c(0, 2) * (c(1, 0) * c(2, 1) - c(1, 1) * c(2, 0));
    let r = (det.re / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    q + 2.0 * p * phi.cos()
}

/// `U_n(x) = ζ^{n/2} U(ζ^{−n/2} x)`: amplitude and period both scale by
/// `ζ^{n/2}`, so the gradient sup-norm is unchanged.
pub fn rescale_flow(f: &SpectralField, zeta: f64, n: i64) -> Result<SpectralField> {
    if n < 0 {
        return Err(Error::InvalidScale(n));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::InvalidParameter(format!("zeta = {zeta} must lie in (0, 1)")));
    }
    let factor = zeta.powf(n as f64 / 2.0);
    let mut out = f.scaled(C64::new(factor, 0.0));
    out.period_scale = f.period_scale * factor;
    Ok(out)
}

/// A streamfunction `Ψ` with `∇×Ψ = f` and `∇·Ψ = 0`, namely `−Δ⁻¹(∇×f)`.
/// Requires `f` mean-free and divergence-free.
pub fn streamfunction(f: &SpectralField) -> Result<SpectralField> {
    let w = curl(f);
    let mut psi = inv_laplacian(&w)?;
    psi.scale_mut(C64::new(-1.0, 0.0));
    psi.set_kind(f.kind());
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn close3(a: &[C64; 3], b: &[C64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).norm() <= tol)
    }

    /// Physical-space ABC evaluation, independent of the coefficient table.
    fn abc_point(p: AbcParams, x: [f64; 3]) -> [f64; 3] {
        [
            p.a * x[2].sin() + p.c * x[1].cos(),
            p.b * x[0].sin() + p.a * x[2].cos(),
            p.c * x[1].sin() + p.b * x[0].cos(),
        ]
    }

    /// Convolution by explicit double sum over both supports.
    fn direct_cross(f: &SpectralField, g: &SpectralField, cap: usize) -> SpectralField {
        let mut out = SpectralField::zeros(cap, FieldKind::Complex);
        for i in 0..f.modes() {
            for j in 0..g.modes() {
                let k = f.wave_vector(i) + g.wave_vector(j);
                if let Some(idx) = out.index(k) {
                    let prev = out.coeff_at(idx);
                    let add = cross3(&f.coeff_at(i), &g.coeff_at(j));
                    out.set_coeff_at(idx, [prev[0] + add[0], prev[1] + add[1], prev[2] + add[2]]);
                }
            }
        }
        out
    }

    #[test]
    fn abc_coefficients_follow_positive_exponent_convention() {
        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), 2).unwrap();
        assert!(close3(&u.coeff(WaveVector::new(0, 0, 1)), &[c(0.0, -0.5), c(0.5, 0.0), c(0.0, 0.0)], 0.0));
        assert!(close3(&u.coeff(WaveVector::new(0, 0, -1)), &[c(0.0, 0.5), c(0.5, 0.0), c(0.0, 0.0)], 0.0));
        assert_eq!(u.support().len(), 6);
        assert_eq!(u.reality_defect(), 0.0);
        assert_eq!(norm3(&mean(&u)), 0.0);
        assert_eq!(u.divergence_residual([0.0; 3]), 0.0);
    }

    #[test]
    fn abc_matches_physical_formula_on_grid() {
        let p = AbcParams::new(0.7, -1.3, 2.1);
        let u = make_abc(p, 1).unwrap();
        let m = 8;
        let g = u.to_grid(m);
        for (i0, i1, i2) in [(0, 0, 0), (1, 3, 5), (7, 2, 6)] {
            let x = [i0, i1, i2].map(|i| 2.0 * PI * i as f64 / m as f64);
            let want = abc_point(p, x);
            let at = (i0 * m + i1) * m + i2;
            for comp in 0..3 {
                assert!((g[comp][at] - c(want[comp], 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn abc_rejects_zero_truncation() {
        assert_eq!(make_abc(AbcParams::new(1.0, 1.0, 1.0), 0), Err(Error::InvalidTruncation(0)));
    }

    #[test]
    fn zero_amplitudes_give_zero_field() {
        let u = make_abc(AbcParams::new(0.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn abc_parseval_value() {
        let p = AbcParams::new(1.0, 2.0, 3.0);
        let u = make_abc(p, 2).unwrap();
        let per_volume = u.l2_norm().powi(2) / (2.0 * PI).powi(3);
        assert!((per_volume - 14.0).abs() < 1e-12);
        // Grid average of |U|² from the physical formula.
        let m = 6;
        let mut acc = 0.0;
        for i in 0..m * m * m {
            let x = [i / (m * m), (i / m) % m, i % m].map(|v| 2.0 * PI * v as f64 / m as f64);
            acc += abc_point(p, x).iter().map(|v| v * v).sum::<f64>();
        }
        assert!((acc / (m * m * m) as f64 - 14.0).abs() < 1e-12);
    }

    #[test]
    fn abc_is_beltrami() {
        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), 3).unwrap();
        let w = curl(&u);
        assert!(w.sub(&u).max_abs() < 1e-15);
    }

    #[test]
    fn curl_kills_constants_and_gradients() {
        let v = SpectralField::constant(2, [c(1.0, 0.0), c(-2.0, 0.0), c(0.5, 0.0)]);
        assert_eq!(curl(&v).max_abs(), 0.0);
        let mut g = SpectralField::zeros(2, FieldKind::Complex);
        let k = WaveVector::new(1, -2, 1);
        let kf = k.as_f64();
        g.set_coeff(k, [c(0.0, kf[0]), c(0.0, kf[1]), c(0.0, kf[2])]);
        assert!(curl(&g).max_abs() < 1e-15);
    }

    #[test]
    fn cross_of_field_with_itself_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = SpectralField::random(2, FieldKind::Complex, 2.0, &mut rng);
        assert!(cross(&f, &f).max_abs() < 1e-13);
    }

    #[test]
    fn cross_with_constant_by_hand() {
        let a = 1.7;
        let u = make_abc(AbcParams::new(a, 0.0, 0.0), 1).unwrap();
        let e3 = SpectralField::constant(1, [c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let w = cross(&u, &e3);
        // U × e₃ = (a cos x₃, −a sin x₃, 0).
        let want_pos = [c(a / 2.0, 0.0), c(0.0, a / 2.0), c(0.0, 0.0)];
        let want_neg = [c(a / 2.0, 0.0), c(0.0, -a / 2.0), c(0.0, 0.0)];
        assert!(close3(&w.coeff(WaveVector::new(0, 0, 1)), &want_pos, 1e-15));
        assert!(close3(&w.coeff(WaveVector::new(0, 0, -1)), &want_neg, 1e-15));
    }

    #[test]
    fn dealiased_cross_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n1, n2) in [(1, 1), (2, 3), (4, 2), (3, 4)] {
            let f = SpectralField::random(n1, FieldKind::Complex, 3.0, &mut rng);
            let g = SpectralField::random(n2, FieldKind::Real, 3.0, &mut rng);
            let fast = cross(&f, &g);
            let slow = direct_cross(&f, &g, n1 + n2);
            let scale = f.max_abs() * g.max_abs();
            assert!(fast.sub(&slow).max_abs() < 1e-13 * scale.max(1.0), "n1={n1} n2={n2}");
            let capped = cross_capped(&f, &g, 2);
            let slow2 = direct_cross(&f, &g, 2);
            assert!(capped.sub(&slow2).max_abs() < 1e-13 * scale.max(1.0));
        }
    }

    #[test]
    fn cross_of_real_fields_is_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = SpectralField::random(2, FieldKind::Real, 2.0, &mut rng);
        let g = SpectralField::random(3, FieldKind::Real, 2.0, &mut rng);
        let w = cross(&f, &g);
        assert_eq!(w.kind(), FieldKind::Real);
        assert!(w.reality_defect() < 1e-14);
    }

    #[test]
    fn inverse_laplacian_cases() {
        let mut f = SpectralField::zeros(2, FieldKind::Complex);
        let v = [c(1.0, 2.0), c(-0.5, 0.0), c(0.0, 3.0)];
        f.set_coeff(WaveVector::new(0, 1, 0), v);
        let g = inv_laplacian(&f).unwrap();
        assert!(close3(&g.coeff(WaveVector::new(0, 1, 0)), &v.map(|x| -x), 0.0));

        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), 2).unwrap();
        let w = inv_laplacian(&u).unwrap();
        assert!(w.add(&u).max_abs() < 1e-16);

        let constant = SpectralField::constant(1, [c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        assert!(matches!(inv_laplacian(&constant), Err(Error::NotMeanFree(_))));
    }

    #[test]
    fn mean_cases() {
        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), 2).unwrap();
        assert_eq!(mean(&u), [c(0.0, 0.0); 3]);
        let v = [c(1.0, 0.0), c(2.0, -1.0), c(0.0, 0.5)];
        assert_eq!(mean(&SpectralField::constant(2, v)), v);
    }

    #[test]
    fn abc_gradient_sup_norm() {
        for (a, b, cc) in [(1.0, 1.0, 1.0), (1.0, 2.0, 3.0), (0.5, -1.5, 0.25)] {
            let u = make_abc(AbcParams::new(a, b, cc), 2).unwrap();
            let r = norms(&u);
            let want = f64::max(f64::max(a.abs() + cc.abs(), a.abs() + b.abs()), b.abs() + cc.abs());
            assert!((r.sup_grad_estimate - want).abs() < 1e-12, "{a} {b} {cc}: {}", r.sup_grad_estimate);
            assert!(r.sup_grad_spectral <= r.sup_grad_estimate * 3f64.sqrt() + 1e-12);
            assert!(r.sup_grad_bound() >= want);
        }
    }

    #[test]
    fn zero_field_norms_vanish() {
        let r = norms(&SpectralField::zeros(2, FieldKind::Real));
        assert_eq!((r.l2, r.sup_grad_estimate), (0.0, 0.0));
    }

    #[test]
    fn spectral_norm_of_known_matrices() {
        let z = c(0.0, 0.0);
        let d = [[c(3.0, 0.0), z, z], [z, c(-5.0, 0.0), z], [z, z, c(1.0, 0.0)]];
        assert!((spectral_norm3(&d) - 5.0).abs() < 1e-12);
        // Rank-one u vᴴ has norm |u||v|.
        let u = [c(1.0, 1.0), c(0.0, 2.0), c(-1.0, 0.0)];
        let v = [c(0.5, 0.0), c(0.0, -1.0), c(2.0, 1.0)];
        let m: [[C64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| u[i] * v[j].conj()));
        assert!((spectral_norm3(&m) - norm3(&u) * norm3(&v)).abs() < 1e-12);
    }

    #[test]
    fn grid_parseval_and_reality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = SpectralField::random(3, FieldKind::Real, 2.0, &mut rng);
        let m = 2 * f.side();
        let g = f.to_grid(m);
        let mut energy = 0.0;
        let mut worst_im: f64 = 0.0;
        let mut worst_re: f64 = 0.0;
        for p in 0..m * m * m {
            for comp in &g {
                energy += comp[p].norm_sqr();
                worst_im = worst_im.max(comp[p].im.abs());
                worst_re = worst_re.max(comp[p].re.abs());
            }
        }
        let l2_grid = (energy / (m * m * m) as f64 * f.cell_volume()).sqrt();
        assert!((l2_grid - f.l2_norm()).abs() < 1e-12 * f.l2_norm());
        assert!(worst_im < 1e-12 * worst_re);
    }

    #[test]
    fn solenoidal_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = SpectralField::random(3, FieldKind::Complex, 2.0, &mut rng);
        for j in [[0.0; 3], [0.1, -0.05, 0.02]] {
            let p = f.project_solenoidal(j);
            for idx in 0..p.modes() {
                let cf = p.coeff_at(idx);
                let n = norm3(&cf);
                if n > 0.0 {
                    let kappa = shifted(p.wavenumber(idx), j);
                    let d = (cf[0] * kappa[0] + cf[1] * kappa[1] + cf[2] * kappa[2]).norm();
                    let kn = kappa.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if kn > 0.0 {
                        assert!(d / (n * kn) < 1e-13);
                    }
                }
            }
            // Idempotent.
            assert!(p.project_solenoidal(j).sub(&p).max_abs() < 1e-15);
        }
    }

    #[test]
    fn rescaling() {
        let u = make_abc(AbcParams::new(1.0, 2.0, 0.5), 2).unwrap();
        assert_eq!(rescale_flow(&u, 0.9, 0).unwrap(), u);
        assert_eq!(rescale_flow(&u, 0.9, -1), Err(Error::InvalidScale(-1)));
        let base = norms(&u);
        for n in 1..4 {
            let r = rescale_flow(&u, 0.9, n).unwrap();
            let nr = norms(&r);
            assert!((nr.sup_grad_estimate - base.sup_grad_estimate).abs() < 1e-12);
            let s = 0.9f64.powf(n as f64 / 2.0);
            assert!((r.period_scale() - s).abs() < 1e-15);
            // Amplitude s, cell volume s³.
            assert!((nr.l2 - base.l2 * s * s.powf(1.5)).abs() < 1e-12 * base.l2);
        }
    }

    #[test]
    fn streamfunction_inverts_curl() {
        let u = make_abc(AbcParams::new(1.0, 2.0, 3.0), 2).unwrap();
        let psi = streamfunction(&u).unwrap();
        assert!(psi.sub(&u).max_abs() < 1e-15, "ABC is its own streamfunction");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut v = SpectralField::random(3, FieldKind::Real, 2.0, &mut rng).project_solenoidal([0.0; 3]);
        v.set_coeff(WaveVector::ZERO, [C64::new(0.0, 0.0); 3]);
        let psi = streamfunction(&v).unwrap();
        assert!(curl(&psi).sub(&v).max_abs() < 1e-14);
    }

    #[test]
    fn jet_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = SpectralField::random(2, FieldKind::Real, 2.0, &mut rng).with_period_scale(0.8);
        let x = [0.3, -1.1, 2.0];
        let jet = f.jet_at(x);
        let h = 1e-5;
        for a in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            let (vp, vm) = (f.value_at(xp), f.value_at(xm));
            let (gp, gm) = (f.jet_at(xp).grad, f.jet_at(xm).grad);
            for comp in 0..3 {
                let fd = (vp[comp] - vm[comp]) / (2.0 * h);
                assert!((fd - jet.grad[comp][a]).norm() < 1e-8);
                for b in 0..3 {
                    let fd2 = (gp[comp][b] - gm[comp][b]) / (2.0 * h);
                    assert!((fd2 - jet.hessian[comp][b][a]).norm() < 1e-7);
                }
            }
        }
        assert!(close3(&jet.value, &f.value_at(x), 1e-14));
    }

    fn small_field(seed: u64, n: usize, kind: FieldKind) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectralField::random(n, kind, 2.0, &mut rng)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cross_is_bilinear(seed in 0u64..1000, re in -3.0f64..3.0, im in -3.0f64..3.0) {
            let f = small_field(seed, 2, FieldKind::Complex);
            let g = small_field(seed + 1, 1, FieldKind::Complex);
            let alpha = C64::new(re, im);
            let lhs = cross(&f.scaled(alpha), &g);
            let rhs = cross(&f, &g).scaled(alpha);
            prop_assert!(lhs.sub(&rhs).max_abs() < 1e-13 * (1.0 + alpha.norm()));
        }

        #[test]
        fn laplacian_pair_round_trips(seed in 0u64..1000) {
            let mut f = small_field(seed, 2, FieldKind::Complex);
            f.set_coeff(WaveVector::ZERO, [C64::new(0.0, 0.0); 3]);
            let back = inv_laplacian(&laplacian(&f)).unwrap();
            prop_assert!(back.sub(&f).max_abs() < 1e-15);
        }

        #[test]
        fn mean_is_additive(a in 0u64..1000, b in 0u64..1000) {
            let f = small_field(a, 2, FieldKind::Complex);
            let g = small_field(b, 2, FieldKind::Complex);
            let lhs = mean(&f.add(&g));
            let (mf, mg) = (mean(&f), mean(&g));
            prop_assert!(close3(&lhs, &[mf[0] + mg[0], mf[1] + mg[1], mf[2] + mg[2]], 1e-15));
        }

        #[test]
        fn curl_preserves_reality(seed in 0u64..1000) {
            let f = small_field(seed, 2, FieldKind::Real);
            prop_assert!(curl(&f).reality_defect() < 1e-15);
        }

        #[test]
        fn l2_is_homogeneous(seed in 0u64..1000, alpha in -5.0f64..5.0) {
            let f = small_field(seed, 1, FieldKind::Real);
            let lhs = norms(&f.scaled(C64::new(alpha, 0.0))).l2;
            prop_assert!((lhs - alpha.abs() * f.l2_norm()).abs() < 1e-12 * (1.0 + lhs));
        }
    }
}
