use crate::error::{Error, Result};
use crate::field::{cross3, cross_capped, mean, norm3, FieldKind, SpectralField, WaveVector};
use crate::C64;
use faer::Mat;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Default memory cap for dense assemblies (bytes).
pub const DEFAULT_DENSE_CAP: usize = 1 << 31;

/// The flow, Bloch shift, diffusivity, and truncation that define the
/// discretized `L(j, ε)H = (∇+ij)×(U×H) + ε(∇+ij)²H`.
#[derive(Clone, Debug)]
pub struct ModalOperatorSpec {
    pub u: SpectralField,
    pub j: [f64; 3],
    pub eps: f64,
    pub n: usize,
}

impl ModalOperatorSpec {
    /// Validates `ε > 0`, a 2π-periodic flow, and a mean-free,
    /// divergence-free `U`.
    pub fn new(u: SpectralField, j: [f64; 3], eps: f64, n: usize) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps = {eps} must be positive")));
        }
        if (u.period_scale() - 1.0).abs() > 1e-14 {
            return Err(Error::InvalidParameter("modal operator needs a 2π-periodic flow".into()));
        }
        if j.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("j must be finite".into()));
        }
        let scale = u.coeff_norm().max(f64::MIN_POSITIVE);
        if norm3(&mean(&u)) > 1e-12 * scale {
            return Err(Error::NotMeanFree(norm3(&mean(&u))));
        }
        if u.divergence_residual([0.0; 3]) > 1e-12 * scale * u.truncation().max(1) as f64 {
            return Err(Error::InvalidParameter("flow is not divergence-free".into()));
        }
        Ok(ModalOperatorSpec { u, j, eps, n })
    }

    pub fn with_j(&self, j: [f64; 3]) -> Self {
        ModalOperatorSpec { j, ..self.clone() }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        ModalOperatorSpec { eps, ..self.clone() }
    }

    pub fn side(&self) -> usize {
        2 * self.n + 1
    }

    pub fn modes(&self) -> usize {
        let s = self.side();
        s * s * s
    }

    /// Number of unknowns `3(2N+1)³`.
    pub fn order(&self) -> usize {
        3 * self.modes()
    }

    /// Zero field at the operator's truncation.
    pub fn zero_field(&self) -> SpectralField {
        SpectralField::zeros(self.n, FieldKind::Complex)
    }

    pub fn field_from(&self, coeffs: Vec<C64>) -> SpectralField {
        SpectralField::from_vec(self.n, FieldKind::Complex, coeffs).expect("coefficient count")
    }
}

/// Matrix-free action of `L(j, ε)` through a dealiased transform product.
pub fn apply_l(spec: &ModalOperatorSpec, h: &SpectralField) -> SpectralField {
    let h = if h.truncation() == spec.n { h.clone() } else { h.resized(spec.n) };
    let w = cross_capped(&trimmed(&spec.u), &h, spec.n);
    let mut out = SpectralField::zeros(spec.n, FieldKind::Complex);
    for idx in 0..out.modes() {
        let kj = shift(out.wave_vector(idx), spec.j);
        let ikj = [C64::new(0.0, kj[0]), C64::new(0.0, kj[1]), C64::new(0.0, kj[2])];
        let adv = cross3(&ikj, &w.coeff_at(idx));
        let d = -spec.eps * (kj[0] * kj[0] + kj[1] * kj[1] + kj[2] * kj[2]);
        let c = h.coeff_at(idx);
        out.set_coeff_at(idx, [adv[0] + c[0] * d, adv[1] + c[1] * d, adv[2] + c[2] * d]);
    }
    out
}

/// `U` re-truncated to its support radius, so transform grids stay small.
fn trimmed(u: &SpectralField) -> SpectralField {
    let r = u.support_radius().max(1);
    if r < u.truncation() {
        u.resized(r)
    } else {
        u.clone()
    }
}

#[inline]
fn shift(k: WaveVector, j: [f64; 3]) -> [f64; 3] {
    let k = k.as_f64();
    [k[0] + j[0], k[1] + j[1], k[2] + j[2]]
}

/// Matrix of `a × (·)`.
fn cross_matrix(a: &[C64; 3]) -> [[C64; 3]; 3] {
    [[ZERO, -a[2], a[1]], [a[2], ZERO, -a[0]], [-a[1], a[0], ZERO]]
}

fn mat3_mul(a: &[[C64; 3]; 3], b: &[[C64; 3]; 3]) -> [[C64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|l| a[i][l] * b[l][j]).sum()))
}

/// Galerkin matrix of `L(j, ε)`, assembled by direct block summation over the
/// support of `U`. Rows and columns follow the field storage order.
pub fn assemble_dense(spec: &ModalOperatorSpec) -> Result<Mat<C64>> {
    assemble_dense_capped(spec, DEFAULT_DENSE_CAP)
}

pub fn assemble_dense_capped(spec: &ModalOperatorSpec, cap_bytes: usize) -> Result<Mat<C64>> {
    check_cap(spec.order(), cap_bytes)?;
    Ok(assemble_blocks(&spec.u, spec.j, spec.eps, spec.n, Part::Full))
}

/// The `|j|`-coefficient `L₁` of `L(j, 1) = L₀ + |j|L₁ − |j|²` for unit
/// direction `dir`: `L₁H = i ĵ×(U×H) + 2i ĵ·∇H`.
pub fn assemble_dense_first_order(u: &SpectralField, dir: [f64; 3], n: usize) -> Result<Mat<C64>> {
    check_cap(3 * (2 * n + 1).pow(3), DEFAULT_DENSE_CAP)?;
    Ok(assemble_blocks(u, dir, 0.0, n, Part::FirstOrder))
}

fn check_cap(order: usize, cap: usize) -> Result<()> {
    let bytes = order.saturating_mul(order).saturating_mul(std::mem::size_of::<C64>());
    if bytes > cap {
        return Err(Error::TooLarge { order, bytes, cap });
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum Part {
    Full,
    FirstOrder,
}

pub(crate) fn assemble_blocks(u: &SpectralField, j: [f64; 3], eps: f64, n: usize, part: Part) -> Mat<C64> {
    let template = SpectralField::zeros(n, FieldKind::Complex);
    let modes = template.modes();
    let order = 3 * modes;
    let mut a = Mat::<C64>::zeros(order, order);
    let support = u.support();
    for row in 0..modes {
        let k = template.wave_vector(row);
        let kf = k.as_f64();
        // Advective prefactor: i(k+j) for L, i ĵ for L₁.
        let pref = match part {
            Part::Full => shift(k, j),
            Part::FirstOrder => j,
        };
        let ip = cross_matrix(&[C64::new(0.0, pref[0]), C64::new(0.0, pref[1]), C64::new(0.0, pref[2])]);
        for (q, uq) in &support {
            let Some(col) = template.index(k - *q) else { continue };
            let blk = mat3_mul(&ip, &cross_matrix(uq));
            for r in 0..3 {
                for s in 0..3 {
                    a[(r * modes + row, s * modes + col)] += blk[r][s];
                }
            }
        }
        let d = match part {
            Part::Full => {
                let kj = shift(k, j);
                -eps * (kj[0] * kj[0] + kj[1] * kj[1] + kj[2] * kj[2])
            }
            // 2i ĵ·(ik) = −2 ĵ·k.
            Part::FirstOrder => -2.0 * (j[0] * kf[0] + j[1] * kf[1] + j[2] * kf[2]),
        };
        for r in 0..3 {
            a[(r * modes + row, r * modes + row)] += C64::new(d, 0.0);
        }
    }
    a
}

/// Sparse-convolution form of `L(j, ε)` over the support of `U`; exact and
/// much cheaper than transforms when `U` has few modes. Used by the time
/// stepper and the iterative solvers.
#[derive(Clone, Debug)]
pub struct ModalOperator {
    spec: ModalOperatorSpec,
    /// Per support mode: offset in lexicographic index and the matrix `Û(q)×`.
    terms: Vec<(WaveVector, [[C64; 3]; 3])>,
    kj: Vec<[f64; 3]>,
    diffusion: Vec<f64>,
    template: SpectralField,
}

impl ModalOperator {
    pub fn new(spec: &ModalOperatorSpec) -> Self {
        let template = spec.zero_field();
        let terms = spec.u.support().into_iter().map(|(q, uq)| (q, cross_matrix(&uq))).collect();
        let kj: Vec<[f64; 3]> = (0..template.modes()).map(|i| shift(template.wave_vector(i), spec.j)).collect();
        let diffusion = kj.iter().map(|v| -spec.eps * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).collect();
        ModalOperator { spec: spec.clone(), terms, kj, diffusion, template }
    }

    pub fn spec(&self) -> &ModalOperatorSpec {
        &self.spec
    }

    pub fn order(&self) -> usize {
        self.spec.order()
    }

    /// Diagonal `−ε|k+j|²` per mode (shared by the three components).
    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    /// Advective part `P_N[(∇+ij)×(U×H)]`.
    pub fn apply_advective(&self, h: &[C64]) -> Vec<C64> {
        let t = &self.template;
        let modes = t.modes();
        let side = t.side() as i64;
        let n = self.spec.n as i64;
        let mut out = vec![ZERO; 3 * modes];
        for idx in 0..modes {
            let k = t.wave_vector(idx);
            let mut w = [ZERO; 3];
            for (q, m) in &self.terms {
                let s = k - *q;
                if s.radius() > n {
                    continue;
                }
                let col = (((s.0[0] + n) * side + (s.0[1] + n)) * side + (s.0[2] + n)) as usize;
                let hv = [h[col], h[modes + col], h[2 * modes + col]];
                for r in 0..3 {
                    w[r] += m[r][0] * hv[0] + m[r][1] * hv[1] + m[r][2] * hv[2];
                }
            }
            let kj = self.kj[idx];
            let ikj = [C64::new(0.0, kj[0]), C64::new(0.0, kj[1]), C64::new(0.0, kj[2])];
            let v = cross3(&ikj, &w);
            out[idx] = v[0];
            out[modes + idx] = v[1];
            out[2 * modes + idx] = v[2];
        }
        out
    }

    /// Full action of `L(j, ε)`.
    pub fn apply(&self, h: &[C64]) -> Vec<C64> {
        let modes = self.template.modes();
        let mut out = self.apply_advective(h);
        for c in 0..3 {
            for idx in 0..modes {
                out[c * modes + idx] += h[c * modes + idx] * self.diffusion[idx];
            }
        }
        out
    }

    pub fn apply_field(&self, h: &SpectralField) -> SpectralField {
        self.spec.field_from(self.apply(h.as_slice()))
    }
}
