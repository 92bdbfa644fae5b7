use super::operator::{apply_l, assemble_dense, ModalOperator, ModalOperatorSpec};
use crate::alpha::{solve_cell_problem, CellConfig};
use crate::error::{Error, Result};
use crate::field::{mean, SpectralField, WaveVector};
use crate::linalg::{eigen, gmres, orthonormalize, random_vector, vdot, vnorm};
use crate::C64;
use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Eigenvalue with unit-norm, phase-fixed eigenvector.
#[derive(Clone, Debug)]
pub struct EigPair {
    pub p: C64,
    pub h: SpectralField,
    /// `‖L H − p H‖ / ‖H‖`, measured through the transform route.
    pub residual: f64,
    /// `max_k |(k+j)·Ĥ(k)|`.
    pub modal_div_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigMethod {
    Dense,
    Krylov,
}

impl std::str::FromStr for EigMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(EigMethod::Dense),
            "krylov" => Ok(EigMethod::Krylov),
            other => Err(Error::InvalidParameter(format!("unknown eigensolver {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EigConfig {
    pub method: EigMethod,
    /// Relative residual accepted for a returned pair.
    pub tol: f64,
    /// Shift for shift-invert; defaults to an upper bound on the real parts.
    pub shift: Option<f64>,
    /// Extra Ritz vectors carried by the Krylov path.
    pub guard: usize,
    pub max_iterations: usize,
    pub inner_tol: f64,
    /// Largest order solved densely when the Krylov path fails.
    pub dense_fallback_order: usize,
    pub seed: u64,
}

impl Default for EigConfig {
    fn default() -> Self {
        EigConfig {
            method: EigMethod::Dense,
            tol: 1e-8,
            shift: None,
            guard: 6,
            max_iterations: 200,
            inner_tol: 1e-12,
            dense_fallback_order: 3 * 9 * 9 * 9,
            seed: 17,
        }
    }
}

/// Sorts by descending real part, ties (within `tie`) by descending
/// imaginary part.
pub fn sort_spectrum(vals: &mut [C64], tie: f64) {
    vals.sort_by(|p, q| cmp_desc(*p, *q, tie));
}

fn cmp_desc(p: C64, q: C64, tie: f64) -> std::cmp::Ordering {
    if (p.re - q.re).abs() > tie {
        q.re.total_cmp(&p.re)
    } else {
        q.im.total_cmp(&p.im)
    }
}

/// All eigenvalues of the dense Galerkin matrix, sorted.
pub fn dense_spectrum(spec: &ModalOperatorSpec) -> Result<Vec<C64>> {
    let a = assemble_dense(spec)?;
    let mut vals = crate::linalg::eigenvalues(a.as_ref())?;
    let tie = 1e-12 * vals.iter().map(|v| v.norm()).fold(1.0, f64::max);
    sort_spectrum(&mut vals, tie);
    Ok(vals)
}

/// Unit `L²` normalization with the phase rule: the largest-modulus
/// component of the mean made real positive, falling back to the
/// largest-modulus coefficient when the mean is negligible.
pub fn normalize_eigvec(h: &mut SpectralField) {
    let n = h.l2_norm();
    if n == 0.0 {
        return;
    }
    let m = mean(h);
    let mn = m.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let anchor = if mn > 1e-8 * h.coeff_norm() {
        let mut best = 0;
        for i in 1..3 {
            if m[i].norm() > m[best].norm() * (1.0 + 1e-12) {
                best = i;
            }
        }
        m[best]
    } else {
        let s = h.as_slice();
        let mut best = 0;
        for i in 1..s.len() {
            if s[i].norm() > s[best].norm() * (1.0 + 1e-12) {
                best = i;
            }
        }
        s[best]
    };
    let phase = anchor.conj() / anchor.norm();
    h.scale_mut(phase / n);
}

pub fn modal_div_residual(h: &SpectralField, j: [f64; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..h.modes() {
        let k = h.wave_vector(idx).as_f64();
        let c = h.coeff_at(idx);
        let d = c[0] * (k[0] + j[0]) + c[1] * (k[1] + j[1]) + c[2] * (k[2] + j[2]);
        worst = worst.max(d.norm());
    }
    worst
}

/// Assembles an [`EigPair`] from a raw vector, measuring its residual.
pub fn make_pair(spec: &ModalOperatorSpec, p: C64, coeffs: Vec<C64>) -> EigPair {
    let mut h = spec.field_from(coeffs);
    normalize_eigvec(&mut h);
    let lh = apply_l(spec, &h);
    let residual = lh.sub(&h.scaled(p)).l2_norm() / h.l2_norm().max(f64::MIN_POSITIVE);
    let modal_div_residual = modal_div_residual(&h, spec.j);
    EigPair { p, h, residual, modal_div_residual }
}

/// The `count` eigenpairs of largest real part.
pub fn leading_eigs(spec: &ModalOperatorSpec, count: usize, cfg: &EigConfig) -> Result<Vec<EigPair>> {
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    if count > spec.order() {
        return Err(Error::InvalidParameter(format!("count {count} exceeds order {}", spec.order())));
    }
    let pairs = match cfg.method {
        EigMethod::Dense => dense_eigs(spec, count)?,
        EigMethod::Krylov => match krylov_eigs(spec, count, cfg) {
            Ok(p) => p,
            Err(e) if spec.order() <= cfg.dense_fallback_order => {
                let _ = e;
                dense_eigs(spec, count)?
            }
            Err(e) => return Err(e),
        },
    };
    if let Some(bad) = pairs.iter().find(|p| !(p.residual <= cfg.tol)) {
        return Err(Error::EigsFailed {
            iterations: 0,
            reason: format!("eigenpair p = {} has residual {:.3e} above {:.1e}", bad.p, bad.residual, cfg.tol),
        });
    }
    Ok(pairs)
}

fn dense_eigs(spec: &ModalOperatorSpec, count: usize) -> Result<Vec<EigPair>> {
    let a = assemble_dense(spec)?;
    let (vals, vecs) = eigen(a.as_ref())?;
    let tie = 1e-12 * vals.iter().map(|v| v.norm()).fold(1.0, f64::max);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&x, &y| cmp_desc(vals[x], vals[y], tie));
    Ok(order[..count]
        .iter()
        .map(|&i| make_pair(spec, vals[i], (0..spec.order()).map(|r| vecs[(r, i)]).collect()))
        .collect())
}

/// Upper bound on the real parts of the spectrum: the numerical range of
/// the advective part is bounded by `½‖∇U‖`-type terms, estimated here
/// from the coefficient sum of `|k||Û(k)|`.
fn default_shift(spec: &ModalOperatorSpec) -> f64 {
    let grad: f64 = spec
        .u
        .support()
        .iter()
        .map(|(k, c)| {
            let kn = (k.norm_sq() as f64).sqrt();
            kn * crate::field::norm3(c)
        })
        .sum();
    grad.max(1e-3) * 1.5
}

/// Subspace iteration on `(L − σ)⁻¹` with Rayleigh-Ritz extraction; inner
/// solves by GMRES preconditioned with the inverse diffusion diagonal.
fn krylov_eigs(spec: &ModalOperatorSpec, count: usize, cfg: &EigConfig) -> Result<Vec<EigPair>> {
    let op = ModalOperator::new(spec);
    let n = op.order();
    let modes = spec.modes();
    let block = (count + cfg.guard).min(n);
    let sigma = cfg.shift.unwrap_or_else(|| default_shift(spec));
    let diag: Vec<f64> = op.diffusion().iter().map(|d| d - sigma).collect();
    let apply_shifted = |x: &[C64]| {
        let mut y = op.apply(x);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi -= xi * sigma;
        }
        y
    };
    let precond = |x: &mut [C64]| {
        for (i, v) in x.iter_mut().enumerate() {
            *v /= diag[i % modes];
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut basis: Vec<Vec<C64>> = (0..block).map(|_| random_vector(n, &mut rng)).collect();
    orthonormalize(&mut basis, 1e-12);
    let mut last_reason = String::new();
    for it in 1..=cfg.max_iterations {
        let mut next = Vec::with_capacity(basis.len());
        for v in &basis {
            let out = gmres(&apply_shifted, &precond, v, None, cfg.inner_tol, 60, 4000);
            if !out.converged && out.relative_residual > 1e-8 {
                return Err(Error::EigsFailed {
                    iterations: it,
                    reason: format!("inner solve stalled at residual {:.3e}", out.relative_residual),
                });
            }
            next.push(out.x);
        }
        orthonormalize(&mut next, 1e-12);
        if next.len() < count {
            return Err(Error::EigsFailed { iterations: it, reason: "subspace collapsed".into() });
        }
        basis = next;
        // Rayleigh-Ritz with L on the current subspace.
        let images: Vec<Vec<C64>> = basis.iter().map(|v| op.apply(v)).collect();
        let b = basis.len();
        let proj = Mat::<C64>::from_fn(b, b, |r, c| vdot(&basis[r], &images[c]));
        let (vals, vecs) = eigen(proj.as_ref())?;
        let tie = 1e-12 * vals.iter().map(|v| v.norm()).fold(1.0, f64::max);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| cmp_desc(vals[x], vals[y], tie));
        let ritz: Vec<(C64, Vec<C64>)> = order
            .iter()
            .map(|&i| {
                let mut v = vec![C64::new(0.0, 0.0); n];
                for (k, bv) in basis.iter().enumerate() {
                    let w = vecs[(k, i)];
                    for (vi, bi) in v.iter_mut().zip(bv) {
                        *vi += w * bi;
                    }
                }
                (vals[i], v)
            })
            .collect();
        let residual_of = |(p, v): &(C64, Vec<C64>)| {
            let lv = op.apply(v);
            let r: Vec<C64> = lv.iter().zip(v).map(|(a, b)| a - b * p).collect();
            vnorm(&r) / vnorm(v)
        };
        let worst = ritz[..count].iter().map(residual_of).fold(0.0, f64::max);
        if worst <= cfg.tol * 0.1 {
            return Ok(ritz
                .into_iter()
                .take(count)
                .map(|(p, v)| make_pair(spec, p, v))
                .collect());
        }
        last_reason = format!("worst Ritz residual {worst:.3e}");
        // Continue from the Ritz vectors, which are already ordered.
        basis = ritz.into_iter().map(|(_, v)| v).collect();
        orthonormalize(&mut basis, 1e-12);
    }
    Err(Error::EigsFailed { iterations: cfg.max_iterations, reason: last_reason })
}

/// Basis `e_ℓ + S(e_ℓ)` of the kernel of `L₀`, at the truncation of the
/// cell solve.
pub fn kernel_basis_l0(u: &SpectralField, cfg: &CellConfig) -> Result<[SpectralField; 3]> {
    let mut out = Vec::with_capacity(3);
    for l in 0..3 {
        let mut v = [C64::new(0.0, 0.0); 3];
        v[l] = C64::new(1.0, 0.0);
        let s = solve_cell_problem(u, v, cfg)?;
        let mut f = s.field;
        let mut c = f.coeff(WaveVector::ZERO);
        c[l] += C64::new(1.0, 0.0);
        f.set_coeff(WaveVector::ZERO, c);
        out.push(f);
    }
    Ok(out.try_into().expect("three fields"))
}
