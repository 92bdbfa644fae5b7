//! Dense and matrix-free linear algebra helpers on complex vectors.

use crate::error::{Error, Result};
use crate::C64;
use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Col, Mat, MatRef};
use rand::Rng;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Conjugate-linear inner product `Σ conj(a)·b`.
pub fn vdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn vnorm(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// `y += alpha·x`.
pub fn vaxpy(y: &mut [C64], alpha: C64, x: &[C64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

pub fn vscale(y: &mut [C64], alpha: C64) {
    for v in y.iter_mut() {
        *v *= alpha;
    }
}

pub fn vsub(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Random complex vector with entries uniform in the unit square.
pub fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<C64> {
    (0..n)
        .map(|_| C64::new(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0))
        .collect()
}

pub fn matvec(a: MatRef<'_, C64>, x: &[C64]) -> Vec<C64> {
    let xc = Col::from_fn(x.len(), |i| x[i]);
    let y = a * &xc;
    (0..a.nrows()).map(|i| y[i]).collect()
}

/// Eigenvalues of a general complex matrix.
pub fn eigenvalues(a: MatRef<'_, C64>) -> Result<Vec<C64>> {
    a.eigenvalues().map_err(|e| Error::EigsFailed { iterations: 0, reason: format!("{e:?}") })
}

/// Full eigen-decomposition `(values, vectors)` with vectors as columns.
pub fn eigen(a: MatRef<'_, C64>) -> Result<(Vec<C64>, Mat<C64>)> {
    let e = a.eigen().map_err(|e| Error::EigsFailed { iterations: 0, reason: format!("{e:?}") })?;
    let s = e.S();
    let vals = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((vals, e.U().to_owned()))
}

pub fn singular_values(a: MatRef<'_, C64>) -> Result<Vec<f64>> {
    a.singular_values().map_err(|e| Error::SolverFailure(format!("svd: {e:?}")))
}

/// LU factorization with partial pivoting, solving against `A` and `Aᴴ`.
pub struct DenseLu {
    lu: PartialPivLu<C64>,
    n: usize,
}

impl DenseLu {
    pub fn new(a: MatRef<'_, C64>) -> Result<Self> {
        let lu = a.partial_piv_lu();
        let out = DenseLu { lu, n: a.nrows() };
        // A numerically singular factor shows up as non-finite solves.
        let probe: Vec<C64> = (0..out.n).map(|i| C64::new(1.0 + (i % 7) as f64, 0.5)).collect();
        if out.solve(&probe).iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::SolverFailure("singular matrix".into()));
        }
        Ok(out)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let mut x = Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(x.as_mut());
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    /// Solves `Aᴴ x = b`.
    pub fn solve_adjoint(&self, b: &[C64]) -> Vec<C64> {
        let mut x = Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_adjoint_in_place(x.as_mut());
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    /// Solves against every column of `b`.
    pub fn solve_block(&self, b: MatRef<'_, C64>) -> Mat<C64> {
        let mut x = b.to_owned();
        self.lu.solve_in_place(x.as_mut());
        x
    }
}

/// Outcome of a restarted GMRES solve.
#[derive(Clone, Debug)]
pub struct GmresOutcome {
    pub x: Vec<C64>,
    pub relative_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Right-preconditioned restarted GMRES for `A x = b`. `precond` applies an
/// approximate inverse in place.
pub fn gmres(
    apply: &dyn Fn(&[C64]) -> Vec<C64>,
    precond: &dyn Fn(&mut [C64]),
    b: &[C64],
    x0: Option<&[C64]>,
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> GmresOutcome {
    let n = b.len();
    let bnorm = vnorm(b);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![ZERO; n]);
    if bnorm == 0.0 {
        return GmresOutcome { x: vec![ZERO; n], relative_residual: 0.0, iterations: 0, converged: true };
    }
    let restart = restart.max(1);
    let mut iterations = 0;
    loop {
        let ax = apply(&x);
        let r = vsub(b, &ax);
        let beta = vnorm(&r);
        if beta <= tol * bnorm || iterations >= max_iter {
            return GmresOutcome { x, relative_residual: beta / bnorm, iterations, converged: beta <= tol * bnorm };
        }
        let mut basis: Vec<Vec<C64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut zs: Vec<Vec<C64>> = Vec::new();
        let mut h = vec![vec![ZERO; restart]; restart + 1];
        let mut cs = vec![0.0f64; restart];
        let mut sn = vec![ZERO; restart];
        let mut g = vec![ZERO; restart + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;
        for k in 0..restart {
            let mut z = basis[k].clone();
            precond(&mut z);
            let mut w = apply(&z);
            zs.push(z);
            for (i, v) in basis.iter().enumerate() {
                let hik = vdot(v, &w);
                h[i][k] = hik;
                vaxpy(&mut w, -hik, v);
            }
            // Second Gram-Schmidt pass for stability.
            for (i, v) in basis.iter().enumerate() {
                let corr = vdot(v, &w);
                h[i][k] += corr;
                vaxpy(&mut w, -corr, v);
            }
            let wn = vnorm(&w);
            h[k + 1][k] = C64::new(wn, 0.0);
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i].conj() * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let (c, s) = givens(h[k][k], h[k + 1][k]);
            cs[k] = c;
            sn[k] = s;
            h[k][k] = c * h[k][k] + s * h[k + 1][k];
            h[k + 1][k] = ZERO;
            g[k + 1] = -s.conj() * g[k];
            g[k] *= c;
            iterations += 1;
            k_used = k + 1;
            if g[k + 1].norm() <= tol * bnorm || wn == 0.0 || iterations >= max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        let mut y = vec![ZERO; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for l in i + 1..k_used {
                acc -= h[i][l] * y[l];
            }
            y[i] = acc / h[i][i];
        }
        for (l, z) in zs.iter().take(k_used).enumerate() {
            vaxpy(&mut x, y[l], z);
        }
    }
}

fn givens(a: C64, b: C64) -> (f64, C64) {
    let an = a.norm();
    if an == 0.0 {
        return (0.0, C64::new(1.0, 0.0));
    }
    let r = (an * an + b.norm_sqr()).sqrt();
    let c = an / r;
    let s = (a / an) * b.conj() / r;
    (c, s)
}

/// Estimate of the 2-norm of a linear map by power iteration on `AᴴA`.
pub fn operator_norm_estimate<R: Rng + ?Sized>(
    apply: &dyn Fn(&[C64]) -> Vec<C64>,
    apply_adjoint: &dyn Fn(&[C64]) -> Vec<C64>,
    n: usize,
    iterations: usize,
    rng: &mut R,
) -> f64 {
    let mut x = random_vector(n, rng);
    let xn = vnorm(&x);
    vscale(&mut x, C64::new(1.0 / xn, 0.0));
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let y = apply(&x);
        let ny = vnorm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let z = apply_adjoint(&y);
        let nz = vnorm(&z);
        if nz == 0.0 {
            return ny;
        }
        let next = nz / ny;
        let converged = (next - estimate).abs() <= 1e-12 * next;
        estimate = next;
        x = z.iter().map(|v| v / nz).collect();
        if converged {
            break;
        }
    }
    estimate
}

/// Orthonormalizes the vectors in place (two passes of modified
/// Gram-Schmidt) and returns how many are kept.
pub fn orthonormalize(vs: &mut Vec<Vec<C64>>, drop_tol: f64) -> usize {
    let mut out: Vec<Vec<C64>> = Vec::with_capacity(vs.len());
    for v in vs.drain(..) {
        let mut w = v;
        let before = vnorm(&w);
        for _ in 0..2 {
            for q in &out {
                let c = vdot(q, &w);
                vaxpy(&mut w, -c, q);
            }
        }
        let nw = vnorm(&w);
        if nw > drop_tol * before.max(f64::MIN_POSITIVE) {
            vscale(&mut w, C64::new(1.0 / nw, 0.0));
            out.push(w);
        }
    }
    let k = out.len();
    *vs = out;
    k
}

/// Assignment of rows to distinct columns minimizing the summed cost.
/// Exhaustive for up to 8 rows, greedy beyond.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    assert!(cols >= rows, "need at least as many columns as rows");
    if rows <= 8 {
        let mut best = (f64::INFINITY, Vec::new());
        let mut current = Vec::with_capacity(rows);
        let mut used = vec![false; cols];
        search(cost, 0, 0.0, &mut current, &mut used, &mut best);
        return best.1;
    }
    let mut used = vec![false; cols];
    cost.iter()
        .map(|row| {
            let (j, _) = row
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("free column");
            used[j] = true;
            j
        })
        .collect()
}

fn search(
    cost: &[Vec<f64>],
    row: usize,
    acc: f64,
    current: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut (f64, Vec<usize>),
) {
    if acc >= best.0 {
        return;
    }
    if row == cost.len() {
        *best = (acc, current.clone());
        return;
    }
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            current.push(j);
            search(cost, row + 1, acc + cost[row][j], current, used, best);
            current.pop();
            used[j] = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, seed: u64) -> Mat<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_vector(n * n, &mut rng);
        Mat::from_fn(n, n, |i, j| v[i * n + j] + if i == j { C64::new(n as f64, 0.0) } else { ZERO })
    }

    #[test]
    fn lu_solves_and_adjoint_solves() {
        let a = random_matrix(12, 1);
        let lu = DenseLu::new(a.as_ref()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_vector(12, &mut rng);
        let x = lu.solve(&b);
        assert!(vnorm(&vsub(&matvec(a.as_ref(), &x), &b)) < 1e-12);
        let y = lu.solve_adjoint(&b);
        let ah = a.adjoint().to_owned();
        assert!(vnorm(&vsub(&matvec(ah.as_ref(), &y), &b)) < 1e-12);
    }

    #[test]
    fn gmres_matches_direct_solve() {
        let a = random_matrix(40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_vector(40, &mut rng);
        let apply = |x: &[C64]| matvec(a.as_ref(), x);
        let diag: Vec<C64> = (0..40).map(|i| a[(i, i)]).collect();
        let pre = |x: &mut [C64]| {
            for (v, d) in x.iter_mut().zip(&diag) {
                *v /= d;
            }
        };
        let out = gmres(&apply, &pre, &b, None, 1e-13, 15, 500);
        assert!(out.converged, "residual {}", out.relative_residual);
        let direct = DenseLu::new(a.as_ref()).unwrap().solve(&b);
        assert!(vnorm(&vsub(&out.x, &direct)) < 1e-10 * vnorm(&direct));
    }

    #[test]
    fn power_iteration_matches_largest_singular_value() {
        let a = random_matrix(20, 5);
        let apply = |x: &[C64]| matvec(a.as_ref(), x);
        let ah = a.adjoint().to_owned();
        let apply_h = |x: &[C64]| matvec(ah.as_ref(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let est = operator_norm_estimate(&apply, &apply_h, 20, 500, &mut rng);
        let sv = singular_values(a.as_ref()).unwrap();
        let top = sv.iter().cloned().fold(0.0, f64::max);
        assert!((est - top).abs() < 1e-8 * top, "{est} vs {top}");
    }

    #[test]
    fn assignment_finds_optimum() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(min_cost_assignment(&cost), vec![1, 0, 2]);
    }

    #[test]
    fn orthonormalize_drops_dependent_vectors() {
        let mut vs = vec![
            vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0), ZERO],
            vec![C64::new(2.0, 0.0), C64::new(2.0, 0.0), ZERO],
            vec![ZERO, C64::new(0.0, 1.0), C64::new(1.0, 0.0)],
        ];
        assert_eq!(orthonormalize(&mut vs, 1e-12), 2);
        assert!(vdot(&vs[0], &vs[1]).norm() < 1e-15);
    }
}
