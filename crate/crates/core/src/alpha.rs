//! Cell problem, alpha-matrix, and alpha-instability certification.

use crate::error::{Error, Result};
use crate::field::{
    cross, cross3, cross_capped, curl, inv_laplacian, laplacian, mean, norm3, norms, AbcParams, FieldKind,
    SpectralField, WaveVector,
};
use crate::linalg::{eigen, operator_norm_estimate, DenseLu};
use crate::modal::operator::{assemble_blocks, Part};
use crate::modal::DEFAULT_DENSE_CAP;
use crate::C64;
use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellMethod {
    Direct,
    Neumann,
}

impl std::str::FromStr for CellMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(CellMethod::Direct),
            "neumann" => Ok(CellMethod::Neumann),
            other => Err(Error::InvalidParameter(format!("unknown cell method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellConfig {
    pub method: CellMethod,
    pub tol: f64,
    /// Truncation of the unknown; defaults to that of `U`.
    pub truncation: Option<usize>,
    pub max_terms: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig { method: CellMethod::Direct, tol: 1e-12, truncation: None, max_terms: 2000, power_iterations: 60, seed: 7 }
    }
}

impl CellConfig {
    pub fn neumann(tol: f64) -> Self {
        CellConfig { method: CellMethod::Neumann, tol, ..Default::default() }
    }

    pub fn direct(tol: f64) -> Self {
        CellConfig { method: CellMethod::Direct, tol, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
pub struct CellSolution {
    pub input_v: [C64; 3],
    pub field: SpectralField,
    /// `‖L₀S − ∇×(v×U)‖ / ‖∇×(v×U)‖`, re-measured after the solve.
    pub residual: f64,
    /// Measured `‖∇×(U×Δ⁻¹·)‖` (Neumann path only).
    pub contraction: Option<f64>,
    /// Series terms summed (Neumann) or 1 (direct).
    pub terms: usize,
}

/// `∇×(v×U)` at truncation `n`.
pub fn cell_rhs(u: &SpectralField, v: [C64; 3], n: usize) -> SpectralField {
    let vc = SpectralField::constant(0, v);
    curl(&cross_capped(&vc, u, n))
}

/// `L₀S = P_N ∇×(U×S) + ΔS` at the truncation of `s`.
pub fn apply_cell_operator(u: &SpectralField, s: &SpectralField) -> SpectralField {
    let adv = curl(&cross_capped(u, s, s.truncation()));
    adv.add(&laplacian(s))
}

/// `Δ⁻¹` with the mean mode sent to zero.
fn inv_laplacian_projected(f: &SpectralField) -> SpectralField {
    let mut g = f.clone();
    g.set_coeff(WaveVector::ZERO, [ZERO; 3]);
    inv_laplacian(&g).expect("mean removed")
}

/// `K W = P_N ∇×(U × Δ⁻¹W)`, the map whose Neumann series inverts `L₀Δ⁻¹`.
fn neumann_map(u: &SpectralField, w: &SpectralField) -> SpectralField {
    curl(&cross_capped(u, &inv_laplacian_projected(w), w.truncation()))
}

/// Adjoint of [`neumann_map`] in the coefficient inner product:
/// `K*Y = Δ⁻¹ P_N[(∇×Y) × conj(U)]`.
fn neumann_map_adjoint(u_conj: &SpectralField, y: &SpectralField) -> SpectralField {
    inv_laplacian_projected(&cross_capped(&curl(y), u_conj, y.truncation()))
}

/// Power-iteration estimate of `‖∇×(U×Δ⁻¹·)‖` on mean-free fields at
/// truncation `n`.
pub fn neumann_contraction(u: &SpectralField, n: usize, iterations: usize, seed: u64) -> f64 {
    let template = SpectralField::zeros(n, FieldKind::Complex);
    let u_conj = u.conj_field();
    let wrap = |x: &[C64]| {
        let mut f = template.like(x.to_vec());
        f.set_coeff(WaveVector::ZERO, [ZERO; 3]);
        f
    };
    let apply = |x: &[C64]| neumann_map(u, &wrap(x)).into_vec();
    let adjoint = |x: &[C64]| {
        let mut r = neumann_map_adjoint(&u_conj, &wrap(x));
        r.set_coeff(WaveVector::ZERO, [ZERO; 3]);
        r.into_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    operator_norm_estimate(&apply, &adjoint, 3 * template.modes(), iterations, &mut rng)
}

fn check_flow(u: &SpectralField) -> Result<()> {
    if (u.period_scale() - 1.0).abs() > 1e-14 {
        return Err(Error::InvalidParameter("cell problem needs a 2π-periodic flow".into()));
    }
    let scale = u.coeff_norm();
    let m = norm3(&mean(u));
    if m > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotMeanFree(m));
    }
    let div = u.divergence_residual([0.0; 3]);
    if div > 1e-12 * scale * u.truncation().max(1) as f64 {
        return Err(Error::InvalidParameter(format!("flow is not divergence-free (residual {div:.3e})")));
    }
    Ok(())
}

/// Mean-free `S` with `∇×(U×S) + ΔS = ∇×(v×U)`.
pub fn solve_cell_problem(u: &SpectralField, v: [C64; 3], cfg: &CellConfig) -> Result<CellSolution> {
    check_flow(u)?;
    let n = cfg.truncation.unwrap_or(u.truncation()).max(1);
    let rhs = cell_rhs(u, v, n);
    let rhs_norm = rhs.l2_norm();
    if rhs_norm == 0.0 {
        return Ok(CellSolution {
            input_v: v,
            field: SpectralField::zeros(n, FieldKind::Complex),
            residual: 0.0,
            contraction: None,
            terms: 0,
        });
    }
    match cfg.method {
        CellMethod::Direct => {
            let lu = CellLu::new(u, n)?;
            let field = lu.solve(&rhs);
            let residual = apply_cell_operator(u, &field).sub(&rhs).l2_norm() / rhs_norm;
            Ok(CellSolution { input_v: v, field, residual, contraction: None, terms: 1 })
        }
        CellMethod::Neumann => {
            let kappa = neumann_contraction(u, n, cfg.power_iterations, cfg.seed);
            neumann_solve(u, v, rhs, kappa, cfg)
        }
    }
}

fn neumann_solve(u: &SpectralField, v: [C64; 3], rhs: SpectralField, kappa: f64, cfg: &CellConfig) -> Result<CellSolution> {
    if !(kappa < 1.0) {
        return Err(Error::SeriesDiverges { contraction: kappa });
    }
    let rhs_norm = rhs.coeff_norm();
    // Stop once the tail bound |term|·κ/(1−κ) is below the tolerance.
    let stop = cfg.tol * rhs_norm * (1.0 - kappa) * 0.5;
    let mut sum = rhs.clone();
    let mut term = rhs.clone();
    let mut terms = 1;
    while terms < cfg.max_terms {
        term = neumann_map(u, &term).scaled(-ONE);
        sum = sum.add(&term);
        terms += 1;
        if term.coeff_norm() < stop {
            break;
        }
    }
    let field = inv_laplacian_projected(&sum);
    let residual = apply_cell_operator(u, &field).sub(&rhs).l2_norm() / rhs.l2_norm();
    if terms >= cfg.max_terms && residual > cfg.tol {
        return Err(Error::SolverFailure(format!("Neumann series stalled after {terms} terms (residual {residual:.3e})")));
    }
    Ok(CellSolution { input_v: v, field, residual, contraction: Some(kappa), terms })
}

/// Truncated series `Σₖ₌₀ⁿ⁻¹ (−K)ᵏ G`, mapped back by `Δ⁻¹`; the
/// one-term version is the leading small-amplitude approximation.
pub fn neumann_partial(u: &SpectralField, v: [C64; 3], n: usize, terms: usize) -> SpectralField {
    let rhs = cell_rhs(u, v, n);
    let mut sum = SpectralField::zeros(n, FieldKind::Complex);
    let mut term = rhs;
    for t in 0..terms {
        if t > 0 {
            term = neumann_map(u, &term).scaled(-ONE);
        }
        sum = sum.add(&term);
    }
    inv_laplacian_projected(&sum)
}

/// LU factorization of the Galerkin cell operator on the mean-free modes.
struct CellLu {
    lu: DenseLu,
    keep: Vec<usize>,
    n: usize,
}

impl CellLu {
    fn new(u: &SpectralField, n: usize) -> Result<Self> {
        let template = SpectralField::zeros(n, FieldKind::Complex);
        let modes = template.modes();
        let order = 3 * modes;
        let bytes = order * order * 16;
        if bytes > DEFAULT_DENSE_CAP {
            return Err(Error::TooLarge { order, bytes, cap: DEFAULT_DENSE_CAP });
        }
        let full = assemble_blocks(u, [0.0; 3], 1.0, n, Part::Full);
        let zero = template.index(WaveVector::ZERO).expect("zero mode");
        let keep: Vec<usize> = (0..order).filter(|i| i % modes != zero).collect();
        let m = keep.len();
        let reduced = Mat::<C64>::from_fn(m, m, |r, c| full[(keep[r], keep[c])]);
        let lu = DenseLu::new(reduced.as_ref()).map_err(|e| Error::SolverFailure(format!("cell operator: {e}")))?;
        Ok(CellLu { lu, keep, n })
    }

    fn solve(&self, rhs: &SpectralField) -> SpectralField {
        let b: Vec<C64> = self.keep.iter().map(|&i| rhs.as_slice()[i]).collect();
        let x = self.lu.solve(&b);
        let mut out = SpectralField::zeros(self.n, FieldKind::Complex);
        let slice = out.as_mut_slice();
        for (v, &i) in x.iter().zip(&self.keep) {
            slice[i] = *v;
        }
        out
    }
}

/// `M` with columns `mean(U × S(e_l))`, computed once and reused for every
/// direction since `A(U, j) = i ĵ × M`.
#[derive(Clone, Debug)]
pub struct AlphaTensor {
    pub columns: [[C64; 3]; 3],
    pub residuals: [f64; 3],
    pub contraction: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AlphaMatrix {
    /// Row-major entries.
    pub a: [[C64; 3]; 3],
    pub j_direction: [f64; 3],
    pub eigenvalues: [C64; 3],
    /// Unit eigenvectors, phase-fixed, in eigenvalue order.
    pub eigenvectors: [[C64; 3]; 3],
}

impl AlphaMatrix {
    pub fn apply(&self, v: &[C64; 3]) -> [C64; 3] {
        std::array::from_fn(|r| (0..3).map(|c| self.a[r][c] * v[c]).sum())
    }

    pub fn trace(&self) -> C64 {
        self.a[0][0] + self.a[1][1] + self.a[2][2]
    }

    pub fn frobenius(&self) -> f64 {
        self.a.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Distance from eigenvalue `i` to the nearest other eigenvalue.
    pub fn simplicity_margin(&self, i: usize) -> f64 {
        (0..3).filter(|&k| k != i).map(|k| (self.eigenvalues[i] - self.eigenvalues[k]).norm()).fold(f64::INFINITY, f64::min)
    }
}

/// Mean of `f × g` computed by direct mode pairing.
fn mean_cross(f: &SpectralField, g: &SpectralField) -> [C64; 3] {
    let mut acc = [ZERO; 3];
    for (q, fq) in f.support() {
        if let Some(idx) = g.index(-q) {
            let c = cross3(&fq, &g.coeff_at(idx));
            for i in 0..3 {
                acc[i] += c[i];
            }
        }
    }
    acc
}

fn unit_vectors() -> [[C64; 3]; 3] {
    [[ONE, ZERO, ZERO], [ZERO, ONE, ZERO], [ZERO, ZERO, ONE]]
}

pub fn alpha_tensor(u: &SpectralField, cfg: &CellConfig) -> Result<AlphaTensor> {
    check_flow(u)?;
    let n = cfg.truncation.unwrap_or(u.truncation()).max(1);
    let sols: Vec<CellSolution> = match cfg.method {
        CellMethod::Direct => {
            let lu = CellLu::new(u, n)?;
            unit_vectors()
                .par_iter()
                .map(|v| {
                    let rhs = cell_rhs(u, *v, n);
                    let field = lu.solve(&rhs);
                    let rn = rhs.l2_norm();
                    let residual =
                        if rn == 0.0 { 0.0 } else { apply_cell_operator(u, &field).sub(&rhs).l2_norm() / rn };
                    CellSolution { input_v: *v, field, residual, contraction: None, terms: 1 }
                })
                .collect()
        }
        CellMethod::Neumann => {
            let kappa = neumann_contraction(u, n, cfg.power_iterations, cfg.seed);
            unit_vectors()
                .par_iter()
                .map(|v| {
                    let rhs = cell_rhs(u, *v, n);
                    if rhs.coeff_norm() == 0.0 {
                        return Ok(CellSolution {
                            input_v: *v,
                            field: rhs,
                            residual: 0.0,
                            contraction: Some(kappa),
                            terms: 0,
                        });
                    }
                    neumann_solve(u, *v, rhs, kappa, cfg)
                })
                .collect::<Result<_>>()?
        }
    };
    let columns = std::array::from_fn(|l| mean_cross(u, &sols[l].field));
    Ok(AlphaTensor {
        columns,
        residuals: std::array::from_fn(|l| sols[l].residual),
        contraction: sols[0].contraction,
    })
}

fn unit_direction(j: [f64; 3]) -> Result<[f64; 3]> {
    let n = (j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::UndefinedDirection);
    }
    Ok([j[0] / n, j[1] / n, j[2] / n])
}

impl AlphaTensor {
    /// `A(U, j) = i ĵ × M`.
    pub fn matrix(&self, j: [f64; 3]) -> Result<AlphaMatrix> {
        let dir = unit_direction(j)?;
        let ij = [C64::new(0.0, dir[0]), C64::new(0.0, dir[1]), C64::new(0.0, dir[2])];
        let cols: [[C64; 3]; 3] = std::array::from_fn(|l| cross3(&ij, &self.columns[l]));
        let a = std::array::from_fn(|r| std::array::from_fn(|c| cols[c][r]));
        decompose(a, dir)
    }
}

fn decompose(a: [[C64; 3]; 3], dir: [f64; 3]) -> Result<AlphaMatrix> {
    let m = Mat::<C64>::from_fn(3, 3, |r, c| a[r][c]);
    let (vals, vecs) = eigen(m.as_ref())?;
    let scale = a.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&x, &y| {
        let (p, q) = (vals[x], vals[y]);
        if (p.re - q.re).abs() > 1e-12 * scale {
            q.re.total_cmp(&p.re)
        } else {
            q.im.total_cmp(&p.im)
        }
    });
    let eigenvalues = std::array::from_fn(|i| vals[order[i]]);
    let eigenvectors = std::array::from_fn(|i| {
        let v: [C64; 3] = std::array::from_fn(|r| vecs[(r, order[i])]);
        phase_fix(v)
    });
    Ok(AlphaMatrix { a, j_direction: dir, eigenvalues, eigenvectors })
}

/// Unit norm with the largest-modulus component real and positive (first
/// such component on ties).
pub fn phase_fix(v: [C64; 3]) -> [C64; 3] {
    let n = norm3(&v);
    if n == 0.0 {
        return v;
    }
    let mut best = 0;
    for i in 1..3 {
        if v[i].norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    let ph = v[best].conj() / v[best].norm();
    v.map(|c| c * ph / n)
}

pub fn alpha_matrix(u: &SpectralField, j: [f64; 3], cfg: &CellConfig) -> Result<AlphaMatrix> {
    unit_direction(j)?;
    alpha_tensor(u, cfg)?.matrix(j)
}

/// `I_U v = −mean(U × Δ⁻¹∇×(U×v))`, column by column. Real for real `U`.
pub fn first_order_matrix(u: &SpectralField) -> Result<[[f64; 3]; 3]> {
    let m = norm3(&mean(u));
    if m > 1e-12 * u.coeff_norm().max(f64::MIN_POSITIVE) {
        return Err(Error::NotMeanFree(m));
    }
    let cols: Vec<[C64; 3]> = unit_vectors()
        .iter()
        .map(|v| {
            let w = inv_laplacian_projected(&curl(&cross(u, &SpectralField::constant(0, *v))));
            mean_cross(u, &w).map(|c| -c)
        })
        .collect();
    Ok(std::array::from_fn(|r| std::array::from_fn(|c| cols[c][r].re)))
}

/// Eigenvalues of `i ĵ × diag(b², c², a²)` in closed form, ordered
/// `{+μ, 0, −μ}`.
pub fn abc_closed_form(p: AbcParams, j: [f64; 3]) -> Result<[C64; 3]> {
    let d = unit_direction(j)?;
    let (a2, b2, c2) = (p.a * p.a, p.b * p.b, p.c * p.c);
    let s = a2 * b2 * d[1] * d[1] + b2 * c2 * d[2] * d[2] + a2 * c2 * d[0] * d[0];
    let mu = s.sqrt();
    Ok([C64::new(mu, 0.0), ZERO, C64::new(-mu, 0.0)])
}

/// Unit directions: the 6 axes plus the 42 vertices of a once-subdivided
/// icosahedron, without duplicates.
pub fn default_directions() -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::new();
    for d in axis_directions().into_iter().chain(icosphere_directions(1)) {
        if !out.iter().any(|o| (0..3).all(|i| (o[i] - d[i]).abs() < 1e-12)) {
            out.push(d);
        }
    }
    out
}

pub fn axis_directions() -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for i in 0..3 {
        for s in [1.0, -1.0] {
            let mut d = [0.0; 3];
            d[i] = s;
            out.push(d);
        }
    }
    out
}

/// The 26 normalized nonzero vectors of `{−1, 0, 1}³`.
pub fn cube_directions() -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for x in -1i32..=1 {
        for y in -1i32..=1 {
            for z in -1i32..=1 {
                if x == 0 && y == 0 && z == 0 {
                    continue;
                }
                let n = ((x * x + y * y + z * z) as f64).sqrt();
                out.push([x as f64 / n, y as f64 / n, z as f64 / n]);
            }
        }
    }
    out
}

/// Vertices of an icosahedron subdivided `levels` times, projected to the
/// sphere (12, 42, 162, ...).
pub fn icosphere_directions(levels: usize) -> Vec<[f64; 3]> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let normalize = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    for v in verts.iter_mut() {
        *v = normalize(*v);
    }
    for _ in 0..levels {
        let mut midpoint = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let (p, q) = (verts[a], verts[b]);
                    verts.push(normalize([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    verts
}

#[derive(Clone, Debug)]
pub struct ScanRow {
    pub direction: [f64; 3],
    pub eigenvalues: [C64; 3],
    /// Gap from the leading eigenvalue to the rest of the spectrum.
    pub margin: f64,
    pub certified: bool,
}

#[derive(Clone, Debug)]
pub struct ScanReport {
    pub rows: Vec<ScanRow>,
    /// Row with the largest leading real part (certified rows preferred).
    pub best: Option<usize>,
    pub certified: bool,
    pub threshold: f64,
    pub contraction: Option<f64>,
}

impl ScanReport {
    pub fn best_row(&self) -> Option<&ScanRow> {
        self.best.map(|i| &self.rows[i])
    }
}

/// Evaluates `A(U, j)` on every direction and certifies alpha-instability
/// when some leading eigenvalue has real part and simplicity margin above
/// `threshold`. The default threshold is `10⁻⁶·max ‖M‖_F`.
pub fn instability_scan(
    u: &SpectralField,
    directions: &[[f64; 3]],
    threshold: Option<f64>,
    cfg: &CellConfig,
) -> Result<ScanReport> {
    if directions.is_empty() {
        return Err(Error::InvalidParameter("empty direction sample".into()));
    }
    let tensor = alpha_tensor(u, cfg)?;
    let scale = tensor.columns.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let thr = threshold.unwrap_or(1e-6 * scale);
    let rows = directions
        .par_iter()
        .map(|d| {
            let a = tensor.matrix(*d)?;
            let margin = a.simplicity_margin(0);
            let lead = a.eigenvalues[0];
            Ok(ScanRow {
                direction: a.j_direction,
                eigenvalues: a.eigenvalues,
                margin,
                certified: lead.re > thr && margin > thr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let certified = rows.iter().any(|r| r.certified);
    let best = (0..rows.len())
        .filter(|&i| rows[i].certified || !certified)
        .max_by(|&x, &y| rows[x].eigenvalues[0].re.total_cmp(&rows[y].eigenvalues[0].re));
    Ok(ScanReport { rows, best, certified, threshold: thr, contraction: tensor.contraction })
}

/// Default small-amplitude factor `0.05 / ‖U‖_{W^{1,∞}}` (sup-norm plus
/// sup-gradient bounds).
pub fn default_delta0(u: &SpectralField) -> f64 {
    let r = norms(u);
    let w = r.sup_abs_bound() + r.sup_grad_bound();
    if w > 0.0 {
        0.05 / w
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::make_abc;
    use proptest::prelude::*;

    fn abc(delta: f64, n: usize) -> SpectralField {
        make_abc(AbcParams::new(1.0, 1.0, 1.0), n).unwrap().scaled(C64::new(delta, 0.0))
    }

    fn real_v(v: [f64; 3]) -> [C64; 3] {
        v.map(|x| C64::new(x, 0.0))
    }

    #[test]
    fn zero_flow_gives_zero_solution() {
        let u = SpectralField::zeros(2, FieldKind::Real);
        for cfg in [CellConfig::direct(1e-12), CellConfig::neumann(1e-12)] {
            let s = solve_cell_problem(&u, real_v([1.0, 2.0, 3.0]), &cfg).unwrap();
            assert_eq!(s.field.max_abs(), 0.0);
        }
        let a = alpha_matrix(&u, [1.0, 0.0, 0.0], &CellConfig::default()).unwrap();
        assert!(a.a.iter().flatten().all(|v| *v == ZERO));
    }

    #[test]
    fn direct_solution_satisfies_the_equation() {
        let u = abc(0.3, 2);
        let v = [C64::new(0.3, 0.1), C64::new(-1.0, 0.0), C64::new(0.0, 0.5)];
        let s = solve_cell_problem(&u, v, &CellConfig::direct(1e-12)).unwrap();
        assert!(s.residual < 1e-12);
        assert!(norm3(&mean(&s.field)) == 0.0);
        let again = apply_cell_operator(&u, &s.field).sub(&cell_rhs(&u, v, 2));
        assert!(again.l2_norm() <= 1e-12 * cell_rhs(&u, v, 2).l2_norm());
    }

    #[test]
    fn one_term_neumann_is_second_order_accurate() {
        let v = real_v([0.2, -0.7, 1.0]);
        let mut errs = Vec::new();
        for delta in [0.02, 0.01] {
            let u = abc(delta, 2);
            let direct = solve_cell_problem(&u, v, &CellConfig::direct(1e-13)).unwrap();
            let one = neumann_partial(&u, v, 2, 1);
            // The leading term is −δ₀Δ⁻¹∇×(U_ABC × v) up to the sign of the cross product.
            let explicit = inv_laplacian(&cell_rhs(&u, v, 2)).unwrap();
            assert!(one.sub(&explicit).max_abs() < 1e-15);
            errs.push(direct.field.sub(&one).l2_norm());
        }
        // O(δ₀²): halving δ₀ quarters the error.
        let ratio = errs[0] / errs[1];
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn direct_and_neumann_agree() {
        let u = abc(0.05, 2);
        let v = real_v([1.0, 0.5, -0.25]);
        let d = solve_cell_problem(&u, v, &CellConfig::direct(1e-12)).unwrap();
        let n = solve_cell_problem(&u, v, &CellConfig::neumann(1e-12)).unwrap();
        assert!(n.contraction.unwrap() < 0.5);
        assert!(n.residual <= 1e-12);
        assert!(d.field.sub(&n.field).l2_norm() < 1e-10 * d.field.l2_norm().max(1e-300) + 1e-10);
    }

    #[test]
    fn neumann_rejects_strong_flow() {
        let u = abc(3.0, 2);
        let err = solve_cell_problem(&u, real_v([1.0, 0.0, 0.0]), &CellConfig::neumann(1e-10)).unwrap_err();
        assert!(matches!(err, Error::SeriesDiverges { contraction } if contraction >= 1.0));
    }

    #[test]
    fn contraction_matches_dense_norm() {
        // Independent oracle: the largest singular value of the dense map.
        let u = abc(0.4, 1);
        let n = 1;
        let template = SpectralField::zeros(n, FieldKind::Complex);
        let order = 3 * template.modes();
        let dense = Mat::<C64>::from_fn(order, order, |r, c| {
            let mut e = template.clone();
            e.as_mut_slice()[c] = ONE;
            if template.wave_vector(c % template.modes()) == WaveVector::ZERO {
                return ZERO;
            }
            neumann_map(&u, &e).as_slice()[r]
        });
        let sv = crate::linalg::singular_values(dense.as_ref()).unwrap();
        let top = sv.iter().cloned().fold(0.0, f64::max);
        let est = neumann_contraction(&u, n, 200, 3);
        assert!((est - top).abs() < 1e-6 * top, "{est} vs {top}");
    }

    #[test]
    fn first_order_matrix_for_abc() {
        for (a, b, c) in [(1.0, 1.0, 1.0), (1.0, 2.0, 3.0), (0.3, -0.7, 1.1)] {
            let u = make_abc(AbcParams::new(a, b, c), 2).unwrap();
            let m = first_order_matrix(&u).unwrap();
            let want = [b * b, c * c, a * a];
            for r in 0..3 {
                for col in 0..3 {
                    let w = if r == col { want[r] } else { 0.0 };
                    // Measured sign is negative; see ledger.
                    assert!((m[r][col] + w).abs() < 1e-13, "{m:?}");
                }
            }
        }
        assert_eq!(first_order_matrix(&SpectralField::zeros(2, FieldKind::Real)).unwrap(), [[0.0; 3]; 3]);
    }

    #[test]
    fn closed_form_examples() {
        let e = abc_closed_form(AbcParams::new(1.0, 1.0, 1.0), [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(e, [ONE, ZERO, -ONE]);
        let e = abc_closed_form(AbcParams::new(1.0, 0.0, 0.0), [0.3, 0.4, 0.5]).unwrap();
        assert!(e.iter().all(|v| v.norm() == 0.0));
        let e = abc_closed_form(AbcParams::new(1.0, 2.0, 3.0), [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(e[0], C64::new(2.0, 0.0));
        assert_eq!(e[2], C64::new(-2.0, 0.0));
        assert_eq!(abc_closed_form(AbcParams::new(1.0, 1.0, 1.0), [0.0; 3]), Err(Error::UndefinedDirection));
    }

    #[test]
    fn small_amplitude_eigenvalues() {
        let d = 0.05;
        let u = abc(d, 2);
        let a = alpha_matrix(&u, [1.0, 0.0, 0.0], &CellConfig::default()).unwrap();
        let i_u = first_order_matrix(&u).unwrap();
        let first = decompose(
            {
                let m = AlphaTensor {
                    columns: std::array::from_fn(|l| std::array::from_fn(|r| C64::new(i_u[r][l], 0.0))),
                    residuals: [0.0; 3],
                    contraction: None,
                };
                m.matrix([1.0, 0.0, 0.0]).unwrap().a
            },
            [1.0, 0.0, 0.0],
        )
        .unwrap();
        for i in 0..3 {
            assert!((a.eigenvalues[i] - first.eigenvalues[i]).norm() < 2.0 * d * d * d, "{:?}", a.eigenvalues);
        }
        assert!((a.eigenvalues[0].re - d * d).abs() < 2.0 * d * d * d);
        // Pattern {+μ, 0, −μ}.
        assert!((a.eigenvalues[0] + a.eigenvalues[2]).norm() < 1e-10 * a.frobenius());
        assert!(a.eigenvalues[1].norm() < 1e-10 * a.frobenius());
    }

    #[test]
    fn direction_only_dependence_and_sign_flip() {
        let u = abc(0.2, 2);
        let t = alpha_tensor(&u, &CellConfig::default()).unwrap();
        let j = [0.3, -0.2, 0.9];
        let a1 = t.matrix(j).unwrap();
        let a2 = t.matrix(j.map(|x| 2.0 * x)).unwrap();
        assert_eq!(a1.a, a2.a);
        let am = t.matrix(j.map(|x| -x)).unwrap();
        for i in 0..3 {
            assert!((am.eigenvalues[i] + a1.eigenvalues[2 - i]).norm() < 1e-12);
        }
        assert!(matches!(t.matrix([0.0; 3]), Err(Error::UndefinedDirection)));
    }

    #[test]
    fn eigen_decomposition_reproduces_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut u = SpectralField::random(2, FieldKind::Real, 0.3, &mut rng).project_solenoidal([0.0; 3]);
        u.set_coeff(WaveVector::ZERO, [ZERO; 3]);
        let a = alpha_matrix(&u, [0.2, 0.5, -0.3], &CellConfig::default()).unwrap();
        let tr: C64 = a.eigenvalues.iter().sum();
        assert!((tr - a.trace()).norm() < 1e-10 * a.frobenius());
        let v = [C64::new(0.3, -0.1), C64::new(1.0, 0.2), C64::new(-0.5, 0.0)];
        let direct = a.apply(&v);
        let vecs = Mat::<C64>::from_fn(3, 3, |r, c| a.eigenvectors[c][r]);
        let coeffs = crate::linalg::DenseLu::new(vecs.as_ref()).unwrap().solve(&v);
        let mut recon = [ZERO; 3];
        for i in 0..3 {
            for r in 0..3 {
                recon[r] += coeffs[i] * a.eigenvalues[i] * a.eigenvectors[i][r];
            }
        }
        for r in 0..3 {
            assert!((recon[r] - direct[r]).norm() < 1e-10 * norm3(&direct).max(1e-300));
        }
    }

    #[test]
    fn scan_certifies_abc_and_rejects_zero() {
        let d = 0.05;
        let rep = instability_scan(&abc(d, 2), &cube_directions(), None, &CellConfig::default()).unwrap();
        assert!(rep.certified);
        let best = rep.best_row().unwrap();
        assert!((best.eigenvalues[0].re - d * d).abs() < 2.0 * d * d * d);
        let zero = instability_scan(&SpectralField::zeros(2, FieldKind::Real), &cube_directions(), None, &CellConfig::default())
            .unwrap();
        assert!(!zero.certified);
        // No direction has a strictly negative-only spectrum.
        for r in &rep.rows {
            assert!(r.eigenvalues[0].re >= -1e-14);
        }
    }

    #[test]
    fn direction_samples() {
        assert_eq!(icosphere_directions(0).len(), 12);
        assert_eq!(icosphere_directions(1).len(), 42);
        assert_eq!(cube_directions().len(), 26);
        let d = default_directions();
        // The subdivided icosahedron already contains the axes.
        assert_eq!(d.len(), 42);
        assert!(axis_directions().iter().all(|a| d.iter().any(|v| (0..3).all(|i| (v[i] - a[i]).abs() < 1e-12))));
        for v in d {
            assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn first_order_matrix_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut u = SpectralField::random(2, FieldKind::Real, 1.0, &mut rng);
            u.set_coeff(WaveVector::ZERO, [ZERO; 3]);
            let m = first_order_matrix(&u).unwrap();
            let norm = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            for r in 0..3 {
                for c in 0..3 {
                    prop_assert!((m[r][c] - m[c][r]).abs() <= 1e-12 * norm);
                }
            }
        }
    }
}
