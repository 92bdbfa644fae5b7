//! Whole-space velocity `u = Σ ∇×(Ψ_n φ_{n,ℓ})` glued from rescaled copies
//! of a periodic streamfunction, the translated initial datum, and the static
//! checks on cutoffs, radii, separation and norms.
//!
//! Each block sees `Ψ_n` in its own frame, `Ψ_n(x − x_{n,ℓ})`, so a datum
//! translated to the block center meets the same periodic flow it was built
//! for.

use crate::bloch::{BlochFamily, MassProfile};
use crate::error::{Error, Result};
use crate::field::SpectralField;
use crate::C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Ratio bound for the `W^{2,∞}` comparisons between `Ψ_nφ_{n,ℓ}` and `Ψ`.
pub const NORM_CONSTANT: f64 = 4.0;

/// Smallest separation constant the construction is designed for.
pub const MIN_SEPARATION_CONSTANT: f64 = 10.0;

/// Relative slack put between each designed quantity and its bound.
const DESIGN_SLACK: f64 = 1e-6;

/// Upper bound on the normalized mass of a unit datum outside the ball of
/// radius `R`, of the form `constant / R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailModel {
    /// Constant-profile band of half-width `J`: each axis loses at most
    /// `2/(πJr)` of its mass outside `[−r, r]`, and the ball of radius `R`
    /// contains the cube of half-width `R/√3`.
    Sinc { half_width: f64 },
    /// Fitted `tail(R) ≤ constant/R`.
    Power { constant: f64 },
}

impl TailModel {
    pub fn constant(&self) -> f64 {
        match *self {
            TailModel::Sinc { half_width } => 6.0 * 3f64.sqrt() / (std::f64::consts::PI * half_width),
            TailModel::Power { constant } => constant,
        }
    }

    pub fn tail(&self, radius: f64) -> f64 {
        (self.constant() / radius).min(1.0)
    }

    /// Smallest `R > 1` with `1/R + tail(R) ≤ tol`.
    pub fn radius_for(&self, tol: f64) -> Result<f64> {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::InvalidParameter(format!("tail tolerance {tol} must lie in (0, 1)")));
        }
        Ok(((1.0 + self.constant()) / tol * (1.0 + DESIGN_SLACK)).max(1.0 + DESIGN_SLACK))
    }

    /// Fits `tail(R) ≤ C/R` to measured box masses of unit families: `C` is
    /// `√3·max_r r·(1 − mass(r)/total)` over the sampled cube half-widths,
    /// inflated by `safety`.
    pub fn fit(families: &[BlochFamily], radii: &[f64], h: f64, safety: f64) -> Result<Self> {
        if families.is_empty() || radii.is_empty() || !(safety >= 1.0) {
            return Err(Error::InvalidParameter("fit needs families, radii and safety ≥ 1".into()));
        }
        let r_max = radii.iter().cloned().fold(0.0, f64::max);
        let mut c: f64 = 0.0;
        for fam in families {
            let profile = MassProfile::new(fam, h, r_max)?;
            let total = profile.rhs();
            if total <= 0.0 {
                return Err(Error::InvalidParameter("family has zero mass".into()));
            }
            for r in radii {
                let rg = profile.grid_radius(*r);
                let tail = (1.0 - profile.mass(rg) / total).max(0.0);
                c = c.max(rg * tail);
            }
        }
        Ok(TailModel::Power { constant: 3f64.sqrt() * c * safety })
    }
}

/// Smoothstep ramp of odd degree `2m + 1`, with `S'(t) = c·tᵐ(1 − t)ᵐ`.
#[derive(Clone, Copy, Debug)]
struct Ramp {
    m: i32,
    c: f64,
}

impl Ramp {
    fn new(degree: u32) -> Result<Self> {
        if degree < 3 || degree % 2 == 0 {
            return Err(Error::InvalidParameter(format!("ramp degree {degree} must be odd and at least 3")));
        }
        let m = ((degree - 1) / 2) as i32;
        let fact = |k: i32| (1..=k).map(|v| v as f64).product::<f64>();
        Ok(Ramp { m, c: fact(2 * m + 1) / (fact(m) * fact(m)) })
    }

    fn s(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let m = self.m;
        let mut acc = 0.0;
        let mut binom = 1.0;
        for i in 0..=m {
            acc += binom * if i % 2 == 0 { 1.0 } else { -1.0 } * t.powi(m + i + 1) / (m + i + 1) as f64;
            binom *= (m - i) as f64 / (i + 1) as f64;
        }
        self.c * acc
    }

    fn ds(&self, t: f64) -> f64 {
        if !(0.0..=1.0).contains(&t) {
            return 0.0;
        }
        self.c * (t * (1.0 - t)).powi(self.m)
    }

    fn d2s(&self, t: f64) -> f64 {
        if !(0.0..=1.0).contains(&t) {
            return 0.0;
        }
        self.c * self.m as f64 * (t * (1.0 - t)).powi(self.m - 1) * (1.0 - 2.0 * t)
    }

    fn ds_max(&self) -> f64 {
        self.ds(0.5)
    }

    fn d2s_max(&self) -> f64 {
        let t = 0.5 * (1.0 - 1.0 / ((2 * self.m - 1) as f64).sqrt());
        self.d2s(t).abs()
    }
}

/// Radial cutoff: `φ = 1` on the ball of radius `inner_radius`, a smoothstep
/// ramp down to `0` at `outer_radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub center: [f64; 3],
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub ramp_degree: u32,
}

/// Value, gradient and Hessian of a cutoff at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffJet {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

impl CutoffSpec {
    fn ramp(&self) -> Ramp {
        Ramp::new(self.ramp_degree).expect("validated ramp degree")
    }

    pub fn width(&self) -> f64 {
        self.outer_radius - self.inner_radius
    }

    /// `(φ, φ', φ'')` as functions of the radius.
    pub fn radial(&self, r: f64) -> (f64, f64, f64) {
        let ramp = self.ramp();
        let w = self.width();
        let t = (r - self.inner_radius) / w;
        if t <= 0.0 {
            return (1.0, 0.0, 0.0);
        }
        if t >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        (1.0 - ramp.s(t), -ramp.ds(t) / w, -ramp.d2s(t) / (w * w))
    }

    /// Jet at the offset `y = x − center`.
    pub fn jet_local(&self, y: [f64; 3]) -> CutoffJet {
        let r = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
        let (v, d1, d2) = self.radial(r);
        if d1 == 0.0 && d2 == 0.0 {
            return CutoffJet { value: v, grad: [0.0; 3], hess: [[0.0; 3]; 3] };
        }
        let e = y.map(|c| c / r);
        let grad = e.map(|c| d1 * c);
        let hess = std::array::from_fn(|a| {
            std::array::from_fn(|b| {
                let delta = if a == b { 1.0 } else { 0.0 };
                d2 * e[a] * e[b] + d1 / r * (delta - e[a] * e[b])
            })
        });
        CutoffJet { value: v, grad, hess }
    }

    /// Exact `sup|∇φ|` and an upper bound on `sup‖D²φ‖` (operator norm).
    pub fn derivative_sups(&self) -> (f64, f64) {
        let ramp = self.ramp();
        let w = self.width();
        let g1 = ramp.ds_max() / w;
        (g1, (ramp.d2s_max() / (w * w)).max(g1 / self.inner_radius))
    }

    /// `sup|∇φ|` and `sup‖D²φ‖` measured on a radial grid over the ramp.
    pub fn measured_derivative_sups(&self, samples: usize) -> (f64, f64) {
        let mut g1: f64 = 0.0;
        let mut g2: f64 = 0.0;
        for i in 0..=samples {
            let r = self.inner_radius + self.width() * i as f64 / samples as f64;
            let (_, d1, d2) = self.radial(r);
            g1 = g1.max(d1.abs());
            g2 = g2.max(d2.abs().max(d1.abs() / r));
        }
        (g1, g2)
    }
}

/// One `(n, ℓ)` block: `Ψ_n` cut off around `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub n: u32,
    pub l: u32,
    /// Concentration radius `R_{n,ℓ}`; the plateau has radius `2R`.
    pub radius: f64,
    /// `(1/𝔘)exp(−(n+1) − 𝔘(ℓ+1))`.
    pub tolerance: f64,
    pub cutoff: CutoffSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    /// Separation/size constant `𝔘`.
    pub u_const: f64,
    pub zeta: f64,
    /// Scales `n = 0..=n_max`.
    pub n_max: u32,
    /// Copies `ℓ = 1..=l_max`.
    pub l_max: u32,
    pub ramp_degree: u32,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig { u_const: 10.0, zeta: 0.9, n_max: 3, l_max: 3, ramp_degree: 5 }
    }
}

/// `(1/𝔘)exp(−(n+1) − 𝔘(ℓ+1))`.
pub fn block_tolerance(u_const: f64, n: u32, l: u32) -> f64 {
    (-(n as f64 + 1.0) - u_const * (l as f64 + 1.0)).exp() / u_const
}

#[derive(Clone, Debug)]
pub struct BlockCatalog {
    pub config: CatalogConfig,
    pub tail: TailModel,
    pub blocks: Vec<Block>,
    pub psi: SpectralField,
    modes: Vec<([f64; 3], [C64; 3])>,
    /// `(sup|Ψ|, sup|∇Ψ|, sup|D²Ψ|)`, Frobenius norms, sampled on a grid.
    pub psi_sups: [f64; 3],
}

/// Smallest ramp width `w` with `sup|∇φ| + sup‖D²φ‖ ≤ tol` for plateau
/// radius `inner`.
fn ramp_width(ramp: Ramp, inner: f64, tol: f64) -> f64 {
    let (a, b) = (ramp.ds_max(), ramp.d2s_max());
    let total = |w: f64| a / w + (b / (w * w)).max(a / (w * inner));
    let mut hi = (a + b) / tol + 1.0;
    while total(hi) > tol {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > tol {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi * (1.0 + DESIGN_SLACK)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Required gap between the supports of two blocks.
fn required_gap(a: &Block, b: &Block) -> f64 {
    2.0 * a.radius.max(b.radius)
}

/// Integer points of the cubic shell `max|i| = s`, in a fixed order.
fn shell(s: i64) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for i in -s..=s {
        for j in -s..=s {
            for k in -s..=s {
                if i.abs().max(j.abs()).max(k.abs()) == s {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out.sort_by_key(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2], *p));
    out
}

/// Radii from the tail model, cutoff ramps from the derivative budget, and
/// centers by greedy placement on expanding cubic shells.
pub fn plan_catalog(psi: &SpectralField, config: CatalogConfig, tail: TailModel) -> Result<BlockCatalog> {
    if !(config.zeta > 0.5 && config.zeta < 1.0) {
        return Err(Error::InvalidParameter(format!("ζ = {} must lie in (1/2, 1)", config.zeta)));
    }
    if !(config.u_const > 0.0) || config.l_max == 0 {
        return Err(Error::InvalidParameter("need 𝔘 > 0 and ℓ_max ≥ 1".into()));
    }
    if (psi.period_scale() - 1.0).abs() > 1e-14 {
        return Err(Error::InvalidParameter("streamfunction must have period 2π".into()));
    }
    if psi.reality_defect() > 1e-12 * psi.coeff_norm().max(1.0) {
        return Err(Error::InvalidParameter("streamfunction must be real-valued".into()));
    }
    let ramp = Ramp::new(config.ramp_degree)?;
    let mut blocks: Vec<Block> = Vec::new();
    for n in 0..=config.n_max {
        for l in 1..=config.l_max {
            let tol = block_tolerance(config.u_const, n, l);
            let radius = tail.radius_for(tol)?;
            let inner = 2.0 * radius;
            let w = ramp_width(ramp, inner, tol);
            let mut block = Block {
                n,
                l,
                radius,
                tolerance: tol,
                cutoff: CutoffSpec { center: [0.0; 3], inner_radius: inner, outer_radius: inner + w, ramp_degree: config.ramp_degree },
            };
            let rho = block.cutoff.outer_radius;
            let spacing = 2.0 * rho + 2.0 * radius;
            let mut placed = false;
            'shells: for s in 0..=64 {
                for p in shell(s) {
                    let c = p.map(|v| v as f64 * spacing);
                    let ok = blocks.iter().all(|o| {
                        dist(c, o.cutoff.center) - rho - o.cutoff.outer_radius
                            >= required_gap(&block, o) * (1.0 + DESIGN_SLACK)
                    });
                    if ok {
                        block.cutoff.center = c;
                        placed = true;
                        break 'shells;
                    }
                }
            }
            if !placed {
                return Err(Error::CatalogInfeasible { n: n as usize, l: l as usize, reason: "no free center within 64 shells".into() });
            }
            blocks.push(block);
        }
    }
    BlockCatalog::new(config, tail, blocks, psi.clone())
}

/// Second-order jet of a real field given by its Fourier modes.
struct Jet2 {
    val: [f64; 3],
    /// `grad[j][k] = ∂_j Ψ_k`.
    grad: [[f64; 3]; 3],
    /// `hess[m][j][k] = ∂_m ∂_j Ψ_k`.
    hess: [[[f64; 3]; 3]; 3],
}

fn jet2(modes: &[([f64; 3], [C64; 3])], y: [f64; 3]) -> Jet2 {
    let mut out = Jet2 { val: [0.0; 3], grad: [[0.0; 3]; 3], hess: [[[0.0; 3]; 3]; 3] };
    for (k, c) in modes {
        let e = C64::from_polar(1.0, k[0] * y[0] + k[1] * y[1] + k[2] * y[2]);
        for comp in 0..3 {
            let v = c[comp] * e;
            out.val[comp] += v.re;
            // ∂_j → i k_j, so ∂_j v = −k_j Im v and ∂_m∂_j v = −k_m k_j Re v.
            for j in 0..3 {
                out.grad[j][comp] -= k[j] * v.im;
                for m in 0..3 {
                    out.hess[m][j][comp] -= k[m] * k[j] * v.re;
                }
            }
        }
    }
    out
}

fn frob<const M: usize>(rows: &[[f64; 3]; M]) -> f64 {
    rows.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

const LEVI: [(usize, usize, usize, f64); 6] =
    [(0, 1, 2, 1.0), (1, 2, 0, 1.0), (2, 0, 1, 1.0), (0, 2, 1, -1.0), (2, 1, 0, -1.0), (1, 0, 2, -1.0)];

/// Glued velocity and its Jacobian at a list of points.
#[derive(Clone, Debug, PartialEq)]
pub struct GluedEvaluation {
    pub points: Vec<[f64; 3]>,
    pub u: Vec<[f64; 3]>,
    /// `grad_u[p][m][i] = ∂_m u_i`.
    pub grad_u: Vec<[[f64; 3]; 3]>,
    /// Containing block per point.
    pub block: Vec<Option<usize>>,
}

impl GluedEvaluation {
    pub fn divergence(&self, p: usize) -> f64 {
        (0..3).map(|i| self.grad_u[p][i][i]).sum()
    }

    /// `max |∇·u| / max(|∇u|, tiny)` over the points.
    pub fn max_relative_divergence(&self) -> f64 {
        let scale = self.grad_u.iter().map(frob).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        (0..self.points.len()).map(|p| self.divergence(p).abs()).fold(0.0, f64::max) / scale
    }

    pub fn max_grad(&self) -> f64 {
        self.grad_u.iter().map(frob).fold(0.0, f64::max)
    }
}

impl BlockCatalog {
    fn new(config: CatalogConfig, tail: TailModel, blocks: Vec<Block>, psi: SpectralField) -> Result<Self> {
        Ramp::new(config.ramp_degree)?;
        let modes: Vec<([f64; 3], [C64; 3])> = psi.support().into_iter().map(|(k, c)| (k.as_f64(), c)).collect();
        let m = (4 * (2 * psi.support_radius() + 1)).max(32);
        let step = 2.0 * std::f64::consts::PI / m as f64;
        let sups = (0..m * m * m)
            .into_par_iter()
            .map(|idx| {
                let y = [(idx / (m * m)) as f64 * step, ((idx / m) % m) as f64 * step, (idx % m) as f64 * step];
                let j = jet2(&modes, y);
                let h: f64 = j.hess.iter().map(frob).map(|v| v * v).sum::<f64>().sqrt();
                [j.val.iter().map(|v| v * v).sum::<f64>().sqrt(), frob(&j.grad), h]
            })
            .reduce(|| [0.0; 3], |a, b| std::array::from_fn(|i| a[i].max(b[i])));
        Ok(BlockCatalog { config, tail, blocks, psi, modes, psi_sups: sups })
    }

    pub fn block_index(&self, n: u32, l: u32) -> Option<usize> {
        self.blocks.iter().position(|b| b.n == n && b.l == l)
    }

    /// Block whose support contains `x`.
    pub fn locate(&self, x: [f64; 3]) -> Option<usize> {
        self.blocks.iter().position(|b| dist(x, b.cutoff.center) < b.cutoff.outer_radius)
    }

    /// `u` and `∇u` at offset `y` from the center of block `b`.
    pub fn eval_local(&self, b: usize, y: [f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
        let block = &self.blocks[b];
        let phi = block.cutoff.jet_local(y);
        if phi.value == 0.0 {
            return ([0.0; 3], [[0.0; 3]; 3]);
        }
        let s = self.config.zeta.powf(block.n as f64 / 2.0);
        // Ψ_n(y) = s²Ψ(y/s): value s², gradient s, Hessian 1.
        let j = jet2(&self.modes, y.map(|v| v / s));
        let psi = j.val.map(|v| v * s * s);
        let dpsi = j.grad.map(|r| r.map(|v| v * s));
        let d2psi = j.hess;
        let mut u = [0.0; 3];
        let mut du = [[0.0; 3]; 3];
        for &(i, jj, k, sign) in &LEVI {
            u[i] += sign * (phi.grad[jj] * psi[k] + phi.value * dpsi[jj][k]);
            for m in 0..3 {
                du[m][i] += sign
                    * (phi.hess[m][jj] * psi[k]
                        + phi.grad[jj] * dpsi[m][k]
                        + phi.grad[m] * dpsi[jj][k]
                        + phi.value * d2psi[m][jj][k]);
            }
        }
        (u, du)
    }

    /// Evaluates `u` at absolute points; zero outside every support.
    pub fn evaluate_u(&self, points: &[[f64; 3]]) -> GluedEvaluation {
        let vals: Vec<(Option<usize>, [f64; 3], [[f64; 3]; 3])> = points
            .par_iter()
            .map(|x| match self.locate(*x) {
                Some(b) => {
                    let c = self.blocks[b].cutoff.center;
                    let (u, du) = self.eval_local(b, [x[0] - c[0], x[1] - c[1], x[2] - c[2]]);
                    (Some(b), u, du)
                }
                None => (None, [0.0; 3], [[0.0; 3]; 3]),
            })
            .collect();
        GluedEvaluation {
            points: points.to_vec(),
            block: vals.iter().map(|v| v.0).collect(),
            u: vals.iter().map(|v| v.1).collect(),
            grad_u: vals.iter().map(|v| v.2).collect(),
        }
    }

    /// Evaluates `u` at offsets from the center of block `b`, which keeps full
    /// precision far from the origin.
    pub fn evaluate_local(&self, b: usize, offsets: &[[f64; 3]]) -> GluedEvaluation {
        let c = self.blocks[b].cutoff.center;
        let vals: Vec<_> = offsets.par_iter().map(|y| self.eval_local(b, *y)).collect();
        GluedEvaluation {
            points: offsets.iter().map(|y| [c[0] + y[0], c[1] + y[1], c[2] + y[2]]).collect(),
            block: offsets.iter().map(|y| (dist(*y, [0.0; 3]) < self.blocks[b].cutoff.outer_radius).then_some(b)).collect(),
            u: vals.iter().map(|v| v.0).collect(),
            grad_u: vals.iter().map(|v| v.1).collect(),
        }
    }

    /// Central-difference divergence of `u` at offset `y` in block `b`.
    pub fn fd_divergence(&self, b: usize, y: [f64; 3], h: f64) -> f64 {
        (0..3)
            .map(|i| {
                let mut p = y;
                let mut m = y;
                p[i] += h;
                m[i] -= h;
                (self.eval_local(b, p).0[i] - self.eval_local(b, m).0[i]) / (2.0 * h)
            })
            .sum()
    }

    /// `‖f‖_{W^{2,∞}} = max(sup|f|, sup|∇f|, sup|D²f|)` of `Ψ`.
    pub fn psi_w2(&self) -> f64 {
        self.psi_sups.iter().cloned().fold(0.0, f64::max)
    }

    /// Lower and upper bounds on `‖Ψ_nφ_{n,ℓ}‖_{W^{2,∞}}`: the plateau value
    /// of `Ψ_n`, and the product-rule bound over the ramp.
    pub fn block_w2_bounds(&self, b: usize) -> (f64, f64) {
        let block = &self.blocks[b];
        let s = self.config.zeta.powf(block.n as f64 / 2.0);
        let [s0, s1, s2] = self.psi_sups;
        let (p0, p1, p2) = (s * s * s0, s * s1, s2);
        let (g1, g2op) = block.cutoff.derivative_sups();
        let g2 = 3f64.sqrt() * g2op;
        let lower = p0.max(p1).max(p2);
        let upper = p0.max(p1 + p0 * g1).max(p2 + 2.0 * p1 * g1 + p0 * g2);
        (lower, upper)
    }

    /// Serializes the catalog as a TOML document.
    pub fn to_toml(&self) -> Result<String> {
        let doc = CatalogDocument {
            config: self.config,
            tail: self.tail,
            psi: PsiDocument {
                truncation: self.psi.truncation(),
                modes: self
                    .psi
                    .support()
                    .into_iter()
                    .map(|(k, c)| {
                        let mut row = vec![k.0[0] as f64, k.0[1] as f64, k.0[2] as f64];
                        row.extend(c.iter().flat_map(|v| [v.re, v.im]));
                        row
                    })
                    .collect(),
            },
            blocks: self.blocks.clone(),
        };
        toml::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: CatalogDocument = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if doc.psi.truncation == 0 {
            return Err(Error::Format("streamfunction truncation must be at least 1".into()));
        }
        let mut psi = SpectralField::zeros(doc.psi.truncation, crate::field::FieldKind::Real);
        for row in &doc.psi.modes {
            if row.len() != 9 || row[..3].iter().any(|v| v.fract() != 0.0) {
                return Err(Error::Format("mode rows are [k1, k2, k3, re1, im1, re2, im2, re3, im3]".into()));
            }
            let k = crate::field::WaveVector::new(row[0] as i64, row[1] as i64, row[2] as i64);
            if psi.index(k).is_none() {
                return Err(Error::Format(format!("mode {:?} exceeds truncation", k.0)));
            }
            psi.set_coeff(k, std::array::from_fn(|c| C64::new(row[3 + 2 * c], row[4 + 2 * c])));
        }
        for b in &doc.blocks {
            Ramp::new(b.cutoff.ramp_degree)?;
            if !(b.cutoff.outer_radius > b.cutoff.inner_radius && b.cutoff.inner_radius > 0.0) {
                return Err(Error::Format(format!("block ({}, {}) has invalid cutoff radii", b.n, b.l)));
            }
        }
        BlockCatalog::new(doc.config, doc.tail, doc.blocks, psi)
    }
}

#[derive(Serialize, Deserialize)]
struct PsiDocument {
    truncation: usize,
    /// `[k1, k2, k3, re1, im1, re2, im2, re3, im3]` per nonzero mode.
    modes: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CatalogDocument {
    config: CatalogConfig,
    tail: TailModel,
    psi: PsiDocument,
    blocks: Vec<Block>,
}

/// One translated, `ℓ⁻²`-weighted copy of `F^ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatumTerm {
    pub l: u32,
    pub weight: f64,
    pub center: [f64; 3],
}

/// `B^ε_in = Σ_ℓ ℓ⁻² F^ε(· − x_{n_ε,ℓ})` with norm bounds from the tail
/// model, for a unit-norm `F^ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatumDescription {
    pub eps: f64,
    pub n_eps: u32,
    pub terms: Vec<DatumTerm>,
    pub norm_lower: f64,
    pub norm_upper: f64,
    /// Lower bound on `‖F^ε_1‖_{L²(Q_{n_ε,1})}`.
    pub first_term_mass: f64,
}

impl DatumDescription {
    pub fn value_at(&self, family: &BlochFamily, x: [f64; 3]) -> [C64; 3] {
        let mut out = [C64::new(0.0, 0.0); 3];
        for t in &self.terms {
            let v = family.value_at([x[0] - t.center[0], x[1] - t.center[1], x[2] - t.center[2]]);
            for c in 0..3 {
                out[c] += v[c] * t.weight;
            }
        }
        out
    }
}

pub fn build_datum(catalog: &BlockCatalog, eps: f64) -> Result<DatumDescription> {
    let n_eps = crate::bloch::n_for_eps(eps, catalog.config.zeta)?;
    let terms: Vec<DatumTerm> = catalog
        .blocks
        .iter()
        .filter(|b| b.n == n_eps)
        .map(|b| DatumTerm { l: b.l, weight: (b.l as f64).powi(-2), center: b.cutoff.center })
        .collect();
    if terms.is_empty() {
        return Err(Error::InvalidParameter(format!("catalog has no blocks at scale n = {n_eps} (ε = {eps})")));
    }
    let diag: f64 = terms.iter().map(|t| t.weight * t.weight).sum();
    let mut cross = 0.0;
    for (a, ta) in terms.iter().enumerate() {
        for tb in &terms[a + 1..] {
            let d = dist(ta.center, tb.center);
            cross += 2.0 * ta.weight * tb.weight * 2.0 * catalog.tail.tail(d / 2.0).sqrt();
        }
    }
    let first = catalog.blocks[catalog.block_index(n_eps, 1).expect("ℓ = 1 present")];
    Ok(DatumDescription {
        eps,
        n_eps,
        terms,
        norm_lower: (diag - cross).max(0.0).sqrt(),
        norm_upper: (diag + cross).sqrt(),
        first_term_mass: (1.0 - catalog.tail.tail(2.0 * first.radius)).max(0.0).sqrt(),
    })
}

/// One measured inequality `measured ≤ bound` (or `≥` when `lower` is set).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub subject: String,
    pub measured: f64,
    pub bound: f64,
    /// Positive when the inequality holds.
    pub margin: f64,
    pub pass: bool,
}

fn upper(check: &str, subject: String, measured: f64, bound: f64) -> CheckRow {
    let margin = bound - measured;
    CheckRow { check: check.into(), subject, measured, bound, margin, pass: margin > 0.0 }
}

fn lower(check: &str, subject: String, measured: f64, bound: f64) -> CheckRow {
    let margin = measured - bound;
    CheckRow { check: check.into(), subject, measured, bound, margin, pass: margin > 0.0 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogReport {
    pub rows: Vec<CheckRow>,
}

impl CatalogReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }
}

/// Re-measures every static inequality of the catalog, plus datum norms at
/// `eps_samples` and block coverage at `t_samples`.
pub fn check_catalog(catalog: &BlockCatalog, eps_samples: &[f64], t_samples: &[f64]) -> Result<CatalogReport> {
    let mut rows = Vec::new();
    let cfg = &catalog.config;
    rows.push(lower("separation_constant", "catalog".into(), cfg.u_const, MIN_SEPARATION_CONSTANT - 1e-12));
    let name = |b: &Block| format!("n={} l={}", b.n, b.l);
    for b in &catalog.blocks {
        rows.push(upper("tail", name(b), 1.0 / b.radius + catalog.tail.tail(b.radius), b.tolerance));
        rows.push(lower("radius", name(b), b.radius, 1.0));
        rows.push(lower("plateau", name(b), b.cutoff.inner_radius, 2.0 * b.radius * (1.0 - 1e-15)));
        let (g1, g2) = b.cutoff.measured_derivative_sups(4096);
        rows.push(upper("derivative", name(b), g1 + g2, b.tolerance));
        let range_ok = (0..=256).all(|i| {
            let r = b.cutoff.outer_radius * 1.01 * i as f64 / 256.0;
            let v = b.cutoff.radial(r).0;
            (0.0..=1.0).contains(&v) && (r > b.cutoff.inner_radius || v == 1.0)
        });
        rows.push(lower("cutoff_range", name(b), if range_ok { 1.0 } else { 0.0 }, 0.5));
    }
    let mut overlaps = 0usize;
    for (i, a) in catalog.blocks.iter().enumerate() {
        for b in &catalog.blocks[i + 1..] {
            let gap = dist(a.cutoff.center, b.cutoff.center) - a.cutoff.outer_radius - b.cutoff.outer_radius;
            if gap < 0.0 {
                overlaps += 1;
            }
            rows.push(lower("separation", format!("{} / {}", name(a), name(b)), gap, required_gap(a, b)));
        }
    }
    rows.push(upper("overlapping_pairs", "catalog".into(), overlaps as f64, 0.5));

    let psi = catalog.psi_w2();
    for (i, b) in catalog.blocks.iter().enumerate() {
        let (lo, hi) = catalog.block_w2_bounds(i);
        rows.push(lower("psi_norm_lower", name(b), lo / psi, 1.0 / NORM_CONSTANT));
        rows.push(upper("psi_norm_upper", name(b), hi / psi, NORM_CONSTANT));
    }

    for n in 0..=cfg.n_max {
        if let Some(i) = catalog.block_index(n, 1) {
            let b = &catalog.blocks[i];
            rows.push(upper("outer_mass", name(b), catalog.tail.tail(b.radius).sqrt(), 0.1));
            rows.push(lower("first_term_mass", name(b), (1.0 - catalog.tail.tail(2.0 * b.radius)).max(0.0).sqrt(), 0.9));
        }
    }

    for &eps in eps_samples {
        let n = crate::bloch::n_for_eps(eps, cfg.zeta)?;
        rows.push(upper("scale_coverage", format!("eps={eps}"), n as f64, cfg.n_max as f64 + 0.5));
        if n <= cfg.n_max {
            let d = build_datum(catalog, eps)?;
            rows.push(lower("datum_norm_lower", format!("eps={eps}"), d.norm_lower, 0.5));
            rows.push(upper("datum_norm_upper", format!("eps={eps}"), d.norm_upper, 2.0));
        }
    }
    for &t in t_samples {
        if !(t >= 0.0) {
            return Err(Error::InvalidParameter(format!("time sample {t} must be nonnegative")));
        }
        let l = (t.floor() as u32).max(1);
        rows.push(upper("time_coverage", format!("t={t}"), l as f64, cfg.l_max as f64 + 0.5));
    }
    Ok(CatalogReport { rows })
}

/// Smallest `𝔘 = 2^k`, `k = 0..=k_max`, whose catalog passes every check
/// except the `𝔘 ≥ 10` requirement itself.
pub fn separation_sweep(
    psi: &SpectralField,
    base: CatalogConfig,
    tail: TailModel,
    eps_samples: &[f64],
    k_max: u32,
) -> Result<Option<f64>> {
    for k in 0..=k_max {
        let u_const = 2f64.powi(k as i32);
        let cat = plan_catalog(psi, CatalogConfig { u_const, ..base }, tail)?;
        let report = check_catalog(&cat, eps_samples, &[])?;
        if report.rows.iter().filter(|r| r.check != "separation_constant").all(|r| r.pass) {
            return Ok(Some(u_const));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::{BlochBand, BlochFamily};
    use crate::field::{make_abc, streamfunction, AbcParams};

    fn abc_psi() -> SpectralField {
        streamfunction(&make_abc(AbcParams::new(1.0, 1.0, 1.0), 1).unwrap()).unwrap()
    }

    fn catalog(config: CatalogConfig) -> BlockCatalog {
        plan_catalog(&abc_psi(), config, TailModel::Sinc { half_width: 0.1 }).unwrap()
    }

    #[test]
    fn ramp_profiles() {
        for degree in [3, 5, 7] {
            let r = Ramp::new(degree).unwrap();
            assert!(r.s(0.0).abs() < 1e-15 && (r.s(1.0) - 1.0).abs() < 1e-13);
            // Derivatives against central differences.
            for t in [0.2, 0.45, 0.8] {
                let h = 1e-5;
                assert!(((r.s(t + h) - r.s(t - h)) / (2.0 * h) - r.ds(t)).abs() < 1e-8);
                assert!(((r.ds(t + h) - r.ds(t - h)) / (2.0 * h) - r.d2s(t)).abs() < 1e-6);
            }
            let sampled = (0..=100_000).map(|i| r.d2s(i as f64 / 100_000.0).abs()).fold(0.0, f64::max);
            assert!((sampled - r.d2s_max()).abs() < 1e-6 * r.d2s_max());
        }
        assert!(Ramp::new(4).is_err());
        assert!(Ramp::new(1).is_err());
    }

    #[test]
    fn cutoff_hessian_matches_differences() {
        let c = CutoffSpec { center: [0.0; 3], inner_radius: 2.0, outer_radius: 5.0, ramp_degree: 5 };
        let y = [1.5, 2.0, -1.0];
        let jet = c.jet_local(y);
        let h = 1e-5;
        for m in 0..3 {
            let mut p = y;
            let mut q = y;
            p[m] += h;
            q[m] -= h;
            let (gp, gq) = (c.jet_local(p).grad, c.jet_local(q).grad);
            assert!(((c.jet_local(p).value - c.jet_local(q).value) / (2.0 * h) - jet.grad[m]).abs() < 1e-9);
            for a in 0..3 {
                assert!(((gp[a] - gq[a]) / (2.0 * h) - jet.hess[m][a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn single_scale_catalog() {
        let cat = catalog(CatalogConfig { n_max: 0, l_max: 1, ..Default::default() });
        assert_eq!(cat.blocks.len(), 1);
        assert_eq!(cat.blocks[0].cutoff.center, [0.0; 3]);
        let report = check_catalog(&cat, &[1.0], &[0.5]).unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn default_catalog_passes_and_radii_grow() {
        let cat = catalog(CatalogConfig::default());
        assert_eq!(cat.blocks.len(), 12);
        let report = check_catalog(&cat, &[1.0, 0.9, 0.81, 0.729], &[0.5, 1.5, 2.5, 3.5]).unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
        for n in 0..=3 {
            for l in 1..3 {
                let a = cat.blocks[cat.block_index(n, l).unwrap()].radius;
                let b = cat.blocks[cat.block_index(n, l + 1).unwrap()].radius;
                assert!(b / a >= 10f64.exp() * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn derivative_bound_oracle() {
        // Radial profile evaluated independently of the design formula.
        let cat = catalog(CatalogConfig::default());
        for b in &cat.blocks {
            let c = b.cutoff;
            let w = c.width();
            let ramp = Ramp::new(c.ramp_degree).unwrap();
            let mut g1: f64 = 0.0;
            let mut g2: f64 = 0.0;
            for i in 0..=20_000 {
                let t = i as f64 / 20_000.0;
                let h = 1e-4;
                let d1 = (ramp.s(t + h) - ramp.s(t - h)) / (2.0 * h * w);
                let d2 = (ramp.s(t + h) - 2.0 * ramp.s(t) + ramp.s(t - h)) / (h * h * w * w);
                g1 = g1.max(d1.abs());
                g2 = g2.max(d2.abs().max(d1.abs() / (c.inner_radius + t * w)));
            }
            assert!(g1 + g2 <= b.tolerance * (1.0 + 1e-6), "{} {}", g1 + g2, b.tolerance);
        }
    }

    #[test]
    fn small_separation_constant_fails_checks() {
        let cat = catalog(CatalogConfig { u_const: 1.0, ..Default::default() });
        let report = check_catalog(&cat, &[0.9], &[]).unwrap();
        let failed: Vec<&str> = report.failures().map(|r| r.check.as_str()).collect();
        assert!(failed.contains(&"separation_constant"));
        assert!(failed.contains(&"outer_mass"));
        let swept = separation_sweep(&abc_psi(), CatalogConfig::default(), TailModel::Sinc { half_width: 0.1 }, &[0.9], 5)
            .unwrap()
            .unwrap();
        assert!(swept > 1.0 && swept <= 16.0);
    }

    #[test]
    fn velocity_on_plateau_and_outside() {
        let cat = catalog(CatalogConfig { n_max: 1, l_max: 2, ..Default::default() });
        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), 1).unwrap();
        let b = cat.block_index(1, 1).unwrap();
        let s = 0.9f64.sqrt();
        let c = cat.blocks[b].cutoff.center;
        let offsets = [[0.3, -1.2, 2.0], [10.0, 4.0, -7.5]];
        let pts: Vec<[f64; 3]> = offsets.iter().map(|y| [c[0] + y[0], c[1] + y[1], c[2] + y[2]]).collect();
        let local = cat.evaluate_local(b, &offsets);
        let abs = cat.evaluate_u(&pts);
        for (i, y) in offsets.iter().enumerate() {
            let want = u.value_at(y.map(|v| v / s)).map(|v| v.re * s);
            // Absolute points resolve offsets only to the spacing of floats
            // near the center.
            let rounded = [pts[i][0] - c[0], pts[i][1] - c[1], pts[i][2] - c[2]];
            let (u_r, _) = cat.eval_local(b, rounded);
            for k in 0..3 {
                assert!((local.u[i][k] - want[k]).abs() < 1e-12);
                assert_eq!(abs.u[i][k], u_r[k]);
            }
            assert_eq!(abs.block[i], Some(b));
        }
        let far = cat.blocks.iter().map(|b| b.cutoff.outer_radius + dist(b.cutoff.center, [0.0; 3])).fold(0.0, f64::max);
        let out = cat.evaluate_u(&[[2.0 * far, 0.0, 0.0]]);
        assert_eq!(out.u[0], [0.0; 3]);
        assert_eq!(out.block[0], None);
    }

    #[test]
    fn velocity_is_solenoidal_in_the_ramp() {
        // A short-ramp cutoff so the product-rule terms are not negligible.
        let psi = abc_psi();
        let blocks = vec![Block {
            n: 1,
            l: 1,
            radius: 1.5,
            tolerance: 1.0,
            cutoff: CutoffSpec { center: [0.0; 3], inner_radius: 3.0, outer_radius: 6.0, ramp_degree: 5 },
        }];
        let cat = BlockCatalog::new(CatalogConfig::default(), TailModel::Power { constant: 1.0 }, blocks, psi).unwrap();
        let pts: Vec<[f64; 3]> = (0..50).map(|i| {
            let a = i as f64 * 0.7;
            let r = 3.0 + 3.0 * (i as f64 + 0.5) / 50.0;
            [r * a.cos() * 0.6, r * a.sin() * 0.6, r * 0.8]
        }).collect();
        let ev = cat.evaluate_local(0, &pts);
        assert!(ev.max_grad() > 0.1);
        assert!(ev.max_relative_divergence() < 1e-12);
        // Central differences converge at second order to the zero divergence
        // of the exact Jacobian; compare the difference errors on a
        // non-solenoidal component instead: ∂₁u₁ alone.
        let y = [2.1, 2.6, 2.9];
        let (_, du) = cat.eval_local(0, y);
        let d11 = |h: f64| {
            let (mut p, mut m) = (y, y);
            p[0] += h;
            m[0] -= h;
            (cat.eval_local(0, p).0[0] - cat.eval_local(0, m).0[0]) / (2.0 * h)
        };
        let (e1, e2) = ((d11(0.02) - du[0][0]).abs(), (d11(0.01) - du[0][0]).abs());
        assert!((e1 / e2 - 4.0).abs() < 0.2, "{}", e1 / e2);
        assert!(cat.fd_divergence(0, y, 0.01).abs() < 1e-3 * ev.max_grad());
    }

    #[test]
    fn datum_norms_and_scale_boundaries() {
        let cat = catalog(CatalogConfig::default());
        for eps in [0.9, 0.81, 0.729] {
            let d = build_datum(&cat, eps).unwrap();
            assert!(d.norm_lower >= 0.5 && d.norm_upper <= 2.0);
            assert_eq!(d.terms.len(), 3);
            assert!(d.first_term_mass >= 0.9 && d.first_term_mass <= 1.0);
        }
        assert_eq!(build_datum(&cat, 0.81).unwrap().n_eps, 2);
        assert_eq!(build_datum(&cat, 0.8).unwrap().n_eps, 2);
        assert!(build_datum(&cat, 0.5).is_err());
        let single = catalog(CatalogConfig { l_max: 1, ..Default::default() });
        let d = build_datum(&single, 0.9).unwrap();
        assert_eq!((d.norm_lower, d.norm_upper), (1.0, 1.0));
    }

    #[test]
    fn datum_evaluation_translates_family() {
        let cat = catalog(CatalogConfig { n_max: 0, l_max: 2, ..Default::default() });
        let h = SpectralField::constant(1, [C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);
        let band = BlochBand::new([0.2, 0.0, 0.0], 0.1, 1, vec![h]).unwrap();
        let fam = BlochFamily::from_bands(vec![band], 1.0).unwrap();
        let d = build_datum(&cat, 1.0).unwrap();
        let t = d.terms[1];
        let x = [t.center[0] + 1.0, t.center[1], t.center[2]];
        let y = [x[0] - t.center[0], x[1] - t.center[1], x[2] - t.center[2]];
        let want = fam.value_at(y)[0] * t.weight;
        // The other copy sits ≥ 10¹⁰ away, where |F| ≲ 1/|x|.
        assert!((d.value_at(&fam, x)[0] - want).norm() < 1e-8 * want.norm());
    }

    #[test]
    fn catalog_round_trips_through_toml() {
        let cat = catalog(CatalogConfig { n_max: 1, l_max: 2, ..Default::default() });
        let text = cat.to_toml().unwrap();
        let back = BlockCatalog::from_toml(&text).unwrap();
        assert_eq!(back.blocks, cat.blocks);
        assert_eq!(back.config, cat.config);
        assert_eq!(back.tail, cat.tail);
        assert!(back.psi.sub(&cat.psi).max_abs() == 0.0);
        assert!(BlockCatalog::from_toml("config = 3").is_err());
    }

    #[test]
    fn psi_sups_for_abc() {
        // Ψ = U for ABC(1,1,1): |U(0)| = √3 and |U| ≤ 3; ∇Ψ and D²Ψ are
        // rotated copies of Ψ's components, so all three sups agree.
        let cat = catalog(CatalogConfig { n_max: 0, l_max: 1, ..Default::default() });
        let [s0, s1, s2] = cat.psi_sups;
        assert!(s0 >= 3f64.sqrt() && s0 <= 3.0);
        assert!((s1 - s2).abs() < 1e-12 * s1);
    }

    #[test]
    fn tail_fit_brackets_sinc_asymptote() {
        let h = SpectralField::constant(1, [C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);
        let fam = BlochFamily::from_bands(vec![BlochBand::new([0.2, 0.0, 0.0], 0.1, 1, vec![h]).unwrap()], 1.0).unwrap();
        let norm = fam.parseval_rhs().sqrt();
        let fam = BlochFamily { amplitude: 1.0 / norm, ..fam };
        let fit = TailModel::fit(&[fam], &[100.0, 200.0, 400.0], 0.5, 1.0).unwrap();
        let c = fit.constant();
        // Asymptotic cube tail 3/(πJr); the ball constant adds √3.
        let asym = 3f64.sqrt() * 3.0 / (std::f64::consts::PI * 0.1);
        assert!(c > 0.8 * asym && c < 1.3 * asym, "{c} vs {asym}");
        assert!(c < TailModel::Sinc { half_width: 0.1 }.constant());
    }
}
