//! Bloch synthesis `F(x) = ∫ G(x; j) e^{ij·x} dj` of whole-space fields from
//! bands of quasi-periodic modes, the Parseval identity, and box-mass
//! concentration.
//!
//! Band families interpolate `G` in `j` with Lagrange polynomials on tensor
//! Gauss-Legendre nodes and integrate the interpolant against `e^{ij·x}`
//! exactly in `j`, so the synthesis stays accurate far from the origin where
//! the phase oscillates across the band. Every family factorizes into a sum
//! of per-axis atoms `e^{iωx}φ(x)`, and box masses reduce to per-axis Gram
//! matrices.

use crate::error::{Error, Result};
use crate::field::SpectralField;
use crate::linalg::{vnorm, DenseLu};
use crate::modal::{assemble_dense, make_pair, normalize_eigvec, EigPair, ModalOperatorSpec};
use crate::C64;
use faer::Mat;
use gauss_quad::GaussLegendre;
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Gauss-Legendre nodes (ascending) and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().expect("rule cache").get(&n) {
        return r.clone();
    }
    let mut pairs = GaussLegendre::new(n.max(2)).expect("degree at least 2").into_node_weight_pairs();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rule = if n == 1 {
        Arc::new((vec![0.0], vec![2.0]))
    } else {
        Arc::new((pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect()))
    };
    cache.lock().expect("rule cache").insert(n, rule.clone());
    rule
}

/// Scale index `n` with `ε ∈ (ζ^{n+1}, ζ^n]`.
pub fn n_for_eps(eps: f64, zeta: f64) -> Result<u32> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::InvalidParameter(format!("ζ = {zeta} must lie in (0, 1)")));
    }
    if !(eps > 0.0 && eps <= 1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("ε = {eps} must lie in (0, 1]")));
    }
    let r = eps.ln() / zeta.ln();
    Ok((r + 1e-12).floor().max(0.0) as u32)
}

/// Lagrange basis polynomial `node` on the nodes `xs`, at `t`.
fn lagrange(xs: &[f64], node: usize, t: f64) -> f64 {
    let mut v = 1.0;
    for (m, xm) in xs.iter().enumerate() {
        if m != node {
            v *= (t - xm) / (xs[node] - xm);
        }
    }
    v
}

/// Monomial coefficients of the Lagrange basis polynomial `node` on `xs`.
fn lagrange_coeffs(xs: &[f64], node: usize) -> Vec<f64> {
    let mut c = vec![1.0];
    for (m, xm) in xs.iter().enumerate() {
        if m == node {
            continue;
        }
        let d = xs[node] - xm;
        let mut next = vec![0.0; c.len() + 1];
        for (i, v) in c.iter().enumerate() {
            next[i + 1] += v / d;
            next[i] -= v * xm / d;
        }
        c = next;
    }
    c
}

/// `∫_{−J}^{J} ℓ_node(u/J) e^{iux} du`. Gauss-Legendre with enough points to
/// resolve the phase when `J|x|` is moderate, otherwise the terminating
/// integration-by-parts series of a polynomial against `e^{iωt}`.
pub fn lagrange_profile(half_width: f64, order: usize, node: usize, x: f64) -> C64 {
    let nodes = gauss_legendre(order);
    let omega = half_width * x;
    if omega.abs() <= 64.0 {
        let rule = gauss_legendre(48 + omega.abs().ceil() as usize);
        let mut acc = ZERO;
        for (t, w) in rule.0.iter().zip(&rule.1) {
            acc += C64::from_polar(w * lagrange(&nodes.0, node, *t), omega * t);
        }
        return acc * half_width;
    }
    // ∫ p e^{iωt} = Σ_k (−1)^k p^{(k)}(t) e^{iωt} / (iω)^{k+1} between −1 and 1.
    let mut p = lagrange_coeffs(&nodes.0, node);
    let eval = |c: &[f64], t: f64| c.iter().rev().fold(0.0, |acc, v| acc * t + v);
    let (e_hi, e_lo) = (C64::from_polar(1.0, omega), C64::from_polar(1.0, -omega));
    let iw = C64::new(0.0, omega);
    let mut denom = iw;
    let mut sign = 1.0;
    let mut acc = ZERO;
    while !p.is_empty() {
        acc += (e_hi * eval(&p, 1.0) - e_lo * eval(&p, -1.0)) * sign / denom;
        p = p.iter().enumerate().skip(1).map(|(i, v)| v * i as f64).collect();
        denom *= iw;
        sign = -sign;
    }
    acc * half_width
}

/// A box `center + [−J, J]³` of tensor Gauss-Legendre nodes, with one field
/// per node in lexicographic node order.
#[derive(Clone, Debug)]
pub struct BlochBand {
    pub center: [f64; 3],
    pub half_width: f64,
    pub order: usize,
    pub fields: Vec<SpectralField>,
    /// Per-node eigenvalues, when the fields are eigenfunctions.
    pub exponents: Vec<C64>,
}

impl BlochBand {
    pub fn new(center: [f64; 3], half_width: f64, order: usize, fields: Vec<SpectralField>) -> Result<Self> {
        if !(half_width > 0.0) || order == 0 {
            return Err(Error::InvalidParameter("band needs a positive half-width and order".into()));
        }
        if fields.len() != order.pow(3) {
            return Err(Error::InvalidParameter(format!("band of order {order} needs {} fields", order.pow(3))));
        }
        Ok(BlochBand { center, half_width, order, fields, exponents: Vec::new() })
    }

    pub fn node_triple(&self, idx: usize) -> [usize; 3] {
        let o = self.order;
        [idx / (o * o), (idx / o) % o, idx % o]
    }

    pub fn node_index(&self, b: [usize; 3]) -> usize {
        (b[0] * self.order + b[1]) * self.order + b[2]
    }

    pub fn node(&self, idx: usize) -> [f64; 3] {
        let xs = gauss_legendre(self.order);
        let b = self.node_triple(idx);
        std::array::from_fn(|d| self.center[d] + self.half_width * xs.0[b[d]])
    }

    pub fn weight(&self, idx: usize) -> f64 {
        let ws = gauss_legendre(self.order);
        let b = self.node_triple(idx);
        self.half_width.powi(3) * ws.1[b[0]] * ws.1[b[1]] * ws.1[b[2]]
    }
}

/// A single quadrature node `w·G(x)e^{ij·x}`.
#[derive(Clone, Debug)]
pub struct PlainNode {
    pub j: [f64; 3],
    pub weight: f64,
    pub field: SpectralField,
}

#[derive(Clone, Debug)]
pub struct BlochFamily {
    /// Overall factor applied to every band and node.
    pub amplitude: f64,
    pub bands: Vec<BlochBand>,
    pub nodes: Vec<PlainNode>,
    /// Nodes come in `±j` pairs with conjugate fields.
    pub conjugate_paired: bool,
}

impl BlochFamily {
    pub fn from_nodes(nodes: Vec<PlainNode>) -> Result<Self> {
        let f = BlochFamily { amplitude: 1.0, bands: Vec::new(), nodes, conjugate_paired: false };
        f.validate()?;
        Ok(f)
    }

    pub fn from_bands(bands: Vec<BlochBand>, amplitude: f64) -> Result<Self> {
        let f = BlochFamily { amplitude, bands, nodes: Vec::new(), conjugate_paired: false };
        f.validate()?;
        Ok(f)
    }

    fn fields(&self) -> impl Iterator<Item = &SpectralField> {
        self.bands.iter().flat_map(|b| b.fields.iter()).chain(self.nodes.iter().map(|n| &n.field))
    }

    fn validate(&self) -> Result<()> {
        let mut it = self.fields();
        let Some(first) = it.next() else { return Ok(()) };
        let (n, s) = (first.truncation(), first.period_scale());
        if it.any(|f| f.truncation() != n || (f.period_scale() - s).abs() > 1e-14 * s) {
            return Err(Error::InvalidParameter("family fields must share truncation and period".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.fields().next().is_none()
    }

    pub fn period_scale(&self) -> f64 {
        self.fields().next().map(|f| f.period_scale()).unwrap_or(1.0)
    }

    pub fn truncation(&self) -> usize {
        self.fields().next().map(|f| f.truncation()).unwrap_or(0)
    }

    /// All quadrature nodes with weights (amplitude not included).
    pub fn j_nodes(&self) -> Vec<([f64; 3], f64)> {
        let mut out = Vec::new();
        for b in &self.bands {
            for i in 0..b.fields.len() {
                out.push((b.node(i), b.weight(i)));
            }
        }
        out.extend(self.nodes.iter().map(|n| (n.j, n.weight)));
        out
    }

    /// Coefficient-space side of the Parseval identity,
    /// `(2π)³ Σ w |amplitude|² Σ_k |Ĝ(k)|²`.
    pub fn parseval_rhs(&self) -> f64 {
        let mut acc = 0.0;
        for b in &self.bands {
            for (i, f) in b.fields.iter().enumerate() {
                acc += b.weight(i) * f.coeff_norm().powi(2);
            }
        }
        for n in &self.nodes {
            acc += n.weight * n.field.coeff_norm().powi(2);
        }
        (2.0 * PI).powi(3) * self.amplitude * self.amplitude * acc
    }

    /// Largest mismatch between a node and the conjugate of its mirror.
    pub fn pairing_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for b in &self.bands {
            let mirror = self.bands.iter().find(|m| {
                m.order == b.order
                    && (m.half_width - b.half_width).abs() < 1e-14
                    && (0..3).all(|d| (m.center[d] + b.center[d]).abs() < 1e-12)
            });
            let Some(m) = mirror else { return f64::INFINITY };
            for i in 0..b.fields.len() {
                let t = b.node_triple(i);
                let mi = m.node_index(t.map(|x| b.order - 1 - x));
                worst = worst.max(b.fields[i].sub(&m.fields[mi].conj_field()).max_abs());
            }
        }
        for n in &self.nodes {
            let mirror = self.nodes.iter().find(|m| (0..3).all(|d| (m.j[d] + n.j[d]).abs() < 1e-12));
            let Some(m) = mirror else { return f64::INFINITY };
            worst = worst.max(n.field.sub(&m.field.conj_field()).max_abs());
        }
        worst
    }

    /// Direct evaluation of `F(x)` at one point.
    pub fn value_at(&self, x: [f64; 3]) -> [C64; 3] {
        let mut out = [ZERO; 3];
        for b in &self.bands {
            let prof: Vec<[C64; 3]> = (0..b.order)
                .map(|node| std::array::from_fn(|d| lagrange_profile(b.half_width, b.order, node, x[d])))
                .collect();
            let carrier = C64::from_polar(1.0, b.center[0] * x[0] + b.center[1] * x[1] + b.center[2] * x[2]);
            for (i, f) in b.fields.iter().enumerate() {
                let t = b.node_triple(i);
                let w = carrier * prof[t[0]][0] * prof[t[1]][1] * prof[t[2]][2];
                let v = f.value_at(x);
                for c in 0..3 {
                    out[c] += v[c] * w;
                }
            }
        }
        for n in &self.nodes {
            let w = C64::from_polar(n.weight, n.j[0] * x[0] + n.j[1] * x[1] + n.j[2] * x[2]);
            let v = n.field.value_at(x);
            for c in 0..3 {
                out[c] += v[c] * w;
            }
        }
        out.map(|v| v * self.amplitude)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Profile {
    One,
    Lagrange { half_width: u64, order: usize, node: usize },
}

impl Profile {
    fn value(&self, x: f64) -> C64 {
        match *self {
            Profile::One => C64::new(1.0, 0.0),
            Profile::Lagrange { half_width, order, node } => lagrange_profile(f64::from_bits(half_width), order, node, x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Atom {
    profile: Profile,
    freq: f64,
}

/// `F(x) = Σ_a X[a] Π_d e^{iω_{a_d}x_d} φ_{a_d}(x_d)` per component.
struct AtomTensor {
    atoms: [Vec<Atom>; 3],
    dims: [usize; 3],
    data: [Vec<C64>; 3],
}

fn build_tensor(family: &BlochFamily) -> AtomTensor {
    let mut index: [HashMap<(Profile, u64), usize>; 3] = Default::default();
    let mut atoms: [Vec<Atom>; 3] = Default::default();
    let mut entries: Vec<([usize; 3], [C64; 3])> = Vec::new();
    let mut atom_of = |d: usize, profile: Profile, freq: f64| -> usize {
        *index[d].entry((profile, freq.to_bits())).or_insert_with(|| {
            atoms[d].push(Atom { profile, freq });
            atoms[d].len() - 1
        })
    };
    let amp = family.amplitude;
    let mut push_field = |f: &SpectralField, carrier: [f64; 3], profiles: [Profile; 3], w: f64, entries: &mut Vec<_>| {
        for (k, c) in f.support() {
            let kw = k.as_f64();
            let s = f.period_scale();
            let a: [usize; 3] = std::array::from_fn(|d| atom_of(d, profiles[d], carrier[d] + kw[d] / s));
            entries.push((a, c.map(|v| v * (w * amp))));
        }
    };
    for b in &family.bands {
        for (i, f) in b.fields.iter().enumerate() {
            let t = b.node_triple(i);
            let profiles = t.map(|node| Profile::Lagrange { half_width: b.half_width.to_bits(), order: b.order, node });
            push_field(f, b.center, profiles, 1.0, &mut entries);
        }
    }
    for n in &family.nodes {
        push_field(&n.field, n.j, [Profile::One; 3], n.weight, &mut entries);
    }
    let dims = [atoms[0].len(), atoms[1].len(), atoms[2].len()];
    let size = dims[0] * dims[1] * dims[2];
    let mut data = [vec![ZERO; size], vec![ZERO; size], vec![ZERO; size]];
    for (a, c) in entries {
        let idx = (a[0] * dims[1] + a[1]) * dims[2] + a[2];
        for comp in 0..3 {
            data[comp][idx] += c[comp];
        }
    }
    AtomTensor { atoms, dims, data }
}

/// Contracts axis `axis` of `data` (shape `dims`) with the `dims[axis] × out`
/// matrix `m` (row-major), returning the new data and shape.
fn contract(data: &[C64], dims: [usize; 3], axis: usize, m: &[C64], out: usize) -> (Vec<C64>, [usize; 3]) {
    let mut nd = dims;
    nd[axis] = out;
    let mut res = vec![ZERO; nd[0] * nd[1] * nd[2]];
    let inner = dims[axis];
    let idx = |d: [usize; 3], i: [usize; 3]| (i[0] * d[1] + i[1]) * d[2] + i[2];
    for i0 in 0..nd[0] {
        for i1 in 0..nd[1] {
            for i2 in 0..nd[2] {
                let o = [i0, i1, i2];
                let mut acc = ZERO;
                let mut src = o;
                for a in 0..inner {
                    src[axis] = a;
                    acc += data[idx(dims, src)] * m[a * out + o[axis]];
                }
                res[idx(nd, o)] = acc;
            }
        }
    }
    (res, nd)
}

/// Per-axis atom values on the 1D grid `x_i = i·h`, `|i| ≤ imax`.
struct AxisTable {
    values: Vec<Vec<C64>>,
    imax: usize,
}

impl AxisTable {
    fn new(atoms: &[Atom], h: f64, imax: usize) -> Self {
        let values = atoms
            .par_iter()
            .map(|a| {
                (0..=2 * imax)
                    .map(|i| {
                        let x = (i as f64 - imax as f64) * h;
                        C64::from_polar(1.0, a.freq * x) * a.profile.value(x)
                    })
                    .collect()
            })
            .collect();
        AxisTable { values, imax }
    }

    /// Trapezoid Gram matrix `∫_{−R}^{R} E_a conj(E_b) dx` for `R = ir·h`.
    fn gram(&self, ir: usize, h: f64) -> Vec<C64> {
        let n = self.values.len();
        let lo = self.imax - ir;
        let hi = self.imax + ir;
        let mut g = vec![ZERO; n * n];
        for a in 0..n {
            for b in a..n {
                let (ea, eb) = (&self.values[a], &self.values[b]);
                let mut acc = ZERO;
                for i in lo..=hi {
                    let w = if (i == lo || i == hi) && ir > 0 { 0.5 } else { 1.0 };
                    acc += ea[i] * eb[i].conj() * w;
                }
                if ir == 0 {
                    acc = ZERO;
                }
                g[a * n + b] = acc * h;
                g[b * n + a] = (acc * h).conj();
            }
        }
        g
    }
}

/// Box masses `∫_{[−R,R]³}|F|²` for one family on a fixed grid spacing.
pub struct MassProfile {
    tensor: AtomTensor,
    tables: [AxisTable; 3],
    h: f64,
    rhs: f64,
}

/// Grid spacing resolving the highest synthesized frequency:
/// `π·min(1, s)/(4(N+1))` for fields of truncation `N` and period `2πs`.
pub fn default_spacing(family: &BlochFamily) -> f64 {
    PI * family.period_scale().min(1.0) / (4.0 * (family.truncation() as f64 + 1.0))
}

impl MassProfile {
    pub fn new(family: &BlochFamily, h: f64, r_max: f64) -> Result<Self> {
        if !(h > 0.0) || !(r_max > 0.0) {
            return Err(Error::InvalidParameter("spacing and radius must be positive".into()));
        }
        let tensor = build_tensor(family);
        let imax = (r_max / h).ceil() as usize;
        let tables = std::array::from_fn(|d| AxisTable::new(&tensor.atoms[d], h, imax));
        Ok(MassProfile { tensor, tables, h, rhs: family.parseval_rhs() })
    }

    pub fn rhs(&self) -> f64 {
        self.rhs
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn max_radius(&self) -> f64 {
        self.tables[0].imax as f64 * self.h
    }

    /// Radius rounded down onto the grid.
    pub fn grid_radius(&self, r: f64) -> f64 {
        ((r / self.h + 1e-9).floor().min(self.tables[0].imax as f64)) * self.h
    }

    /// Box mass at radius `r` (rounded down onto the grid).
    pub fn mass(&self, r: f64) -> f64 {
        let ir = ((r / self.h + 1e-9).floor() as usize).min(self.tables[0].imax);
        self.mass_at_index(ir)
    }

    fn mass_at_index(&self, ir: usize) -> f64 {
        let t = &self.tensor;
        if t.dims.iter().any(|d| *d == 0) {
            return 0.0;
        }
        let grams: Vec<Vec<C64>> = (0..3).map(|d| self.tables[d].gram(ir, self.h)).collect();
        let mut total = 0.0;
        for comp in 0..3 {
            let mut z = t.data[comp].clone();
            let mut dims = t.dims;
            for d in 0..3 {
                let (nz, nd) = contract(&z, dims, d, &grams[d], t.dims[d]);
                z = nz;
                dims = nd;
            }
            total += z.iter().zip(&t.data[comp]).map(|(a, b)| (a * b.conj()).re).sum::<f64>();
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct ParsevalRecord {
    pub rhs: f64,
    pub radii: Vec<f64>,
    pub lhs: Vec<f64>,
    /// `|lhs − rhs| / rhs` per radius.
    pub rel_err: Vec<f64>,
    pub decreasing: bool,
    /// Decreasing errors ending below [`PARSEVAL_TOLERANCE`].
    pub converged: bool,
}

pub const PARSEVAL_TOLERANCE: f64 = 0.05;

/// Box masses at `r_max/32, …, r_max/2, r_max` compared with the
/// coefficient-space rhs.
pub fn parseval_check(family: &BlochFamily, r_max: f64, h: f64) -> Result<ParsevalRecord> {
    let radii: Vec<f64> = (0..6).rev().map(|k| r_max / 2f64.powi(k)).collect();
    parseval_at(family, &radii, h)
}

pub fn parseval_at(family: &BlochFamily, radii: &[f64], h: f64) -> Result<ParsevalRecord> {
    let r_max = radii.iter().cloned().fold(0.0, f64::max);
    let profile = MassProfile::new(family, h, r_max)?;
    let rhs = profile.rhs();
    let radii: Vec<f64> = radii.iter().map(|r| profile.grid_radius(*r)).collect();
    let lhs: Vec<f64> = radii.iter().map(|r| profile.mass(*r)).collect();
    let rel_err: Vec<f64> = lhs
        .iter()
        .map(|l| if rhs == 0.0 { if *l == 0.0 { 0.0 } else { f64::INFINITY } } else { (l - rhs).abs() / rhs })
        .collect();
    let decreasing = rel_err.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let converged = decreasing && rel_err.last().is_some_and(|e| *e <= PARSEVAL_TOLERANCE);
    Ok(ParsevalRecord { rhs, radii, lhs, rel_err, decreasing, converged })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Concentration {
    pub radius: f64,
    /// Box mass over the Parseval rhs at `radius`.
    pub mass_fraction: f64,
}

/// Smallest grid radius with box mass at least `(1 − delta)` of the total.
pub fn concentration_radius(family: &BlochFamily, delta: f64, h: f64, r_max: f64) -> Result<Concentration> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta} must lie in (0, 1)")));
    }
    let profile = MassProfile::new(family, h, r_max)?;
    let total = profile.rhs();
    if total == 0.0 {
        return Err(Error::InvalidParameter("family has zero mass".into()));
    }
    let target = 1.0 - delta;
    let frac = |i: usize| profile.mass_at_index(i) / total;
    let imax = profile.tables[0].imax;
    // Expand, then bisect on grid indices; box mass is monotone in R.
    let mut hi = 1usize.min(imax);
    while frac(hi) < target {
        if hi == imax {
            return Err(Error::NotConcentrated { r_max: imax as f64 * h, mass: frac(hi), target });
        }
        hi = (hi * 2).min(imax);
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if frac(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Concentration { radius: hi as f64 * h, mass_fraction: frac(hi) })
}

/// Samples of `F` on the uniform grid `x_i = (i − I)h`, `R = I·h`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledVolume {
    pub half_width: f64,
    pub h: f64,
    pub side: usize,
    /// Point `(i₁, i₂, i₃)` at `(i₁·side + i₂)·side + i₃`.
    pub values: Vec<[C64; 3]>,
}

impl SampledVolume {
    pub fn new(half_width: f64, h: f64, values: Vec<[C64; 3]>) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidParameter(format!("grid spacing {h} must be positive")));
        }
        let half = (half_width / h).round() as usize;
        let side = 2 * half + 1;
        if values.len() != side * side * side {
            return Err(Error::InvalidParameter(format!("expected {} samples, got {}", side.pow(3), values.len())));
        }
        if values.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidParameter("non-finite samples".into()));
        }
        Ok(SampledVolume { half_width: half as f64 * h, h, side, values })
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        (i as f64 - (self.side / 2) as f64) * self.h
    }

    pub fn at(&self, i: [usize; 3]) -> [C64; 3] {
        self.values[(i[0] * self.side + i[1]) * self.side + i[2]]
    }

    /// Trapezoid `∫_{[−r,r]³}|F|²` over the samples.
    pub fn box_mass(&self, r: f64) -> f64 {
        let c = self.side / 2;
        let ir = ((r / self.h + 1e-9).floor() as usize).min(c);
        if ir == 0 {
            return 0.0;
        }
        let w = |i: usize| if i == c - ir || i == c + ir { 0.5 } else { 1.0 };
        let mut acc = 0.0;
        for i0 in c - ir..=c + ir {
            for i1 in c - ir..=c + ir {
                for i2 in c - ir..=c + ir {
                    let v = self.at([i0, i1, i2]);
                    acc += w(i0) * w(i1) * w(i2) * v.iter().map(|z| z.norm_sqr()).sum::<f64>();
                }
            }
        }
        acc * self.h.powi(3)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_imag(&self) -> f64 {
        self.values.iter().flatten().map(|v| v.im.abs()).fold(0.0, f64::max)
    }
}

/// Samples `F` on `[−R, R]³` with spacing `h`.
pub fn synthesize(family: &BlochFamily, half_width: f64, h: f64) -> Result<SampledVolume> {
    if !(h > 0.0) || !(half_width >= 0.0) {
        return Err(Error::InvalidParameter("spacing must be positive and half-width nonnegative".into()));
    }
    let half = (half_width / h).round() as usize;
    let side = 2 * half + 1;
    let tensor = build_tensor(family);
    let tables: [AxisTable; 3] = std::array::from_fn(|d| AxisTable::new(&tensor.atoms[d], h, half));
    let mut comps: Vec<Vec<C64>> = Vec::with_capacity(3);
    for comp in 0..3 {
        let mut z = tensor.data[comp].clone();
        let mut dims = tensor.dims;
        for d in 0..3 {
            let a = dims[d];
            let mut m = vec![ZERO; a * side];
            for (ai, row) in tables[d].values.iter().enumerate() {
                m[ai * side..(ai + 1) * side].copy_from_slice(row);
            }
            let (nz, nd) = contract(&z, dims, d, &m, side);
            z = nz;
            dims = nd;
        }
        if tensor.dims.iter().any(|d| *d == 0) {
            z = vec![ZERO; side * side * side];
        }
        comps.push(z);
    }
    let values = (0..side * side * side).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect();
    SampledVolume::new(half as f64 * h, h, values)
}

/// Shape of the `j`-boxes `Q_J(±j⋆)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandGeometry {
    pub half_width: f64,
    pub order: usize,
}

impl Default for BandGeometry {
    fn default() -> Self {
        BandGeometry { half_width: 0.1, order: 5 }
    }
}

/// Checks that `Q_J(j⋆)` and `Q_J(−j⋆)` are disjoint and strictly inside the
/// cell `[−½, ½]³`.
pub fn check_band(j_star: [f64; 3], half_width: f64) -> Result<()> {
    let inf = j_star.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(half_width > 0.0) {
        return Err(Error::InvalidParameter("band half-width must be positive".into()));
    }
    if half_width >= inf {
        return Err(Error::InvalidParameter(format!("bands around ±j⋆ overlap: J = {half_width} ≥ |j⋆|∞ = {inf}")));
    }
    if inf + half_width >= 0.5 {
        return Err(Error::InvalidParameter(format!("band leaves the cell: |j⋆|∞ + J = {} ≥ 1/2", inf + half_width)));
    }
    Ok(())
}

/// Normalized datum `F^ε` built from a band of eigenpairs, with the
/// per-node exponents and the scale index used.
#[derive(Clone, Debug)]
pub struct BandDatum {
    pub family: BlochFamily,
    pub n: u32,
    pub eps: f64,
    pub zeta: f64,
    /// Smallest `Re p` over the band nodes.
    pub min_growth: f64,
    /// `‖H‖_{L²(T³ × bands)}` before normalization.
    pub band_norm: f64,
}

/// Eigenpair of `spec` near `sigma` by shifted inverse iteration from
/// `guess`. Returns the pair and the measured contraction factor, which
/// bounds `|p − σ| / |p' − σ|` for the next-nearest eigenvalue `p'`.
pub fn track_eigenpair(spec: &ModalOperatorSpec, sigma: C64, guess: &SpectralField) -> Result<(EigPair, f64)> {
    let a = assemble_dense(spec)?;
    let n = a.nrows();
    let shift = sigma + C64::new(1e-9 * (1.0 + sigma.norm()), 0.0);
    let shifted = Mat::<C64>::from_fn(n, n, |r, c| if r == c { a[(r, c)] - shift } else { a[(r, c)] });
    let lu = DenseLu::new(shifted.as_ref())?;
    let residual = |x: &[C64]| -> (C64, f64) {
        let ax = crate::linalg::matvec(a.as_ref(), x);
        let p = crate::linalg::vdot(x, &ax) / crate::linalg::vdot(x, x);
        let r: Vec<C64> = ax.iter().zip(x).map(|(u, v)| u - v * p).collect();
        (p, vnorm(&r) / vnorm(x))
    };
    let mut x = guess.as_slice().to_vec();
    let (_, mut res) = residual(&x);
    let mut ratio: f64 = 0.0;
    for _ in 0..60 {
        let y = lu.solve(&x);
        let ny = vnorm(&y);
        x = y.iter().map(|v| v / ny).collect();
        let (p, r) = residual(&x);
        if res > 1e-12 {
            ratio = ratio.max(r / res);
        }
        res = r;
        if r < 1e-11 * (1.0 + p.norm()) {
            let mut h = spec.field_from(x);
            normalize_eigvec(&mut h);
            return Ok((make_pair(spec, p, h.into_vec()), ratio));
        }
    }
    Err(Error::EigsFailed { iterations: 60, reason: format!("inverse iteration stalled at residual {res:.3e}") })
}

/// Builds `F^ε` from the eigenpair `start` of `spec = L(j⋆, ε/ζⁿ)`: tracks the
/// eigenpair to every node of `Q_J(j⋆)`, mirrors it by conjugation onto
/// `Q_J(−j⋆)`, rescales space by `ζ^{n/2}`, and normalizes to unit mass.
pub fn build_band_datum(
    spec: &ModalOperatorSpec,
    start: &EigPair,
    geometry: BandGeometry,
    eps: f64,
    zeta: f64,
) -> Result<BandDatum> {
    let n = n_for_eps(eps, zeta)?;
    let eps_scaled = eps / zeta.powi(n as i32);
    if (spec.eps - eps_scaled).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("operator has ε = {} but ε/ζⁿ = {eps_scaled}", spec.eps)));
    }
    let j_star = spec.j;
    check_band(j_star, geometry.half_width)?;
    let order = geometry.order;
    let count = order.pow(3);
    let template =
        BlochBand::new(j_star, geometry.half_width, order, vec![SpectralField::zeros(0, crate::field::FieldKind::Complex); count])?;
    // Visit nodes outward from j⋆, seeding each from its nearest finished node.
    let mut visit: Vec<usize> = (0..count).collect();
    let dist = |i: usize| {
        let p = template.node(i);
        (0..3).map(|d| (p[d] - j_star[d]).powi(2)).sum::<f64>()
    };
    visit.sort_by(|a, b| dist(*a).total_cmp(&dist(*b)));
    let mut pairs: Vec<Option<EigPair>> = vec![None; count];
    for &i in &visit {
        let node = template.node(i);
        let (seed_p, seed_h) = pairs
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
            .min_by(|a, b| {
                let da: f64 = (0..3).map(|d| (template.node(a.0)[d] - node[d]).powi(2)).sum();
                let db: f64 = (0..3).map(|d| (template.node(b.0)[d] - node[d]).powi(2)).sum();
                da.total_cmp(&db)
            })
            .map(|(_, p)| (p.p, p.h.clone()))
            .unwrap_or((start.p, start.h.clone()));
        let (pair, ratio) = track_eigenpair(&spec.with_j(node), seed_p, &seed_h)
            .map_err(|e| Error::BandBroken { node: i, reason: e.to_string() })?;
        if ratio >= 0.5 {
            return Err(Error::BandBroken {
                node: i,
                reason: format!("eigenvalue {} not isolated from its neighbour (contraction {ratio:.3})", pair.p),
            });
        }
        pairs[i] = Some(pair);
    }
    let pairs: Vec<EigPair> = pairs.into_iter().map(|p| p.expect("every node visited")).collect();
    let min_growth = pairs.iter().map(|p| p.p.re).fold(f64::INFINITY, f64::min);

    let s = zeta.powf(n as f64 / 2.0);
    let plus_fields: Vec<SpectralField> = pairs.iter().map(|p| p.h.clone().with_period_scale(s)).collect();
    let minus_fields: Vec<SpectralField> = (0..count)
        .map(|i| {
            let t = template.node_triple(i);
            plus_fields[template.node_index(t.map(|x| order - 1 - x))].conj_field()
        })
        .collect();
    let minus_exponents: Vec<C64> = (0..count)
        .map(|i| {
            let t = template.node_triple(i);
            pairs[template.node_index(t.map(|x| order - 1 - x))].p.conj()
        })
        .collect();

    // ‖H‖² over T³ × bands in unscaled j, both bands.
    let mut norm_sq = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        norm_sq += 2.0 * template.weight(i) * p.h.coeff_norm().powi(2);
    }
    let band_norm = ((2.0 * PI).powi(3) * norm_sq).sqrt();
    let amplitude = zeta.powf(-3.0 * n as f64 / 4.0) * s.powi(3) / band_norm;

    let center = j_star.map(|v| v / s);
    let mut plus = BlochBand::new(center, geometry.half_width / s, order, plus_fields)?;
    plus.exponents = pairs.iter().map(|p| p.p).collect();
    let mut minus = BlochBand::new(center.map(|v| -v), geometry.half_width / s, order, minus_fields)?;
    minus.exponents = minus_exponents;
    let mut family = BlochFamily::from_bands(vec![plus, minus], amplitude)?;
    family.conjugate_paired = true;
    Ok(BandDatum { family, n, eps, zeta, min_growth, band_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_abc, AbcParams, FieldKind, WaveVector};
    use crate::modal::{leading_eigs, EigConfig};

    fn const_field(n: usize, v: [f64; 3]) -> SpectralField {
        SpectralField::constant(n, v.map(|x| C64::new(x, 0.0)))
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let r = gauss_legendre(5);
        let s: f64 = r.0.iter().zip(&r.1).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
        assert!(r.0.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn scale_index() {
        assert_eq!(n_for_eps(1.0, 0.9).unwrap(), 0);
        assert_eq!(n_for_eps(0.95, 0.9).unwrap(), 0);
        assert_eq!(n_for_eps(0.9, 0.9).unwrap(), 1);
        assert_eq!(n_for_eps(0.81, 0.9).unwrap(), 2);
        assert_eq!(n_for_eps(0.8, 0.9).unwrap(), 2);
        assert!(n_for_eps(0.5, 1.0).is_err());
    }

    #[test]
    fn profile_matches_closed_form_for_constant_interpolant() {
        // Σ_b ℓ_b ≡ 1, so Σ_b φ_b(x) = ∫_{−J}^{J} e^{iux} du = 2 sin(Jx)/x.
        let (j, o) = (0.3, 5);
        for x in [0.0, 1.0, 17.0, 250.0, 639.0, 641.0, 3.0e12] {
            let s: C64 = (0..o).map(|b| lagrange_profile(j, o, b, x)).sum();
            let want = if x == 0.0 { 2.0 * j } else { 2.0 * (j * x).sin() / x };
            assert!((s - C64::new(want, 0.0)).norm() < 1e-12, "{x}: {s} vs {want}");
        }
    }

    #[test]
    fn profile_branches_agree() {
        // Both evaluation routes on either side of the switch, against a
        // brute-force quadrature.
        for node in 0..4 {
            for x in [600.0, 700.0] {
                let fast = lagrange_profile(0.1, 4, node, x);
                let xs = gauss_legendre(4);
                let rule = gauss_legendre(400);
                let slow: C64 = rule
                    .0
                    .iter()
                    .zip(&rule.1)
                    .map(|(t, w)| C64::from_polar(w * lagrange(&xs.0, node, *t), 0.1 * t * x))
                    .sum::<C64>()
                    * 0.1;
                assert!((fast - slow).norm() < 1e-13, "{node} {x}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn single_node_constant_field() {
        let f = BlochFamily::from_nodes(vec![PlainNode { j: [0.0; 3], weight: 0.7, field: const_field(1, [1.0, -2.0, 0.5]) }])
            .unwrap();
        let vol = synthesize(&f, 1.0, 0.25).unwrap();
        for v in &vol.values {
            assert!((v[0] - C64::new(0.7, 0.0)).norm() < 1e-14);
            assert!((v[1] - C64::new(-1.4, 0.0)).norm() < 1e-14);
        }
        // A lone plane wave is not square integrable.
        let rec = parseval_check(&f, 32.0, 0.25).unwrap();
        assert!(!rec.converged);
        assert!(rec.lhs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_family() {
        let f = BlochFamily::from_nodes(vec![PlainNode { j: [0.1, 0.0, 0.0], weight: 1.0, field: const_field(1, [0.0; 3]) }])
            .unwrap();
        let rec = parseval_check(&f, 8.0, 0.5).unwrap();
        assert!(rec.lhs.iter().all(|l| *l == 0.0) && rec.rhs == 0.0);
    }

    fn separable_band(center: [f64; 3], jw: f64, order: usize, h: &SpectralField, g: impl Fn([f64; 3]) -> f64) -> BlochBand {
        let mut b = BlochBand::new(center, jw, order, vec![h.clone(); order.pow(3)]).unwrap();
        for i in 0..b.fields.len() {
            let node = b.node(i);
            b.fields[i] = h.scaled(C64::new(g(node), 0.0));
        }
        b
    }

    #[test]
    fn separable_synthesis_matches_axis_quadrature() {
        let mut h = SpectralField::zeros(1, FieldKind::Complex);
        h.set_coeff(WaveVector::new(1, 0, -1), [C64::new(1.0, 0.5), C64::new(0.0, 0.0), C64::new(0.3, 0.0)]);
        let center = [0.2, -0.15, 0.1];
        let jw = 0.1;
        // Quadratic in each axis: exactly interpolated at order 3.
        let g = |j: [f64; 3]| (1.0 + j[0] * j[0]) * (2.0 - j[1]) * (1.0 + 3.0 * j[2] * j[2]);
        let fam = BlochFamily::from_bands(vec![separable_band(center, jw, 3, &h, g)], 1.0).unwrap();
        let axis = |d: usize, x: f64| -> C64 {
            let r = gauss_legendre(200);
            r.0.iter()
                .zip(&r.1)
                .map(|(t, w)| {
                    let j = center[d] + jw * t;
                    let gd = match d {
                        0 => 1.0 + j * j,
                        1 => 2.0 - j,
                        _ => 1.0 + 3.0 * j * j,
                    };
                    C64::from_polar(w * jw * gd, j * x)
                })
                .sum()
        };
        for x in [[0.0, 0.0, 0.0], [3.0, -7.5, 12.0], [40.0, 55.0, -31.0]] {
            let got = fam.value_at(x);
            let hx = h.value_at(x);
            let factor = axis(0, x[0]) * axis(1, x[1]) * axis(2, x[2]);
            for c in 0..3 {
                assert!((got[c] - hx[c] * factor).norm() < 1e-12 * (1.0 + (hx[c] * factor).norm()));
            }
        }
        let vol = synthesize(&fam, 2.0, 0.5).unwrap();
        let x = [vol.coordinate(1), vol.coordinate(4), vol.coordinate(8)];
        let direct = fam.value_at(x);
        let sampled = vol.at([1, 4, 8]);
        for c in 0..3 {
            assert!((direct[c] - sampled[c]).norm() < 1e-13);
        }
    }

    #[test]
    fn gram_mass_matches_sampled_trapezoid() {
        let mut h = SpectralField::zeros(1, FieldKind::Complex);
        h.set_coeff(WaveVector::new(0, 1, 0), [C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 1.0)]);
        h.set_coeff(WaveVector::ZERO, [C64::new(0.2, 0.0), C64::new(0.5, 0.0), C64::new(0.0, 0.0)]);
        let fam = BlochFamily::from_bands(vec![separable_band([0.25, 0.0, 0.0], 0.15, 3, &h, |j| 1.0 + j[1])], 1.0).unwrap();
        let (hsp, r) = (0.4, 6.0);
        let profile = MassProfile::new(&fam, hsp, r).unwrap();
        let vol = synthesize(&fam, r, hsp).unwrap();
        for rr in [2.0, 4.0, 6.0] {
            let a = profile.mass(rr);
            let b = vol.box_mass(rr);
            assert!((a - b).abs() < 1e-10 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn band_parseval_converges_like_sinc_tail() {
        let jw = 0.1;
        let h = const_field(1, [1.0, 0.0, 0.0]);
        let fam = BlochFamily::from_bands(vec![separable_band([0.2, 0.0, 0.0], jw, 3, &h, |_| 1.0)], 1.0).unwrap();
        let rec = parseval_at(&fam, &[50.0, 100.0, 200.0, 400.0], 0.5).unwrap();
        assert!(rec.decreasing);
        // Oracle: per axis, the mass of |2 sin(Jx)/x|² outside [−R, R] is
        // about 4/R out of 4πJ; three axes add to first order.
        for (r, e) in rec.radii.iter().zip(&rec.rel_err) {
            let tail = 3.0 / (PI * jw * r);
            assert!((e - tail).abs() < 0.25 * tail, "R = {r}: {e} vs {tail}");
        }
        // Exactness of the interpolated rhs: (2π)³·(2J)³.
        assert!((rec.rhs - (2.0 * PI * 2.0 * jw).powi(3)).abs() < 1e-12 * rec.rhs);
    }

    #[test]
    fn concentration_scaling() {
        let h = const_field(1, [0.0, 1.0, 0.0]);
        let radius = |jw: f64, delta: f64| {
            let fam = BlochFamily::from_bands(vec![separable_band([0.25, 0.0, 0.0], jw, 3, &h, |_| 1.0)], 1.0).unwrap();
            concentration_radius(&fam, delta, 0.5, 2000.0).unwrap().radius
        };
        assert!(radius(0.2, 0.1) < radius(0.1, 0.1));
        assert!(radius(0.1, 0.5) < radius(0.1, 0.1));
        let fam = BlochFamily::from_bands(vec![separable_band([0.25, 0.0, 0.0], 0.1, 3, &h, |_| 1.0)], 1.0).unwrap();
        assert!(matches!(concentration_radius(&fam, 0.01, 0.5, 20.0), Err(Error::NotConcentrated { .. })));
    }

    #[test]
    fn band_geometry_checks() {
        assert!(check_band([0.2, 0.0, 0.0], 0.1).is_ok());
        assert!(check_band([0.1, 0.0, 0.0], 0.1).is_err());
        assert!(check_band([0.45, 0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn band_datum_is_normalized_real_and_growing() {
        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), 1).unwrap().scaled(C64::new(0.5, 0.0));
        let spec = ModalOperatorSpec::new(u, [0.12, 0.0, 0.0], 1.0, 1).unwrap();
        let start = leading_eigs(&spec, 1, &EigConfig::default()).unwrap().remove(0);
        assert!(start.p.re > 0.0);
        let geom = BandGeometry { half_width: 0.02, order: 3 };
        let datum = build_band_datum(&spec, &start, geom, 1.0, 0.9).unwrap();
        let fam = &datum.family;
        assert!((fam.parseval_rhs() - 1.0).abs() < 1e-12);
        assert!(fam.pairing_defect() < 1e-14);
        assert!(datum.min_growth >= 0.5 * start.p.re);
        // Conjugate exponents across mirrored nodes, checked against dense solves.
        let plus = &fam.bands[0];
        let minus = &fam.bands[1];
        for i in [0usize, 13, 26] {
            let t = plus.node_triple(i);
            let mi = minus.node_index(t.map(|x| 2 - x));
            assert!((plus.exponents[i].conj() - minus.exponents[mi]).norm() < 1e-14);
            let node = plus.node(i);
            let dense = leading_eigs(&spec.with_j(node), 1, &EigConfig::default()).unwrap().remove(0);
            assert!((dense.p - plus.exponents[i]).norm() < 1e-9);
        }
        let vol = synthesize(fam, 3.0, 0.5).unwrap();
        assert!(vol.max_imag() <= 1e-8 * vol.max_abs());
    }

    #[test]
    fn node_refinement_leaves_smooth_rhs_unchanged() {
        let h = const_field(1, [1.0, 0.0, 0.0]);
        let g = |j: [f64; 3]| (1.0 + j[0]).exp() * (j[1] * 3.0).cos() * (1.0 + j[2] * j[2]);
        let rhs = |o: usize| {
            BlochFamily::from_bands(vec![separable_band([0.2, 0.0, 0.0], 0.1, o, &h, g)], 1.0).unwrap().parseval_rhs()
        };
        let (a, b) = (rhs(5), rhs(10));
        assert!((a - b).abs() <= 1e-6 * b);
    }
}
