use super::operator::{assemble_dense, ModalOperatorSpec};
use crate::error::{Error, Result};
use crate::field::SpectralField;
use crate::linalg::{operator_norm_estimate, random_vector, singular_values, vnorm, vsub, DenseLu};
use crate::C64;
use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Circle `center + radius·e^{iθ}` sampled at `nodes` equispaced angles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contour {
    pub center: C64,
    pub radius: f64,
    pub nodes: usize,
}

impl Contour {
    pub fn new(center: C64, radius: f64, nodes: usize) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!("contour radius {radius} must be positive")));
        }
        if nodes < 8 {
            return Err(Error::InvalidParameter(format!("contour needs at least 8 nodes, got {nodes}")));
        }
        Ok(Contour { center, radius, nodes })
    }

    pub fn node(&self, m: usize) -> C64 {
        self.center + C64::from_polar(self.radius, 2.0 * PI * m as f64 / self.nodes as f64)
    }

    /// Quadrature weight: `(1/2πi)·dμ` becomes `r e^{iθ}/M`.
    pub fn weight(&self, m: usize) -> C64 {
        C64::from_polar(self.radius, 2.0 * PI * m as f64 / self.nodes as f64) / self.nodes as f64
    }

    pub fn length(&self) -> f64 {
        2.0 * PI * self.radius
    }

    pub fn contains(&self, z: C64) -> bool {
        (z - self.center).norm() < self.radius
    }
}

#[derive(Clone, Debug)]
pub struct RieszConfig {
    pub probes: usize,
    /// Accepted idempotency defect; nodes are doubled until it is met.
    pub idempotency_tol: f64,
    pub max_nodes: usize,
    /// A node closer than this (times `1 + |μ|`) to the spectrum is rejected.
    pub min_distance: f64,
    /// Singular values of `P·probes` below this fraction of the largest do
    /// not count toward the rank.
    pub rank_tol: f64,
    pub seed: u64,
}

impl Default for RieszConfig {
    fn default() -> Self {
        RieszConfig { probes: 12, idempotency_tol: 1e-8, max_nodes: 1024, min_distance: 1e-10, rank_tol: 1e-6, seed: 5 }
    }
}

/// Factorized resolvents `(μ_m − L)` at the contour nodes.
struct Resolvents {
    lus: Vec<DenseLu>,
    weights: Vec<C64>,
    sup_norm: f64,
}

fn resolvents(a: &Mat<C64>, contour: &Contour, cfg: &RieszConfig) -> Result<Resolvents> {
    let n = a.nrows();
    let built: Vec<Result<(DenseLu, f64)>> = (0..contour.nodes)
        .into_par_iter()
        .map(|m| {
            let mu = contour.node(m);
            let shifted = Mat::<C64>::from_fn(n, n, |r, c| if r == c { mu - a[(r, c)] } else { -a[(r, c)] });
            let lu = DenseLu::new(shifted.as_ref()).map_err(|_| Error::ContourTouchesSpectrum {
                node: m,
                mu,
                distance: 0.0,
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ m as u64);
            let norm = operator_norm_estimate(&|x| lu.solve(x), &|x| lu.solve_adjoint(x), n, 30, &mut rng);
            let distance = 1.0 / norm;
            if !distance.is_finite() || distance < cfg.min_distance * (1.0 + mu.norm()) {
                return Err(Error::ContourTouchesSpectrum { node: m, mu, distance });
            }
            Ok((lu, norm))
        })
        .collect();
    let mut lus = Vec::with_capacity(contour.nodes);
    let mut sup_norm: f64 = 0.0;
    for b in built {
        let (lu, norm) = b?;
        sup_norm = sup_norm.max(norm);
        lus.push(lu);
    }
    let weights = (0..contour.nodes).map(|m| contour.weight(m)).collect();
    Ok(Resolvents { lus, weights, sup_norm })
}

impl Resolvents {
    fn project(&self, f: &[C64]) -> Vec<C64> {
        let parts: Vec<Vec<C64>> = self.lus.par_iter().map(|lu| lu.solve(f)).collect();
        let mut out = vec![C64::new(0.0, 0.0); f.len()];
        for (w, x) in self.weights.iter().zip(parts) {
            for (o, v) in out.iter_mut().zip(x) {
                *o += w * v;
            }
        }
        out
    }

    fn project_adjoint(&self, f: &[C64]) -> Vec<C64> {
        let parts: Vec<Vec<C64>> = self.lus.par_iter().map(|lu| lu.solve_adjoint(f)).collect();
        let mut out = vec![C64::new(0.0, 0.0); f.len()];
        for (w, x) in self.weights.iter().zip(parts) {
            for (o, v) in out.iter_mut().zip(x) {
                *o += w.conj() * v;
            }
        }
        out
    }
}

/// Trapezoid-rule realization of `(1/2πi)∮(μ − L)⁻¹ dμ`.
pub struct RieszProjector {
    pub contour: Contour,
    pub rank_estimate: usize,
    /// `max ‖P(Pf) − Pf‖/‖f‖` over the probes.
    pub idempotency_defect: f64,
    /// Largest resolvent norm over the nodes.
    pub sup_resolvent: f64,
    spec: ModalOperatorSpec,
    resolvents: Resolvents,
}

impl std::fmt::Debug for RieszProjector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RieszProjector")
            .field("contour", &self.contour)
            .field("rank_estimate", &self.rank_estimate)
            .field("idempotency_defect", &self.idempotency_defect)
            .finish()
    }
}

impl RieszProjector {
    pub fn apply_vec(&self, f: &[C64]) -> Vec<C64> {
        self.resolvents.project(f)
    }

    pub fn apply_adjoint_vec(&self, f: &[C64]) -> Vec<C64> {
        self.resolvents.project_adjoint(f)
    }

    pub fn apply(&self, f: &SpectralField) -> SpectralField {
        let f = if f.truncation() == self.spec.n { f.clone() } else { f.resized(self.spec.n) };
        self.spec.field_from(self.apply_vec(f.as_slice()))
    }

    pub fn spec(&self) -> &ModalOperatorSpec {
        &self.spec
    }
}

/// Builds the projector, doubling the node count from `contour.nodes` until
/// the idempotency defect meets the tolerance.
pub fn riesz_projector(spec: &ModalOperatorSpec, contour: Contour, cfg: &RieszConfig) -> Result<RieszProjector> {
    let a = assemble_dense(spec)?;
    riesz_projector_dense(spec, &a, contour, cfg)
}

pub(crate) fn riesz_projector_dense(
    spec: &ModalOperatorSpec,
    a: &Mat<C64>,
    contour: Contour,
    cfg: &RieszConfig,
) -> Result<RieszProjector> {
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probes: Vec<Vec<C64>> = (0..cfg.probes.max(1)).map(|_| random_vector(n, &mut rng)).collect();
    let mut contour = Contour::new(contour.center, contour.radius, contour.nodes)?;
    loop {
        let res = resolvents(a, &contour, cfg)?;
        let images: Vec<Vec<C64>> = probes.iter().map(|f| res.project(f)).collect();
        let defect = probes
            .iter()
            .zip(&images)
            .map(|(f, pf)| vnorm(&vsub(&res.project(pf), pf)) / vnorm(f))
            .fold(0.0, f64::max);
        if defect <= cfg.idempotency_tol || contour.nodes * 2 > cfg.max_nodes {
            let block = Mat::<C64>::from_fn(n, images.len(), |r, c| images[c][r]);
            let sv = singular_values(block.as_ref())?;
            let top = sv.iter().cloned().fold(0.0, f64::max);
            let rank_estimate = if top == 0.0 { 0 } else { sv.iter().filter(|s| **s > cfg.rank_tol * top).count() };
            let sup_resolvent = res.sup_norm;
            return Ok(RieszProjector {
                contour,
                rank_estimate,
                idempotency_defect: defect,
                sup_resolvent,
                spec: spec.clone(),
                resolvents: res,
            });
        }
        contour.nodes *= 2;
    }
}

/// Perturbation record for two projectors over a shared contour.
#[derive(Clone, Debug)]
pub struct DistanceBound {
    /// `sup_μ ‖(T₁ − T₀)(T₀ − μ)⁻¹‖`.
    pub m: f64,
    /// `(1/2π)|Γ| M/(1−M) sup_μ ‖(T₀ − μ)⁻¹‖`.
    pub bound: f64,
    /// Power-iteration estimate of `‖P₀ − P₁‖`.
    pub measured: f64,
    pub rank0: usize,
    pub rank1: usize,
    pub nodes: usize,
}

impl DistanceBound {
    pub fn holds(&self) -> bool {
        self.measured <= self.bound
    }
}

/// Compares the projectors of two operators on one contour against the
/// resolvent-perturbation bound.
pub fn projector_distance_bound(
    spec0: &ModalOperatorSpec,
    spec1: &ModalOperatorSpec,
    contour: Contour,
    cfg: &RieszConfig,
) -> Result<DistanceBound> {
    if spec0.order() != spec1.order() {
        return Err(Error::InvalidParameter("operators have different truncations".into()));
    }
    let a0 = assemble_dense(spec0)?;
    let a1 = assemble_dense(spec1)?;
    let n = a0.nrows();
    let diff = &a1 - &a0;
    let p0 = riesz_projector_dense(spec0, &a0, contour, cfg)?;
    // Same nodes for both, so quadrature error is shared.
    let c = p0.contour;
    let p1 = riesz_projector_dense(spec1, &a1, c, &RieszConfig { max_nodes: c.nodes, ..cfg.clone() })?;
    let diff_h = diff.adjoint().to_owned();
    let mut m: f64 = 0.0;
    let mut sup_r: f64 = 0.0;
    let iterations = 300;
    for (idx, lu) in p0.resolvents.lus.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + idx as u64));
        // (T₀ − μ)⁻¹ = −(μ − T₀)⁻¹; the sign does not affect norms.
        let apply = |x: &[C64]| crate::linalg::matvec(diff.as_ref(), &lu.solve(x));
        let adjoint = |x: &[C64]| lu.solve_adjoint(&crate::linalg::matvec(diff_h.as_ref(), x));
        m = m.max(operator_norm_estimate(&apply, &adjoint, n, iterations, &mut rng));
        let r = operator_norm_estimate(&|x| lu.solve(x), &|x| lu.solve_adjoint(x), n, iterations, &mut rng);
        sup_r = sup_r.max(r);
    }
    if m >= 1.0 {
        return Err(Error::BoundInapplicable(m));
    }
    let bound = c.length() / (2.0 * PI) * m / (1.0 - m) * sup_r;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7));
    let apply = |x: &[C64]| vsub(&p0.apply_vec(x), &p1.apply_vec(x));
    let adjoint = |x: &[C64]| vsub(&p0.apply_adjoint_vec(x), &p1.apply_adjoint_vec(x));
    let measured = if m == 0.0 { 0.0 } else { operator_norm_estimate(&apply, &adjoint, n, iterations, &mut rng) };
    Ok(DistanceBound { m, bound, measured, rank0: p0.rank_estimate, rank1: p1.rank_estimate, nodes: c.nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_abc, mean, AbcParams, FieldKind};
    use crate::modal::apply_l;

    fn abc_spec(delta: f64, j: [f64; 3], eps: f64, n: usize) -> ModalOperatorSpec {
        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), n).unwrap().scaled(C64::new(delta, 0.0));
        ModalOperatorSpec::new(u, j, eps, n).unwrap()
    }

    #[test]
    fn zero_flow_projector_onto_constants() {
        let spec = ModalOperatorSpec::new(SpectralField::zeros(1, FieldKind::Real), [0.0; 3], 1.0, 1).unwrap();
        let p = riesz_projector(&spec, Contour::new(C64::new(0.0, 0.0), 0.5, 16).unwrap(), &RieszConfig::default())
            .unwrap();
        assert_eq!(p.rank_estimate, 3);
        let v = [C64::new(1.0, 2.0), C64::new(-0.5, 0.0), C64::new(0.0, 3.0)];
        let c = SpectralField::constant(1, v);
        assert!(p.apply(&c).sub(&c).max_abs() < 1e-12);
    }

    #[test]
    fn projector_around_kernel_for_abc() {
        let spec = abc_spec(0.05, [0.0; 3], 1.0, 2);
        let p = riesz_projector(&spec, Contour::new(C64::new(0.0, 0.0), 0.25, 32).unwrap(), &RieszConfig::default())
            .unwrap();
        assert!(p.idempotency_defect <= 1e-8);
        assert_eq!(p.rank_estimate, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let f = SpectralField::random(2, FieldKind::Complex, 1.0, &mut rng);
            let pf = p.apply(&f);
            // Mean preservation.
            let (a, b) = (mean(&pf), mean(&f));
            for i in 0..3 {
                assert!((a[i] - b[i]).norm() < 1e-10);
            }
            // Commutation with L.
            let lhs = p.apply(&apply_l(&spec, &f));
            let rhs = apply_l(&spec, &pf);
            assert!(lhs.sub(&rhs).coeff_norm() <= 1e-6 * f.coeff_norm());
        }
    }

    #[test]
    fn contour_through_eigenvalue_is_rejected() {
        let spec = ModalOperatorSpec::new(SpectralField::zeros(1, FieldKind::Real), [0.0; 3], 1.0, 1).unwrap();
        // Node 0 sits at −1 + 1 = 0... use center −1, radius 1: node at angle 0 is 0, an eigenvalue.
        let c = Contour::new(C64::new(-1.0, 0.0), 1.0, 8).unwrap();
        assert!(matches!(riesz_projector(&spec, c, &RieszConfig::default()), Err(Error::ContourTouchesSpectrum { .. })));
    }

    #[test]
    fn identical_operators_have_zero_distance() {
        let spec = abc_spec(0.2, [0.05, 0.0, 0.0], 1.0, 1);
        let c = Contour::new(C64::new(0.0, 0.0), 0.2, 32).unwrap();
        let d = projector_distance_bound(&spec, &spec, c, &RieszConfig::default()).unwrap();
        assert_eq!(d.m, 0.0);
        assert_eq!(d.measured, 0.0);
        assert_eq!(d.rank0, d.rank1);
    }

    #[test]
    fn diffusivity_perturbation_respects_bound() {
        let spec0 = abc_spec(0.2, [0.05, 0.0, 0.0], 1.0, 1);
        let spec1 = spec0.with_eps(0.95);
        let c = Contour::new(C64::new(0.0, 0.0), 0.2, 32).unwrap();
        let d = projector_distance_bound(&spec0, &spec1, c, &RieszConfig::default()).unwrap();
        assert!(d.m < 1.0 && d.bound.is_finite());
        assert!(d.holds(), "{d:?}");
        assert_eq!(d.rank0, d.rank1);
    }

    #[test]
    fn contour_validation() {
        assert!(Contour::new(C64::new(0.0, 0.0), 0.0, 16).is_err());
        assert!(Contour::new(C64::new(0.0, 0.0), 1.0, 4).is_err());
        let c = Contour::new(C64::new(1.0, 1.0), 2.0, 8).unwrap();
        assert!((c.node(2) - C64::new(1.0, 3.0)).norm() < 1e-15);
        let s: C64 = (0..8).map(|m| c.weight(m)).sum();
        assert!(s.norm() < 1e-15);
    }
}
