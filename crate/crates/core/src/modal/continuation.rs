use super::eigs::{make_pair, normalize_eigvec, EigPair};
use super::operator::{apply_l, assemble_dense, ModalOperatorSpec};
use super::riesz::{riesz_projector_dense, Contour, RieszConfig};
use crate::error::{Error, Result};


#[derive(Clone, Debug)]
pub struct ContinuationConfig {
    pub initial_step: f64,
    pub min_step: f64,
    pub nodes: usize,
    pub riesz: RieszConfig,
    /// Stop once `Re p` drops below this fraction of its starting value.
    pub growth_fraction: f64,
    pub residual_tol: f64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            initial_step: 0.05,
            min_step: 1e-4,
            nodes: 32,
            riesz: RieszConfig { probes: 4, ..RieszConfig::default() },
            growth_fraction: 0.5,
            residual_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContinuationStep {
    pub eps: f64,
    pub pair: EigPair,
    /// Step in `ε` taken to reach this point (0 for the start).
    pub step: f64,
    /// `‖H(ε) − H(ε_prev)‖_{L²}`.
    pub increment: f64,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct ContinuationPath {
    pub start_eps: f64,
    pub target_eps: f64,
    pub steps: Vec<ContinuationStep>,
    /// Achieved window length `start_eps − last ε`.
    pub eta: f64,
    /// Why the path ended before the target, if it did.
    pub stalled: Option<String>,
}

impl ContinuationPath {
    pub fn final_pair(&self) -> &EigPair {
        &self.steps.last().expect("path holds its start").pair
    }

    /// Largest divided difference `‖ΔH‖/Δε` along the path.
    pub fn lipschitz(&self) -> f64 {
        self.steps.iter().skip(1).map(|s| s.increment / s.step).fold(0.0, f64::max)
    }

    /// Smallest `Re p(ε) / Re p(start)` along the path.
    pub fn min_growth_ratio(&self) -> f64 {
        let p0 = self.steps[0].pair.p.re;
        self.steps.iter().map(|s| s.pair.p.re / p0).fold(f64::INFINITY, f64::min)
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.stalled {
            Some(reason) => Err(Error::ContinuationStalled {
                eps: self.steps.last().map(|s| s.eps).unwrap_or(self.start_eps),
                eta: self.eta,
                reason: reason.clone(),
            }),
            None => Ok(self),
        }
    }
}

/// Follows the eigenpair `start` of `spec` down to `target_eps` by
/// projecting the previous eigenvector through a circle around the
/// previous eigenvalue. Steps are halved when the circle cannot isolate a
/// single eigenvalue.
pub fn continue_eigpair(
    spec: &ModalOperatorSpec,
    start: &EigPair,
    target_eps: f64,
    cfg: &ContinuationConfig,
) -> Result<ContinuationPath> {
    if !(target_eps > 0.0) || target_eps > spec.eps {
        return Err(Error::InvalidParameter(format!("target ε = {target_eps} must lie in (0, {}]", spec.eps)));
    }
    if !(cfg.initial_step > 0.0) {
        return Err(Error::InvalidParameter("initial step must be positive".into()));
    }
    let start_re = start.p.re;
    let mut steps = vec![ContinuationStep { eps: spec.eps, pair: start.clone(), step: 0.0, increment: 0.0, radius: 0.0 }];
    let mut step = cfg.initial_step;
    let mut stalled = None;
    while steps.last().unwrap().eps > target_eps {
        let prev = steps.last().unwrap();
        let remaining = prev.eps - target_eps;
        let dt = step.min(remaining);
        // Snap the last step onto the target to avoid a sliver.
        let eps_new = if remaining - dt < 1e-12 { target_eps } else { prev.eps - dt };
        match try_step(spec, prev, eps_new, cfg) {
            Ok(next) => {
                if next.pair.p.re < cfg.growth_fraction * start_re {
                    stalled = Some(format!("Re p fell below {} of its start at ε = {eps_new}", cfg.growth_fraction));
                    break;
                }
                steps.push(next);
            }
            Err(reason) => {
                step *= 0.5;
                if step < cfg.min_step {
                    stalled = Some(reason);
                    break;
                }
            }
        }
    }
    let eta = spec.eps - steps.last().unwrap().eps;
    Ok(ContinuationPath { start_eps: spec.eps, target_eps, steps, eta, stalled })
}

fn try_step(
    spec: &ModalOperatorSpec,
    prev: &ContinuationStep,
    eps_new: f64,
    cfg: &ContinuationConfig,
) -> std::result::Result<ContinuationStep, String> {
    let spec_new = spec.with_eps(eps_new);
    let a = assemble_dense(&spec_new).map_err(|e| e.to_string())?;
    let vals = crate::linalg::eigenvalues(a.as_ref()).map_err(|e| e.to_string())?;
    let p_prev = prev.pair.p;
    let (inear, p_near) = vals
        .iter()
        .enumerate()
        .min_by(|x, y| (x.1 - p_prev).norm().total_cmp(&(y.1 - p_prev).norm()))
        .map(|(i, v)| (i, *v))
        .ok_or("empty spectrum")?;
    let gap = vals
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != inear)
        .map(|(_, v)| (v - p_near).norm())
        .fold(f64::INFINITY, f64::min);
    let radius = 0.5 * gap;
    if (p_near - p_prev).norm() > 0.5 * radius {
        return Err(format!("eigenvalue moved {:.3e} against a gap of {gap:.3e} at ε = {eps_new}", (p_near - p_prev).norm()));
    }
    let contour = Contour::new(p_prev, radius, cfg.nodes).map_err(|e| e.to_string())?;
    let proj = riesz_projector_dense(&spec_new, &a, contour, &cfg.riesz).map_err(|e| e.to_string())?;
    if proj.rank_estimate != 1 {
        return Err(format!("contour encloses rank {} at ε = {eps_new}", proj.rank_estimate));
    }
    let mut h = proj.apply(&prev.pair.h);
    if h.l2_norm() < 1e-8 * prev.pair.h.l2_norm() {
        return Err("projection annihilated the previous eigenvector".into());
    }
    normalize_eigvec(&mut h);
    let lh = apply_l(&spec_new, &h);
    let p = h.dot(&lh) / h.dot(&h);
    if (p - p_near).norm() > 1e-6 * (1.0 + p.norm()) {
        return Err(format!("Rayleigh quotient {p} disagrees with eigenvalue {p_near}"));
    }
    let pair = make_pair(&spec_new, p, h.into_vec());
    if !(pair.residual <= cfg.residual_tol) {
        return Err(format!("residual {:.3e} at ε = {eps_new}", pair.residual));
    }
    let increment = pair.h.sub(&prev.pair.h).l2_norm();
    Ok(ContinuationStep { eps: eps_new, step: prev.eps - eps_new, increment, radius, pair })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_abc, AbcParams};
    use crate::modal::{leading_eigs, EigConfig};
    use crate::C64;

    fn setup() -> (ModalOperatorSpec, EigPair) {
        let u = make_abc(AbcParams::new(1.0, 1.0, 1.0), 2).unwrap().scaled(C64::new(0.5, 0.0));
        let spec = ModalOperatorSpec::new(u, [0.1, 0.0, 0.0], 1.0, 2).unwrap();
        let top = leading_eigs(&spec, 1, &EigConfig::default()).unwrap().remove(0);
        (spec, top)
    }

    #[test]
    fn identity_continuation() {
        let (spec, top) = setup();
        let path = continue_eigpair(&spec, &top, 1.0, &ContinuationConfig::default()).unwrap();
        assert_eq!(path.steps.len(), 1);
        assert_eq!(path.eta, 0.0);
        assert_eq!(path.final_pair().p, top.p);
    }

    #[test]
    fn follows_the_dense_eigenvalue() {
        let (spec, top) = setup();
        assert!(top.p.re > 0.0);
        let cfg = ContinuationConfig { initial_step: 0.01, ..Default::default() };
        let path = continue_eigpair(&spec, &top, 0.97, &cfg).unwrap().into_result().unwrap();
        assert!((path.eta - 0.03).abs() < 1e-12);
        // Oracle: rightmost dense eigenvalue at the final ε.
        let end = leading_eigs(&spec.with_eps(0.97), 1, &EigConfig::default()).unwrap().remove(0);
        assert!((path.final_pair().p - end.p).norm() < 1e-9);
        let overlap = path.final_pair().h.dot(&end.h).norm() * end.h.cell_volume();
        assert!((overlap - 1.0).abs() < 1e-8);
        assert!(path.min_growth_ratio() >= 0.5);
    }

    #[test]
    fn rejects_target_above_start() {
        let (spec, top) = setup();
        assert!(continue_eigpair(&spec, &top, 1.2, &ContinuationConfig::default()).is_err());
    }
}
