//! Time stepping of `∂ₜH = L(j, ε)H` with an exponential integrating factor
//! for the shifted diffusion and Heun's rule for the advective term.

use crate::error::{Error, Result};
use crate::field::{norms, SpectralField};
use crate::modal::{modal_div_residual, ModalOperator, ModalOperatorSpec};
use crate::C64;

pub fn default_dt(spec: &ModalOperatorSpec) -> f64 {
    let sup = norms(&spec.u).sup_abs_bound();
    0.25 / (spec.n as f64 * sup + 1.0)
}

/// One-step propagator for a fixed `dt`.
#[derive(Clone, Debug)]
pub struct Stepper {
    op: ModalOperator,
    dt: f64,
    factor: Vec<f64>,
}

impl Stepper {
    pub fn new(spec: &ModalOperatorSpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt = {dt} must be positive")));
        }
        let op = ModalOperator::new(spec);
        let factor = op.diffusion().iter().map(|d| (d * dt).exp()).collect();
        Ok(Stepper { op, dt, factor })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn operator(&self) -> &ModalOperator {
        &self.op
    }

    fn damp(&self, x: &mut [C64]) {
        let modes = self.factor.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v *= self.factor[i % modes];
        }
    }

    /// `k₁ = N(H)`, `u = E(H + dt·k₁)`, `k₂ = N(u)`,
    /// `H' = E(H + dt/2·k₁) + dt/2·k₂`, with `E = e^{−ε|k+j|²dt}`.
    pub fn advance(&self, h: &[C64]) -> Vec<C64> {
        let dt = self.dt;
        let k1 = self.op.apply_advective(h);
        let mut u: Vec<C64> = h.iter().zip(&k1).map(|(a, b)| a + b * dt).collect();
        self.damp(&mut u);
        let k2 = self.op.apply_advective(&u);
        let mut out: Vec<C64> = h.iter().zip(&k1).map(|(a, b)| a + b * (0.5 * dt)).collect();
        self.damp(&mut out);
        for (o, b) in out.iter_mut().zip(&k2) {
            *o += b * (0.5 * dt);
        }
        out
    }
}

/// A single step, checked for blow-up.
pub fn step(spec: &ModalOperatorSpec, state: &SpectralField, dt: f64) -> Result<SpectralField> {
    let s = Stepper::new(spec, dt)?;
    let state = if state.truncation() == spec.n { state.clone() } else { state.resized(spec.n) };
    let out = spec.field_from(s.advance(state.as_slice()));
    if out.as_slice().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::BlowUpDetected { t: dt });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvolveConfig {
    /// Defaults to [`default_dt`].
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Steps between trace samples.
    pub sample_every: usize,
    /// Fraction of the run, counted from the end, used for the fit.
    pub fit_fraction: f64,
    /// Re-project onto the modal-divergence-free subspace when the relative
    /// drift exceeds this value.
    pub project_divergence: Option<f64>,
    /// Fits with `r²` below this are flagged.
    pub r2_threshold: f64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig { dt: None, t_end: 20.0, sample_every: 1, fit_fraction: 0.5, project_divergence: None, r2_threshold: 0.999 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub norm: f64,
    /// `1 − ‖H(t)‖ / (‖H₀‖e^{g t})` with `g` the sup-gradient bound of `U`.
    pub slack_growth: f64,
    /// `1 − (‖H‖² + ε/2·∫‖(∇+ij)H‖²) / (‖H₀‖² e^{‖U‖²∞ t/ε})`.
    pub slack_energy: f64,
    /// `max_k |(k+j)·Ĥ(k)| / ‖Ĥ‖`.
    pub div_drift: f64,
}

#[derive(Clone, Debug)]
pub struct EvolutionRun {
    pub spec: ModalOperatorSpec,
    pub h0: SpectralField,
    pub dt: f64,
    pub t_end: f64,
    pub trace: Vec<TraceSample>,
    pub final_state: SpectralField,
    /// Sup-gradient bound used in the growth bound.
    pub grad_bound: f64,
    /// Sup-norm bound of `U` used in the energy estimate.
    pub sup_bound: f64,
    pub projections: usize,
}

fn relative_drift(h: &SpectralField, j: [f64; 3]) -> f64 {
    let n = h.coeff_norm();
    if n == 0.0 {
        0.0
    } else {
        modal_div_residual(h, j) / n
    }
}

/// `‖(∇+ij)H‖²_{L²}`.
fn shifted_gradient_sq(h: &SpectralField, j: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    for idx in 0..h.modes() {
        let k = h.wave_vector(idx).as_f64();
        let kj2 = (k[0] + j[0]).powi(2) + (k[1] + j[1]).powi(2) + (k[2] + j[2]).powi(2);
        acc += kj2 * h.coeff_at(idx).iter().map(|c| c.norm_sqr()).sum::<f64>();
    }
    acc * h.cell_volume()
}

fn slack(value: f64, bound: f64) -> f64 {
    if bound.is_infinite() {
        1.0
    } else if bound == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - value / bound
    }
}

pub fn evolve(spec: &ModalOperatorSpec, h0: &SpectralField, cfg: &EvolveConfig) -> Result<EvolutionRun> {
    let dt = cfg.dt.unwrap_or_else(|| default_dt(spec));
    if !(cfg.t_end > 10.0 * dt) {
        return Err(Error::InvalidParameter(format!("t_end = {} must exceed 10·dt = {}", cfg.t_end, 10.0 * dt)));
    }
    let stepper = Stepper::new(spec, dt)?;
    let report = norms(&spec.u);
    let grad_bound = report.sup_grad_bound();
    let sup_bound = report.sup_abs_bound();
    let h0 = if h0.truncation() == spec.n { h0.clone() } else { h0.resized(spec.n) };
    let n0 = h0.l2_norm();
    let steps = (cfg.t_end / dt).round() as usize;
    let every = cfg.sample_every.max(1);
    let mut state = h0.clone();
    let mut trace = Vec::with_capacity(steps / every + 2);
    let mut dissipation = 0.0;
    let mut grad_prev = shifted_gradient_sq(&state, spec.j);
    let mut projections = 0;
    let sample = |t: f64, h: &SpectralField, dissipation: f64| {
        let norm = h.l2_norm();
        TraceSample {
            t,
            norm,
            slack_growth: slack(norm, n0 * (grad_bound * t).exp()),
            slack_energy: slack(norm * norm + 0.5 * spec.eps * dissipation, n0 * n0 * (sup_bound * sup_bound * t / spec.eps).exp()),
            div_drift: relative_drift(h, spec.j),
        }
    };
    trace.push(sample(0.0, &state, 0.0));
    for s in 1..=steps {
        let t = s as f64 * dt;
        let mut next = spec.field_from(stepper.advance(state.as_slice()));
        if let Some(thr) = cfg.project_divergence {
            if relative_drift(&next, spec.j) > thr {
                next = next.project_solenoidal(spec.j);
                projections += 1;
            }
        }
        let norm = next.l2_norm();
        if !norm.is_finite() {
            return Err(Error::BlowUpDetected { t });
        }
        let grad = shifted_gradient_sq(&next, spec.j);
        dissipation += 0.5 * dt * (grad + grad_prev);
        grad_prev = grad;
        state = next;
        if s % every == 0 || s == steps {
            trace.push(sample(t, &state, dissipation));
        }
    }
    Ok(EvolutionRun {
        spec: spec.clone(),
        h0,
        dt,
        t_end: steps as f64 * dt,
        trace,
        final_state: state,
        grad_bound,
        sup_bound,
        projections,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthFit {
    pub gamma: f64,
    pub window: (f64, f64),
    pub r2: f64,
    /// `r²` met the configured threshold.
    pub reliable: bool,
}

/// Least-squares slope of `log‖H(t)‖` over the trailing `fraction` of the
/// run.
pub fn fit_growth(run: &EvolutionRun, fraction: f64, r2_threshold: f64) -> Result<GrowthFit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("fit fraction {fraction} must lie in (0, 1]")));
    }
    let t0 = run.t_end * (1.0 - fraction);
    let pts: Vec<(f64, f64)> =
        run.trace.iter().filter(|s| s.t >= t0 - 1e-12 && s.norm > 0.0).map(|s| (s.t, s.norm.ln())).collect();
    if pts.len() < 3 {
        return Err(Error::InvalidParameter("too few samples in the fit window".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let gamma = sty / stt;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - my - gamma * (p.0 - mt)).powi(2)).sum();
    // A perfectly flat log-norm is a perfect fit.
    let r2 = if syy <= 1e-300 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(GrowthFit {
        gamma,
        window: (pts[0].0, pts[pts.len() - 1].0),
        r2,
        reliable: r2 >= r2_threshold,
    })
}

pub fn evolve_and_fit(spec: &ModalOperatorSpec, h0: &SpectralField, cfg: &EvolveConfig) -> Result<(EvolutionRun, GrowthFit)> {
    let run = evolve(spec, h0, cfg)?;
    let fit = fit_growth(&run, cfg.fit_fraction, cfg.r2_threshold)?;
    Ok((run, fit))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub min_slack_growth: f64,
    pub min_slack_energy: f64,
    /// Samples with a slack below `−tolerance`.
    pub violations: usize,
    pub tolerance: f64,
}

impl EnergyReport {
    pub fn ok(&self) -> bool {
        self.violations == 0
    }
}

pub const ENERGY_TOLERANCE: f64 = 1e-6;

pub fn energy_monitor(run: &EvolutionRun) -> EnergyReport {
    let tol = ENERGY_TOLERANCE;
    let min_g = run.trace.iter().map(|s| s.slack_growth).fold(f64::INFINITY, f64::min);
    let min_e = run.trace.iter().map(|s| s.slack_energy).fold(f64::INFINITY, f64::min);
    let violations = run.trace.iter().filter(|s| s.slack_growth < -tol || s.slack_energy < -tol).count();
    EnergyReport { min_slack_growth: min_g, min_slack_energy: min_e, violations, tolerance: tol }
}

pub fn divergence_drift(run: &EvolutionRun) -> f64 {
    run.trace.iter().map(|s| s.div_drift).fold(0.0, f64::max)
}
