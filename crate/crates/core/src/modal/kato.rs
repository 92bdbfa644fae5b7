use super::eigs::dense_spectrum;
use super::operator::ModalOperatorSpec;
use crate::alpha::{alpha_tensor, CellConfig};
use crate::error::{Error, Result};
use crate::field::SpectralField;
use crate::linalg::min_cost_assignment;
use crate::C64;

#[derive(Clone, Debug)]
pub struct KatoConfig {
    pub n: usize,
    pub cell: CellConfig,
    /// Eigenvalues inside this disc around 0 count as the small cluster.
    pub cluster_radius: f64,
}

impl KatoConfig {
    pub fn new(n: usize) -> Self {
        KatoConfig { n, cell: CellConfig { truncation: Some(n), ..CellConfig::default() }, cluster_radius: 0.25 }
    }
}

#[derive(Clone, Debug)]
pub struct KatoRow {
    pub magnitude: f64,
    /// The three eigenvalues of `L(j, 1)` nearest 0, matched to `predictions`.
    pub eigenvalues: [C64; 3],
    /// `μ_ℓ|j|`.
    pub predictions: [C64; 3],
    pub remainders: [f64; 3],
    /// Number of eigenvalues inside the cluster disc.
    pub cluster_count: usize,
}

#[derive(Clone, Debug)]
pub struct KatoReport {
    pub direction: [f64; 3],
    pub mu: [C64; 3],
    pub rows: Vec<KatoRow>,
    /// Least-squares slope of `log r_ℓ` against `log |j|`, per branch;
    /// `None` when the remainders sit at roundoff.
    pub slopes: [Option<f64>; 3],
    /// Smallest per-branch slope.
    pub slope: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Compares the small eigenvalues of `L(j, 1)` with the first-order
/// predictions `μ_ℓ|j|` from the alpha-matrix.
pub fn kato_first_order_check(u: &SpectralField, direction: [f64; 3], magnitudes: &[f64], cfg: &KatoConfig) -> Result<KatoReport> {
    if magnitudes.is_empty() || magnitudes.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidParameter("magnitudes must be positive".into()));
    }
    if magnitudes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("magnitudes must be strictly decreasing".into()));
    }
    let tensor = alpha_tensor(u, &cfg.cell)?;
    let a = tensor.matrix(direction)?;
    let dir = a.j_direction;
    let mu = a.eigenvalues;
    let base = ModalOperatorSpec::new(u.clone(), [0.0; 3], 1.0, cfg.n)?;
    let mut rows = Vec::with_capacity(magnitudes.len());
    for &mag in magnitudes {
        let spec = base.with_j(dir.map(|d| d * mag));
        let mut vals = dense_spectrum(&spec)?;
        vals.sort_by(|p, q| p.norm().total_cmp(&q.norm()));
        let cluster_count = vals.iter().filter(|p| p.norm() < cfg.cluster_radius).count();
        let near = &vals[..3];
        let predictions: [C64; 3] = mu.map(|m| m * mag);
        let cost: Vec<Vec<f64>> = predictions.iter().map(|q| near.iter().map(|p| (p - q).norm()).collect()).collect();
        let assign = min_cost_assignment(&cost);
        let eigenvalues = std::array::from_fn(|l| near[assign[l]]);
        let remainders = std::array::from_fn(|l| (near[assign[l]] - predictions[l]).norm());
        rows.push(KatoRow { magnitude: mag, eigenvalues, predictions, remainders, cluster_count });
    }
    let mags: Vec<f64> = rows.iter().map(|r| r.magnitude).collect();
    let slopes: [Option<f64>; 3] = std::array::from_fn(|l| {
        let rem: Vec<f64> = rows.iter().map(|r| r.remainders[l]).collect();
        // Roundoff-level remainders carry no slope information.
        if rem.iter().all(|r| *r < 1e-13) {
            None
        } else {
            loglog_slope(&mags, &rem)
        }
    });
    let slope = slopes.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    Ok(KatoReport { direction: dir, mu, rows, slopes, slope })
}
