//! Three-dimensional transforms between cubic-truncated coefficients and
//! uniform periodic grids.

use crate::C64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Forward and inverse plans for an `m × m × m` grid. Plans are immutable and
/// shared; every call allocates its own scratch.
pub struct Fft3 {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Returns cached plans for grid side `m`.
pub fn plan(m: usize) -> Arc<Fft3> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Fft3>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(m)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(Fft3 {
                m,
                forward: planner.plan_fft_forward(m),
                inverse: planner.plan_fft_inverse(m),
            })
        })
        .clone()
}

impl Fft3 {
    pub fn side(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.m * self.m * self.m
    }

    /// Grid values `f(x) = Σ_k c_k e^{ik·x}` at `x = 2π(i₀, i₁, i₂)/m`, in place.
    pub fn synthesize(&self, data: &mut [C64]) {
        self.apply(data, &*self.inverse);
    }

    /// Coefficients `c_k = m⁻³ Σ_x f(x) e^{−ik·x}`, in place.
    pub fn analyze(&self, data: &mut [C64]) {
        self.apply(data, &*self.forward);
        let s = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }

    fn apply(&self, data: &mut [C64], fft: &dyn Fft<f64>) {
        let m = self.m;
        assert_eq!(data.len(), m * m * m, "grid length mismatch");
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(data, &mut scratch);

        let mut lines = vec![C64::new(0.0, 0.0); m * m];
        // Second axis: for each i₀ the m×m plane is transposed so lines become contiguous.
        for i0 in 0..m {
            let plane = &mut data[i0 * m * m..(i0 + 1) * m * m];
            for i1 in 0..m {
                for i2 in 0..m {
                    lines[i2 * m + i1] = plane[i1 * m + i2];
                }
            }
            fft.process_with_scratch(&mut lines, &mut scratch);
            for i1 in 0..m {
                for i2 in 0..m {
                    plane[i1 * m + i2] = lines[i2 * m + i1];
                }
            }
        }
        // First axis: gather one (i₁) slab at a time.
        for i1 in 0..m {
            for i0 in 0..m {
                for i2 in 0..m {
                    lines[i2 * m + i0] = data[(i0 * m + i1) * m + i2];
                }
            }
            fft.process_with_scratch(&mut lines, &mut scratch);
            for i0 in 0..m {
                for i2 in 0..m {
                    data[(i0 * m + i1) * m + i2] = lines[i2 * m + i0];
                }
            }
        }
    }
}

#[inline]
fn wrap(k: i64, m: usize) -> usize {
    k.rem_euclid(m as i64) as usize
}

/// Places one component's coefficients (cubic radius `n`, lexicographic
/// order) onto a zeroed grid of side `m ≥ 2n + 1`.
pub fn scatter(coeffs: &[C64], n: usize, m: usize, grid: &mut [C64]) {
    let side = 2 * n + 1;
    debug_assert!(m >= side);
    debug_assert_eq!(coeffs.len(), side * side * side);
    grid.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
    let r = n as i64;
    let mut idx = 0;
    for k1 in -r..=r {
        let g1 = wrap(k1, m) * m;
        for k2 in -r..=r {
            let g12 = (g1 + wrap(k2, m)) * m;
            for k3 in -r..=r {
                grid[g12 + wrap(k3, m)] = coeffs[idx];
                idx += 1;
            }
        }
    }
}

/// Reads coefficients of cubic radius `n` back from an analyzed grid.
pub fn gather(grid: &[C64], m: usize, n: usize, coeffs: &mut [C64]) {
    let side = 2 * n + 1;
    debug_assert!(m >= side);
    let r = n as i64;
    let mut idx = 0;
    for k1 in -r..=r {
        let g1 = wrap(k1, m) * m;
        for k2 in -r..=r {
            let g12 = (g1 + wrap(k2, m)) * m;
            for k3 in -r..=r {
                coeffs[idx] = grid[g12 + wrap(k3, m)];
                idx += 1;
            }
        }
    }
}
