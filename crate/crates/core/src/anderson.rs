//! Anderson mixing for the outer fixed-point iteration.
//!
//! Keeps the last `depth` iterate/residual differences and returns the
//! least-squares extrapolated iterate. The caller projects the result back
//! onto its admissible set.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct Anderson {
    depth: usize,
    mixing: f64,
    prev_x: Option<Vec<f64>>,
    prev_g: Option<Vec<f64>>,
    dx: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
    best: f64,
}

impl Anderson {
    pub fn new(depth: usize, mixing: f64) -> Self {
        Self {
            depth,
            mixing,
            prev_x: None,
            prev_g: None,
            dx: VecDeque::new(),
            dg: VecDeque::new(),
            best: f64::INFINITY,
        }
    }

    pub fn reset(&mut self) {
        self.prev_x = None;
        self.prev_g = None;
        self.dx.clear();
        self.dg.clear();
        self.best = f64::INFINITY;
    }

    /// Given the current iterate `x` and the map output `tx = T(x)`, returns
    /// the next iterate.
    pub fn next(&mut self, x: &[f64], tx: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = tx.iter().zip(x).map(|(t, x)| t - x).collect();
        // restart when the extrapolation made things clearly worse
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm > 2.0 * self.best {
            self.reset();
        }
        self.best = self.best.min(gnorm);
        if let (Some(px), Some(pg)) = (&self.prev_x, &self.prev_g) {
            self.dx.push_back(x.iter().zip(px).map(|(a, b)| a - b).collect());
            self.dg.push_back(g.iter().zip(pg).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.pop_front();
                self.dg.pop_front();
            }
        }
        self.prev_x = Some(x.to_vec());
        self.prev_g = Some(g.clone());

        let m = self.dg.len();
        let mut out: Vec<f64> = x.iter().zip(&g).map(|(x, g)| x + self.mixing * g).collect();
        if m == 0 {
            return out;
        }
        // normal equations (dG^T dG + reg) gamma = dG^T g
        let mut a = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            for j in 0..=i {
                let v = dot(&self.dg[i], &self.dg[j]);
                a[i * m + j] = v;
                a[j * m + i] = v;
            }
            rhs[i] = dot(&self.dg[i], &g);
        }
        let trace: f64 = (0..m).map(|i| a[i * m + i]).sum();
        let reg = 1e-12 * trace.max(f64::MIN_POSITIVE);
        for i in 0..m {
            a[i * m + i] += reg;
        }
        let Some(gamma) = solve_dense(&mut a, &mut rhs, m) else {
            self.reset();
            return out;
        };
        for (k, gk) in gamma.iter().enumerate() {
            let dx = &self.dx[k];
            let dg = &self.dg[k];
            for ((o, dxi), dgi) in out.iter_mut().zip(dx).zip(dg) {
                *o -= gk * (dxi + self.mixing * dgi);
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
