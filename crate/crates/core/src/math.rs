//! Numerically stable scalar kernels and dense symmetric positive-definite
//! solves for the small (latent-dimension-sized) systems the ECM updates
//! need. Nothing here is general-purpose linear algebra; matrices are tiny
//! (D or D+1 on a side) and always symmetric.

use crate::error::{Error, Result};

/// Probabilities are clamped into this band so downstream logs stay finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// Below this threshold the Jaakkola coefficient switches to its analytic
/// limit -1/8, removing the 0/0 at the origin.
const JAAKKOLA_XI_FLOOR: f64 = 1e-6;

/// Logistic sigmoid, computed in whichever branch avoids overflow and
/// clamped to [1e-12, 1 - 1e-12].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// log(sigmoid(x)) without the intermediate probability.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// The Jaakkola bound coefficient B(xi) = (1/2 - sigmoid(xi)) / (2 xi).
///
/// B is even in xi (it enters the bound only through xi^2), strictly
/// negative, and tends to -1/8 as xi -> 0; the limit is substituted below
/// `1e-6` where the ratio becomes 0/0.
#[inline]
pub fn jaakkola_b(xi: f64) -> f64 {
    let x = xi.abs();
    if x < JAAKKOLA_XI_FLOOR {
        -0.125
    } else {
        (0.5 - sigmoid(x)) / (2.0 * x)
    }
}

/// log(sum(exp(v))) by max-shifting. Exact for a single element.
///
/// Panics on empty input: callers own the non-emptiness contract.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "log_sum_exp of empty sequence");
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (log of zero mass) or a NaN/inf poisoned input.
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-argument log-sum-exp, the common case in the contamination mixture.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if !hi.is_finite() {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense symmetric matrix in full row-major storage.
///
/// Represents covariances and the ECM normal-equation matrices; all of them
/// are positive definite by construction, which `cholesky` both exploits and
/// asserts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SymMatrix {
    n: usize,
    a: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            a: vec![0.0; n * n],
        }
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = s;
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
        self.a[j * self.n + i] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] += v;
        if i != j {
            self.a[j * self.n + i] += v;
        }
    }

    /// Adds to one entry without mirroring; for accumulation loops that
    /// visit both triangles themselves.
    #[inline]
    pub fn add_raw(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] += v;
    }

    /// Rank-one update: self += s * v v'.
    pub fn add_outer(&mut self, s: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.n);
        for i in 0..self.n {
            let si = s * v[i];
            for j in 0..self.n {
                self.a[i * self.n + j] += si * v[j];
            }
        }
    }

    /// Quadratic form v' A v.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.n);
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += v[i] * dot(&self.a[i * self.n..(i + 1) * self.n], v);
        }
        acc
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i * self.n + i]).sum()
    }

    /// Lower-triangular Cholesky factor. Fails (rather than limping) when a
    /// pivot is non-positive, which is how positive definiteness is asserted
    /// throughout the fitter.
    pub fn cholesky(&self) -> Result<Cholesky> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::breakdown(format!(
                            "cholesky pivot {s:.3e} at row {i} of a {n}x{n} system"
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, l })
    }
}

/// Lower-triangular factor L with A = L L'.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x = b.to_vec();
        // L y = b
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.l[i * n + k] * x[k];
            }
            x[i] /= self.l[i * n + i];
        }
        // L' x = y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.l[k * n + i] * x[k];
            }
            x[i] /= self.l[i * n + i];
        }
        x
    }

    /// log|A| from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n)
            .map(|i| self.l[i * self.n + i].ln())
            .sum::<f64>()
    }

    /// Full inverse, column by column. Only used on latent-dimension-sized
    /// matrices where the O(n^3) cost is negligible.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.n;
        let mut inv = SymMatrix::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e);
            e[j] = 0.0;
            for i in 0..n {
                inv.a[i * n + j] = col[i];
            }
        }
        // Symmetrize away roundoff drift between mirrored entries.
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv.a[i * n + j] + inv.a[j * n + i]);
                inv.a[i * n + j] = m;
                inv.a[j * n + i] = m;
            }
        }
        inv
    }
}

/// Solves A x = b for symmetric positive definite A, returning the solution
/// together with log|A| (reused by the bound evaluation).
pub fn solve_spd(a: &SymMatrix, b: &[f64]) -> Result<(Vec<f64>, f64)> {
    let chol = a.cholesky()?;
    let x = chol.solve(b);
    Ok((x, chol.log_det()))
}
