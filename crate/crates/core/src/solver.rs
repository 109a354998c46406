//! Per-frame phase recovery as a Hermitian tridiagonal least-squares solve.
//!
//! The normal equations `(Λ + DᴴΓD) z = Λ (y_prev ⊙ 𝔳)` are assembled directly
//! as three diagonals, where `D` has `−𝔲` on its main diagonal and ones on the
//! diagonal above. [`thomas_solve`] solves them in one forward/backward sweep.
//! [`dense_solve_oracle`] and [`iterative_solve`] exist for validation and
//! benchmarking.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::ComplexRatios;

/// Relative diagonal shift added before every solve.
pub const REGULARIZATION: f64 = 1e-12;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `A x = rhs` with `A` Hermitian tridiagonal.
///
/// `lower[l]` is entry `(l+1, l)` and `upper[l]` is entry `(l, l+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalHermitianSystem {
    pub diag: Vec<f64>,
    pub lower: Vec<Complex64>,
    pub upper: Vec<Complex64>,
    pub rhs: Vec<Complex64>,
}

impl TridiagonalHermitianSystem {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.diag.len();
        if n == 0
            || self.rhs.len() != n
            || self.lower.len() + 1 != n
            || self.upper.len() + 1 != n
        {
            return Err(Error::Shape(format!(
                "tridiagonal system: diag {}, lower {}, upper {}, rhs {}",
                n,
                self.lower.len(),
                self.upper.len(),
                self.rhs.len()
            )));
        }
        Ok(())
    }

    /// Diagonal shift applied by all solvers.
    pub fn regularization_shift(&self) -> f64 {
        REGULARIZATION * self.diag.iter().fold(0.0f64, |m, d| m.max(*d))
    }

    /// `y = A x` without the regularization shift.
    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = x[i] * self.diag[i];
            if i > 0 {
                acc += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            y[i] = acc;
        }
    }

    /// Row-major `n × n` materialization.
    pub fn to_dense(&self) -> Vec<Complex64> {
        let mut a = Vec::new();
        self.to_dense_into(&mut a);
        a
    }

    /// [`Self::to_dense`] into a reused buffer.
    pub fn to_dense_into(&self, a: &mut Vec<Complex64>) {
        let n = self.len();
        a.clear();
        a.resize(n * n, ZERO);
        for i in 0..n {
            a[i * n + i] = Complex64::new(self.diag[i], 0.0);
            if i + 1 < n {
                a[(i + 1) * n + i] = self.lower[i];
                a[i * n + i + 1] = self.upper[i];
            }
        }
    }

    pub fn inf_norm(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i].abs();
                if i > 0 {
                    s += self.lower[i - 1].norm();
                }
                if i + 1 < n {
                    s += self.upper[i].norm();
                }
                s
            })
            .fold(0.0, f64::max)
    }
}

/// Diagonals of `Λ` (length `L+1`) and `Γ` (length `L`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFrame {
    pub lambda_w: Vec<f64>,
    pub gamma_w: Vec<f64>,
}

impl WeightFrame {
    fn validate(&self) -> Result<()> {
        let all = self.lambda_w.iter().chain(&self.gamma_w);
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Shape("weights must be finite and nonnegative".into()));
        }
        if all.clone().all(|w| *w == 0.0) {
            return Err(Error::Shape("weights are all zero".into()));
        }
        Ok(())
    }
}

/// How `Λ` and `Γ` are derived from the two frames' magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `λ_l = |Y_prev[l]|·|Y[l]|`, `γ_l = |Y[l]|·|Y[l+1]|`.
    #[default]
    Geometric,
    /// `λ_l = |Y[l]|²`, `γ_l = |Y[l]|²`.
    SquaredCurrent,
    Uniform,
    /// `Γ = 0`: pure propagation along time.
    TimeOnly,
}

impl WeightScheme {
    pub fn weights(self, mag_prev: &[f64], mag_cur: &[f64]) -> WeightFrame {
        let n = mag_cur.len();
        match self {
            WeightScheme::Geometric => WeightFrame {
                lambda_w: mag_prev.iter().zip(mag_cur).map(|(p, c)| p * c).collect(),
                gamma_w: mag_cur.windows(2).map(|m| m[0] * m[1]).collect(),
            },
            WeightScheme::SquaredCurrent => WeightFrame {
                lambda_w: mag_cur.iter().map(|m| m * m).collect(),
                gamma_w: mag_cur[..n - 1].iter().map(|m| m * m).collect(),
            },
            WeightScheme::Uniform => WeightFrame {
                lambda_w: vec![1.0; n],
                gamma_w: vec![1.0; n - 1],
            },
            WeightScheme::TimeOnly => WeightFrame {
                lambda_w: vec![1.0; n],
                gamma_w: vec![0.0; n - 1],
            },
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "squared-current" => Ok(Self::SquaredCurrent),
            "uniform" => Ok(Self::Uniform),
            "time-only" => Ok(Self::TimeOnly),
            other => Err(format!("unknown weight scheme `{other}`")),
        }
    }
}

/// Assembles the three diagonals and the right-hand side.
pub fn build_system(
    ratios: &ComplexRatios,
    prev_frame: &[Complex64],
    weights: &WeightFrame,
) -> Result<TridiagonalHermitianSystem> {
    let n = prev_frame.len();
    if n == 0
        || ratios.v_ratio.len() != n
        || ratios.u_ratio.len() + 1 != n
        || weights.lambda_w.len() != n
        || weights.gamma_w.len() + 1 != n
    {
        return Err(Error::Shape(format!(
            "build_system: prev {n}, v {}, u {}, lambda {}, gamma {}",
            ratios.v_ratio.len(),
            ratios.u_ratio.len(),
            weights.lambda_w.len(),
            weights.gamma_w.len()
        )));
    }
    weights.validate()?;

    let mut diag = weights.lambda_w.clone();
    let mut lower = Vec::with_capacity(n - 1);
    let mut upper = Vec::with_capacity(n - 1);
    for (l, (u, &g)) in ratios.u_ratio.iter().zip(&weights.gamma_w).enumerate() {
        let d = -*u;
        diag[l] += g * d.norm_sqr();
        diag[l + 1] += g;
        lower.push(d * g);
        upper.push(d.conj() * g);
    }
    let rhs = prev_frame
        .iter()
        .zip(&ratios.v_ratio)
        .zip(&weights.lambda_w)
        .map(|((p, v), lam)| p * v * *lam)
        .collect();
    Ok(TridiagonalHermitianSystem {
        diag,
        lower,
        upper,
        rhs,
    })
}

/// Thomas' algorithm with caller-provided scratch of length `n`; writes the
/// solution into `out`. Pivot-free: the regularized matrix is positive
/// definite.
pub fn thomas_solve_into(
    sys: &TridiagonalHermitianSystem,
    scratch: &mut [Complex64],
    out: &mut [Complex64],
) -> Result<()> {
    sys.check_shape()?;
    let n = sys.len();
    if scratch.len() < n || out.len() != n {
        return Err(Error::Shape("thomas_solve_into: buffer lengths".into()));
    }
    let shift = sys.regularization_shift();
    let pivot_ok = |p: Complex64| p.norm() > 0.0 && p.re.is_finite() && p.im.is_finite();

    // Forward sweep: scratch holds the modified super-diagonal, out the
    // modified right-hand side.
    let mut pivot = Complex64::new(sys.diag[0] + shift, 0.0);
    if !pivot_ok(pivot) {
        return Err(Error::ZeroPivot { row: 0 });
    }
    if n > 1 {
        scratch[0] = sys.upper[0] / pivot;
    }
    out[0] = sys.rhs[0] / pivot;
    for i in 1..n {
        let a = sys.lower[i - 1];
        pivot = Complex64::new(sys.diag[i] + shift, 0.0) - a * scratch[i - 1];
        if !pivot_ok(pivot) {
            return Err(Error::ZeroPivot { row: i });
        }
        if i + 1 < n {
            scratch[i] = sys.upper[i] / pivot;
        }
        out[i] = (sys.rhs[i] - a * out[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        let next = out[i + 1];
        out[i] -= scratch[i] * next;
    }
    Ok(())
}

pub fn thomas_solve(sys: &TridiagonalHermitianSystem) -> Result<Vec<Complex64>> {
    let n = sys.len();
    let mut scratch = vec![ZERO; n];
    let mut out = vec![ZERO; n];
    thomas_solve_into(sys, &mut scratch, &mut out)?;
    Ok(out)
}

/// Gaussian elimination with partial pivoting on the materialized `n × n`
/// matrix. Row updates whose multiplier is exactly zero are skipped.
pub fn dense_solve_oracle(sys: &TridiagonalHermitianSystem) -> Result<Vec<Complex64>> {
    dense_solve_oracle_in(sys, &mut Vec::new())
}

/// [`dense_solve_oracle`] with the `n × n` matrix stored in `a`, so repeated
/// solves avoid a fresh allocation each time.
pub fn dense_solve_oracle_in(sys: &TridiagonalHermitianSystem, a: &mut Vec<Complex64>) -> Result<Vec<Complex64>> {
    sys.check_shape()?;
    let n = sys.len();
    let shift = sys.regularization_shift();
    sys.to_dense_into(a);
    for i in 0..n {
        a[i * n + i] += shift;
    }
    let mut b = sys.rhs.clone();

    // Rows with a nonzero entry in the current column, gathered during the
    // pivot search so the column is read once. Pivots are chosen by
    // |re| + |im|, as in LAPACK's zgetrf.
    let mut rows = Vec::new();
    for k in 0..n {
        rows.clear();
        let (mut p, mut best) = (k, 0.0);
        for r in k..n {
            let v = a[r * n + k];
            if v != ZERO {
                rows.push(r);
                let m = v.l1_norm();
                if m > best {
                    (p, best) = (r, m);
                }
            }
        }
        if !(best > 0.0) || !best.is_finite() {
            return Err(Error::Singular(k));
        }
        if p != k {
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
            b.swap(k, p);
            for r in &mut rows {
                if *r == p {
                    *r = k;
                } else if *r == k {
                    *r = p;
                }
            }
        }
        let inv = Complex64::new(1.0, 0.0) / a[k * n + k];
        for &r in rows.iter().filter(|r| **r > k) {
            let factor = a[r * n + k] * inv;
            let (top, bottom) = a.split_at_mut(r * n);
            let pivot_row = &top[k * n + k..k * n + n];
            for (dst, src) in bottom[k..n].iter_mut().zip(pivot_row) {
                *dst -= factor * src;
            }
            let bk = b[k];
            b[r] -= factor * bk;
        }
    }
    let mut x = vec![ZERO; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= a[i * n + j] * x[j];
        }
        x[i] = acc / a[i * n + i];
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub x: Vec<Complex64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients using only the three diagonals.
/// Stops when `‖b − Ax‖/‖b‖ < tol` or after `max_iter` iterations.
pub fn iterative_solve(
    sys: &TridiagonalHermitianSystem,
    tol: f64,
    max_iter: usize,
) -> Result<IterativeOutcome> {
    sys.check_shape()?;
    if !(tol > 0.0) {
        return Err(Error::Shape(format!("tolerance must be positive, got {tol}")));
    }
    let n = sys.len();
    let shift = sys.regularization_shift();
    let inv_diag: Vec<f64> = sys
        .diag
        .iter()
        .map(|d| {
            let d = d + shift;
            if d > 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    let apply = |x: &[Complex64], y: &mut [Complex64]| {
        sys.matvec(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += xi * shift;
        }
    };
    let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
        a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
    };
    let norm = |a: &[Complex64]| a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();

    let b_norm = norm(&sys.rhs);
    let mut x = vec![ZERO; n];
    if b_norm == 0.0 {
        return Ok(IterativeOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut r = sys.rhs.clone();
    let mut z: Vec<Complex64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut ap = vec![ZERO; n];
    let mut rz = dot(&r, &z).re;
    let mut rel = 1.0;
    let mut iterations = 0;
    while iterations < max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap).re;
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        iterations += 1;
        rel = norm(&r) / b_norm;
        if rel < tol {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z).re;
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
    }
    Ok(IterativeOutcome {
        x,
        iterations,
        relative_residual: rel,
        converged: rel < tol,
    })
}
