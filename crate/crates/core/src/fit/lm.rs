//! Levenberg–Marquardt over residual vectors with forward-mode Jacobians.

use serde::{Deserialize, Serialize};

use crate::real::{Dual, Real};
use crate::render::{cholesky, cholesky_solve};

/// A least-squares objective `Σ r_k(x)²` generic over the scalar type.
pub trait Problem: Sync {
    fn num_params(&self) -> usize;
    fn num_residuals(&self) -> usize;
    /// Writes all residuals into `out` (cleared by the caller).
    fn residuals<T: Real>(&self, x: &[T], out: &mut Vec<T>);
}

/// Sum of squared residuals; `+inf` when any residual is non-finite.
pub fn loss<P: Problem>(p: &P, x: &[f64]) -> f64 {
    let mut r = Vec::with_capacity(p.num_residuals());
    p.residuals(x, &mut r);
    sum_sq(&r)
}

fn sum_sq(r: &[f64]) -> f64 {
    let s: f64 = r.iter().map(|v| v * v).sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Residuals and row-major Jacobian (`m × n`) at `x`.
pub fn jacobian<P: Problem>(p: &P, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match x.len() {
        0 => {
            let mut r = Vec::new();
            p.residuals(x, &mut r);
            (r, Vec::new())
        }
        1..=4 => jacobian_chunked::<P, 4>(p, x),
        5 => jacobian_chunked::<P, 5>(p, x),
        6 => jacobian_chunked::<P, 6>(p, x),
        7..=8 => jacobian_chunked::<P, 8>(p, x),
        9..=10 => jacobian_chunked::<P, 10>(p, x),
        _ => jacobian_chunked::<P, 12>(p, x),
    }
}

fn jacobian_chunked<P: Problem, const K: usize>(p: &P, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let m = p.num_residuals();
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut out: Vec<Dual<K>> = Vec::with_capacity(m);
    for start in (0..n).step_by(K) {
        let xs: Vec<Dual<K>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if i >= start && i < start + K {
                    Dual::var(v, i - start)
                } else {
                    Dual::cst(v)
                }
            })
            .collect();
        out.clear();
        p.residuals(&xs, &mut out);
        debug_assert_eq!(out.len(), m);
        for (k, d) in out.iter().enumerate() {
            r[k] = d.v;
            for j in start..(start + K).min(n) {
                jac[k * n + j] = d.d[j - start];
            }
        }
    }
    (r, jac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Initial damping relative to the Gauss–Newton diagonal.
    pub mu0: f64,
    /// Stop when an accepted step lowers the loss by less than this fraction.
    pub rel_tol: f64,
    /// Stop when the loss falls below this value.
    pub abs_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 60,
            mu0: 1e-3,
            rel_tol: 1e-7,
            abs_tol: 1e-14,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmResult {
    pub x: Vec<f64>,
    pub loss: f64,
    /// Loss after every accepted step, starting with the initial loss.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Minimizes `p` from `x0`. Only loss-decreasing steps are accepted, so the
/// returned trace is non-increasing.
pub fn minimize<P: Problem>(p: &P, x0: &[f64], opts: &LmOptions) -> LmResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut r, mut jac) = jacobian(p, &x);
    let mut f = sum_sq(&r);
    let mut trace = vec![f];
    let mut mu = opts.mu0;
    let mut iterations = 0;
    if n == 0 || !f.is_finite() {
        return LmResult {
            x,
            loss: f,
            trace,
            iterations,
        };
    }
    let m = r.len();
    let mut jtj = vec![0.0; n * n];
    let mut g = vec![0.0; n];
    'outer: while iterations < opts.max_iters && f > opts.abs_tol {
        iterations += 1;
        jtj.iter_mut().for_each(|v| *v = 0.0);
        g.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..m {
            let row = &jac[k * n..(k + 1) * n];
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                g[i] += row[i] * r[k];
                for j in i..n {
                    jtj[i * n + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                jtj[i * n + j] = jtj[j * n + i];
            }
        }
        let max_diag = (0..n).map(|i| jtj[i * n + i]).fold(0.0, f64::max);
        if max_diag == 0.0 {
            break;
        }
        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                a[i * n + i] += mu * jtj[i * n + i].max(1e-9 * max_diag);
            }
            let step = cholesky(&a, n).map(|l| {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                cholesky_solve(&l, n, &neg)
            });
            if let Some(step) = step {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
                let ft = loss(p, &trial);
                if ft < f {
                    let rel = (f - ft) / f;
                    x = trial;
                    f = ft;
                    trace.push(f);
                    mu = (mu * 0.3).max(1e-12);
                    if rel < opts.rel_tol {
                        break 'outer;
                    }
                    break;
                }
            }
            mu *= 10.0;
            if mu > 1e10 {
                break 'outer;
            }
        }
        let (nr, nj) = jacobian(p, &x);
        r = nr;
        jac = nj;
    }
    LmResult {
        x,
        loss: f,
        trace,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Problem for Rosenbrock {
        fn num_params(&self) -> usize {
            2
        }
        fn num_residuals(&self) -> usize {
            2
        }
        fn residuals<T: Real>(&self, x: &[T], out: &mut Vec<T>) {
            out.push((x[1] - x[0] * x[0]) * 10.0);
            out.push(T::one() - x[0]);
        }
    }

    /// Fits `a·exp(b·t) + c` to exact data.
    struct ExpFit {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl Problem for ExpFit {
        fn num_params(&self) -> usize {
            3
        }
        fn num_residuals(&self) -> usize {
            self.t.len()
        }
        fn residuals<T: Real>(&self, x: &[T], out: &mut Vec<T>) {
            for (&t, &y) in self.t.iter().zip(&self.y) {
                out.push(x[0] * (x[1] * t).exp() + x[2] - y);
            }
        }
    }

    #[test]
    fn solves_rosenbrock_with_monotone_trace() {
        let res = minimize(&Rosenbrock, &[-1.2, 1.0], &LmOptions::default());
        assert!(res.loss < 1e-12, "{}", res.loss);
        assert!((res.x[0] - 1.0).abs() < 1e-5);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let y = t.iter().map(|&t| 2.0 * (-0.7 * t).exp() + 0.3).collect();
        let p = ExpFit { t, y };
        let x = [1.5, -0.4, 0.1];
        let (_, jac) = jacobian(&p, &x);
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (mut rp, mut rm) = (Vec::new(), Vec::new());
            p.residuals(&xp, &mut rp);
            p.residuals(&xm, &mut rm);
            for k in 0..20 {
                let fd = (rp[k] - rm[k]) / (2.0 * h);
                assert!((jac[k * 3 + j] - fd).abs() < 1e-6);
            }
        }
        let res = minimize(&p, &x, &LmOptions::default());
        assert!((res.x[0] - 2.0).abs() < 1e-6 && (res.x[1] + 0.7).abs() < 1e-6);
    }

    #[test]
    fn chunked_jacobian_agrees_for_many_parameters() {
        struct Wide;
        impl Problem for Wide {
            fn num_params(&self) -> usize {
                15
            }
            fn num_residuals(&self) -> usize {
                15
            }
            fn residuals<T: Real>(&self, x: &[T], out: &mut Vec<T>) {
                for i in 0..15 {
                    out.push(x[i] * x[(i + 1) % 15] + x[i].sin());
                }
            }
        }
        let x: Vec<f64> = (0..15).map(|i| 0.1 * i as f64).collect();
        let (_, jac) = jacobian(&Wide, &x);
        for i in 0..15 {
            let next = (i + 1) % 15;
            assert!((jac[i * 15 + i] - (x[next] + x[i].cos())).abs() < 1e-12);
            assert!((jac[i * 15 + next] - x[i]).abs() < 1e-12);
        }
    }
}
