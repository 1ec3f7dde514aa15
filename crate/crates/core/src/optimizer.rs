//! Receiver filter maximizing the aggregate SIR.
//!
//! The aggregate SIR of a filter `f` is the Rayleigh quotient
//! `f^H T1 f / f^H (T2 - T1) f`; its maximizer is the top eigenvector of the
//! Hermitian-definite pencil `(T1, T2 - T1)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::analytics::{AnalyticsConfig, QuadraticFormSet};
use crate::error::{Error, Result};
use crate::link::CancellationMode;
use crate::waveform::{FilterOrigin, GfdmGrid, ReceiverFilter, C64};

/// Diagonal loading tried in turn, relative to `trace(T2 - T1) / N`.
const LOADING_STEPS: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];
/// Eigenvalues within this relative distance of the top one count as tied.
const MULTIPLICITY_TOL: f64 = 1e-9;
const RESIDUAL_TARGET: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct OptimizationProblem {
    pub t1: DMatrix<C64>,
    pub t2: DMatrix<C64>,
    /// Diagonal loading added to `T2 - T1` before factorization.
    pub regularization: f64,
    /// `max |T1 - T1^H| / max |T1|` before symmetrization.
    pub hermitian_residue: f64,
}

impl OptimizationProblem {
    pub fn new(t1: DMatrix<C64>, t2: DMatrix<C64>) -> Result<Self> {
        let n = t1.nrows();
        if t1.ncols() != n || t2.nrows() != n || t2.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: t2.nrows(),
            });
        }
        let hermitian_residue = hermitian_residue(&t1);
        Ok(Self {
            t1: symmetrize(&t1),
            t2: symmetrize(&t2),
            regularization: 0.0,
            hermitian_residue,
        })
    }

    pub fn n(&self) -> usize {
        self.t1.nrows()
    }

    /// `T2 - T1 + regularization * I`.
    pub fn interference(&self) -> DMatrix<C64> {
        let mut b = &self.t2 - &self.t1;
        for i in 0..self.n() {
            b[(i, i)] += C64::new(self.regularization, 0.0);
        }
        b
    }
}

#[derive(Clone, Debug)]
pub struct OptimalFilter {
    pub f: ReceiverFilter,
    /// Top eigenvalue, equal to the aggregate SIR of `f` (linear).
    pub achieved_sir: f64,
    pub eigen_residual: f64,
    /// Number of eigenvalues tied with the top one.
    pub multiplicity: usize,
    /// Absolute diagonal loading that made the factorization succeed.
    pub loading: f64,
}

/// Assembles `T1`, `T2` for residual SI after C-DLC.
pub fn assemble_problem(cfg: &AnalyticsConfig) -> Result<OptimizationProblem> {
    assemble_problem_for(cfg, CancellationMode::CDlc)
}

/// Assembles `T1 = Σ B^H U B` and `T2 = Σ B^H (V^SI + V^R) B` over every
/// `(k', m')`, with `B = S_{k'} M_{m'}` and the residual SI taken after `mode`.
pub fn assemble_problem_for(cfg: &AnalyticsConfig, mode: CancellationMode) -> Result<OptimizationProblem> {
    let qf = QuadraticFormSet::build(cfg)?;
    let grid = *qf.grid();
    let n = grid.n();
    let mut t1 = DMatrix::<C64>::zeros(n, n);
    let mut t2 = DMatrix::<C64>::zeros(n, n);
    for (k, m) in grid.positions() {
        add_congruence(&mut t1, &qf.u_mapped(k, m), &grid, k, m);
        let v = qf.v_si(k, m, mode) + &qf.v_r;
        add_congruence(&mut t2, &v, &grid, k, m);
    }
    OptimizationProblem::new(t1, t2)
}

/// `acc += B^H a B` with `(B x)[n] = x[(n - m'K) mod N] exp(-j2πk'n/K)`.
fn add_congruence(acc: &mut DMatrix<C64>, a: &DMatrix<C64>, grid: &GfdmGrid, k_p: usize, m_p: usize) {
    let n = grid.n();
    let kk = grid.subcarriers();
    let shift = m_p * kk;
    let phase: Vec<C64> = (0..kk)
        .map(|q| C64::from_polar(1.0, 2.0 * PI * (k_p * q % kk) as f64 / kk as f64))
        .collect();
    for b in 0..n {
        let src_col = (b + shift) % n;
        for a_row in 0..n {
            let q = (a_row + kk * n - b) % kk;
            acc[(a_row, b)] += a[((a_row + shift) % n, src_col)] * phase[q];
        }
    }
}

fn symmetrize(a: &DMatrix<C64>) -> DMatrix<C64> {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

fn hermitian_residue(a: &DMatrix<C64>) -> f64 {
    let scale = a.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst / scale
}

fn factorize(b: &DMatrix<C64>) -> Result<(Cholesky<C64, Dyn>, f64)> {
    let n = b.nrows();
    let scale = (0..n).map(|i| b[(i, i)].re).sum::<f64>().abs() / n as f64;
    for step in LOADING_STEPS {
        let loading = step * scale;
        let mut loaded = b.clone();
        for i in 0..n {
            loaded[(i, i)] += C64::new(loading, 0.0);
        }
        if let Some(chol) = Cholesky::new(loaded) {
            // Complex Cholesky takes square roots of negative pivots instead of failing.
            let definite = chol
                .l_dirty()
                .diagonal()
                .iter()
                .all(|d| d.re > 0.0 && d.im.abs() <= 1e-12 * d.re);
            if definite {
                return Ok((chol, loading));
            }
        }
    }
    let min_eigenvalue = SymmetricEigen::new(b.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Err(Error::Indefinite { min_eigenvalue })
}

/// Top eigenpair of the pencil `(T1, T2 - T1)`.
pub fn solve(problem: &OptimizationProblem) -> Result<OptimalFilter> {
    let n = problem.n();
    let b = problem.interference();
    let (chol, loading) = factorize(&b)?;
    let l = chol.l();
    let y = l
        .solve_lower_triangular(&problem.t1)
        .ok_or(Error::SingularModulation)?;
    let c = l
        .solve_lower_triangular(&y.adjoint())
        .ok_or(Error::SingularModulation)?;
    let eig = SymmetricEigen::new(symmetrize(&c));
    let (top, lambda) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let multiplicity = eig
        .eigenvalues
        .iter()
        .filter(|v| (lambda - **v).abs() <= MULTIPLICITY_TOL * lambda.abs())
        .count();
    let mut x = l
        .adjoint()
        .solve_upper_triangular(&eig.eigenvectors.column(top).into_owned())
        .ok_or(Error::SingularModulation)?;
    x /= C64::new(x.norm(), 0.0);

    let mut b_loaded = b;
    for i in 0..n {
        b_loaded[(i, i)] += C64::new(loading, 0.0);
    }
    let mut lambda = rayleigh(&problem.t1, &b_loaded, &x);
    let mut residual = eigen_residual(&chol, &problem.t1, &x, lambda);
    for _ in 0..3 {
        if residual < RESIDUAL_TARGET {
            break;
        }
        let Some(refined) = inverse_iteration(&problem.t1, &b_loaded, &x, lambda) else {
            break;
        };
        let l2 = rayleigh(&problem.t1, &b_loaded, &refined);
        let r2 = eigen_residual(&chol, &problem.t1, &refined, l2);
        if r2 >= residual {
            break;
        }
        x = refined;
        lambda = l2;
        residual = r2;
    }

    canonicalize(&mut x);
    let f = ReceiverFilter::new(x.iter().copied().collect(), FilterOrigin::Optimal)?;
    Ok(OptimalFilter {
        f,
        achieved_sir: lambda,
        eigen_residual: residual,
        multiplicity,
        loading,
    })
}

fn rayleigh(t1: &DMatrix<C64>, b: &DMatrix<C64>, x: &DVector<C64>) -> f64 {
    x.dotc(&(t1 * x)).re / x.dotc(&(b * x)).re
}

/// `||B^{-1} T1 x - λ x|| / (λ ||x||)`.
fn eigen_residual(chol: &Cholesky<C64, Dyn>, t1: &DMatrix<C64>, x: &DVector<C64>, lambda: f64) -> f64 {
    let z = chol.solve(&(t1 * x));
    (z - x * C64::new(lambda, 0.0)).norm() / (lambda.abs() * x.norm())
}

fn inverse_iteration(t1: &DMatrix<C64>, b: &DMatrix<C64>, x: &DVector<C64>, lambda: f64) -> Option<DVector<C64>> {
    let shifted = t1 - b * C64::new(lambda * (1.0 + 1e-12), 0.0);
    let mut y = shifted.lu().solve(&(b * x))?;
    let norm = y.norm();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    y /= C64::new(norm, 0.0);
    Some(y)
}

/// Rotates `x` so its largest-magnitude tap (first on ties) is real-positive.
fn canonicalize(x: &mut DVector<C64>) {
    let peak = x
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    if let Some(pivot) = x.iter().find(|v| v.norm() >= peak * (1.0 - 1e-12)) {
        let rot = pivot.conj() / pivot.norm();
        x.iter_mut().for_each(|v| *v *= rot);
    }
}

/// Aggregate SIR `f^H T1 f / f^H (T2 - T1) f`; `+inf` for a zero denominator.
pub fn sir_of_filter(f: &[C64], problem: &OptimizationProblem) -> Result<f64> {
    if f.len() != problem.n() {
        return Err(Error::DimensionMismatch {
            expected: problem.n(),
            got: f.len(),
        });
    }
    if f.iter().all(|v| *v == C64::new(0.0, 0.0)) {
        return Err(Error::InvalidParameter("filter is zero".into()));
    }
    let x = DVector::from_column_slice(f);
    let num = x.dotc(&(&problem.t1 * &x)).re;
    let den = x.dotc(&(problem.interference() * &x)).re;
    Ok(if den > 0.0 { num / den } else { f64::INFINITY })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pencil() {
        let t1 = DMatrix::from_diagonal(&DVector::from_vec(vec![C64::new(2.0, 0.0), C64::new(1.0, 0.0)]));
        let t2 = &t1 + DMatrix::<C64>::identity(2, 2);
        let p = OptimizationProblem::new(t1, t2).unwrap();
        let opt = solve(&p).unwrap();
        assert!((opt.achieved_sir - 2.0).abs() < 1e-12);
        assert!((opt.f.taps()[0] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!(opt.f.taps()[1].norm() < 1e-12);
        assert_eq!(opt.multiplicity, 1);
        assert_eq!(opt.loading, 0.0);
    }

    #[test]
    fn tied_eigenvalues_are_flagged() {
        let t1 = DMatrix::<C64>::identity(3, 3);
        let t2 = &t1 * C64::new(2.0, 0.0);
        let opt = solve(&OptimizationProblem::new(t1, t2).unwrap()).unwrap();
        assert_eq!(opt.multiplicity, 3);
        assert!((opt.achieved_sir - 1.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_interference_is_reported() {
        let t1 = DMatrix::<C64>::identity(2, 2);
        let t2 = DMatrix::from_diagonal(&DVector::from_vec(vec![C64::new(3.0, 0.0), C64::new(0.5, 0.0)]));
        match solve(&OptimizationProblem::new(t1, t2).unwrap()) {
            Err(Error::Indefinite { min_eigenvalue }) => assert!((min_eigenvalue + 0.5).abs() < 1e-12),
            other => panic!("expected indefinite, got {other:?}"),
        }
    }

    #[test]
    fn sir_is_scale_invariant() {
        let t1 = DMatrix::from_fn(2, 2, |i, j| C64::new(if i == j { 2.0 } else { 0.3 }, 0.0));
        let t2 = &t1 * C64::new(3.0, 0.0);
        let p = OptimizationProblem::new(t1, t2).unwrap();
        let f = [C64::new(0.3, -0.2), C64::new(-1.0, 0.5)];
        let g: Vec<_> = f.iter().map(|v| v * C64::new(-2.0, 7.0)).collect();
        let a = sir_of_filter(&f, &p).unwrap();
        assert!((a - sir_of_filter(&g, &p).unwrap()).abs() < 1e-14 * a);
    }

    #[test]
    fn canonical_phase() {
        let mut x = DVector::from_vec(vec![C64::new(0.1, 0.1), C64::new(0.0, -2.0)]);
        canonicalize(&mut x);
        assert!(x[1].im.abs() < 1e-15 && x[1].re > 0.0);
    }
}
