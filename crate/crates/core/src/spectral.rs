//! Spectra of finite transition matrices: peripheral eigenvalues, the
//! multiplicity of 1, distance from -1 and detailed-balance residuals.

use nalgebra::{Complex, DMatrix};

use crate::dual::MAX_MATRIX_DIM;
use crate::error::{Error, Result};

/// Default tolerance for counting eigenvalues at 1.
pub const DEFAULT_TOL: f64 = 1e-8;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Residual below which the symmetrized real solver is used.
const SYMMETRIZE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub eigenvalues: Vec<Complex<f64>>,
    pub modulus_max: f64,
    /// `min |mu + 1|` over the spectrum.
    pub gap_to_minus_one: f64,
    /// Eigenvalues with `|mu - 1| < tol`.
    pub one_multiplicity: usize,
    /// `max |pi(a) Q(a, b) - pi(b) Q(b, a)|`; 0 when no `pi` is given.
    pub detailed_balance_residual: f64,
    /// Whether the spectrum came from the symmetrized matrix.
    pub symmetrized: bool,
}

fn check_stochastic(q: &DMatrix<f64>) -> Result<()> {
    let n = q.nrows();
    if n != q.ncols() {
        return Err(Error::InvalidGeometry(format!("matrix is {}x{}", n, q.ncols())));
    }
    if n > MAX_MATRIX_DIM {
        return Err(Error::DimensionLimit {
            dim: n,
            limit: MAX_MATRIX_DIM,
        });
    }
    for r in 0..n {
        let row = q.row(r);
        let sum = row.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < -STOCHASTIC_TOL) {
            return Err(Error::NotStochastic { row: r, sum });
        }
    }
    Ok(())
}

pub fn detailed_balance_residual(q: &DMatrix<f64>, pi: &[f64]) -> f64 {
    let n = q.nrows();
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            worst = worst.max((pi[a] * q[(a, b)] - pi[b] * q[(b, a)]).abs());
        }
    }
    worst
}

/// Full eigen-decomposition of a row-stochastic matrix. With `pi` given and
/// detailed balance holding, `D^{1/2} Q D^{-1/2}` is symmetric and solved as
/// such; otherwise a general complex eigensolve is used.
pub fn spectrum_report(q: &DMatrix<f64>, pi: Option<&[f64]>, tol: f64) -> Result<SpectralReport> {
    check_stochastic(q)?;
    let n = q.nrows();
    let residual = match pi {
        Some(p) => {
            if p.len() != n {
                return Err(Error::DimensionMismatch(format!("{} weights for a {n}-state matrix", p.len())));
            }
            detailed_balance_residual(q, p)
        }
        None => 0.0,
    };
    let symmetric_route = matches!(pi, Some(p) if residual < SYMMETRIZE_TOL && p.iter().all(|&v| v > 0.0));
    let eigenvalues: Vec<Complex<f64>> = if symmetric_route {
        let p = pi.expect("checked above");
        let sq: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
        let mut s = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                s[(a, b)] = sq[a] * q[(a, b)] / sq[b];
            }
        }
        // Remove rounding asymmetry before the symmetric solver.
        let s = (&s + s.transpose()) * 0.5;
        s.symmetric_eigenvalues().iter().map(|&v| Complex::new(v, 0.0)).collect()
    } else {
        q.complex_eigenvalues().iter().cloned().collect()
    };
    let modulus_max = eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let gap_to_minus_one = eigenvalues
        .iter()
        .map(|z| (z + Complex::new(1.0, 0.0)).norm())
        .fold(f64::INFINITY, f64::min);
    let one_multiplicity = eigenvalues
        .iter()
        .filter(|z| (*z - Complex::new(1.0, 0.0)).norm() < tol)
        .count();
    Ok(SpectralReport {
        eigenvalues,
        modulus_max,
        gap_to_minus_one,
        one_multiplicity,
        detailed_balance_residual: residual,
        symmetrized: symmetric_route,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{exact_transition_kernel, single_particle_stationary, KernelMode};
    use crate::env::{ColonySize, Environment, Geometry};
    use crate::kernel::{MigrationKernel, SubordinateParams};
    use crate::rational::{int, to_f64};

    #[test]
    fn two_state_closed_form() {
        let q = DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]);
        for pi in [None, Some(&[0.5, 0.5][..])] {
            let r = spectrum_report(&q, pi, DEFAULT_TOL).unwrap();
            let mut ev: Vec<f64> = r.eigenvalues.iter().map(|z| z.re).collect();
            ev.sort_by(f64::total_cmp);
            assert!((ev[0] - 0.5).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);
            assert!((r.gap_to_minus_one - 1.5).abs() < 1e-14);
            assert_eq!(r.one_multiplicity, 1);
            assert_eq!(r.symmetrized, pi.is_some());
        }
    }

    #[test]
    fn rejects_non_stochastic() {
        let q = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.25, 0.75]);
        assert!(matches!(spectrum_report(&q, None, DEFAULT_TOL), Err(Error::NotStochastic { row: 0, .. })));
    }

    #[test]
    fn periodic_chain_hits_minus_one() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let r = spectrum_report(&q, None, DEFAULT_TOL).unwrap();
        assert!(r.gap_to_minus_one < 1e-12);
    }

    #[test]
    fn complex_spectrum_of_cycle() {
        let q = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let r = spectrum_report(&q, None, DEFAULT_TOL).unwrap();
        assert!((r.modulus_max - 1.0).abs() < 1e-12);
        assert_eq!(r.one_multiplicity, 1);
        assert!(r.eigenvalues.iter().any(|z| z.im.abs() > 0.5));
    }

    #[test]
    fn torus_eight_constant_environment() {
        let g = Geometry::torus(1, 8).unwrap();
        let env = Environment::constant(g, ColonySize::new(2, 2)).unwrap();
        let p = SubordinateParams::new(&MigrationKernel::preset("lazy-srw-1d").unwrap(), &int(1), 2).unwrap();
        let q = exact_transition_kernel(&env, &p, KernelMode::OneStep).unwrap();
        let pi: Vec<f64> = single_particle_stationary(&env, &p).unwrap().iter().map(to_f64).collect();
        let r = spectrum_report(&q, Some(&pi), DEFAULT_TOL).unwrap();
        assert!(r.symmetrized);
        assert_eq!(r.one_multiplicity, 1);
        assert!(r.gap_to_minus_one > 0.01);
        assert!(r.detailed_balance_residual <= 1e-12);
        assert!(r.modulus_max <= 1.0 + 1e-9);
        // Same spectrum from the general solver.
        let general = spectrum_report(&q, None, DEFAULT_TOL).unwrap();
        let mut a: Vec<f64> = r.eigenvalues.iter().map(|z| z.re).collect();
        let mut b: Vec<f64> = general.eigenvalues.iter().map(|z| z.re).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(general.eigenvalues.iter().all(|z| z.im.abs() < 1e-9));
    }
}
