//! Central finite-difference gradient checking.
//!
//! The checker only evaluates a scalar-valued closure at perturbed inputs,
//! so it is independent of how the analytic gradients were produced and can
//! audit anything from a single tape primitive to the full model stack.

use alloc::vec::Vec;

use crate::matrix::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Worst relative error found, with the offending location.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        // Both effectively zero: compare absolutely so tiny curvature noise
        // in the finite differences cannot dominate.
        (a - n).abs() * 1e3
    } else {
        (a - n).abs() / scale
    }
}

/// Compares `analytic` gradients of `f` w.r.t. each matrix in `inputs`
/// against central finite differences with step `h`.
pub fn check_gradients(
    inputs: &[Matrix],
    analytic: &[&Matrix],
    mut f: impl FnMut(&[Matrix]) -> f64,
    h: f64,
) -> GradCheckReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (mi, grad) in analytic.iter().enumerate() {
        assert_eq!(inputs[mi].shape(), grad.shape(), "gradient shape mismatch");
        for e in 0..inputs[mi].len() {
            let orig = work[mi].data()[e];
            work[mi].data_mut()[e] = orig + h;
            let fp = f(&work);
            work[mi].data_mut()[e] = orig - h;
            let fm = f(&work);
            work[mi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[e];
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: err,
                    worst_input: mi,
                    worst_entry: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    report
}
