//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: it only needs a deterministic scalar function
//! of the parameters. Relative error uses a symmetric denominator with a
//! 1e-12 floor so exact zeros compare as zero error.
//!
//! A central difference cannot resolve gradient entries smaller than
//! roughly ulp(f) / (2 * step): the two function values differ by less
//! than their own rounding error. Entries whose absolute deviation stays
//! under that noise floor therefore count as passing even when their
//! relative error does not clear the tolerance; the reported relative
//! errors are left untouched so the noise is still visible.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradReport {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub num_scalars: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// absolute deviation below which an entry is finite-difference noise
    pub noise_floor: f64,
    /// entries that failed the relative tolerance but sat under the floor
    pub num_noise_excused: usize,
    pub pass: bool,
    pub per_param: Vec<ParamGradReport>,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Compares `analytic` (name -> gradient tensor, same shapes as the
/// parameters) against central differences of `f` over every scalar in
/// `params`. `f` must be deterministic; this is verified by evaluating it
/// twice up front.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParameterStore,
    analytic: &[(String, Tensor)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite_diff_check: step must be > 0".into()));
    }
    let base1 = f(params)?;
    let base2 = f(params)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::InvalidArgument(
            "finite_diff_check: f is not deterministic (two evaluations disagree)".into(),
        ));
    }

    let noise_floor = 16.0 * f64::EPSILON * base1.abs().max(1.0) / (2.0 * step);

    let mut work = params.clone();
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut num_noise_excused = 0usize;
    let mut all_pass = true;
    for p in params.iter() {
        let ad = analytic
            .iter()
            .find(|(n, _)| n == &p.name)
            .map(|(_, g)| g)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no analytic gradient for parameter {}", p.name))
            })?;
        if ad.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                detail: format!("gradient shape for {} is {:?}, parameter is {:?}", p.name, ad.shape(), p.value.shape()),
            });
        }
        let mut param_max = 0.0f64;
        for idx in 0..p.value.len() {
            let orig = p.value.data()[idx];
            work.get_mut(&p.name).unwrap().data_mut()[idx] = orig + step;
            let fp = f(&work)?;
            work.get_mut(&p.name).unwrap().data_mut()[idx] = orig - step;
            let fm = f(&work)?;
            work.get_mut(&p.name).unwrap().data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let e = rel_err(fd, ad.data()[idx]);
            if e > param_max {
                param_max = e;
            }
            if e >= tol {
                if (fd - ad.data()[idx]).abs() <= noise_floor {
                    num_noise_excused += 1;
                } else {
                    all_pass = false;
                }
            }
        }
        if param_max > max_rel {
            max_rel = param_max;
            worst = p.name.clone();
        }
        per_param.push(ParamGradReport { name: p.name.clone(), max_rel_err: param_max });
    }

    Ok(GradCheckReport {
        step,
        tol,
        num_scalars: params.num_scalars(),
        max_rel_err: max_rel,
        worst_param: worst,
        noise_floor,
        num_noise_excused,
        pass: all_pass,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let mut params = ParameterStore::new();
        params.insert("x", Tensor::scalar(3.0), false).unwrap();
        let f = |p: &ParameterStore| Ok(p.get("x").unwrap().item().powi(2));
        let analytic = vec![("x".to_string(), Tensor::scalar(6.0))];
        let rep = finite_diff_check(f, &params, &analytic, 1e-6, 1e-9).unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = ParameterStore::new();
        params.insert("x", Tensor::from_vec(vec![1.0, -2.0]), false).unwrap();
        let f = |_: &ParameterStore| Ok(7.5);
        let analytic = vec![("x".to_string(), Tensor::zeros(vec![2]))];
        let rep = finite_diff_check(f, &params, &analytic, 1e-6, 1e-12).unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn nondeterministic_f_is_rejected() {
        let mut params = ParameterStore::new();
        params.insert("x", Tensor::scalar(0.0), false).unwrap();
        let mut calls = 0u64;
        let f = move |_: &ParameterStore| {
            calls += 1;
            Ok(calls as f64)
        };
        assert!(finite_diff_check(f, &params, &[], 1e-6, 1e-6).is_err());
    }

    #[test]
    fn wrong_gradient_fails_tolerance() {
        let mut params = ParameterStore::new();
        params.insert("x", Tensor::scalar(2.0), false).unwrap();
        let f = |p: &ParameterStore| Ok(p.get("x").unwrap().item().powi(2));
        let analytic = vec![("x".to_string(), Tensor::scalar(1.0))]; // truth is 4
        let rep = finite_diff_check(f, &params, &analytic, 1e-6, 1e-6).unwrap();
        assert!(!rep.pass);
    }
}
