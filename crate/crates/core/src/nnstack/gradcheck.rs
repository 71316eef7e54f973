//! Central-difference gradient checking.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::graph::{Graph, Var};

/// Agreement between analytic gradients and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Largest per-coordinate `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_relative: f64,
    /// `||a - n|| / max(||a||, ||n||, 1e-8)` over all coordinates at once.
    pub normwise: f64,
}

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `f` around `point`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(point: &[Matrix], analytic: &[Matrix], eps: f64, f: F) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    finite_diff_report(point, analytic, eps, f).map(|r| r.max_relative)
}

/// Like [`finite_diff_check`], also reporting the norm-wise error, which is
/// not dominated by coordinates whose true gradient happens to be near zero.
pub fn finite_diff_report<F>(point: &[Matrix], analytic: &[Matrix], eps: f64, mut f: F) -> Result<FdReport>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Input(format!("eps must be positive, got {eps}")));
    }
    if point.len() != analytic.len() || point.iter().zip(analytic).any(|(p, a)| p.shape() != a.shape()) {
        return Err(Error::shape("finite_diff_check", "analytic gradients do not match the point"));
    }
    let mut probe: Vec<Matrix> = point.to_vec();
    let mut worst = 0.0f64;
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0f64, 0.0f64, 0.0f64);
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = probe[ti].as_slice()[k];
            probe[ti].as_mut_slice()[k] = orig + eps;
            let fp = f(&probe)?;
            probe[ti].as_mut_slice()[k] = orig - eps;
            let fm = f(&probe)?;
            probe[ti].as_mut_slice()[k] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("f at tensor {ti}, coordinate {k}")));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.as_slice()[k];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-8);
            worst = worst.max(libm::fabs(a - numeric) / denom);
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
    }
    let denom = libm::sqrt(a_sq).max(libm::sqrt(n_sq)).max(1e-8);
    Ok(FdReport {
        max_relative: worst,
        normwise: libm::sqrt(diff_sq) / denom,
    })
}

/// Analytic gradients of a graph-built scalar, one per input tensor.
pub fn graph_gradients<F>(point: &[Matrix], build: &mut F) -> Result<(f64, Vec<Matrix>)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|m| g.leaf(m.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let value = g.scalar_value(root);
    Ok((value, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
}

/// Build the scalar once with leaves for `point`, backpropagate, and compare
/// against central differences of the same construction.
pub fn check_graph<F>(point: &[Matrix], eps: f64, build: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    check_graph_report(point, eps, build).map(|r| r.max_relative)
}

pub fn check_graph_report<F>(point: &[Matrix], eps: f64, mut build: F) -> Result<FdReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = graph_gradients(point, &mut build)?;
    finite_diff_report(point, &analytic, eps, |p| {
        let mut g = Graph::new();
        let vars: Vec<Var> = p.iter().map(|m| g.constant(m.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.scalar_value(root))
    })
}
