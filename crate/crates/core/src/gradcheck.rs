//! Central finite differences against reverse-mode gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::params::Params;
use crate::tensor::Tensor;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor of [`rel_error`]; keeps float64 round-off in
/// near-zero gradients from reading as a mismatch.
pub const REL_FLOOR: f64 = 1e-6;

/// Multiple of the difference quotient's round-off `ε·|f|/h` below which a
/// gradient counts as zero.
pub const NOISE_FACTOR: f64 = 1e5;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floor(analytic, numeric, REL_FLOOR)
}

pub fn rel_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = libm::fabs(analytic).max(libm::fabs(numeric)).max(floor);
    libm::fabs(analytic - numeric) / scale
}

/// A central difference and its round-off level `ε·max|f(p ± h)|/h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Difference {
    pub value: f64,
    pub noise: f64,
}

impl Difference {
    pub fn floor(&self) -> f64 {
        (NOISE_FACTOR * self.noise).max(REL_FLOOR)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `(f(p + h) − f(p − h)) / 2h` for one entry. `f` returns the loss and a
/// routing signature; `None` when the signature differs between the two
/// evaluations (the loss is not differentiable across a routing change).
pub fn central_difference(
    params: &Params,
    name: &str,
    index: usize,
    h: f64,
    f: &mut impl FnMut(&Params) -> Result<(f64, Vec<usize>)>,
) -> Result<Option<Difference>> {
    let mut p = params.clone();
    let orig = p.get(name)?.data()[index];
    p.get_mut(name)?.data_mut()[index] = orig + h;
    let (plus, sig_plus) = f(&p)?;
    p.get_mut(name)?.data_mut()[index] = orig - h;
    let (minus, sig_minus) = f(&p)?;
    if sig_plus != sig_minus {
        return Ok(None);
    }
    Ok(Some(Difference {
        value: (plus - minus) / (2.0 * h),
        noise: f64::EPSILON * libm::fabs(plus).max(libm::fabs(minus)) / h,
    }))
}

/// Checks `per_tensor` random entries of every tensor in `names`.
pub fn check_params(
    params: &Params,
    names: &[String],
    grads: &BTreeMap<String, Tensor>,
    per_tensor: usize,
    rng: &mut impl Rng,
    mut f: impl FnMut(&Params) -> Result<(f64, Vec<usize>)>,
) -> Result<Vec<Probe>> {
    let mut out = Vec::new();
    for name in names {
        let n = params.get(name)?.numel();
        for _ in 0..per_tensor.min(n) {
            let index = rng.random_range(0..n);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[index]);
            if let Some(d) = central_difference(params, name, index, STEP, &mut f)? {
                out.push(Probe {
                    name: name.clone(),
                    index,
                    analytic,
                    numeric: d.value,
                    rel_error: rel_error_floor(analytic, d.value, d.floor()),
                });
            }
        }
    }
    Ok(out)
}
