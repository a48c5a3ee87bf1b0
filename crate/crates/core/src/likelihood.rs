//! Observation likelihoods shared by the model families and the evaluation
//! metrics: homoscedastic Gaussian with a learned scalar log-variance, and
//! Poisson counts with a softplus rate link.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// `ln Gamma(x)` via the Lanczos approximation; used for the `log(y!)` term
/// of Poisson likelihoods.
pub fn ln_gamma(x: f64) -> f64 {
    // g = 7, n = 9 coefficients.
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        let t = x + 7.5;
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

pub fn ln_factorial(y: f64) -> f64 {
    ln_gamma(y + 1.0)
}

/// Sum over elements of `log N(y; mean, var)`.
pub fn gaussian_loglik(y: &Tensor, mean: &Tensor, var: f64) -> f64 {
    debug_assert_eq!(y.shape, mean.shape);
    let mut ll = 0.0;
    for (yi, mi) in y.data.iter().zip(mean.data.iter()) {
        let r = yi - mi;
        ll += -0.5 * (r * r / var + var.ln() + LN_2PI);
    }
    ll
}

/// Sum over elements of the Poisson log-mass `y ln r - r - ln(y!)`.
pub fn poisson_loglik(y: &Tensor, rate: &Tensor) -> Result<f64> {
    debug_assert_eq!(y.shape, rate.shape);
    let mut ll = 0.0;
    for (&yi, &ri) in y.data.iter().zip(rate.data.iter()) {
        if yi < 0.0 {
            return Err(Error::NegativeCount(yi));
        }
        ll += yi * ri.ln() - ri - ln_factorial(yi);
    }
    Ok(ll)
}

/// Tape version of the Gaussian log-likelihood: `y` fixed, `mean` a tape
/// node of the same shape, `log_var` a scalar node. Returns the scalar sum.
pub fn gaussian_loglik_tape(tape: &mut Tape, y: &Tensor, mean: Var, log_var: Var) -> Var {
    let count = y.len() as f64;
    let y_node = tape.constant(y.clone());
    let resid = tape.sub(y_node, mean);
    let sq = tape.mul(resid, resid);
    let ssq = tape.sum(sq);
    let var = tape.exp(log_var);
    let inv_var = tape.recip(var);
    let quad = tape.mul_scalar(ssq, inv_var);
    let lv_term = tape.scale(log_var, count);
    let tq = tape.add(quad, lv_term);
    let tq2 = tape.shift(tq, count * LN_2PI);
    tape.scale(tq2, -0.5)
}

/// Tape version of the Poisson log-likelihood with the rate given as a
/// strictly positive node; the `ln(y!)` constant is included so values match
/// the pure route exactly.
pub fn poisson_loglik_tape(tape: &mut Tape, y: &Tensor, rate: Var) -> Result<Var> {
    let mut ln_fact = 0.0;
    for &yi in &y.data {
        if yi < 0.0 {
            return Err(Error::NegativeCount(yi));
        }
        ln_fact += ln_factorial(yi);
    }
    let y_node = tape.constant(y.clone());
    let ln_rate = tape.ln(rate);
    let y_ln_rate = tape.mul(y_node, ln_rate);
    let t1 = tape.sum(y_ln_rate);
    let t2 = tape.sum(rate);
    let diff = tape.sub(t1, t2);
    Ok(tape.shift(diff, -ln_fact))
}
