use crate::error::{Error, Result};

fn check(m: u64, delta: f64) -> Result<()> {
    if m < 1 {
        return Err(Error::invalid("token count M must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
    }
    Ok(())
}

/// Quantity term `sqrt(2 ln(4/δ) / M)` of the full-token error bound (natural log).
pub fn quantity_term(m: u64, delta: f64) -> Result<f64> {
    check(m, delta)?;
    Ok((2.0 * (4.0 / delta).ln() / m as f64).sqrt())
}

/// Upper bound on clean risk after learning from `M` tokens with noise rate `eta`:
/// `eta + sqrt(2 ln(4/δ) / M)`.
pub fn bound_rhs(eta: f64, m: u64, delta: f64) -> Result<f64> {
    // a realized noise fraction may reach 1 on tiny samples
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
    }
    Ok(eta + quantity_term(m, delta)?)
}

/// Noise reduction cleaning must achieve to beat full tokens when it keeps a
/// fraction `r_hat`: `sqrt(2 ln(4/δ)) * sqrt(1/M) * (sqrt(1/r_hat) - 1)`.
pub fn crossover_rhs(m: u64, delta: f64, r_hat: f64) -> Result<f64> {
    if !(r_hat > 0.0 && r_hat <= 1.0) {
        return Err(Error::invalid(format!("r_hat {r_hat} outside (0, 1]")));
    }
    Ok(quantity_term(m, delta)? * ((1.0 / r_hat).sqrt() - 1.0))
}
