//! Subjective-logic opinions over Dirichlet evidence.
//!
//! A multinomial opinion carries belief masses `b`, an uncertainty mass `u`
//! and base rates `a`, with `sum(b) + u = 1`. Evidence `r >= 0` maps to
//! Dirichlet strengths via `alpha = r + a * W`, where `W` is the
//! non-informative prior weight (`W = K`, `a = 1/K` by default, so
//! `alpha = r + 1`). Vacuity is `W / S`, dissonance the belief-balance sum.
//!
//! Everything here is pure and immutable after construction.

use crate::error::{Error, Result};
use crate::math::ln_gamma;

/// Absolute tolerance for simplex/additivity checks.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A multinomial subjective opinion `(b, u, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Opinion {
    belief: Vec<f64>,
    uncertainty: f64,
    base_rate: Vec<f64>,
}

impl Opinion {
    pub fn new(belief: Vec<f64>, uncertainty: f64, base_rate: Vec<f64>) -> Result<Self> {
        if belief.len() < 2 {
            return Err(Error::Domain("opinion needs at least 2 classes".into()));
        }
        if belief.len() != base_rate.len() {
            return Err(Error::Domain("belief/base_rate length mismatch".into()));
        }
        if belief.iter().any(|&b| b < 0.0) || uncertainty < 0.0 {
            return Err(Error::Domain("belief and uncertainty must be nonnegative".into()));
        }
        let total: f64 = belief.iter().sum::<f64>() + uncertainty;
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!(
                "belief masses and uncertainty sum to {total}, expected 1"
            )));
        }
        validate_base_rate(&base_rate)?;
        Ok(Opinion { belief, uncertainty, base_rate })
    }

    pub fn num_classes(&self) -> usize {
        self.belief.len()
    }

    pub fn belief(&self) -> &[f64] {
        &self.belief
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    pub fn base_rate(&self) -> &[f64] {
        &self.base_rate
    }

    /// Projected probability `P(y) = b(y) + a(y) * u`.
    pub fn projected_probability(&self) -> Vec<f64> {
        self.belief
            .iter()
            .zip(&self.base_rate)
            .map(|(b, a)| b + a * self.uncertainty)
            .collect()
    }
}

fn validate_base_rate(base_rate: &[f64]) -> Result<()> {
    if base_rate.iter().any(|&a| a <= 0.0) {
        return Err(Error::Domain("base rates must be strictly positive".into()));
    }
    let sum: f64 = base_rate.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("base rates sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Dirichlet strength parameters `alpha = evidence + base_rate * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    prior_weight: f64,
    base_rate: Vec<f64>,
}

impl DirichletParams {
    /// Builds parameters from nonnegative evidence (the `alpha = r + a*W` map).
    pub fn from_evidence(evidence: &[f64], prior_weight: f64, base_rate: &[f64]) -> Result<Self> {
        if evidence.len() < 2 {
            return Err(Error::Domain("evidence needs at least 2 classes".into()));
        }
        if evidence.len() != base_rate.len() {
            return Err(Error::Domain("evidence/base_rate length mismatch".into()));
        }
        if let Some(e) = evidence.iter().find(|&&e| e < 0.0) {
            return Err(Error::Domain(format!("negative evidence entry {e}")));
        }
        if prior_weight <= 0.0 {
            return Err(Error::Domain("prior weight must be positive".into()));
        }
        validate_base_rate(base_rate)?;
        let alpha = evidence
            .iter()
            .zip(base_rate)
            .map(|(r, a)| r + a * prior_weight)
            .collect();
        Ok(DirichletParams {
            alpha,
            prior_weight,
            base_rate: base_rate.to_vec(),
        })
    }

    /// Evidence with the non-informative defaults `W = K`, `a = 1/K`
    /// (so `alpha = evidence + 1`). This is the network-output convention.
    pub fn from_network_evidence(evidence: &[f64]) -> Result<Self> {
        let k = evidence.len();
        let base_rate = vec![1.0 / k as f64; k];
        Self::from_evidence(evidence, k as f64, &base_rate)
    }

    /// Wraps raw strength parameters (each > 0) with an explicit prior.
    pub fn from_alpha(alpha: Vec<f64>, prior_weight: f64, base_rate: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::Domain("alpha needs at least 2 classes".into()));
        }
        if alpha.len() != base_rate.len() {
            return Err(Error::Domain("alpha/base_rate length mismatch".into()));
        }
        if alpha.iter().any(|&a| a <= 0.0) {
            return Err(Error::Domain("alpha entries must be positive".into()));
        }
        if prior_weight <= 0.0 {
            return Err(Error::Domain("prior weight must be positive".into()));
        }
        validate_base_rate(&base_rate)?;
        Ok(DirichletParams { alpha, prior_weight, base_rate })
    }

    /// Raw strengths with the uniform `W = K` prior.
    pub fn uniform_prior(alpha: Vec<f64>) -> Result<Self> {
        let k = alpha.len();
        let base_rate = vec![1.0 / k as f64; k];
        Self::from_alpha(alpha, k as f64, base_rate)
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn prior_weight(&self) -> f64 {
        self.prior_weight
    }

    pub fn base_rate(&self) -> &[f64] {
        &self.base_rate
    }

    /// Dirichlet strength `S = sum(alpha)`.
    pub fn strength(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Evidence `r = alpha - a * W`, clamped at zero against rounding.
    pub fn evidence(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.base_rate)
            .map(|(a, ar)| (a - ar * self.prior_weight).max(0.0))
            .collect()
    }

    /// Maps the evidence to a multinomial opinion: `b = r/S`, `u = W/S`.
    pub fn to_opinion(&self) -> Result<Opinion> {
        let s = self.strength();
        let belief = self.evidence().iter().map(|r| r / s).collect();
        Opinion::new(belief, self.prior_weight / s, self.base_rate.clone())
    }

    /// Dirichlet mean `E(y) = alpha(y) / S`.
    pub fn expected_probability(&self) -> Vec<f64> {
        let s = self.strength();
        self.alpha.iter().map(|a| a / s).collect()
    }

    /// Vacuity `W / S`: uncertainty from lack of evidence.
    pub fn vacuity(&self) -> f64 {
        self.prior_weight / self.strength()
    }

    /// Dissonance: uncertainty from conflicting evidence of comparable size.
    pub fn dissonance(&self) -> f64 {
        let s = self.strength();
        let belief: Vec<f64> = self.evidence().iter().map(|r| r / s).collect();
        dissonance_from_belief(&belief)
    }
}

/// Relative mass balance of two belief masses; 1 when equal, 0 when one is zero.
/// The 0/0 case returns 1 by convention (never reached with nonzero weight
/// inside the dissonance sum).
pub fn balance(b_j: f64, b_i: f64) -> f64 {
    let sum = b_j + b_i;
    if sum <= 0.0 {
        return 1.0;
    }
    1.0 - (b_j - b_i).abs() / sum
}

/// Dissonance evaluated directly on a belief-mass vector. Any singleton term
/// whose remaining belief mass is zero contributes nothing; an all-zero belief
/// vector yields exactly 0.
pub(crate) fn dissonance_from_belief(belief: &[f64]) -> f64 {
    let k = belief.len();
    let mut total = 0.0;
    for i in 0..k {
        let b_i = belief[i];
        if b_i <= 0.0 {
            continue;
        }
        let mut denom = 0.0;
        let mut numer = 0.0;
        for j in 0..k {
            if j == i {
                continue;
            }
            denom += belief[j];
            numer += belief[j] * balance(belief[j], b_i);
        }
        if denom > 0.0 {
            total += b_i * numer / denom;
        }
    }
    total
}

/// Log density of `Dir(p; alpha)` on the open simplex. Test oracle for the
/// Monte-Carlo loss checks.
pub fn dirichlet_log_density(p: &[f64], params: &DirichletParams) -> Result<f64> {
    if p.len() != params.num_classes() {
        return Err(Error::Domain("p/alpha length mismatch".into()));
    }
    if p.iter().any(|&x| x <= 0.0) {
        return Err(Error::Domain("p must lie on the open simplex".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain(format!("p sums to {sum}, expected 1")));
    }
    let alpha = params.alpha();
    let ln_b: f64 = alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(params.strength());
    let ln_kernel: f64 = alpha
        .iter()
        .zip(p)
        .map(|(&a, &x)| (a - 1.0) * x.ln())
        .sum();
    Ok(ln_kernel - ln_b)
}
