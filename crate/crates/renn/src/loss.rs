//! ENN losses and their analytic gradients with respect to the Dirichlet
//! strengths `alpha`.
//!
//! The sum-of-squares loss is the Dirichlet integral in closed form via the
//! first two moments; the misleading-evidence KL pulls the truth-removed
//! Dirichlet toward uniform; the vacuity and dissonance terms reward the
//! respective uncertainty on OOD and boundary samples; the k-NN KL matches
//! the predicted Dirichlet to a neighbor-label estimate.
//!
//! Batch reductions run sequentially over sample index so results are
//! bit-reproducible.

use crate::data::Partition;
use crate::error::{Error, Result};
use crate::math::{digamma, ln_gamma, trigamma};
use crate::sl::{balance, DirichletParams};

/// Per-term decomposition of the regularized objective. The stored terms are
/// the raw per-partition means; coefficients are applied only in `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ssl: f64,
    pub misleading_kl: f64,
    pub vacuity_term: f64,
    pub dissonance_term: f64,
    pub knn_kl_term: f64,
    pub total: f64,
}

/// Coefficients and switches for the regularized objective.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kl_anneal_epochs: usize,
    pub use_knn_kl: bool,
    pub use_misleading_kl: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.01,
            lambda2: 0.01,
            kl_anneal_epochs: 10,
            use_knn_kl: false,
            use_misleading_kl: true,
        }
    }
}

impl LossConfig {
    /// Linear anneal of the misleading-KL coefficient over the first epochs.
    pub fn lambda_t(&self, epoch: usize) -> f64 {
        if self.kl_anneal_epochs == 0 {
            return 1.0;
        }
        (epoch as f64 / self.kl_anneal_epochs as f64).min(1.0)
    }
}

fn check_one_hot(y: &[f64], k: usize) -> Result<usize> {
    if y.len() != k {
        return Err(Error::Domain(format!(
            "label length {} does not match {k} classes",
            y.len()
        )));
    }
    let mut hot = None;
    for (j, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.replace(j).is_some() {
                return Err(Error::Domain("label has multiple hot entries".into()));
            }
        } else if v != 0.0 {
            return Err(Error::Domain(format!("label entry {v} is not 0 or 1")));
        }
    }
    hot.ok_or_else(|| Error::Domain("label has no hot entry".into()))
}

/// Sum-of-squares loss `sum_j (y_j - E[p_j])^2 + Var[p_j]` in closed form.
pub fn ssl_loss(params: &DirichletParams, y: &[f64]) -> Result<f64> {
    check_one_hot(y, params.num_classes())?;
    let s = params.strength();
    let mut loss = 0.0;
    for (&a, &y_j) in params.alpha().iter().zip(y) {
        let mean = a / s;
        let second_moment = a * (a + 1.0) / (s * (s + 1.0));
        loss += y_j * y_j - 2.0 * y_j * mean + second_moment;
    }
    Ok(loss)
}

/// Analytic `d ssl / d alpha`.
pub fn ssl_grad_alpha(params: &DirichletParams, y: &[f64]) -> Result<Vec<f64>> {
    check_one_hot(y, params.num_classes())?;
    let alpha = params.alpha();
    let s = params.strength();
    let s1 = s + 1.0;
    let weighted: f64 = alpha.iter().zip(y).map(|(&a, &y_j)| y_j * a).sum();
    let second: f64 = alpha.iter().map(|&a| a * (a + 1.0)).sum();
    let grad = alpha
        .iter()
        .zip(y)
        .map(|(&a, &y_k)| {
            -2.0 * y_k / s + 2.0 * weighted / (s * s) + (2.0 * a + 1.0) / (s * s1)
                - second * (2.0 * s + 1.0) / (s * s1 * s * s1)
        })
        .collect();
    Ok(grad)
}

fn check_positive_pair(alpha: &[f64], beta: &[f64]) -> Result<()> {
    if alpha.len() != beta.len() {
        return Err(Error::Domain("alpha/beta length mismatch".into()));
    }
    if alpha.iter().chain(beta).any(|&v| v <= 0.0) {
        return Err(Error::Domain("Dirichlet parameters must be positive".into()));
    }
    Ok(())
}

/// KL divergence between two Dirichlet distributions in closed form.
pub fn kl_dirichlet(alpha: &[f64], beta: &[f64]) -> Result<f64> {
    check_positive_pair(alpha, beta)?;
    let sa: f64 = alpha.iter().sum();
    let sb: f64 = beta.iter().sum();
    let mut kl = ln_gamma(sa) - ln_gamma(sb);
    let psi_sa = digamma(sa);
    for (&a, &b) in alpha.iter().zip(beta) {
        kl += ln_gamma(b) - ln_gamma(a) + (a - b) * (digamma(a) - psi_sa);
    }
    Ok(kl)
}

/// Analytic gradient of `kl_dirichlet(alpha, beta)` with respect to `alpha`.
pub fn kl_dirichlet_grad_alpha(alpha: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    check_positive_pair(alpha, beta)?;
    let sa: f64 = alpha.iter().sum();
    let diff_sum: f64 = alpha.iter().zip(beta).map(|(a, b)| a - b).sum();
    let tri_sa = trigamma(sa);
    Ok(alpha
        .iter()
        .zip(beta)
        .map(|(&a, &b)| (a - b) * trigamma(a) - tri_sa * diff_sum)
        .collect())
}

fn misleading_alpha(params: &DirichletParams, y: &[f64]) -> Result<(Vec<f64>, usize)> {
    let hot = check_one_hot(y, params.num_classes())?;
    let mut tilde = params.alpha().to_vec();
    // zero the ground-truth evidence, keep the prior mass
    tilde[hot] = params.base_rate()[hot] * params.prior_weight();
    Ok((tilde, hot))
}

/// KL of the truth-removed Dirichlet against the uniform Dirichlet.
pub fn misleading_kl(params: &DirichletParams, y: &[f64]) -> Result<f64> {
    let (tilde, _) = misleading_alpha(params, y)?;
    let ones = vec![1.0; tilde.len()];
    kl_dirichlet(&tilde, &ones)
}

/// Analytic `d misleading_kl / d alpha`; the true-class component is zero.
pub fn misleading_kl_grad(params: &DirichletParams, y: &[f64]) -> Result<Vec<f64>> {
    let (tilde, hot) = misleading_alpha(params, y)?;
    let ones = vec![1.0; tilde.len()];
    let mut grad = kl_dirichlet_grad_alpha(&tilde, &ones)?;
    grad[hot] = 0.0;
    Ok(grad)
}

/// Vacuity `W / S` as a regularization target.
pub fn vacuity_reg(params: &DirichletParams) -> f64 {
    params.vacuity()
}

/// `d Vac / d alpha_j = -W / S^2`, identical in every coordinate.
pub fn vacuity_reg_grad(params: &DirichletParams) -> Vec<f64> {
    let s = params.strength();
    vec![-params.prior_weight() / (s * s); params.num_classes()]
}

/// Dissonance as a regularization target.
pub fn dissonance_reg(params: &DirichletParams) -> f64 {
    params.dissonance()
}

fn sign0(x: f64) -> f64 {
    // subgradient convention at belief ties
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Analytic dissonance gradient via the chain rule through `b = r / S`.
///
/// Terms whose remaining belief mass is zero take the one-sided limit: when
/// every other belief is zero, raising any of them from zero increases the
/// dissonance at rate 2 in belief space.
pub fn dissonance_reg_grad(params: &DirichletParams) -> Vec<f64> {
    const EPS: f64 = 1e-12;
    let k = params.num_classes();
    let s = params.strength();
    let belief: Vec<f64> = params.evidence().iter().map(|r| r / s).collect();

    let mut grad_b = vec![0.0; k];
    for i in 0..k {
        let b_i = belief[i];
        if b_i <= EPS {
            continue;
        }
        let denom: f64 = (0..k).filter(|&j| j != i).map(|j| belief[j]).sum();
        if denom <= EPS {
            for (m, g) in grad_b.iter_mut().enumerate() {
                if m != i {
                    *g += 2.0;
                }
            }
            continue;
        }
        let numer: f64 = (0..k)
            .filter(|&j| j != i)
            .map(|j| belief[j] * balance(belief[j], b_i))
            .sum();
        // d/d b_i: the balances depend on b_i, the denominator does not
        let mut dn_dbi = 0.0;
        for j in 0..k {
            if j == i {
                continue;
            }
            let pair = belief[j] + b_i;
            if pair > 0.0 {
                dn_dbi += belief[j] * 2.0 * sign0(belief[j] - b_i) * belief[j] / (pair * pair);
            }
        }
        grad_b[i] += numer / denom + b_i * dn_dbi / denom;
        // d/d b_m for m != i
        for m in 0..k {
            if m == i {
                continue;
            }
            let pair = belief[m] + b_i;
            let dbal_dbm = if pair > 0.0 {
                -2.0 * sign0(belief[m] - b_i) * b_i / (pair * pair)
            } else {
                0.0
            };
            let dn_dbm = balance(belief[m], b_i) + belief[m] * dbal_dbm;
            grad_b[m] += b_i * (dn_dbm * denom - numer) / (denom * denom);
        }
    }

    // chain through d b_m / d alpha_k = (delta_mk - b_m) / S
    let dot: f64 = grad_b.iter().zip(&belief).map(|(g, b)| g * b).sum();
    (0..k).map(|j| (grad_b[j] - dot) / s).collect()
}

/// KL between the predicted Dirichlet and the neighbor-estimated one.
pub fn knn_kl_reg(params: &DirichletParams, estimated: &DirichletParams) -> Result<f64> {
    kl_dirichlet(params.alpha(), estimated.alpha())
}

/// Gradient of `knn_kl_reg` with respect to the predicted `alpha`.
pub fn knn_kl_reg_grad(params: &DirichletParams, estimated: &DirichletParams) -> Result<Vec<f64>> {
    kl_dirichlet_grad_alpha(params.alpha(), estimated.alpha())
}

/// One sample of a loss batch: the predicted Dirichlet, its partition, the
/// one-hot label for labeled partitions and the neighbor estimate when the
/// k-NN KL term is on.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub alpha: DirichletParams,
    pub label: Option<usize>,
    pub partition: Partition,
    pub alpha_hat: Option<DirichletParams>,
}

fn one_hot(k: usize, class: usize) -> Result<Vec<f64>> {
    if class >= k {
        return Err(Error::Domain(format!("label {class} out of range for {k} classes")));
    }
    let mut y = vec![0.0; k];
    y[class] = 1.0;
    Ok(y)
}

/// Regularized batch objective:
/// mean over labeled samples of `ssl + lambda_t * misleading_kl [+ knn_kl]`
/// minus `lambda1` times the OOD vacuity mean
/// minus `lambda2` times the BOD dissonance mean.
pub fn total_loss(batch: &[BatchItem], config: &LossConfig, lambda_t: f64) -> Result<LossBreakdown> {
    Ok(total_loss_with_grads(batch, config, lambda_t)?.0)
}

/// As `total_loss`, additionally returning `d total / d alpha` per item.
pub fn total_loss_with_grads(
    batch: &[BatchItem],
    config: &LossConfig,
    lambda_t: f64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if !(0.0..=1.0).contains(&lambda_t) {
        return Err(Error::Domain(format!("lambda_t {lambda_t} outside [0, 1]")));
    }
    let n_labeled = batch
        .iter()
        .filter(|it| it.partition != Partition::Ood)
        .count();
    let n_ood = batch.len() - n_labeled;
    let n_bod = batch
        .iter()
        .filter(|it| it.partition == Partition::Bod)
        .count();

    let mut breakdown = LossBreakdown::default();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(batch.len());

    for item in batch {
        let k = item.alpha.num_classes();
        let mut grad = vec![0.0; k];
        match item.partition {
            Partition::Ood => {
                if item.label.is_some() {
                    return Err(Error::Internal("OOD sample carries a label".into()));
                }
                let w = config.lambda1 / n_ood as f64;
                breakdown.vacuity_term += vacuity_reg(&item.alpha) / n_ood as f64;
                for (g, v) in grad.iter_mut().zip(vacuity_reg_grad(&item.alpha)) {
                    *g -= w * v;
                }
            }
            Partition::In | Partition::Bod => {
                let class = item.label.ok_or_else(|| {
                    Error::Internal("labeled-partition sample without a label".into())
                })?;
                let y = one_hot(k, class)?;
                let w = 1.0 / n_labeled as f64;
                breakdown.ssl += ssl_loss(&item.alpha, &y)? * w;
                for (g, v) in grad.iter_mut().zip(ssl_grad_alpha(&item.alpha, &y)?) {
                    *g += w * v;
                }
                if config.use_misleading_kl {
                    breakdown.misleading_kl += misleading_kl(&item.alpha, &y)? * w;
                    for (g, v) in grad.iter_mut().zip(misleading_kl_grad(&item.alpha, &y)?) {
                        *g += lambda_t * w * v;
                    }
                }
                if config.use_knn_kl {
                    let hat = item.alpha_hat.as_ref().ok_or_else(|| {
                        Error::Config("k-NN KL enabled but no neighbor estimate supplied".into())
                    })?;
                    breakdown.knn_kl_term += knn_kl_reg(&item.alpha, hat)? * w;
                    for (g, v) in grad.iter_mut().zip(knn_kl_reg_grad(&item.alpha, hat)?) {
                        *g += w * v;
                    }
                }
                if item.partition == Partition::Bod {
                    let w2 = config.lambda2 / n_bod as f64;
                    breakdown.dissonance_term += dissonance_reg(&item.alpha) / n_bod as f64;
                    for (g, v) in grad.iter_mut().zip(dissonance_reg_grad(&item.alpha)) {
                        *g -= w2 * v;
                    }
                }
            }
        }
        grads.push(grad);
    }

    breakdown.total = breakdown.ssl + lambda_t * breakdown.misleading_kl
        - config.lambda1 * breakdown.vacuity_term
        - config.lambda2 * breakdown.dissonance_term
        + breakdown.knn_kl_term;
    Ok((breakdown, grads))
}
