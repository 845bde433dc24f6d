//! Bradley–Terry–Davidson model over win/loss/tie counts.
//!
//! For a pair with u = (θ_i − θ_j)/2 the three outcome probabilities are
//! e^u / Z, e^−u / Z and 2ν / Z with Z = e^u + e^−u + 2ν, which keeps every
//! evaluation finite for large ability gaps. The fit is a damped Newton ascent
//! on (θ, γ = ln ν) under Σθ = 0, with gradient-ascent fallback when the
//! reduced Hessian is not negative definite.
//!
//! Complete separation (a candidate that never lost or tied) has no finite
//! maximum. Abilities are then pushed to the ±`theta_bound` box, pinned there,
//! and excluded from the covariance: a pinned ability has zero variance.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::ranking::{cmp_f64, PairwiseStats};
use crate::types::Ranking;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Convergence threshold on the log-likelihood improvement.
    pub tol: f64,
    pub max_iterations: usize,
    /// Box on |θ_i| used to contain separated data.
    pub theta_bound: f64,
    /// Box on |ln ν|.
    pub log_nu_bound: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: 1e-8,
            max_iterations: 500,
            theta_bound: 10.0,
            log_nu_bound: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtdFit {
    pub candidates: Vec<String>,
    /// Centered abilities (Σθ = 0).
    pub theta: Vec<f64>,
    /// Tie intensity; pinned to 0 when no ties were observed.
    pub nu: f64,
    /// Covariance of θ under the centering constraint; `None` when the
    /// observed information could not be inverted.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Abilities pinned at the ±bound box.
    pub at_bound: Vec<bool>,
    /// The comparison digraph was not strongly connected (no finite MLE).
    pub separated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldDecision {
    pub i: usize,
    pub j: usize,
    pub d_hat: f64,
    pub se: f64,
    pub z_alpha: f64,
    pub significant: bool,
}

struct PairProbs {
    win: f64,
    loss: f64,
    tie: f64,
}

fn pair_probs(u: f64, nu: f64) -> PairProbs {
    // Divide through by e^{|u|} so no term overflows.
    let a = u.abs();
    let e1 = (-a).exp();
    let e2 = e1 * e1;
    let z = 1.0 + e2 + 2.0 * nu * e1;
    let (hi, lo) = (1.0 / z, e2 / z);
    let tie = 2.0 * nu * e1 / z;
    if u >= 0.0 {
        PairProbs { win: hi, loss: lo, tie }
    } else {
        PairProbs { win: lo, loss: hi, tie }
    }
}

/// ln(e^u + e^−u + 2ν).
fn log_partition(u: f64, nu: f64) -> f64 {
    let a = u.abs();
    let e1 = (-a).exp();
    a + (1.0 + e1 * e1 + 2.0 * nu * e1).ln()
}

fn check_nu(nu: f64) -> Result<()> {
    if !nu.is_finite() || nu < 0.0 {
        return Err(Error::InvalidTieIntensity(nu));
    }
    Ok(())
}

/// P(i ≻ j) = e^θi / (e^θi + e^θj + 2ν e^{(θi+θj)/2}).
pub fn prob_win(theta_i: f64, theta_j: f64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    Ok(pair_probs((theta_i - theta_j) / 2.0, nu).win)
}

/// P(i = j) = 2ν e^{(θi+θj)/2} / (e^θi + e^θj + 2ν e^{(θi+θj)/2}).
pub fn prob_tie(theta_i: f64, theta_j: f64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    Ok(pair_probs((theta_i - theta_j) / 2.0, nu).tie)
}

fn check_dims(stats: &PairwiseStats, theta: &[f64]) -> Result<()> {
    if theta.len() != stats.len() {
        return Err(Error::DimensionError {
            expected: stats.len(),
            actual: theta.len(),
        });
    }
    Ok(())
}

/// Σ_{i<j} w_ij ln P(i≻j) + l_ij ln P(j≻i) + t_ij ln P(i=j).
///
/// Returns −∞ only when an event of probability zero has a positive count.
pub fn log_likelihood(stats: &PairwiseStats, theta: &[f64], nu: f64) -> Result<f64> {
    check_dims(stats, theta)?;
    check_nu(nu)?;
    let k = stats.len();
    let mut ll = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let (w, l, t) = (stats.wins[i][j], stats.losses[i][j], stats.ties[i][j]);
            if w + l + t == 0 {
                continue;
            }
            let u = (theta[i] - theta[j]) / 2.0;
            let lz = log_partition(u, nu);
            ll += (w as f64 - l as f64) * u - (w + l + t) as f64 * lz;
            if t > 0 {
                ll += t as f64 * (2.0 * nu).ln();
            }
        }
    }
    Ok(ll)
}

/// Analytic gradient of [`log_likelihood`] with respect to θ and ν.
pub fn log_likelihood_gradient(stats: &PairwiseStats, theta: &[f64], nu: f64) -> Result<(Vec<f64>, f64)> {
    check_dims(stats, theta)?;
    check_nu(nu)?;
    let k = stats.len();
    let mut g = vec![0.0; k];
    let mut g_nu = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let (w, l, t) = (stats.wins[i][j], stats.losses[i][j], stats.ties[i][j]);
            let n = (w + l + t) as f64;
            if n == 0.0 {
                continue;
            }
            let p = pair_probs((theta[i] - theta[j]) / 2.0, nu);
            let g_u = (w as f64 - l as f64) - n * (p.win - p.loss);
            g[i] += g_u / 2.0;
            g[j] -= g_u / 2.0;
            // ∂/∂ν = (t − n·P_tie) / ν
            if nu > 0.0 {
                g_nu += (t as f64 - n * p.tie) / nu;
            }
        }
    }
    Ok((g, g_nu))
}

/// Gradient and Hessian of the log-likelihood in (θ, γ = ln ν).
struct Derivatives {
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn derivatives(stats: &PairwiseStats, theta: &[f64], gamma: Option<f64>) -> Derivatives {
    let k = stats.len();
    let dim = k + usize::from(gamma.is_some());
    let nu = gamma.map_or(0.0, f64::exp);
    let mut grad = DVector::zeros(dim);
    let mut hess = DMatrix::zeros(dim, dim);
    for i in 0..k {
        for j in (i + 1)..k {
            let (w, l, t) = (stats.wins[i][j], stats.losses[i][j], stats.ties[i][j]);
            let n = (w + l + t) as f64;
            if n == 0.0 {
                continue;
            }
            let p = pair_probs((theta[i] - theta[j]) / 2.0, nu);
            let s = p.win - p.loss;
            let g_u = (w as f64 - l as f64) - n * s;
            grad[i] += g_u / 2.0;
            grad[j] -= g_u / 2.0;
            let l_uu = 4.0 * p.win * p.loss + p.tie * (p.win + p.loss);
            let h_uu = -n * l_uu;
            hess[(i, i)] += h_uu / 4.0;
            hess[(j, j)] += h_uu / 4.0;
            hess[(i, j)] -= h_uu / 4.0;
            hess[(j, i)] -= h_uu / 4.0;
            if gamma.is_some() {
                let g_idx = k;
                grad[g_idx] += t as f64 - n * p.tie;
                let h_ug = n * s * p.tie;
                hess[(i, g_idx)] += h_ug / 2.0;
                hess[(g_idx, i)] += h_ug / 2.0;
                hess[(j, g_idx)] -= h_ug / 2.0;
                hess[(g_idx, j)] -= h_ug / 2.0;
                hess[(g_idx, g_idx)] -= n * p.tie * (1.0 - p.tie);
            }
        }
    }
    Derivatives { grad, hess }
}

/// Basis mapping reduced coordinates to full (θ, γ) moves that keep Σθ fixed
/// and leave pinned parameters untouched.
fn reduced_basis(k: usize, free: &[usize], gamma_free: bool, has_gamma: bool) -> DMatrix<f64> {
    let theta_cols = free.len().saturating_sub(1);
    let cols = theta_cols + usize::from(gamma_free);
    let dim = k + usize::from(has_gamma);
    let mut j = DMatrix::zeros(dim, cols);
    for m in 1..free.len() {
        j[(free[m], m - 1)] = 1.0;
        j[(free[0], m - 1)] = -1.0;
    }
    if gamma_free {
        j[(k, cols - 1)] = 1.0;
    }
    j
}

/// Strong connectivity of the "beat or tied" digraph; false means separation.
fn strongly_connected(stats: &PairwiseStats) -> bool {
    let k = stats.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(a) = queue.pop_front() {
            for (b, seen_b) in seen.iter_mut().enumerate() {
                let edge = if forward {
                    stats.wins[a][b] + stats.ties[a][b] > 0
                } else {
                    stats.wins[b][a] + stats.ties[b][a] > 0
                };
                if edge && !*seen_b {
                    *seen_b = true;
                    queue.push_back(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

fn connected(stats: &PairwiseStats) -> bool {
    let k = stats.len();
    let mut seen = vec![false; k];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(a) = queue.pop_front() {
        for (b, seen_b) in seen.iter_mut().enumerate() {
            if stats.comparisons(a, b) > 0 && !*seen_b {
                *seen_b = true;
                queue.push_back(b);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn objective(stats: &PairwiseStats, theta: &[f64], gamma: Option<f64>) -> f64 {
    let nu = gamma.map_or(0.0, f64::exp);
    log_likelihood(stats, theta, nu).unwrap_or(f64::NEG_INFINITY)
}

/// Maximum-likelihood fit under Σθ = 0, starting from θ = 0, ν = 1.
pub fn fit(stats: &PairwiseStats, config: &FitConfig) -> Result<BtdFit> {
    let k = stats.len();
    if k < 2 {
        return Err(Error::NotEnoughCandidates(k));
    }
    if !stats.is_consistent() {
        return Err(Error::DegenerateData("inconsistent win/loss/tie matrices".into()));
    }
    for i in 0..k {
        if (0..k).all(|j| stats.comparisons(i, j) == 0) {
            return Err(Error::DegenerateData(format!(
                "candidate `{}` has no comparisons",
                stats.candidates[i]
            )));
        }
    }
    if !connected(stats) {
        return Err(Error::DegenerateData("comparison graph is disconnected".into()));
    }

    let separated = !strongly_connected(stats);
    let has_gamma = stats.total_ties() > 0;
    let mut theta = vec![0.0; k];
    let mut gamma = has_gamma.then_some(0.0);
    let mut at_bound = vec![false; k];
    let mut gamma_at_bound = false;
    let mut ll = objective(stats, &theta, gamma);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let free: Vec<usize> = (0..k).filter(|&i| !at_bound[i]).collect();
        let gamma_free = has_gamma && !gamma_at_bound;
        let basis = reduced_basis(k, &free, gamma_free, has_gamma);
        if basis.ncols() == 0 {
            converged = true;
            break;
        }
        let d = derivatives(stats, &theta, gamma);
        let g_r = basis.transpose() * &d.grad;
        let neg_h = -(basis.transpose() * &d.hess * &basis);
        let direction = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&g_r),
            None => g_r.clone(),
        };
        let slope = g_r.dot(&direction);
        if slope <= 0.0 || !slope.is_finite() {
            converged = !separated || at_bound.iter().any(|&b| b);
            break;
        }
        let full_step = &basis * &direction;

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand_theta: Vec<f64> = (0..k).map(|i| theta[i] + step * full_step[i]).collect();
            let cand_gamma = gamma.map(|g| {
                if gamma_free {
                    g + step * full_step[k]
                } else {
                    g
                }
            });
            let cand_ll = objective(stats, &cand_theta, cand_gamma);
            if cand_ll.is_finite() && cand_ll >= ll + 1e-4 * step * slope {
                accepted = Some((cand_theta, cand_gamma, cand_ll));
                break;
            }
            step *= 0.5;
        }
        let Some((new_theta, new_gamma, _)) = accepted else {
            converged = !separated || at_bound.iter().any(|&b| b);
            break;
        };
        theta = new_theta;
        gamma = new_gamma;
        pin_to_box(&mut theta, &mut at_bound, config.theta_bound);
        if let Some(g) = gamma.as_mut() {
            if g.abs() > config.log_nu_bound {
                *g = g.clamp(-config.log_nu_bound, config.log_nu_bound);
                gamma_at_bound = true;
            }
        }
        let new_ll = objective(stats, &theta, gamma);
        let improvement = new_ll - ll;
        ll = new_ll;
        // Separated data has no interior optimum; keep climbing until the box binds.
        let waiting_for_box = separated && !at_bound.iter().any(|&b| b);
        if improvement.abs() < config.tol && !waiting_for_box {
            converged = true;
            break;
        }
    }

    let nu = gamma.map_or(0.0, f64::exp);
    let covariance = covariance(stats, &theta, gamma, &at_bound, gamma_at_bound);
    Ok(BtdFit {
        candidates: stats.candidates.clone(),
        theta,
        nu,
        covariance,
        log_likelihood: ll,
        converged,
        iterations,
        at_bound,
        separated,
    })
}

/// Clamps abilities into the box, pins clamped ones, and re-centers the free ones.
fn pin_to_box(theta: &mut [f64], at_bound: &mut [bool], bound: f64) {
    loop {
        let mut changed = false;
        for i in 0..theta.len() {
            if !at_bound[i] && theta[i].abs() > bound {
                theta[i] = theta[i].clamp(-bound, bound);
                at_bound[i] = true;
                changed = true;
            }
        }
        let free: Vec<usize> = (0..theta.len()).filter(|&i| !at_bound[i]).collect();
        let total: f64 = theta.iter().sum();
        if !free.is_empty() && total.abs() > 1e-12 {
            let shift = total / free.len() as f64;
            for &i in &free {
                theta[i] -= shift;
            }
            changed |= free.iter().any(|&i| theta[i].abs() > bound);
        }
        if !changed {
            break;
        }
    }
}

fn covariance(
    stats: &PairwiseStats,
    theta: &[f64],
    gamma: Option<f64>,
    at_bound: &[bool],
    gamma_at_bound: bool,
) -> Option<Vec<Vec<f64>>> {
    let k = stats.len();
    let free: Vec<usize> = (0..k).filter(|&i| !at_bound[i]).collect();
    let gamma_free = gamma.is_some() && !gamma_at_bound;
    let basis = reduced_basis(k, &free, gamma_free, gamma.is_some());
    if basis.ncols() == 0 {
        return Some(vec![vec![0.0; k]; k]);
    }
    let d = derivatives(stats, theta, gamma);
    let info = -(basis.transpose() * &d.hess * &basis);
    let inv = info.try_inverse()?;
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let full = &basis * inv * basis.transpose();
    Some(
        (0..k)
            .map(|i| (0..k).map(|j| 0.5 * (full[(i, j)] + full[(j, i)])).collect())
            .collect(),
    )
}

/// Ranking by descending ability, ties by ascending key.
pub fn priority(fit: &BtdFit) -> Ranking {
    let mut order: Vec<usize> = (0..fit.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        cmp_f64(fit.theta[b], fit.theta[a]).then_with(|| fit.candidates[a].cmp(&fit.candidates[b]))
    });
    Ranking::from_ordered(order.into_iter().map(|i| fit.candidates[i].clone()).collect())
        .expect("candidate keys are unique")
}

/// Standard normal quantile at `alpha` (α = 0.975 gives ≈ 1.96).
pub fn z_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(alpha))
}

/// One-sided Wald test: significant iff d̂ − z_α·SE(d̂) ≥ 0.
pub fn wald_separation(fit: &BtdFit, i: usize, j: usize, alpha: f64) -> Result<WaldDecision> {
    let k = fit.candidates.len();
    if i >= k || j >= k {
        return Err(Error::DimensionError {
            expected: k,
            actual: i.max(j) + 1,
        });
    }
    let z_alpha = z_quantile(alpha)?;
    let cov = fit
        .covariance
        .as_ref()
        .ok_or_else(|| Error::NumericalInstability("observed information is singular".into()))?;
    let var = cov[i][i] + cov[j][j] - 2.0 * cov[i][j];
    let scale = cov[i][i].abs() + cov[j][j].abs() + 1e-12;
    if !var.is_finite() || var < -1e-9 * scale {
        return Err(Error::NumericalInstability(format!(
            "negative variance {var:e} for ability gap"
        )));
    }
    let se = var.max(0.0).sqrt();
    let d_hat = fit.theta[i] - fit.theta[j];
    Ok(WaldDecision {
        i,
        j,
        d_hat,
        se,
        z_alpha,
        significant: d_hat - z_alpha * se >= 0.0,
    })
}

/// Wald decision between the rank-1 and rank-2 candidates.
pub fn top_two_wald(fit: &BtdFit, alpha: f64) -> Result<WaldDecision> {
    let k = fit.candidates.len();
    if k < 2 {
        return Err(Error::NotEnoughCandidates(k));
    }
    let ranking = priority(fit);
    let index = |key: &str| fit.candidates.iter().position(|c| c == key).expect("ranked key");
    let first = index(&ranking.ordered()[0]);
    let second = index(&ranking.ordered()[1]);
    wald_separation(fit, first, second, alpha)
}

/// True when the top two abilities are not significantly separated.
pub fn needs_fine_grained(fit: &BtdFit, alpha: f64) -> Result<bool> {
    Ok(!top_two_wald(fit, alpha)?.significant)
}

/// Every pairwise P(a ≻ b) and P(a = b) as text, one relation per line,
/// pairs ordered by key.
pub fn deduce_relations(fit: &BtdFit) -> String {
    let k = fit.candidates.len();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if fit.candidates[i] <= fit.candidates[j] {
                pairs.push((i, j));
            } else {
                pairs.push((j, i));
            }
        }
    }
    pairs.sort_by(|a, b| {
        (&fit.candidates[a.0], &fit.candidates[a.1]).cmp(&(&fit.candidates[b.0], &fit.candidates[b.1]))
    });
    let mut lines = Vec::with_capacity(pairs.len() * 2);
    for (a, b) in pairs {
        let p = pair_probs((fit.theta[a] - fit.theta[b]) / 2.0, fit.nu);
        let (ka, kb) = (&fit.candidates[a], &fit.candidates[b]);
        lines.push(format!("P({ka} ≻ {kb}) = {:.4}", p.win));
        lines.push(format!("P({ka} = {kb}) = {:.4}", p.tie));
    }
    lines.join("\n")
}
