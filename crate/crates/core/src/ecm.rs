//! Variational ECM fitter.
//!
//! The component likelihood of the model is intractable, so each per-variable
//! logistic factor is replaced by the Jaakkola quadratic lower bound with a
//! variational parameter xi per (observation, component, variable, branch).
//! Under the bound, the latent posterior of each contamination branch is
//! Gaussian with closed-form moments, and every parameter block has a
//! closed-form conditional update. One iteration performs, in order:
//!
//! 1. posterior moments and the bound value at the current point
//!    (`posterior_moments` + `lower_bound`),
//! 2. responsibilities and branch weights (`e_step`),
//! 3. the Aitken convergence check on the bound trace,
//! 4. mixing weights, tau, xi, loadings, and eta conditional updates.
//!
//! Every step is an exact coordinate-ascent move on the same variational
//! objective, so the reported bound trace is non-decreasing up to roundoff;
//! the test suite enforces this. Multi-restart search runs restarts in
//! parallel (they are independent), and all randomness derives from the
//! config seed, so a fit is a pure function of `(data, config)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, jaakkola_b, log_add_exp, log_sigmoid, log_sum_exp, SymMatrix};
use crate::model::{BinaryDataset, MltcnParams};
use crate::seeding::derive_seed;
use crate::select::{count_parameters, rotation_adjustment};

/// Branch index of the variance-inflated (extreme) latent prior.
pub const EXTREME: usize = 0;
/// Branch index of the standard-normal latent prior.
pub const NORMAL: usize = 1;

/// Fitting controls. `seed` drives restarts and initialization; everything
/// else has the documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of mixture components.
    pub g: usize,
    /// Latent dimension.
    pub d: usize,
    /// Maximum ECM iterations per restart.
    pub max_iter: usize,
    /// Aitken stopping tolerance on successive limit estimates.
    pub aitken_epsilon: f64,
    /// Number of random restarts; the best final bound wins.
    pub restarts: usize,
    /// Base seed for initialization.
    pub seed: u64,
    /// Lower limit for tau (the minimum share of normal patterns).
    pub tau_floor: f64,
    /// Upper limit for the variance inflation eta.
    pub eta_ceiling: f64,
    /// Variational-parameter sweeps per iteration.
    pub inner_xi_sweeps: usize,
    /// Subtract the G*D*(D-1)/2 rotational indeterminacy of the slopes from
    /// the BIC parameter count.
    pub bic_rotation_adjust: bool,
}

impl FitConfig {
    pub fn new(g: usize, d: usize) -> Self {
        FitConfig {
            g,
            d,
            max_iter: 1000,
            aitken_epsilon: 0.01,
            restarts: 10,
            seed: 0,
            tau_floor: 0.5,
            eta_ceiling: 1000.0,
            inner_xi_sweeps: 1,
            bic_rotation_adjust: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::ParameterDomain("G must be at least 1".into()));
        }
        if !(self.tau_floor >= 0.5 && self.tau_floor < 1.0) {
            return Err(Error::ParameterDomain(format!(
                "tau floor {} outside [0.5, 1)",
                self.tau_floor
            )));
        }
        if !(self.aitken_epsilon > 0.0) {
            return Err(Error::ParameterDomain("aitken epsilon must be > 0".into()));
        }
        if !(self.eta_ceiling > 1.0) {
            return Err(Error::ParameterDomain("eta ceiling must be > 1".into()));
        }
        if self.max_iter < 3 || self.restarts == 0 || self.inner_xi_sweeps == 0 {
            return Err(Error::ParameterDomain(
                "max_iter >= 3, restarts >= 1, inner_xi_sweeps >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

/// Per-(observation, component, branch) variational quantities: the xi
/// vector, the Gaussian posterior moments it induces, and cached pieces of
/// the bound.
#[derive(Debug, Clone)]
pub struct BranchMoments {
    /// Variational parameters, one per observed variable; all >= 0.
    pub xi: Vec<f64>,
    /// Posterior mean of the latent variable under this branch.
    pub mu: Vec<f64>,
    /// Posterior covariance.
    pub sigma: SymMatrix,
    /// log |sigma|, kept from the factorization.
    pub log_det_sigma: f64,
    /// 0.5 * mu' sigma^{-1} mu, evaluated as 0.5 * b . mu with b the
    /// natural-parameter vector, so no extra solve is needed.
    pub half_quad: f64,
    /// Branch bound L(xi); exp of it approximates p(x | component, branch).
    pub bound: f64,
}

impl BranchMoments {
    fn fresh(d: usize, m: usize) -> Self {
        BranchMoments {
            xi: vec![1.0; m],
            mu: vec![0.0; d],
            sigma: SymMatrix::identity(d),
            log_det_sigma: 0.0,
            half_quad: 0.0,
            bound: 0.0,
        }
    }
}

/// Full variational state of a fit in progress.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub n: usize,
    pub g: usize,
    /// Flat (i, g, branch) storage: index (i * G + g) * 2 + k.
    branches: Vec<BranchMoments>,
    /// Responsibilities, n x G row-major; rows on the simplex.
    pub z: Vec<f64>,
    /// Normal-branch weights, n x G row-major; entries in [0, 1].
    pub c: Vec<f64>,
    /// Component bounds L_ig, n x G row-major.
    pub component_bounds: Vec<f64>,
}

impl VariationalState {
    pub fn new(n: usize, g: usize, d: usize, m: usize) -> Self {
        VariationalState {
            n,
            g,
            branches: vec![BranchMoments::fresh(d, m); n * g * 2],
            z: vec![0.0; n * g],
            c: vec![0.0; n * g],
            component_bounds: vec![0.0; n * g],
        }
    }

    #[inline]
    pub fn branch(&self, i: usize, g: usize, k: usize) -> &BranchMoments {
        &self.branches[(i * self.g + g) * 2 + k]
    }

    #[inline]
    pub fn branch_mut(&mut self, i: usize, g: usize, k: usize) -> &mut BranchMoments {
        &mut self.branches[(i * self.g + g) * 2 + k]
    }

    pub fn z_rows(&self) -> Vec<Vec<f64>> {
        self.z.chunks(self.g).map(|r| r.to_vec()).collect()
    }

    pub fn c_rows(&self) -> Vec<Vec<f64>> {
        self.c.chunks(self.g).map(|r| r.to_vec()).collect()
    }
}

/// Recomputes the Gaussian posterior moments of every (observation,
/// component, branch) at the current variational parameters:
///
/// - precision  P = base I - 2 sum_m B(xi_m) w_m w_m'   with base = 1 for the
///   normal branch and 1/eta for the extreme branch,
/// - natural parameter b = sum_m (x_m - 1/2 + 2 B(xi_m) alpha_m) w_m,
/// - mu = P^{-1} b, sigma = P^{-1}.
///
/// B < 0 makes P positive definite; a failed factorization is reported with
/// its coordinates.
pub fn posterior_moments(
    data: &BinaryDataset,
    params: &MltcnParams,
    state: &mut VariationalState,
) -> Result<()> {
    let d = params.d;
    let n_g = state.g;
    for i in 0..state.n {
        let x = data.row(i);
        for g in 0..n_g {
            let alpha = &params.alpha[g];
            let w = &params.w[g];
            for k in [EXTREME, NORMAL] {
                let base = if k == NORMAL {
                    1.0
                } else {
                    1.0 / params.eta[g]
                };
                let mut prec = SymMatrix::scaled_identity(d, base);
                let mut b = vec![0.0; d];
                {
                    let branch = state.branch(i, g, k);
                    for (m, &xm) in x.iter().enumerate() {
                        let bm = jaakkola_b(branch.xi[m]);
                        prec.add_outer(-2.0 * bm, &w[m]);
                        let coef = xm as f64 - 0.5 + 2.0 * bm * alpha[m];
                        for (bd, &wd) in b.iter_mut().zip(&w[m]) {
                            *bd += coef * wd;
                        }
                    }
                }
                let chol = prec.cholesky().map_err(|e| {
                    Error::breakdown(format!(
                        "posterior moments at observation {i}, component {g}, branch {k}: {e}"
                    ))
                })?;
                let mu = chol.solve(&b);
                let branch = state.branch_mut(i, g, k);
                branch.half_quad = 0.5 * dot(&b, &mu);
                branch.mu = mu;
                branch.sigma = chol.inverse();
                branch.log_det_sigma = -chol.log_det();
            }
        }
    }
    Ok(())
}

/// Evaluates the variational lower bound at the current point, filling the
/// per-branch bounds L(xi_igk) and per-component bounds L_ig, and returning
/// the total
///
///   l = sum_i log sum_g pi_g [ tau_g exp L(xi_ig1) + (1 - tau_g) exp L(xi_ig0) ].
///
/// The branch bound is
///
///   L(xi) = sum_m [ (x_m - 1/2) alpha_m + log sigmoid(xi_m) - xi_m / 2
///                   + B(xi_m) (alpha_m^2 - xi_m^2) ]
///           + 1/2 log|sigma| + 1/2 mu' sigma^{-1} mu
///           - (D/2) log eta            (extreme branch only),
///
/// the log-normalizer of the Gaussian integral of the bounded likelihood
/// against the branch prior. The eta term carries the extreme branch's
/// N(0, eta I) normalizing constant so both branches approximate
/// p(x | component, branch) on the same scale, which the branch-weight
/// update requires.
pub fn lower_bound(
    data: &BinaryDataset,
    params: &MltcnParams,
    state: &mut VariationalState,
) -> f64 {
    let n_g = state.g;
    let d = params.d as f64;
    let mut total = 0.0;
    let mut row = vec![0.0; n_g];
    for i in 0..state.n {
        let x = data.row(i);
        for g in 0..n_g {
            let alpha = &params.alpha[g];
            for k in [EXTREME, NORMAL] {
                let branch = state.branch_mut(i, g, k);
                let mut l = 0.5 * branch.log_det_sigma + branch.half_quad;
                for (m, &xm) in x.iter().enumerate() {
                    let xi = branch.xi[m];
                    let a = alpha[m];
                    l += (xm as f64 - 0.5) * a + log_sigmoid(xi) - 0.5 * xi
                        + jaakkola_b(xi) * (a * a - xi * xi);
                }
                if k == EXTREME {
                    l -= 0.5 * d * params.eta[g].ln();
                }
                branch.bound = l;
            }
            let l_ig = log_add_exp(
                params.tau[g].ln() + state.branch(i, g, NORMAL).bound,
                (1.0 - params.tau[g]).ln() + state.branch(i, g, EXTREME).bound,
            );
            state.component_bounds[i * n_g + g] = l_ig;
            row[g] = params.pi[g].ln() + l_ig;
        }
        total += log_sum_exp(&row);
    }
    total
}

/// Responsibilities and branch weights from the current bounds, computed in
/// the log domain:
///
///   z_ig = pi_g exp(L_ig) / sum_h pi_h exp(L_ih),
///   c_ig = tau_g exp(L(xi_ig1)) / [tau_g exp(L(xi_ig1)) + (1-tau_g) exp(L(xi_ig0))].
pub fn e_step(params: &MltcnParams, state: &mut VariationalState) -> Result<()> {
    let n_g = state.g;
    let mut row = vec![0.0; n_g];
    for i in 0..state.n {
        for g in 0..n_g {
            let l_ig = state.component_bounds[i * n_g + g];
            if !l_ig.is_finite() {
                return Err(Error::breakdown(format!(
                    "component bound {l_ig} at observation {i}, component {g}"
                )));
            }
            row[g] = params.pi[g].ln() + l_ig;
        }
        let denom = log_sum_exp(&row);
        for g in 0..n_g {
            state.z[i * n_g + g] = (row[g] - denom).exp();
            let l_ig = state.component_bounds[i * n_g + g];
            let log_c = params.tau[g].ln() + state.branch(i, g, NORMAL).bound - l_ig;
            state.c[i * n_g + g] = log_c.exp().clamp(0.0, 1.0);
        }
    }
    Ok(())
}

/// Mixing-weight update: column means of z.
pub fn update_mixing(z: &[f64], g: usize) -> Vec<f64> {
    let n = z.len() / g;
    let mut pi = vec![0.0; g];
    for row in z.chunks(g) {
        for (p, &v) in pi.iter_mut().zip(row) {
            *p += v;
        }
    }
    for p in &mut pi {
        *p /= n as f64;
    }
    pi
}

/// Tau update. The objective per component,
/// sum_i z_ig [c_ig log tau + (1 - c_ig) log(1 - tau)], has the weighted
/// mean sum(z c)/sum(z) as its unconstrained maximizer, so the constrained
/// maximum over (tau_floor, 1) is that mean clamped to
/// [tau_floor + 1e-6, 1 - 1e-6].
pub fn update_tau(z: &[f64], c: &[f64], g: usize, tau_floor: f64) -> Result<Vec<f64>> {
    let mut tau = vec![0.0; g];
    for gi in 0..g {
        let mut sz = 0.0;
        let mut szc = 0.0;
        for (zr, cr) in z.chunks(g).zip(c.chunks(g)) {
            sz += zr[gi];
            szc += zr[gi] * cr[gi];
        }
        if sz <= 1e-10 {
            return Err(Error::EmptyComponent { group: gi });
        }
        tau[gi] = (szc / sz).clamp(tau_floor + 1e-6, 1.0 - 1e-6);
    }
    Ok(tau)
}

/// Variational-parameter update: xi_m^2 is the posterior second moment of
/// the linear predictor,
///
///   xi_m^2 = w_m' (sigma + mu mu') w_m + 2 alpha_m w_m' mu + alpha_m^2,
///
/// nonnegative up to roundoff (floored at zero before the square root).
pub fn update_xi(params: &MltcnParams, state: &mut VariationalState) {
    for i in 0..state.n {
        for g in 0..state.g {
            for k in [EXTREME, NORMAL] {
                let branch = state.branch_mut(i, g, k);
                for (m, w_m) in params.w[g].iter().enumerate() {
                    let a = params.alpha[g][m];
                    let wm_mu = dot(w_m, &branch.mu);
                    let q = branch.sigma.quad_form(w_m) + wm_mu * wm_mu
                        + 2.0 * a * wm_mu
                        + a * a;
                    branch.xi[m] = q.max(0.0).sqrt();
                }
            }
        }
    }
}

/// Loading update: for each (variable m, component g), solve the
/// (D+1)-dimensional symmetric positive definite system H v = b for the
/// stacked vector v = (w_mg', alpha_mg)', where, with Y~ the 1-augmented
/// latent vector and mu~ the 1-augmented mean,
///
///   H = -2 sum_i z_ig [ c_ig B(xi_img1) E(Y~_ig1 Y~_ig1')
///                       + (1 - c_ig) B(xi_img0) E(Y~_ig0 Y~_ig0') ],
///   b = sum_i z_ig (x_im - 1/2) [ c_ig mu~_ig1 + (1 - c_ig) mu~_ig0 ].
///
/// The two branch terms add: each observation contributes its expected
/// complete-data curvature weighted by the branch posterior, and -2B > 0
/// makes H positive definite.
pub fn update_loadings(
    data: &BinaryDataset,
    state: &VariationalState,
    params: &mut MltcnParams,
) -> Result<()> {
    let d = params.d;
    let m_vars = data.n_variables();
    let n_g = state.g;

    let updated: Vec<Result<Vec<(Vec<f64>, f64)>>> = (0..n_g)
        .into_par_iter()
        .map(|g| {
            let mut h = vec![SymMatrix::zeros(d + 1); m_vars];
            let mut rhs = vec![vec![0.0; d + 1]; m_vars];
            let mut e_tilde = [SymMatrix::zeros(d + 1), SymMatrix::zeros(d + 1)];
            let mut mu_tilde = [vec![0.0; d + 1], vec![0.0; d + 1]];
            for i in 0..state.n {
                let zi = state.z[i * n_g + g];
                if zi < 1e-300 {
                    continue;
                }
                let ci = state.c[i * n_g + g];
                let weight = [zi * (1.0 - ci), zi * ci];
                for k in [EXTREME, NORMAL] {
                    let branch = state.branch(i, g, k);
                    // E(Y~ Y~') = [[sigma + mu mu', mu], [mu', 1]].
                    for r in 0..d {
                        for s in 0..=r {
                            e_tilde[k].set(
                                r,
                                s,
                                branch.sigma.get(r, s) + branch.mu[r] * branch.mu[s],
                            );
                        }
                        e_tilde[k].set(r, d, branch.mu[r]);
                        mu_tilde[k][r] = branch.mu[r];
                    }
                    e_tilde[k].set(d, d, 1.0);
                    mu_tilde[k][d] = 1.0;
                }
                let x = data.row(i);
                for m in 0..m_vars {
                    let dim = d + 1;
                    let xm_half = x[m] as f64 - 0.5;
                    for k in [EXTREME, NORMAL] {
                        if weight[k] == 0.0 {
                            continue;
                        }
                        let scale = -2.0 * weight[k] * jaakkola_b(state.branch(i, g, k).xi[m]);
                        for r in 0..dim {
                            for s in 0..dim {
                                h[m].add_raw(r, s, scale * e_tilde[k].get(r, s));
                            }
                        }
                        let bcoef = weight[k] * xm_half;
                        for (t, &mt) in rhs[m].iter_mut().zip(&mu_tilde[k]) {
                            *t += bcoef * mt;
                        }
                    }
                }
            }
            (0..m_vars)
                .map(|m| {
                    let chol = h[m].cholesky().map_err(|e| {
                        Error::breakdown(format!(
                            "loading update for variable {m}, component {g}: {e}"
                        ))
                    })?;
                    let v = chol.solve(&rhs[m]);
                    let (w, a) = (v[..d].to_vec(), v[d]);
                    Ok((w, a))
                })
                .collect()
        })
        .collect();

    for (g, res) in updated.into_iter().enumerate() {
        for (m, (w, a)) in res?.into_iter().enumerate() {
            params.w[g][m] = w;
            params.alpha[g][m] = a;
        }
    }
    Ok(())
}

/// Eta update. The eta-dependent part of the bound,
/// -(D/2) S log eta - T / (2 eta) with S = sum_i z_ig (1 - c_ig) and
/// T = sum_i z_ig (1 - c_ig) E(Y_ig0' Y_ig0), has the unique stationary
/// point eta = T / (D S); the update clamps it to (1, eta_ceiling] and keeps
/// the previous value when the extreme branch carries no mass.
pub fn update_eta(state: &VariationalState, params: &mut MltcnParams, eta_ceiling: f64) {
    let d = params.d;
    if d == 0 {
        return;
    }
    for g in 0..state.g {
        let mut s = 0.0;
        let mut t = 0.0;
        for i in 0..state.n {
            let wgt = state.z[i * state.g + g] * (1.0 - state.c[i * state.g + g]);
            if wgt == 0.0 {
                continue;
            }
            let branch = state.branch(i, g, EXTREME);
            let second_moment =
                branch.sigma.trace() + branch.mu.iter().map(|v| v * v).sum::<f64>();
            s += wgt;
            t += wgt * second_moment;
        }
        if s >= 1e-10 {
            params.eta[g] = (t / (d as f64 * s)).clamp(1.0 + 1e-6, eta_ceiling);
        }
    }
}

/// Aitken limit estimate from three successive bound values.
#[derive(Debug, Clone, Copy)]
pub struct AitkenEstimate {
    /// Estimated geometric rate a = (l_curr - l_prev) / (l_prev - l_prev2).
    pub rate: f64,
    /// Estimated limiting value l_prev + (l_curr - l_prev) / (1 - rate).
    pub l_inf: f64,
    /// True when the trace has flattened to machine precision and the rate
    /// is undefined.
    pub plateau: bool,
}

pub fn aitken_estimate(l_prev2: f64, l_prev: f64, l_curr: f64) -> AitkenEstimate {
    let denom = l_prev - l_prev2;
    if denom.abs() < 1e-14 {
        return AitkenEstimate {
            rate: f64::NAN,
            l_inf: l_curr,
            plateau: true,
        };
    }
    let rate = (l_curr - l_prev) / denom;
    AitkenEstimate {
        rate,
        l_inf: l_prev + (l_curr - l_prev) / (1.0 - rate),
        plateau: false,
    }
}

/// Streaming convergence detector: feed each bound value as it is produced;
/// reports convergence when two successive Aitken limit estimates differ by
/// less than epsilon, or when the trace plateaus outright.
#[derive(Debug, Clone)]
pub struct AitkenTracker {
    epsilon: f64,
    prev2: Option<f64>,
    prev: Option<f64>,
    last_l_inf: Option<f64>,
}

impl AitkenTracker {
    pub fn new(epsilon: f64) -> Self {
        AitkenTracker {
            epsilon,
            prev2: None,
            prev: None,
            last_l_inf: None,
        }
    }

    pub fn push(&mut self, l: f64) -> bool {
        let converged = match (self.prev2, self.prev) {
            (Some(p2), Some(p1)) => {
                let est = aitken_estimate(p2, p1, l);
                if est.plateau {
                    true
                } else {
                    let hit = self
                        .last_l_inf
                        .map(|prev_inf| (est.l_inf - prev_inf).abs() < self.epsilon)
                        .unwrap_or(false);
                    self.last_l_inf = Some(est.l_inf);
                    hit
                }
            }
            _ => false,
        };
        self.prev2 = self.prev;
        self.prev = Some(l);
        converged
    }
}

/// Random initialization for one restart: a hard random partition seeds the
/// intercepts (group-wise response means on the logit scale, clamped to
/// [1e-3, 1-1e-3]), slopes start as small N(0, 0.01) noise, tau at 0.9, eta
/// at 2, every xi at 1, and the mixing weights at the partition shares.
/// A partition that leaves a component empty is redrawn (up to 100 times).
pub fn initialize(
    data: &BinaryDataset,
    config: &FitConfig,
    restart_index: usize,
) -> Result<(MltcnParams, VariationalState)> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let n = data.n_observations();
    let m = data.n_variables();
    let (g, d) = (config.g, config.d);
    let mut rng =
        crate::seeding::substream_rng(derive_seed(config.seed, restart_index as u64), 0);

    let mut assignment = vec![0usize; n];
    let mut counts = vec![0usize; g];
    let mut ok = false;
    for _ in 0..100 {
        counts.iter_mut().for_each(|c| *c = 0);
        for a in assignment.iter_mut() {
            *a = rng.random_range(0..g);
            counts[*a] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            ok = true;
            break;
        }
    }
    if !ok {
        let group = counts.iter().position(|&c| c == 0).unwrap_or(0);
        return Err(Error::EmptyComponent { group });
    }

    let mut alpha = vec![vec![0.0; m]; g];
    for gi in 0..g {
        for mi in 0..m {
            let sum: f64 = (0..n)
                .filter(|&i| assignment[i] == gi)
                .map(|i| data.get(i, mi) as f64)
                .sum();
            let mean = (sum / counts[gi] as f64).clamp(1e-3, 1.0 - 1e-3);
            alpha[gi][mi] = (mean / (1.0 - mean)).ln();
        }
    }
    let w = (0..g)
        .map(|_| {
            (0..m)
                .map(|_| {
                    (0..d)
                        .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();

    let params = MltcnParams {
        g,
        d,
        pi: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        alpha,
        w,
        tau: vec![0.9; g],
        eta: vec![2.0; g],
    };

    let mut state = VariationalState::new(n, g, d, m);
    for i in 0..n {
        state.z[i * g + assignment[i]] = 1.0;
        for gi in 0..g {
            state.c[i * g + gi] = 0.9;
        }
    }
    Ok((params, state))
}

/// Outcome of a fit: the winning restart's parameters, responsibilities,
/// branch weights, bound trace, and derived summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MltcnParams,
    /// Responsibilities, one row per observation.
    pub z: Vec<Vec<f64>>,
    /// Normal-branch weights, one row per observation.
    pub c: Vec<Vec<f64>>,
    /// Lower-bound value at every iteration of the winning restart.
    pub bound_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// -2 * final bound + k log n.
    pub bic: f64,
    /// Parameter count used in the BIC.
    pub parameter_count: usize,
    /// argmax_g z_ig per observation.
    pub map_labels: Vec<usize>,
    /// True where an observation's branch weight at its MAP component falls
    /// below 1/2.
    pub extreme_flags: Vec<bool>,
    /// Final bound per restart; None for restarts that failed.
    pub restart_bounds: Vec<Option<f64>>,
    pub config: FitConfig,
}

impl FitResult {
    /// Final value of the bound trace.
    pub fn bound(&self) -> f64 {
        *self.bound_trace.last().expect("non-empty trace")
    }

    pub fn n_extreme(&self) -> usize {
        self.extreme_flags.iter().filter(|&&e| e).count()
    }
}

struct RestartRun {
    params: MltcnParams,
    z: Vec<f64>,
    c: Vec<f64>,
    bound_trace: Vec<f64>,
    converged: bool,
}

fn run_restart(
    data: &BinaryDataset,
    config: &FitConfig,
    restart_index: usize,
) -> Result<RestartRun> {
    let (mut params, mut state) = initialize(data, config, restart_index)?;
    // Adapt the variational parameters to the initial model before any
    // parameter update. Without this, the first eta and loading updates see
    // moments computed at the arbitrary xi = 1 start, which collapses eta
    // onto its lower clamp, and eta at the clamp is self-perpetuating (the
    // two branches become identical, so no evidence ever reaches it).
    for _ in 0..2 {
        posterior_moments(data, &params, &mut state)?;
        update_xi(&params, &mut state);
    }
    let mut tracker = AitkenTracker::new(config.aitken_epsilon);
    let mut trace = Vec::new();
    let mut converged = false;

    loop {
        posterior_moments(data, &params, &mut state)?;
        let l = lower_bound(data, &params, &mut state);
        if !l.is_finite() {
            return Err(Error::breakdown(format!(
                "bound {l} at iteration {} of restart {restart_index}",
                trace.len()
            )));
        }
        trace.push(l);
        e_step(&params, &mut state)?;
        if tracker.push(l) {
            converged = true;
            break;
        }
        if trace.len() >= config.max_iter {
            break;
        }

        params.pi = update_mixing(&state.z, config.g);
        if let Some(group) = params.pi.iter().position(|&p| p < 1e-10) {
            return Err(Error::EmptyComponent { group });
        }
        params.tau = update_tau(&state.z, &state.c, config.g, config.tau_floor)?;
        for sweep in 0..config.inner_xi_sweeps {
            if sweep > 0 {
                posterior_moments(data, &params, &mut state)?;
            }
            update_xi(&params, &mut state);
        }
        update_loadings(data, &state, &mut params)?;
        update_eta(&state, &mut params, config.eta_ceiling);
    }

    Ok(RestartRun {
        params,
        z: state.z,
        c: state.c,
        bound_trace: trace,
        converged,
    })
}

/// Fits the model: runs `config.restarts` independent restarts (in
/// parallel) and keeps the one with the highest final bound. The result is
/// a pure function of `(data, config)`.
pub fn fit(data: &BinaryDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let n = data.n_observations();
    if n <= config.g {
        return Err(Error::ParameterDomain(format!(
            "need more observations than components, got n={n}, G={}",
            config.g
        )));
    }

    let runs: Vec<Result<RestartRun>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| run_restart(data, config, r))
        .collect();

    let restart_bounds: Vec<Option<f64>> = runs
        .iter()
        .map(|r| r.as_ref().ok().map(|run| *run.bound_trace.last().unwrap()))
        .collect();

    let mut best: Option<RestartRun> = None;
    let mut reasons = Vec::new();
    for run in runs {
        match run {
            Ok(candidate) => {
                let better = best
                    .as_ref()
                    .map(|b| {
                        candidate.bound_trace.last().unwrap() > b.bound_trace.last().unwrap()
                    })
                    .unwrap_or(true);
                if better {
                    best = Some(candidate);
                }
            }
            Err(e) => reasons.push(e.to_string()),
        }
    }
    let best = best.ok_or(Error::FitFailed { reasons })?;

    let g = config.g;
    let map_labels: Vec<usize> = best
        .z
        .chunks(g)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect();
    let extreme_flags: Vec<bool> = map_labels
        .iter()
        .enumerate()
        .map(|(i, &lab)| best.c[i * g + lab] < 0.5)
        .collect();

    let mut k = count_parameters(g, config.d, data.n_variables());
    if config.bic_rotation_adjust {
        k -= rotation_adjustment(g, config.d);
    }
    let l_final = *best.bound_trace.last().unwrap();
    let bic = crate::select::bic(l_final, k, n);

    Ok(FitResult {
        params: best.params,
        z: best.z.chunks(g).map(|r| r.to_vec()).collect(),
        c: best.c.chunks(g).map(|r| r.to_vec()).collect(),
        bound_trace: best.bound_trace,
        converged: best.converged,
        iterations: 0,
        bic,
        parameter_count: k,
        map_labels,
        extreme_flags,
        restart_bounds,
        config: config.clone(),
    }
    .with_iterations())
}

impl FitResult {
    fn with_iterations(mut self) -> Self {
        self.iterations = self.bound_trace.len();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_mltcn;
    use approx::assert_abs_diff_eq;

    fn design(g: usize, d: usize, m: usize) -> MltcnParams {
        MltcnParams::synthetic_design(
            g,
            d,
            m,
            vec![1.0 / g as f64; g],
            vec![0.8; g],
            vec![2.5; g],
        )
        .unwrap()
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()),
                "bound decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn e_step_single_component_is_degenerate() {
        let params = design(1, 1, 2);
        let (data, _) = sample_mltcn(&params, 10, 1).unwrap();
        let mut state = VariationalState::new(10, 1, 1, 2);
        posterior_moments(&data, &params, &mut state).unwrap();
        lower_bound(&data, &params, &mut state);
        e_step(&params, &mut state).unwrap();
        assert!(state.z.iter().all(|&z| z == 1.0));
    }

    #[test]
    fn e_step_branch_tie_returns_tau() {
        // When both branch bounds agree the prior wins: c = tau.
        let params = MltcnParams {
            g: 1,
            d: 1,
            pi: vec![1.0],
            alpha: vec![vec![0.0]],
            w: vec![vec![vec![0.0]]],
            tau: vec![0.83],
            eta: vec![2.0],
        };
        let data = crate::model::BinaryDataset::new(1, 1, vec![1]).unwrap();
        let mut state = VariationalState::new(1, 1, 1, 1);
        state.branch_mut(0, 0, NORMAL).bound = -1.25;
        state.branch_mut(0, 0, EXTREME).bound = -1.25;
        state.component_bounds[0] = log_add_exp(
            params.tau[0].ln() - 1.25,
            (1.0 - params.tau[0]).ln() - 1.25,
        );
        let _ = &data;
        e_step(&params, &mut state).unwrap();
        assert_abs_diff_eq!(state.c[0], 0.83, epsilon = 1e-12);
    }

    #[test]
    fn e_step_responsibility_ratio() {
        // pi = (1/2, 1/2) and L_i1 = L_i2 + log 3 gives z_i1 = 3/4.
        let params = MltcnParams {
            g: 2,
            d: 1,
            pi: vec![0.5, 0.5],
            alpha: vec![vec![0.0], vec![0.0]],
            w: vec![vec![vec![0.0]], vec![vec![0.0]]],
            tau: vec![0.8, 0.8],
            eta: vec![2.0, 2.0],
        };
        let mut state = VariationalState::new(1, 2, 1, 1);
        state.component_bounds[0] = -2.0 + 3.0f64.ln();
        state.component_bounds[1] = -2.0;
        for g in 0..2 {
            state.branch_mut(0, g, NORMAL).bound = state.component_bounds[g];
            state.branch_mut(0, g, EXTREME).bound = state.component_bounds[g];
        }
        e_step(&params, &mut state).unwrap();
        assert_abs_diff_eq!(state.z[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(state.z[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn update_mixing_examples() {
        // Hard 40/60 split.
        let mut z = Vec::new();
        for i in 0..100 {
            z.extend(if i < 40 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        assert_eq!(update_mixing(&z, 2), vec![0.4, 0.6]);
        // Uniform.
        let z = vec![0.25; 4 * 8];
        for p in update_mixing(&z, 4) {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
        // Single row.
        assert_eq!(update_mixing(&[0.3, 0.7], 2), vec![0.3, 0.7]);
    }

    #[test]
    fn update_tau_examples() {
        let n = 5;
        let z = vec![1.0; n];
        // All-normal weights clamp just below 1.
        let tau = update_tau(&z, &vec![1.0; n], 1, 0.5).unwrap();
        assert_abs_diff_eq!(tau[0], 1.0 - 1e-6, epsilon = 1e-15);
        // Interior maximizer is the weighted mean.
        let tau = update_tau(&z, &vec![0.9; n], 1, 0.5).unwrap();
        assert_abs_diff_eq!(tau[0], 0.9, epsilon = 1e-12);
        // Below the floor: clamped to floor + 1e-6.
        let tau = update_tau(&z, &vec![0.3; n], 1, 0.5).unwrap();
        assert_abs_diff_eq!(tau[0], 0.500001, epsilon = 1e-12);
    }

    #[test]
    fn update_tau_empty_component_errors() {
        let z = vec![1.0, 0.0, 1.0, 0.0];
        let c = vec![0.9; 4];
        assert!(matches!(
            update_tau(&z, &c, 2, 0.5),
            Err(Error::EmptyComponent { group: 1 })
        ));
    }

    #[test]
    fn tau_update_matches_numeric_search() {
        // The clamped weighted mean maximizes
        // sum_i z_i [c_i log t + (1-c_i) log(1-t)] over (floor, 1).
        let z = [0.2, 0.9, 0.4, 1.0, 0.7];
        let c = [0.99, 0.62, 0.81, 0.74, 0.55];
        let objective = |t: f64| -> f64 {
            z.iter()
                .zip(&c)
                .map(|(&zi, &ci)| zi * (ci * t.ln() + (1.0 - ci) * (1.0 - t).ln()))
                .sum()
        };
        let tau = update_tau(&z, &c, 1, 0.5).unwrap()[0];
        let numeric = golden_max(objective, 0.5 + 1e-9, 1.0 - 1e-9);
        assert_abs_diff_eq!(tau, numeric, epsilon = 1e-6);
    }

    pub(super) fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..200 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = f(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = f(x1);
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn posterior_moments_with_zero_slopes() {
        let params = MltcnParams {
            g: 1,
            d: 2,
            pi: vec![1.0],
            alpha: vec![vec![0.4, -1.0]],
            w: vec![vec![vec![0.0, 0.0], vec![0.0, 0.0]]],
            tau: vec![0.8],
            eta: vec![3.0],
        };
        let data = crate::model::BinaryDataset::new(1, 2, vec![1, 0]).unwrap();
        let mut state = VariationalState::new(1, 1, 2, 2);
        posterior_moments(&data, &params, &mut state).unwrap();
        let normal = state.branch(0, 0, NORMAL);
        assert_eq!(normal.mu, vec![0.0, 0.0]);
        assert_abs_diff_eq!(normal.sigma.get(0, 0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(normal.sigma.get(1, 1), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(normal.sigma.get(0, 1), 0.0, epsilon = 1e-14);
        let extreme = state.branch(0, 0, EXTREME);
        assert_abs_diff_eq!(extreme.sigma.get(0, 0), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(extreme.sigma.get(1, 1), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_moments_scalar_example() {
        // D=1, M=1, xi=1, alpha=0, w=1, x=1:
        // Sigma = 1/(1 - 2 B(1)), mu = Sigma * (x - 1/2).
        let params = MltcnParams {
            g: 1,
            d: 1,
            pi: vec![1.0],
            alpha: vec![vec![0.0]],
            w: vec![vec![vec![1.0]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let data = crate::model::BinaryDataset::new(1, 1, vec![1]).unwrap();
        let mut state = VariationalState::new(1, 1, 1, 1);
        posterior_moments(&data, &params, &mut state).unwrap();
        let branch = state.branch(0, 0, NORMAL);
        // B(1) = -0.1155293, so Sigma = 1 / 1.2310586 = 0.8123090.
        let sigma_expected = 1.0 / (1.0 - 2.0 * jaakkola_b(1.0));
        assert_abs_diff_eq!(branch.sigma.get(0, 0), sigma_expected, epsilon = 1e-12);
        assert_abs_diff_eq!(branch.sigma.get(0, 0), 0.8123090, epsilon = 1e-6);
        assert_abs_diff_eq!(branch.mu[0], sigma_expected * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(branch.mu[0], 0.4061545, epsilon = 1e-6);
    }

    #[test]
    fn update_xi_examples() {
        // w = 0 leaves only the intercept: xi = |alpha|.
        let params = MltcnParams {
            g: 1,
            d: 2,
            pi: vec![1.0],
            alpha: vec![vec![-1.7]],
            w: vec![vec![vec![0.0, 0.0]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let mut state = VariationalState::new(1, 1, 2, 1);
        update_xi(&params, &mut state);
        assert_abs_diff_eq!(state.branch(0, 0, NORMAL).xi[0], 1.7, epsilon = 1e-14);

        // mu = 0, Sigma = I, alpha = 0: xi = ||w||.
        let params = MltcnParams {
            g: 1,
            d: 2,
            pi: vec![1.0],
            alpha: vec![vec![0.0]],
            w: vec![vec![vec![0.6, 0.8]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let mut state = VariationalState::new(1, 1, 2, 1);
        update_xi(&params, &mut state);
        assert_abs_diff_eq!(state.branch(0, 0, NORMAL).xi[0], 1.0, epsilon = 1e-14);

        // D=1, w=1, alpha=1, mu=1, Sigma=0: xi^2 = 1 + 2 + 1.
        let params = MltcnParams {
            g: 1,
            d: 1,
            pi: vec![1.0],
            alpha: vec![vec![1.0]],
            w: vec![vec![vec![1.0]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let mut state = VariationalState::new(1, 1, 1, 1);
        for k in [EXTREME, NORMAL] {
            let b = state.branch_mut(0, 0, k);
            b.mu = vec![1.0];
            b.sigma = SymMatrix::zeros(1);
        }
        update_xi(&params, &mut state);
        assert_abs_diff_eq!(state.branch(0, 0, NORMAL).xi[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn update_loadings_zero_rhs_gives_zero() {
        // Two observations with opposite responses and symmetric posteriors:
        // the right-hand side vanishes, so alpha = 0 and w = 0.
        let mut params = MltcnParams {
            g: 1,
            d: 1,
            pi: vec![1.0],
            alpha: vec![vec![0.9]],
            w: vec![vec![vec![0.4]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let data = crate::model::BinaryDataset::new(2, 1, vec![1, 0]).unwrap();
        let mut state = VariationalState::new(2, 1, 1, 1);
        for i in 0..2 {
            state.z[i] = 1.0;
            state.c[i] = 1.0;
        }
        update_loadings(&data, &state, &mut params).unwrap();
        assert_abs_diff_eq!(params.alpha[0][0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(params.w[0][0][0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn update_loadings_scalar_hand_computed() {
        // Single observation, z = c = 1, mu = 0, Sigma = 1, x = 1, D = 1.
        // E(Y~Y~') = I, so H = -2 B(xi) I and b = (0, 1/2):
        // w stays 0 and alpha = -1/(4 B(xi)).
        let mut params = MltcnParams {
            g: 1,
            d: 1,
            pi: vec![1.0],
            alpha: vec![vec![0.3]],
            w: vec![vec![vec![0.7]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let data = crate::model::BinaryDataset::new(1, 1, vec![1]).unwrap();
        let mut state = VariationalState::new(1, 1, 1, 1);
        state.z[0] = 1.0;
        state.c[0] = 1.0;
        update_xi(&params, &mut state);
        let xi = state.branch(0, 0, NORMAL).xi[0];
        assert_abs_diff_eq!(xi, (0.7f64 * 0.7 + 0.3 * 0.3).sqrt(), epsilon = 1e-14);
        update_loadings(&data, &state, &mut params).unwrap();
        assert_abs_diff_eq!(params.w[0][0][0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            params.alpha[0][0],
            -0.25 / jaakkola_b(xi),
            epsilon = 1e-12
        );
    }

    #[test]
    fn intercept_only_fixed_point_is_the_exact_mle() {
        // D = 0 reduces the loading update to the variational logistic
        // intercept update; its fixed point is logit of the response mean,
        // the exact single-Bernoulli MLE.
        let data = crate::model::BinaryDataset::new(8, 1, vec![1, 1, 1, 0, 1, 0, 1, 1]).unwrap();
        let mut params = MltcnParams {
            g: 1,
            d: 0,
            pi: vec![1.0],
            alpha: vec![vec![0.1]],
            w: vec![vec![vec![]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let mut state = VariationalState::new(8, 1, 0, 1);
        for i in 0..8 {
            state.z[i] = 1.0;
            state.c[i] = 1.0;
        }
        for _ in 0..200 {
            posterior_moments(&data, &params, &mut state).unwrap();
            update_xi(&params, &mut state);
            update_loadings(&data, &state, &mut params).unwrap();
        }
        let mean = 6.0f64 / 8.0;
        assert_abs_diff_eq!(
            params.alpha[0][0],
            (mean / (1.0 - mean)).ln(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn update_eta_stationary_point_and_clamp() {
        // S = 1, D = 2, T = 5 puts the stationary point at 2.5.
        let mut params = MltcnParams {
            g: 1,
            d: 2,
            pi: vec![1.0],
            alpha: vec![vec![0.0]],
            w: vec![vec![vec![0.0, 0.0]]],
            tau: vec![0.8],
            eta: vec![7.0],
        };
        let mut state = VariationalState::new(1, 1, 2, 1);
        state.z[0] = 1.0;
        state.c[0] = 0.0;
        let b = state.branch_mut(0, 0, EXTREME);
        b.sigma = SymMatrix::scaled_identity(2, 1.5);
        b.mu = vec![2.0f64.sqrt(), 0.0];
        update_eta(&state, &mut params, 1000.0);
        assert_abs_diff_eq!(params.eta[0], 2.5, epsilon = 1e-12);

        // T = D * S exactly: stationary point 1 is clamped just above 1.
        let b = state.branch_mut(0, 0, EXTREME);
        b.sigma = SymMatrix::identity(2);
        b.mu = vec![1.0, 0.0];
        // second moment = trace + ||mu||^2 = 3; rescale so T = D.
        b.sigma = SymMatrix::scaled_identity(2, 0.5);
        update_eta(&state, &mut params, 1000.0);
        assert_abs_diff_eq!(params.eta[0], 1.0 + 1e-6, epsilon = 1e-15);

        // No extreme mass: eta unchanged.
        state.c[0] = 1.0;
        params.eta[0] = 3.3;
        update_eta(&state, &mut params, 1000.0);
        assert_eq!(params.eta[0], 3.3);
    }

    #[test]
    fn eta_closed_form_matches_numeric_search() {
        use rand::Rng;
        let mut rng = crate::seeding::substream_rng(404, 0);
        for _ in 0..50 {
            let d = rng.random_range(1..=3usize);
            let n = rng.random_range(2..10usize);
            let mut state = VariationalState::new(n, 1, d, 1);
            let mut params = MltcnParams {
                g: 1,
                d,
                pi: vec![1.0],
                alpha: vec![vec![0.0]],
                w: vec![vec![vec![0.0; d]]],
                tau: vec![0.8],
                eta: vec![2.0],
            };
            let mut s = 0.0;
            let mut t = 0.0;
            for i in 0..n {
                state.z[i] = rng.random_range(0.05..1.0);
                state.c[i] = rng.random_range(0.0..0.95);
                let wgt = state.z[i] * (1.0 - state.c[i]);
                let b = state.branch_mut(i, 0, EXTREME);
                b.sigma = SymMatrix::scaled_identity(d, rng.random_range(0.2..4.0));
                b.mu = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let second = b.sigma.trace() + b.mu.iter().map(|v| v * v).sum::<f64>();
                s += wgt;
                t += wgt * second;
            }
            update_eta(&state, &mut params, 1000.0);
            let objective = |eta: f64| -0.5 * d as f64 * s * eta.ln() - t / (2.0 * eta);
            let numeric = golden_max(objective, 1.0 + 1e-9, 1000.0).max(1.0 + 1e-6);
            assert_abs_diff_eq!(params.eta[0], numeric, epsilon = 1e-6);
        }
    }

    #[test]
    fn aitken_worked_example() {
        let est = aitken_estimate(10.0, 20.0, 25.0);
        assert_eq!(est.rate, 0.5);
        assert_eq!(est.l_inf, 30.0);
        assert!(!est.plateau);
    }

    #[test]
    fn aitken_plateau_on_constant_sequence() {
        let mut tracker = AitkenTracker::new(0.01);
        assert!(!tracker.push(5.0));
        assert!(!tracker.push(5.0));
        assert!(tracker.push(5.0));
    }

    #[test]
    fn aitken_geometric_converges_at_first_eligible_check() {
        // l_t = 100 - 2^{-t}: every Aitken estimate is exactly 100.
        let mut tracker = AitkenTracker::new(0.01);
        assert!(!tracker.push(99.0));
        assert!(!tracker.push(99.5));
        assert!(!tracker.push(99.75)); // first estimate, nothing to compare
        assert!(tracker.push(99.875)); // second estimate matches the first
    }

    #[test]
    fn initialize_single_component() {
        let params = design(1, 1, 3);
        let (data, _) = sample_mltcn(&params, 30, 5).unwrap();
        let config = FitConfig::new(1, 1).with_seed(9);
        let (init, state) = initialize(&data, &config, 0).unwrap();
        assert!(state.z.iter().all(|&z| z == 1.0));
        for m in 0..3 {
            let mean: f64 =
                (0..30).map(|i| data.get(i, m) as f64).sum::<f64>() / 30.0;
            let mean = mean.clamp(1e-3, 1.0 - 1e-3);
            assert_abs_diff_eq!(
                init.alpha[0][m],
                (mean / (1.0 - mean)).ln(),
                epsilon = 1e-12
            );
        }
        assert_eq!(init.tau, vec![0.9]);
        assert_eq!(init.eta, vec![2.0]);
    }

    #[test]
    fn initialize_is_deterministic_and_clamps_empty_columns() {
        let data = crate::model::BinaryDataset::new(4, 2, vec![0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        let config = FitConfig::new(1, 2).with_seed(3);
        let (a, _) = initialize(&data, &config, 2).unwrap();
        let (b, _) = initialize(&data, &config, 2).unwrap();
        assert_eq!(a, b);
        let (other, _) = initialize(&data, &config, 3).unwrap();
        assert_ne!(a.w, other.w);
        // All-zero column: alpha clamps to logit(1e-3).
        let expected = (1e-3f64 / (1.0 - 1e-3)).ln();
        assert_abs_diff_eq!(a.alpha[0][0], expected, epsilon = 1e-12);
    }

    #[test]
    fn fit_single_component_monotone_and_deterministic() {
        let params = design(1, 1, 4);
        let (data, _) = sample_mltcn(&params, 80, 21).unwrap();
        let config = FitConfig {
            restarts: 3,
            max_iter: 200,
            ..FitConfig::new(1, 1)
        }
        .with_seed(17);
        let fit1 = fit(&data, &config).unwrap();
        assert_monotone(&fit1.bound_trace);
        assert!(fit1.converged);
        assert!(fit1.bic.is_finite());
        assert!(fit1.params.tau[0] > 0.5 && fit1.params.tau[0] < 1.0);
        assert!(fit1.params.eta[0] > 1.0);
        let fit2 = fit(&data, &config).unwrap();
        assert_eq!(fit1, fit2);
    }

    #[test]
    fn fit_two_components_recovers_structure() {
        let params = design(2, 1, 12);
        let (data, truth) = sample_mltcn(&params, 200, 33).unwrap();
        let config = FitConfig {
            restarts: 4,
            max_iter: 300,
            ..FitConfig::new(2, 1)
        }
        .with_seed(7);
        let result = fit(&data, &config).unwrap();
        assert_monotone(&result.bound_trace);
        let ari = crate::eval::adjusted_rand_index(
            truth.z_hard.as_ref().unwrap(),
            &result.map_labels,
        );
        assert!(ari > 0.6, "ARI {ari}");
        // Constraints hold after fitting.
        assert!(result.params.validate().is_ok());
    }

    #[test]
    fn bound_is_invariant_under_component_permutation() {
        let params = design(2, 2, 5);
        let permuted = params.permute_components(&[1, 0]);
        let (data, _) = sample_mltcn(&params, 40, 2).unwrap();
        let mut s1 = VariationalState::new(40, 2, 2, 5);
        posterior_moments(&data, &params, &mut s1).unwrap();
        let l1 = lower_bound(&data, &params, &mut s1);
        let mut s2 = VariationalState::new(40, 2, 2, 5);
        posterior_moments(&data, &permuted, &mut s2).unwrap();
        let l2 = lower_bound(&data, &permuted, &mut s2);
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-10);
    }

    #[test]
    fn bound_tight_for_single_bernoulli() {
        // M=1, w=0, alpha=0: at the optimal xi = 0 the normal-branch bound
        // equals the exact single-Bernoulli likelihood 1/2.
        let params = MltcnParams {
            g: 1,
            d: 1,
            pi: vec![1.0],
            alpha: vec![vec![0.0]],
            w: vec![vec![vec![0.0]]],
            tau: vec![0.8],
            eta: vec![2.0],
        };
        let data = crate::model::BinaryDataset::new(1, 1, vec![1]).unwrap();
        let mut state = VariationalState::new(1, 1, 1, 1);
        posterior_moments(&data, &params, &mut state).unwrap();
        update_xi(&params, &mut state);
        posterior_moments(&data, &params, &mut state).unwrap();
        lower_bound(&data, &params, &mut state);
        assert_abs_diff_eq!(
            state.branch(0, 0, NORMAL).bound.exp(),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn contamination_disabled_reduces_to_plain_latent_trait() {
        // Scalar (D=1) reference implementation of the single-branch
        // latent trait updates, written without the shared matrix code.
        let params = design(1, 1, 4);
        let (data, _) = sample_mltcn(&params, 25, 8).unwrap();
        let m_vars = 4;
        let n = 25;

        let mut fitted = MltcnParams {
            g: 1,
            d: 1,
            pi: vec![1.0],
            alpha: vec![(0..m_vars).map(|m| 0.1 * m as f64 - 0.2).collect()],
            w: vec![(0..m_vars).map(|m| vec![0.3 - 0.1 * m as f64]).collect()],
            tau: vec![0.9],
            eta: vec![2.0],
        };
        let reference = fitted.clone();

        let mut state = VariationalState::new(n, 1, 1, m_vars);
        for i in 0..n {
            state.z[i] = 1.0;
            state.c[i] = 1.0; // contamination disabled
        }
        posterior_moments(&data, &fitted, &mut state).unwrap();
        update_xi(&fitted, &mut state);
        update_loadings(&data, &state, &mut fitted).unwrap();

        // Reference route: scalar posterior moments, xi, and the 2x2 solve
        // by Cramer's rule.
        let alpha = &reference.alpha[0];
        let w: Vec<f64> = reference.w[0].iter().map(|v| v[0]).collect();
        let mut mu = vec![0.0; n];
        let mut sigma = vec![0.0; n];
        let mut xi = vec![vec![0.0; m_vars]; n];
        for i in 0..n {
            let x = data.row(i);
            // Fresh state starts with every xi at 1.
            let prec_direct: f64 =
                1.0 - 2.0 * w.iter().map(|wm| jaakkola_b(1.0) * wm * wm).sum::<f64>();
            let lin: f64 = (0..m_vars)
                .map(|m| (x[m] as f64 - 0.5 + 2.0 * jaakkola_b(1.0) * alpha[m]) * w[m])
                .sum();
            sigma[i] = 1.0 / prec_direct;
            mu[i] = sigma[i] * lin;
            for m in 0..m_vars {
                let s = w[m] * mu[i];
                xi[i][m] =
                    (w[m] * w[m] * sigma[i] + s * s + 2.0 * alpha[m] * s + alpha[m] * alpha[m])
                        .sqrt();
            }
        }
        for m in 0..m_vars {
            // 2x2 system in (w_m, alpha_m).
            let (mut h11, mut h12, mut h22, mut b1v, mut b2v) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let bm = jaakkola_b(xi[i][m]);
                let e11 = sigma[i] + mu[i] * mu[i];
                h11 += -2.0 * bm * e11;
                h12 += -2.0 * bm * mu[i];
                h22 += -2.0 * bm;
                let xmh = data.get(i, m) as f64 - 0.5;
                b1v += xmh * mu[i];
                b2v += xmh;
            }
            let det = h11 * h22 - h12 * h12;
            let w_ref = (b1v * h22 - b2v * h12) / det;
            let a_ref = (h11 * b2v - h12 * b1v) / det;
            assert_abs_diff_eq!(fitted.w[0][m][0], w_ref, epsilon = 1e-10);
            assert_abs_diff_eq!(fitted.alpha[0][m], a_ref, epsilon = 1e-10);
        }
    }

    #[test]
    fn fit_rejects_too_few_observations() {
        let params = design(2, 1, 3);
        let (data, _) = sample_mltcn(&params, 2, 1).unwrap();
        assert!(fit(&data, &FitConfig::new(2, 1)).is_err());
    }

    #[test]
    fn config_domain_checks() {
        let mut config = FitConfig::new(2, 1);
        config.tau_floor = 0.4;
        assert!(config.validate().is_err());
        let mut config = FitConfig::new(2, 1);
        config.aitken_epsilon = 0.0;
        assert!(config.validate().is_err());
        assert!(FitConfig::new(2, 1).validate().is_ok());
    }

    #[test]
    fn fit_result_sanity() {
        let params = design(2, 1, 5);
        let (data, _) = sample_mltcn(&params, 60, 12).unwrap();
        let config = FitConfig {
            restarts: 2,
            max_iter: 150,
            ..FitConfig::new(2, 1)
        };
        let result = fit(&data, &config).unwrap();
        // Responsibilities on the simplex.
        for row in &result.z {
            let s: f64 = row.iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-10);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        for row in &result.c {
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // BIC consistency.
        let k = count_parameters(2, 1, 5);
        assert_abs_diff_eq!(
            result.bic,
            -2.0 * result.bound() + k as f64 * 60f64.ln(),
            epsilon = 1e-10
        );
        assert_eq!(result.iterations, result.bound_trace.len());
        assert_eq!(result.restart_bounds.len(), 2);
        // MAP labels attain row maxima; extreme flags follow c at the MAP
        // component.
        for (i, &lab) in result.map_labels.iter().enumerate() {
            let max = result.z[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(result.z[i][lab], max);
            assert_eq!(result.extreme_flags[i], result.c[i][lab] < 0.5);
        }
    }
}
