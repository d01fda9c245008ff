//! Bayesian AR(J) model with a Christmas spike covariate. Autoregressive
//! coefficients are shared across locations under a hierarchical normal
//! prior; innovation scales are per location with Half-Cauchy priors.
//! Fitting uses Metropolis-within-Gibbs with per-scalar adaptive proposal
//! steps (target acceptance 0.44, adaptation frozen after warmup), scales
//! log-reparameterized with the Jacobian correction. Forecasts iterate
//! one-step-ahead simulation per posterior draw, predicting the covariate
//! alongside the signal.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::core::{
    christmas_offset, quantile_levels, Epiweek, ForecastTask, QuantileForecast,
    SignalKind,
};
use crate::error::{FlusionError, Result};
use crate::stats;
use crate::transform::{inverse_standardize, TransformParams, TransformedData};

/// The holiday reporting-spike covariate: 3 on the week containing
/// Christmas, decaying by 1 per week out to two weeks on either side.
pub fn spike_covariate(ew: Epiweek) -> u8 {
    match christmas_offset(ew).abs() {
        0 => 3,
        1 => 2,
        2 => 1,
        _ => 0,
    }
}

#[derive(Debug, Clone)]
pub struct ArxConfig {
    /// Autoregressive order J.
    pub order: usize,
    pub num_chains: usize,
    pub warmup_draws: usize,
    pub posterior_draws: usize,
    pub halfcauchy_scale: f64,
    pub seed: u64,
    /// Treat future covariate values as known at forecast time instead of
    /// simulating them (extension; the paper's method predicted them).
    pub known_future_covariate: bool,
}

impl Default for ArxConfig {
    fn default() -> Self {
        ArxConfig {
            order: 8,
            num_chains: 4,
            warmup_draws: 500,
            posterior_draws: 500,
            halfcauchy_scale: 1.0,
            seed: 0,
            known_future_covariate: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArxDraw {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub xi: f64,
    /// Per location, in posterior location order.
    pub sigma_eps: Vec<f64>,
    pub sigma_nu: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScalarDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub scalars: Vec<ScalarDiagnostic>,
}

impl ConvergenceReport {
    pub fn max_rhat(&self) -> f64 {
        self.scalars.iter().map(|s| s.rhat).fold(f64::NAN, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("scalar\trhat\tess\n");
        for s in &self.scalars {
            out.push_str(&format!("{}\t{:.4}\t{:.0}\n", s.name, s.rhat, s.ess));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ArxPosterior {
    pub cfg: ArxConfig,
    pub locations: Vec<String>,
    pub covariate_enabled: bool,
    pub draws: Vec<ArxDraw>,
    pub convergence: ConvergenceReport,
    /// Standardized NHSN history per location, for forecast anchoring.
    series: BTreeMap<String, BTreeMap<Epiweek, f64>>,
    params: BTreeMap<String, TransformParams>,
}

// ---------------------------------------------------------------------------
// Likelihood blocks

/// One regression block: y_t against J lag columns, rows row-major.
#[derive(Debug, Clone, Default)]
struct RegBlock {
    y: Vec<f64>,
    /// lag matrix, rows * width
    lags: Vec<f64>,
    width: usize,
}

impl RegBlock {
    fn rows(&self) -> usize {
        self.y.len()
    }
}

/// The full model: z-equation and x-equation blocks per location.
struct ArxModel {
    cov_enabled: bool,
    hc_scale: f64,
    /// z blocks: width = J (z lags) + J (x lags, zero when disabled)
    z_blocks: Vec<RegBlock>,
    /// x blocks: width = J
    x_blocks: Vec<RegBlock>,
}

/// Parameter vector layout:
/// [alpha(J), beta(J)?, gamma(J)?, log_xi, log_sigma_eps(L), log_sigma_nu(L)?]
struct Layout {
    j: usize,
    locs: usize,
    cov: bool,
}

impl Layout {
    fn alpha(&self, k: usize) -> usize {
        k
    }
    fn beta(&self, k: usize) -> usize {
        self.j + k
    }
    fn gamma(&self, k: usize) -> usize {
        2 * self.j + k
    }
    fn num_coeffs(&self) -> usize {
        if self.cov {
            3 * self.j
        } else {
            self.j
        }
    }
    fn log_xi(&self) -> usize {
        self.num_coeffs()
    }
    fn log_sigma_eps(&self, l: usize) -> usize {
        self.log_xi() + 1 + l
    }
    fn log_sigma_nu(&self, l: usize) -> usize {
        self.log_xi() + 1 + self.locs + l
    }
    fn len(&self) -> usize {
        self.log_xi() + 1 + self.locs + if self.cov { self.locs } else { 0 }
    }
    fn names(&self, locations: &[String]) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        for k in 0..self.j {
            names.push(format!("alpha[{}]", k + 1));
        }
        if self.cov {
            for k in 0..self.j {
                names.push(format!("beta[{}]", k + 1));
            }
            for k in 0..self.j {
                names.push(format!("gamma[{}]", k + 1));
            }
        }
        names.push("xi".to_string());
        for l in locations {
            names.push(format!("sigma_eps[{l}]"));
        }
        if self.cov {
            for l in locations {
                names.push(format!("sigma_nu[{l}]"));
            }
        }
        names
    }
}

/// log density of Half-Cauchy(scale) at v = exp(theta), including the
/// Jacobian of the log reparameterization (additive constants dropped).
fn log_halfcauchy_reparam(theta: f64, scale: f64) -> f64 {
    let v = theta.exp();
    -(1.0 + (v / scale).powi(2)).ln() + theta
}

/// Precomputed sufficient statistics of one regression block.
struct Gram {
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    n: usize,
    width: usize,
}

impl Gram {
    fn from_block(b: &RegBlock) -> Gram {
        let w = b.width;
        let mut xtx = vec![0.0; w * w];
        let mut xty = vec![0.0; w];
        let mut yty = 0.0;
        for r in 0..b.rows() {
            let row = &b.lags[r * w..(r + 1) * w];
            for i in 0..w {
                xty[i] += row[i] * b.y[r];
                for k in i..w {
                    xtx[i * w + k] += row[i] * row[k];
                }
            }
            yty += b.y[r] * b.y[r];
        }
        for i in 0..w {
            for k in 0..i {
                xtx[i * w + k] = xtx[k * w + i];
            }
        }
        Gram {
            xtx,
            xty,
            yty,
            n: b.rows(),
            width: w,
        }
    }

    fn sse(&self, c: &[f64]) -> f64 {
        let w = self.width;
        let mut lin = 0.0;
        let mut quad = 0.0;
        for i in 0..w {
            lin += c[i] * self.xty[i];
            for k in 0..w {
                quad += c[i] * self.xtx[i * w + k] * c[k];
            }
        }
        (self.yty - 2.0 * lin + quad).max(0.0)
    }
}

/// In-place lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for k in 0..=i {
            let mut s = a[i * n + k];
            for m in 0..k {
                s -= a[i * n + m] * a[k * n + m];
            }
            if i == k {
                if s <= 0.0 {
                    return Err(FlusionError::Numeric(
                        "non positive definite conditional precision in ARX sampler".into(),
                    ));
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + k] = s / a[k * n + k];
            }
        }
        for k in i + 1..n {
            a[i * n + k] = 0.0;
        }
    }
    Ok(())
}

fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        for k in 0..i {
            b[i] -= l[i * n + k] * b[k];
        }
        b[i] /= l[i * n + i];
    }
}

fn backward_solve_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= l[k * n + i] * b[k];
        }
        b[i] /= l[i * n + i];
    }
}

/// Draw the coefficient vector from its exact multivariate-normal
/// conditional: precision A = sum_l XtX_l / sigma_l^2 + I / xi^2.
fn gibbs_coefficients(
    grams: &[Gram],
    sigmas: &[f64],
    xi: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let w = grams[0].width;
    let mut a = vec![0.0; w * w];
    let mut b = vec![0.0; w];
    for (g, &sigma) in grams.iter().zip(sigmas) {
        let inv = 1.0 / (sigma * sigma);
        for i in 0..w * w {
            a[i] += g.xtx[i] * inv;
        }
        for i in 0..w {
            b[i] += g.xty[i] * inv;
        }
    }
    let prior_prec = 1.0 / (xi * xi);
    for i in 0..w {
        a[i * w + i] += prior_prec;
    }
    cholesky(&mut a, w)?;
    forward_solve(&a, w, &mut b);
    backward_solve_t(&a, w, &mut b); // b is now the conditional mean
    let mut u: Vec<f64> = (0..w).map(|_| rng.sample(StandardNormal)).collect();
    backward_solve_t(&a, w, &mut u); // u ~ N(0, A^-1)
    Ok((0..w).map(|i| b[i] + u[i]).collect())
}

fn run_chain(model: &ArxModel, layout: &Layout, cfg: &ArxConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grams_z: Vec<Gram> = model.z_blocks.iter().map(Gram::from_block).collect();
    let grams_x: Vec<Gram> = model.x_blocks.iter().map(Gram::from_block).collect();
    let locs = layout.locs;
    let zw = grams_z[0].width;

    // state: coefficient blocks and log-scale scalars
    let mut c_z = vec![0.0; zw];
    let mut gamma = vec![0.0; layout.j];
    // jittered log-scale starts so chains are over-dispersed
    let mut log_xi = 0.5 * rng.sample::<f64, _>(StandardNormal);
    let mut ls_eps: Vec<f64> = (0..locs)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut ls_nu: Vec<f64> = (0..locs)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();

    // adaptive Metropolis steps for the scalar parameters only
    let n_scalars = 1 + locs + if model.cov_enabled { locs } else { 0 };
    let mut log_steps = vec![-0.5f64; n_scalars];
    let mut accepts = vec![0u32; n_scalars];
    let batch = 50;

    let mut draws = Vec::with_capacity(cfg.posterior_draws);
    let total = cfg.warmup_draws + cfg.posterior_draws;
    for iter in 0..total {
        let xi = log_xi.exp();
        let sig_eps: Vec<f64> = ls_eps.iter().map(|v| v.exp()).collect();
        if let Ok(c) = gibbs_coefficients(&grams_z, &sig_eps, xi, &mut rng) {
            c_z = c;
        }
        if model.cov_enabled {
            let sig_nu: Vec<f64> = ls_nu.iter().map(|v| v.exp()).collect();
            if let Ok(c) = gibbs_coefficients(&grams_x, &sig_nu, xi, &mut rng) {
                gamma = c;
            }
        }

        // Metropolis on log xi
        let num_coeffs = zw + if model.cov_enabled { layout.j } else { 0 };
        let mut sum_sq: f64 = c_z.iter().map(|c| c * c).sum();
        if model.cov_enabled {
            sum_sq += gamma.iter().map(|c| c * c).sum::<f64>();
        }
        {
            let cur = log_xi;
            let prop = cur + log_steps[0].exp() * rng.sample::<f64, _>(StandardNormal);
            let (xi_cur, xi_prop) = (cur.exp(), prop.exp());
            let log_ratio = -(num_coeffs as f64) * (prop - cur)
                - 0.5 * sum_sq * (1.0 / (xi_prop * xi_prop) - 1.0 / (xi_cur * xi_cur))
                + log_halfcauchy_reparam(prop, model.hc_scale)
                - log_halfcauchy_reparam(cur, model.hc_scale);
            if accept(&mut rng, log_ratio) {
                log_xi = prop;
                accepts[0] += 1;
            }
        }

        // Metropolis on the per-location innovation scales
        let scale_update = |cur: f64, step_idx: usize, sse: f64, n: f64,
                                rng: &mut ChaCha8Rng,
                                accepts: &mut [u32],
                                log_steps: &[f64]|
         -> f64 {
            let prop = cur + log_steps[step_idx].exp() * rng.sample::<f64, _>(StandardNormal);
            let (s_cur, s_prop) = (cur.exp(), prop.exp());
            let log_ratio = -n * (prop - cur)
                - 0.5 * sse * (1.0 / (s_prop * s_prop) - 1.0 / (s_cur * s_cur))
                + log_halfcauchy_reparam(prop, model.hc_scale)
                - log_halfcauchy_reparam(cur, model.hc_scale);
            if accept(rng, log_ratio) {
                accepts[step_idx] += 1;
                prop
            } else {
                cur
            }
        };
        for l in 0..locs {
            let sse = grams_z[l].sse(&c_z);
            ls_eps[l] = scale_update(
                ls_eps[l],
                1 + l,
                sse,
                grams_z[l].n as f64,
                &mut rng,
                &mut accepts,
                &log_steps,
            );
        }
        if model.cov_enabled {
            for l in 0..locs {
                let sse = grams_x[l].sse(&gamma);
                ls_nu[l] = scale_update(
                    ls_nu[l],
                    1 + locs + l,
                    sse,
                    grams_x[l].n as f64,
                    &mut rng,
                    &mut accepts,
                    &log_steps,
                );
            }
        }

        // adapt proposal scales toward 0.44 acceptance during warmup only
        if iter < cfg.warmup_draws && (iter + 1) % batch == 0 {
            let adj = (1.0 / ((iter / batch + 1) as f64).sqrt()).min(0.3);
            for (idx, a) in accepts.iter_mut().enumerate() {
                let rate = *a as f64 / batch as f64;
                log_steps[idx] += if rate > 0.44 { adj } else { -adj };
                *a = 0;
            }
        }
        if iter >= cfg.warmup_draws {
            // flatten to the diagnostic layout
            let mut p = vec![0.0; layout.len()];
            p[..zw].copy_from_slice(&c_z);
            if model.cov_enabled {
                for k in 0..layout.j {
                    p[layout.gamma(k)] = gamma[k];
                }
            }
            p[layout.log_xi()] = log_xi;
            for l in 0..locs {
                p[layout.log_sigma_eps(l)] = ls_eps[l];
            }
            if model.cov_enabled {
                for l in 0..locs {
                    p[layout.log_sigma_nu(l)] = ls_nu[l];
                }
            }
            draws.push(p);
        }
    }
    draws
}

fn accept(rng: &mut ChaCha8Rng, log_ratio: f64) -> bool {
    log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp()
}

// ---------------------------------------------------------------------------
// Convergence diagnostics

/// Split potential scale reduction over per-chain sample sequences.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let mid = c.len() / 2;
        halves.push(&c[..mid]);
        halves.push(&c[mid..]);
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0);
    if n < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = halves.iter().map(|h| &h[..n]).collect();
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| stats::mean(h)).collect();
    let grand = stats::mean(&means);
    let b = n as f64 / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return 1.0; // all chains constant and equal
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Effective sample size via initial positive autocorrelation sums,
/// averaged across chains.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut rho_sum = 0.0;
    let mut chains_used = 0.0;
    for c in chains {
        let n = c.len();
        if n < 4 {
            continue;
        }
        let mu = stats::mean(c);
        let var: f64 = c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        if var <= 0.0 {
            continue;
        }
        let mut s = 0.0;
        for lag in 1..n / 2 {
            let rho: f64 = (0..n - lag)
                .map(|t| (c[t] - mu) * (c[t + lag] - mu))
                .sum::<f64>()
                / (n as f64 * var);
            if rho <= 0.0 {
                break;
            }
            s += rho;
        }
        rho_sum += s;
        chains_used += 1.0;
    }
    if chains_used == 0.0 {
        return total as f64;
    }
    total as f64 / (1.0 + 2.0 * rho_sum / chains_used)
}

// ---------------------------------------------------------------------------
// Public fit / forecast

/// Fit the ARX model on the standardized NHSN series in `data`, deriving
/// the spike covariate from the calendar.
pub fn fit_arx(data: &TransformedData, cfg: &ArxConfig) -> Result<ArxPosterior> {
    fit_arx_with_covariate(data, cfg, |ew| spike_covariate(ew) as f64)
}

/// Fit with a custom covariate function (used for ablations and tests).
/// The covariate equation is disabled automatically when the covariate is
/// identically zero over the training range, since its likelihood would be
/// degenerate.
pub fn fit_arx_with_covariate(
    data: &TransformedData,
    cfg: &ArxConfig,
    covariate: impl Fn(Epiweek) -> f64,
) -> Result<ArxPosterior> {
    if cfg.order < 1 {
        return Err(FlusionError::Config("ARX order must be >= 1".into()));
    }
    if cfg.num_chains < 2 || cfg.posterior_draws == 0 {
        return Err(FlusionError::Config(
            "ARX needs >= 2 chains and > 0 posterior draws".into(),
        ));
    }
    let j = cfg.order;

    let mut locations = Vec::new();
    let mut series = BTreeMap::new();
    let mut params = BTreeMap::new();
    for (key, s) in &data.series {
        if key.source != SignalKind::Nhsn {
            continue;
        }
        locations.push(key.location.clone());
        series.insert(key.location.clone(), s.values.clone());
        params.insert(key.location.clone(), s.params.clone());
    }
    if locations.is_empty() {
        return Err(FlusionError::InsufficientData(
            "no NHSN series to fit ARX on".into(),
        ));
    }

    // regression rows per location: every t whose J predecessors are present
    let mut any_x_nonzero = false;
    let mut z_blocks = Vec::new();
    let mut x_blocks = Vec::new();
    for loc in &locations {
        let s = &series[loc];
        let mut zb = RegBlock {
            width: 2 * j,
            ..Default::default()
        };
        let mut xb = RegBlock {
            width: j,
            ..Default::default()
        };
        for (&t, &zt) in s.iter() {
            let lags: Option<Vec<f64>> = (1..=j as i64)
                .map(|lag| s.get(&t.add_weeks(-lag)).copied())
                .collect();
            let Some(zlags) = lags else { continue };
            let xlags: Vec<f64> = (1..=j as i64)
                .map(|lag| covariate(t.add_weeks(-lag)))
                .collect();
            let xt = covariate(t);
            if xt != 0.0 || xlags.iter().any(|v| *v != 0.0) {
                any_x_nonzero = true;
            }
            zb.y.push(zt);
            zb.lags.extend(&zlags);
            zb.lags.extend(&xlags);
            xb.y.push(xt);
            xb.lags.extend(&xlags);
        }
        if zb.rows() == 0 {
            return Err(FlusionError::InsufficientData(format!(
                "location {loc} lacks {} consecutive observations for ARX order {j}",
                j + 1
            )));
        }
        z_blocks.push(zb);
        x_blocks.push(xb);
    }
    let cov_enabled = any_x_nonzero;
    if !cov_enabled {
        // drop the x-lag halves of the z blocks
        for zb in &mut z_blocks {
            let rows = zb.rows();
            let mut trimmed = Vec::with_capacity(rows * j);
            for r in 0..rows {
                trimmed.extend_from_slice(&zb.lags[r * 2 * j..r * 2 * j + j]);
            }
            zb.lags = trimmed;
            zb.width = j;
        }
    }

    let model = ArxModel {
        cov_enabled,
        hc_scale: cfg.halfcauchy_scale,
        z_blocks,
        x_blocks,
    };
    let layout = Layout {
        j,
        locs: locations.len(),
        cov: cov_enabled,
    };

    let chain_draws: Vec<Vec<Vec<f64>>> = (0..cfg.num_chains)
        .into_par_iter()
        .map(|c| run_chain(&model, &layout, cfg, stats::derive_seed(cfg.seed, c as u64)))
        .collect();

    // diagnostics per scalar
    let names = layout.names(&locations);
    let scalars = names
        .iter()
        .enumerate()
        .map(|(idx, name)| {
            let per_chain: Vec<Vec<f64>> = chain_draws
                .iter()
                .map(|chain| chain.iter().map(|d| d[idx]).collect())
                .collect();
            ScalarDiagnostic {
                name: name.clone(),
                rhat: split_rhat(&per_chain),
                ess: effective_sample_size(&per_chain),
            }
        })
        .collect();

    let draws = chain_draws
        .iter()
        .flatten()
        .map(|p| {
            let get_exp = |i: usize| p[i].exp();
            ArxDraw {
                alpha: (0..j).map(|k| p[layout.alpha(k)]).collect(),
                beta: if cov_enabled {
                    (0..j).map(|k| p[layout.beta(k)]).collect()
                } else {
                    vec![0.0; j]
                },
                gamma: if cov_enabled {
                    (0..j).map(|k| p[layout.gamma(k)]).collect()
                } else {
                    vec![0.0; j]
                },
                xi: get_exp(layout.log_xi()),
                sigma_eps: (0..locations.len())
                    .map(|l| get_exp(layout.log_sigma_eps(l)))
                    .collect(),
                sigma_nu: if cov_enabled {
                    (0..locations.len())
                        .map(|l| get_exp(layout.log_sigma_nu(l)))
                        .collect()
                } else {
                    vec![0.0; locations.len()]
                },
            }
        })
        .collect();

    Ok(ArxPosterior {
        cfg: cfg.clone(),
        locations,
        covariate_enabled: cov_enabled,
        draws,
        convergence: ConvergenceReport { scalars },
        series,
        params,
    })
}

impl ArxPosterior {
    /// Error with the diagnostic report when any scalar's split R-hat
    /// exceeds 1.1.
    pub fn check_convergence(&self) -> Result<()> {
        let max = self.convergence.max_rhat();
        if max.is_nan() || max > 1.1 {
            Err(FlusionError::NonConvergence(format!(
                "max split R-hat {max:.4} > 1.1\n{}",
                self.convergence.to_text()
            )))
        } else {
            Ok(())
        }
    }

    /// Delimited dump of all posterior draws for external diagnostics.
    pub fn write_draws(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let j = self.cfg.order;
        let mut header = Vec::new();
        for k in 1..=j {
            header.push(format!("alpha{k}"));
        }
        for k in 1..=j {
            header.push(format!("beta{k}"));
        }
        for k in 1..=j {
            header.push(format!("gamma{k}"));
        }
        header.push("xi".into());
        for l in &self.locations {
            header.push(format!("sigma_eps_{l}"));
        }
        for l in &self.locations {
            header.push(format!("sigma_nu_{l}"));
        }
        writeln!(out, "{}", header.join("\t"))?;
        for d in &self.draws {
            let mut row = Vec::new();
            row.extend(d.alpha.iter().map(|v| v.to_string()));
            row.extend(d.beta.iter().map(|v| v.to_string()));
            row.extend(d.gamma.iter().map(|v| v.to_string()));
            row.push(d.xi.to_string());
            row.extend(d.sigma_eps.iter().map(|v| v.to_string()));
            row.extend(d.sigma_nu.iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}

/// Forecast NHSN tasks by iterated one-step simulation: per posterior draw,
/// both the signal and the covariate are stepped forward with fresh normal
/// innovations; the pooled simulated values give the empirical quantiles,
/// which are then inverted to the count scale.
pub fn forecast_arx(
    post: &ArxPosterior,
    tasks: &[ForecastTask],
    seed: u64,
) -> Result<Vec<QuantileForecast>> {
    let levels = quantile_levels();
    let j = post.cfg.order;

    // group tasks by (location, reference date)
    let mut groups: BTreeMap<(String, Epiweek), Vec<&ForecastTask>> = BTreeMap::new();
    for t in tasks {
        if t.source != SignalKind::Nhsn {
            return Err(FlusionError::Domain(format!(
                "ARX forecasts NHSN only, got {}",
                t.source
            )));
        }
        groups
            .entry((t.location.clone(), t.reference_date))
            .or_default()
            .push(t);
    }

    let group_list: Vec<((String, Epiweek), Vec<&ForecastTask>)> = groups.into_iter().collect();
    let results: Vec<Result<Vec<QuantileForecast>>> = group_list
        .par_iter()
        .enumerate()
        .map(|(g, ((loc, reference_date), group))| {
            let loc_index = post
                .locations
                .iter()
                .position(|l| l == loc)
                .ok_or_else(|| FlusionError::UnknownLocation(loc.clone()))?;
            let series = &post.series[loc];
            let params = &post.params[loc];
            let anchor = reference_date.add_weeks(-1);
            let z_hist: Option<Vec<f64>> = (0..j as i64)
                .map(|back| series.get(&anchor.add_weeks(-back)).copied())
                .collect();
            let Some(z_hist) = z_hist else {
                return Err(FlusionError::InsufficientData(format!(
                    "location {loc} lacks {j} consecutive observations through {anchor}"
                )));
            };
            // histories most-recent-first
            let x_hist: Vec<f64> = (0..j as i64)
                .map(|back| {
                    if post.covariate_enabled {
                        spike_covariate(anchor.add_weeks(-back)) as f64
                    } else {
                        0.0
                    }
                })
                .collect();

            let max_h = group.iter().map(|t| t.horizon).max().unwrap() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(seed, g as u64));
            let mut pools: Vec<Vec<f64>> = vec![Vec::with_capacity(post.draws.len()); max_h + 1];
            for draw in &post.draws {
                let mut z = z_hist.clone();
                let mut x = x_hist.clone();
                for step in 0..=max_h {
                    let week = reference_date.add_weeks(step as i64);
                    let z_mean: f64 = (0..j)
                        .map(|k| draw.alpha[k] * z[k] + draw.beta[k] * x[k])
                        .sum();
                    let z_next = z_mean
                        + draw.sigma_eps[loc_index] * rng.sample::<f64, _>(StandardNormal);
                    let x_next = if !post.covariate_enabled {
                        0.0
                    } else if post.cfg.known_future_covariate {
                        spike_covariate(week) as f64
                    } else {
                        let x_mean: f64 = (0..j).map(|k| draw.gamma[k] * x[k]).sum();
                        x_mean + draw.sigma_nu[loc_index] * rng.sample::<f64, _>(StandardNormal)
                    };
                    z.rotate_right(1);
                    z[0] = z_next;
                    x.rotate_right(1);
                    x[0] = x_next;
                    pools[step].push(z_next);
                }
            }
            for pool in &mut pools {
                pool.sort_by(|a, b| a.total_cmp(b));
            }
            let mut out = Vec::with_capacity(group.len());
            for task in group {
                let pool = &pools[task.horizon as usize];
                let values: Vec<f64> = levels
                    .levels
                    .iter()
                    .map(|&p| {
                        inverse_standardize(stats::quantile_midpoint_sorted(pool, p), params)
                    })
                    .collect();
                let mut fc = QuantileForecast {
                    task: (*task).clone(),
                    values,
                };
                fc.sort_repair();
                out.push(fc);
            }
            Ok(out)
        })
        .collect();

    let mut forecasts = Vec::with_capacity(tasks.len());
    for r in results {
        forecasts.extend(r?);
    }
    Ok(forecasts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{christmas_week, SeriesKey};
    use crate::transform::{PowerTransform, TransformedSeries};

    fn identity_params(loc: &str) -> TransformParams {
        TransformParams {
            key: SeriesKey::new(SignalKind::Nhsn, loc),
            population_100k: 1.0,
            scale_p95: 1.0,
            center_mean: 0.0,
            power: PowerTransform::Identity,
        }
    }

    fn transformed(loc: &str, values: BTreeMap<Epiweek, f64>) -> (SeriesKey, TransformedSeries) {
        (
            SeriesKey::new(SignalKind::Nhsn, loc),
            TransformedSeries {
                params: identity_params(loc),
                values,
            },
        )
    }

    fn ar2_series(t: usize, seed: u64, start: Epiweek) -> BTreeMap<Epiweek, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut z1, mut z2) = (0.0, 0.0);
        let mut s = BTreeMap::new();
        let mut ew = start;
        for _ in 0..t {
            let z = 0.5 * z1 + 0.3 * z2 + 0.1 * rng.sample::<f64, _>(StandardNormal);
            s.insert(ew, z);
            ew = ew.succ();
            z2 = z1;
            z1 = z;
        }
        s
    }

    fn small_cfg(j: usize) -> ArxConfig {
        ArxConfig {
            order: j,
            num_chains: 2,
            warmup_draws: 300,
            posterior_draws: 300,
            seed: 42,
            ..ArxConfig::default()
        }
    }

    #[test]
    fn spike_values_by_offset() {
        let xmas = christmas_week(Epiweek::new(2023, 40).unwrap());
        assert_eq!(spike_covariate(xmas), 3);
        assert_eq!(spike_covariate(xmas.add_weeks(1)), 2);
        assert_eq!(spike_covariate(xmas.add_weeks(-1)), 2);
        assert_eq!(spike_covariate(xmas.add_weeks(-2)), 1);
        assert_eq!(spike_covariate(xmas.add_weeks(2)), 1);
        assert_eq!(spike_covariate(xmas.add_weeks(5)), 0);
        assert_eq!(spike_covariate(xmas.add_weeks(-20)), 0);
    }

    #[test]
    fn ar2_coefficients_recovered() {
        let start = Epiweek::new(2015, 1).unwrap();
        let mut data = TransformedData::default();
        let (k, s) = transformed("US", ar2_series(300, 7, start));
        data.series.insert(k, s);
        let post = fit_arx_with_covariate(&data, &small_cfg(2), |_| 0.0).unwrap();
        assert!(!post.covariate_enabled);
        let n = post.draws.len() as f64;
        let a1: f64 = post.draws.iter().map(|d| d.alpha[0]).sum::<f64>() / n;
        let a2: f64 = post.draws.iter().map(|d| d.alpha[1]).sum::<f64>() / n;
        assert!((a1 - 0.5).abs() < 0.15, "alpha1 {a1}");
        assert!((a2 - 0.3).abs() < 0.15, "alpha2 {a2}");
        let sig: f64 = post.draws.iter().map(|d| d.sigma_eps[0]).sum::<f64>() / n;
        assert!((sig - 0.1).abs() < 0.05, "sigma {sig}");
    }

    #[test]
    fn duplicated_locations_have_matching_scale_posteriors() {
        let start = Epiweek::new(2015, 1).unwrap();
        let series = ar2_series(150, 3, start);
        let mut data = TransformedData::default();
        for loc in ["AA", "BB"] {
            let (k, s) = transformed(loc, series.clone());
            data.series.insert(k, s);
        }
        let post = fit_arx_with_covariate(&data, &small_cfg(2), |_| 0.0).unwrap();
        let col = |i: usize| -> Vec<f64> { post.draws.iter().map(|d| d.sigma_eps[i]).collect() };
        let (a, b) = (col(0), col(1));
        let (q05a, q95a) = (stats::quantile(&a, 0.05), stats::quantile(&a, 0.95));
        let (q05b, q95b) = (stats::quantile(&b, 0.05), stats::quantile(&b, 0.95));
        assert!(q05a < q95b && q05b < q95a, "90% intervals do not overlap");
    }

    #[test]
    fn prior_predictive_alpha_centered_at_zero() {
        // no data: the sampler explores the prior
        let model = ArxModel {
            cov_enabled: false,
            hc_scale: 1.0,
            z_blocks: vec![RegBlock {
                width: 2,
                ..Default::default()
            }],
            x_blocks: vec![RegBlock {
                width: 2,
                ..Default::default()
            }],
        };
        let layout = Layout {
            j: 2,
            locs: 1,
            cov: false,
        };
        let cfg = ArxConfig {
            order: 2,
            num_chains: 4,
            warmup_draws: 500,
            posterior_draws: 1500,
            seed: 11,
            ..ArxConfig::default()
        };
        let mut all = Vec::new();
        for c in 0..cfg.num_chains {
            all.extend(run_chain(
                &model,
                &layout,
                &cfg,
                stats::derive_seed(cfg.seed, c as u64),
            ));
        }
        assert!(all.len() >= 4000);
        // the marginal prior on alpha is a heavy-tailed scale mixture, so
        // check the (robust) median rather than the mean
        for k in 0..2 {
            let col: Vec<f64> = all.iter().map(|d| d[k]).collect();
            let med = stats::median(&col);
            assert!(med.abs() < 0.1, "prior alpha[{k}] median {med}");
        }
    }

    #[test]
    fn same_seed_identical_draws() {
        let start = Epiweek::new(2015, 1).unwrap();
        let mut data = TransformedData::default();
        let (k, s) = transformed("US", ar2_series(100, 5, start));
        data.series.insert(k, s);
        let mut cfg = small_cfg(2);
        cfg.warmup_draws = 100;
        cfg.posterior_draws = 100;
        let fit = || fit_arx(&data, &cfg).unwrap();
        let (a, b) = (fit(), fit());
        for (da, db) in a.draws.iter().zip(&b.draws) {
            assert_eq!(da.alpha, db.alpha);
            assert_eq!(da.sigma_eps, db.sigma_eps);
        }
    }

    fn manual_posterior(series: BTreeMap<Epiweek, f64>, draw: ArxDraw) -> ArxPosterior {
        let mut s = BTreeMap::new();
        s.insert("US".to_string(), series);
        let mut p = BTreeMap::new();
        p.insert("US".to_string(), identity_params("US"));
        ArxPosterior {
            cfg: ArxConfig {
                order: draw.alpha.len(),
                ..ArxConfig::default()
            },
            locations: vec!["US".to_string()],
            covariate_enabled: false,
            draws: vec![draw; 50],
            convergence: ConvergenceReport { scalars: vec![] },
            series: s,
            params: p,
        }
    }

    #[test]
    fn zero_noise_random_walk_repeats_last_observation() {
        let start = Epiweek::new(2023, 1).unwrap();
        let mut series = BTreeMap::new();
        let mut ew = start;
        for i in 0..12 {
            series.insert(ew, 3.0 + 0.1 * i as f64);
            ew = ew.succ();
        }
        let last = 3.0 + 0.1 * 11.0;
        let post = manual_posterior(
            series,
            ArxDraw {
                alpha: vec![1.0, 0.0],
                beta: vec![0.0, 0.0],
                gamma: vec![0.0, 0.0],
                xi: 1.0,
                sigma_eps: vec![0.0],
                sigma_nu: vec![0.0],
            },
        );
        let reference = start.add_weeks(12);
        let tasks: Vec<ForecastTask> = (0..=3)
            .map(|h| ForecastTask::new(SignalKind::Nhsn, "US", reference, h).unwrap())
            .collect();
        let fcs = forecast_arx(&post, &tasks, 99).unwrap();
        for fc in fcs {
            for &v in &fc.values {
                assert!((v - last).abs() < 1e-12, "horizon {}", fc.task.horizon);
            }
        }
    }

    #[test]
    fn forecast_width_grows_and_quantiles_monotone() {
        let start = Epiweek::new(2015, 1).unwrap();
        let series = ar2_series(120, 21, start);
        let post = manual_posterior(
            series,
            ArxDraw {
                alpha: vec![0.5, 0.3],
                beta: vec![0.0, 0.0],
                gamma: vec![0.0, 0.0],
                xi: 1.0,
                sigma_eps: vec![0.1],
                sigma_nu: vec![0.0],
            },
        );
        // widen the pool: 1000 draws
        let mut post = post;
        post.draws = vec![post.draws[0].clone(); 1000];
        let reference = start.add_weeks(120);
        let tasks: Vec<ForecastTask> = (0..=3)
            .map(|h| ForecastTask::new(SignalKind::Nhsn, "US", reference, h).unwrap())
            .collect();
        let fcs = forecast_arx(&post, &tasks, 1).unwrap();
        let width = |fc: &QuantileForecast| fc.values[22] - fc.values[0];
        for fc in &fcs {
            assert!(fc.is_nondecreasing());
        }
        for w in fcs.windows(2) {
            assert!(width(&w[1]) >= width(&w[0]) - 1e-9);
        }
    }

    #[test]
    fn all_zero_series_concentrates_near_zero() {
        let start = Epiweek::new(2015, 1).unwrap();
        let mut series = BTreeMap::new();
        let mut ew = start;
        for _ in 0..60 {
            series.insert(ew, 0.0);
            ew = ew.succ();
        }
        let mut data = TransformedData::default();
        let (k, s) = transformed("US", series);
        data.series.insert(k, s);
        let mut cfg = small_cfg(2);
        cfg.warmup_draws = 200;
        cfg.posterior_draws = 200;
        let post = fit_arx_with_covariate(&data, &cfg, |_| 0.0).unwrap();
        let reference = start.add_weeks(60);
        let tasks = vec![ForecastTask::new(SignalKind::Nhsn, "US", reference, 0).unwrap()];
        let fcs = forecast_arx(&post, &tasks, 5).unwrap();
        let med = fcs[0].values[11];
        assert!(med.abs() < 1.0, "median {med}");
    }

    #[test]
    fn convergence_report_lists_all_scalars() {
        let start = Epiweek::new(2015, 1).unwrap();
        let mut data = TransformedData::default();
        let (k, s) = transformed("US", ar2_series(150, 9, start));
        data.series.insert(k, s);
        let post = fit_arx_with_covariate(&data, &small_cfg(2), |_| 0.0).unwrap();
        // alpha(2) + xi + sigma_eps(1)
        assert_eq!(post.convergence.scalars.len(), 4);
        assert!(post.convergence.to_text().contains("alpha[1]"));
        post.check_convergence().unwrap();
    }

    #[test]
    fn covariate_enabled_when_spikes_present() {
        let start = Epiweek::new(2015, 40).unwrap();
        let mut data = TransformedData::default();
        let (k, s) = transformed("US", ar2_series(60, 13, start));
        data.series.insert(k, s);
        let mut cfg = small_cfg(2);
        cfg.warmup_draws = 100;
        cfg.posterior_draws = 100;
        let post = fit_arx(&data, &cfg).unwrap();
        assert!(post.covariate_enabled);
        assert!(post.draws.iter().all(|d| d.sigma_nu[0] > 0.0));
    }

    #[test]
    fn rhat_detects_disagreeing_chains() {
        let a: Vec<f64> = (0..200).map(|i| (i % 7) as f64 * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        assert!(split_rhat(&[a.clone(), b]) > 1.5);
        assert!(split_rhat(&[a.clone(), a]) < 1.05);
    }
}
