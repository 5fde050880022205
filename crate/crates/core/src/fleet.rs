//! Fleet-level analysis: EOL regressed on knee onset, and a Gaussian mixture
//! over `(knee onset, EOL)` points that splits the fleet into long-range and
//! short-range batteries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FleetError {
    #[error("battery {battery_id}: need 0 < knee onset ({knee_onset}) < EOL ({eol})")]
    InvalidPoint {
        battery_id: String,
        knee_onset: u32,
        eol: u32,
    },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all knee onsets are equal; the line is undetermined")]
    DegenerateX,
    #[error("all EOL values are equal; R² is undefined")]
    ZeroVariance,
    #[error("fit does not belong to these points ({0} residuals expected)")]
    FitMismatch(usize),
    #[error("mixture likelihood became non-finite")]
    NonFiniteLikelihood,
    #[error("invalid mixture config: {0}")]
    Config(String),
    #[error("category map needs exactly 2 components, model has {0}")]
    NotTwoComponents(usize),
    #[error("category map covers {map} components, model has {model}")]
    ModelMismatch { map: usize, model: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetPoint {
    pub battery_id: String,
    pub knee_onset: u32,
    pub eol: u32,
}

impl FleetPoint {
    pub fn new(battery_id: impl Into<String>, knee_onset: u32, eol: u32) -> Result<Self, FleetError> {
        let p = Self {
            battery_id: battery_id.into(),
            knee_onset,
            eol,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        if self.knee_onset == 0 || self.knee_onset >= self.eol {
            return Err(FleetError::InvalidPoint {
                battery_id: self.battery_id.clone(),
                knee_onset: self.knee_onset,
                eol: self.eol,
            });
        }
        Ok(())
    }

    pub fn as_xy(&self) -> [f64; 2] {
        [self.knee_onset as f64, self.eol as f64]
    }
}

/// `ε̂ = slope·ϑ + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

impl LineFit {
    pub fn predict(&self, knee_onset: f64) -> f64 {
        self.slope * knee_onset + self.intercept
    }
}

/// Ordinary least squares of EOL on knee onset.
pub fn fit_line(points: &[FleetPoint]) -> Result<LineFit, FleetError> {
    if points.len() < 2 {
        return Err(FleetError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    for p in points {
        p.validate()?;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.knee_onset as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.eol as f64).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in points {
        let dx = p.knee_onset as f64 - mx;
        sxx += dx * dx;
        sxy += dx * (p.eol as f64 - my);
    }
    if sxx == 0.0 {
        return Err(FleetError::DegenerateX);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut fit = LineFit {
        slope,
        intercept,
        residuals: points
            .iter()
            .map(|p| p.eol as f64 - (slope * p.knee_onset as f64 + intercept))
            .collect(),
        r_squared: 0.0,
    };
    fit.r_squared = r_squared(points, &fit)?;
    Ok(fit)
}

/// `1 − SS_res / SS_tot`, with residuals taken from the fit's predictions.
pub fn r_squared(points: &[FleetPoint], fit: &LineFit) -> Result<f64, FleetError> {
    if points.is_empty() {
        return Err(FleetError::TooFewPoints { needed: 1, got: 0 });
    }
    if fit.residuals.len() != points.len() {
        return Err(FleetError::FitMismatch(points.len()));
    }
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.eol as f64).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|p| (p.eol as f64 - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(FleetError::ZeroVariance);
    }
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.eol as f64 - fit.predict(p.knee_onset as f64)).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl GaussianComponent {
    fn det(&self) -> f64 {
        let c = &self.covariance;
        c[0][0] * c[1][1] - c[0][1] * c[1][0]
    }

    /// `ln N(x; μ, Σ)`.
    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let c = &self.covariance;
        let det = self.det();
        let dx = [x[0] - self.mean[0], x[1] - self.mean[1]];
        let maha = (c[1][1] * dx[0] * dx[0] - 2.0 * c[0][1] * dx[0] * dx[1] + c[0][0] * dx[1] * dx[1]) / det;
        -0.5 * maha - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }

    /// Log density of one coordinate's marginal (0 = knee onset, 1 = EOL).
    pub fn log_marginal(&self, axis: usize, x: f64) -> f64 {
        let var = self.covariance[axis][axis];
        let dx = x - self.mean[axis];
        -0.5 * dx * dx / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub components: usize,
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Added to each covariance diagonal as a multiple of that axis' data
    /// variance.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 2,
            restarts: 10,
            tolerance: 1e-8,
            max_iterations: 500,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GaussianComponent>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after each EM iteration of the winning restart.
    pub log_likelihood_trace: Vec<f64>,
}

impl GmmModel {
    /// Posterior component probabilities for a full `(knee, EOL)` point.
    pub fn posterior(&self, x: [f64; 2]) -> Vec<f64> {
        normalize_logs(
            self.components
                .iter()
                .map(|c| c.weight.ln() + c.log_density(x))
                .collect(),
        )
    }

    /// Posterior component probabilities from a single coordinate.
    pub fn marginal_posterior(&self, axis: usize, x: f64) -> Vec<f64> {
        normalize_logs(
            self.components
                .iter()
                .map(|c| c.weight.ln() + c.log_marginal(axis, x))
                .collect(),
        )
    }

    pub fn log_likelihood_of(&self, points: &[[f64; 2]]) -> f64 {
        points
            .iter()
            .map(|&x| log_sum_exp(self.components.iter().map(|c| c.weight.ln() + c.log_density(x))))
            .sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normalize_logs(logs: Vec<f64>) -> Vec<f64> {
    let total = log_sum_exp(logs.iter().copied());
    logs.into_iter().map(|l| (l - total).exp()).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fits a `b`-component mixture with the default EM settings.
pub fn fit_gmm(points: &[[f64; 2]], b: usize, seed: u64) -> Result<GmmModel, FleetError> {
    fit_gmm_with(
        points,
        &GmmConfig {
            components: b,
            seed,
            ..GmmConfig::default()
        },
    )
}

pub fn fit_gmm_with(points: &[[f64; 2]], cfg: &GmmConfig) -> Result<GmmModel, FleetError> {
    let b = cfg.components;
    if b == 0 || cfg.restarts == 0 || cfg.max_iterations == 0 {
        return Err(FleetError::Config(
            "components, restarts and max_iterations must be >= 1".into(),
        ));
    }
    if !(cfg.ridge >= 0.0 && cfg.tolerance >= 0.0) {
        return Err(FleetError::Config("ridge and tolerance must be >= 0".into()));
    }
    if points.len() < 3 * b {
        return Err(FleetError::TooFewPoints {
            needed: 3 * b,
            got: points.len(),
        });
    }
    let (_, cov) = moments(points, &vec![1.0; points.len()]);
    let ridge = [cfg.ridge * cov[0][0], cfg.ridge * cov[1][1]];

    let runs: Vec<Result<GmmModel, FleetError>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
            let init = kmeans_pp(points, b, &mut rng, cov, ridge);
            run_em(points, init, cfg, ridge)
        })
        .collect();

    let mut best: Option<GmmModel> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.log_likelihood > b.log_likelihood) {
                    best = Some(m);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or(FleetError::NonFiniteLikelihood))
}

/// Weighted mean and population covariance.
fn moments(points: &[[f64; 2]], w: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
    let total: f64 = w.iter().sum();
    let mut mean = [0.0; 2];
    for (p, &wi) in points.iter().zip(w) {
        mean[0] += wi * p[0];
        mean[1] += wi * p[1];
    }
    mean[0] /= total;
    mean[1] /= total;
    let mut cov = [[0.0; 2]; 2];
    for (p, &wi) in points.iter().zip(w) {
        let dx = [p[0] - mean[0], p[1] - mean[1]];
        for r in 0..2 {
            for c in 0..2 {
                cov[r][c] += wi * dx[r] * dx[c];
            }
        }
    }
    for row in &mut cov {
        for v in row {
            *v /= total;
        }
    }
    (mean, cov)
}

fn kmeans_pp(
    points: &[[f64; 2]],
    b: usize,
    rng: &mut ChaCha8Rng,
    cov: [[f64; 2]; 2],
    ridge: [f64; 2],
) -> Vec<GaussianComponent> {
    // distances are measured on standardized axes
    let scale = [cov[0][0].sqrt().max(1e-12), cov[1][1].sqrt().max(1e-12)];
    let d2 = |a: &[f64; 2], c: &[f64; 2]| {
        ((a[0] - c[0]) / scale[0]).powi(2) + ((a[1] - c[1]) / scale[1]).powi(2)
    };
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    while centers.len() < b {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| d2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[next]);
    }
    let mut covariance = cov;
    covariance[0][0] += ridge[0];
    covariance[1][1] += ridge[1];
    centers
        .into_iter()
        .map(|m| GaussianComponent {
            weight: 1.0 / b as f64,
            mean: m,
            covariance,
        })
        .collect()
}

fn run_em(
    points: &[[f64; 2]],
    mut comps: Vec<GaussianComponent>,
    cfg: &GmmConfig,
    ridge: [f64; 2],
) -> Result<GmmModel, FleetError> {
    let n = points.len();
    let b = comps.len();
    let mut resp = vec![vec![0.0; n]; b];
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        // E-step
        for (i, &x) in points.iter().enumerate() {
            let logs: Vec<f64> = comps
                .iter()
                .map(|c| c.weight.ln() + c.log_density(x))
                .collect();
            let post = normalize_logs(logs);
            for k in 0..b {
                resp[k][i] = post[k];
            }
        }
        // M-step
        for k in 0..b {
            let nk: f64 = resp[k].iter().sum();
            if !(nk > 0.0) || !nk.is_finite() {
                return Err(FleetError::NonFiniteLikelihood);
            }
            let (mean, mut cov) = moments(points, &resp[k]);
            cov[0][0] += ridge[0];
            cov[1][1] += ridge[1];
            comps[k] = GaussianComponent {
                weight: nk / n as f64,
                mean,
                covariance: cov,
            };
            if !(comps[k].det() > 0.0) {
                return Err(FleetError::NonFiniteLikelihood);
            }
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }

        let model = GmmModel {
            components: comps.clone(),
            log_likelihood: 0.0,
            converged: false,
            iterations: 0,
            log_likelihood_trace: Vec::new(),
        };
        let ll = model.log_likelihood_of(points);
        if !ll.is_finite() {
            return Err(FleetError::NonFiniteLikelihood);
        }
        trace.push(ll);
        let improvement = ll - prev;
        prev = ll;
        if improvement.abs() < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(GmmModel {
        components: comps,
        log_likelihood: prev,
        converged,
        iterations: trace.len(),
        log_likelihood_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LongRange,
    ShortRange,
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Category::LongRange => "long_range",
            Category::ShortRange => "short_range",
        })
    }
}

impl std::str::FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "long_range" | "long" => Ok(Category::LongRange),
            "short_range" | "short" => Ok(Category::ShortRange),
            other => Err(format!("unknown category '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyMode {
    /// Posterior from each component's knee-onset marginal.
    #[default]
    KneeMarginal,
    /// EOL predicted from the line fit, compared with the EOL boundary.
    EolBoundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    /// Category of each mixture component, in component order.
    pub categories: Vec<Category>,
    /// EOL value where the two components' EOL marginals are equally likely.
    pub eol_boundary: f64,
}

impl CategoryMap {
    /// The component with the larger EOL mean is long-range.
    pub fn from_model(model: &GmmModel) -> Result<Self, FleetError> {
        let comps = &model.components;
        if comps.len() != 2 {
            return Err(FleetError::NotTwoComponents(comps.len()));
        }
        let long = if comps[1].mean[1] > comps[0].mean[1] { 1 } else { 0 };
        let short = 1 - long;
        let mut categories = vec![Category::ShortRange; 2];
        categories[long] = Category::LongRange;

        let lo = comps[short].mean[1];
        let hi = comps[long].mean[1];
        let gap = |y: f64| {
            let p = model.marginal_posterior(1, y);
            p[long] - p[short]
        };
        let eol_boundary = if lo < hi && gap(lo) < 0.0 && gap(hi) > 0.0 {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if gap(mid) > 0.0 {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            0.5 * (a + b)
        } else {
            0.5 * (lo + hi)
        };
        Ok(Self {
            categories,
            eol_boundary,
        })
    }
}

/// Category of a battery from its knee onset alone.
pub fn classify_battery(model: &GmmModel, map: &CategoryMap, knee_onset: f64) -> Result<Category, FleetError> {
    if map.categories.len() != model.components.len() {
        return Err(FleetError::ModelMismatch {
            map: map.categories.len(),
            model: model.components.len(),
        });
    }
    let post = model.marginal_posterior(0, knee_onset);
    Ok(map.categories[argmax(&post)])
}

/// Category from the EOL the line fit predicts for this knee onset.
pub fn classify_by_boundary(fit: &LineFit, map: &CategoryMap, knee_onset: f64) -> Category {
    if fit.predict(knee_onset) > map.eol_boundary {
        Category::LongRange
    } else {
        Category::ShortRange
    }
}

/// Everything the offline fleet workflow produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetModel {
    pub points: Vec<FleetPoint>,
    pub line: LineFit,
    pub gmm: GmmModel,
    pub categories: CategoryMap,
    #[serde(default)]
    pub classify_mode: ClassifyMode,
}

impl FleetModel {
    pub fn fit(points: Vec<FleetPoint>, gmm_cfg: &GmmConfig) -> Result<Self, FleetError> {
        if points.len() < 4 {
            return Err(FleetError::TooFewPoints {
                needed: 4,
                got: points.len(),
            });
        }
        let line = fit_line(&points)?;
        let xy: Vec<[f64; 2]> = points.iter().map(FleetPoint::as_xy).collect();
        let gmm = fit_gmm_with(&xy, gmm_cfg)?;
        let categories = CategoryMap::from_model(&gmm)?;
        Ok(Self {
            points,
            line,
            gmm,
            categories,
            classify_mode: ClassifyMode::default(),
        })
    }

    pub fn classify(&self, knee_onset: f64) -> Result<Category, FleetError> {
        match self.classify_mode {
            ClassifyMode::KneeMarginal => classify_battery(&self.gmm, &self.categories, knee_onset),
            ClassifyMode::EolBoundary => Ok(classify_by_boundary(&self.line, &self.categories, knee_onset)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn pts(pairs: &[(u32, u32)]) -> Vec<FleetPoint> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(k, e))| FleetPoint::new(format!("B{i}"), k, e).unwrap())
            .collect()
    }

    fn two_clusters(seed: u64, n: usize, sigma: f64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut xy = Vec::new();
        let mut truth = Vec::new();
        for (label, centre) in [[300.0, 500.0], [700.0, 900.0]].iter().enumerate() {
            for _ in 0..n {
                xy.push([centre[0] + noise.sample(&mut rng), centre[1] + noise.sample(&mut rng)]);
                truth.push(label);
            }
        }
        (xy, truth)
    }

    #[test]
    fn exact_line() {
        let p = pts(&[(10, 25), (20, 45), (30, 65), (40, 85)]);
        let fit = fit_line(&p).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 5.0).abs() < 1e-9);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-9));
        assert_eq!(fit.r_squared, 1.0);

        let two = fit_line(&pts(&[(10, 30), (20, 31)])).unwrap();
        assert_eq!(two.r_squared, 1.0);
    }

    #[test]
    fn line_errors() {
        assert_eq!(fit_line(&pts(&[(10, 30), (10, 40)])), Err(FleetError::DegenerateX));
        assert!(matches!(fit_line(&pts(&[(10, 30)])), Err(FleetError::TooFewPoints { .. })));
        assert_eq!(
            fit_line(&pts(&[(10, 30), (20, 30), (25, 30)])),
            Err(FleetError::ZeroVariance)
        );
        assert!(FleetPoint::new("x", 50, 50).is_err());
        assert!(FleetPoint::new("x", 0, 50).is_err());
    }

    #[test]
    fn constant_mean_predictor_scores_zero() {
        let p = pts(&[(10, 30), (20, 52), (30, 61), (45, 70)]);
        let mean = p.iter().map(|q| q.eol as f64).sum::<f64>() / 4.0;
        let flat = LineFit {
            slope: 0.0,
            intercept: mean,
            residuals: vec![0.0; 4],
            r_squared: 0.0,
        };
        assert_eq!(r_squared(&p, &flat).unwrap(), 0.0);
    }

    #[test]
    fn random_cloud_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<FleetPoint> = (0..40)
            .map(|i| {
                let k = rng.gen_range(100..600);
                FleetPoint::new(format!("B{i}"), k, k + rng.gen_range(50..500)).unwrap()
            })
            .collect();
        let fit = fit_line(&p).unwrap();
        let ys: Vec<f64> = p.iter().map(|q| q.eol as f64).collect();
        let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
        let num: f64 = p
            .iter()
            .map(|q| (q.eol as f64 - (fit.slope * q.knee_onset as f64 + fit.intercept)).powi(2))
            .sum();
        let den: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
        assert!((fit.r_squared - (1.0 - num / den)).abs() < 1e-12);
    }

    #[test]
    fn single_component_is_sample_moments() {
        let (xy, _) = two_clusters(3, 20, 20.0);
        let cfg = GmmConfig {
            components: 1,
            ridge: 0.0,
            ..GmmConfig::default()
        };
        let m = fit_gmm_with(&xy, &cfg).unwrap();
        let (mean, cov) = moments(&xy, &vec![1.0; xy.len()]);
        let c = &m.components[0];
        assert_eq!(c.weight, 1.0);
        for r in 0..2 {
            assert!((c.mean[r] - mean[r]).abs() < 1e-9);
            for k in 0..2 {
                assert!((c.covariance[r][k] - cov[r][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recovers_two_clusters() {
        let (xy, truth) = two_clusters(5, 50, 20.0);
        let m = fit_gmm(&xy, 2, 1).unwrap();
        let map = CategoryMap::from_model(&m).unwrap();
        let long = map.categories.iter().position(|&c| c == Category::LongRange).unwrap();
        let short = 1 - long;
        let means = [m.components[short].mean, m.components[long].mean];
        assert!((means[0][0] - 300.0).abs() < 15.0 && (means[0][1] - 500.0).abs() < 15.0);
        assert!((means[1][0] - 700.0).abs() < 15.0 && (means[1][1] - 900.0).abs() < 15.0);
        let correct = xy
            .iter()
            .zip(&truth)
            .filter(|(x, &t)| {
                let k = argmax(&m.posterior(**x));
                (k == long) == (t == 1)
            })
            .count();
        assert!(correct as f64 / xy.len() as f64 >= 0.99);
        assert!(map.eol_boundary > means[0][1] && map.eol_boundary < means[1][1]);
        let sum: f64 = m.components.iter().map(|c| c.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for seed in 0..5 {
            let (xy, _) = two_clusters(seed, 30, 60.0);
            let m = fit_gmm(&xy, 2, seed).unwrap();
            for w in m.log_likelihood_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn classification_by_knee_alone() {
        let (xy, _) = two_clusters(8, 50, 20.0);
        let m = fit_gmm(&xy, 2, 0).unwrap();
        let map = CategoryMap::from_model(&m).unwrap();
        for (k, comp) in m.components.iter().enumerate() {
            assert_eq!(classify_battery(&m, &map, comp.mean[0]).unwrap(), map.categories[k]);
        }
        // swapping component order changes nothing
        let mut swapped = m.clone();
        swapped.components.reverse();
        let swapped_map = CategoryMap::from_model(&swapped).unwrap();
        for knee in [250.0, 400.0, 500.0, 650.0, 800.0] {
            assert_eq!(
                classify_battery(&m, &map, knee).unwrap(),
                classify_battery(&swapped, &swapped_map, knee).unwrap()
            );
        }
        // held-out points agree with the full posterior
        let (held, _) = two_clusters(99, 100, 20.0);
        let agree = held
            .iter()
            .filter(|x| {
                map.categories[argmax(&m.posterior(**x))] == classify_battery(&m, &map, x[0]).unwrap()
            })
            .count();
        assert!(agree as f64 / held.len() as f64 >= 0.95);
    }

    #[test]
    fn fleet_model_and_boundary_mode() {
        let (xy, _) = two_clusters(2, 10, 20.0);
        let points: Vec<FleetPoint> = xy
            .iter()
            .enumerate()
            .map(|(i, p)| FleetPoint::new(format!("B{i:02}"), p[0].round() as u32, p[1].round() as u32).unwrap())
            .collect();
        let mut fleet = FleetModel::fit(points, &GmmConfig::default()).unwrap();
        assert!(fleet.line.r_squared > 0.9);
        assert_eq!(fleet.classify(300.0).unwrap(), Category::ShortRange);
        fleet.classify_mode = ClassifyMode::EolBoundary;
        assert_eq!(fleet.classify(300.0).unwrap(), Category::ShortRange);
        assert_eq!(fleet.classify(700.0).unwrap(), Category::LongRange);
        assert!(matches!(
            FleetModel::fit(pts(&[(1, 2), (2, 3), (3, 5)]), &GmmConfig::default()),
            Err(FleetError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn gmm_is_deterministic() {
        let (xy, _) = two_clusters(4, 30, 30.0);
        assert_eq!(fit_gmm(&xy, 2, 9).unwrap(), fit_gmm(&xy, 2, 9).unwrap());
    }

    proptest! {
        #[test]
        fn ols_beats_constant_mean(pairs in prop::collection::vec((1u32..500, 1u32..500), 3..30)) {
            let p: Vec<FleetPoint> = pairs
                .iter()
                .enumerate()
                .map(|(i, &(k, gap))| FleetPoint::new(format!("B{i}"), k, k + gap).unwrap())
                .collect();
            if let Ok(fit) = fit_line(&p) {
                prop_assert!(fit.r_squared >= -1e-12);
                prop_assert!(fit.r_squared <= 1.0);
            }
        }
    }
}
