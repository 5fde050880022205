//! Per-category SOH regression from one synchronized cycle.
//!
//! Each cycle is fed to a stack of LSTM layers as a length-`d` sequence of
//! warped indices scaled by `1/d`. The last hidden state goes through one
//! tanh dense layer and a linear scalar head. Training minimizes the sum of
//! squared errors with Adam on minibatches. Targets are standardized while
//! training and the scaling is folded back into the head afterwards, so a
//! stored model outputs SOH directly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycle::{SohSeries, SynchronizedCycle};
use crate::fleet::Category;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SohError {
    #[error("invalid regressor config: {0}")]
    Config(String),
    #[error("{cycles} cycles but {targets} targets")]
    MisalignedData { cycles: usize, targets: usize },
    #[error("cycle {cycle} lies outside the training range {first}..={last}")]
    OutsideRange { cycle: u32, first: u32, last: u32 },
    #[error("training range {first}..={last} is empty or beyond the data")]
    RangeOutOfBounds { first: u32, last: u32 },
    #[error("no SOH value for cycle {0}")]
    MissingSoh(u32),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training loss became non-finite at epoch {0}; lower the learning rate")]
    NonFiniteLoss(usize),
    #[error("model expects cycles of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{estimates} estimates but {targets} targets")]
    LengthMismatch { estimates: usize, targets: usize },
    #[error("nothing to score")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub lstm_layer_sizes: Vec<usize>,
    pub dense_size: usize,
    pub learning_rate: f64,
    /// Upper bound on training epochs.
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a lower training loss.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            lstm_layer_sizes: vec![16, 32],
            dense_size: 8,
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: 16,
            patience: 50,
            seed: 0,
        }
    }
}

impl RegressorConfig {
    /// Layer sizes reported for the original experiments.
    pub fn paper_scale() -> Self {
        Self {
            lstm_layer_sizes: vec![300, 500],
            dense_size: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SohError> {
        if self.lstm_layer_sizes.is_empty() || self.lstm_layer_sizes.contains(&0) {
            return Err(SohError::Config("lstm_layer_sizes must be non-empty and >= 1".into()));
        }
        if self.dense_size == 0 || self.batch_size == 0 {
            return Err(SohError::Config("dense_size and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SohError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Knee onset to EOL only.
    #[default]
    Stage2,
    /// Every cycle up to EOL.
    FullLife,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub battery_id: String,
    pub first_cycle: u32,
    pub last_cycle: u32,
    pub mode: TrainingMode,
    pub category: Option<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Training RMSE of the stored model, in SOH units.
    pub training_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohModel {
    pub config: RegressorConfig,
    pub cycle_length: usize,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
    pub report: TrainingReport,
}

#[derive(Debug, Clone)]
struct LayerShape {
    input: usize,
    hidden: usize,
    w: usize,
    u: usize,
    b: usize,
}

/// Offsets of every weight block inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<LayerShape>,
    dense: usize,
    dense_w: usize,
    dense_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(sizes: &[usize], dense: usize) -> Self {
        let mut off = 0;
        let mut input = 1;
        let mut layers = Vec::new();
        for &h in sizes {
            let w = off;
            let u = w + 4 * h * input;
            let b = u + 4 * h * h;
            off = b + 4 * h;
            layers.push(LayerShape { input, hidden: h, w, u, b });
            input = h;
        }
        let dense_w = off;
        let dense_b = dense_w + dense * input;
        let out_w = dense_b + dense;
        let out_b = out_w + dense;
        Self {
            layers,
            dense,
            dense_w,
            dense_b,
            out_w,
            out_b,
            total: out_b + 1,
        }
    }

    fn top(&self) -> usize {
        self.layers.last().map_or(1, |l| l.hidden)
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        let mut fill = |p: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in p {
                *v = rng.gen_range(-a..a);
            }
        };
        for l in &self.layers {
            let h = l.hidden;
            fill(&mut p[l.w..l.u], l.input, 4 * h);
            fill(&mut p[l.u..l.b], h, 4 * h);
            // forget gate starts open
            for v in &mut p[l.b + h..l.b + 2 * h] {
                *v = 1.0;
            }
        }
        let top = self.top();
        fill(&mut p[self.dense_w..self.dense_b], top, self.dense);
        fill(&mut p[self.out_w..self.out_b], self.dense, 1);
        p
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerCache {
    /// `(T + 1) × H`, row 0 is the zero initial state.
    h: Vec<f64>,
    c: Vec<f64>,
    /// `T × 4H` activated gates in order i, f, g, o.
    gates: Vec<f64>,
    /// `T × H`
    tanh_c: Vec<f64>,
}

struct Trace {
    layers: Vec<LayerCache>,
    dense: Vec<f64>,
    output: f64,
}

fn forward(layout: &Layout, p: &[f64], x: &[f64]) -> Trace {
    let t_len = x.len();
    let mut layers: Vec<LayerCache> = Vec::with_capacity(layout.layers.len());
    for (li, l) in layout.layers.iter().enumerate() {
        let h = l.hidden;
        let mut cache = LayerCache {
            h: vec![0.0; (t_len + 1) * h],
            c: vec![0.0; (t_len + 1) * h],
            gates: vec![0.0; t_len * 4 * h],
            tanh_c: vec![0.0; t_len * h],
        };
        let mut z = vec![0.0; 4 * h];
        for t in 0..t_len {
            let input: &[f64] = if li == 0 {
                &x[t..t + 1]
            } else {
                let below = &layers[li - 1];
                let hb = layout.layers[li - 1].hidden;
                &below.h[(t + 1) * hb..(t + 2) * hb]
            };
            z.copy_from_slice(&p[l.b..l.b + 4 * h]);
            let h_prev = &cache.h[t * h..(t + 1) * h];
            for (r, zr) in z.iter_mut().enumerate() {
                let wr = &p[l.w + r * l.input..l.w + (r + 1) * l.input];
                let ur = &p[l.u + r * h..l.u + (r + 1) * h];
                *zr += wr.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                    + ur.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
            }
            let g_off = t * 4 * h;
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                let c = f * cache.c[t * h + k] + i * g;
                let tc = c.tanh();
                cache.gates[g_off + k] = i;
                cache.gates[g_off + h + k] = f;
                cache.gates[g_off + 2 * h + k] = g;
                cache.gates[g_off + 3 * h + k] = o;
                cache.c[(t + 1) * h + k] = c;
                cache.tanh_c[t * h + k] = tc;
                cache.h[(t + 1) * h + k] = o * tc;
            }
        }
        layers.push(cache);
    }
    let top = layout.top();
    let last = &layers.last().expect("at least one layer").h[t_len * top..(t_len + 1) * top];
    let dense: Vec<f64> = (0..layout.dense)
        .map(|r| {
            let w = &p[layout.dense_w + r * top..layout.dense_w + (r + 1) * top];
            (p[layout.dense_b + r] + w.iter().zip(last).map(|(a, b)| a * b).sum::<f64>()).tanh()
        })
        .collect();
    let output = p[layout.out_b]
        + dense
            .iter()
            .zip(&p[layout.out_w..layout.out_b])
            .map(|(a, w)| a * w)
            .sum::<f64>();
    Trace {
        layers,
        dense,
        output,
    }
}

/// Accumulates `dy · ∂output/∂p` into `grad`.
fn backward(layout: &Layout, p: &[f64], x: &[f64], trace: &Trace, dy: f64, grad: &mut [f64]) {
    let t_len = x.len();
    let top = layout.top();
    let last_h = {
        let c = trace.layers.last().expect("at least one layer");
        &c.h[t_len * top..(t_len + 1) * top]
    };
    grad[layout.out_b] += dy;
    let mut dh_top = vec![0.0; top];
    for r in 0..layout.dense {
        let a = trace.dense[r];
        grad[layout.out_w + r] += dy * a;
        let dz = dy * p[layout.out_w + r] * (1.0 - a * a);
        grad[layout.dense_b + r] += dz;
        let w_off = layout.dense_w + r * top;
        for k in 0..top {
            grad[w_off + k] += dz * last_h[k];
            dh_top[k] += dz * p[w_off + k];
        }
    }

    // gradient reaching each layer's outputs, `T × H`
    let mut dh_out = vec![0.0; t_len * top];
    dh_out[(t_len - 1) * top..].copy_from_slice(&dh_top);

    for li in (0..layout.layers.len()).rev() {
        let l = &layout.layers[li];
        let h = l.hidden;
        let cache = &trace.layers[li];
        let mut dx = vec![0.0; t_len * l.input];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..t_len).rev() {
            let g_off = t * 4 * h;
            for k in 0..h {
                let i = cache.gates[g_off + k];
                let f = cache.gates[g_off + h + k];
                let g = cache.gates[g_off + 2 * h + k];
                let o = cache.gates[g_off + 3 * h + k];
                let tc = cache.tanh_c[t * h + k];
                let dh = dh_out[t * h + k] + dh_next[k];
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                dz[k] = dc * g * i * (1.0 - i);
                dz[h + k] = dc * cache.c[t * h + k] * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - g * g);
                dz[3 * h + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            let input: &[f64] = if li == 0 {
                &x[t..t + 1]
            } else {
                let hb = layout.layers[li - 1].hidden;
                &trace.layers[li - 1].h[(t + 1) * hb..(t + 2) * hb]
            };
            let h_prev = &cache.h[t * h..(t + 1) * h];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let dx_t = &mut dx[t * l.input..(t + 1) * l.input];
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                grad[l.b + r] += dzr;
                let w_off = l.w + r * l.input;
                for (k, &xi) in input.iter().enumerate() {
                    grad[w_off + k] += dzr * xi;
                    dx_t[k] += dzr * p[w_off + k];
                }
                let u_off = l.u + r * h;
                for k in 0..h {
                    grad[u_off + k] += dzr * h_prev[k];
                    dh_next[k] += dzr * p[u_off + k];
                }
            }
        }
        dh_out = dx;
    }
}

/// Sum of squared errors and its gradient over a set of samples.
fn loss_and_grad(layout: &Layout, p: &[f64], samples: &[(&[f64], f64)], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for &(x, y) in samples {
        let trace = forward(layout, p, x);
        let err = trace.output - y;
        loss += err * err;
        backward(layout, p, x, &trace, 2.0 * err, grad);
    }
    loss
}

fn loss_only(layout: &Layout, p: &[f64], samples: &[(&[f64], f64)]) -> f64 {
    samples
        .iter()
        .map(|&(x, y)| (forward(layout, p, x).output - y).powi(2))
        .sum()
}

fn scaled_input(cycle: &SynchronizedCycle, d: usize) -> Vec<f64> {
    cycle.warped_indices.iter().map(|v| v / d as f64).collect()
}

/// Cycles in `first..=last` paired with their SOH values.
pub fn training_set(
    cycles: &[SynchronizedCycle],
    soh: &SohSeries,
    first: u32,
    last: u32,
) -> Result<(Vec<SynchronizedCycle>, Vec<f64>), SohError> {
    if first == 0 || last <= first {
        return Err(SohError::RangeOutOfBounds { first, last });
    }
    let picked: Vec<SynchronizedCycle> = cycles
        .iter()
        .filter(|c| (first..=last).contains(&c.cycle_number))
        .cloned()
        .collect();
    if picked.len() != (last - first + 1) as usize {
        return Err(SohError::RangeOutOfBounds { first, last });
    }
    let targets = picked
        .iter()
        .map(|c| soh.get(c.cycle_number as usize).ok_or(SohError::MissingSoh(c.cycle_number)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((picked, targets))
}

pub fn train(
    cycles: &[SynchronizedCycle],
    targets: &[f64],
    cfg: &RegressorConfig,
    meta: TrainingMeta,
) -> Result<SohModel, SohError> {
    cfg.validate()?;
    if cycles.len() != targets.len() {
        return Err(SohError::MisalignedData {
            cycles: cycles.len(),
            targets: targets.len(),
        });
    }
    let Some(first) = cycles.first() else {
        return Err(SohError::EmptyTrainingSet);
    };
    let d = first.warped_indices.len();
    for c in cycles {
        if c.warped_indices.len() != d {
            return Err(SohError::DimensionMismatch {
                expected: d,
                got: c.warped_indices.len(),
            });
        }
        if !(meta.first_cycle..=meta.last_cycle).contains(&c.cycle_number) {
            return Err(SohError::OutsideRange {
                cycle: c.cycle_number,
                first: meta.first_cycle,
                last: meta.last_cycle,
            });
        }
    }

    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let sd = (targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };

    let inputs: Vec<Vec<f64>> = cycles.iter().map(|c| scaled_input(c, d)).collect();
    let samples: Vec<(&[f64], f64)> = inputs
        .iter()
        .zip(targets)
        .map(|(x, &y)| (x.as_slice(), (y - mean) / sd))
        .collect();

    let layout = Layout::new(&cfg.lstm_layer_sizes, cfg.dense_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = layout.init(&mut rng);
    let mut grad = vec![0.0; layout.total];
    let mut m = vec![0.0; layout.total];
    let mut v = vec![0.0; layout.total];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut step = 0i32;

    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            epoch_loss += loss_and_grad(&layout, &params, &batch, &mut grad);
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for k in 0..params.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
                v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
                params[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        if !epoch_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(SohError::NonFiniteLoss(epoch));
        }
        if epoch_loss < best.0 {
            best = (epoch_loss, params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }

    let (_, mut params, best_epoch) = best;
    // undo target standardization in the linear head
    for w in &mut params[layout.out_w..layout.out_b] {
        *w *= sd;
    }
    params[layout.out_b] = params[layout.out_b] * sd + mean;

    let mut model = SohModel {
        config: cfg.clone(),
        cycle_length: d,
        params,
        meta,
        report: TrainingReport {
            epochs_run,
            best_epoch,
            training_rmse: 0.0,
        },
    };
    let estimates = predict_all(&model, cycles)?;
    model.report.training_rmse = rmse(&estimates, targets)?;
    Ok(model)
}

pub fn predict(model: &SohModel, cycle: &SynchronizedCycle) -> Result<f64, SohError> {
    let d = model.cycle_length;
    if cycle.warped_indices.len() != d {
        return Err(SohError::DimensionMismatch {
            expected: d,
            got: cycle.warped_indices.len(),
        });
    }
    let layout = Layout::new(&model.config.lstm_layer_sizes, model.config.dense_size);
    Ok(forward(&layout, &model.params, &scaled_input(cycle, d)).output)
}

pub fn predict_all(model: &SohModel, cycles: &[SynchronizedCycle]) -> Result<Vec<f64>, SohError> {
    cycles.iter().map(|c| predict(model, c)).collect()
}

/// Root mean squared error.
pub fn rmse(estimates: &[f64], targets: &[f64]) -> Result<f64, SohError> {
    if estimates.len() != targets.len() {
        return Err(SohError::LengthMismatch {
            estimates: estimates.len(),
            targets: targets.len(),
        });
    }
    if estimates.is_empty() {
        return Err(SohError::Empty);
    }
    let sse: f64 = estimates.iter().zip(targets).map(|(e, t)| (e - t).powi(2)).sum();
    Ok((sse / estimates.len() as f64).sqrt())
}

/// Largest relative error between the analytic gradient and central finite
/// differences (step `1e-5`) of the squared-error loss, over all parameters
/// of a network initialized from `cfg.seed`.
pub fn gradient_check(cfg: &RegressorConfig, probe: &[(Vec<f64>, f64)]) -> Result<f64, SohError> {
    cfg.validate()?;
    if probe.is_empty() {
        return Err(SohError::EmptyTrainingSet);
    }
    let layout = Layout::new(&cfg.lstm_layer_sizes, cfg.dense_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = layout.init(&mut rng);
    // move biases away from their deterministic start values
    for p in &mut params {
        *p += rng.gen_range(-0.1..0.1);
    }
    let samples: Vec<(&[f64], f64)> = probe.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let mut grad = vec![0.0; layout.total];
    loss_and_grad(&layout, &params, &samples, &mut grad);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..layout.total {
        let orig = params[k];
        params[k] = orig + h;
        let up = loss_only(&layout, &params, &samples);
        params[k] = orig - h;
        let down = loss_only(&layout, &params, &samples);
        params[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> RegressorConfig {
        RegressorConfig {
            lstm_layer_sizes: vec![3, 4],
            dense_size: 3,
            seed,
            ..RegressorConfig::default()
        }
    }

    fn probe(seed: u64, count: usize, len: usize) -> Vec<(Vec<f64>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
                (x, rng.gen_range(0.7..1.0))
            })
            .collect()
    }

    fn sync(n: u32, values: Vec<f64>) -> SynchronizedCycle {
        SynchronizedCycle {
            cycle_number: n,
            warped_indices: values,
        }
    }

    fn meta(first: u32, last: u32) -> TrainingMeta {
        TrainingMeta {
            battery_id: "B".into(),
            first_cycle: first,
            last_cycle: last,
            mode: TrainingMode::Stage2,
            category: None,
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.3, 0.5], &[0.3, 0.5]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(SohError::LengthMismatch { .. })));
        assert_eq!(rmse(&[], &[]), Err(SohError::Empty));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = gradient_check(&tiny_cfg(seed), &probe(seed, 3, 6)).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
        let single = RegressorConfig {
            lstm_layer_sizes: vec![2],
            dense_size: 2,
            ..RegressorConfig::default()
        };
        assert!(gradient_check(&single, &probe(5, 3, 3)).unwrap() < 1e-4);
    }

    #[test]
    fn gradients_with_single_step_sequences() {
        let err = gradient_check(&tiny_cfg(4), &probe(4, 3, 1)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unperturbed_loss_is_reproducible() {
        let layout = Layout::new(&[3, 4], 3);
        let params = layout.init(&mut ChaCha8Rng::seed_from_u64(1));
        let data = probe(1, 3, 5);
        let s: Vec<(&[f64], f64)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        assert_eq!(loss_only(&layout, &params, &s), loss_only(&layout, &params, &s));
    }

    #[test]
    fn zero_weights_output_the_bias() {
        let cfg = tiny_cfg(0);
        let layout = Layout::new(&cfg.lstm_layer_sizes, cfg.dense_size);
        let mut params = vec![0.0; layout.total];
        params[layout.out_b] = 0.93;
        let model = SohModel {
            config: cfg,
            cycle_length: 5,
            params,
            meta: meta(1, 2),
            report: TrainingReport {
                epochs_run: 0,
                best_epoch: 0,
                training_rmse: 0.0,
            },
        };
        for v in [vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![1.0, 1.0, 1.0, 3.0, 5.0]] {
            assert_eq!(predict(&model, &sync(1, v)).unwrap(), 0.93);
        }
        assert!(matches!(
            predict(&model, &sync(1, vec![1.0; 4])),
            Err(SohError::DimensionMismatch { expected: 5, got: 4 })
        ));
    }

    fn toy_set() -> (Vec<SynchronizedCycle>, Vec<f64>) {
        // later cycles drift towards the end of the reference
        let d = 8;
        let cycles: Vec<SynchronizedCycle> = (0..20)
            .map(|s| {
                let shift = s as f64 * 0.15;
                sync(
                    100 + s,
                    (1..=d).map(|k| (k as f64 + shift * (k as f64 / d as f64)).min(d as f64)).collect(),
                )
            })
            .collect();
        let targets = (0..20).map(|s| 0.95 - 0.004 * s as f64).collect();
        (cycles, targets)
    }

    #[test]
    fn overfits_a_small_set() {
        let (cycles, targets) = toy_set();
        let cfg = RegressorConfig {
            epochs: 500,
            ..RegressorConfig::default()
        };
        let model = train(&cycles, &targets, &cfg, meta(100, 119)).unwrap();
        assert!(model.report.training_rmse < 0.005, "{:?}", model.report);
        for (c, t) in cycles.iter().zip(&targets) {
            assert!((predict(&model, c).unwrap() - t).abs() < 0.01);
        }
        let a = predict(&model, &cycles[3]).unwrap();
        assert_eq!(a.to_bits(), predict(&model, &cycles[3]).unwrap().to_bits());
    }

    #[test]
    fn target_scaling_carries_through() {
        let (cycles, targets) = toy_set();
        let cfg = RegressorConfig {
            epochs: 40,
            ..RegressorConfig::default()
        };
        let base = train(&cycles, &targets, &cfg, meta(100, 119)).unwrap();
        let scaled: Vec<f64> = targets.iter().map(|t| 3.0 * t).collect();
        let big = train(&cycles, &scaled, &cfg, meta(100, 119)).unwrap();
        for c in &cycles {
            let a = predict(&base, c).unwrap();
            let b = predict(&big, c).unwrap();
            assert!((b - 3.0 * a).abs() < 1e-3);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (cycles, targets) = toy_set();
        let cfg = RegressorConfig {
            epochs: 10,
            ..RegressorConfig::default()
        };
        assert_eq!(
            train(&cycles, &targets, &cfg, meta(100, 119)).unwrap(),
            train(&cycles, &targets, &cfg, meta(100, 119)).unwrap()
        );
    }

    #[test]
    fn training_input_errors() {
        let (cycles, targets) = toy_set();
        let cfg = RegressorConfig::default();
        assert!(matches!(
            train(&cycles, &targets[1..], &cfg, meta(100, 119)),
            Err(SohError::MisalignedData { .. })
        ));
        assert!(matches!(
            train(&cycles, &targets, &cfg, meta(100, 110)),
            Err(SohError::OutsideRange { .. })
        ));
        assert_eq!(
            train(&[], &[], &cfg, meta(1, 2)).unwrap_err(),
            SohError::EmptyTrainingSet
        );
        let diverging = RegressorConfig {
            learning_rate: 1e300,
            epochs: 5,
            ..RegressorConfig::default()
        };
        assert!(matches!(
            train(&cycles, &targets, &diverging, meta(100, 119)),
            Err(SohError::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn training_set_selects_range() {
        let (cycles, targets) = toy_set();
        let mut soh = vec![1.0; 99];
        soh.extend(&targets);
        let soh = SohSeries::new(soh, 1.1).unwrap();
        let (picked, t) = training_set(&cycles, &soh, 105, 110).unwrap();
        assert_eq!(picked.len(), 6);
        assert_eq!(t[0], targets[5]);
        assert!(matches!(
            training_set(&cycles, &soh, 110, 105),
            Err(SohError::RangeOutOfBounds { .. })
        ));
        assert!(matches!(
            training_set(&cycles, &soh, 110, 200),
            Err(SohError::RangeOutOfBounds { .. })
        ));
    }
}
