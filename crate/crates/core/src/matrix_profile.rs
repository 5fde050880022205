//! Matrix profile and profile index of a concatenated discharge series.
//!
//! For every subsequence of length `m` the profile stores the distance to
//! its nearest neighbour outside an exclusion zone of `ceil(m / 2)`
//! positions, and the profile index stores where that neighbour starts.
//! Positions are 1-based; argmin ties go to the smallest position.
//!
//! Distances are plain Euclidean by default. The trajectories fed in here are
//! absolute time indices, and z-normalizing them would throw away the level
//! shift that carries most of the degradation signal; the z-normalized mode
//! exists for experiments only.
//!
//! Three routes share one contract:
//!
//! - [`compute_profile`] evaluates every distance directly, in parallel over
//!   query positions.
//! - [`compute_profile_fast`] walks the distance matrix diagonal by diagonal,
//!   updating each dot product from its predecessor in O(1).
//! - [`StreamingProfile`] keeps the last dot product of every diagonal so that
//!   appending `d` samples only costs the new pairs; the detector uses it.
//!
//! Reported profile values are always recomputed directly from the chosen
//! neighbour, so `profile[j] == subsequence_distance(j, index[j])` holds
//! exactly whichever route selected the neighbour.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycle::{CycleError, DischargeSeries, SynchronizedCycle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("subsequence position out of range: j={j}, q={q}, m={m}, n={n}")]
    OutOfRange { j: usize, q: usize, m: usize, n: usize },
    #[error("series of length {n} is too short for query length {m} (need n >= 2m)")]
    SeriesTooShort { n: usize, m: usize },
    #[error("query length must be positive")]
    ZeroQueryLength,
    #[error("query length {m} is not cycle length {d} x cycle lag {f}")]
    QueryNotCycleAligned { m: usize, d: usize, f: usize },
    #[error("profile of {windows} windows does not cover whole cycles of length {d}")]
    IncompleteCycles { windows: usize, d: usize },
    #[error("profile pair does not match the series it is applied to")]
    InconsistentPair,
    #[error("incremental updates support Euclidean distance only")]
    UnsupportedMode,
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Euclidean,
    ZNormalized,
}

/// `ceil(m / 2)`; a neighbour `q` of `j` must satisfy `|q - j| >= radius`.
pub fn exclusion_radius(m: usize) -> usize {
    m.div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePair {
    /// Nearest-neighbour distance per subsequence, length `n - m + 1`.
    pub profile: Vec<f64>,
    /// 1-based start of the nearest neighbour.
    pub index: Vec<usize>,
    pub query_length: usize,
    pub exclusion_radius: usize,
    pub mode: DistanceMode,
}

impl ProfilePair {
    pub fn len(&self) -> usize {
        self.profile.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profile.is_empty()
    }
}

/// Euclidean distance between the length-`m` subsequences starting at `j`
/// and `q` (1-based).
pub fn subsequence_distance(
    series: &[f64],
    j: usize,
    q: usize,
    m: usize,
) -> Result<f64, ProfileError> {
    let n = series.len();
    if m == 0 {
        return Err(ProfileError::ZeroQueryLength);
    }
    if j == 0 || q == 0 || n < m || j > n - m + 1 || q > n - m + 1 {
        return Err(ProfileError::OutOfRange { j, q, m, n });
    }
    Ok(euclidean(&series[j - 1..j - 1 + m], &series[q - 1..q - 1 + m]))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-window moments used by the dot-product routes.
struct WindowStats {
    sum_sq: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl WindowStats {
    fn new(series: &[f64], m: usize) -> Self {
        let windows = series.len() + 1 - m;
        let mut stats = Self {
            sum_sq: Vec::with_capacity(windows),
            mean: Vec::with_capacity(windows),
            std: Vec::with_capacity(windows),
        };
        stats.extend(series, m, windows);
        stats
    }

    fn extend(&mut self, series: &[f64], m: usize, windows: usize) {
        for j in self.sum_sq.len()..windows {
            let (ss, mu, sd) = moments(&series[j..j + m]);
            self.sum_sq.push(ss);
            self.mean.push(mu);
            self.std.push(sd);
        }
    }
}

fn moments(w: &[f64]) -> (f64, f64, f64) {
    let m = w.len() as f64;
    let ss = dot(w, w);
    let mu = w.iter().sum::<f64>() / m;
    let var = w.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
    let sd = if var <= 1e-14 * mu.abs().max(1.0).powi(2) {
        0.0
    } else {
        var.sqrt()
    };
    (ss, mu, sd)
}

fn znorm_distance(a: &[f64], b: &[f64]) -> f64 {
    let (_, ma, sa) = moments(a);
    let (_, mb, sb) = moments(b);
    let z = |x: f64, mu: f64, sd: f64| if sd == 0.0 { 0.0 } else { (x - mu) / sd };
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = z(x, ma, sa) - z(y, mb, sb);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn direct_distance(mode: DistanceMode, series: &[f64], m: usize, j0: usize, q0: usize) -> f64 {
    let a = &series[j0..j0 + m];
    let b = &series[q0..q0 + m];
    match mode {
        DistanceMode::Euclidean => euclidean(a, b),
        DistanceMode::ZNormalized => znorm_distance(a, b),
    }
}

fn squared_from_dot(
    mode: DistanceMode,
    m: usize,
    stats: &WindowStats,
    j0: usize,
    q0: usize,
    qt: f64,
) -> f64 {
    match mode {
        DistanceMode::Euclidean => (stats.sum_sq[j0] + stats.sum_sq[q0] - 2.0 * qt).max(0.0),
        DistanceMode::ZNormalized => {
            let (sj, sq) = (stats.std[j0], stats.std[q0]);
            let mf = m as f64;
            match (sj == 0.0, sq == 0.0) {
                (true, true) => 0.0,
                (true, false) | (false, true) => mf,
                _ => {
                    let rho = (qt - mf * stats.mean[j0] * stats.mean[q0]) / (mf * sj * sq);
                    (2.0 * mf * (1.0 - rho)).max(0.0)
                }
            }
        }
    }
}

/// `(squared distance, 0-based neighbour)` ordered lexicographically, so the
/// smallest position wins exact ties regardless of visiting order.
#[derive(Clone, Copy)]
struct Best {
    sq: f64,
    idx: usize,
}

impl Best {
    const NONE: Best = Best {
        sq: f64::INFINITY,
        idx: usize::MAX,
    };

    #[inline]
    fn offer(&mut self, sq: f64, idx: usize) -> bool {
        if sq < self.sq || (sq == self.sq && idx < self.idx) {
            self.sq = sq;
            self.idx = idx;
            true
        } else {
            false
        }
    }
}

fn check_lengths(n: usize, m: usize) -> Result<(), ProfileError> {
    if m == 0 {
        return Err(ProfileError::ZeroQueryLength);
    }
    if n < 2 * m {
        return Err(ProfileError::SeriesTooShort { n, m });
    }
    Ok(())
}

fn finish_pair(series: &[f64], m: usize, mode: DistanceMode, best: &[Best]) -> ProfilePair {
    let profile = best
        .par_iter()
        .enumerate()
        .map(|(j, b)| direct_distance(mode, series, m, j, b.idx))
        .collect();
    ProfilePair {
        profile,
        index: best.iter().map(|b| b.idx + 1).collect(),
        query_length: m,
        exclusion_radius: exclusion_radius(m),
        mode,
    }
}

/// Direct evaluation of every admissible pair, parallel over query
/// positions.
pub fn compute_profile(series: &[f64], m: usize) -> Result<ProfilePair, ProfileError> {
    compute_profile_with(series, m, DistanceMode::Euclidean)
}

pub fn compute_profile_with(
    series: &[f64],
    m: usize,
    mode: DistanceMode,
) -> Result<ProfilePair, ProfileError> {
    check_lengths(series.len(), m)?;
    let windows = series.len() - m + 1;
    let r = exclusion_radius(m);
    let best: Vec<Best> = (0..windows)
        .into_par_iter()
        .map(|j| {
            let mut b = Best::NONE;
            for q in (0..windows).filter(|&q| q.abs_diff(j) >= r) {
                let dist = direct_distance(mode, series, m, j, q);
                b.offer(dist * dist, q);
            }
            b
        })
        .collect();
    Ok(finish_pair(series, m, mode, &best))
}

/// Walks one diagonal `q - j = delta` over `q in q_from..q_to` (0-based),
/// seeding from `seed` (the dot product at `q_from - 1`) or directly.
#[inline]
fn walk_diagonal(
    series: &[f64],
    m: usize,
    delta: usize,
    q_from: usize,
    q_to: usize,
    seed: Option<f64>,
    mut visit: impl FnMut(usize, usize, f64),
) -> Option<f64> {
    let mut qt = seed;
    for q in q_from..q_to {
        let j = q - delta;
        let next = match qt {
            Some(prev) => {
                prev - series[j - 1] * series[q - 1] + series[j + m - 1] * series[q + m - 1]
            }
            None => dot(&series[j..j + m], &series[q..q + m]),
        };
        visit(j, q, next);
        qt = Some(next);
    }
    qt
}

/// Diagonal-wise sliding dot products; same result as [`compute_profile`].
pub fn compute_profile_fast(series: &[f64], m: usize) -> Result<ProfilePair, ProfileError> {
    compute_profile_fast_with(series, m, DistanceMode::Euclidean)
}

pub fn compute_profile_fast_with(
    series: &[f64],
    m: usize,
    mode: DistanceMode,
) -> Result<ProfilePair, ProfileError> {
    check_lengths(series.len(), m)?;
    let windows = series.len() - m + 1;
    let r = exclusion_radius(m);
    let stats = WindowStats::new(series, m);

    const CHUNK: usize = 64;
    let diagonals: Vec<usize> = (r..windows).collect();
    let merge = |mut a: Vec<Best>, b: Vec<Best>| {
        for (x, y) in a.iter_mut().zip(b) {
            x.offer(y.sq, y.idx);
        }
        a
    };
    let best = diagonals
        .par_chunks(CHUNK)
        .fold(
            || vec![Best::NONE; windows],
            |mut acc, chunk| {
                for &delta in chunk {
                    walk_diagonal(series, m, delta, delta, windows, None, |j, q, qt| {
                        let sq = squared_from_dot(mode, m, &stats, j, q, qt);
                        acc[j].offer(sq, q);
                        acc[q].offer(sq, j);
                    });
                }
                acc
            },
        )
        .reduce(|| vec![Best::NONE; windows], merge);
    Ok(finish_pair(series, m, mode, &best))
}

/// Extends `series` by one synchronized cycle and returns the profile of the
/// extended series. Existing entries only change when one of the new
/// subsequences is a strictly closer neighbour.
pub fn append_cycle(
    pair: &ProfilePair,
    series: &mut DischargeSeries,
    new_cycle: &SynchronizedCycle,
) -> Result<ProfilePair, ProfileError> {
    if pair.mode != DistanceMode::Euclidean {
        return Err(ProfileError::UnsupportedMode);
    }
    let m = pair.query_length;
    let old_windows = series.len() + 1 - m;
    if series.len() < 2 * m || pair.len() != old_windows {
        return Err(ProfileError::InconsistentPair);
    }
    series.push(new_cycle)?;
    let values = series.values();
    let windows = values.len() + 1 - m;
    let r = pair.exclusion_radius;
    let stats = WindowStats::new(values, m);

    let mut best: Vec<Best> = pair
        .profile
        .iter()
        .zip(&pair.index)
        .map(|(&p, &i)| Best { sq: p * p, idx: i - 1 })
        .chain(std::iter::repeat(Best::NONE).take(windows - old_windows))
        .collect();
    let mut changed = vec![false; windows];
    for delta in r..windows {
        let q_from = old_windows.max(delta);
        walk_diagonal(values, m, delta, q_from, windows, None, |j, q, qt| {
            let sq = squared_from_dot(DistanceMode::Euclidean, m, &stats, j, q, qt);
            changed[j] |= best[j].offer(sq, q);
            changed[q] |= best[q].offer(sq, j);
        });
    }

    let mut out = pair.clone();
    out.profile.resize(windows, 0.0);
    out.index.resize(windows, 0);
    for j in (0..windows).filter(|&j| changed[j]) {
        out.index[j] = best[j].idx + 1;
        out.profile[j] = euclidean(&values[j..j + m], &values[best[j].idx..best[j].idx + m]);
    }
    Ok(out)
}

/// Which sample of a cycle represents it in the cycle-level profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleAnchor {
    /// Sample `(c - 1)·d + 1`: the subsequence that begins with cycle `c`.
    #[default]
    Start,
    /// Sample `c·d`, one sample before the next cycle starts.
    End,
}

/// Cycle-granularity profile: one value and one neighbour cycle per cycle
/// `c = 1..=K-f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleProfile {
    pub values: Vec<f64>,
    /// Neighbour positions converted to 1-based cycle numbers.
    pub indices: Vec<usize>,
    pub cycle_lag: usize,
}

impl CycleProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `p̃_c` for 1-based cycle `c`.
    pub fn value(&self, c: usize) -> Option<f64> {
        c.checked_sub(1).and_then(|i| self.values.get(i)).copied()
    }

    /// `ĩ_c` for 1-based cycle `c`.
    pub fn index(&self, c: usize) -> Option<usize> {
        c.checked_sub(1).and_then(|i| self.indices.get(i)).copied()
    }
}

fn position_to_cycle(pos: usize, d: usize) -> usize {
    (pos - 1) / d + 1
}

fn cycle_entries(windows: usize, m: usize, d: usize, f: usize) -> Result<usize, ProfileError> {
    if d == 0 || m != d * f {
        return Err(ProfileError::QueryNotCycleAligned { m, d, f });
    }
    if windows == 0 || (windows - 1) % d != 0 {
        return Err(ProfileError::IncompleteCycles { windows, d });
    }
    Ok((windows - 1) / d)
}

fn anchor_position(c: usize, d: usize, anchor: CycleAnchor) -> usize {
    match anchor {
        CycleAnchor::Start => (c - 1) * d + 1,
        CycleAnchor::End => c * d,
    }
}

pub fn cycle_downsample(
    pair: &ProfilePair,
    d: usize,
    f: usize,
) -> Result<CycleProfile, ProfileError> {
    cycle_downsample_with(pair, d, f, CycleAnchor::Start)
}

pub fn cycle_downsample_with(
    pair: &ProfilePair,
    d: usize,
    f: usize,
    anchor: CycleAnchor,
) -> Result<CycleProfile, ProfileError> {
    let entries = cycle_entries(pair.len(), pair.query_length, d, f)?;
    let mut out = CycleProfile {
        values: Vec::with_capacity(entries),
        indices: Vec::with_capacity(entries),
        cycle_lag: f,
    };
    for c in 1..=entries {
        let pos = anchor_position(c, d, anchor);
        out.values.push(pair.profile[pos - 1]);
        out.indices.push(position_to_cycle(pair.index[pos - 1], d));
    }
    Ok(out)
}

/// Matrix profile maintained under appends.
///
/// The engine stores the most recent dot product of every diagonal, so an
/// append of `d` samples touches each existing diagonal `d` times in O(1)
/// and seeds only the brand-new diagonals directly. Euclidean distance only.
#[derive(Debug, Clone)]
pub struct StreamingProfile {
    m: usize,
    radius: usize,
    series: Vec<f64>,
    sum_sq: Vec<f64>,
    best_sq: Vec<f64>,
    best_idx: Vec<usize>,
    diag: Vec<f64>,
    direct: Vec<f64>,
    stale: Vec<bool>,
}

impl StreamingProfile {
    pub fn new(m: usize) -> Result<Self, ProfileError> {
        if m == 0 {
            return Err(ProfileError::ZeroQueryLength);
        }
        Ok(Self {
            m,
            radius: exclusion_radius(m),
            series: Vec::new(),
            sum_sq: Vec::new(),
            best_sq: Vec::new(),
            best_idx: Vec::new(),
            diag: Vec::new(),
            direct: Vec::new(),
            stale: Vec::new(),
        })
    }

    pub fn query_length(&self) -> usize {
        self.m
    }

    pub fn series(&self) -> &[f64] {
        &self.series
    }

    fn windows(&self) -> usize {
        (self.series.len() + 1).saturating_sub(self.m)
    }

    pub fn extend(&mut self, values: &[f64]) {
        let old_windows = self.windows();
        self.series.extend_from_slice(values);
        let windows = self.windows();
        if windows == old_windows {
            return;
        }
        let m = self.m;
        for j in old_windows..windows {
            self.sum_sq.push(dot(&self.series[j..j + m], &self.series[j..j + m]));
        }
        self.best_sq.resize(windows, f64::INFINITY);
        self.best_idx.resize(windows, usize::MAX);
        self.direct.resize(windows, f64::INFINITY);
        self.stale.resize(windows, true);
        self.diag.resize(windows, f64::NAN);

        let Self {
            series,
            sum_sq,
            best_sq,
            best_idx,
            diag,
            stale,
            ..
        } = self;
        for delta in self.radius..windows {
            let q_from = old_windows.max(delta);
            let seed = (q_from > delta).then(|| diag[delta]);
            let last = walk_diagonal(series, m, delta, q_from, windows, seed, |j, q, qt| {
                let sq = (sum_sq[j] + sum_sq[q] - 2.0 * qt).max(0.0);
                for (a, b) in [(j, q), (q, j)] {
                    if sq < best_sq[a] || (sq == best_sq[a] && b < best_idx[a]) {
                        best_sq[a] = sq;
                        best_idx[a] = b;
                        stale[a] = true;
                    }
                }
            });
            if let Some(qt) = last {
                diag[delta] = qt;
            }
        }
    }

    fn refresh(&mut self, j: usize) {
        if self.stale[j] {
            let b = self.best_idx[j];
            let m = self.m;
            self.direct[j] = euclidean(&self.series[j..j + m], &self.series[b..b + m]);
            self.stale[j] = false;
        }
    }

    fn ready(&self) -> Result<(), ProfileError> {
        check_lengths(self.series.len(), self.m)
    }

    pub fn profile_pair(&mut self) -> Result<ProfilePair, ProfileError> {
        self.ready()?;
        let windows = self.windows();
        for j in 0..windows {
            self.refresh(j);
        }
        Ok(ProfilePair {
            profile: self.direct.clone(),
            index: self.best_idx.iter().map(|i| i + 1).collect(),
            query_length: self.m,
            exclusion_radius: self.radius,
            mode: DistanceMode::Euclidean,
        })
    }

    /// Cycle-level profile read straight from the engine without
    /// materializing the sample-level pair.
    pub fn cycle_profile(
        &mut self,
        d: usize,
        f: usize,
        anchor: CycleAnchor,
    ) -> Result<CycleProfile, ProfileError> {
        self.ready()?;
        let entries = cycle_entries(self.windows(), self.m, d, f)?;
        let mut out = CycleProfile {
            values: Vec::with_capacity(entries),
            indices: Vec::with_capacity(entries),
            cycle_lag: f,
        };
        for c in 1..=entries {
            let j = anchor_position(c, d, anchor) - 1;
            self.refresh(j);
            out.values.push(self.direct[j]);
            out.indices.push(position_to_cycle(self.best_idx[j] + 1, d));
        }
        Ok(out)
    }
}
