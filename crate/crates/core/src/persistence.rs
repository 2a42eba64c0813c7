//! Multi-scale orchestration and the cross-scale persistence metrics.
//!
//! Executions are split into disjoint batches. Each (window size, batch) cell
//! yields one stability map, one feature cloud and one BIC-selected mixture
//! order; the orders collected at a window size are summarized by saturation,
//! spread and median.

use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixture::{select_order, EmConfig, ModelSelection};
use crate::seeds::{derive_seed, tag};
use crate::spectral::{Stft, StftConfig, WindowFunction};
use crate::stability::{features_from_map, stability_map, StabilityMap, TransformConfig, DEFAULT_EPSILON};
use crate::trace::{normalize_traces, NormalizeMode, TraceSet};

pub const DEFAULT_WINDOW_SIZES: [usize; 6] = [64, 128, 138, 256, 512, 1024];
pub const DEFAULT_BATCH_SIZE: usize = 10;
pub const DEFAULT_K_MAX: usize = 10;
/// Capacity bounds of the sensitivity sweep.
pub const SWEEP_K_MAX: [usize; 3] = [8, 10, 12];

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Strictly increasing.
    pub window_sizes: Vec<usize>,
    pub window_function: WindowFunction,
    /// Executions per stability map.
    pub batch_size: usize,
    pub k_max: usize,
    pub em: EmConfig,
    pub epsilon: f64,
    pub transform: TransformConfig,
    pub normalize: NormalizeMode,
    pub master_seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window_sizes: DEFAULT_WINDOW_SIZES.to_vec(),
            window_function: WindowFunction::Hann,
            batch_size: DEFAULT_BATCH_SIZE,
            k_max: DEFAULT_K_MAX,
            em: EmConfig::default(),
            epsilon: DEFAULT_EPSILON,
            transform: TransformConfig::default(),
            normalize: NormalizeMode::default(),
            master_seed: 0,
        }
    }
}

impl AnalysisConfig {
    /// Checks the configuration on its own and against a trace set.
    pub fn validate(&self, set: &TraceSet) -> Result<()> {
        if self.window_sizes.is_empty() {
            return Err(Error::Config("at least one window size is required".into()));
        }
        if self.window_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "window sizes must be strictly increasing, got {:?}",
                self.window_sizes
            )));
        }
        for &w in &self.window_sizes {
            self.stft_config(w).validate(set.trace_length())?;
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        let em = &self.em;
        if em.n_init == 0 || em.max_iter == 0 {
            return Err(Error::Config("n_init and max_iter must be at least 1".into()));
        }
        if !(em.tol > 0.0 && em.tol.is_finite()) || !(em.reg >= 0.0 && em.reg.is_finite()) {
            return Err(Error::Config("tol must be positive and reg non-negative".into()));
        }
        if !(em.cov_floor >= 0.0 && em.cov_floor.is_finite()) || em.cov_floor + em.reg <= 0.0 {
            return Err(Error::Config("cov_floor + reg must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn stft_config(&self, window_size: usize) -> StftConfig {
        StftConfig::new(window_size).with_window(self.window_function)
    }

    /// Short stable digest of the configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits execution ids, in ascending order, into `floor(n / m)` batches of `m`.
pub fn batch_partition(set: &TraceSet, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut ids: Vec<usize> = set.traces().iter().map(|t| t.execution_id()).collect();
    ids.sort_unstable();
    let n_batches = ids.len() / batch_size;
    if n_batches < 2 {
        return Err(Error::InsufficientData(format!(
            "{} executions give {n_batches} batch(es) of {batch_size}; at least 2 are needed",
            ids.len()
        )));
    }
    let dropped = ids.len() - n_batches * batch_size;
    if dropped > 0 {
        info!("dropping {dropped} trailing execution(s) that do not fill a batch");
    }
    Ok(ids.chunks_exact(batch_size).take(n_batches).map(<[usize]>::to_vec).collect())
}

/// Fraction of orders equal to `k_max`.
pub fn saturation_ratio(orders: &[usize], k_max: usize) -> Result<f64> {
    if orders.is_empty() {
        return Err(Error::InsufficientData("saturation of an empty order list".into()));
    }
    if let Some(&bad) = orders.iter().find(|&&k| k == 0 || k > k_max) {
        return Err(Error::Consistency(format!("order {bad} outside 1..={k_max}")));
    }
    let hits = orders.iter().filter(|&&k| k == k_max).count();
    Ok(hits as f64 / orders.len() as f64)
}

/// Sample variance (divisor B - 1) of the selected orders.
pub fn within_window_variance(orders: &[usize]) -> Result<f64> {
    if orders.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "variance needs at least 2 orders, got {}",
            orders.len()
        )));
    }
    let n = orders.len() as f64;
    let mean = orders.iter().sum::<usize>() as f64 / n;
    let ss: f64 = orders.iter().map(|&k| (k as f64 - mean).powi(2)).sum();
    Ok(ss / (n - 1.0))
}

/// Middle order, or the mean of the two middle orders for even lengths.
pub fn median_complexity(orders: &[usize]) -> Result<f64> {
    if orders.is_empty() {
        return Err(Error::InsufficientData("median of an empty order list".into()));
    }
    let mut v: Vec<f64> = orders.iter().map(|&k| k as f64).collect();
    Ok(median(&mut v))
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub window_size: usize,
    /// One per retained batch, in batch order.
    pub selected_orders: Vec<usize>,
    /// Batch index of each entry of `selected_orders`.
    pub batches: Vec<usize>,
    /// Batches whose order selection failed and were left out.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_batches: Vec<usize>,
    pub saturation_ratio: f64,
    pub within_window_variance: f64,
    pub median_complexity: f64,
}

impl ScaleProfile {
    pub fn from_orders(window_size: usize, batches: Vec<usize>, orders: Vec<usize>, k_max: usize) -> Result<Self> {
        Ok(Self {
            window_size,
            saturation_ratio: saturation_ratio(&orders, k_max)?,
            within_window_variance: within_window_variance(&orders)?,
            median_complexity: median_complexity(&orders)?,
            selected_orders: orders,
            batches,
            failed_batches: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceProfile {
    pub schema_version: u32,
    pub k_max: usize,
    pub config_fingerprint: String,
    pub config: AnalysisConfig,
    pub n_executions: usize,
    pub trace_length: usize,
    pub sampling_rate: f64,
    /// Ordered by strictly increasing window size.
    pub scale_profiles: Vec<ScaleProfile>,
}

impl PersistenceProfile {
    pub fn window_sizes(&self) -> Vec<usize> {
        self.scale_profiles.iter().map(|s| s.window_size).collect()
    }

    pub fn saturation_curve(&self) -> Vec<f64> {
        self.scale_profiles.iter().map(|s| s.saturation_ratio).collect()
    }

    /// Recomputes every metric from the stored orders and checks the
    /// structural invariants.
    pub fn check(&self) -> Result<()> {
        if self.scale_profiles.is_empty() {
            return Err(Error::Malformed("profile has no window sizes".into()));
        }
        if self.scale_profiles.windows(2).any(|w| w[1].window_size <= w[0].window_size) {
            return Err(Error::Malformed("window sizes are not strictly increasing".into()));
        }
        for s in &self.scale_profiles {
            let fresh = ScaleProfile::from_orders(s.window_size, s.batches.clone(), s.selected_orders.clone(), self.k_max)
                .map_err(|e| Error::Malformed(format!("window {}: {e}", s.window_size)))?;
            if s.batches.len() != s.selected_orders.len()
                || fresh.saturation_ratio != s.saturation_ratio
                || fresh.within_window_variance != s.within_window_variance
                || fresh.median_complexity != s.median_complexity
            {
                return Err(Error::Malformed(format!(
                    "stored metrics at window {} do not match its orders",
                    s.window_size
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        p.check()?;
        Ok(p)
    }

    /// Metric curves: one row per window size.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let io = |e: csv::Error| Error::Malformed(e.to_string());
        w.write_record(["window_size", "saturation_ratio", "within_window_variance", "median_complexity", "n_batches"])
            .map_err(io)?;
        for s in &self.scale_profiles {
            w.write_record([
                s.window_size.to_string(),
                format!("{:?}", s.saturation_ratio),
                format!("{:?}", s.within_window_variance),
                format!("{:?}", s.median_complexity),
                s.selected_orders.len().to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io("<csv sink>", e))
    }
}

/// Seed of the order selection for one (window, batch) cell.
pub fn cell_seed(master_seed: u64, window_size: usize, batch: usize) -> u64 {
    derive_seed(master_seed, &[tag::BATCH, window_size as u64, batch as u64])
}

/// Stability maps of every batch at one window size.
pub fn stability_maps(set: &TraceSet, window_size: usize, config: &AnalysisConfig) -> Result<Vec<StabilityMap>> {
    config.validate(set)?;
    let set = normalize_traces(set, config.normalize)?;
    let batches = batch_partition(&set, config.batch_size)?;
    let stft = Stft::new(config.stft_config(window_size));
    batches
        .par_iter()
        .map(|ids| batch_map(&set, &stft, ids, config.epsilon))
        .collect()
}

fn batch_map(set: &TraceSet, stft: &Stft, ids: &[usize], epsilon: f64) -> Result<StabilityMap> {
    let spectrograms = ids
        .iter()
        .map(|&id| {
            let trace = set
                .by_execution(id)
                .ok_or_else(|| Error::Consistency(format!("execution {id} missing from set")))?;
            stft.magnitude(trace)
        })
        .collect::<Result<Vec<_>>>()?;
    stability_map(&spectrograms, epsilon)
}

/// Order selections of every (window, batch) cell: `cells[w][b]`.
///
/// A cell whose selection fails numerically is `None`; every other error aborts.
fn select_cells(set: &TraceSet, config: &AnalysisConfig, k_max: usize) -> Result<Vec<Vec<Option<ModelSelection>>>> {
    config.validate(set)?;
    let set = normalize_traces(set, config.normalize)?;
    let batches = batch_partition(&set, config.batch_size)?;
    let stfts: Vec<Stft> = config.window_sizes.iter().map(|&w| Stft::new(config.stft_config(w))).collect();

    let grid: Vec<(usize, usize)> = (0..stfts.len())
        .flat_map(|w| (0..batches.len()).map(move |b| (w, b)))
        .collect();
    let results: Vec<((usize, usize), Result<Option<ModelSelection>>)> = grid
        .par_iter()
        .map(|&(w, b)| {
            let run = || -> Result<Option<ModelSelection>> {
                let map = batch_map(&set, &stfts[w], &batches[b], config.epsilon)?;
                let features = features_from_map(&map, &config.transform);
                let seed = cell_seed(config.master_seed, config.window_sizes[w], b);
                match select_order(&features, k_max, seed, &config.em) {
                    Ok(sel) => Ok(Some(sel)),
                    Err(e @ (Error::SelectionFailure | Error::Numerical(_) | Error::InsufficientData(_))) => {
                        warn!("window {} batch {b}: {e}; batch excluded", config.window_sizes[w]);
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            };
            ((w, b), run())
        })
        .collect();

    let mut cells: Vec<Vec<Option<ModelSelection>>> = vec![vec![None; batches.len()]; stfts.len()];
    for ((w, b), r) in results {
        cells[w][b] = r?;
    }
    Ok(cells)
}

fn profile_from_cells(
    set: &TraceSet,
    config: &AnalysisConfig,
    cells: &[Vec<Option<ModelSelection>>],
    k_max: usize,
) -> Result<PersistenceProfile> {
    let config = AnalysisConfig {
        k_max,
        ..config.clone()
    };
    let mut scale_profiles = Vec::with_capacity(cells.len());
    for (&window_size, row) in config.window_sizes.iter().zip(cells) {
        let mut batches = Vec::new();
        let mut orders = Vec::new();
        let mut failed = Vec::new();
        for (b, cell) in row.iter().enumerate() {
            match cell.as_ref().map(|s| s.restricted(k_max)) {
                Some(Ok(sel)) => {
                    batches.push(b);
                    orders.push(sel.selected_k);
                }
                Some(Err(e)) => {
                    warn!("window {window_size} batch {b}: {e}; batch excluded");
                    failed.push(b);
                }
                None => failed.push(b),
            }
        }
        if orders.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "window {window_size}: only {} batch(es) produced an order selection",
                orders.len()
            )));
        }
        let mut profile = ScaleProfile::from_orders(window_size, batches, orders, k_max)?;
        profile.failed_batches = failed;
        scale_profiles.push(profile);
    }
    Ok(PersistenceProfile {
        schema_version: PROFILE_SCHEMA_VERSION,
        k_max,
        config_fingerprint: config.fingerprint(),
        n_executions: set.n_executions(),
        trace_length: set.trace_length(),
        sampling_rate: set.sampling_rate(),
        config,
        scale_profiles,
    })
}

/// Profile of a single window size.
pub fn analyze_scale(set: &TraceSet, window_size: usize, config: &AnalysisConfig) -> Result<ScaleProfile> {
    let config = AnalysisConfig {
        window_sizes: vec![window_size],
        ..config.clone()
    };
    let mut profile = analyze(set, &config)?;
    Ok(profile.scale_profiles.remove(0))
}

/// Full multi-scale analysis at `config.k_max`.
pub fn analyze(set: &TraceSet, config: &AnalysisConfig) -> Result<PersistenceProfile> {
    let cells = select_cells(set, config, config.k_max)?;
    profile_from_cells(set, config, &cells, config.k_max)
}

/// One profile per capacity bound, each identical to `analyze` with that bound.
///
/// Order fits do not depend on the bound, so the grid is fitted once up to the
/// largest bound and each profile re-selects among the orders it admits.
pub fn sensitivity_sweep(set: &TraceSet, k_max_values: &[usize], config: &AnalysisConfig) -> Result<Vec<PersistenceProfile>> {
    let Some(&largest) = k_max_values.iter().max() else {
        return Err(Error::Config("the k_max list is empty".into()));
    };
    if k_max_values.contains(&0) {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    let cells = select_cells(set, config, largest)?;
    k_max_values
        .iter()
        .map(|&k| profile_from_cells(set, config, &cells, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Trace;

    fn set_of(n: usize) -> TraceSet {
        TraceSet::new(
            (0..n)
                .map(|i| Trace::new((0..64).map(|j| ((i * 7 + j * 3) % 11) as f64).collect(), 1.0, i).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn partition_examples() {
        let b = batch_partition(&set_of(100), 10).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b[0], (0..10).collect::<Vec<_>>());
        assert_eq!(b[9], (90..100).collect::<Vec<_>>());

        let b = batch_partition(&set_of(25), 10).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], (10..20).collect::<Vec<_>>());

        assert!(matches!(batch_partition(&set_of(15), 10), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn saturation_examples() {
        assert_eq!(saturation_ratio(&[10, 10, 8, 10], 10).unwrap(), 0.75);
        assert_eq!(saturation_ratio(&[1, 2, 3], 10).unwrap(), 0.0);
        assert_eq!(saturation_ratio(&[10, 10], 10).unwrap(), 1.0);
        assert!(matches!(saturation_ratio(&[11], 10), Err(Error::Consistency(_))));
        assert!(matches!(saturation_ratio(&[0, 3], 10), Err(Error::Consistency(_))));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(within_window_variance(&[5, 5, 5]).unwrap(), 0.0);
        assert_eq!(within_window_variance(&[4, 6]).unwrap(), 2.0);
        assert_eq!(within_window_variance(&[1, 10]).unwrap(), 40.5);
        assert!(matches!(within_window_variance(&[3]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_complexity(&[3, 7, 5]).unwrap(), 5.0);
        assert_eq!(median_complexity(&[2, 4, 6, 8]).unwrap(), 5.0);
        assert_eq!(median_complexity(&[10, 10, 10]).unwrap(), 10.0);
    }

    #[test]
    fn config_validation() {
        let set = set_of(20);
        let ok = AnalysisConfig {
            window_sizes: vec![8, 16],
            ..AnalysisConfig::default()
        };
        ok.validate(&set).unwrap();
        for bad in [
            AnalysisConfig { window_sizes: vec![16, 8], ..ok.clone() },
            AnalysisConfig { window_sizes: vec![8, 128], ..ok.clone() },
            AnalysisConfig { batch_size: 1, ..ok.clone() },
            AnalysisConfig { k_max: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(&set), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = AnalysisConfig::default();
        let b = AnalysisConfig { k_max: 8, ..a.clone() };
        assert_eq!(a.fingerprint(), AnalysisConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
