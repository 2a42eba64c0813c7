//! Cross-execution stability maps and the 2-D feature clouds fitted downstream.
//!
//! The stability of a time-frequency bin is the ratio of its mean magnitude to
//! its sample variance across a batch of executions. Bins whose magnitude
//! repeats from run to run score high; transient activity scores low.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::spectral::Spectrogram;

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityMap {
    /// `mean / (variance + epsilon)`, shape `[n_frames, n_bins]`.
    pub stability: Array2<f64>,
    pub mean_spectrum: Array2<f64>,
    pub variance_spectrum: Array2<f64>,
    pub freq_axis: Vec<f64>,
    pub time_axis: Vec<f64>,
    pub window_size: usize,
    pub hop: usize,
    /// Execution ids of the batch, ascending.
    pub batch_ids: Vec<usize>,
    pub epsilon: f64,
}

impl StabilityMap {
    pub fn shape(&self) -> (usize, usize) {
        self.stability.dim()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        crate::spectral::write_matrix_csv(
            sink,
            &format!(
                "stability map, executions {:?}, epsilon {:e}",
                self.batch_ids, self.epsilon
            ),
            self.window_size,
            self.hop,
            &self.freq_axis,
            &self.time_axis,
            &self.stability,
        )
    }
}

/// Per-bin mean, sample variance (divisor m - 1) and stability over a batch.
///
/// Spectrograms are reduced in ascending execution-id order, so the result is
/// bit-identical for any ordering of the input slice.
pub fn stability_map(spectrograms: &[Spectrogram], epsilon: f64) -> Result<StabilityMap> {
    let m = spectrograms.len();
    if m < 2 {
        return Err(Error::InsufficientBatch(m));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let first = &spectrograms[0];
    for s in &spectrograms[1..] {
        if s.magnitudes.dim() != first.magnitudes.dim()
            || s.window_size != first.window_size
            || s.hop != first.hop
            || s.freq_axis != first.freq_axis
            || s.time_axis != first.time_axis
        {
            return Err(Error::IncompatibleSpectrogram(format!(
                "execution {} does not match execution {} (shape {:?} vs {:?}, window {} vs {})",
                s.execution_id,
                first.execution_id,
                s.magnitudes.dim(),
                first.magnitudes.dim(),
                s.window_size,
                first.window_size
            )));
        }
    }

    let mut ordered: Vec<&Spectrogram> = spectrograms.iter().collect();
    ordered.sort_by_key(|s| s.execution_id);

    let dim = first.magnitudes.dim();
    let mut mean = Array2::<f64>::zeros(dim);
    for s in &ordered {
        mean += &s.magnitudes;
    }
    mean /= m as f64;

    let mut variance = Array2::<f64>::zeros(dim);
    for s in &ordered {
        ndarray::Zip::from(&mut variance)
            .and(&s.magnitudes)
            .and(&mean)
            .for_each(|v, &x, &mu| *v += (x - mu) * (x - mu));
    }
    variance /= (m - 1) as f64;

    let stability = ndarray::Zip::from(&mean)
        .and(&variance)
        .map_collect(|&mu, &var| mu / (var + epsilon));

    Ok(StabilityMap {
        stability,
        mean_spectrum: mean,
        variance_spectrum: variance,
        freq_axis: first.freq_axis.clone(),
        time_axis: first.time_axis.clone(),
        window_size: first.window_size,
        hop: first.hop,
        batch_ids: ordered.iter().map(|s| s.execution_id).collect(),
        epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub frequency_scale: FrequencyScale,
    /// Apply `ln(1 + s)` to the stability coordinate.
    pub log1p: bool,
    /// Z-score each coordinate.
    pub standardize: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            frequency_scale: FrequencyScale::default(),
            log1p: true,
            standardize: true,
        }
    }
}

/// How bin frequencies are placed on the first feature axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyScale {
    /// Bin centre frequency in Hz.
    Linear,
    /// Standard normal quantile of the point's position in the spectrum.
    ///
    /// Bin `b` of `n` covers the quantile interval `[b/n, (b+1)/n)`; its frames
    /// are spread across that interval in time order, so frame `t` of `T` sits
    /// at `Φ⁻¹((b + (t + 1/2)/T) / n)`. Every bin holds the same number of
    /// points, and on a linear axis the resulting flat, comb-like marginal is
    /// itself worth several mixture components; this mapping makes it Gaussian.
    #[default]
    NormalQuantile,
}

/// Parameters applied to produce a feature set, kept so points can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub frequency_scale: FrequencyScale,
    pub log1p: bool,
    pub standardized: bool,
    /// Per-dimension offsets subtracted (frequency, stability).
    pub means: [f64; 2],
    /// Per-dimension divisors (frequency, stability).
    pub scales: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `(frequency, stability)` after transformation.
    pub points: Vec<[f64; 2]>,
    pub transform: FeatureTransform,
    pub window_size: usize,
    /// Set when a coordinate was constant; such sets carry no mixture structure.
    pub degenerate: bool,
}

impl FeatureSet {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Wraps already-prepared points, e.g. for fitting synthetic data.
    pub fn from_points(points: Vec<[f64; 2]>) -> Self {
        Self {
            points,
            transform: FeatureTransform {
                frequency_scale: FrequencyScale::Linear,
                log1p: false,
                standardized: false,
                means: [0.0; 2],
                scales: [1.0; 2],
            },
            window_size: 0,
            degenerate: false,
        }
    }
}

/// One point per (frame, bin): the bin frequency paired with its stability.
pub fn features_from_map(map: &StabilityMap, config: &TransformConfig) -> FeatureSet {
    let (n_frames, n_bins) = map.stability.dim();
    let normal = Normal::standard();
    let mut points = Vec::with_capacity(map.stability.len());
    for (t, row) in map.stability.rows().into_iter().enumerate() {
        for (b, (&f, &s)) in map.freq_axis.iter().zip(row).enumerate() {
            let x = match config.frequency_scale {
                FrequencyScale::Linear => f,
                FrequencyScale::NormalQuantile => {
                    let u = (b as f64 + (t as f64 + 0.5) / n_frames as f64) / n_bins as f64;
                    normal.inverse_cdf(u)
                }
            };
            let s = if config.log1p { s.ln_1p() } else { s };
            points.push([x, s]);
        }
    }

    let mut means = [0.0; 2];
    let mut scales = [1.0; 2];
    let mut degenerate = false;
    if config.standardize {
        let n = points.len() as f64;
        for d in 0..2 {
            let mu = points.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = if points.len() > 1 {
                points.iter().map(|p| (p[d] - mu).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let sd = var.sqrt();
            means[d] = mu;
            if sd > 1e-12 * mu.abs().max(1e-300) && sd.is_finite() && sd > 0.0 {
                scales[d] = sd;
            } else {
                scales[d] = 1.0;
                degenerate = true;
            }
        }
        for p in &mut points {
            for d in 0..2 {
                p[d] = (p[d] - means[d]) / scales[d];
            }
        }
    } else {
        degenerate = (0..2).any(|d| points.iter().all(|p| p[d] == points[0][d]));
    }

    FeatureSet {
        points,
        transform: FeatureTransform {
            frequency_scale: config.frequency_scale,
            log1p: config.log1p,
            standardized: config.standardize,
            means,
            scales,
        },
        window_size: map.window_size,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(id: usize, mags: Array2<f64>) -> Spectrogram {
        let (frames, bins) = mags.dim();
        Spectrogram {
            magnitudes: mags,
            freq_axis: (0..bins).map(|b| b as f64 * 0.1).collect(),
            time_axis: (0..frames).map(|f| f as f64).collect(),
            window_size: 8,
            hop: 4,
            execution_id: id,
        }
    }

    #[test]
    fn identical_inputs_hit_the_epsilon_floor() {
        let a = spec(0, array![[3.0, 0.5]]);
        let b = spec(1, array![[3.0, 0.5]]);
        let map = stability_map(&[a, b], 1e-12).unwrap();
        assert_eq!(map.variance_spectrum, array![[0.0, 0.0]]);
        assert_eq!(map.stability[[0, 0]], 3.0 / 1e-12);
    }

    #[test]
    fn two_point_hand_arithmetic() {
        let map = stability_map(&[spec(0, array![[1.0]]), spec(1, array![[3.0]])], 1e-12).unwrap();
        assert_eq!(map.mean_spectrum[[0, 0]], 2.0);
        assert_eq!(map.variance_spectrum[[0, 0]], 2.0);
        assert_eq!(map.stability[[0, 0]], 2.0 / (2.0 + 1e-12));
    }

    #[test]
    fn batch_errors() {
        assert!(matches!(
            stability_map(&[spec(0, array![[1.0]])], 1e-12),
            Err(Error::InsufficientBatch(1))
        ));
        let err = stability_map(&[spec(0, array![[1.0]]), spec(1, array![[1.0, 2.0]])], 1e-12)
            .unwrap_err();
        assert!(matches!(err, Error::IncompatibleSpectrogram(_)));
    }

    #[test]
    fn one_frame_three_bins_gives_three_points() {
        let map = stability_map(
            &[spec(0, array![[1.0, 2.0, 4.0]]), spec(1, array![[2.0, 2.5, 1.0]])],
            1e-12,
        )
        .unwrap();
        let fs = features_from_map(&map, &TransformConfig {
                frequency_scale: FrequencyScale::Linear,
                log1p: false,
                standardize: false,
            });
        assert_eq!(fs.n_points(), 3);
        let freqs: Vec<f64> = fs.points.iter().map(|p| p[0]).collect();
        assert_eq!(freqs, map.freq_axis);
        assert!(!fs.degenerate);
    }

    #[test]
    fn constant_stability_is_degenerate() {
        let map = stability_map(
            &[spec(0, array![[1.0, 1.0], [1.0, 1.0]]), spec(1, array![[3.0, 3.0], [3.0, 3.0]])],
            1e-12,
        )
        .unwrap();
        let fs = features_from_map(&map, &TransformConfig::default());
        assert!(fs.degenerate);
        assert_eq!(fs.transform.scales[1], 1.0);
        assert_eq!(fs.n_points(), 4);
    }

    #[test]
    fn standardized_moments() {
        let mags_a = Array2::from_shape_fn((5, 9), |(t, f)| 1.0 + (t * 7 + f * 3) as f64 % 5.0);
        let mags_b = Array2::from_shape_fn((5, 9), |(t, f)| 2.0 + (t + f * f) as f64 % 3.0);
        let map = stability_map(&[spec(0, mags_a), spec(1, mags_b)], 1e-12).unwrap();
        let fs = features_from_map(&map, &TransformConfig::default());
        let n = fs.n_points() as f64;
        for d in 0..2 {
            let mu = fs.points.iter().map(|p| p[d]).sum::<f64>() / n;
            let sd = (fs.points.iter().map(|p| (p[d] - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(mu.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }
}
