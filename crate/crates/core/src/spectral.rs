//! Short-time Fourier magnitude spectrograms.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFunction {
    #[default]
    Hann,
    Rectangular,
}

impl WindowFunction {
    /// Periodic window coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowFunction::Rectangular => vec![1.0; n],
            WindowFunction::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop: usize,
    pub window_function: WindowFunction,
    pub one_sided: bool,
}

impl StftConfig {
    /// Hann window, 50% overlap, one-sided.
    pub fn new(window_size: usize) -> Self {
        Self {
            window_size,
            hop: (window_size / 2).max(1),
            window_function: WindowFunction::Hann,
            one_sided: true,
        }
    }

    pub fn with_hop(mut self, hop: usize) -> Self {
        self.hop = hop;
        self
    }

    pub fn with_window(mut self, window_function: WindowFunction) -> Self {
        self.window_function = window_function;
        self
    }

    pub fn validate(&self, trace_length: usize) -> Result<()> {
        if self.window_size == 0 || self.hop == 0 {
            return Err(Error::Config("window size and hop must be at least 1".into()));
        }
        if self.hop > self.window_size {
            return Err(Error::Config(format!(
                "hop {} exceeds window size {}",
                self.hop, self.window_size
            )));
        }
        if self.window_size > trace_length {
            return Err(Error::Config(format!(
                "window size {} exceeds trace length {trace_length}",
                self.window_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        if self.one_sided {
            self.window_size / 2 + 1
        } else {
            self.window_size
        }
    }

    /// Number of whole frames; a trailing partial frame is dropped.
    pub fn n_frames(&self, trace_length: usize) -> usize {
        if trace_length < self.window_size {
            0
        } else {
            (trace_length - self.window_size) / self.hop + 1
        }
    }
}

/// Magnitude time-frequency matrix of one trace at one window size.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `[n_frames, n_bins]`
    pub magnitudes: Array2<f64>,
    /// Bin frequencies in Hz (cycles per sample when the rate is 1).
    pub freq_axis: Vec<f64>,
    /// Frame centre times in seconds.
    pub time_axis: Vec<f64>,
    pub window_size: usize,
    pub hop: usize,
    pub execution_id: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.magnitudes.ncols()
    }
}

/// Reusable STFT with a planned transform and cached window.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: config.window_function.coefficients(config.window_size),
            fft: planner.plan_fft_forward(config.window_size),
            config,
        }
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn magnitude(&self, trace: &Trace) -> Result<Spectrogram> {
        let cfg = &self.config;
        cfg.validate(trace.len())?;
        let n = cfg.window_size;
        let n_frames = cfg.n_frames(trace.len());
        let n_bins = cfg.n_bins();
        let rate = trace.sampling_rate();

        let mut magnitudes = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let samples = trace.samples();
        for (f, mut row) in magnitudes.rows_mut().into_iter().enumerate() {
            let start = f * cfg.hop;
            for ((b, x), w) in buf.iter_mut().zip(&samples[start..start + n]).zip(&self.window) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in row.iter_mut().zip(&buf) {
                *m = c.norm();
            }
        }

        let freq_axis = (0..n_bins).map(|k| k as f64 * rate / n as f64).collect();
        let time_axis = (0..n_frames)
            .map(|f| (f * cfg.hop) as f64 / rate + n as f64 / (2.0 * rate))
            .collect();
        Ok(Spectrogram {
            magnitudes,
            freq_axis,
            time_axis,
            window_size: n,
            hop: cfg.hop,
            execution_id: trace.execution_id(),
        })
    }
}

/// Magnitude spectrogram of one trace.
pub fn stft_magnitude(trace: &Trace, config: &StftConfig) -> Result<Spectrogram> {
    Stft::new(*config).magnitude(trace)
}

/// Direct O(n²) discrete Fourier transform, used to check the fast path.
pub fn dft_oracle(frame: &[f64]) -> Vec<Complex64> {
    let n = frame.len();
    // twiddle table indexed by (k * j) mod n keeps the phase argument exact
    let table: Vec<Complex64> = (0..n)
        .map(|m| {
            let theta = -2.0 * PI * m as f64 / n as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect();
    (0..n)
        .map(|k| {
            frame
                .iter()
                .enumerate()
                .map(|(j, &x)| table[(k * j) % n] * x)
                .sum()
        })
        .collect()
}

/// Writes a spectrogram-shaped matrix as CSV: one comment header line, a
/// frequency header row, then one row per frame prefixed by its time.
pub fn write_matrix_csv<W: Write>(
    mut sink: W,
    title: &str,
    window_size: usize,
    hop: usize,
    freq_axis: &[f64],
    time_axis: &[f64],
    values: &Array2<f64>,
) -> std::io::Result<()> {
    writeln!(
        sink,
        "# {title}; window_size={window_size}; hop={hop}; rows=time (s); columns=frequency (Hz)"
    )?;
    write!(sink, "time")?;
    for f in freq_axis {
        write!(sink, ",{f:?}")?;
    }
    writeln!(sink)?;
    for (t, row) in time_axis.iter().zip(values.rows()) {
        write!(sink, "{t:?}")?;
        for v in row {
            write!(sink, ",{v:?}")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

pub fn write_spectrogram_csv<W: Write>(sink: W, s: &Spectrogram) -> std::io::Result<()> {
    write_matrix_csv(
        sink,
        &format!("spectrogram magnitude, execution {}", s.execution_id),
        s.window_size,
        s.hop,
        &s.freq_axis,
        &s.time_axis,
        &s.magnitudes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(samples: Vec<f64>) -> Trace {
        Trace::new(samples, 1.0, 0).unwrap()
    }

    #[test]
    fn oracle_impulse_and_constant() {
        let x = dft_oracle(&[1.0, 0.0, 0.0, 0.0]);
        for c in x {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let x = dft_oracle(&[1.0, 1.0, 1.0, 1.0]);
        assert!((x[0].re - 4.0).abs() < 1e-15);
        for c in &x[1..] {
            assert!(c.norm() < 1e-14);
        }
    }

    #[test]
    fn oracle_parseval_length_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let energy: f64 = frame.iter().map(|x| x * x).sum();
        let spec: f64 = dft_oracle(&frame).iter().map(|c| c.norm_sqr()).sum::<f64>() / 7.0;
        assert!((energy - spec).abs() < 1e-12);
    }

    #[test]
    fn zero_trace_gives_zero_magnitudes() {
        let s = stft_magnitude(&trace(vec![0.0; 300]), &StftConfig::new(64)).unwrap();
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_is_leakage_free() {
        let n = 64;
        let bin = 5;
        let amp = 1.3;
        let samples = (0..640)
            .map(|i| amp * (2.0 * PI * bin as f64 * i as f64 / n as f64 + 0.4).cos())
            .collect();
        let cfg = StftConfig::new(n).with_window(WindowFunction::Rectangular);
        let s = stft_magnitude(&trace(samples), &cfg).unwrap();
        let expected = amp * n as f64 / 2.0;
        for row in s.magnitudes.rows() {
            for (k, &m) in row.iter().enumerate() {
                if k == bin {
                    assert!((m - expected).abs() / expected < 1e-9);
                } else {
                    assert!(m / expected < 1e-9, "bin {k} leaked {m}");
                }
            }
        }
    }

    #[test]
    fn shape_and_axes() {
        let cfg = StftConfig::new(138);
        let s = stft_magnitude(&trace(vec![0.5; 1000]), &cfg).unwrap();
        assert_eq!(s.n_bins(), 70);
        assert_eq!(s.n_frames(), (1000 - 138) / 69 + 1);
        assert!(s.freq_axis.windows(2).all(|w| w[1] > w[0]));
        let last = *s.freq_axis.last().unwrap();
        assert!((last - 0.5).abs() <= 1.0 / 138.0);

        let odd = stft_magnitude(&trace(vec![0.5; 100]), &StftConfig::new(7)).unwrap();
        assert_eq!(odd.n_bins(), 4);
        assert!((odd.freq_axis[3] - 0.5).abs() <= 1.0 / 7.0);
    }

    #[test]
    fn window_longer_than_trace_is_config_error() {
        let err = stft_magnitude(&trace(vec![0.0; 10]), &StftConfig::new(16)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = stft_magnitude(&trace(vec![0.0; 10]), &StftConfig::new(4).with_hop(5))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn two_sided_has_full_bins() {
        let cfg = StftConfig {
            one_sided: false,
            ..StftConfig::new(8)
        };
        let s = stft_magnitude(&trace((0..32).map(|i| i as f64).collect()), &cfg).unwrap();
        assert_eq!(s.n_bins(), 8);
    }
}
