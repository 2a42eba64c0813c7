//! Deterministic synthetic EM traces for the three reference scenarios:
//! clean AES-like round activity, a workload-correlated leakage Trojan and a
//! free-running ring oscillator.
//!
//! Frequencies are in cycles per sample when `sampling_rate` is 1.0. Every
//! random draw comes from a stream keyed by `(master_seed, component tag,
//! execution id)`, so generation order never changes the output.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{rng_for, tag};
use crate::trace::{Trace, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Baseline,
    LiHt,
    RoHt,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::LiHt => "li_ht",
            Scenario::RoHt => "ro_ht",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" | "none" | "clean" => Ok(Scenario::Baseline),
            "li_ht" | "li" => Ok(Scenario::LiHt),
            "ro_ht" | "ro" => Ok(Scenario::RoHt),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// AES-like round activity: one band-limited burst per round plus a clock tone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub n_rounds: usize,
    pub round_center_freqs: Vec<f64>,
    pub round_bandwidth: f64,
    /// RMS of each round burst before jitter.
    pub round_amplitude: f64,
    /// Half-width of the uniform per-execution, per-round amplitude factor.
    pub round_amplitude_jitter: f64,
    pub clock_freq: f64,
    pub clock_amplitude: f64,
    /// Draw fresh tone phases for every execution; otherwise phases are shared.
    pub phase_jitter: bool,
    /// Tones per band.
    pub n_tones: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        let n_rounds = 10;
        Self {
            n_rounds,
            round_center_freqs: (0..n_rounds).map(|r| 0.06 + 0.035 * r as f64).collect(),
            round_bandwidth: 0.03,
            round_amplitude: 1.0,
            round_amplitude_jitter: 0.3,
            clock_freq: 0.125,
            clock_amplitude: 0.05,
            phase_jitter: true,
            n_tones: 32,
        }
    }
}

impl BaselineParams {
    fn validate(&self, sampling_rate: f64) -> Result<()> {
        let nyq = sampling_rate / 2.0;
        if self.n_rounds == 0 || self.round_center_freqs.len() != self.n_rounds {
            return Err(Error::Config(format!(
                "n_rounds = {} but {} round centre frequencies given",
                self.n_rounds,
                self.round_center_freqs.len()
            )));
        }
        for (i, f) in self.round_center_freqs.iter().enumerate() {
            if !(*f > 0.0 && *f < nyq) {
                return Err(Error::Config(format!("round frequency {f} not in (0, {nyq})")));
            }
            if self.round_center_freqs[..i].contains(f) {
                return Err(Error::Config(format!("round frequency {f} repeated")));
            }
        }
        if self.round_bandwidth < 0.0 || self.n_tones == 0 {
            return Err(Error::Config("round bandwidth must be >= 0 and n_tones >= 1".into()));
        }
        if self.clock_freq < 0.0 || self.clock_freq >= nyq {
            return Err(Error::Config(format!("clock frequency {} not below Nyquist", self.clock_freq)));
        }
        Ok(())
    }
}

/// Leakage Trojan: a fixed band-limited carrier gated by a per-execution chip sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiParams {
    pub carrier_center_freq: f64,
    pub carrier_bandwidth: f64,
    /// RMS of the unmodulated carrier.
    pub carrier_amplitude: f64,
    /// Samples per chip.
    pub modulation_chip_length: usize,
    pub modulation_depth: f64,
    /// Added to the execution id to key the chip generator.
    pub prng_seed_offset: u64,
    pub n_tones: usize,
}

impl Default for LiParams {
    fn default() -> Self {
        Self {
            carrier_center_freq: 0.25,
            carrier_bandwidth: 0.35,
            carrier_amplitude: 4.0,
            modulation_chip_length: 32,
            modulation_depth: 1.0,
            prng_seed_offset: 0,
            n_tones: 8,
        }
    }
}

impl LiParams {
    fn validate(&self, sampling_rate: f64) -> Result<()> {
        let nyq = sampling_rate / 2.0;
        if self.carrier_center_freq + self.carrier_bandwidth / 2.0 >= nyq
            || self.carrier_center_freq - self.carrier_bandwidth / 2.0 < 0.0
        {
            return Err(Error::Config("LI carrier band must lie inside [0, Nyquist)".into()));
        }
        if self.modulation_chip_length == 0 || self.n_tones == 0 {
            return Err(Error::Config("chip length and n_tones must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.modulation_depth) {
            return Err(Error::Config("modulation depth must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ring-oscillator Trojan: a workload-independent tone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoParams {
    pub ro_freq: f64,
    pub ro_amplitude: f64,
    /// Standard deviation of the relative per-execution frequency offset.
    pub freq_jitter: f64,
}

impl Default for RoParams {
    fn default() -> Self {
        Self {
            ro_freq: 0.05,
            ro_amplitude: 2.0,
            freq_jitter: 1e-4,
        }
    }
}

impl RoParams {
    fn validate(&self, sampling_rate: f64) -> Result<()> {
        if !(self.ro_freq > 0.0 && self.ro_freq < sampling_rate / 2.0) {
            return Err(Error::Config(format!("RO frequency {} not below Nyquist", self.ro_freq)));
        }
        if !(self.ro_amplitude > 0.0) {
            return Err(Error::Config("RO amplitude must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_executions: usize,
    pub trace_length: usize,
    pub sampling_rate: f64,
    pub master_seed: u64,
    /// Standard deviation of additive white Gaussian noise.
    pub noise_sigma: f64,
    #[serde(default)]
    pub baseline: BaselineParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub li: Option<LiParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ro: Option<RoParams>,
}

impl ScenarioConfig {
    /// Desk-scale defaults: 100 executions of 16384 samples at unit rate.
    pub fn default_for(scenario: Scenario, master_seed: u64) -> Self {
        Self {
            scenario,
            n_executions: 100,
            trace_length: 16384,
            sampling_rate: 1.0,
            master_seed,
            noise_sigma: 0.1,
            baseline: BaselineParams::default(),
            li: (scenario == Scenario::LiHt).then(LiParams::default),
            ro: (scenario == Scenario::RoHt).then(RoParams::default),
        }
    }

    /// Fills in default Trojan parameters for the scenario when absent.
    pub fn with_scenario_defaults(mut self) -> Self {
        if self.scenario == Scenario::LiHt && self.li.is_none() {
            self.li = Some(LiParams::default());
        }
        if self.scenario == Scenario::RoHt && self.ro.is_none() {
            self.ro = Some(RoParams::default());
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_executions < 2 {
            return Err(Error::Config("at least 2 executions required".into()));
        }
        if self.trace_length == 0 {
            return Err(Error::Config("trace length must be positive".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return Err(Error::Config("sampling rate must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        self.baseline.validate(self.sampling_rate)?;
        match (self.scenario, &self.li, &self.ro) {
            (Scenario::Baseline, None, None) => {}
            (Scenario::LiHt, Some(li), None) => li.validate(self.sampling_rate)?,
            (Scenario::RoHt, None, Some(ro)) => ro.validate(self.sampling_rate)?,
            _ => {
                return Err(Error::Config(format!(
                    "scenario {} requires exactly its own Trojan parameters",
                    self.scenario
                )))
            }
        }
        Ok(())
    }

    /// Fails when the trace is shorter than four of the largest window.
    pub fn check_windows(&self, largest_window: usize) -> Result<()> {
        if self.trace_length < 4 * largest_window {
            return Err(Error::Config(format!(
                "trace length {} is shorter than 4 x window {largest_window}",
                self.trace_length
            )));
        }
        Ok(())
    }
}

/// Sum of `n_tones` equally spaced tones across `[centre - bw/2, centre + bw/2]`.
struct ToneBank {
    freqs: Vec<f64>,
    phases: Vec<f64>,
    amplitude: f64,
}

impl ToneBank {
    fn new<R: Rng>(centre: f64, bandwidth: f64, n_tones: usize, rms: f64, rate: f64, rng: &mut R) -> Self {
        let freqs = (0..n_tones)
            .map(|i| {
                let offset = if n_tones == 1 {
                    0.0
                } else {
                    bandwidth * (i as f64 / (n_tones - 1) as f64 - 0.5)
                };
                (centre + offset) / rate
            })
            .collect();
        let phases = (0..n_tones).map(|_| rng.gen::<f64>() * 2.0 * PI).collect();
        Self {
            freqs,
            phases,
            amplitude: rms * (2.0 / n_tones as f64).sqrt(),
        }
    }

    fn sample(&self, t: f64) -> f64 {
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(f, p)| (2.0 * PI * f * t + p).cos())
            .sum::<f64>()
            * self.amplitude
    }
}

/// Clean round activity for one execution.
pub fn baseline_trace(
    params: &BaselineParams,
    length: usize,
    rate: f64,
    master_seed: u64,
    execution_id: usize,
) -> Vec<f64> {
    let exec = execution_id as u64;
    let mut amp_rng = rng_for(master_seed, &[tag::BASELINE, 0, exec]);
    let mut phase_rng = if params.phase_jitter {
        rng_for(master_seed, &[tag::BASELINE, 1, exec])
    } else {
        rng_for(master_seed, &[tag::BASELINE, 1])
    };
    let seg_len = length.div_ceil(params.n_rounds).max(1);
    let mut out = vec![0.0; length];
    for (r, &fc) in params.round_center_freqs.iter().enumerate() {
        let jitter = if params.round_amplitude_jitter > 0.0 {
            amp_rng.gen_range(-1.0..=1.0) * params.round_amplitude_jitter
        } else {
            0.0
        };
        let bank = ToneBank::new(
            fc,
            params.round_bandwidth,
            params.n_tones,
            params.round_amplitude * (1.0 + jitter),
            rate,
            &mut phase_rng,
        );
        let start = (r * seg_len).min(length);
        let end = ((r + 1) * seg_len).min(length);
        for (i, v) in out[start..end].iter_mut().enumerate() {
            *v += bank.sample((start + i) as f64);
        }
    }
    if params.clock_amplitude != 0.0 {
        let w = 2.0 * PI * params.clock_freq / rate;
        for (i, v) in out.iter_mut().enumerate() {
            *v += params.clock_amplitude * (w * i as f64).sin();
        }
    }
    out
}

/// Chip multipliers for one execution, one per sample.
pub fn li_envelope(params: &LiParams, length: usize, master_seed: u64, execution_id: usize) -> Vec<f64> {
    let key = params.prng_seed_offset.wrapping_add(execution_id as u64);
    let mut chips = rng_for(master_seed, &[tag::LI_CHIPS, key]);
    let depth = params.modulation_depth;
    let mut out = Vec::with_capacity(length);
    while out.len() < length {
        let bit = if chips.gen::<bool>() { 1.0 } else { 0.0 };
        let level = (1.0 - depth) + 2.0 * depth * bit;
        let n = params.modulation_chip_length.min(length - out.len());
        out.extend(std::iter::repeat(level).take(n));
    }
    out
}

/// Adds the chip-modulated leakage carrier.
pub fn add_li_component(
    samples: &mut [f64],
    params: &LiParams,
    rate: f64,
    master_seed: u64,
    execution_id: usize,
) {
    // carrier realization is shared by all executions
    let mut carrier_rng = rng_for(master_seed, &[tag::LI_CARRIER]);
    let carrier = ToneBank::new(
        params.carrier_center_freq,
        params.carrier_bandwidth,
        params.n_tones,
        params.carrier_amplitude,
        rate,
        &mut carrier_rng,
    );
    let envelope = li_envelope(params, samples.len(), master_seed, execution_id);
    for (i, (v, d)) in samples.iter_mut().zip(envelope).enumerate() {
        *v += d * carrier.sample(i as f64);
    }
}

/// Adds the free-running oscillator tone with per-execution phase and frequency offset.
pub fn add_ro_component(samples: &mut [f64], params: &RoParams, rate: f64, master_seed: u64, execution_id: usize) {
    if params.ro_amplitude == 0.0 {
        return;
    }
    let mut rng = rng_for(master_seed, &[tag::RO, execution_id as u64]);
    let jitter: f64 = StandardNormal.sample(&mut rng);
    let phase = rng.gen::<f64>() * 2.0 * PI;
    let w = 2.0 * PI * params.ro_freq * (1.0 + params.freq_jitter * jitter) / rate;
    for (i, v) in samples.iter_mut().enumerate() {
        *v += params.ro_amplitude * (w * i as f64 + phase).sin();
    }
}

/// One execution of the configured scenario.
pub fn generate_execution(config: &ScenarioConfig, execution_id: usize) -> Result<Trace> {
    let rate = config.sampling_rate;
    let seed = config.master_seed;
    let mut samples = baseline_trace(&config.baseline, config.trace_length, rate, seed, execution_id);
    if let Some(li) = &config.li {
        add_li_component(&mut samples, li, rate, seed, execution_id);
    }
    if let Some(ro) = &config.ro {
        add_ro_component(&mut samples, ro, rate, seed, execution_id);
    }
    if config.noise_sigma > 0.0 {
        let mut rng = rng_for(seed, &[tag::NOISE, execution_id as u64]);
        for v in &mut samples {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += config.noise_sigma * z;
        }
    }
    Ok(Trace::new(samples, rate, execution_id)?.with_label(format!("synthetic:{}", config.scenario)))
}

/// Generates the full repeated-execution set.
pub fn generate(config: &ScenarioConfig) -> Result<TraceSet> {
    config.validate()?;
    let traces = (0..config.n_executions)
        .into_par_iter()
        .map(|e| generate_execution(config, e))
        .collect::<Result<Vec<_>>>()?;
    TraceSet::new(traces)
}
