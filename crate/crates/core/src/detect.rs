//! Rule-based verdicts over a persistence profile, plus report rendering.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persistence::{AnalysisConfig, PersistenceProfile};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Decision boundaries. Calibrated on the synthetic scenarios; real captures
/// need their own calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionThresholds {
    pub sat_high: f64,
    pub sat_low: f64,
    pub var_low: f64,
    /// Minimum spread of the saturation curve for the decay rule.
    pub decay_min: f64,
    /// Rank-correlation ceiling for a decaying curve.
    pub trend_tau_max: f64,
}

impl Default for DetectionThresholds {
    fn default() -> Self {
        Self {
            sat_high: 0.7,
            sat_low: 0.3,
            var_low: 1.0,
            decay_min: 0.3,
            trend_tau_max: -0.3,
        }
    }
}

impl DetectionThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sat_high, self.sat_low, self.var_low, self.decay_min, self.trend_tau_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        if !(0.0 <= self.sat_low && self.sat_low < self.sat_high && self.sat_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= sat_low < sat_high <= 1, got sat_low={} sat_high={}",
                self.sat_low, self.sat_high
            )));
        }
        if self.var_low < 0.0 || self.decay_min < 0.0 {
            return Err(Error::Config("var_low and decay_min must be >= 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.trend_tau_max) {
            return Err(Error::Config("trend_tau_max must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NoPersistentAnomaly,
    PersistentCorrelated,
    StationaryPeriodic,
    Inconclusive,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::NoPersistentAnomaly => "no_persistent_anomaly",
            Verdict::PersistentCorrelated => "persistent_correlated",
            Verdict::StationaryPeriodic => "stationary_periodic",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Kendall rank correlation with tie correction (tau-b).
///
/// Returns `None` when either sequence is constant or shorter than 2, where
/// the coefficient is undefined.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "kendall_tau needs paired samples");
    let n = x.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[j] - x[i];
            let dy = y[j] - y[i];
            match (dx == 0.0, dy == 0.0) {
                (true, true) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (true, false) => ties_x += 1,
                (false, true) => ties_y += 1,
                (false, false) if (dx > 0.0) == (dy > 0.0) => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2) as i64;
    let denom = (((pairs - ties_x) * (pairs - ties_y)) as f64).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub window_sizes: Vec<usize>,
    pub saturation_curve: Vec<f64>,
    pub mean_saturation: f64,
    pub min_saturation: f64,
    pub max_saturation: f64,
    /// Kendall tau-b of saturation against window size; 0 when undefined.
    pub saturation_tau: f64,
    /// False when fewer than 3 windows or a constant curve left tau undefined.
    pub tau_defined: bool,
    pub variance_curve: Vec<f64>,
    pub mean_variance: f64,
    pub median_curve: Vec<f64>,
    /// Every selected order at every window is 1.
    pub all_minimal: bool,
}

pub fn trend_statistics(profile: &PersistenceProfile) -> Evidence {
    let scales = &profile.scale_profiles;
    let window_sizes: Vec<usize> = scales.iter().map(|s| s.window_size).collect();
    let sat: Vec<f64> = scales.iter().map(|s| s.saturation_ratio).collect();
    let var: Vec<f64> = scales.iter().map(|s| s.within_window_variance).collect();
    let n = sat.len() as f64;

    let tau = if sat.len() >= 3 {
        let w: Vec<f64> = window_sizes.iter().map(|&w| w as f64).collect();
        kendall_tau(&w, &sat)
    } else {
        None
    };

    Evidence {
        mean_saturation: sat.iter().sum::<f64>() / n,
        min_saturation: sat.iter().copied().fold(f64::INFINITY, f64::min),
        max_saturation: sat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        saturation_tau: tau.unwrap_or(0.0),
        tau_defined: tau.is_some(),
        mean_variance: var.iter().sum::<f64>() / n,
        median_curve: scales.iter().map(|s| s.median_complexity).collect(),
        all_minimal: scales.iter().all(|s| s.selected_orders.iter().all(|&k| k == 1)),
        window_sizes,
        saturation_curve: sat,
        variance_curve: var,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema_version: u32,
    pub verdict: Verdict,
    /// Why the verdict fired, in words.
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub evidence: Evidence,
    pub thresholds: DetectionThresholds,
    pub k_max: usize,
    pub profile_fingerprint: String,
    pub analysis: AnalysisConfig,
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))
    }
}

/// Applies the rules in order: anchored, decaying, clean, otherwise inconclusive.
pub fn classify(profile: &PersistenceProfile, thresholds: &DetectionThresholds) -> DetectionReport {
    let ev = trend_statistics(profile);
    let t = thresholds;
    let mut notes = Vec::new();
    if !ev.tau_defined {
        notes.push("saturation trend undefined (fewer than 3 windows or constant curve); tau taken as 0".to_string());
    }
    let first_sat = ev.saturation_curve[0];

    let (verdict, rationale) = if ev.all_minimal {
        notes.push("every batch selected a single component; features carry no structure".to_string());
        (Verdict::NoPersistentAnomaly, "all selected orders are 1".to_string())
    } else if ev.min_saturation >= t.sat_high && ev.mean_variance <= t.var_low {
        (
            Verdict::PersistentCorrelated,
            format!(
                "saturation >= {} at every window (min {:.3}) with mean variance {:.3} <= {}",
                t.sat_high, ev.min_saturation, ev.mean_variance, t.var_low
            ),
        )
    } else if first_sat >= t.sat_high
        && ev.max_saturation - ev.min_saturation >= t.decay_min
        && ev.saturation_tau <= t.trend_tau_max
    {
        (
            Verdict::StationaryPeriodic,
            format!(
                "saturation {:.3} at the smallest window decays by {:.3} with tau {:.3}",
                first_sat,
                ev.max_saturation - ev.min_saturation,
                ev.saturation_tau
            ),
        )
    } else if ev.mean_saturation <= t.sat_low {
        (
            Verdict::NoPersistentAnomaly,
            format!("mean saturation {:.3} <= {}", ev.mean_saturation, t.sat_low),
        )
    } else {
        (Verdict::Inconclusive, "no rule matched".to_string())
    };

    DetectionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        verdict,
        rationale,
        notes,
        evidence: ev,
        thresholds: *t,
        k_max: profile.k_max,
        profile_fingerprint: profile.config_fingerprint.clone(),
        analysis: profile.config.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Svg => "svg",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Writes the report. The CSV and SVG forms show the metric curves of `profile`.
pub fn render_report<W: Write>(
    report: &DetectionReport,
    profile: &PersistenceProfile,
    format: ReportFormat,
    mut sink: W,
) -> Result<()> {
    let io = |e| Error::io("<report sink>", e);
    match format {
        ReportFormat::Json => {
            sink.write_all(report.to_json().as_bytes()).map_err(io)?;
            sink.write_all(b"\n").map_err(io)?;
        }
        ReportFormat::Csv => profile.write_csv(&mut sink)?,
        ReportFormat::Svg => sink.write_all(render_svg(report, profile).as_bytes()).map_err(io)?,
    }
    sink.flush().map_err(io)
}

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 50.0;

fn render_svg(report: &DetectionReport, profile: &PersistenceProfile) -> String {
    let windows: Vec<f64> = profile.scale_profiles.iter().map(|s| s.window_size as f64).collect();
    let k_max = profile.k_max as f64;
    let panels: [(&str, &str, Vec<f64>, f64); 3] = [
        ("saturation", "saturation ratio", profile.saturation_curve(), 1.0),
        (
            "variance",
            "within-window variance",
            profile.scale_profiles.iter().map(|s| s.within_window_variance).collect(),
            0.0,
        ),
        (
            "median",
            "median complexity",
            profile.scale_profiles.iter().map(|s| s.median_complexity).collect(),
            k_max,
        ),
    ];
    let width = 3.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.5 * MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-size="14" font-weight="bold">verdict: {} (k_max = {})</text>"#,
        report.verdict, profile.k_max
    );
    for (i, (id, label, values, floor_max)) in panels.iter().enumerate() {
        let x0 = MARGIN + i as f64 * (PANEL_W + MARGIN);
        panel(&mut s, id, label, x0, 1.4 * MARGIN, &windows, values, *floor_max);
    }
    s.push_str("</svg>\n");
    s
}

#[allow(clippy::too_many_arguments)]
fn panel(s: &mut String, id: &str, label: &str, x0: f64, y0: f64, windows: &[f64], values: &[f64], y_top_min: f64) {
    // Log-scaled window axis; the y axis starts at 0.
    let lx: Vec<f64> = windows.iter().map(|w| w.log2()).collect();
    let (xmin, xmax) = (lx[0], lx[lx.len() - 1]);
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let ymax = values.iter().copied().fold(y_top_min, f64::max);
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let px = |v: f64| x0 + (v - xmin) / xspan * PANEL_W;
    let py = |v: f64| y0 + PANEL_H - v / ymax * PANEL_H;

    let _ = writeln!(s, r#"<g class="chart" id="{id}">"#);
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
    );
    let points: Vec<String> = lx.iter().zip(values).map(|(&x, &v)| format!("{:.2},{:.2}", px(x), py(v))).collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        points.join(" ")
    );
    for (&x, &v) in lx.iter().zip(values) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, px(x), py(v));
    }
    for (&x, &w) in lx.iter().zip(windows) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{w}</text>"#,
            px(x),
            y0 + PANEL_H + 14.0
        );
    }
    for frac in [0.0, 0.5, 1.0] {
        let v = ymax * frac;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            py(v) + 4.0,
            trim_number(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">window size (samples)</text>"#,
        x0 + PANEL_W / 2.0,
        y0 + PANEL_H + 30.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-weight="bold">{label}</text>"#,
        x0 + PANEL_W / 2.0,
        y0 - 6.0
    );
    s.push_str("</g>\n");
}

fn trim_number(v: f64) -> String {
    let t = format!("{v:.2}");
    t.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persistence::ScaleProfile;

    pub(crate) fn profile_from(sat: &[f64], var: f64) -> PersistenceProfile {
        let windows = [64, 128, 256, 512, 1024, 2048];
        let scale_profiles = sat
            .iter()
            .zip(windows)
            .map(|(&s, w)| ScaleProfile {
                window_size: w,
                selected_orders: vec![10, 9],
                batches: vec![0, 1],
                failed_batches: vec![],
                saturation_ratio: s,
                within_window_variance: var,
                median_complexity: 9.5,
            })
            .collect();
        PersistenceProfile {
            schema_version: 1,
            k_max: 10,
            config_fingerprint: "test".into(),
            config: AnalysisConfig::default(),
            n_executions: 20,
            trace_length: 8192,
            sampling_rate: 1.0,
            scale_profiles,
        }
    }

    #[test]
    fn tau_examples() {
        let w = [64.0, 128.0, 256.0, 512.0];
        assert_eq!(kendall_tau(&w, &[1.0, 0.8, 0.5, 0.2]), Some(-1.0));
        assert_eq!(kendall_tau(&w[..3], &[0.9, 0.9, 0.9]), None);
        let ev = trend_statistics(&profile_from(&[0.9, 0.9, 0.9], 0.1));
        assert_eq!(ev.saturation_tau, 0.0);
        assert!(!ev.tau_defined);
    }

    #[test]
    fn tau_b_with_ties() {
        // Two tied pairs in y; hand-computed tau-b.
        let tau = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((tau - (-4.0 / (6.0f64 * 4.0).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn rule_examples() {
        let r = classify(&profile_from(&[0.9, 0.9, 1.0, 0.9], 0.2), &DetectionThresholds::default());
        assert_eq!(r.verdict, Verdict::PersistentCorrelated);
        let r = classify(&profile_from(&[1.0, 0.9, 0.5, 0.1], 2.0), &DetectionThresholds::default());
        assert_eq!(r.evidence.saturation_tau, -1.0);
        assert_eq!(r.verdict, Verdict::StationaryPeriodic);
        let r = classify(&profile_from(&[0.1, 0.0, 0.2, 0.1], 3.0), &DetectionThresholds::default());
        assert_eq!(r.verdict, Verdict::NoPersistentAnomaly);
        let r = classify(&profile_from(&[0.5, 0.5, 0.6, 0.5], 3.0), &DetectionThresholds::default());
        assert_eq!(r.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn all_minimal_is_clean() {
        let mut p = profile_from(&[0.0, 0.0, 0.0], 0.0);
        for s in &mut p.scale_profiles {
            s.selected_orders = vec![1, 1];
            s.median_complexity = 1.0;
        }
        let r = classify(&p, &DetectionThresholds::default());
        assert_eq!(r.verdict, Verdict::NoPersistentAnomaly);
        assert!(r.evidence.all_minimal);
        assert!(r.notes.iter().any(|n| n.contains("single component")));
    }

    #[test]
    fn threshold_validation() {
        DetectionThresholds::default().validate().unwrap();
        let bad = DetectionThresholds {
            sat_low: 0.8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
