//! Trace data model, CSV ingestion and per-trace normalization.
//!
//! A [`Trace`] is one EM capture of a single execution. A [`TraceSet`] is the
//! corpus of repeated executions of a fixed workload; all members share a
//! length and a sampling rate. Traces are assumed trigger-aligned, so building
//! a set only truncates to the shortest member.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance when comparing sampling rates of traces in one set.
pub const RATE_TOLERANCE: f64 = 1e-4;

/// Maximum allowed deviation of a time step from the median step, relative to the median.
pub const TIME_STEP_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    samples: Vec<f64>,
    sampling_rate: f64,
    execution_id: usize,
    source_label: Option<String>,
}

impl Trace {
    pub fn new(samples: Vec<f64>, sampling_rate: f64, execution_id: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput(format!(
                "trace for execution {execution_id} has no samples"
            )));
        }
        if !(sampling_rate.is_finite() && sampling_rate > 0.0) {
            return Err(Error::InvalidTrace(format!(
                "sampling rate must be positive and finite, got {sampling_rate}"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTrace(format!(
                "non-finite sample at index {i} of execution {execution_id}"
            )));
        }
        Ok(Self {
            samples,
            sampling_rate,
            execution_id,
            source_label: None,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.source_label = Some(label.into());
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn execution_id(&self) -> usize {
        self.execution_id
    }

    pub fn source_label(&self) -> Option<&str> {
        self.source_label.as_deref()
    }

    fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sampling_rate: self.sampling_rate,
            execution_id: self.execution_id,
            source_label: self.source_label.clone(),
        }
    }
}

/// Repeated-execution corpus under a fixed workload.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    traces: Vec<Trace>,
    trace_length: usize,
    sampling_rate: f64,
}

impl TraceSet {
    /// Builds a set from traces that already share length and rate.
    pub fn new(traces: Vec<Trace>) -> Result<Self> {
        if traces.len() < 2 {
            return Err(Error::InsufficientExecutions {
                needed: 2,
                got: traces.len(),
            });
        }
        let trace_length = traces[0].len();
        let sampling_rate = traces[0].sampling_rate();
        for t in &traces {
            if t.len() != trace_length {
                return Err(Error::IncompatibleSet(format!(
                    "execution {} has {} samples, expected {trace_length}",
                    t.execution_id(),
                    t.len()
                )));
            }
            if t.sampling_rate() != sampling_rate {
                return Err(Error::IncompatibleSet(format!(
                    "execution {} sampled at {} Hz, expected {sampling_rate} Hz",
                    t.execution_id(),
                    t.sampling_rate()
                )));
            }
        }
        Ok(Self {
            traces,
            trace_length,
            sampling_rate,
        })
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn n_executions(&self) -> usize {
        self.traces.len()
    }

    pub fn trace_length(&self) -> usize {
        self.trace_length
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    /// Trace with the given execution id, if present.
    pub fn by_execution(&self, execution_id: usize) -> Option<&Trace> {
        self.traces
            .iter()
            .find(|t| t.execution_id() == execution_id)
    }
}

/// Column and unit layout of a trace CSV file. Doubles as the on-disk
/// metadata sidecar written next to emitted trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvLayout {
    /// Zero-based column holding the amplitude.
    pub amplitude_column: usize,
    /// Zero-based column holding the sample time in seconds, if any.
    pub time_column: Option<usize>,
    /// Leading lines to skip.
    pub header_rows: usize,
    /// Multiplier converting the stored amplitude to volts.
    pub unit_scale: f64,
    /// Sampling rate in Hz; required when there is no time column.
    pub sampling_rate: Option<f64>,
}

impl Default for CsvLayout {
    fn default() -> Self {
        Self {
            amplitude_column: 0,
            time_column: None,
            header_rows: 0,
            unit_scale: 1.0,
            sampling_rate: None,
        }
    }
}

impl CsvLayout {
    /// Layout with a time column in column 0 and amplitude in column 1.
    pub fn timed(header_rows: usize) -> Self {
        Self {
            amplitude_column: 1,
            time_column: Some(0),
            header_rows,
            ..Self::default()
        }
    }

    /// Single amplitude column at a known rate.
    pub fn amplitude_only(sampling_rate: f64) -> Self {
        Self {
            sampling_rate: Some(sampling_rate),
            ..Self::default()
        }
    }
}

/// Parses one trace from comma-separated text.
pub fn load_trace_csv<R: Read>(source: R, layout: &CsvLayout) -> Result<Trace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut samples = Vec::new();
    let mut times = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut skipped = 0usize;
    loop {
        let more = reader.read_record(&mut record).map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if skipped < layout.header_rows {
            skipped += 1;
            continue;
        }
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let field = |col: usize, what: &str| -> Result<f64> {
            let raw = record.get(col).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing {what} column {col}"),
            })?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric {what} value {raw:?}"),
            })
        };
        samples.push(field(layout.amplitude_column, "amplitude")? * layout.unit_scale);
        if let Some(tc) = layout.time_column {
            times.push(field(tc, "time")?);
        }
    }

    if samples.is_empty() {
        return Err(Error::EmptyInput("no data rows".into()));
    }

    let sampling_rate = match layout.time_column {
        Some(_) if times.len() >= 2 => rate_from_times(&times)?,
        _ => layout.sampling_rate.ok_or_else(|| {
            Error::Config("sampling rate unknown: no usable time column and none given".into())
        })?,
    };
    Trace::new(samples, sampling_rate, 0)
}

fn rate_from_times(times: &[f64]) -> Result<f64> {
    let mut deltas: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let median = crate::persistence::median(&mut deltas);
    if !(median.is_finite() && median > 0.0) {
        return Err(Error::NonUniformSampling {
            median,
            deviation: f64::NAN,
        });
    }
    let deviation = deltas
        .iter()
        .map(|d| (d - median).abs())
        .fold(0.0, f64::max);
    if deviation > TIME_STEP_TOLERANCE * median {
        return Err(Error::NonUniformSampling { median, deviation });
    }
    Ok(1.0 / median)
}

/// Loads a single trace file.
pub fn load_trace_file(path: &Path, layout: &CsvLayout) -> Result<Trace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_trace_csv(BufReader::new(file), layout)
        .map(|t| t.with_label(path.display().to_string()))
        .map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
}

/// Loads every file in `manifest`, truncating all traces to the shortest
/// one. Execution ids follow manifest order.
pub fn load_trace_set(manifest: &[PathBuf], layout: &CsvLayout) -> Result<TraceSet> {
    if manifest.len() < 2 {
        return Err(Error::InsufficientExecutions {
            needed: 2,
            got: manifest.len(),
        });
    }
    let loaded: Vec<Trace> = manifest
        .par_iter()
        .map(|p| load_trace_file(p, layout))
        .collect::<Result<_>>()?;
    assemble(loaded)
}

/// Truncates to the common length, checks rates and assigns execution ids by position.
pub fn assemble(traces: Vec<Trace>) -> Result<TraceSet> {
    if traces.len() < 2 {
        return Err(Error::InsufficientExecutions {
            needed: 2,
            got: traces.len(),
        });
    }
    let reference_rate = traces[0].sampling_rate();
    let min_len = traces.iter().map(Trace::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(traces.len());
    for (id, mut t) in traces.into_iter().enumerate() {
        let rel = (t.sampling_rate() - reference_rate).abs() / reference_rate;
        if rel > RATE_TOLERANCE {
            return Err(Error::IncompatibleSet(format!(
                "trace {id} sampled at {} Hz, reference {} Hz",
                t.sampling_rate(),
                reference_rate
            )));
        }
        t.samples.truncate(min_len);
        t.sampling_rate = reference_rate;
        t.execution_id = id;
        out.push(t);
    }
    TraceSet::new(out)
}

/// Sorted `*.csv` files in a directory.
pub fn manifest_from_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    None,
    #[default]
    PerTraceZscore,
}

/// Per-trace z-score (population standard deviation) or identity.
pub fn normalize_traces(set: &TraceSet, mode: NormalizeMode) -> Result<TraceSet> {
    match mode {
        NormalizeMode::None => Ok(set.clone()),
        NormalizeMode::PerTraceZscore => {
            let traces = set
                .traces()
                .iter()
                .map(|t| {
                    let n = t.len() as f64;
                    let mean = t.samples().iter().sum::<f64>() / n;
                    let var = t.samples().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    let sd = var.sqrt();
                    if !(sd > 0.0) || sd <= mean.abs() * 1e-14 {
                        return Err(Error::DegenerateTrace {
                            execution_id: t.execution_id(),
                        });
                    }
                    Ok(t.with_samples(t.samples().iter().map(|x| (x - mean) / sd).collect()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TraceSet {
                traces,
                trace_length: set.trace_length,
                sampling_rate: set.sampling_rate,
            })
        }
    }
}

/// Writes `time_s,amplitude` rows with a single header line. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_trace_csv<W: Write>(trace: &Trace, mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "time_s,amplitude")?;
    let dt = 1.0 / trace.sampling_rate();
    for (i, v) in trace.samples().iter().enumerate() {
        writeln!(sink, "{:?},{:?}", i as f64 * dt, v)?;
    }
    Ok(())
}

/// File name used for an execution when emitting a set.
pub fn trace_file_name(execution_id: usize) -> String {
    format!("exec_{execution_id:05}.csv")
}

/// Sidecar file name inside an emitted trace directory.
pub const SIDECAR_NAME: &str = "traceset.json";

/// Metadata written next to emitted trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sampling_rate: f64,
    pub n_executions: usize,
    pub trace_length: usize,
    pub layout: CsvLayout,
    /// Generator configuration when the set is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<crate::synthgen::ScenarioConfig>,
}

/// Writes one CSV per execution plus the sidecar.
pub fn write_trace_set(
    set: &TraceSet,
    dir: &Path,
    scenario: Option<&crate::synthgen::ScenarioConfig>,
) -> Result<Sidecar> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    set.traces().par_iter().try_for_each(|t| {
        let path = dir.join(trace_file_name(t.execution_id()));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_trace_csv(t, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))
    })?;
    let sidecar = Sidecar {
        sampling_rate: set.sampling_rate(),
        n_executions: set.n_executions(),
        trace_length: set.trace_length(),
        layout: CsvLayout {
            sampling_rate: Some(set.sampling_rate()),
            ..CsvLayout::timed(1)
        },
        scenario: scenario.cloned(),
    };
    let path = dir.join(SIDECAR_NAME);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}

pub fn read_sidecar(dir: &Path) -> Result<Sidecar> {
    let path = dir.join(SIDECAR_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

/// Loads a directory written by [`write_trace_set`] (or any directory with a sidecar).
pub fn load_trace_dir(dir: &Path) -> Result<TraceSet> {
    let sidecar = read_sidecar(dir)?;
    let manifest = manifest_from_dir(dir)?;
    load_trace_set(&manifest, &sidecar.layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timed_rows_give_reciprocal_rate() {
        let t = load_trace_csv("0,0.5\n1e-9,0.7\n2e-9,0.6\n".as_bytes(), &CsvLayout::timed(0))
            .unwrap();
        assert_eq!(t.samples(), &[0.5, 0.7, 0.6]);
        assert!((t.sampling_rate() - 1e9).abs() / 1e9 < 1e-9);
    }

    #[test]
    fn amplitude_column_passes_rate_through() {
        let t = load_trace_csv("1.0\n-1.0\n".as_bytes(), &CsvLayout::amplitude_only(125e6))
            .unwrap();
        assert_eq!(t.samples(), &[1.0, -1.0]);
        assert_eq!(t.sampling_rate(), 125e6);
    }

    #[test]
    fn bad_amplitude_names_line() {
        let err = load_trace_csv("0,0.5\n0,abc\n".as_bytes(), &CsvLayout::timed(0)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_rows_are_skipped_and_unit_scale_applied() {
        let layout = CsvLayout {
            header_rows: 2,
            unit_scale: 1e-3,
            ..CsvLayout::timed(0)
        };
        let t = load_trace_csv("Time,Channel A\n(s),(mV)\n0,500\n1,250\n".as_bytes(), &layout)
            .unwrap();
        assert_eq!(t.samples(), &[0.5, 0.25]);
        assert_eq!(t.sampling_rate(), 1.0);
    }

    #[test]
    fn jittered_time_column_is_rejected() {
        let err =
            load_trace_csv("0,1\n1,1\n2.5,1\n3.5,1\n".as_bytes(), &CsvLayout::timed(0)).unwrap_err();
        assert!(matches!(err, Error::NonUniformSampling { .. }));
    }

    #[test]
    fn empty_payload() {
        let err = load_trace_csv("".as_bytes(), &CsvLayout::amplitude_only(1.0)).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
        let err = load_trace_csv("hdr\n".as_bytes(), &CsvLayout {
            header_rows: 1,
            ..CsvLayout::amplitude_only(1.0)
        })
        .unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn trace_rejects_non_finite() {
        assert!(Trace::new(vec![1.0, f64::NAN], 1.0, 0).is_err());
        assert!(Trace::new(vec![1.0], 0.0, 0).is_err());
        assert!(Trace::new(vec![], 1.0, 0).is_err());
    }

    fn tr(samples: &[f64], id: usize) -> Trace {
        Trace::new(samples.to_vec(), 1.0, id).unwrap()
    }

    #[test]
    fn assemble_truncates_to_shortest() {
        let set = assemble(vec![
            tr(&[1.0; 1000], 0),
            tr(&[1.0; 1000], 0),
            tr(&[1.0; 998], 0),
        ])
        .unwrap();
        assert_eq!(set.trace_length(), 998);
        assert_eq!(set.n_executions(), 3);
        let ids: Vec<_> = set.traces().iter().map(Trace::execution_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn single_trace_is_insufficient() {
        let err = assemble(vec![tr(&[1.0, 2.0], 0)]).unwrap_err();
        assert!(matches!(err, Error::InsufficientExecutions { got: 1, .. }));
        let err = load_trace_set(&[PathBuf::from("x.csv")], &CsvLayout::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientExecutions { .. }));
    }

    #[test]
    fn mismatched_rates_rejected() {
        let a = Trace::new(vec![1.0; 4], 1.0, 0).unwrap();
        let b = Trace::new(vec![1.0; 4], 1.001, 1).unwrap();
        assert!(matches!(assemble(vec![a.clone(), b]), Err(Error::IncompatibleSet(_))));
        let c = Trace::new(vec![1.0; 4], 1.0 + 1e-6, 1).unwrap();
        assert!(assemble(vec![a, c]).is_ok());
    }

    #[test]
    fn zscore_two_points() {
        let set = TraceSet::new(vec![tr(&[1.0, 3.0], 0), tr(&[0.0, 2.0], 1)]).unwrap();
        let z = normalize_traces(&set, NormalizeMode::PerTraceZscore).unwrap();
        assert_eq!(z.traces()[0].samples(), &[-1.0, 1.0]);
        assert_eq!(z.traces()[1].samples(), &[-1.0, 1.0]);
        assert_eq!(normalize_traces(&set, NormalizeMode::None).unwrap(), set);
    }

    #[test]
    fn zscore_constant_trace_is_degenerate() {
        let set = TraceSet::new(vec![tr(&[1.0, 3.0, 0.0], 0), tr(&[2.0, 2.0, 2.0], 1)]).unwrap();
        let err = normalize_traces(&set, NormalizeMode::PerTraceZscore).unwrap_err();
        assert!(matches!(err, Error::DegenerateTrace { execution_id: 1 }));
    }
}
