//! Report emission: a JSON-lines run log (schema-versioned), one flat CSV
//! per metric for external plotting, and a human-readable summary table.
//!
//! Byte stability: JSON objects are written with sorted keys and floats in
//! a fixed 6-significant-digit format, so re-emitting the same results is
//! byte-identical and fixed-seed reruns differ only in the timestamp and
//! wall-clock-derived fields.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::bench::{BenchResult, Comparison};

pub const REPORT_SCHEMA: u32 = 1;

/// Fields whose values depend on wall-clock measurement or the machine, not
/// on the seeded computation. Determinism checks zero these out.
pub const VOLATILE_FIELDS: &[&str] = &[
    "timestamp_unix",
    "time_ms",
    "cpu_ms",
    "rss_bytes",
    "inner_loops",
    "time_increase_pct",
    "welch_t",
    "welch_df",
    "welch_p",
    "significant",
];

/// Metric CSVs that carry wall-clock values (excluded from byte-equality).
pub const VOLATILE_CSVS: &[&str] = &["time_ms.csv", "cpu_ms.csv"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Six-significant-digit float formatting (printf %g style): plain decimal
/// for exponents in [-4, 6), scientific otherwise, trailing zeros trimmed.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    debug_assert!(x.is_finite(), "report floats must be finite");
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        trim_zeros(&s)
    } else {
        let s = format!("{x:.5e}");
        // "1.23000e8" -> mantissa "1.23000", exponent "e8"
        let (mantissa, exponent) = s.split_once('e').expect("e-format");
        format!("{}e{}", trim_zeros(mantissa), exponent)
    }
}

fn trim_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let t = s.trim_end_matches('0');
    t.strip_suffix('.').unwrap_or(t).to_string()
}

/// Serialize a JSON value compactly with sorted object keys and `fmt_g6`
/// floats (integers stay exact).
pub fn write_json_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                out.push_str(&fmt_g6(n.as_f64().unwrap_or(0.0)));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string encoding"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_json_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json's default map is a BTreeMap: iteration is sorted.
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key encoding"));
                out.push(':');
                write_json_value(v, out);
            }
            out.push('}');
        }
    }
}

fn json_line<T: Serialize>(kind: &str, payload: &T) -> Result<String, ReportError> {
    let mut value = serde_json::to_value(payload)?;
    if let Value::Object(map) = &mut value {
        map.insert("schema".into(), Value::from(REPORT_SCHEMA));
        map.insert("kind".into(), Value::from(kind));
    }
    let mut line = String::new();
    write_json_value(&value, &mut line);
    Ok(line)
}

/// Run-level metadata written as the first JSON line and echoed at the top
/// of the summary.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct ReportHeader {
    pub timestamp_unix: u64,
    pub seed: u64,
    pub n_samples: usize,
    pub repetitions: usize,
    /// How battery percentages must be read.
    pub battery_note: String,
    /// Sample-count scaling relative to the 2000-inference default.
    pub scaling_note: String,
}

impl ReportHeader {
    pub fn new(seed: u64, n_samples: usize, repetitions: usize) -> Self {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        ReportHeader {
            timestamp_unix,
            seed,
            n_samples,
            repetitions,
            battery_note: format!(
                "battery_percent is the simulated battery share consumed by \
                 {n_samples} inferences on the named device profile"
            ),
            scaling_note: if n_samples == 2000 {
                "suite runs the full 2000-inference default".to_string()
            } else {
                format!(
                    "suite scaled to {n_samples} inferences (default 2000) to fit \
                     the runtime budget"
                )
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub jsonl: PathBuf,
    pub csv_dir: PathBuf,
}

const METRICS: &[(&str, fn(&crate::bench::RepRow) -> String)] = &[
    ("time_ms", |r| fmt_g6(r.time_ms)),
    ("energy_nj", |r| fmt_g6(r.energy_nj)),
    ("accuracy", |r| fmt_g6(r.accuracy)),
    ("density", |r| fmt_g6(r.density)),
    ("battery_percent", |r| fmt_g6(r.battery_percent)),
    ("cpu_ms", |r| fmt_g6(r.cpu_ms)),
];

/// Write the JSON-lines log and per-metric CSVs under `out_dir`, returning
/// the paths and the human-readable summary.
pub fn emit_report(
    header: &ReportHeader,
    results: &[BenchResult],
    comparisons: &[Comparison],
    out_dir: &Path,
) -> Result<(ReportPaths, String), ReportError> {
    let io_err = |path: &Path| {
        let p = path.to_path_buf();
        move |source: std::io::Error| ReportError::Io {
            path: p.clone(),
            source,
        }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let jsonl_path = out_dir.join("report.jsonl");
    let mut jsonl = String::new();
    jsonl.push_str(&json_line("header", header)?);
    jsonl.push('\n');
    for r in results {
        jsonl.push_str(&json_line("bench_result", r)?);
        jsonl.push('\n');
    }
    for c in comparisons {
        jsonl.push_str(&json_line("comparison", c)?);
        jsonl.push('\n');
    }
    fs::write(&jsonl_path, &jsonl).map_err(io_err(&jsonl_path))?;

    let csv_dir = out_dir.join("csv");
    fs::create_dir_all(&csv_dir).map_err(io_err(&csv_dir))?;
    for (metric, extract) in METRICS {
        let path = csv_dir.join(format!("{metric}.csv"));
        let mut file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut buf = String::from("setup,model,profile,mode,repetition,value\n");
        for r in results {
            for row in &r.rows {
                buf.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.label,
                    r.model,
                    r.profile,
                    r.mode,
                    row.rep,
                    extract(row)
                ));
            }
        }
        file.write_all(buf.as_bytes()).map_err(io_err(&path))?;
    }

    let summary = render_summary(header, results, comparisons);
    Ok((
        ReportPaths {
            jsonl: jsonl_path,
            csv_dir,
        },
        summary,
    ))
}

fn render_summary(
    header: &ReportHeader,
    results: &[BenchResult],
    comparisons: &[Comparison],
) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "run seed {} | {} samples x {} repetitions\n{}\n{}\n\n",
        header.seed, header.n_samples, header.repetitions, header.battery_note, header.scaling_note
    ));
    s.push_str(&format!(
        "{:<18} {:<14} {:<12} {:<9} {:>12} {:>14} {:>9} {:>9} {:>12}\n",
        "setup", "model", "profile", "mode", "time ms", "energy nJ", "acc", "density", "battery %"
    ));
    for r in results {
        s.push_str(&format!(
            "{:<18} {:<14} {:<12} {:<9} {:>7} ±{:>4} {:>14} {:>9} {:>9} {:>12}\n",
            r.label,
            r.model,
            r.profile,
            r.mode,
            fmt_g6(r.aggregates.time_ms.mean),
            fmt_g6(r.aggregates.time_ms.ci95_half),
            fmt_g6(r.aggregates.energy_nj.mean),
            fmt_g6(r.aggregates.accuracy.mean),
            fmt_g6(r.aggregates.density.mean),
            fmt_g6(r.aggregates.battery_percent.mean),
        ));
    }
    if !comparisons.is_empty() {
        s.push_str("\ncomparisons (sponge vs vanilla):\n");
        for c in comparisons {
            s.push_str(&format!(
                "{} vs {} [{} / {} / {}]: time {:+.2}%, battery {:+.2}%, energy {:+.2}%, \
                 accuracy {:+.2} pts, density {:+.2} pts, latency-scale x{:.3}, \
                 Welch p = {} ({})\n",
                c.sponge_label,
                c.vanilla_label,
                c.model,
                c.profile,
                c.mode,
                c.time_increase_pct,
                c.battery_increase_pct,
                c.energy_increase_pct,
                c.accuracy_delta_points,
                c.density_delta_points,
                c.latency_scale_ratio,
                fmt_g6(c.welch_p),
                if c.significant {
                    "significant at 0.05"
                } else {
                    "not significant"
                },
            ));
        }
    }
    s
}

/// Parse a report.jsonl back into typed records.
pub fn parse_report(
    text: &str,
) -> Result<(Option<ReportHeader>, Vec<BenchResult>, Vec<Comparison>), ReportError> {
    let mut header = None;
    let mut results = Vec::new();
    let mut comparisons = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some("header") => header = Some(serde_json::from_value(value)?),
            Some("bench_result") => results.push(serde_json::from_value(value)?),
            Some("comparison") => comparisons.push(serde_json::from_value(value)?),
            _ => {}
        }
    }
    Ok((header, results, comparisons))
}

/// Zero out the wall-clock-derived fields of a parsed JSON line, for
/// determinism comparisons.
pub fn mask_volatile(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if VOLATILE_FIELDS.contains(&k.as_str()) {
                    *v = Value::from(0u64);
                } else {
                    mask_volatile(v);
                }
            }
        }
        Value::Array(items) => {
            for item in items {
                mask_volatile(item);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run_suite, SuiteConfig};
    use crate::data::{synth_dataset, Split};
    use crate::energy::DeviceProfile;
    use crate::executor::ExecMode;
    use crate::model::{build_m1_micronet, init_params};

    #[test]
    fn g6_formatting() {
        assert_eq!(fmt_g6(0.0), "0");
        assert_eq!(fmt_g6(1.0), "1");
        assert_eq!(fmt_g6(-2.5), "-2.5");
        assert_eq!(fmt_g6(0.030030030), "0.03003");
        assert_eq!(fmt_g6(123456.0), "123456");
        assert_eq!(fmt_g6(1234567.0), "1.23457e6");
        assert_eq!(fmt_g6(0.000012345), "1.2345e-5");
        assert_eq!(fmt_g6(3.1415926535), "3.14159");
    }

    #[test]
    fn g6_is_reparse_stable() {
        for &x in &[1.5, 0.0300300, 1.23457e6, 9.99999e-5, 123.456, 2.0 / 3.0] {
            let s1 = fmt_g6(x);
            let back: f64 = s1.parse().unwrap();
            assert_eq!(s1, fmt_g6(back), "{x}");
        }
    }

    proptest::proptest! {
        #[test]
        fn g6_reparse_is_stable(x in -1e12f64..1e12) {
            let s1 = fmt_g6(x);
            let back: f64 = s1.parse().unwrap();
            proptest::prop_assert_eq!(&s1, &fmt_g6(back));
        }
    }

    fn sample_results() -> (ReportHeader, Vec<BenchResult>, Vec<Comparison>) {
        let spec = build_m1_micronet([3, 6, 6], 3);
        let params = init_params(&spec, 4);
        let data = synth_dataset(7, 16, 3, [3, 6, 6], 0.05, Split::Test).unwrap();
        let mut cfg = SuiteConfig::new("vanilla", DeviceProfile::s20_like());
        cfg.n_samples = 8;
        cfg.repetitions = 3;
        cfg.mode = ExecMode::Dense;
        cfg.min_suite_ms = 1.0;
        let a = run_suite(&spec, &params, &data, &cfg).unwrap();
        let mut b = a.clone();
        b.label = "sponge".into();
        let cmp = crate::bench::compare(&a, &b);
        (ReportHeader::new(7, 8, 3), vec![a, b], vec![cmp])
    }

    #[test]
    fn re_emission_is_byte_identical() {
        let (header, results, comparisons) = sample_results();
        let dir = tempfile::tempdir().unwrap();
        let (paths, summary1) = emit_report(&header, &results, &comparisons, dir.path()).unwrap();
        let first = std::fs::read(&paths.jsonl).unwrap();
        let (paths2, summary2) = emit_report(&header, &results, &comparisons, dir.path()).unwrap();
        let second = std::fs::read(&paths2.jsonl).unwrap();
        assert_eq!(first, second);
        assert_eq!(summary1, summary2);
        for (metric, _) in METRICS {
            let p = paths.csv_dir.join(format!("{metric}.csv"));
            let a = std::fs::read(&p).unwrap();
            let b = std::fs::read(&p).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn jsonl_round_trips_through_reemission() {
        let (header, results, comparisons) = sample_results();
        let dir = tempfile::tempdir().unwrap();
        let (paths, _) = emit_report(&header, &results, &comparisons, dir.path()).unwrap();
        let text = std::fs::read_to_string(&paths.jsonl).unwrap();
        let (h2, r2, c2) = parse_report(&text).unwrap();
        // Parsed records re-emit to identical bytes: equality at report
        // precision, which is what the g6 format defines.
        let dir2 = tempfile::tempdir().unwrap();
        let (paths2, _) = emit_report(&h2.unwrap(), &r2, &c2, dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(&paths.jsonl).unwrap(),
            std::fs::read(&paths2.jsonl).unwrap()
        );
        assert_eq!(r2.len(), results.len());
        assert_eq!(c2.len(), comparisons.len());
    }

    #[test]
    fn csv_row_count_is_reps_times_setups() {
        let (header, results, comparisons) = sample_results();
        let dir = tempfile::tempdir().unwrap();
        let (paths, _) = emit_report(&header, &results, &comparisons, dir.path()).unwrap();
        let text = std::fs::read_to_string(paths.csv_dir.join("energy_nj.csv")).unwrap();
        let rows = text.lines().count() - 1; // header line
        let expect: usize = results.iter().map(|r| r.rows.len()).sum();
        assert_eq!(rows, expect);
    }

    #[test]
    fn mask_volatile_zeroes_the_right_fields() {
        let mut v: Value = serde_json::json!({
            "timestamp_unix": 123,
            "rows": [{"time_ms": 4.5, "energy_nj": 7.0}],
            "aggregates": {"time_ms": {"mean": 1.0}},
            "nested": {"welch_p": 0.01, "density": 0.5}
        });
        mask_volatile(&mut v);
        assert_eq!(v["timestamp_unix"], 0);
        assert_eq!(v["rows"][0]["time_ms"], 0);
        assert_eq!(v["rows"][0]["energy_nj"], 7.0);
        assert_eq!(v["aggregates"]["time_ms"], 0);
        assert_eq!(v["nested"]["welch_p"], 0);
        assert_eq!(v["nested"]["density"], 0.5);
    }
}
