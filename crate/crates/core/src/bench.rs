//! The benchmark harness: repeated timed inference suites under a chosen
//! executor and device profile, with aggregation and paired comparison.
//!
//! Timing protocol: repetitions run strictly sequentially on one thread; a
//! warm-up pass is excluded from statistics and doubles as the calibration
//! that scales the inner loop count until one repetition stays above the
//! minimum measurable duration. Per-repetition accounting work (traces,
//! energy) happens outside the timed region.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{subsample, DataError, Dataset};
use crate::energy::{
    count_ops, latency_scale, report_from_tally, tally_trace, DeviceProfile, EnergyError,
    EnergyReport, SkipTally,
};
use crate::executor::{run_model, ExecMode};
use crate::model::{ModelError, ModelSpec, Parameters};
use crate::stats::{aggregate, welch_t_test, MetricAgg};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("suite too fast to time: {0:.3} ms even at the inner-loop cap")]
    TimerResolution(f64),
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    /// Setup label carried into reports, e.g. "vanilla" or "sponge".
    pub label: String,
    pub n_samples: usize,
    pub repetitions: usize,
    pub mode: ExecMode,
    pub profile: DeviceProfile,
    pub seed: u64,
    /// Minimum timed duration of one repetition, enforced by inner looping.
    pub min_suite_ms: f64,
}

impl SuiteConfig {
    pub fn new(label: &str, profile: DeviceProfile) -> Self {
        SuiteConfig {
            label: label.to_string(),
            n_samples: 2000,
            repetitions: 20,
            mode: ExecMode::ZeroSkip,
            profile,
            seed: 0,
            min_suite_ms: 50.0,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.n_samples == 0 || self.repetitions == 0 {
            return Err(BenchError::InvalidConfig(
                "n_samples and repetitions must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One timed repetition of the full suite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RepRow {
    pub rep: usize,
    /// Wall-clock of one suite pass (total over n_samples inferences), ms.
    pub time_ms: f64,
    /// Simulated energy per inference, nJ.
    pub energy_nj: f64,
    pub accuracy: f64,
    pub density: f64,
    /// Simulated battery percentage for n_samples inferences.
    pub battery_percent: f64,
    /// Process CPU time attributed to one suite pass, ms (best effort).
    pub cpu_ms: f64,
    /// Peak resident set size, bytes (best effort).
    pub rss_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchAggregates {
    pub time_ms: MetricAgg,
    pub energy_nj: MetricAgg,
    pub accuracy: MetricAgg,
    pub density: MetricAgg,
    pub battery_percent: MetricAgg,
    pub cpu_ms: MetricAgg,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchResult {
    pub label: String,
    pub model: String,
    pub profile: String,
    pub mode: String,
    pub n_samples: usize,
    pub repetitions: usize,
    /// Suite passes per timed repetition (minimum-workload enforcement).
    pub inner_loops: usize,
    pub rows: Vec<RepRow>,
    pub aggregates: BenchAggregates,
    /// Model-side per-inference effective MACs under the zero-skip latency
    /// model (normalize by the vanilla arm to compare).
    pub latency_scale_units: f64,
    pub executed_macs: u64,
    pub skipped_macs: u64,
    pub total_macs: u64,
    pub energy_gap_ratio: f64,
    pub per_layer_density: Vec<f64>,
}

/// Run `repetitions` timed passes of `n_samples` single-sample inferences.
pub fn run_suite(
    spec: &ModelSpec,
    params: &Parameters,
    dataset: &Dataset,
    config: &SuiteConfig,
) -> Result<BenchResult, BenchError> {
    config.validate()?;
    let suite = subsample(dataset, config.n_samples, config.seed)?;
    let n = suite.len();
    let samples: Vec<Tensor> = (0..n).map(|i| suite.sample(i)).collect();

    // Accounting pass (untimed): exact energy tally and reference accuracy.
    let opcount = count_ops(spec)?;
    let mut tally = SkipTally::default();
    let mut correct = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        let (logits, trace) = run_model(spec, params, sample, config.mode, true)?;
        tally.merge(&tally_trace(&opcount, &trace)?);
        if argmax(logits.data()) == suite.labels[i] {
            correct += 1;
        }
    }
    let energy = report_from_tally(&opcount, &tally, &config.profile)?;
    let accuracy = correct as f64 / n as f64;

    // Warm-up pass, also calibrating the inner loop count.
    let warm = Instant::now();
    let mut hits = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        let (logits, _) = run_model(spec, params, sample, config.mode, false)?;
        if argmax(logits.data()) == suite.labels[i] {
            hits += 1;
        }
    }
    let warm_ms = warm.elapsed().as_secs_f64() * 1e3;
    let inner_loops = if warm_ms >= config.min_suite_ms {
        1
    } else {
        let k = (config.min_suite_ms / warm_ms.max(1e-6)).ceil() as usize;
        if k > 1_000_000 {
            return Err(BenchError::TimerResolution(warm_ms));
        }
        k
    };

    let mut rows = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let cpu0 = process_cpu_ms();
        let t0 = Instant::now();
        let mut timed_hits = 0usize;
        for _ in 0..inner_loops {
            timed_hits = 0;
            for (i, sample) in samples.iter().enumerate() {
                let (logits, _) = run_model(spec, params, sample, config.mode, false)?;
                if argmax(logits.data()) == suite.labels[i] {
                    timed_hits += 1;
                }
            }
        }
        let time_ms = t0.elapsed().as_secs_f64() * 1e3 / inner_loops as f64;
        let cpu_ms = (process_cpu_ms() - cpu0) / inner_loops as f64;
        debug_assert_eq!(timed_hits, hits);
        rows.push(RepRow {
            rep,
            time_ms,
            energy_nj: energy.energy_per_inference_nj,
            accuracy: timed_hits as f64 / n as f64,
            density: energy.overall_density,
            battery_percent: energy.battery_drain_percent,
            cpu_ms,
            rss_bytes: peak_rss_bytes(),
        });
    }
    debug_assert!((accuracy - rows[0].accuracy).abs() < 1e-12);

    let agg = |f: fn(&RepRow) -> f64| aggregate(&rows.iter().map(f).collect::<Vec<_>>());
    let aggregates = BenchAggregates {
        time_ms: agg(|r| r.time_ms),
        energy_nj: agg(|r| r.energy_nj),
        accuracy: agg(|r| r.accuracy),
        density: agg(|r| r.density),
        battery_percent: agg(|r| r.battery_percent),
        cpu_ms: agg(|r| r.cpu_ms),
    };
    Ok(BenchResult {
        label: config.label.clone(),
        model: spec.name.clone(),
        profile: config.profile.name.clone(),
        mode: config.mode.as_str().to_string(),
        n_samples: n,
        repetitions: config.repetitions,
        inner_loops,
        rows,
        aggregates,
        latency_scale_units: latency_scale(&energy),
        executed_macs: energy.executed_macs,
        skipped_macs: energy.skipped_macs,
        total_macs: energy.total_macs,
        energy_gap_ratio: energy.energy_gap_ratio,
        per_layer_density: energy.per_layer_density.clone(),
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn process_cpu_ms() -> f64 {
    // getrusage is best-effort metadata; zero on failure.
    unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut usage) != 0 {
            return 0.0;
        }
        let tv = |t: libc::timeval| t.tv_sec as f64 * 1e3 + t.tv_usec as f64 / 1e3;
        tv(usage.ru_utime) + tv(usage.ru_stime)
    }
}

fn peak_rss_bytes() -> u64 {
    unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_SELF, &mut usage) != 0 {
            return 0;
        }
        // ru_maxrss is KiB on Linux.
        (usage.ru_maxrss as u64) * 1024
    }
}

/// Paired vanilla/sponge deltas and the Welch significance test on the
/// per-repetition wall-clock times.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Comparison {
    pub vanilla_label: String,
    pub sponge_label: String,
    pub model: String,
    pub profile: String,
    pub mode: String,
    pub time_increase_pct: f64,
    pub battery_increase_pct: f64,
    pub energy_increase_pct: f64,
    /// Accuracy delta in percentage points (sponge - vanilla).
    pub accuracy_delta_points: f64,
    /// Overall-density delta in percentage points (sponge - vanilla).
    pub density_delta_points: f64,
    /// Model-side latency scale of the sponge arm, vanilla arm = 1.
    pub latency_scale_ratio: f64,
    pub welch_t: f64,
    pub welch_df: f64,
    pub welch_p: f64,
    pub significant: bool,
}

pub fn compare(vanilla: &BenchResult, sponge: &BenchResult) -> Comparison {
    let pct = |v: f64, s: f64| if v == 0.0 { 0.0 } else { 100.0 * (s - v) / v };
    let times_v: Vec<f64> = vanilla.rows.iter().map(|r| r.time_ms).collect();
    let times_s: Vec<f64> = sponge.rows.iter().map(|r| r.time_ms).collect();
    // Welch convention here: positive t means the sponge arm is slower.
    let welch = welch_t_test(&times_s, &times_v);
    Comparison {
        vanilla_label: vanilla.label.clone(),
        sponge_label: sponge.label.clone(),
        model: sponge.model.clone(),
        profile: sponge.profile.clone(),
        mode: sponge.mode.clone(),
        time_increase_pct: pct(
            vanilla.aggregates.time_ms.mean,
            sponge.aggregates.time_ms.mean,
        ),
        battery_increase_pct: pct(
            vanilla.aggregates.battery_percent.mean,
            sponge.aggregates.battery_percent.mean,
        ),
        energy_increase_pct: pct(
            vanilla.aggregates.energy_nj.mean,
            sponge.aggregates.energy_nj.mean,
        ),
        accuracy_delta_points: 100.0
            * (sponge.aggregates.accuracy.mean - vanilla.aggregates.accuracy.mean),
        density_delta_points: 100.0
            * (sponge.aggregates.density.mean - vanilla.aggregates.density.mean),
        latency_scale_ratio: if vanilla.latency_scale_units == 0.0 {
            0.0
        } else {
            sponge.latency_scale_units / vanilla.latency_scale_units
        },
        welch_t: welch.t,
        welch_df: welch.df,
        welch_p: welch.p,
        significant: welch.significant,
    }
}

/// Energy report for one traced batch, exposed for callers that bypass
/// [`run_suite`] (quantized-vs-float comparisons in tests and the CLI).
pub fn energy_of_batch(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    mode: ExecMode,
    profile: &DeviceProfile,
) -> Result<EnergyReport, BenchError> {
    let opcount = count_ops(spec)?;
    let (_, trace) = run_model(spec, params, batch, mode, true)?;
    let tally = tally_trace(&opcount, &trace)?;
    Ok(report_from_tally(&opcount, &tally, profile)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split};
    use crate::model::{build_m1_micronet, forward, init_params, LayerParams};

    fn tiny_setup() -> (ModelSpec, Parameters, Dataset) {
        let spec = build_m1_micronet([3, 6, 6], 3);
        let params = init_params(&spec, 4);
        let data = synth_dataset(7, 24, 3, [3, 6, 6], 0.05, Split::Test).unwrap();
        (spec, params, data)
    }

    #[test]
    fn smoke_single_rep_single_sample() {
        let (spec, params, data) = tiny_setup();
        let config = SuiteConfig {
            label: "smoke".into(),
            n_samples: 1,
            repetitions: 1,
            mode: ExecMode::Dense,
            profile: DeviceProfile::s20_like(),
            seed: 1,
            min_suite_ms: 1.0,
        };
        let result = run_suite(&spec, &params, &data, &config).unwrap();
        assert_eq!(result.rows.len(), 1);
        let row = &result.rows[0];
        assert!(row.time_ms.is_finite() && row.time_ms > 0.0);
        assert!(row.energy_nj.is_finite() && row.energy_nj > 0.0);
        assert!((0.0..=1.0).contains(&row.accuracy));
        assert!((0.0..=1.0).contains(&row.density));
        assert!(row.battery_percent >= 0.0);
    }

    #[test]
    fn zero_activation_model_is_faster_in_zero_skip_mode() {
        let (spec, mut params, data) = tiny_setup();
        // Large negative biases kill every ReLU output: the zero-skip path
        // then skips almost all work after the stem.
        for lp in &mut params.layers {
            if let LayerParams::ConvLike { bias, .. } = lp {
                let shape = bias.shape().to_vec();
                *bias = Tensor::from_fn(&shape, |_| -100.0).unwrap();
            }
        }
        let mk = |mode: ExecMode| SuiteConfig {
            label: "dead".into(),
            n_samples: 24,
            repetitions: 20,
            mode,
            profile: DeviceProfile::s20_like(),
            seed: 2,
            min_suite_ms: 5.0,
        };
        let dense = run_suite(&spec, &params, &data, &mk(ExecMode::Dense)).unwrap();
        let zs = run_suite(&spec, &params, &data, &mk(ExecMode::ZeroSkip)).unwrap();
        let med = |r: &BenchResult| {
            let mut t: Vec<f64> = r.rows.iter().map(|x| x.time_ms).collect();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            t[t.len() / 2]
        };
        // Normalize by inner loops already done; compare per-pass medians.
        assert!(
            med(&zs) < med(&dense),
            "zero-skip {} ms vs dense {} ms",
            med(&zs),
            med(&dense)
        );
        // And the energy model agrees: everything after the stem skipped.
        assert!(zs.energy_gap_ratio < 0.7);
    }

    #[test]
    fn accuracy_matches_independent_recount() {
        let (spec, params, data) = tiny_setup();
        let config = SuiteConfig {
            label: "acc".into(),
            n_samples: 24,
            repetitions: 2,
            mode: ExecMode::Dense,
            profile: DeviceProfile::s20_like(),
            seed: 3,
            min_suite_ms: 1.0,
        };
        let result = run_suite(&spec, &params, &data, &config).unwrap();
        // Recount with the plain forward pass on the same seeded subsample.
        let suite = subsample(&data, 24, 3).unwrap();
        let mut correct = 0usize;
        for i in 0..suite.len() {
            let (logits, _) = forward(&spec, &params, &suite.sample(i), false).unwrap();
            if argmax(logits.data()) == suite.labels[i] {
                correct += 1;
            }
        }
        let expect = correct as f64 / suite.len() as f64;
        for row in &result.rows {
            assert_eq!(row.accuracy, expect);
        }
        assert_eq!(result.aggregates.accuracy.mean, expect);
    }

    #[test]
    fn comparison_percentages_are_exact() {
        let (spec, params, data) = tiny_setup();
        let config = SuiteConfig {
            label: "a".into(),
            n_samples: 8,
            repetitions: 2,
            mode: ExecMode::Dense,
            profile: DeviceProfile::s20_like(),
            seed: 4,
            min_suite_ms: 1.0,
        };
        let a = run_suite(&spec, &params, &data, &config).unwrap();
        // Synthetic pair: +13% time, +15% battery.
        let mut b = a.clone();
        b.label = "b".into();
        for r in &mut b.rows {
            r.time_ms *= 1.13;
            r.battery_percent *= 1.15;
        }
        b.aggregates.time_ms.mean *= 1.13;
        b.aggregates.battery_percent.mean *= 1.15;
        let cmp = compare(&a, &b);
        assert!((cmp.time_increase_pct - 13.0).abs() < 1e-9);
        assert!((cmp.battery_increase_pct - 15.0).abs() < 1e-9);

        // Identical results: zero deltas, not significant.
        let same = compare(&a, &a);
        assert_eq!(same.time_increase_pct, 0.0);
        assert_eq!(same.battery_increase_pct, 0.0);
        assert!(!same.significant);
    }

    #[test]
    fn inner_loops_enforce_minimum_workload() {
        let (spec, params, data) = tiny_setup();
        let config = SuiteConfig {
            label: "tiny".into(),
            n_samples: 1,
            repetitions: 1,
            mode: ExecMode::Dense,
            profile: DeviceProfile::s20_like(),
            seed: 5,
            min_suite_ms: 20.0,
        };
        let result = run_suite(&spec, &params, &data, &config).unwrap();
        // One 6x6 inference is far below 20 ms, so the loop must scale up.
        assert!(result.inner_loops > 1);
    }
}
