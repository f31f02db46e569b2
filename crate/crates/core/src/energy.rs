//! Zero-skipping accelerator cost model: static MAC counting per layer,
//! exact skip accounting from activation traces, energy and battery-drain
//! simulation under device profiles.
//!
//! The skip rule is decided per activation element: an exactly-zero
//! post-ReLU element saves every MAC fanning out of it in the consuming
//! layer. Raw-pixel (stem) and pooled operands are never skippable, and
//! zero-padding operands count as executed work, so `skipped` never exceeds
//! the activation-dependent MAC count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActivationTrace, MacGeometry, MacUnit, ModelError, ModelSpec, ValueSource};

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("trace has {got} entries but the model needs {expected}")]
    TraceLength { expected: usize, got: usize },
    #[error("unit (layer {layer}, sub {sub}) expects {expected} input elements per sample, trace entry {trace} has {got}")]
    TraceShape {
        layer: usize,
        sub: usize,
        trace: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid device profile: {0}")]
    BadProfile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceTier {
    HighEnd,
    LowEnd,
}

/// Hardware cost model standing in for a phone tier. Battery capacities are
/// public device specs; the energy coefficients are order-of-magnitude
/// placeholders, overridable from the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Energy per executed multiply-accumulate, nanojoules.
    pub e_mac_nj: f64,
    /// Energy per skipped MAC (control overhead of the skip), nanojoules.
    pub e_skip_nj: f64,
    /// Fixed energy per inference, nanojoules.
    pub base_overhead_nj: f64,
    pub battery_capacity_mah: f64,
    pub battery_voltage_v: f64,
    pub tier: DeviceTier,
}

impl DeviceProfile {
    /// High-end preset.
    pub fn s20_like() -> Self {
        DeviceProfile {
            name: "s20-like".into(),
            e_mac_nj: 0.8,
            e_skip_nj: 0.05,
            base_overhead_nj: 2000.0,
            battery_capacity_mah: 3880.0,
            battery_voltage_v: 3.85,
            tier: DeviceTier::HighEnd,
        }
    }

    /// Low-end preset. Constructed so that for any fixed workload both the
    /// absolute battery drain and the relative sponge-induced increase are
    /// at least as large as on the high-end preset: e_skip/e_mac and
    /// overhead/(e_mac - e_skip) are both smaller here.
    pub fn nexus5_like() -> Self {
        DeviceProfile {
            name: "nexus5-like".into(),
            e_mac_nj: 2.0,
            e_skip_nj: 0.1,
            base_overhead_nj: 4000.0,
            battery_capacity_mah: 2300.0,
            battery_voltage_v: 3.8,
            tier: DeviceTier::LowEnd,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "s20-like" => Some(Self::s20_like()),
            "nexus5-like" => Some(Self::nexus5_like()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.e_skip_nj >= 0.0 && self.e_skip_nj < self.e_mac_nj) {
            return Err(EnergyError::BadProfile(format!(
                "need 0 <= e_skip < e_mac, got {} and {}",
                self.e_skip_nj, self.e_mac_nj
            )));
        }
        if !(self.battery_capacity_mah > 0.0) || !(self.battery_voltage_v > 0.0) {
            return Err(EnergyError::BadProfile(
                "battery capacity and voltage must be positive".into(),
            ));
        }
        if self.base_overhead_nj < 0.0 {
            return Err(EnergyError::BadProfile("base overhead must be >= 0".into()));
        }
        Ok(())
    }

    pub fn battery_joules(&self) -> f64 {
        // mAh * V = mWh; 1 mWh = 3.6 J.
        self.battery_capacity_mah * self.battery_voltage_v * 3.6
    }
}

/// How zero elements of the consumed activation map to saved MACs.
#[derive(Debug, Clone)]
pub enum Fanout {
    /// Dense layer: every input element feeds `outputs` MACs.
    Dense { outputs: u64 },
    /// Conv-like layer: element (c, y, x) feeds
    /// `cout_factor * cnt_y[y] * cnt_x[x]` MACs (cout_factor = out channels
    /// for full conv, 1 for depthwise). Counts exclude padding positions.
    Spatial {
        cnt_y: Vec<u64>,
        cnt_x: Vec<u64>,
        cout_factor: u64,
    },
}

#[derive(Debug, Clone)]
pub struct OpCountEntry {
    pub layer: usize,
    pub sub: usize,
    pub kind: &'static str,
    /// Exact MACs per sample, padding positions included.
    pub total_macs: u64,
    /// MACs whose one operand is a post-ReLU activation element (excludes
    /// padding); zero when the input is raw pixels or pooled values.
    pub activation_macs: u64,
    pub source: ValueSource,
    pub fanout: Fanout,
    /// Expected per-sample element count of the consumed trace entry.
    pub input_elements: usize,
    pub input_channels: usize,
    pub input_spatial: (usize, usize),
}

/// Static per-layer MAC counts for one sample.
#[derive(Debug, Clone)]
pub struct OpCount {
    pub entries: Vec<OpCountEntry>,
}

impl OpCount {
    pub fn total_macs_per_sample(&self) -> u64 {
        self.entries.iter().map(|e| e.total_macs).sum()
    }

    pub fn activation_macs_per_sample(&self) -> u64 {
        self.entries.iter().map(|e| e.activation_macs).sum()
    }
}

/// `cnt[y] = #{(oy, ky) : oy*stride - padding + ky == y}` for y in `[0, h)`.
fn coverage_counts(h: usize, kernel: usize, stride: usize, padding: usize) -> Vec<u64> {
    let out = (h + 2 * padding - kernel) / stride + 1;
    let mut cnt = vec![0u64; h];
    for oy in 0..out {
        for ky in 0..kernel {
            let y = (oy * stride + ky) as isize - padding as isize;
            if y >= 0 && (y as usize) < h {
                cnt[y as usize] += 1;
            }
        }
    }
    cnt
}

fn entry_for_unit(unit: &MacUnit) -> OpCountEntry {
    match &unit.geometry {
        MacGeometry::Dense { inputs, outputs } => {
            let total = (inputs * outputs) as u64;
            let activation = if matches!(unit.source, ValueSource::Trace(_)) {
                total
            } else {
                0
            };
            OpCountEntry {
                layer: unit.layer,
                sub: unit.sub,
                kind: "dense",
                total_macs: total,
                activation_macs: activation,
                source: unit.source,
                fanout: Fanout::Dense {
                    outputs: *outputs as u64,
                },
                input_elements: *inputs,
                input_channels: *inputs,
                input_spatial: (1, 1),
            }
        }
        MacGeometry::Conv {
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
        } => {
            let oh = (in_h + 2 * padding - kernel) / stride + 1;
            let ow = (in_w + 2 * padding - kernel) / stride + 1;
            let total = (oh * ow * out_channels * kernel * kernel * in_channels) as u64;
            let cnt_y = coverage_counts(*in_h, *kernel, *stride, *padding);
            let cnt_x = coverage_counts(*in_w, *kernel, *stride, *padding);
            let covered_y: u64 = cnt_y.iter().sum();
            let covered_x: u64 = cnt_x.iter().sum();
            let activation = if matches!(unit.source, ValueSource::Trace(_)) {
                (*out_channels as u64) * (*in_channels as u64) * covered_y * covered_x
            } else {
                0
            };
            OpCountEntry {
                layer: unit.layer,
                sub: unit.sub,
                kind: if *kernel == 1 { "pointwise_conv" } else { "conv" },
                total_macs: total,
                activation_macs: activation,
                source: unit.source,
                fanout: Fanout::Spatial {
                    cnt_y,
                    cnt_x,
                    cout_factor: *out_channels as u64,
                },
                input_elements: in_channels * in_h * in_w,
                input_channels: *in_channels,
                input_spatial: (*in_h, *in_w),
            }
        }
        MacGeometry::Depthwise {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
        } => {
            let oh = (in_h + 2 * padding - kernel) / stride + 1;
            let ow = (in_w + 2 * padding - kernel) / stride + 1;
            let total = (oh * ow * channels * kernel * kernel) as u64;
            let cnt_y = coverage_counts(*in_h, *kernel, *stride, *padding);
            let cnt_x = coverage_counts(*in_w, *kernel, *stride, *padding);
            let covered_y: u64 = cnt_y.iter().sum();
            let covered_x: u64 = cnt_x.iter().sum();
            let activation = if matches!(unit.source, ValueSource::Trace(_)) {
                (*channels as u64) * covered_y * covered_x
            } else {
                0
            };
            OpCountEntry {
                layer: unit.layer,
                sub: unit.sub,
                kind: "depthwise_conv",
                total_macs: total,
                activation_macs: activation,
                source: unit.source,
                fanout: Fanout::Spatial {
                    cnt_y,
                    cnt_x,
                    cout_factor: 1,
                },
                input_elements: channels * in_h * in_w,
                input_channels: *channels,
                input_spatial: (*in_h, *in_w),
            }
        }
    }
}

/// Static analysis of the model: exact per-layer MAC counts and the fan-out
/// tables the skip accounting uses.
pub fn count_ops(spec: &ModelSpec) -> Result<OpCount, EnergyError> {
    let units = spec.mac_units()?;
    Ok(OpCount {
        entries: units.iter().map(entry_for_unit).collect(),
    })
}

/// Integer zero-skip accounting over some number of inferences. Mergeable so
/// the bench harness can accumulate per-sample traces without keeping them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipTally {
    pub inferences: u64,
    pub executed_macs: u64,
    pub skipped_macs: u64,
    pub per_entry_skipped: Vec<u64>,
    pub per_trace_nonzero: Vec<u64>,
    pub per_trace_elements: Vec<u64>,
}

impl SkipTally {
    pub fn merge(&mut self, other: &SkipTally) {
        if self.per_entry_skipped.is_empty() && self.inferences == 0 {
            *self = other.clone();
            return;
        }
        self.inferences += other.inferences;
        self.executed_macs += other.executed_macs;
        self.skipped_macs += other.skipped_macs;
        for (a, b) in self
            .per_entry_skipped
            .iter_mut()
            .zip(&other.per_entry_skipped)
        {
            *a += b;
        }
        for (a, b) in self
            .per_trace_nonzero
            .iter_mut()
            .zip(&other.per_trace_nonzero)
        {
            *a += b;
        }
        for (a, b) in self
            .per_trace_elements
            .iter_mut()
            .zip(&other.per_trace_elements)
        {
            *a += b;
        }
    }
}

/// Count executed and skipped MACs for a batched trace, exactly.
pub fn tally_trace(opcount: &OpCount, trace: &ActivationTrace) -> Result<SkipTally, EnergyError> {
    let n = trace.batch as u64;
    let mut tally = SkipTally {
        inferences: n,
        per_entry_skipped: vec![0; opcount.entries.len()],
        per_trace_nonzero: trace.entries.iter().map(|e| e.nonzero as u64).collect(),
        per_trace_elements: trace.entries.iter().map(|e| e.elements as u64).collect(),
        ..SkipTally::default()
    };
    for (ei, entry) in opcount.entries.iter().enumerate() {
        let total_batch = entry.total_macs * n;
        let skipped = match entry.source {
            ValueSource::Trace(t) => {
                let te = trace.entries.get(t).ok_or(EnergyError::TraceLength {
                    expected: t + 1,
                    got: trace.entries.len(),
                })?;
                let per_sample = te.elements / trace.batch.max(1);
                if per_sample != entry.input_elements {
                    return Err(EnergyError::TraceShape {
                        layer: entry.layer,
                        sub: entry.sub,
                        trace: t,
                        expected: entry.input_elements,
                        got: per_sample,
                    });
                }
                count_skipped(entry, te.activations.data(), per_sample)
            }
            _ => 0,
        };
        tally.per_entry_skipped[ei] = skipped;
        tally.skipped_macs += skipped;
        tally.executed_macs += total_batch - skipped;
    }
    Ok(tally)
}

fn count_skipped(entry: &OpCountEntry, data: &[f32], per_sample: usize) -> u64 {
    match &entry.fanout {
        Fanout::Dense { outputs } => {
            let zeros = data.iter().filter(|&&v| v == 0.0).count() as u64;
            zeros * outputs
        }
        Fanout::Spatial {
            cnt_y,
            cnt_x,
            cout_factor,
        } => {
            let (h, w) = entry.input_spatial;
            let mut skipped = 0u64;
            for sample in data.chunks_exact(per_sample) {
                for chan in sample.chunks_exact(h * w) {
                    for (y, row) in chan.chunks_exact(w).enumerate() {
                        let cy = cnt_y[y];
                        if cy == 0 {
                            continue;
                        }
                        for (x, &v) in row.iter().enumerate() {
                            if v == 0.0 {
                                skipped += cy * cnt_x[x];
                            }
                        }
                    }
                }
            }
            skipped * cout_factor
        }
    }
}

/// Per-inference energy accounting, batch-exact MAC counts, densities and
/// battery drain for the traced workload under a device profile.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub profile: String,
    pub inferences: u64,
    pub executed_macs: u64,
    pub skipped_macs: u64,
    pub total_macs: u64,
    pub energy_per_inference_nj: f64,
    pub worst_case_per_inference_nj: f64,
    /// actual / worst-case, in (0, 1].
    pub energy_gap_ratio: f64,
    pub per_layer_density: Vec<f64>,
    pub overall_density: f64,
    /// Battery percentage consumed by `inferences` inferences.
    pub battery_drain_percent: f64,
    /// e_skip / e_mac, the relative cost of a skipped MAC in time units.
    pub skip_cost_ratio: f64,
}

/// Build the report for an accumulated tally.
pub fn report_from_tally(
    opcount: &OpCount,
    tally: &SkipTally,
    profile: &DeviceProfile,
) -> Result<EnergyReport, EnergyError> {
    profile.validate()?;
    let n = tally.inferences.max(1);
    let per_sample_total = opcount.total_macs_per_sample();
    let energy_macs = tally.executed_macs as f64 * profile.e_mac_nj
        + tally.skipped_macs as f64 * profile.e_skip_nj;
    let energy_per_inference = energy_macs / n as f64 + profile.base_overhead_nj;
    let worst_case = per_sample_total as f64 * profile.e_mac_nj + profile.base_overhead_nj;
    let per_layer_density: Vec<f64> = tally
        .per_trace_nonzero
        .iter()
        .zip(&tally.per_trace_elements)
        .map(|(&nz, &el)| if el == 0 { 0.0 } else { nz as f64 / el as f64 })
        .collect();
    let total_nz: u64 = tally.per_trace_nonzero.iter().sum();
    let total_el: u64 = tally.per_trace_elements.iter().sum();
    Ok(EnergyReport {
        profile: profile.name.clone(),
        inferences: tally.inferences,
        executed_macs: tally.executed_macs,
        skipped_macs: tally.skipped_macs,
        total_macs: per_sample_total * n,
        energy_per_inference_nj: energy_per_inference,
        worst_case_per_inference_nj: worst_case,
        energy_gap_ratio: energy_per_inference / worst_case,
        per_layer_density,
        overall_density: if total_el == 0 {
            0.0
        } else {
            total_nz as f64 / total_el as f64
        },
        battery_drain_percent: battery_drain(energy_per_inference, tally.inferences, profile),
        skip_cost_ratio: profile.e_skip_nj / profile.e_mac_nj,
    })
}

/// Energy accounting for one traced batch (trace covers all inferences).
pub fn simulate_energy(
    opcount: &OpCount,
    trace: &ActivationTrace,
    profile: &DeviceProfile,
) -> Result<EnergyReport, EnergyError> {
    let tally = tally_trace(opcount, trace)?;
    report_from_tally(opcount, &tally, profile)
}

/// Per-layer and overall activation density of a trace (exact-zero test).
pub fn measure_density(trace: &ActivationTrace) -> (Vec<f64>, f64) {
    let per_layer: Vec<f64> = trace
        .entries
        .iter()
        .map(|e| {
            if e.elements == 0 {
                0.0
            } else {
                e.activations.data().iter().filter(|&&v| v != 0.0).count() as f64
                    / e.elements as f64
            }
        })
        .collect();
    let total_el: usize = trace.entries.iter().map(|e| e.elements).sum();
    let total_nz: usize = trace
        .entries
        .iter()
        .map(|e| e.activations.data().iter().filter(|&&v| v != 0.0).count())
        .sum();
    let overall = if total_el == 0 {
        0.0
    } else {
        total_nz as f64 / total_el as f64
    };
    (per_layer, overall)
}

/// Battery percentage consumed by `n_inferences` at the given per-inference
/// energy: `100 * energy_joules / battery_joules`.
pub fn battery_drain(
    energy_per_inference_nj: f64,
    n_inferences: u64,
    profile: &DeviceProfile,
) -> f64 {
    let joules = energy_per_inference_nj * 1e-9 * n_inferences as f64;
    100.0 * joules / profile.battery_joules()
}

/// Relative time units per inference under the zero-skip latency model:
/// executed MACs cost 1, skipped MACs cost `e_skip/e_mac`. Normalize by the
/// vanilla arm's mean to get a >= 1 relative scale for the sponge arm.
pub fn latency_scale(report: &EnergyReport) -> f64 {
    let n = report.inferences.max(1) as f64;
    (report.executed_macs as f64 + report.skip_cost_ratio * report.skipped_macs as f64) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::seeded_tensor_in;
    use crate::model::{
        build_m1_micronet, build_m2_miniresnet, forward, init_params, LayerSpec, TraceEntry,
    };
    use crate::tensor::Tensor;

    fn dense_spec(inputs: usize, outputs: usize) -> ModelSpec {
        ModelSpec {
            name: "dense".into(),
            input_shape: [inputs, 1, 1],
            classes: outputs,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Relu,
                LayerSpec::Dense { inputs, outputs },
            ],
        }
    }

    #[test]
    fn dense_mac_count() {
        let spec = ModelSpec {
            name: "d".into(),
            input_shape: [3, 1, 1],
            classes: 2,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 3,
                    outputs: 2,
                },
            ],
        };
        let oc = count_ops(&spec).unwrap();
        assert_eq!(oc.total_macs_per_sample(), 6);
        // Raw input feeds the dense layer: nothing is activation-dependent.
        assert_eq!(oc.activation_macs_per_sample(), 0);
    }

    #[test]
    fn pointwise_conv_mac_count() {
        // 1x1 conv over c_in=2 -> c_out=3 on 4x4: 4*4*3*1*1*2 = 96.
        let spec = ModelSpec {
            name: "c".into(),
            input_shape: [2, 4, 4],
            classes: 3,
            layers: vec![
                LayerSpec::PointwiseConv {
                    in_channels: 2,
                    out_channels: 3,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    inputs: 3,
                    outputs: 3,
                },
            ],
        };
        let oc = count_ops(&spec).unwrap();
        assert_eq!(oc.entries[0].total_macs, 96);
    }

    #[test]
    fn depthwise_and_conv_formulas() {
        let spec = ModelSpec {
            name: "c".into(),
            input_shape: [2, 6, 6],
            classes: 2,
            layers: vec![
                LayerSpec::DepthwiseConv {
                    channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    in_channels: 2,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 2,
                },
            ],
        };
        let oc = count_ops(&spec).unwrap();
        // depthwise: 6*6*2*3*3 = 648
        assert_eq!(oc.entries[0].total_macs, 648);
        // conv (4x4 out): 4*4*4*3*3*2 = 1152; pad 0, so every MAC reads a
        // real element of the preceding relu: fully activation-dependent.
        assert_eq!(oc.entries[1].total_macs, 1152);
        assert_eq!(oc.entries[1].activation_macs, 1152);
        // dense after pool: opaque source.
        assert_eq!(oc.entries[2].activation_macs, 0);
        for e in &oc.entries {
            assert!(e.activation_macs <= e.total_macs);
        }
    }

    #[test]
    fn spec_example_dense_skip_accounting() {
        // activations [0, 2, 0] into dense 3 -> 2 with e_mac 1.0, e_skip 0.1,
        // overhead 0: executed 2, skipped 4, energy 2.4, worst 6.0, ratio 0.4.
        let spec = dense_spec(3, 2);
        let oc = count_ops(&spec).unwrap();
        let act = Tensor::new(vec![1, 3], vec![0.0, 2.0, 0.0]).unwrap();
        let trace = ActivationTrace {
            batch: 1,
            entries: vec![TraceEntry {
                layer: 1,
                sub: 0,
                elements: 3,
                nonzero: 1,
                activations: act,
            }],
        };
        let profile = DeviceProfile {
            name: "unit".into(),
            e_mac_nj: 1.0,
            e_skip_nj: 0.1,
            base_overhead_nj: 0.0,
            battery_capacity_mah: 1000.0,
            battery_voltage_v: 3.7,
            tier: DeviceTier::LowEnd,
        };
        let report = simulate_energy(&oc, &trace, &profile).unwrap();
        assert_eq!(report.executed_macs, 2);
        assert_eq!(report.skipped_macs, 4);
        assert!((report.energy_per_inference_nj - 2.4).abs() < 1e-9);
        assert!((report.worst_case_per_inference_nj - 6.0).abs() < 1e-9);
        assert!((report.energy_gap_ratio - 0.4).abs() < 1e-9);
    }

    #[test]
    fn all_zero_and_all_dense_extremes() {
        let spec = dense_spec(4, 3);
        let oc = count_ops(&spec).unwrap();
        let profile = DeviceProfile {
            name: "unit".into(),
            e_mac_nj: 2.0,
            e_skip_nj: 0.5,
            base_overhead_nj: 10.0,
            battery_capacity_mah: 1000.0,
            battery_voltage_v: 3.7,
            tier: DeviceTier::HighEnd,
        };
        let zero = Tensor::zeros(&[1, 4]);
        let trace0 = ActivationTrace {
            batch: 1,
            entries: vec![TraceEntry {
                layer: 1,
                sub: 0,
                elements: 4,
                nonzero: 0,
                activations: zero,
            }],
        };
        let r0 = simulate_energy(&oc, &trace0, &profile).unwrap();
        // Floor: all skipped.
        assert_eq!(r0.executed_macs, 0);
        assert_eq!(r0.skipped_macs, 12);
        assert!((r0.energy_per_inference_nj - (12.0 * 0.5 + 10.0)).abs() < 1e-9);

        let ones = Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap();
        let trace1 = ActivationTrace {
            batch: 1,
            entries: vec![TraceEntry {
                layer: 1,
                sub: 0,
                elements: 4,
                nonzero: 4,
                activations: ones,
            }],
        };
        let r1 = simulate_energy(&oc, &trace1, &profile).unwrap();
        // Ceiling: density 1 means worst case, ratio exactly 1.
        assert_eq!(r1.skipped_macs, 0);
        assert!((r1.energy_per_inference_nj - r1.worst_case_per_inference_nj).abs() < 1e-12);
        assert!((r1.energy_gap_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_measurement() {
        let t = Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 5.0]).unwrap();
        let trace = ActivationTrace {
            batch: 1,
            entries: vec![TraceEntry {
                layer: 0,
                sub: 0,
                elements: 4,
                nonzero: 2,
                activations: t,
            }],
        };
        let (per_layer, overall) = measure_density(&trace);
        assert_eq!(per_layer, vec![0.5]);
        assert_eq!(overall, 0.5);
    }

    #[test]
    fn overall_density_is_weighted_mean() {
        let t1 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(); // density 0.5
        let t2 = Tensor::new(vec![6], vec![1.0; 6]).unwrap(); // density 1.0
        let trace = ActivationTrace {
            batch: 1,
            entries: vec![
                TraceEntry {
                    layer: 0,
                    sub: 0,
                    elements: 2,
                    nonzero: 1,
                    activations: t1,
                },
                TraceEntry {
                    layer: 1,
                    sub: 0,
                    elements: 6,
                    nonzero: 6,
                    activations: t2,
                },
            ],
        };
        let (per_layer, overall) = measure_density(&trace);
        let weighted = (per_layer[0] * 2.0 + per_layer[1] * 6.0) / 8.0;
        assert!((overall - weighted).abs() < 1e-12);
        assert!((overall - 7.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn battery_drain_examples() {
        let profile = DeviceProfile {
            name: "p".into(),
            e_mac_nj: 1.0,
            e_skip_nj: 0.0,
            base_overhead_nj: 0.0,
            battery_capacity_mah: 1000.0,
            battery_voltage_v: 3.7,
            tier: DeviceTier::LowEnd,
        };
        assert_eq!(battery_drain(5e6, 0, &profile), 0.0);
        // 2 mJ * 2000 inferences = 4 J of 13320 J -> 0.03003%.
        let pct = battery_drain(2e6, 2000, &profile);
        assert!((pct - 0.030_03).abs() < 1e-4, "{pct}");
        // Halving capacity doubles the percentage.
        let half = DeviceProfile {
            battery_capacity_mah: 500.0,
            ..profile
        };
        assert!((battery_drain(2e6, 2000, &half) - 2.0 * pct).abs() < 1e-9);
    }

    #[test]
    fn latency_scale_examples() {
        let mk = |executed: u64, skipped: u64, ratio: f64| EnergyReport {
            profile: "p".into(),
            inferences: 1,
            executed_macs: executed,
            skipped_macs: skipped,
            total_macs: executed + skipped,
            energy_per_inference_nj: 0.0,
            worst_case_per_inference_nj: 1.0,
            energy_gap_ratio: 1.0,
            per_layer_density: vec![],
            overall_density: 0.0,
            battery_drain_percent: 0.0,
            skip_cost_ratio: ratio,
        };
        // Equal executed MACs, no skips: equal scale.
        assert_eq!(
            latency_scale(&mk(100, 0, 0.1)),
            latency_scale(&mk(100, 0, 0.5))
        );
        // Ratio of scales equals ratio of executed + r * skipped.
        let a = mk(100, 50, 0.2);
        let b = mk(200, 100, 0.2);
        let expect = (100.0 + 0.2 * 50.0) / (200.0 + 0.2 * 100.0);
        assert!((latency_scale(&a) / latency_scale(&b) - expect).abs() < 1e-12);
        // Density 1 vs 0.5 with e_skip = 0 on one layer: scale ratio 2.
        let full = mk(100, 0, 0.0);
        let half = mk(50, 50, 0.0);
        assert!((latency_scale(&full) / latency_scale(&half) - 2.0).abs() < 1e-12);
    }

    /// Brute-force per-MAC oracle: iterates every output position, kernel
    /// offset and channel; a MAC is skipped iff its activation operand is a
    /// real (non-padding) element of the consumed trace entry with value
    /// exactly zero.
    fn oracle_counts(spec: &ModelSpec, trace: &ActivationTrace) -> (u64, u64) {
        let units = spec.mac_units().unwrap();
        let mut executed = 0u64;
        let mut skipped = 0u64;
        for unit in &units {
            let act = match unit.source {
                ValueSource::Trace(t) => Some(&trace.entries[t]),
                _ => None,
            };
            for s in 0..trace.batch {
                match &unit.geometry {
                    MacGeometry::Dense { inputs, outputs } => {
                        for _o in 0..*outputs {
                            for i in 0..*inputs {
                                let is_skip = act.is_some_and(|te| {
                                    let per = te.elements / trace.batch;
                                    te.activations.data()[s * per + i] == 0.0
                                });
                                if is_skip {
                                    skipped += 1;
                                } else {
                                    executed += 1;
                                }
                            }
                        }
                    }
                    MacGeometry::Conv {
                        in_channels,
                        out_channels,
                        in_h,
                        in_w,
                        kernel,
                        stride,
                        padding,
                    } => {
                        let oh = (in_h + 2 * padding - kernel) / stride + 1;
                        let ow = (in_w + 2 * padding - kernel) / stride + 1;
                        for _co in 0..*out_channels {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    for ci in 0..*in_channels {
                                        for ky in 0..*kernel {
                                            for kx in 0..*kernel {
                                                let y = (oy * stride + ky) as isize
                                                    - *padding as isize;
                                                let x = (ox * stride + kx) as isize
                                                    - *padding as isize;
                                                let pad = y < 0
                                                    || y >= *in_h as isize
                                                    || x < 0
                                                    || x >= *in_w as isize;
                                                let is_skip = !pad
                                                    && act.is_some_and(|te| {
                                                        let per = te.elements / trace.batch;
                                                        let idx = s * per
                                                            + (ci * in_h + y as usize) * in_w
                                                            + x as usize;
                                                        te.activations.data()[idx] == 0.0
                                                    });
                                                if is_skip {
                                                    skipped += 1;
                                                } else {
                                                    executed += 1;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    MacGeometry::Depthwise {
                        channels,
                        in_h,
                        in_w,
                        kernel,
                        stride,
                        padding,
                    } => {
                        let oh = (in_h + 2 * padding - kernel) / stride + 1;
                        let ow = (in_w + 2 * padding - kernel) / stride + 1;
                        for ch in 0..*channels {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    for ky in 0..*kernel {
                                        for kx in 0..*kernel {
                                            let y =
                                                (oy * stride + ky) as isize - *padding as isize;
                                            let x =
                                                (ox * stride + kx) as isize - *padding as isize;
                                            let pad = y < 0
                                                || y >= *in_h as isize
                                                || x < 0
                                                || x >= *in_w as isize;
                                            let is_skip = !pad
                                                && act.is_some_and(|te| {
                                                    let per = te.elements / trace.batch;
                                                    let idx = s * per
                                                        + (ch * in_h + y as usize) * in_w
                                                        + x as usize;
                                                    te.activations.data()[idx] == 0.0
                                                });
                                            if is_skip {
                                                skipped += 1;
                                            } else {
                                                executed += 1;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (executed, skipped)
    }

    #[test]
    fn simulate_energy_matches_per_mac_oracle() {
        let profile = DeviceProfile::s20_like();
        for seed in 0..10u64 {
            let spec = if seed % 2 == 0 {
                build_m1_micronet([3, 6, 6], 3)
            } else {
                build_m2_miniresnet([3, 6, 6], 3)
            };
            let params = init_params(&spec, seed);
            let batch = seeded_tensor_in(&[2, 3, 6, 6], 7_000 + seed, 0.0, 1.0);
            let (_, trace) = forward(&spec, &params, &batch, true).unwrap();
            let oc = count_ops(&spec).unwrap();
            let report = simulate_energy(&oc, &trace, &profile).unwrap();
            let (executed, skipped) = oracle_counts(&spec, &trace);
            assert_eq!(report.executed_macs, executed, "seed {seed}");
            assert_eq!(report.skipped_macs, skipped, "seed {seed}");
        }
    }

    #[test]
    fn energy_monotone_in_nonzero_count() {
        // Flipping a zero element that feeds a MAC layer to nonzero strictly
        // increases actual energy.
        let spec = build_m2_miniresnet([3, 6, 6], 3);
        let params = init_params(&spec, 3);
        let batch = seeded_tensor_in(&[1, 3, 6, 6], 17, 0.0, 1.0);
        let (_, mut trace) = forward(&spec, &params, &batch, true).unwrap();
        let oc = count_ops(&spec).unwrap();
        let profile = DeviceProfile::nexus5_like();
        let before = simulate_energy(&oc, &trace, &profile).unwrap();
        // Trace entry 0 (stem relu) feeds block1 conv1.
        let e0 = &mut trace.entries[0];
        let zero_pos = e0
            .activations
            .data()
            .iter()
            .position(|&v| v == 0.0)
            .expect("stem relu has zeros");
        e0.activations.data_mut()[zero_pos] = 1.0;
        e0.nonzero += 1;
        let after = simulate_energy(&oc, &trace, &profile).unwrap();
        assert!(after.energy_per_inference_nj > before.energy_per_inference_nj);
        assert!(after.skipped_macs < before.skipped_macs);
    }

    #[test]
    fn bounds_hold_on_random_traces() {
        for seed in 0..5u64 {
            let spec = build_m1_micronet([3, 6, 6], 3);
            let params = init_params(&spec, seed);
            let batch = seeded_tensor_in(&[3, 3, 6, 6], 300 + seed, 0.0, 1.0);
            let (_, trace) = forward(&spec, &params, &batch, true).unwrap();
            let oc = count_ops(&spec).unwrap();
            for profile in [DeviceProfile::s20_like(), DeviceProfile::nexus5_like()] {
                let r = simulate_energy(&oc, &trace, &profile).unwrap();
                assert!(r.energy_per_inference_nj <= r.worst_case_per_inference_nj + 1e-9);
                assert!(r.energy_gap_ratio > 0.0 && r.energy_gap_ratio <= 1.0 + 1e-12);
                assert_eq!(r.skipped_macs + r.executed_macs, r.total_macs);
                assert!(r.skipped_macs <= oc.activation_macs_per_sample() * trace.batch as u64);
            }
        }
    }

    #[test]
    fn low_end_profile_always_drains_more() {
        // By construction: higher e_mac, smaller battery, and both
        // e_skip/e_mac and overhead/(e_mac - e_skip) smaller, which makes
        // the relative sponge increase at least as large. Check the
        // structural inequalities plus random workloads.
        let s20 = DeviceProfile::s20_like();
        let nexus = DeviceProfile::nexus5_like();
        assert!(nexus.e_skip_nj / nexus.e_mac_nj <= s20.e_skip_nj / s20.e_mac_nj);
        assert!(
            nexus.base_overhead_nj / (nexus.e_mac_nj - nexus.e_skip_nj)
                <= s20.base_overhead_nj / (s20.e_mac_nj - s20.e_skip_nj)
        );
        assert!(nexus.battery_joules() < s20.battery_joules());
        assert!(nexus.e_mac_nj > s20.e_mac_nj);

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let total: u64 = rng.random_range(1_000..10_000_000);
            let ex_v: u64 = rng.random_range(0..=total);
            let ex_s: u64 = rng.random_range(ex_v..=total);
            let energy = |p: &DeviceProfile, ex: u64| {
                ex as f64 * p.e_mac_nj + (total - ex) as f64 * p.e_skip_nj + p.base_overhead_nj
            };
            // Absolute drain strictly larger on the low-end device.
            let drain_s20 = battery_drain(energy(&s20, ex_v), 1000, &s20);
            let drain_nx = battery_drain(energy(&nexus, ex_v), 1000, &nexus);
            assert!(drain_nx > drain_s20);
            // Relative increase at least as large on the low-end device.
            let inc = |p: &DeviceProfile| (energy(p, ex_s) - energy(p, ex_v)) / energy(p, ex_v);
            assert!(inc(&nexus) >= inc(&s20) - 1e-12);
        }
    }

    #[test]
    fn misaligned_trace_is_rejected() {
        let spec = build_m2_miniresnet([3, 6, 6], 3);
        let params = init_params(&spec, 3);
        let batch = seeded_tensor_in(&[1, 3, 6, 6], 17, 0.0, 1.0);
        let (_, mut trace) = forward(&spec, &params, &batch, true).unwrap();
        let oc = count_ops(&spec).unwrap();
        trace.entries.truncate(1);
        assert!(matches!(
            simulate_energy(&oc, &trace, &DeviceProfile::s20_like()),
            Err(EnergyError::TraceLength { .. })
        ));
    }
}
