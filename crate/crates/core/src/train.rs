//! Vanilla and sponge training: the smooth nonzero-count surrogate, the SGD
//! loop with the activation-density penalty, and hyperparameter grid search
//! selecting for highest test accuracy and sponge effect.
//!
//! The sponge objective minimized per selected batch is
//! `cross_entropy - lambda * density_surrogate`, where the surrogate is the
//! normalized sum of `a^2 / (a^2 + sigma)` over all post-ReLU activations.
//! Vanilla training is exactly the `lambda = 0` case.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{
    forward, init_params, ActivationTrace, ModelError, ModelSpec, Parameters,
};
use crate::tensor::{Gradient, Tensor, TensorError};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sigma must be > 0, got {0}")]
    BadSigma(f64),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("grid has {cells} cells, more than the configured cap {cap}")]
    GridTooLarge { cells: usize, cap: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Vanilla,
    Sponge,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Sponge => "sponge",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sponge penalty weight.
    pub lambda: f32,
    /// Sharpness of the nonzero-count surrogate.
    pub sigma: f32,
    /// Fraction of batches that receive the sponge penalty.
    pub delta: f32,
    /// Accuracy tolerance used by grid-search selection.
    pub accuracy_slack: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Vanilla,
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            lambda: 0.0,
            sigma: 1e-4,
            delta: 1.0,
            accuracy_slack: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.mode == TrainMode::Vanilla && self.lambda != 0.0 {
            return Err(TrainError::InvalidConfig(
                "vanilla mode requires lambda = 0".into(),
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(TrainError::BadSigma(f64::from(self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(TrainError::InvalidConfig(format!(
                "delta must be in [0, 1], got {}",
                self.delta
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.accuracy_slack < 0.0 {
            return Err(TrainError::InvalidConfig(
                "accuracy_slack must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_density: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }

    pub fn final_density(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_density)
    }
}

/// Smooth, differentiable surrogate for the nonzero count:
/// `sum_k a_k^2 / (a_k^2 + sigma)`. Monotone nondecreasing in each `|a_k|`,
/// bounded by the element count, exact in the `sigma -> 0` limit.
pub fn l0_hat(activations: &Tensor, sigma: f32) -> Result<f64, TrainError> {
    if !(sigma > 0.0) {
        return Err(TrainError::BadSigma(f64::from(sigma)));
    }
    let s = f64::from(sigma);
    Ok(activations
        .data()
        .iter()
        .map(|&a| {
            let a2 = f64::from(a) * f64::from(a);
            a2 / (a2 + s)
        })
        .sum())
}

/// Elementwise derivative of [`l0_hat`]: `2 a sigma / (a^2 + sigma)^2`.
pub fn l0_hat_grad(activations: &Tensor, sigma: f32) -> Result<Gradient, TrainError> {
    if !(sigma > 0.0) {
        return Err(TrainError::BadSigma(f64::from(sigma)));
    }
    let s = f64::from(sigma);
    let data: Vec<f32> = activations
        .data()
        .iter()
        .map(|&a| {
            let af = f64::from(a);
            let denom = af * af + s;
            ((2.0 * af * s) / (denom * denom)) as f32
        })
        .collect();
    Ok(Tensor::new(activations.shape().to_vec(), data)?)
}

/// Normalized density surrogate over a whole trace, in `[0, 1]`, with its
/// per-entry gradients: `E = sum_layers l0_hat(a) / total element count`.
pub fn sponge_penalty(
    trace: &ActivationTrace,
    sigma: f32,
) -> Result<(f64, Vec<Gradient>), TrainError> {
    let total: usize = trace.total_elements();
    if total == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut value = 0.0f64;
    let mut grads = Vec::with_capacity(trace.entries.len());
    for entry in &trace.entries {
        value += l0_hat(&entry.activations, sigma)?;
        let mut g = l0_hat_grad(&entry.activations, sigma)?;
        let scale = 1.0 / total as f32;
        for v in g.data_mut() {
            *v *= scale;
        }
        grads.push(g);
    }
    Ok((value / total as f64, grads))
}

fn evaluate(
    spec: &ModelSpec,
    params: &Parameters,
    data: &Dataset,
    chunk: usize,
) -> Result<(f64, f64), TrainError> {
    let mut correct = 0usize;
    let mut nonzero = 0usize;
    let mut elements = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let (batch, labels) = data.batch(start, end);
        let (logits, trace) = forward(spec, params, &batch, true)?;
        let classes = spec.classes;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
        nonzero += trace.total_nonzero();
        elements += trace.total_elements();
        start = end;
    }
    let accuracy = correct as f64 / data.len() as f64;
    let density = if elements == 0 {
        0.0
    } else {
        nonzero as f64 / elements as f64
    };
    Ok((accuracy, density))
}

/// Minibatch SGD on `cross_entropy - lambda * density_surrogate`, with the
/// penalty applied to a seeded `delta` fraction of batches. Pure function of
/// `(spec, data, config)`: identical seeds give bit-identical parameters.
pub fn train(
    spec: &ModelSpec,
    train_data: &Dataset,
    test_data: &Dataset,
    config: &TrainConfig,
) -> Result<(Parameters, TrainHistory), TrainError> {
    config.validate()?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init_params(spec, derive_seed(config.seed, 0x1217));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5417));
    // The penalty coin flips come from their own stream and are always
    // consumed, so lambda = 0 runs are bit-identical to vanilla runs.
    let mut delta_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xde17));

    let per_sample_relu = spec.relu_elements_per_sample()?;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        let mut start = 0usize;
        let mut batch_idx = 0usize;
        while start < order.len() {
            let end = (start + config.batch_size).min(order.len());
            let idx = &order[start..end];
            let (batch, labels) = gather(train_data, idx);

            let coin: f32 = delta_rng.random();
            let apply_penalty =
                config.mode == TrainMode::Sponge && config.lambda > 0.0 && coin < config.delta;

            let out = if apply_penalty {
                let lambda = config.lambda;
                let sigma = config.sigma;
                let total = (per_sample_relu * idx.len()) as f32;
                // d(-lambda * E)/da = -lambda/total * d l0_hat/da
                let hook = move |_trace_idx: usize,
                                 act: &Tensor|
                      -> Result<Gradient, TensorError> {
                    let mut g = l0_hat_grad(act, sigma).map_err(|_| TensorError::NonFinite {
                        op: "l0_hat_grad",
                    })?;
                    let scale = -lambda / total;
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                    Ok(g)
                };
                crate::model::backward_opts(spec, &params, &batch, &labels, Some(&hook), false)
            } else {
                crate::model::backward_opts(spec, &params, &batch, &labels, None, false)
            };

            let out = out.map_err(|e| match e {
                ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::Divergence {
                    epoch,
                    batch: batch_idx,
                },
                other => TrainError::Model(other),
            })?;
            if !out.loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += out.loss;
            batches += 1;
            params = params
                .sgd_step(&out.grads, config.learning_rate)
                .map_err(|e| match e {
                    ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::Divergence {
                        epoch,
                        batch: batch_idx,
                    },
                    other => TrainError::Model(other),
                })?;
            start = end;
            batch_idx += 1;
        }
        let (test_accuracy, test_density) = evaluate(spec, &params, test_data, 64)?;
        history.epochs.push(EpochStats {
            train_loss: epoch_loss / batches as f64,
            test_accuracy,
            test_density,
        });
    }
    Ok((params, history))
}

fn gather(data: &Dataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let per = data.images.len() / data.len();
    let mut pixels = Vec::with_capacity(idx.len() * per);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        pixels.extend_from_slice(&data.images.data()[i * per..(i + 1) * per]);
        labels.push(data.labels[i]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&data.images.shape()[1..]);
    (
        Tensor::new(shape, pixels).expect("gather of validated dataset"),
        labels,
    )
}

/// Sponge effect between two runs: final sponge density minus final vanilla
/// density, in absolute density points.
pub fn sponge_effect(vanilla: &TrainHistory, sponge: &TrainHistory) -> f64 {
    sponge.final_density() - vanilla.final_density()
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// Candidate values for each searched hyperparameter. Cells are enumerated
/// in nested order: lambda (outer), sigma, delta, learning rate (inner).
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lambda: Vec<f32>,
    pub sigma: Vec<f32>,
    pub delta: Vec<f32>,
    pub learning_rate: Vec<f32>,
    pub max_cells: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambda: vec![0.5, 2.5, 10.0],
            sigma: vec![1e-2, 1e-4],
            delta: vec![0.5, 1.0],
            learning_rate: vec![0.05],
            max_cells: 36,
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> Vec<(f32, f32, f32, f32)> {
        let mut out = Vec::new();
        for &l in &self.lambda {
            for &s in &self.sigma {
                for &d in &self.delta {
                    for &lr in &self.learning_rate {
                        out.push((l, s, d, lr));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda.is_empty()
            || self.sigma.is_empty()
            || self.delta.is_empty()
            || self.learning_rate.is_empty()
        {
            return Err(TrainError::InvalidConfig(
                "grid value lists must be non-empty".into(),
            ));
        }
        let cells = self.cells().len();
        if cells > self.max_cells {
            return Err(TrainError::GridTooLarge {
                cells,
                cap: self.max_cells,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub index: usize,
    pub config: TrainConfig,
    pub final_accuracy: f64,
    pub final_density: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: TrainConfig,
    /// Set when no cell met the accuracy bar and the maximum-accuracy cell
    /// was returned instead.
    pub infeasible: bool,
    pub best_vanilla_accuracy: f64,
    pub cells: Vec<CellResult>,
    /// (learning rate, final accuracy) of each vanilla baseline.
    pub baselines: Vec<(f32, f64)>,
}

/// Selection rule: among cells whose accuracy is within `slack` of the best
/// vanilla accuracy, pick maximal density; ties break to higher accuracy,
/// then smaller lambda, then grid order. Returns (winner index, infeasible).
pub fn select_best(
    cells: &[CellResult],
    best_vanilla_accuracy: f64,
    slack: f64,
) -> (usize, bool) {
    assert!(!cells.is_empty(), "select_best on empty grid");
    let bar = best_vanilla_accuracy - slack;
    let feasible: Vec<&CellResult> = cells.iter().filter(|c| c.final_accuracy >= bar).collect();
    if feasible.is_empty() {
        let winner = cells
            .iter()
            .max_by(|a, b| {
                a.final_accuracy
                    .partial_cmp(&b.final_accuracy)
                    .unwrap()
                    .then(b.index.cmp(&a.index))
            })
            .unwrap();
        return (winner.index, true);
    }
    let winner = feasible
        .iter()
        .max_by(|a, b| {
            a.final_density
                .partial_cmp(&b.final_density)
                .unwrap()
                .then(a.final_accuracy.partial_cmp(&b.final_accuracy).unwrap())
                .then(b.config.lambda.partial_cmp(&a.config.lambda).unwrap())
                .then(b.index.cmp(&a.index))
        })
        .unwrap();
    (winner.index, false)
}

/// Train one model per grid cell (sponge mode) plus one vanilla baseline per
/// candidate learning rate, then apply [`select_best`]. Cells run on worker
/// threads; each owns an RNG derived from `(base.seed, cell index)`, so the
/// result is independent of scheduling.
pub fn grid_search(
    spec: &ModelSpec,
    train_data: &Dataset,
    test_data: &Dataset,
    grid: &GridSpec,
    base: &TrainConfig,
) -> Result<GridSearchResult, TrainError> {
    grid.validate()?;
    let cells = grid.cells();

    let make_cell_config = |index: usize, (lambda, sigma, delta, lr): (f32, f32, f32, f32)| {
        TrainConfig {
            mode: TrainMode::Sponge,
            learning_rate: lr,
            lambda,
            sigma,
            delta,
            seed: derive_seed(base.seed, 0xce11 + index as u64),
            ..base.clone()
        }
    };
    let make_baseline_config = |idx: usize, lr: f32| TrainConfig {
        mode: TrainMode::Vanilla,
        learning_rate: lr,
        lambda: 0.0,
        seed: derive_seed(base.seed, 0xba5e + idx as u64),
        ..base.clone()
    };

    // Job list: baselines first, then cells.
    enum Job {
        Baseline(usize, f32),
        Cell(usize, (f32, f32, f32, f32)),
    }
    let mut jobs: Vec<Job> = grid
        .learning_rate
        .iter()
        .enumerate()
        .map(|(i, &lr)| Job::Baseline(i, lr))
        .collect();
    jobs.extend(
        cells
            .iter()
            .enumerate()
            .map(|(i, &c)| Job::Cell(i, c)),
    );

    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());

    let mut baseline_out: Vec<Option<Result<(f32, f64), TrainError>>> =
        (0..grid.learning_rate.len()).map(|_| None).collect();
    let mut cell_out: Vec<Option<Result<CellResult, TrainError>>> =
        (0..cells.len()).map(|_| None).collect();

    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let jobs = &jobs;
        let results: Vec<_> = (0..threads)
            .map(|_| {
                let next = &next;
                scope.spawn(move || {
                    let mut local: Vec<(usize, Result<(TrainConfig, f64, f64), TrainError>)> =
                        Vec::new();
                    loop {
                        let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if j >= jobs.len() {
                            break;
                        }
                        let (cfg, job_id) = match &jobs[j] {
                            Job::Baseline(i, lr) => (make_baseline_config(*i, *lr), j),
                            Job::Cell(i, c) => (make_cell_config(*i, *c), j),
                        };
                        let res = train(spec, train_data, test_data, &cfg).map(|(_, h)| {
                            (cfg, h.final_accuracy(), h.final_density())
                        });
                        local.push((job_id, res));
                    }
                    local
                })
            })
            .collect();
        for handle in results {
            for (job_id, res) in handle.join().expect("grid worker panicked") {
                match &jobs[job_id] {
                    Job::Baseline(i, lr) => {
                        baseline_out[*i] = Some(res.map(|(_, acc, _)| (*lr, acc)));
                    }
                    Job::Cell(i, _) => {
                        cell_out[*i] = Some(res.map(|(cfg, acc, dens)| CellResult {
                            index: *i,
                            config: cfg,
                            final_accuracy: acc,
                            final_density: dens,
                        }));
                    }
                }
            }
        }
    });

    let baselines = baseline_out
        .into_iter()
        .map(|r| r.expect("baseline job ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let cell_results = cell_out
        .into_iter()
        .map(|r| r.expect("cell job ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let best_vanilla_accuracy = baselines
        .iter()
        .map(|&(_, acc)| acc)
        .fold(f64::NEG_INFINITY, f64::max);
    let (winner, infeasible) = select_best(&cell_results, best_vanilla_accuracy, base.accuracy_slack);
    Ok(GridSearchResult {
        best: cell_results[winner].config.clone(),
        infeasible,
        best_vanilla_accuracy,
        cells: cell_results,
        baselines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{rel_err, seeded_tensor};
    use crate::data::{synth_dataset, Split};
    use crate::model::build_m1_micronet;
    use crate::tensor::finite_diff_grad;

    #[test]
    fn l0_hat_zero_input_is_zero() {
        let a = Tensor::zeros(&[3]);
        assert_eq!(l0_hat(&a, 0.5).unwrap(), 0.0);
        assert_eq!(l0_hat(&a, 1e-9).unwrap(), 0.0);
    }

    #[test]
    fn l0_hat_analytic_values() {
        let a = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!((l0_hat(&a, 1.0).unwrap() - 0.5).abs() < 1e-9);
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert!((l0_hat(&b, 1e-9).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn l0_hat_rejects_bad_sigma() {
        let a = Tensor::zeros(&[1]);
        assert!(matches!(l0_hat(&a, 0.0), Err(TrainError::BadSigma(_))));
        assert!(matches!(l0_hat(&a, -1.0), Err(TrainError::BadSigma(_))));
    }

    #[test]
    fn l0_hat_bounds_and_monotonicity() {
        for seed in 0..10 {
            let a = seeded_tensor(&[40], seed, 3.0);
            for &sigma in &[1e-6f32, 1e-3, 0.1, 1.0] {
                let v = l0_hat(&a, sigma).unwrap();
                assert!((0.0..=a.len() as f64).contains(&v));
            }
            // Scaling one activation's magnitude up never decreases l0_hat.
            let sigma = 0.01;
            let base = l0_hat(&a, sigma).unwrap();
            let mut scaled = a.clone();
            scaled.data_mut()[7] *= 3.0;
            assert!(l0_hat(&scaled, sigma).unwrap() >= base - 1e-12);
        }
    }

    #[test]
    fn l0_hat_grad_analytic_values() {
        let a = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let g = l0_hat_grad(&a, 1.0).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn l0_hat_grad_matches_finite_differences() {
        for seed in 0..5 {
            let a = seeded_tensor(&[20], 90 + seed, 1.5);
            for &sigma in &[0.5f32, 0.05] {
                let g = l0_hat_grad(&a, sigma).unwrap();
                let fd = finite_diff_grad(|t| l0_hat(t, sigma).unwrap(), &a, 1e-3);
                assert!(
                    rel_err(g.data(), fd.data()) <= 1e-3,
                    "seed {seed} sigma {sigma}"
                );
            }
        }
    }

    fn trace_of(tensors: Vec<Tensor>) -> ActivationTrace {
        let entries = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| crate::model::TraceEntry {
                layer: i,
                sub: 0,
                elements: t.len(),
                nonzero: t.count_nonzero(),
                activations: t,
            })
            .collect();
        ActivationTrace { batch: 1, entries }
    }

    #[test]
    fn penalty_zero_trace_is_zero() {
        let trace = trace_of(vec![Tensor::zeros(&[8]), Tensor::zeros(&[4])]);
        let (v, grads) = sponge_penalty(&trace, 0.01).unwrap();
        assert_eq!(v, 0.0);
        assert!(grads
            .iter()
            .all(|g| g.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn penalty_saturates_at_one() {
        // Activations far above sqrt(sigma).
        let big = Tensor::new(vec![6], vec![5.0; 6]).unwrap();
        let trace = trace_of(vec![big]);
        let (v, _) = sponge_penalty(&trace, 1e-6).unwrap();
        assert!(v > 0.999_999);
        assert!(v <= 1.0);
    }

    #[test]
    fn penalty_equals_weighted_mean_of_per_layer_values() {
        let t1 = seeded_tensor(&[12], 7, 1.0);
        let t2 = seeded_tensor(&[30], 8, 1.0);
        let sigma = 0.03;
        let expect = (l0_hat(&t1, sigma).unwrap() + l0_hat(&t2, sigma).unwrap()) / 42.0;
        let trace = trace_of(vec![t1, t2]);
        let (v, grads) = sponge_penalty(&trace, sigma).unwrap();
        assert!((v - expect).abs() < 1e-12);
        assert_eq!(grads.len(), 2);
    }

    fn small_task() -> (ModelSpec, Dataset, Dataset) {
        let spec = build_m1_micronet([8, 8, 8], 4);
        let train = synth_dataset(11, 320, 4, [8, 8, 8], 0.05, Split::Train).unwrap();
        let test = synth_dataset(11, 160, 4, [8, 8, 8], 0.05, Split::Test).unwrap();
        (spec, train, test)
    }

    /// Cheaper task for the pure-determinism tests.
    fn micro_task() -> (ModelSpec, Dataset, Dataset) {
        let spec = build_m1_micronet([4, 5, 5], 3);
        let train = synth_dataset(11, 48, 3, [4, 5, 5], 0.05, Split::Train).unwrap();
        let test = synth_dataset(11, 24, 3, [4, 5, 5], 0.05, Split::Test).unwrap();
        (spec, train, test)
    }

    #[test]
    fn vanilla_training_learns_separable_data() {
        let (spec, train_d, test_d) = small_task();
        let config = TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.02,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, history) = train(&spec, &train_d, &test_d, &config).unwrap();
        assert!(
            history.final_accuracy() >= 0.95,
            "accuracy {}",
            history.final_accuracy()
        );
        assert_eq!(history.epochs.len(), 30);
        for e in &history.epochs {
            assert!((0.0..=1.0).contains(&e.test_density));
        }
    }

    #[test]
    fn large_lambda_raises_density_over_vanilla() {
        let (spec, train_d, test_d) = small_task();
        let vanilla_cfg = TrainConfig {
            epochs: 25,
            batch_size: 16,
            learning_rate: 0.02,
            seed: 5,
            ..TrainConfig::default()
        };
        let sponge_cfg = TrainConfig {
            mode: TrainMode::Sponge,
            lambda: 10.0,
            sigma: 1e-4,
            delta: 1.0,
            ..vanilla_cfg.clone()
        };
        let (_, vh) = train(&spec, &train_d, &test_d, &vanilla_cfg).unwrap();
        let (_, sh) = train(&spec, &train_d, &test_d, &sponge_cfg).unwrap();
        assert!(
            sponge_effect(&vh, &sh) >= 0.10,
            "vanilla {} sponge {}",
            vh.final_density(),
            sh.final_density()
        );
    }

    #[test]
    fn lambda_zero_sponge_is_bitwise_vanilla() {
        let (spec, train_d, test_d) = micro_task();
        let vanilla_cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let sponge_cfg = TrainConfig {
            mode: TrainMode::Sponge,
            lambda: 0.0,
            delta: 1.0,
            ..vanilla_cfg.clone()
        };
        let (pv, _) = train(&spec, &train_d, &test_d, &vanilla_cfg).unwrap();
        let (ps, _) = train(&spec, &train_d, &test_d, &sponge_cfg).unwrap();
        assert_eq!(pv, ps);
    }

    #[test]
    fn train_is_deterministic() {
        let (spec, train_d, test_d) = micro_task();
        let config = TrainConfig {
            mode: TrainMode::Sponge,
            lambda: 1.0,
            epochs: 3,
            batch_size: 16,
            seed: 31,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&spec, &train_d, &test_d, &config).unwrap();
        let (p2, h2) = train(&spec, &train_d, &test_d, &config).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn divergence_aborts_with_location() {
        let (spec, train_d, test_d) = micro_task();
        let config = TrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 1e4, // guaranteed blow-up
            seed: 2,
            ..TrainConfig::default()
        };
        match train(&spec, &train_d, &test_d, &config) {
            Err(TrainError::Divergence { epoch, batch }) => {
                assert!(epoch < 8);
                let _ = batch;
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn random_labels_stay_at_chance() {
        // No learning signal: labels decoupled from images.
        let (spec, mut train_d, mut test_d) = micro_task();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for l in train_d.labels.iter_mut() {
            *l = (rng.random::<u32>() % 3) as usize;
        }
        for l in test_d.labels.iter_mut() {
            *l = (rng.random::<u32>() % 3) as usize;
        }
        let config = TrainConfig {
            epochs: 15,
            batch_size: 16,
            learning_rate: 0.02,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, history) = train(&spec, &train_d, &test_d, &config).unwrap();
        // Chance is 1/3; allow a generous band for a 24-sample test set.
        assert!(
            history.final_accuracy() < 0.65,
            "accuracy {} should stay near chance",
            history.final_accuracy()
        );
    }

    #[test]
    fn vanilla_mode_rejects_nonzero_lambda() {
        let config = TrainConfig {
            lambda: 1.0,
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn selection_rule_forced_example() {
        // {(acc .80, dens .40), (acc .79, dens .70), (acc .60, dens .90)},
        // slack .02 and vanilla accuracy .80: the second cell wins.
        let mk = |index, acc, dens| CellResult {
            index,
            config: TrainConfig::default(),
            final_accuracy: acc,
            final_density: dens,
        };
        let cells = vec![mk(0, 0.80, 0.40), mk(1, 0.79, 0.70), mk(2, 0.60, 0.90)];
        let (winner, infeasible) = select_best(&cells, 0.80, 0.02);
        assert_eq!(winner, 1);
        assert!(!infeasible);
    }

    #[test]
    fn selection_single_cell_and_empty_feasible() {
        let mk = |index, acc, dens| CellResult {
            index,
            config: TrainConfig::default(),
            final_accuracy: acc,
            final_density: dens,
        };
        let single = vec![mk(0, 0.9, 0.5)];
        assert_eq!(select_best(&single, 0.9, 0.02), (0, false));

        let cells = vec![mk(0, 0.50, 0.9), mk(1, 0.60, 0.2)];
        let (winner, infeasible) = select_best(&cells, 0.95, 0.02);
        assert_eq!(winner, 1, "falls back to max accuracy");
        assert!(infeasible);
    }

    #[test]
    fn selection_tie_breaks() {
        let mk = |index, acc, dens, lambda| CellResult {
            index,
            config: TrainConfig {
                lambda,
                mode: TrainMode::Sponge,
                ..TrainConfig::default()
            },
            final_accuracy: acc,
            final_density: dens,
        };
        // Equal density: higher accuracy wins.
        let cells = vec![mk(0, 0.90, 0.7, 1.0), mk(1, 0.95, 0.7, 1.0)];
        assert_eq!(select_best(&cells, 0.95, 0.10).0, 1);
        // Equal density and accuracy: smaller lambda wins.
        let cells = vec![mk(0, 0.90, 0.7, 5.0), mk(1, 0.90, 0.7, 1.0)];
        assert_eq!(select_best(&cells, 0.90, 0.10).0, 1);
        // Full tie: earlier grid order wins.
        let cells = vec![mk(0, 0.90, 0.7, 1.0), mk(1, 0.90, 0.7, 1.0)];
        assert_eq!(select_best(&cells, 0.90, 0.10).0, 0);
    }

    #[test]
    fn grid_search_selected_density_dominates_feasible_cells() {
        let (spec, train_d, test_d) = micro_task();
        let base = TrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 0.02,
            seed: 17,
            accuracy_slack: 0.05,
            ..TrainConfig::default()
        };
        let grid = GridSpec {
            lambda: vec![0.5, 8.0],
            sigma: vec![1e-3],
            delta: vec![1.0],
            learning_rate: vec![0.02],
            max_cells: 16,
        };
        let result = grid_search(&spec, &train_d, &test_d, &grid, &base).unwrap();
        assert_eq!(result.cells.len(), 2);
        let bar = result.best_vanilla_accuracy - base.accuracy_slack;
        let best_cell = result
            .cells
            .iter()
            .find(|c| c.config.lambda == result.best.lambda)
            .unwrap();
        for c in &result.cells {
            if c.final_accuracy >= bar {
                assert!(best_cell.final_density >= c.final_density);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn l0_hat_bounded_and_zero_iff_zero(
            values in proptest::collection::vec(-10.0f32..10.0, 1..60),
            sigma in 1e-6f32..1.0,
        ) {
            let t = Tensor::new(vec![values.len()], values.clone()).unwrap();
            let v = l0_hat(&t, sigma).unwrap();
            proptest::prop_assert!(v >= 0.0 && v <= t.len() as f64);
            let all_zero = values.iter().all(|&x| x == 0.0);
            proptest::prop_assert_eq!(v == 0.0, all_zero);
        }

        #[test]
        fn l0_hat_monotone_in_magnitude(
            values in proptest::collection::vec(-5.0f32..5.0, 2..40),
            idx in 0usize..40,
            scale in 1.0f32..4.0,
            sigma in 1e-4f32..0.5,
        ) {
            let idx = idx % values.len();
            let t = Tensor::new(vec![values.len()], values.clone()).unwrap();
            let base = l0_hat(&t, sigma).unwrap();
            let mut scaled = values;
            scaled[idx] *= scale;
            let t2 = Tensor::new(vec![scaled.len()], scaled).unwrap();
            proptest::prop_assert!(l0_hat(&t2, sigma).unwrap() >= base - 1e-9);
        }
    }

    #[test]
    fn grid_too_large_is_rejected() {
        let grid = GridSpec {
            lambda: vec![1.0; 5],
            sigma: vec![1e-3; 3],
            delta: vec![1.0; 2],
            learning_rate: vec![0.05, 0.1],
            max_cells: 36,
        };
        assert!(matches!(
            grid.validate(),
            Err(TrainError::GridTooLarge { cells: 60, cap: 36 })
        ));
    }
}

