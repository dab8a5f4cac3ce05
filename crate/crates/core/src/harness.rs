//! Experiment orchestration: generate data for a grid of (N, d) cells, fit
//! both VAE variants from many seeded restarts, and aggregate how far the
//! final losses deviate from the closed-form bound.
//!
//! Seeds are derived from one master seed with tagged streams
//! (`data`/`split`/`init`/`train`, see [`crate::rng::derive_seed`]), so a
//! spec file plus its master seed reproduces every artifact byte for byte.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closedform::{center_targets, elbo_lower_bound, ClosedFormError, ClosedFormSolution};
use crate::datagen::{
    default_variances, generate_dataset, BinaryDataset, DataGenError, GenConfig,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::vae::{
    apply_preinit, build_model, fit, split_train_test, TrainConfig, TrainLog, VaeArchitecture,
    VaeError, Variant,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("deviation needs a positive bound, got {0}")]
    NonPositiveBound(f64),
    #[error(transparent)]
    DataGen(#[from] DataGenError),
    #[error(transparent)]
    ClosedForm(#[from] ClosedFormError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Canonical,
    Deep,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Canonical => "canonical",
            ArchKind::Deep => "deep",
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Preinit => "preinit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub n: usize,
    pub d: usize,
}

/// Full description of one experiment sweep. Mirrors the JSON spec format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub grid: Vec<GridCell>,
    pub k: usize,
    pub restarts: usize,
    pub architectures: Vec<ArchKind>,
    pub train: TrainConfig,
    pub master_seed: u64,
    /// Component variances of the generator; defaults to (0.09, 0.25).
    #[serde(default)]
    pub variances: Option<Vec<f64>>,
    /// E1 width of canonical nets.
    #[serde(default = "default_canonical_e1")]
    pub canonical_e1: usize,
    /// Encoder hidden widths of deep nets.
    #[serde(default = "default_deep_encoder")]
    pub deep_encoder: Vec<usize>,
    /// Decoder hidden widths of deep nets.
    #[serde(default = "default_deep_decoder")]
    pub deep_decoder: Vec<usize>,
}

fn default_canonical_e1() -> usize {
    200
}
fn default_deep_encoder() -> Vec<usize> {
    vec![400, 200]
}
fn default_deep_decoder() -> Vec<usize> {
    vec![200, 400]
}

impl ExperimentSpec {
    /// Desk-scale sweep: d in {50, 100, 200} x N in {100, 2000, 10000},
    /// 10 canonical restarts per cell.
    ///
    /// The batch size is 10 so that the N = 2000 cells walk twice the
    /// per-epoch optimizer step count of the reference protocol (batch 100
    /// at N = 10000); at desk scale the smaller sample leaves the plain
    /// variant short of the bound otherwise.
    pub fn desk_default(master_seed: u64) -> Self {
        let mut train = TrainConfig::with_seed(0);
        train.batch_size = 10;
        Self {
            grid: [50usize, 100, 200]
                .iter()
                .flat_map(|&d| {
                    [100usize, 2000, 10000]
                        .iter()
                        .map(move |&n| GridCell { n, d })
                })
                .collect(),
            k: 2,
            restarts: 10,
            architectures: vec![ArchKind::Canonical],
            train,
            master_seed,
            variances: None,
            canonical_e1: default_canonical_e1(),
            deep_encoder: default_deep_encoder(),
            deep_decoder: default_deep_decoder(),
        }
    }

    /// The full-scale sweep: d in {200, 400, 1000} x N in {100, 5000, 10000},
    /// 100 restarts, both architectures at their reference widths. This is
    /// multi-day work on a workstation; prefer [`desk_default`](Self::desk_default).
    pub fn full_default(master_seed: u64) -> Self {
        Self {
            grid: [200usize, 400, 1000]
                .iter()
                .flat_map(|&d| {
                    [100usize, 5000, 10000]
                        .iter()
                        .map(move |&n| GridCell { n, d })
                })
                .collect(),
            k: 2,
            restarts: 100,
            architectures: vec![ArchKind::Canonical, ArchKind::Deep],
            train: TrainConfig::with_seed(0),
            master_seed,
            variances: None,
            canonical_e1: 2000,
            deep_encoder: vec![2000, 1000],
            deep_decoder: vec![1000, 2000],
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.grid.is_empty() {
            return Err(HarnessError::Spec("grid must not be empty".into()));
        }
        if self.restarts == 0 {
            return Err(HarnessError::Spec("need at least one restart".into()));
        }
        if self.architectures.is_empty() {
            return Err(HarnessError::Spec("need at least one architecture".into()));
        }
        if self.k == 0 {
            return Err(HarnessError::Spec("k must be at least 1".into()));
        }
        Ok(())
    }

    fn arch_for(&self, kind: ArchKind, d: usize, variant: Variant) -> VaeArchitecture {
        match kind {
            ArchKind::Canonical => {
                VaeArchitecture::canonical(d, self.k, self.canonical_e1, variant)
            }
            ArchKind::Deep => VaeArchitecture::deep(
                self.deep_encoder.clone(),
                self.k,
                self.deep_decoder.clone(),
                variant,
            ),
        }
    }
}

/// Signed percentage deviation of a loss from the bound `-L_hat`.
///
/// Negative means the loss came in below the bound. The bound must be
/// positive (it is `-L_hat`, which is positive for binary data).
pub fn deviation_pct(loss: f64, bound: f64) -> Result<f64, HarnessError> {
    if bound.is_nan() || bound <= 0.0 {
        return Err(HarnessError::NonPositiveBound(bound));
    }
    Ok((loss - bound) / bound * 100.0)
}

/// One trained restart.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub d: usize,
    pub n: usize,
    pub arch: ArchKind,
    pub variant: Variant,
    pub restart: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    #[serde(skip)]
    pub log: TrainLog,
}

/// A failed restart, kept for the report; aggregation proceeds without it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FailureRecord {
    pub run_id: String,
    pub error: String,
}

/// Aggregated deviations for one (cell, arch, variant, split).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub d: usize,
    pub n: usize,
    pub arch: ArchKind,
    pub variant: Variant,
    pub split: Split,
    /// -L_hat for this split, computed from the training-split optimum.
    pub bound: f64,
    pub min_dev_pct: f64,
    pub max_dev_pct: f64,
    pub mean_dev_pct: f64,
    /// Population standard deviation of the per-restart deviations.
    pub std_dev_pct: f64,
    pub final_losses: Vec<f64>,
    pub runs_ok: usize,
}

/// Everything an experiment produces.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<FailureRecord>,
    #[serde(skip)]
    pub runs: Vec<RunRecord>,
}

fn run_id(cell: GridCell, arch: ArchKind, variant: Variant, restart: usize) -> String {
    format!("d{}_n{}_{}_{}_r{:03}", cell.d, cell.n, arch, variant, restart)
}

struct CellContext {
    cell: GridCell,
    train: BinaryDataset,
    test: BinaryDataset,
    sol: ClosedFormSolution,
    bound_train: f64,
    bound_test: f64,
}

fn prepare_cell(
    spec: &ExperimentSpec,
    cell_idx: usize,
    cell: GridCell,
) -> Result<CellContext, HarnessError> {
    let variances = match &spec.variances {
        Some(v) => v.clone(),
        None => default_variances(spec.k)?,
    };
    let config = GenConfig {
        n: cell.n,
        d: cell.d,
        k: spec.k,
        variances,
        seed: derive_seed(spec.master_seed, "data", &[cell_idx as u64]),
    };
    let data = generate_dataset(&config)?;
    let split_seed = derive_seed(spec.master_seed, "split", &[cell_idx as u64]);
    let (train, test) = split_train_test(&data, spec.train.split_ratio, split_seed)?;
    // The optimum is fit on the training split only; the bound is then
    // evaluated on both splits with those parameters.
    let y_train = center_targets(&train);
    let sol = ClosedFormSolution::compute(&y_train, spec.k)?;
    let y_test = center_targets(&test);
    let bound_train = -sol.bound;
    let bound_test = -elbo_lower_bound(&sol.w_hat, &sol.b_hat, &y_test)?;
    Ok(CellContext {
        cell,
        train,
        test,
        sol,
        bound_train,
        bound_test,
    })
}

fn run_single(
    spec: &ExperimentSpec,
    ctx: &CellContext,
    cell_idx: usize,
    arch_idx: usize,
    kind: ArchKind,
    variant: Variant,
    restart: usize,
) -> Result<RunRecord, HarnessError> {
    let arch = spec.arch_for(kind, ctx.cell.d, variant);
    let path = [
        cell_idx as u64,
        arch_idx as u64,
        matches!(variant, Variant::Preinit) as u64,
        restart as u64,
    ];
    let init_seed = derive_seed(spec.master_seed, "init", &path);
    let train_seed = derive_seed(spec.master_seed, "train", &path);
    let mut model = build_model(&arch, ctx.cell.d, &mut rng_from_seed(init_seed))?;
    if matches!(variant, Variant::Preinit) {
        apply_preinit(&mut model, &ctx.sol)?;
    }
    let config = TrainConfig {
        seed: train_seed,
        ..spec.train.clone()
    };
    let log = fit(&mut model, &ctx.train, &ctx.test, &config)?;
    let (final_train_loss, final_test_loss) = match log.records.last() {
        Some(last) => (last.train_neg_elbo, last.test_neg_elbo),
        None => return Err(HarnessError::Spec("training produced no epochs".into())),
    };
    Ok(RunRecord {
        run_id: run_id(ctx.cell, kind, variant, restart),
        d: ctx.cell.d,
        n: ctx.cell.n,
        arch: kind,
        variant,
        restart,
        final_train_loss,
        final_test_loss,
        log,
    })
}

/// Runs the whole sweep. Restarts execute in parallel on the ambient Rayon
/// pool; aggregation is a deterministic fold over run identifiers, so the
/// results do not depend on execution order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResults, HarnessError> {
    spec.validate()?;
    let mut runs: Vec<RunRecord> = Vec::new();
    let mut failures: Vec<FailureRecord> = Vec::new();
    let mut rows: Vec<ResultRow> = Vec::new();

    for (cell_idx, &cell) in spec.grid.iter().enumerate() {
        let ctx = prepare_cell(spec, cell_idx, cell)?;
        let tasks: Vec<(usize, ArchKind, Variant, usize)> = spec
            .architectures
            .iter()
            .enumerate()
            .flat_map(|(ai, &kind)| {
                [Variant::Plain, Variant::Preinit]
                    .into_iter()
                    .flat_map(move |variant| {
                        (0..spec.restarts).map(move |r| (ai, kind, variant, r))
                    })
            })
            .collect();
        let outcomes: Vec<Result<RunRecord, FailureRecord>> = tasks
            .par_iter()
            .map(|&(ai, kind, variant, restart)| {
                run_single(spec, &ctx, cell_idx, ai, kind, variant, restart).map_err(|e| {
                    FailureRecord {
                        run_id: run_id(cell, kind, variant, restart),
                        error: e.to_string(),
                    }
                })
            })
            .collect();

        for &kind in &spec.architectures {
            for variant in [Variant::Plain, Variant::Preinit] {
                let group: Vec<&RunRecord> = outcomes
                    .iter()
                    .filter_map(|o| o.as_ref().ok())
                    .filter(|r| r.arch == kind && r.variant == variant)
                    .collect();
                for split in [Split::Train, Split::Test] {
                    let bound = match split {
                        Split::Train => ctx.bound_train,
                        Split::Test => ctx.bound_test,
                    };
                    let losses: Vec<f64> = group
                        .iter()
                        .map(|r| match split {
                            Split::Train => r.final_train_loss,
                            Split::Test => r.final_test_loss,
                        })
                        .collect();
                    let devs: Vec<f64> = losses
                        .iter()
                        .map(|&l| deviation_pct(l, bound))
                        .collect::<Result<_, _>>()?;
                    let row = aggregate_row(cell, kind, variant, split, bound, losses, &devs);
                    rows.push(row);
                }
            }
        }
        for outcome in outcomes {
            match outcome {
                Ok(r) => runs.push(r),
                Err(f) => failures.push(f),
            }
        }
    }
    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    failures.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(ExperimentResults {
        rows,
        failures,
        runs,
    })
}

fn aggregate_row(
    cell: GridCell,
    arch: ArchKind,
    variant: Variant,
    split: Split,
    bound: f64,
    losses: Vec<f64>,
    devs: &[f64],
) -> ResultRow {
    let runs_ok = devs.len();
    let (min, max, mean, std) = if devs.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let min = devs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = devs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = devs.iter().sum::<f64>() / runs_ok as f64;
        let var = devs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / runs_ok as f64;
        (min, max, mean, var.sqrt())
    };
    ResultRow {
        d: cell.d,
        n: cell.n,
        arch,
        variant,
        split,
        bound,
        min_dev_pct: min,
        max_dev_pct: max,
        mean_dev_pct: mean,
        std_dev_pct: std,
        final_losses: losses,
        runs_ok,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `summary.csv`, `summary.json` and per-run `curves/<run-id>.csv`.
///
/// Timing columns are zeroed unless `include_timings` is set, so repeated
/// runs with identical seeds produce byte-identical files.
pub fn emit_results(
    results: &ExperimentResults,
    dir: &Path,
    include_timings: bool,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).map_err(io_err(&curves))?;

    let mut csv = String::from(
        "d,N,arch,variant,split,bound,min_dev_pct,max_dev_pct,mean_dev_pct,std_dev_pct,runs_ok\n",
    );
    for row in &results.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            row.d,
            row.n,
            row.arch,
            row.variant,
            row.split,
            row.bound,
            row.min_dev_pct,
            row.max_dev_pct,
            row.mean_dev_pct,
            row.std_dev_pct,
            row.runs_ok
        ));
    }
    let summary_csv = dir.join("summary.csv");
    fs::write(&summary_csv, csv).map_err(io_err(&summary_csv))?;

    let summary_json = dir.join("summary.json");
    fs::write(&summary_json, serde_json::to_string_pretty(results)?)
        .map_err(io_err(&summary_json))?;

    for run in &results.runs {
        let path = curves.join(format!("{}.csv", run.run_id));
        run.log
            .write_csv(&path, include_timings)
            .map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_reproduces_footnote_example() {
        let dev = deviation_pct(112.97, 134.52).unwrap();
        assert!((dev + 16.02).abs() < 0.005, "got {dev}");
    }

    #[test]
    fn deviation_zero_at_bound() {
        assert_eq!(deviation_pct(42.0, 42.0).unwrap(), 0.0);
    }

    #[test]
    fn deviation_small_positive() {
        let dev = deviation_pct(139.84, 138.45).unwrap();
        assert!((dev - 1.004).abs() < 0.001);
    }

    #[test]
    fn deviation_rejects_bad_bound() {
        assert!(deviation_pct(1.0, 0.0).is_err());
        assert!(deviation_pct(1.0, -3.0).is_err());
    }

    fn tiny_spec() -> ExperimentSpec {
        let mut train = TrainConfig::with_seed(0);
        train.epochs = 2;
        train.batch_size = 10;
        ExperimentSpec {
            grid: vec![GridCell { n: 30, d: 40 }],
            k: 2,
            restarts: 1,
            architectures: vec![ArchKind::Canonical],
            train,
            master_seed: 999,
            variances: None,
            canonical_e1: 44,
            deep_encoder: vec![32, 40],
            deep_decoder: vec![16, 32],
        }
    }

    #[test]
    fn single_restart_collapses_aggregates() {
        let results = run_experiment(&tiny_spec()).unwrap();
        assert!(results.failures.is_empty());
        assert_eq!(results.rows.len(), 4, "two variants times two splits");
        for row in &results.rows {
            assert_eq!(row.runs_ok, 1);
            assert_eq!(row.min_dev_pct, row.max_dev_pct);
            assert_eq!(row.min_dev_pct, row.mean_dev_pct);
            assert_eq!(row.std_dev_pct, 0.0);
            assert!(row.min_dev_pct <= row.mean_dev_pct);
            assert!(row.mean_dev_pct <= row.max_dev_pct);
        }
    }

    #[test]
    fn experiment_deterministic() {
        let a = run_experiment(&tiny_spec()).unwrap();
        let b = run_experiment(&tiny_spec()).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(
            a.runs.iter().map(|r| &r.run_id).collect::<Vec<_>>(),
            b.runs.iter().map(|r| &r.run_id).collect::<Vec<_>>()
        );
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.final_train_loss, rb.final_train_loss);
            assert_eq!(ra.final_test_loss, rb.final_test_loss);
        }
    }

    #[test]
    fn emit_writes_consistent_files() {
        let dir = tempfile::tempdir().unwrap();
        let results = run_experiment(&tiny_spec()).unwrap();
        emit_results(&results, dir.path(), false).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(csv.starts_with("d,N,arch,variant,split,bound,"));
        assert_eq!(csv.lines().count(), 1 + results.rows.len());
        // One curve file per run, final epoch consistent with the summary row.
        let run = &results.runs[0];
        let curve = std::fs::read_to_string(
            dir.path().join("curves").join(format!("{}.csv", run.run_id)),
        )
        .unwrap();
        let last = curve.lines().last().unwrap();
        let fields: Vec<&str> = last.split(',').collect();
        assert_eq!(fields[0], "1", "two epochs, last index 1");
        let train_loss: f64 = fields[1].parse().unwrap();
        assert_eq!(train_loss, run.final_train_loss);
        assert_eq!(fields[3], "0", "timings zeroed by default");
    }

    #[test]
    fn emit_empty_results_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let results = ExperimentResults::default();
        emit_results(&results, dir.path(), false).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }

    #[test]
    fn summary_json_roundtrip() {
        let results = run_experiment(&tiny_spec()).unwrap();
        let json = serde_json::to_string(&results).unwrap();
        let back: ExperimentResults = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows, results.rows);
        assert_eq!(back.failures, results.failures);
    }

    #[test]
    fn aggregates_do_not_depend_on_thread_count() {
        let spec = {
            let mut s = tiny_spec();
            s.restarts = 3;
            s
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_experiment(&spec))
            .unwrap();
        let two = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap()
            .install(|| run_experiment(&spec))
            .unwrap();
        assert_eq!(one.rows, two.rows);
        for row in &one.rows {
            assert!(row.min_dev_pct <= row.mean_dev_pct);
            assert!(row.mean_dev_pct <= row.max_dev_pct);
            assert!(row.std_dev_pct >= 0.0);
        }
    }

    #[test]
    fn bound_robust_across_sample_sizes() {
        // The computed bound barely moves between N = 2000 and N = 5000.
        let mut bounds = Vec::new();
        for (i, n) in [2000usize, 5000].into_iter().enumerate() {
            let config = GenConfig {
                n,
                d: 50,
                k: 2,
                variances: vec![0.09, 0.25],
                seed: derive_seed(4242, "data", &[i as u64]),
            };
            let data = generate_dataset(&config).unwrap();
            let (train, _) =
                split_train_test(&data, 2.0 / 3.0, derive_seed(4242, "split", &[i as u64]))
                    .unwrap();
            let y = center_targets(&train);
            let sol = ClosedFormSolution::compute(&y, 2).unwrap();
            bounds.push(-sol.bound);
        }
        let rel = (bounds[0] - bounds[1]).abs() / bounds[1];
        assert!(rel < 0.01, "bounds {bounds:?} differ by {rel}");
    }
}
