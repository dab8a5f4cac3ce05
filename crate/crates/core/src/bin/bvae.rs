//! Command-line interface: dataset generation, bound evaluation, latent
//! dimension selection, single training runs and full experiment sweeps.

use std::error::Error;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use bvae::closedform::{center_targets, elbo_lower_bound, select_latent_dim, ClosedFormSolution};
use bvae::datagen::{
    default_variances, generate_dataset_with_diagnostics, BinaryDataset, GenConfig,
};
use bvae::harness::{deviation_pct, emit_results, run_experiment, ArchKind, ExperimentSpec};
use bvae::rng::{derive_seed, rng_from_seed};
use bvae::vae::{
    apply_preinit, build_model, fit, split_train_test, TrainConfig, VaeArchitecture, Variant,
};

#[derive(Parser)]
#[command(
    name = "bvae",
    about = "Bernoulli VAE bound analysis, training and experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sparse-loading binary dataset.
    Generate(GenerateArgs),
    /// Evaluate the closed-form bound on a dataset.
    Bound(BoundArgs),
    /// List the eigenvalues of S eligible for the latent dimension.
    SelectDim(SelectDimArgs),
    /// Train one VAE on a dataset and log the loss curve.
    Train(TrainArgs),
    /// Run a grid of seeded experiments and aggregate bound deviations.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long)]
    seed: u64,
    /// Output prefix; writes <out>.json and <out>.csv.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated component variances (defaults to 0.09,0.25).
    #[arg(long, value_delimiter = ',')]
    variances: Option<Vec<f64>>,
    /// Keep the probability matrix in the metadata diagnostics.
    #[arg(long)]
    retain_pi: bool,
}

#[derive(Args)]
struct BoundArgs {
    /// Dataset prefix or one of its files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    kappa: usize,
}

#[derive(Args)]
struct SelectDimArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Canonical,
    Deep,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Plain,
    Preinit,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss curve CSV (epoch,train_neg_elbo,test_neg_elbo,wall_ms).
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 2)]
    kappa: usize,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    split_ratio: f64,
    #[arg(long, default_value_t = 1)]
    mc_samples: usize,
    /// E1 width of the canonical net (the reference protocol uses 2000).
    #[arg(long, default_value_t = 200)]
    e1_width: usize,
    /// Encoder hidden widths of the deep net.
    #[arg(long, value_delimiter = ',', default_value = "400,200")]
    enc_hidden: Vec<usize>,
    /// Decoder hidden widths of the deep net.
    #[arg(long, value_delimiter = ',', default_value = "200,400")]
    dec_hidden: Vec<usize>,
    /// Save the trained model as <prefix>.json + <prefix>.bin.
    #[arg(long)]
    save_model: Option<PathBuf>,
    /// Write measured wall times instead of zeros into the log.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec JSON; omit to use a built-in preset.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in spec: the desk-scale grid or the full-scale reference grid.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Master seed for a preset spec.
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for restart parallelism (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Write measured wall times instead of zeros into curve files.
    #[arg(long)]
    timings: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

fn main() {
    if let Err(err) = real_main() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<(), Box<dyn Error>> {
    match Cli::parse().command {
        Command::Generate(args) => generate(args),
        Command::Bound(args) => bound(args),
        Command::SelectDim(args) => select_dim(args),
        Command::Train(args) => train(args),
        Command::Experiment(args) => experiment(args),
    }
}

fn generate(args: GenerateArgs) -> Result<(), Box<dyn Error>> {
    let variances = match args.variances {
        Some(v) => v,
        None => default_variances(args.k)?,
    };
    let config = GenConfig {
        n: args.n,
        d: args.d,
        k: args.k,
        variances,
        seed: args.seed,
    };
    let ds = generate_dataset_with_diagnostics(&config, args.retain_pi)?;
    ds.write_files(&args.out)?;
    println!(
        "wrote {} rows x {} columns to {}.csv",
        ds.n(),
        ds.d(),
        args.out.with_extension("").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BSummary {
    min: f64,
    max: f64,
    mean: f64,
    l2_norm: f64,
}

#[derive(Serialize)]
struct BoundReport {
    kappa: usize,
    l_hat: f64,
    neg_l_hat: f64,
    b_hat: BSummary,
    eigenvalues: Vec<f64>,
}

fn bound(args: BoundArgs) -> Result<(), Box<dyn Error>> {
    let ds = BinaryDataset::read_files(&args.data)?;
    let y = center_targets(&ds);
    let sol = ClosedFormSolution::compute(&y, args.kappa)?;
    let b = &sol.b_hat;
    let report = BoundReport {
        kappa: sol.kappa,
        l_hat: sol.bound,
        neg_l_hat: -sol.bound,
        b_hat: BSummary {
            min: b.iter().copied().fold(f64::INFINITY, f64::min),
            max: b.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: b.iter().sum::<f64>() / b.len() as f64,
            l2_norm: b.iter().map(|v| v * v).sum::<f64>().sqrt(),
        },
        eigenvalues: sol.eigenvalues.clone(),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct SelectDimReport {
    kappa_max: usize,
    eligible: Vec<f64>,
}

fn select_dim(args: SelectDimArgs) -> Result<(), Box<dyn Error>> {
    let ds = BinaryDataset::read_files(&args.data)?;
    let y = center_targets(&ds);
    let b = bvae::closedform::sample_mean_b(&y)?;
    let s = bvae::closedform::sample_cov_s(&y, &b)?;
    let (kappa_max, eligible) = select_latent_dim(&s)?;
    let report = SelectDimReport { kappa_max, eligible };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    variant: String,
    bound_train: f64,
    bound_test: f64,
    final_train_neg_elbo: f64,
    final_test_neg_elbo: f64,
    deviation_train_pct: f64,
    deviation_test_pct: f64,
    epochs: usize,
}

fn train(args: TrainArgs) -> Result<(), Box<dyn Error>> {
    let ds = BinaryDataset::read_files(&args.data)?;
    let variant = match args.variant {
        VariantArg::Plain => Variant::Plain,
        VariantArg::Preinit => Variant::Preinit,
    };
    let d = ds.d();
    let arch = match args.arch {
        ArchArg::Canonical => VaeArchitecture::canonical(d, args.kappa, args.e1_width, variant),
        ArchArg::Deep => {
            VaeArchitecture::deep(args.enc_hidden.clone(), args.kappa, args.dec_hidden.clone(), variant)
        }
    };
    let split_seed = derive_seed(args.seed, "split", &[]);
    let (train_split, test_split) = split_train_test(&ds, args.split_ratio, split_seed)?;

    let y_train = center_targets(&train_split);
    let sol = ClosedFormSolution::compute(&y_train, args.kappa)?;
    let y_test = center_targets(&test_split);
    let bound_train = -sol.bound;
    let bound_test = -elbo_lower_bound(&sol.w_hat, &sol.b_hat, &y_test)?;

    let init_seed = derive_seed(args.seed, "init", &[]);
    let mut model = build_model(&arch, d, &mut rng_from_seed(init_seed))?;
    if matches!(variant, Variant::Preinit) {
        apply_preinit(&mut model, &sol)?;
    }
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        split_ratio: args.split_ratio,
        seed: derive_seed(args.seed, "train", &[]),
        mc_samples: args.mc_samples,
    };
    let log = fit(&mut model, &train_split, &test_split, &config)?;
    log.write_csv(&args.log, args.timings)?;
    if let Some(path) = &args.save_model {
        model.save(path)?;
    }

    let final_train = log.final_train_loss().unwrap_or(f64::NAN);
    let final_test = log.final_test_loss().unwrap_or(f64::NAN);
    let report = TrainReport {
        variant: format!("{variant}"),
        bound_train,
        bound_test,
        final_train_neg_elbo: final_train,
        final_test_neg_elbo: final_test,
        deviation_train_pct: deviation_pct(final_train, bound_train)?,
        deviation_test_pct: deviation_pct(final_test, bound_test)?,
        epochs: log.records.len(),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<(), Box<dyn Error>> {
    let spec: ExperimentSpec = match (&args.spec, args.preset) {
        (Some(path), _) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        (None, Some(PresetArg::Desk)) => ExperimentSpec::desk_default(args.master_seed),
        (None, Some(PresetArg::Full)) => ExperimentSpec::full_default(args.master_seed),
        (None, None) => return Err("pass --spec <json> or --preset desk|full".into()),
    };
    let results = if let Some(jobs) = args.jobs {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
        pool.install(|| run_experiment(&spec))?
    } else {
        run_experiment(&spec)?
    };
    emit_results(&results, &args.out, args.timings)?;
    let arch_names: Vec<String> = spec.architectures.iter().map(ArchKind::to_string).collect();
    println!(
        "{} cells x {{{}}} x 2 variants x {} restarts: {} runs ok, {} failed; results in {}",
        spec.grid.len(),
        arch_names.join(","),
        spec.restarts,
        results.runs.len(),
        results.failures.len(),
        args.out.display()
    );
    if !results.failures.is_empty() {
        for failure in &results.failures {
            eprintln!("run {} failed: {}", failure.run_id, failure.error);
        }
        std::process::exit(1);
    }
    Ok(())
}
