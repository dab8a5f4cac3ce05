//! The two VAE variants and the training loop.
//!
//! The "plain" variant is a standard He-initialized network. The "preinit"
//! variant starts its last encoder layer and its decoder output layer at the
//! closed-form optimum and replaces the log-variance head by a frozen
//! constant vector, so the posterior scale can never collapse during
//! training.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closedform::{ClosedFormError, ClosedFormSolution};
use crate::datagen::{sigmoid, BinaryDataset};
use crate::elbo::{bernoulli_log_likelihood, kl_diag_gaussian, ElboError, ElboTerms};
use crate::nn::{
    adam_step, backward, forward, he_init, layer_from_checkpoint, load_checkpoint,
    save_checkpoint, Activation, AdamState, CheckpointBlock, LayerGrads, LayerParams, MlpCache,
    NnError,
};
use crate::numerics::{axpy, pairwise_sum, Mat};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Elbo(#[from] ElboError),
    #[error(transparent)]
    ClosedForm(#[from] ClosedFormError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Preinit,
}

/// Layer widths of one VAE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub variant: Variant,
    /// Canonical nets have no decoder hidden layers and a last encoder
    /// hidden layer at least as wide as the data.
    pub canonical: bool,
}

impl VaeArchitecture {
    /// Canonical shape: encoder (e1_width, d), single affine-sigmoid decoder.
    pub fn canonical(d: usize, latent_dim: usize, e1_width: usize, variant: Variant) -> Self {
        Self {
            encoder_hidden: vec![e1_width, d],
            latent_dim,
            decoder_hidden: Vec::new(),
            variant,
            canonical: true,
        }
    }

    /// Deep shape with explicit widths on both sides.
    pub fn deep(
        encoder_hidden: Vec<usize>,
        latent_dim: usize,
        decoder_hidden: Vec<usize>,
        variant: Variant,
    ) -> Self {
        Self {
            encoder_hidden,
            latent_dim,
            decoder_hidden,
            variant,
            canonical: false,
        }
    }

    pub fn validate(&self, d: usize) -> Result<(), VaeError> {
        if self.latent_dim == 0 {
            return Err(VaeError::Architecture("latent dimension must be positive".into()));
        }
        if d == 0 {
            return Err(VaeError::Architecture("data dimension must be positive".into()));
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .any(|&w| w == 0)
        {
            return Err(VaeError::Architecture("layer widths must be positive".into()));
        }
        if self.canonical {
            if !self.decoder_hidden.is_empty() {
                return Err(VaeError::Architecture(
                    "canonical nets have no decoder hidden layers".into(),
                ));
            }
            match self.encoder_hidden.last() {
                Some(&last) if last >= d => {}
                _ => {
                    return Err(VaeError::Architecture(format!(
                        "canonical nets need a last encoder hidden layer of width >= d = {d}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Width feeding the latent heads: the last encoder hidden layer, or d.
    fn trunk_out(&self, d: usize) -> usize {
        self.encoder_hidden.last().copied().unwrap_or(d)
    }
}

/// The log-variance head: a trainable linear layer, or a frozen constant.
#[derive(Debug, Clone)]
pub enum LogVarHead {
    Layer(LayerParams),
    Frozen(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub encoder: Vec<LayerParams>,
    pub mu_head: LayerParams,
    pub log_var_head: LogVarHead,
    pub decoder_hidden: Vec<LayerParams>,
    /// Final affine-sigmoid layer producing the d Bernoulli probabilities.
    pub output_layer: LayerParams,
    pub arch: VaeArchitecture,
    pub d: usize,
}

/// He-initializes all layers; the draw order is encoder trunk, mu head,
/// log-variance head, decoder hidden layers, output layer.
pub fn build_model(
    arch: &VaeArchitecture,
    d: usize,
    rng: &mut ChaCha12Rng,
) -> Result<VaeModel, VaeError> {
    arch.validate(d)?;
    let mut encoder = Vec::with_capacity(arch.encoder_hidden.len());
    let mut fan_in = d;
    for &width in &arch.encoder_hidden {
        encoder.push(he_init(fan_in, width, Activation::Relu, rng));
        fan_in = width;
    }
    let mu_head = he_init(fan_in, arch.latent_dim, Activation::Linear, rng);
    let log_var_head = LogVarHead::Layer(he_init(fan_in, arch.latent_dim, Activation::Linear, rng));
    let mut decoder_hidden = Vec::with_capacity(arch.decoder_hidden.len());
    let mut dec_in = arch.latent_dim;
    for &width in &arch.decoder_hidden {
        decoder_hidden.push(he_init(dec_in, width, Activation::Relu, rng));
        dec_in = width;
    }
    let output_layer = he_init(dec_in, d, Activation::Sigmoid, rng);
    Ok(VaeModel {
        encoder,
        mu_head,
        log_var_head,
        decoder_hidden,
        output_layer,
        arch: arch.clone(),
        d,
    })
}

/// Writes the closed-form optimum into the last layers.
///
/// The mu head gets `W_e = Sigma_z W^T` on its first d input columns (zeros
/// elsewhere) and bias `b_e = Sigma_z W^T (-1/2 - b/4)`; the output layer
/// gets `W` on its first kappa input columns (zeros elsewhere) and bias `b`;
/// the log-variance head becomes the frozen vector `log diag Sigma_z`.
pub fn apply_preinit(model: &mut VaeModel, sol: &ClosedFormSolution) -> Result<(), VaeError> {
    let d = model.d;
    let kappa = model.arch.latent_dim;
    if sol.w_hat.rows() != d || sol.kappa != kappa {
        return Err(VaeError::Architecture(format!(
            "solution is {}x{}, model expects {}x{}",
            sol.w_hat.rows(),
            sol.kappa,
            d,
            kappa
        )));
    }
    let trunk_out = model.arch.trunk_out(d);
    if trunk_out < d {
        return Err(VaeError::Architecture(format!(
            "penultimate encoder width {trunk_out} is smaller than d = {d}"
        )));
    }

    // mu head: kappa x trunk_out.
    let w_e = {
        let wt = sol.w_hat.transpose();
        sol.sigma_z_hat.matmul(&wt)
    };
    let arg: Vec<f64> = sol.b_hat.iter().map(|&bj| -0.5 - 0.25 * bj).collect();
    let b_e = w_e.matvec(&arg);
    let mut mu_w = Mat::zeros(kappa, trunk_out);
    for r in 0..kappa {
        for c in 0..d {
            mu_w.set(r, c, w_e.get(r, c));
        }
    }
    model.mu_head.weights = mu_w;
    model.mu_head.bias = b_e;

    // Output layer: d x (decoder input width).
    let out_in = model.output_layer.in_dim();
    if out_in < kappa {
        return Err(VaeError::Architecture(format!(
            "output layer input width {out_in} is smaller than kappa = {kappa}"
        )));
    }
    let mut out_w = Mat::zeros(d, out_in);
    for r in 0..d {
        for c in 0..kappa {
            out_w.set(r, c, sol.w_hat.get(r, c));
        }
    }
    model.output_layer.weights = out_w;
    model.output_layer.bias = sol.b_hat.clone();

    model.log_var_head = LogVarHead::Frozen(sol.log_diag_sigma_z());
    Ok(())
}

/// Everything recorded during one forward pass, enough for exact backprop.
pub struct VaeCache {
    enc_cache: MlpCache,
    /// Trunk output (equals the input batch when there is no trunk).
    h: Mat,
    pub mu: Mat,
    pub log_var: Mat,
    eps: Mat,
    sd: Mat,
    pub z: Mat,
    dec_cache: MlpCache,
    dec_out: Mat,
    pub probs: Mat,
    x: Mat,
}

fn affine(layer: &LayerParams, input: &Mat) -> Mat {
    let mut out = input.matmul_nt(&layer.weights);
    for i in 0..out.rows() {
        axpy(1.0, &layer.bias, out.row_mut(i));
    }
    out
}

/// Forward pass with explicit reparameterization noise (one draw per datum).
pub fn forward_elbo_with_eps(
    model: &VaeModel,
    x_batch: &Mat,
    eps: &Mat,
) -> Result<(ElboTerms, VaeCache), VaeError> {
    let batch = x_batch.rows();
    let kappa = model.arch.latent_dim;
    if x_batch.cols() != model.d {
        return Err(VaeError::Config(format!(
            "batch width {} does not match d = {}",
            x_batch.cols(),
            model.d
        )));
    }
    if eps.rows() != batch || eps.cols() != kappa {
        return Err(VaeError::Config("noise shape mismatch".into()));
    }

    let (h, enc_cache) = forward(&model.encoder, x_batch)?;
    let mu = affine(&model.mu_head, &h);
    let log_var = match &model.log_var_head {
        LogVarHead::Layer(layer) => affine(layer, &h),
        LogVarHead::Frozen(values) => {
            let mut lv = Mat::zeros(batch, kappa);
            for i in 0..batch {
                lv.row_mut(i).copy_from_slice(values);
            }
            lv
        }
    };
    let mut sd = log_var.clone();
    for v in sd.as_mut_slice() {
        *v = (0.5 * *v).exp();
    }
    let mut z = mu.clone();
    for i in 0..batch {
        let zrow = z.row_mut(i);
        for (j, slot) in zrow.iter_mut().enumerate() {
            *slot += sd.get(i, j) * eps.get(i, j);
        }
    }
    let (dec_out, dec_cache) = forward(&model.decoder_hidden, &z)?;
    let logits = affine(&model.output_layer, &dec_out);
    let mut probs = logits;
    for v in probs.as_mut_slice() {
        *v = sigmoid(*v);
    }

    let per_ll: Vec<f64> = (0..batch)
        .map(|i| bernoulli_log_likelihood(x_batch.row(i), probs.row(i)))
        .collect::<Result<_, ElboError>>()?;
    let per_kl: Vec<f64> = (0..batch)
        .map(|i| kl_diag_gaussian(mu.row(i), log_var.row(i)))
        .collect();
    let recon = pairwise_sum(&per_ll) / batch as f64;
    let kl = pairwise_sum(&per_kl) / batch as f64;
    let terms = ElboTerms {
        recon,
        kl,
        neg_elbo: kl - recon,
    };
    Ok((
        terms,
        VaeCache {
            enc_cache,
            h,
            mu,
            log_var,
            eps: eps.clone(),
            sd,
            z,
            dec_cache,
            dec_out,
            probs,
            x: x_batch.clone(),
        },
    ))
}

/// Forward pass drawing the reparameterization noise from `rng`.
pub fn forward_elbo(
    model: &VaeModel,
    x_batch: &Mat,
    rng: &mut ChaCha12Rng,
) -> Result<(ElboTerms, VaeCache), VaeError> {
    let mut eps = Mat::zeros(x_batch.rows(), model.arch.latent_dim);
    for v in eps.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    forward_elbo_with_eps(model, x_batch, &eps)
}

/// Gradients of the batch-mean negative ELBO for every trainable block.
pub struct VaeGrads {
    pub encoder: Vec<LayerGrads>,
    pub mu_head: LayerGrads,
    pub log_var_head: Option<LayerGrads>,
    pub decoder_hidden: Vec<LayerGrads>,
    pub output_layer: LayerGrads,
}

/// Exact reverse-mode gradients from a cached forward pass.
pub fn backward_elbo(model: &VaeModel, cache: &VaeCache) -> Result<VaeGrads, VaeError> {
    let batch = cache.x.rows();
    let kappa = model.arch.latent_dim;
    let inv_b = 1.0 / batch as f64;

    // d(neg_elbo)/d(logits) = (p - x) / B: the sigmoid + cross-entropy shortcut.
    let mut g_logits = Mat::zeros(batch, model.d);
    for i in 0..batch {
        let row = g_logits.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = (cache.probs.get(i, j) - cache.x.get(i, j)) * inv_b;
        }
    }
    let gw_out = g_logits.matmul_tn(&cache.dec_out);
    let mut gb_out = vec![0.0; model.d];
    for i in 0..batch {
        axpy(1.0, g_logits.row(i), &mut gb_out);
    }
    let g_dec_out = g_logits.matmul(&model.output_layer.weights);

    let (dec_grads, g_z) = if model.decoder_hidden.is_empty() {
        (Vec::new(), g_dec_out)
    } else {
        let (grads, gz) = backward(&model.decoder_hidden, &cache.dec_cache, &g_dec_out)?;
        (
            grads.into_iter().map(|g| g.expect("decoder layers are trainable")).collect(),
            gz,
        )
    };

    // Reparameterization and the KL term.
    let mut g_mu = g_z.clone();
    for i in 0..batch {
        let row = g_mu.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot += cache.mu.get(i, j) * inv_b;
        }
    }
    let gw_mu = g_mu.matmul_tn(&cache.h);
    let mut gb_mu = vec![0.0; kappa];
    for i in 0..batch {
        axpy(1.0, g_mu.row(i), &mut gb_mu);
    }
    let mut g_h = g_mu.matmul(&model.mu_head.weights);

    let lv_grads = match &model.log_var_head {
        LogVarHead::Layer(layer) => {
            let mut g_lv = Mat::zeros(batch, kappa);
            for i in 0..batch {
                let row = g_lv.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    let through_z =
                        g_z.get(i, j) * 0.5 * cache.sd.get(i, j) * cache.eps.get(i, j);
                    let through_kl = 0.5 * (cache.log_var.get(i, j).exp() - 1.0) * inv_b;
                    *slot = through_z + through_kl;
                }
            }
            let gw_lv = g_lv.matmul_tn(&cache.h);
            let mut gb_lv = vec![0.0; kappa];
            for i in 0..batch {
                axpy(1.0, g_lv.row(i), &mut gb_lv);
            }
            let g_h2 = g_lv.matmul(&layer.weights);
            for (a, b) in g_h.as_mut_slice().iter_mut().zip(g_h2.as_slice()) {
                *a += b;
            }
            Some(LayerGrads {
                weights: gw_lv,
                bias: gb_lv,
            })
        }
        LogVarHead::Frozen(_) => None,
    };

    let enc_grads = if model.encoder.is_empty() {
        Vec::new()
    } else {
        let (grads, _) = backward(&model.encoder, &cache.enc_cache, &g_h)?;
        grads
            .into_iter()
            .map(|g| g.expect("encoder layers are trainable"))
            .collect()
    };

    Ok(VaeGrads {
        encoder: enc_grads,
        mu_head: LayerGrads {
            weights: gw_mu,
            bias: gb_mu,
        },
        log_var_head: lv_grads,
        decoder_hidden: dec_grads,
        output_layer: LayerGrads {
            weights: gw_out,
            bias: gb_out,
        },
    })
}

/// Per-block Adam states for one model.
pub struct VaeOptimizer {
    encoder: Vec<AdamState>,
    mu_head: AdamState,
    log_var_head: Option<AdamState>,
    decoder_hidden: Vec<AdamState>,
    output_layer: AdamState,
}

impl VaeOptimizer {
    pub fn new(model: &VaeModel, lr: f64) -> Self {
        Self {
            encoder: model
                .encoder
                .iter()
                .map(|l| AdamState::new(l.param_count(), lr))
                .collect(),
            mu_head: AdamState::new(model.mu_head.param_count(), lr),
            log_var_head: match &model.log_var_head {
                LogVarHead::Layer(l) => Some(AdamState::new(l.param_count(), lr)),
                LogVarHead::Frozen(_) => None,
            },
            decoder_hidden: model
                .decoder_hidden
                .iter()
                .map(|l| AdamState::new(l.param_count(), lr))
                .collect(),
            output_layer: AdamState::new(model.output_layer.param_count(), lr),
        }
    }

    pub fn apply(&mut self, model: &mut VaeModel, grads: &VaeGrads) {
        for ((layer, state), g) in model
            .encoder
            .iter_mut()
            .zip(&mut self.encoder)
            .zip(&grads.encoder)
        {
            adam_step(state, layer, g);
        }
        adam_step(&mut self.mu_head, &mut model.mu_head, &grads.mu_head);
        if let (LogVarHead::Layer(layer), Some(state), Some(g)) = (
            &mut model.log_var_head,
            self.log_var_head.as_mut(),
            grads.log_var_head.as_ref(),
        ) {
            adam_step(state, layer, g);
        }
        for ((layer, state), g) in model
            .decoder_hidden
            .iter_mut()
            .zip(&mut self.decoder_hidden)
            .zip(&grads.decoder_hidden)
        {
            adam_step(state, layer, g);
        }
        adam_step(&mut self.output_layer, &mut model.output_layer, &grads.output_layer);
    }
}

/// Training protocol parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    /// Seed of the run RNG (shuffles and reparameterization noise). The
    /// experiment harness overrides this per restart.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

fn default_epochs() -> usize {
    400
}
fn default_batch_size() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-4
}
fn default_split_ratio() -> f64 {
    2.0 / 3.0
}
fn default_mc_samples() -> usize {
    1
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            split_ratio: default_split_ratio(),
            seed,
            mc_samples: default_mc_samples(),
        }
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        if self.batch_size == 0 {
            return Err(VaeError::Config("batch size must be at least 1".into()));
        }
        if self.split_ratio.is_nan() || self.split_ratio <= 0.0 || self.split_ratio >= 1.0 {
            return Err(VaeError::Config("split ratio must lie strictly in (0, 1)".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(VaeError::Config("learning rate must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(VaeError::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// One epoch row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_neg_elbo: f64,
    pub test_neg_elbo: f64,
    pub wall_ms: u64,
}

/// Per-epoch train/test losses and timing for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_neg_elbo)
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_neg_elbo)
    }

    /// CSV with columns `epoch,train_neg_elbo,test_neg_elbo,wall_ms`.
    ///
    /// Timing varies between runs, so `wall_ms` is written as zero unless
    /// `include_timings` is set; the in-memory log always holds the measured
    /// values.
    pub fn write_csv(&self, path: &Path, include_timings: bool) -> std::io::Result<()> {
        let mut out = String::from("epoch,train_neg_elbo,test_neg_elbo,wall_ms\n");
        for r in &self.records {
            let ms = if include_timings { r.wall_ms } else { 0 };
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_neg_elbo, r.test_neg_elbo, ms
            ));
        }
        std::fs::write(path, out)
    }
}

/// Seeded disjoint row split; the train side gets ceil(ratio * N) rows.
pub fn split_train_test(
    data: &BinaryDataset,
    ratio: f64,
    seed: u64,
) -> Result<(BinaryDataset, BinaryDataset), VaeError> {
    let n = data.n();
    if n < 3 {
        return Err(VaeError::Config(format!("need at least 3 rows to split, got {n}")));
    }
    if ratio.is_nan() || ratio <= 0.0 || ratio >= 1.0 {
        return Err(VaeError::Config("split ratio must lie strictly in (0, 1)".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    indices.shuffle(&mut rng);
    let n_train = ceil_count(ratio, n).clamp(1, n - 1);
    let train = data.subset(&indices[..n_train]);
    let test = data.subset(&indices[n_train..]);
    Ok((train, test))
}

/// ceil(ratio * n) with protection against fp noise around exact integers.
fn ceil_count(ratio: f64, n: usize) -> usize {
    let t = ratio * n as f64;
    let r = t.round();
    if (t - r).abs() < 1e-9 * (n as f64).max(1.0) {
        r as usize
    } else {
        t.ceil() as usize
    }
}

/// Mean negative ELBO over a whole dataset, `mc_samples` noise draws per
/// datum, all noise from one seeded stream.
pub fn evaluate(
    model: &VaeModel,
    data: &BinaryDataset,
    mc_samples: usize,
    seed: u64,
) -> Result<f64, VaeError> {
    let n = data.n();
    if n == 0 {
        return Err(VaeError::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut rng = rng_from_seed(seed);
    let kappa = model.arch.latent_dim;
    let chunk = 256usize;
    let mut per_datum = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let stop = (start + chunk).min(n);
        let idx: Vec<usize> = (start..stop).collect();
        let x = data.rows_as_mat(&idx);
        let rows = x.rows();
        let mut acc = vec![0.0; rows];
        let mut kl_done = vec![0.0; rows];
        for draw in 0..mc_samples {
            let mut eps = Mat::zeros(rows, kappa);
            for v in eps.as_mut_slice() {
                *v = rng.sample(StandardNormal);
            }
            let (_, cache) = forward_elbo_with_eps(model, &x, &eps)?;
            for i in 0..rows {
                let ll = bernoulli_log_likelihood(x.row(i), cache.probs.row(i))?;
                acc[i] += ll;
                if draw == 0 {
                    kl_done[i] = kl_diag_gaussian(cache.mu.row(i), cache.log_var.row(i));
                }
            }
        }
        for i in 0..rows {
            per_datum.push(kl_done[i] - acc[i] / mc_samples as f64);
        }
        start = stop;
    }
    Ok(pairwise_sum(&per_datum) / n as f64)
}

/// Minibatch Adam on the negative ELBO.
///
/// Every epoch reshuffles the training rows with the run RNG, walks the
/// batches (the final short batch is processed, not dropped), then records
/// full-pass train and test losses with a fixed per-epoch evaluation seed.
pub fn fit(
    model: &mut VaeModel,
    train: &BinaryDataset,
    test: &BinaryDataset,
    config: &TrainConfig,
) -> Result<TrainLog, VaeError> {
    config.validate()?;
    if train.d() != model.d || test.d() != model.d {
        return Err(VaeError::Config("dataset width does not match the model".into()));
    }
    let mut rng = rng_from_seed(config.seed);
    let mut opt = VaeOptimizer::new(model, config.lr);
    let mut log = TrainLog::default();
    let n = train.n();
    let kappa = model.arch.latent_dim;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let x = train.rows_as_mat(batch);
            let mut eps = Mat::zeros(x.rows(), kappa);
            for v in eps.as_mut_slice() {
                *v = rng.sample(StandardNormal);
            }
            let (terms, cache) = forward_elbo_with_eps(model, &x, &eps)?;
            if !terms.neg_elbo.is_finite() {
                return Err(VaeError::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = backward_elbo(model, &cache)?;
            opt.apply(model, &grads);
        }
        let train_loss = evaluate(
            model,
            train,
            config.mc_samples,
            derive_seed(config.seed, "eval-train", &[epoch as u64]),
        )?;
        let test_loss = evaluate(
            model,
            test,
            config.mc_samples,
            derive_seed(config.seed, "eval-test", &[epoch as u64]),
        )?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(VaeError::NanLoss { epoch, batch: 0 });
        }
        log.records.push(EpochRecord {
            epoch,
            train_neg_elbo: train_loss,
            test_neg_elbo: test_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(log)
}

/// Mutable references to all layer blocks, in the fixed block order:
/// encoder layers, mu head, log-variance head (when trainable), decoder
/// hidden layers, output layer.
fn layer_blocks_mut(model: &mut VaeModel) -> Vec<&mut LayerParams> {
    let mut blocks: Vec<&mut LayerParams> = model.encoder.iter_mut().collect();
    blocks.push(&mut model.mu_head);
    if let LogVarHead::Layer(layer) = &mut model.log_var_head {
        blocks.push(layer);
    }
    blocks.extend(model.decoder_hidden.iter_mut());
    blocks.push(&mut model.output_layer);
    blocks
}

/// Gradient blocks in the same order as [`layer_blocks_mut`].
fn grad_blocks(grads: &VaeGrads) -> Vec<&LayerGrads> {
    let mut blocks: Vec<&LayerGrads> = grads.encoder.iter().collect();
    blocks.push(&grads.mu_head);
    if let Some(g) = &grads.log_var_head {
        blocks.push(g);
    }
    blocks.extend(grads.decoder_hidden.iter());
    blocks.push(&grads.output_layer);
    blocks
}

fn flat_param_mut(layer: &mut LayerParams, k: usize) -> &mut f64 {
    let w_len = layer.weights.rows() * layer.weights.cols();
    if k < w_len {
        &mut layer.weights.as_mut_slice()[k]
    } else {
        &mut layer.bias[k - w_len]
    }
}

fn flat_grad(grads: &LayerGrads, k: usize) -> f64 {
    let w_len = grads.weights.rows() * grads.weights.cols();
    if k < w_len {
        grads.weights.as_slice()[k]
    } else {
        grads.bias[k - w_len]
    }
}

/// Compares analytic gradients against central finite differences (h = 1e-5)
/// over every trainable parameter, with the reparameterization noise held
/// fixed. Returns the worst relative error.
pub fn gradient_check(model: &VaeModel, x: &Mat, eps: &Mat) -> Result<f64, VaeError> {
    let (_, cache) = forward_elbo_with_eps(model, x, eps)?;
    let grads = backward_elbo(model, &cache)?;
    let analytic_blocks: Vec<LayerGrads> = grad_blocks(&grads).into_iter().cloned().collect();

    let mut work = model.clone();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (b, analytic) in analytic_blocks.iter().enumerate() {
        let count = analytic.weights.rows() * analytic.weights.cols() + analytic.bias.len();
        for k in 0..count {
            *flat_param_mut(layer_blocks_mut(&mut work)[b], k) += h;
            let up = forward_elbo_with_eps(&work, x, eps)?.0.neg_elbo;
            *flat_param_mut(layer_blocks_mut(&mut work)[b], k) -= 2.0 * h;
            let down = forward_elbo_with_eps(&work, x, eps)?.0.neg_elbo;
            *flat_param_mut(layer_blocks_mut(&mut work)[b], k) += h;
            let fd = (up - down) / (2.0 * h);
            let an = flat_grad(analytic, k);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

impl VaeModel {
    /// Saves the model in the checkpoint format (JSON header + fp64 blob).
    pub fn save(&self, path: &Path) -> Result<(), VaeError> {
        let mut names: Vec<String> = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("encoder.{i}"));
        }
        let mut blocks: Vec<CheckpointBlock<'_>> = Vec::new();
        for (layer, name) in self.encoder.iter().zip(&names) {
            blocks.push(CheckpointBlock::Dense(name, layer));
        }
        blocks.push(CheckpointBlock::Dense("mu_head", &self.mu_head));
        match &self.log_var_head {
            LogVarHead::Layer(layer) => {
                blocks.push(CheckpointBlock::Dense("log_var_head", layer))
            }
            LogVarHead::Frozen(values) => {
                blocks.push(CheckpointBlock::FrozenVec("log_var_frozen", values))
            }
        }
        let dec_names: Vec<String> = (0..self.decoder_hidden.len())
            .map(|i| format!("decoder.{i}"))
            .collect();
        for (layer, name) in self.decoder_hidden.iter().zip(&dec_names) {
            blocks.push(CheckpointBlock::Dense(name, layer));
        }
        blocks.push(CheckpointBlock::Dense("output_layer", &self.output_layer));
        save_checkpoint(path, &blocks)?;
        Ok(())
    }

    /// Restores a model saved by [`save`](Self::save).
    pub fn load(path: &Path) -> Result<Self, VaeError> {
        let (header, blob) = load_checkpoint(path)?;
        let mut encoder = Vec::new();
        let mut mu_head = None;
        let mut log_var_head = None;
        let mut decoder_hidden = Vec::new();
        let mut output_layer = None;
        for entry in &header.entries {
            match entry.name.as_str() {
                "mu_head" => mu_head = Some(layer_from_checkpoint(entry, &blob)?),
                "log_var_head" => {
                    log_var_head = Some(LogVarHead::Layer(layer_from_checkpoint(entry, &blob)?))
                }
                "log_var_frozen" => {
                    let values = blob
                        .get(entry.weights_offset..entry.weights_offset + entry.rows)
                        .ok_or_else(|| {
                            VaeError::Config("frozen head out of blob range".into())
                        })?
                        .to_vec();
                    log_var_head = Some(LogVarHead::Frozen(values));
                }
                "output_layer" => output_layer = Some(layer_from_checkpoint(entry, &blob)?),
                name if name.starts_with("encoder.") => {
                    encoder.push(layer_from_checkpoint(entry, &blob)?)
                }
                name if name.starts_with("decoder.") => {
                    decoder_hidden.push(layer_from_checkpoint(entry, &blob)?)
                }
                other => {
                    return Err(VaeError::Config(format!("unknown checkpoint entry {other}")))
                }
            }
        }
        let mu_head = mu_head.ok_or_else(|| VaeError::Config("missing mu head".into()))?;
        let log_var_head =
            log_var_head.ok_or_else(|| VaeError::Config("missing log-variance head".into()))?;
        let output_layer =
            output_layer.ok_or_else(|| VaeError::Config("missing output layer".into()))?;
        let d = output_layer.out_dim();
        let latent_dim = mu_head.out_dim();
        let encoder_hidden: Vec<usize> = encoder.iter().map(LayerParams::out_dim).collect();
        let decoder_widths: Vec<usize> = decoder_hidden.iter().map(LayerParams::out_dim).collect();
        let variant = match &log_var_head {
            LogVarHead::Frozen(_) => Variant::Preinit,
            LogVarHead::Layer(_) => Variant::Plain,
        };
        let canonical =
            decoder_widths.is_empty() && encoder_hidden.last().is_some_and(|&w| w >= d);
        let arch = VaeArchitecture {
            encoder_hidden,
            latent_dim,
            decoder_hidden: decoder_widths,
            variant,
            canonical,
        };
        Ok(Self {
            encoder,
            mu_head,
            log_var_head,
            decoder_hidden,
            output_layer,
            arch,
            d,
        })
    }
}
