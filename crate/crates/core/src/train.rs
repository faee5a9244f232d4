//! Two-stage training. Stage A trains the plain Probabilistic U-Net
//! objective through the identity projection; after the last warmup epoch
//! the posterior features are fitted with PCA, the projection is frozen and
//! Stage B continues with the compact-space KL.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::AmbiguousSample;
use crate::error::{Error, Result};
use crate::metrics::{probability_maps, score_sample, CalibrationTarget, MetricsReport};
use crate::net::{LatentStage, Model, ModelConfig};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::pca::{MomentAccumulator, PcaFit};
use crate::rng::{stream_rng, Stream, StreamRng};
use crate::tensor::Tensor;

/// Ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Identity projection throughout; no PCA.
    ProbUnet,
    /// PCA bottleneck, zero-padded compact sample fed to the adapter.
    PepNoIlsr,
    /// PCA bottleneck with reprojection.
    Pep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ProbUnet, Variant::PepNoIlsr, Variant::Pep];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ProbUnet => "prob-unet",
            Variant::PepNoIlsr => "pep-no-ilsr",
            Variant::Pep => "pep",
        }
    }

    pub fn fits_pca(self) -> bool {
        self != Variant::ProbUnet
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {s:?} (expected prob-unet, pep-no-ilsr or pep)"
                ))
            })
    }
}

/// Which per-sample statistic of the posterior feeds the PCA fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaFeature {
    #[default]
    PosteriorMean,
    PosteriorSample,
}

/// Where the KL term is evaluated. `FullDiagonal` uses the closed-form
/// diagonal KL in R^D on the native heads and exists for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlSpace {
    #[default]
    Compact,
    FullDiagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub seed: u64,
    pub variant: Variant,
    pub latent_dim: usize,
    pub k: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub adapter_depth: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub pca_feature: PcaFeature,
    pub kl_space: KlSpace,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ModelConfig::default();
        Self {
            lr: 1e-4,
            step_size: 10,
            gamma: 0.1,
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 8,
            beta: 1.0,
            seed: 0,
            variant: Variant::Pep,
            latent_dim: arch.latent_dim,
            k: arch.k,
            base_channels: arch.base_channels,
            depth: arch.depth,
            adapter_depth: arch.adapter_depth,
            grad_clip: Some(5.0),
            pca_feature: PcaFeature::PosteriorMean,
            kl_space: KlSpace::Compact,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite())
        {
            return bad(format!(
                "lr ({}) and gamma ({}) must be positive",
                self.lr, self.gamma
            ));
        }
        if self.step_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("step_size, batch_size and epochs must be positive".into());
        }
        if self.variant.fits_pca() && (self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs)
        {
            return bad(format!(
                "need 0 < warmup_epochs ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!(
                "beta {} must be finite and non-negative",
                self.beta
            ));
        }
        if self.k == 0 || self.k > self.latent_dim {
            return bad(format!(
                "need 1 <= k ({}) <= D ({})",
                self.k, self.latent_dim
            ));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    /// `lr₀ · gamma^⌊epoch / step_size⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi((epoch / self.step_size) as i32)
    }

    pub fn model_config(&self, image_size: usize) -> ModelConfig {
        let k = if self.variant.fits_pca() {
            self.k
        } else {
            self.latent_dim
        };
        ModelConfig {
            image_size,
            base_channels: self.base_channels,
            depth: self.depth,
            latent_dim: self.latent_dim,
            k,
            num_classes: 1,
            use_ilsr: self.variant != Variant::PepNoIlsr,
            adapter_depth: self.adapter_depth,
        }
    }
}

/// Images and one target mask each, `N×1×H×W`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
}

impl Batch {
    /// Stacks `samples[i]` with its rater mask `raters[i]`.
    pub fn new(samples: &[&AmbiguousSample], raters: &[usize]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidArgument("empty batch".into()));
        };
        if samples.len() != raters.len() {
            return Err(Error::shape(
                "batch",
                format!("{} samples, {} rater choices", samples.len(), raters.len()),
            ));
        }
        let size = first.size;
        let mut images = Vec::with_capacity(samples.len() * size * size);
        let mut targets = Vec::with_capacity(images.capacity());
        for (s, &r) in samples.iter().zip(raters) {
            if s.size != size {
                return Err(Error::shape(
                    "batch",
                    format!("mixed image sizes {size} and {}", s.size),
                ));
            }
            let mask = s
                .masks
                .get(r)
                .ok_or_else(|| Error::InvalidArgument(format!("rater {r} of {}", s.masks.len())))?;
            images.extend_from_slice(&s.image);
            targets.extend(mask.to_f32());
        }
        let shape = vec![samples.len(), 1, size, size];
        Ok(Self {
            images: Tensor::new(shape.clone(), images)?,
            targets: Tensor::new(shape, targets)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reconstruction plus `beta`-weighted KL. Returns `(loss, recon)`.
pub fn elbo_loss(
    g: &mut Graph,
    logits: Var,
    target: Var,
    kl: Var,
    beta: f64,
) -> Result<(Var, Var)> {
    let recon = g.bce_with_logits(logits, target)?;
    let weighted = g.scale(kl, beta as f32);
    let loss = g.add(recon, weighted)?;
    Ok((loss, recon))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    /// One gradient per model parameter, in parameter order.
    pub grads: Vec<Vec<f32>>,
}

/// Forward and backward pass of the ELBO for one batch with the given
/// standard-normal noise (`N × k` for the model's current projection).
pub fn compute_gradients(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &Tensor,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let y = g.constant(batch.targets.clone());
    let features = model.backbone(&mut g, &b, x)?;
    let post = model.posterior(&mut g, &b, x, y)?;
    let prior = model.prior(&mut g, &b, x)?;
    let q = model.project(&mut g, post)?;
    let kl_rows = match cfg.kl_space {
        KlSpace::Compact => {
            let p = model.project(&mut g, prior)?;
            g.gaussian_kl(q.mu, q.cov, p.mu, p.cov)?
        }
        KlSpace::FullDiagonal => {
            g.diag_gaussian_kl(post.mu, post.log_var, prior.mu, prior.log_var)?
        }
    };
    let kl = g.mean(kl_rows);
    let eps = g.constant(noise.clone());
    let z_k = g.gaussian_sample(q.mu, q.cov, eps)?;
    let latent = model.decoder_latent(&mut g, z_k)?;
    let logits = model.fuse(&mut g, &b, features, latent)?;
    let (loss, recon) = elbo_loss(&mut g, logits, y, kl, cfg.beta)?;
    let (loss_v, recon_v, kl_v) = (
        g.value(loss).item()? as f64,
        g.value(recon).item()? as f64,
        g.value(kl).item()? as f64,
    );
    if !(loss_v.is_finite() && recon_v.is_finite() && kl_v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "training loss (loss={loss_v}, recon={recon_v}, kl={kl_v})"
        )));
    }
    g.backward(loss)?;
    let grads = b
        .vars()
        .iter()
        .map(|&v| g.grad(v).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();
    Ok(StepOutput {
        loss: loss_v,
        recon: recon_v,
        kl: kl_v,
        grads,
    })
}

/// Standard-normal `n × k` noise.
pub fn draw_noise<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Tensor {
    let data = (0..n * k)
        .map(|_| StandardNormal.sample(rng))
        .map(|v: f64| v as f32)
        .collect();
    Tensor::new(vec![n, k], data).expect("n·k values")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// One optimizer step: gradients, clipping, Adam.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepStats> {
    let noise = draw_noise(batch.len(), model.projection().k(), rng);
    let mut out = compute_gradients(model, batch, cfg, &noise)?;
    let grad_norm = match cfg.grad_clip {
        Some(c) => clip_global_norm(&mut out.grads, c),
        None => out
            .grads
            .iter()
            .flatten()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt(),
    };
    let grads: Vec<&[f32]> = out.grads.iter().map(Vec::as_slice).collect();
    let mut params: Vec<&mut [f32]> = model
        .params_mut()
        .iter_mut()
        .map(|p| p.value.data_mut())
        .collect();
    adam_step(&mut params, &grads, adam, lr, &cfg.adam)?;
    Ok(StepStats {
        loss: out.loss,
        recon: out.recon,
        kl: out.kl,
        grad_norm,
    })
}

/// Projection fit and the features it was fitted on (row-major `N×D`).
#[derive(Debug, Clone)]
pub struct PcaOutcome {
    pub fit: PcaFit,
    pub features: Vec<f64>,
}

/// Collects one posterior feature per (training image, rater mask) pair,
/// fits the top-k projection and installs it, moving the model to Stage B.
pub fn fit_pca_phase(
    model: &mut Model,
    samples: &[AmbiguousSample],
    k: usize,
    feature: PcaFeature,
    rng: &mut StreamRng,
) -> Result<PcaOutcome> {
    let d = model.config().latent_dim;
    let mut acc = MomentAccumulator::new(d);
    let mut features = Vec::new();
    for s in samples {
        let raters: Vec<usize> = (0..s.masks.len()).collect();
        let refs = vec![s; raters.len()];
        let batch = Batch::new(&refs, &raters)?;
        for g in model.posterior_forward(&batch.images, &batch.targets)? {
            let f: Vec<f64> = match feature {
                PcaFeature::PosteriorMean => g.mu.clone(),
                PcaFeature::PosteriorSample => {
                    g.mu.iter()
                        .zip(g.variances())
                        .map(|(m, v)| {
                            let e: f64 = StandardNormal.sample(&mut *rng);
                            m + v.sqrt() * e
                        })
                        .collect()
                }
            };
            acc.accumulate(&f)?;
            features.extend_from_slice(&f);
        }
    }
    let fit = acc.finalize(k)?;
    model.install_projection(fit.projection.clone())?;
    Ok(PcaOutcome { fit, features })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub stage: LatentStage,
}

impl EpochLog {
    pub fn stage_label(&self) -> &'static str {
        match self.stage {
            LatentStage::Identity => "A",
            LatentStage::Fitted => "B",
        }
    }
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss,recon,kl,stage\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch,
            e.lr,
            e.loss,
            e.recon,
            e.kl,
            e.stage_label()
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Every optimizer step in order.
    pub steps: Vec<StepStats>,
    pub pca: Option<PcaOutcome>,
}

/// Full two-stage run on `samples`. `observer` sees each epoch's log row.
pub fn train(
    cfg: &TrainConfig,
    samples: &[AmbiguousSample],
    mut observer: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("empty training set".into()));
    };
    let mut model = Model::new(cfg.model_config(first.size), cfg.seed)?;
    let mut adam = AdamState::new(model.params().iter().map(|p| p.value.numel()));
    let mut latent_rng = stream_rng(cfg.seed, Stream::Latent, 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut pca = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let stage = model.stage();
        let mut data_rng = stream_rng(cfg.seed, Stream::Data, epoch as u64);
        order.shuffle(&mut data_rng);
        let (mut loss, mut recon, mut kl) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&AmbiguousSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let raters: Vec<usize> = refs
                .iter()
                .map(|s| data_rng.random_range(0..s.masks.len()))
                .collect();
            let batch = Batch::new(&refs, &raters)?;
            let stats = train_step(&mut model, &mut adam, &batch, cfg, lr, &mut latent_rng)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} at epoch {epoch}, step {step}, stage {stage:?}"
                    )),
                    other => other,
                })?;
            loss += stats.loss;
            recon += stats.recon;
            kl += stats.kl;
            steps += 1;
            history.push(stats);
        }
        let n = steps as f64;
        let row = EpochLog {
            epoch,
            lr,
            loss: loss / n,
            recon: recon / n,
            kl: kl / n,
            stage,
        };
        observer(&row);
        log.push(row);
        if cfg.variant.fits_pca() && epoch + 1 == cfg.warmup_epochs {
            let mut pca_rng = stream_rng(cfg.seed, Stream::Latent, 1);
            pca = Some(fit_pca_phase(
                &mut model,
                samples,
                cfg.k,
                cfg.pca_feature,
                &mut pca_rng,
            )?);
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: history,
        pca,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_sample: Vec<MetricsReport>,
}

/// Scores every sample with `m` draws from the projected prior; sample `i`
/// uses its own stream of `seed`.
pub fn evaluate(
    model: &Model,
    samples: &[AmbiguousSample],
    m: usize,
    seed: u64,
    target: CalibrationTarget,
) -> Result<Evaluation> {
    let per_sample = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, Stream::Eval, i as u64);
            let maps = probability_maps(model, &s.image_tensor(), m, &mut rng)?;
            score_sample(&maps, s.size, &s.masks, target)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::average(&per_sample)
        .ok_or_else(|| Error::InvalidArgument("empty evaluation set".into()))?;
    Ok(Evaluation { report, per_sample })
}
