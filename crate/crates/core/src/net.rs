//! The segmentation networks: a small U-Net backbone, prior and posterior
//! Gaussian heads, and the 1×1 adapter that fuses a latent vector with the
//! final decoder features.
//!
//! Forward passes are written against a [`Graph`]; [`Model::bind`] places
//! every parameter on the graph and returns the handles in parameter order.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gaussian::{inverse_reproject, GaussianD, LatentSample, Projection};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f32 = -10.0;
pub const LOG_VAR_MAX: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Native latent dimension D.
    pub latent_dim: usize,
    /// Compact dimension k after the PCA bottleneck.
    pub k: usize,
    pub num_classes: usize,
    /// Feed the reprojected `U z_k + m` to the adapter; otherwise the
    /// zero-padded `z_k`.
    pub use_ilsr: bool,
    /// Number of 1×1 convolutions in the adapter.
    pub adapter_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 16,
            depth: 3,
            latent_dim: 6,
            k: 2,
            num_classes: 1,
            use_ilsr: true,
            adapter_depth: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.depth) {
            return bad(format!(
                "image_size {} must be a positive multiple of 2^depth = {}",
                self.image_size,
                1 << self.depth
            ));
        }
        if self.base_channels < 2 {
            return bad(format!(
                "base_channels {} must be at least 2",
                self.base_channels
            ));
        }
        if self.latent_dim == 0 || self.k == 0 || self.k > self.latent_dim {
            return bad(format!(
                "need 1 <= k ({}) <= D ({})",
                self.k, self.latent_dim
            ));
        }
        if self.num_classes != 1 {
            return bad("only binary segmentation (num_classes = 1) is supported".into());
        }
        if self.adapter_depth == 0 {
            return bad("adapter_depth must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct Head {
    levels: Vec<[Conv; 2]>,
    fc_weight: usize,
    fc_bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<[Conv; 2]>,
    decoder: Vec<[Conv; 2]>,
    prior: Head,
    posterior: Head,
    adapter: Vec<Conv>,
}

/// Constant `f32` tensors derived from the frozen projection.
#[derive(Debug, Clone)]
struct ProjectionTensors {
    /// U, D×k
    basis: Tensor,
    /// Uᵀ, k×D
    basis_t: Tensor,
    /// −Uᵀm, length k
    offset: Tensor,
    /// m, length D
    mean: Tensor,
    /// D×k² map taking a variance row to the row-major `Uᵀ diag(var) U`
    cov_map: Tensor,
}

impl ProjectionTensors {
    fn new(p: &Projection) -> Self {
        let (d, k) = (p.dim(), p.k());
        let u = p.basis();
        let basis =
            Tensor::new(vec![d, k], u.as_slice().iter().map(|&v| v as f32).collect()).expect("d·k");
        let basis_t = Tensor::new(
            vec![k, d],
            u.transpose().as_slice().iter().map(|&v| v as f32).collect(),
        )
        .expect("k·d");
        let offset_vals = u.tr_mat_vec(p.mean()).expect("conformable");
        let offset =
            Tensor::new(vec![k], offset_vals.iter().map(|&v| -v as f32).collect()).expect("k");
        let mean = Tensor::new(vec![d], p.mean().iter().map(|&v| v as f32).collect()).expect("d");
        let mut cov_map = vec![0.0f32; d * k * k];
        for r in 0..d {
            for a in 0..k {
                for b in 0..k {
                    cov_map[r * k * k + a * k + b] = (u[(r, a)] * u[(r, b)]) as f32;
                }
            }
        }
        let cov_map = Tensor::new(vec![d, k * k], cov_map).expect("d·k²");
        Self {
            basis,
            basis_t,
            offset,
            mean,
            cov_map,
        }
    }
}

/// Whether the latent path still runs through the identity map (warmup /
/// plain Probabilistic U-Net) or through a fitted PCA projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentStage {
    Identity,
    Fitted,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
    projection: Arc<Projection>,
    projection_tensors: ProjectionTensors,
    stage: LatentStage,
}

/// Graph handles of a model's parameters, in parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Native-space Gaussian parameters on the graph, both N×D.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Compact-space Gaussian parameters on the graph: mean N×k, covariance N×k².
#[derive(Debug, Clone, Copy)]
pub struct CompactVars {
    pub mu: Var,
    pub cov: Var,
}

struct Builder<'a, R: Rng> {
    params: Vec<Param>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// He-normal weights, zero bias.
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Conv {
        let fan_in = (in_c * kernel * kernel) as f32;
        let w = Tensor::randn(
            &[out_c, in_c, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            self.rng,
        );
        let weight = self.add(format!("{name}.weight"), w);
        let bias = self.add(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Conv {
            weight,
            bias,
            padding: kernel / 2,
        }
    }

    fn head(
        &mut self,
        name: &str,
        in_c: usize,
        width: usize,
        depth: usize,
        latent_dim: usize,
    ) -> Head {
        let mut levels = Vec::new();
        let mut c_in = in_c;
        for level in 0..=depth {
            let c = width << level;
            let a = self.conv(&format!("{name}.level{level}.conv0"), c_in, c, 3);
            let b = self.conv(&format!("{name}.level{level}.conv1"), c, c, 3);
            levels.push([a, b]);
            c_in = c;
        }
        let std = 0.1 * (1.0 / c_in as f32).sqrt();
        let w = Tensor::randn(&[c_in, 2 * latent_dim], std, self.rng);
        let fc_weight = self.add(format!("{name}.fc.weight"), w);
        let fc_bias = self.add(format!("{name}.fc.bias"), Tensor::zeros(&[2 * latent_dim]));
        Head {
            levels,
            fc_weight,
            fc_bias,
        }
    }
}

impl Model {
    /// Fresh model with the identity projection (`k = D`) installed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let base = config.base_channels;
        let depth = config.depth;

        let mut encoder = Vec::new();
        let mut c_in = 1;
        for level in 0..=depth {
            let c = base << level;
            let a = b.conv(&format!("backbone.enc{level}.conv0"), c_in, c, 3);
            let bb = b.conv(&format!("backbone.enc{level}.conv1"), c, c, 3);
            encoder.push([a, bb]);
            c_in = c;
        }
        let mut decoder = Vec::new();
        for level in (0..depth).rev() {
            let c = base << level;
            let a = b.conv(&format!("backbone.dec{level}.conv0"), c_in + c, c, 3);
            let bb = b.conv(&format!("backbone.dec{level}.conv1"), c, c, 3);
            decoder.push([a, bb]);
            c_in = c;
        }
        let half = (base / 2).max(1);
        let prior = b.head("prior", 1, half, depth, config.latent_dim);
        let posterior = b.head("posterior", 2, half, depth, config.latent_dim);

        let mut adapter = Vec::new();
        let mut c_in = base + config.latent_dim;
        for i in 0..config.adapter_depth {
            let last = i + 1 == config.adapter_depth;
            let out = if last { config.num_classes } else { base };
            adapter.push(b.conv(&format!("adapter.conv{i}"), c_in, out, 1));
            c_in = out;
        }

        let params = b.params;
        let projection = Arc::new(Projection::identity(config.latent_dim));
        let projection_tensors = ProjectionTensors::new(&projection);
        Ok(Self {
            config,
            params,
            layout: Layout {
                encoder,
                decoder,
                prior,
                posterior,
                adapter,
            },
            projection,
            projection_tensors,
            stage: LatentStage::Identity,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn stage(&self) -> LatentStage {
        self.stage
    }

    /// The single projection shared by the prior and posterior paths.
    pub fn projection(&self) -> &Arc<Projection> {
        &self.projection
    }

    /// Replaces the identity map with a fitted projection. Allowed once.
    pub fn install_projection(&mut self, projection: Projection) -> Result<()> {
        if self.stage == LatentStage::Fitted {
            return Err(Error::Frozen);
        }
        if projection.dim() != self.config.latent_dim {
            return Err(Error::shape(
                "install_projection",
                format!(
                    "projection from R^{} into a model with D={}",
                    projection.dim(),
                    self.config.latent_dim
                ),
            ));
        }
        if projection.k() != self.config.k {
            return Err(Error::InvalidArgument(format!(
                "projection has k={}, model expects k={}",
                projection.k(),
                self.config.k
            )));
        }
        self.projection_tensors = ProjectionTensors::new(&projection);
        self.projection = Arc::new(projection);
        self.stage = LatentStage::Fitted;
        Ok(())
    }

    /// Replaces a parameter tensor by name (used by checkpoint loading).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "{name}: expected {:?}, got {:?}",
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Indices of the parameters that belong to the posterior network.
    pub fn posterior_param_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].name.starts_with("posterior."))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone().with_requires_grad(trainable)))
            .collect();
        Bound { vars }
    }

    fn conv_relu(&self, g: &mut Graph, b: &Bound, conv: Conv, x: Var) -> Result<Var> {
        let y = g.conv2d(x, b.vars[conv.weight], 1, conv.padding)?;
        let y = g.add_channel_bias(y, b.vars[conv.bias])?;
        Ok(g.relu(y))
    }

    fn check_image(&self, g: &Graph, image: Var, channels: usize) -> Result<()> {
        let s = g.value(image).shape();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != channels || s[2] != n || s[3] != n {
            return Err(Error::shape(
                "model input",
                format!("expected [N, {channels}, {n}, {n}], got {s:?}"),
            ));
        }
        Ok(())
    }

    /// U-Net backbone: features at full resolution, `N×base×H×W`.
    pub fn backbone(&self, g: &mut Graph, b: &Bound, image: Var) -> Result<Var> {
        self.check_image(g, image, 1)?;
        let mut skips = Vec::new();
        let mut x = image;
        for (level, convs) in self.layout.encoder.iter().enumerate() {
            if level > 0 {
                x = g.avg_pool2(x)?;
            }
            x = self.conv_relu(g, b, convs[0], x)?;
            x = self.conv_relu(g, b, convs[1], x)?;
            skips.push(x);
        }
        skips.pop();
        for convs in &self.layout.decoder {
            let up = g.upsample2(x)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = g.concat_channels(up, skip)?;
            x = self.conv_relu(g, b, convs[0], cat)?;
            x = self.conv_relu(g, b, convs[1], x)?;
        }
        Ok(x)
    }

    fn head(&self, g: &mut Graph, b: &Bound, head: &Head, input: Var) -> Result<GaussianVars> {
        let mut x = input;
        for (level, convs) in head.levels.iter().enumerate() {
            if level > 0 {
                x = g.avg_pool2(x)?;
            }
            x = self.conv_relu(g, b, convs[0], x)?;
            x = self.conv_relu(g, b, convs[1], x)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let out = g.linear(pooled, b.vars[head.fc_weight], b.vars[head.fc_bias])?;
        let d = self.config.latent_dim;
        let mu = g.slice_cols(out, 0, d)?;
        let raw = g.slice_cols(out, d, 2 * d)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(GaussianVars { mu, log_var })
    }

    pub fn prior(&self, g: &mut Graph, b: &Bound, image: Var) -> Result<GaussianVars> {
        self.check_image(g, image, 1)?;
        self.head(g, b, &self.layout.prior, image)
    }

    /// Posterior network on the channel-concatenated (image, mask).
    pub fn posterior(
        &self,
        g: &mut Graph,
        b: &Bound,
        image: Var,
        mask: Var,
    ) -> Result<GaussianVars> {
        self.check_image(g, image, 1)?;
        self.check_image(g, mask, 1)?;
        let input = g.concat_channels(image, mask)?;
        self.head(g, b, &self.layout.posterior, input)
    }

    /// `μ_k = (μ − m) U`, `Σ_k = Uᵀ diag(exp(log_var)) U` through the shared projection.
    pub fn project(&self, g: &mut Graph, native: GaussianVars) -> Result<CompactVars> {
        let pt = &self.projection_tensors;
        let basis = g.constant(pt.basis.clone());
        let offset = g.constant(pt.offset.clone());
        let mu = g.linear(native.mu, basis, offset)?;
        let var = g.exp(native.log_var);
        let cov_map = g.constant(pt.cov_map.clone());
        let cov = g.matmul(var, cov_map)?;
        Ok(CompactVars { mu, cov })
    }

    /// `U z_k + m` with ILSR, otherwise `z_k` zero-padded to length D.
    pub fn decoder_latent(&self, g: &mut Graph, z_k: Var) -> Result<Var> {
        if self.config.use_ilsr {
            let pt = &self.projection_tensors;
            let basis_t = g.constant(pt.basis_t.clone());
            let mean = g.constant(pt.mean.clone());
            g.linear(z_k, basis_t, mean)
        } else {
            g.pad_cols(z_k, self.config.latent_dim)
        }
    }

    /// Tiles the latent over the grid, concatenates it to the features and
    /// applies the 1×1 adapter stack (ReLU between layers): `N×1×H×W` logits.
    pub fn fuse(&self, g: &mut Graph, b: &Bound, features: Var, latent: Var) -> Result<Var> {
        let d = g.value(latent).shape().get(1).copied().unwrap_or(0);
        if d != self.config.latent_dim {
            return Err(Error::shape(
                "fuse_and_predict",
                format!("latent length {d}, expected D={}", self.config.latent_dim),
            ));
        }
        let mut x = g.tile_concat(features, latent)?;
        let last = self.layout.adapter.len() - 1;
        for (i, conv) in self.layout.adapter.iter().enumerate() {
            x = g.conv2d(x, b.vars[conv.weight], 1, 0)?;
            x = g.add_channel_bias(x, b.vars[conv.bias])?;
            if i != last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    // Graph-free conveniences.

    pub fn backbone_forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = self.backbone(&mut g, &b, x)?;
        Ok(g.take(f))
    }

    pub fn prior_forward(&self, image: &Tensor) -> Result<Vec<GaussianD>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.prior(&mut g, &b, x)?;
        gaussians_from(&g, out)
    }

    pub fn posterior_forward(&self, image: &Tensor, mask: &Tensor) -> Result<Vec<GaussianD>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = g.constant(mask.clone());
        let out = self.posterior(&mut g, &b, x, y)?;
        gaussians_from(&g, out)
    }

    /// Adapter input for a compact draw: `U z_k + m` with ILSR (recorded in
    /// the sample), otherwise `z_k` zero-padded to length D.
    pub fn decoder_input(&self, sample: &mut LatentSample) -> Result<Vec<f32>> {
        if sample.z_k.len() != self.projection.k() {
            return Err(Error::shape(
                "decoder_input",
                format!(
                    "z_k of length {}, projection k={}",
                    sample.z_k.len(),
                    self.projection.k()
                ),
            ));
        }
        if self.config.use_ilsr {
            let z = inverse_reproject(&sample.z_k, &self.projection)?;
            let out = z.iter().map(|&v| v as f32).collect();
            sample.z_tilde = Some(z);
            Ok(out)
        } else {
            let mut out = vec![0.0f32; self.config.latent_dim];
            out.iter_mut()
                .zip(&sample.z_k)
                .for_each(|(o, &v)| *o = v as f32);
            Ok(out)
        }
    }

    /// Logits `M×1×H×W` for one `1×C×H×W` feature map and M latent vectors.
    pub fn fuse_batch(&self, features: &Tensor, latents: &[Vec<f32>]) -> Result<Tensor> {
        let s = features.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::shape(
                "fuse_batch",
                format!("expected one feature map [1, C, H, W], got {s:?}"),
            ));
        }
        let d = self.config.latent_dim;
        if let Some(bad) = latents.iter().find(|z| z.len() != d) {
            return Err(Error::shape(
                "fuse_batch",
                format!("latent length {}, expected D={d}", bad.len()),
            ));
        }
        let m = latents.len();
        let mut shape = s.to_vec();
        shape[0] = m;
        let tiled = features.data().repeat(m);
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(Tensor::new(shape, tiled)?);
        let z = g.constant(Tensor::new(vec![m, d], latents.concat())?);
        let logits = self.fuse(&mut g, &b, f, z)?;
        Ok(g.take(logits))
    }

    /// Logits for one feature map and one native-space latent vector.
    pub fn fuse_and_predict(&self, features: &Tensor, z_tilde: &[f32]) -> Result<Tensor> {
        let n = features.shape().first().copied().unwrap_or(0);
        if z_tilde.len() != self.config.latent_dim {
            return Err(Error::shape(
                "fuse_and_predict",
                format!(
                    "latent length {}, expected D={}",
                    z_tilde.len(),
                    self.config.latent_dim
                ),
            ));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let rows: Vec<f32> = (0..n).flat_map(|_| z_tilde.iter().copied()).collect();
        let z = g.constant(Tensor::new(vec![n, z_tilde.len()], rows)?);
        let logits = self.fuse(&mut g, &b, f, z)?;
        Ok(g.take(logits))
    }
}

fn gaussians_from(g: &Graph, out: GaussianVars) -> Result<Vec<GaussianD>> {
    let mu = g.value(out.mu);
    let lv = g.value(out.log_var);
    let d = mu.shape()[1];
    mu.data()
        .chunks(d)
        .zip(lv.data().chunks(d))
        .map(|(m, l)| {
            GaussianD::new(
                m.iter().map(|&v| v as f64).collect(),
                l.iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}
