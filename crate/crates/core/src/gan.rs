//! Progressive generator and the shared-trunk three-headed discriminator.
//!
//! The generator maps `z ⊕ e ⊕ y` to an image; the discriminator trunk feeds
//! three output layers: an unbounded critic score, label logits and a
//! regressed text embedding. Each stage doubles the resolution, starting at
//! 4×4. A new stage is blended in with the fade-in coefficient `alpha`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, conv, dense, init_conv, init_dense, minibatch_stddev, pixel_norm, ParamStore, LRELU_SLOPE};
use crate::ontology::LabelLayer;
use crate::tensor::Tensor;
use crate::textemb::mix64;

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub adv: f64,
    pub cls: f64,
    pub reg: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        HeadWeights { adv: 1.0, cls: 1.0, reg: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    /// Noise dimension.
    pub d_z: usize,
    /// Text-embedding dimension.
    pub d_e: usize,
    /// Number of sub-categories.
    pub num_sub: usize,
    /// Number of main categories.
    pub num_main: usize,
    /// Channels at 4×4; halved per stage down to `min_channels`.
    pub base_channels: usize,
    pub min_channels: usize,
    pub max_resolution: usize,
    /// Off for the category-only baseline: labels come from the main layer
    /// and the text slot of the generator input is zeroed.
    pub use_ontology: bool,
    pub gp_lambda: f64,
    pub head_weights: HeadWeights,
    /// Weight of the mean squared critic output on reals.
    pub drift: f64,
    pub init_seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            d_z: 64,
            d_e: 50,
            num_sub: 6,
            num_main: 3,
            base_channels: 128,
            min_channels: 32,
            max_resolution: 32,
            use_ontology: true,
            gp_lambda: 10.0,
            head_weights: HeadWeights::default(),
            drift: 1e-3,
            init_seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_resolution < 8 || !self.max_resolution.is_power_of_two() {
            return bad("max_resolution must be a power of two >= 8");
        }
        if self.max_resolution > 64 {
            return bad("max_resolution is capped at 64");
        }
        if self.d_z == 0 || self.d_e == 0 || self.num_sub == 0 || self.num_main == 0 {
            return bad("all dimensions must be positive");
        }
        if self.base_channels == 0 || self.min_channels == 0 {
            return bad("channel counts must be positive");
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.gp_lambda) || !ok(self.drift) {
            return bad("gp_lambda and drift must be finite and non-negative");
        }
        let w = self.head_weights;
        if !ok(w.adv) || !ok(w.cls) || !ok(w.reg) {
            return bad("head weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn label_layer(&self) -> LabelLayer {
        if self.use_ontology {
            LabelLayer::Sub
        } else {
            LabelLayer::Main
        }
    }

    /// Length of the one-hot label the generator sees and the L head predicts.
    pub fn label_dim(&self) -> usize {
        match self.label_layer() {
            LabelLayer::Sub => self.num_sub,
            LabelLayer::Main => self.num_main,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.d_z + self.d_e + self.label_dim()
    }

    pub fn num_stages(&self) -> usize {
        (self.max_resolution / 4).trailing_zeros() as usize + 1
    }

    pub fn resolution(&self, stage: usize) -> usize {
        4 << stage
    }

    pub fn channels(&self, stage: usize) -> usize {
        (self.base_channels >> stage).max(self.min_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: usize,
    pub alpha: f64,
}

impl StageState {
    pub fn new(stage: usize, alpha: f64) -> Self {
        StageState { stage, alpha }
    }

    /// A fully faded-in stage.
    pub fn stable(stage: usize) -> Self {
        StageState { stage, alpha: 1.0 }
    }
}

/// Generator input `z ⊕ e ⊕ y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningVector {
    pub z: Vec<f64>,
    pub e: Vec<f64>,
    pub y: Vec<f64>,
    pub concat: Vec<f64>,
}

impl ConditioningVector {
    pub fn new(z: Vec<f64>, e: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != y.len() {
            return Err(Error::Shape(format!("label vector {y:?} is not one-hot")));
        }
        let mut concat = Vec::with_capacity(z.len() + e.len() + y.len());
        concat.extend_from_slice(&z);
        concat.extend_from_slice(&e);
        concat.extend_from_slice(&y);
        Ok(ConditioningVector { z, e, y, concat })
    }

    /// As `new`, also checking every part against the model configuration.
    pub fn for_config(config: &GanConfig, z: Vec<f64>, e: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if z.len() != config.d_z || e.len() != config.d_e || y.len() != config.label_dim() {
            return Err(Error::Shape(format!(
                "conditioning parts have lengths ({}, {}, {}), expected ({}, {}, {})",
                z.len(),
                e.len(),
                y.len(),
                config.d_z,
                config.d_e,
                config.label_dim()
            )));
        }
        ConditioningVector::new(z, e, y)
    }
}

pub fn make_conditioning_vector(config: &GanConfig, z: Vec<f64>, e: Vec<f64>, y: Vec<f64>) -> Result<ConditioningVector> {
    ConditioningVector::for_config(config, z, e, y)
}

/// Stacks conditioning vectors into an (N, d) tensor.
pub fn conditioning_batch(conds: &[ConditioningVector]) -> Result<Tensor> {
    let d = conds.first().map(|c| c.concat.len()).ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(conds.len() * d);
    for c in conds {
        if c.concat.len() != d {
            return Err(Error::Shape("ragged conditioning batch".into()));
        }
        data.extend_from_slice(&c.concat);
    }
    Ok(Tensor::from_vec(data, &[conds.len(), d]))
}

/// `batch` noise vectors with i.i.d. entries uniform on [-1, 1].
pub fn sample_noise(d_z: usize, batch: usize, seed: u64) -> Vec<Vec<f64>> {
    sample_noise_with(&mut ChaCha8Rng::seed_from_u64(seed), d_z, batch)
}

pub fn sample_noise_with(rng: &mut impl Rng, d_z: usize, batch: usize) -> Vec<Vec<f64>> {
    (0..batch).map(|_| (0..d_z).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect()
}

pub struct DiscriminatorOutputs {
    /// (N, 1)
    pub critic: Tensor,
    /// (N, label_dim)
    pub label_logits: Tensor,
    /// (N, d_e)
    pub regressed_e: Tensor,
}

#[derive(Clone)]
pub struct GanModel {
    pub config: GanConfig,
    pub stage: StageState,
    pub params: ParamStore,
}

pub const GEN_PREFIX: &str = "g.";
pub const DISC_PREFIX: &str = "d.";
pub const CRITIC_HEAD: &str = "d.head.critic";
pub const CLS_HEAD: &str = "d.head.cls";
pub const REG_HEAD: &str = "d.head.reg";

impl GanModel {
    pub fn new(config: GanConfig) -> Result<GanModel> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stage_rng(&config, 0);
        let c0 = config.channels(0);
        init_dense(&mut params, &mut rng, "g.s0.dense", config.cond_dim(), c0 * 16, false);
        init_conv(&mut params, &mut rng, "g.s0.conv", c0, c0, 3);
        init_conv(&mut params, &mut rng, "g.rgb0", 3, c0, 1);
        init_conv(&mut params, &mut rng, "d.rgb0", c0, 3, 1);
        init_conv(&mut params, &mut rng, "d.final.conv", c0, c0 + 1, 3);
        init_dense(&mut params, &mut rng, "d.final.dense", c0 * 16, c0, false);
        init_dense(&mut params, &mut rng, CRITIC_HEAD, c0, 1, true);
        init_dense(&mut params, &mut rng, CLS_HEAD, c0, config.label_dim(), true);
        init_dense(&mut params, &mut rng, REG_HEAD, c0, config.d_e, true);
        Ok(GanModel { config, stage: StageState::new(0, 1.0), params })
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution(self.stage.stage)
    }

    pub fn can_grow(&self) -> bool {
        self.stage.stage + 1 < self.config.num_stages()
    }

    /// Adds the next resolution block to both networks. Existing parameters
    /// are untouched; alpha restarts at 0.
    pub fn grow(&mut self) -> Result<()> {
        if !self.can_grow() {
            return Err(Error::Config(format!(
                "cannot grow past {}x{}",
                self.config.max_resolution, self.config.max_resolution
            )));
        }
        let s = self.stage.stage + 1;
        let (c_prev, c) = (self.config.channels(s - 1), self.config.channels(s));
        let mut rng = stage_rng(&self.config, s);
        let p = &mut self.params;
        init_conv(p, &mut rng, &format!("g.s{s}.conv0"), c, c_prev, 3);
        init_conv(p, &mut rng, &format!("g.s{s}.conv1"), c, c, 3);
        init_conv(p, &mut rng, &format!("g.rgb{s}"), 3, c, 1);
        init_conv(p, &mut rng, &format!("d.rgb{s}"), c, 3, 1);
        init_conv(p, &mut rng, &format!("d.s{s}.conv0"), c, c, 3);
        init_conv(p, &mut rng, &format!("d.s{s}.conv1"), c_prev, c, 3);
        self.stage = StageState::new(s, 0.0);
        Ok(())
    }

    fn check_stage(&self, stage: StageState) -> Result<()> {
        if stage.stage > self.stage.stage {
            return Err(Error::Config(format!("stage {} has not been grown yet", stage.stage)));
        }
        if !(0.0..=1.0).contains(&stage.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", stage.alpha)));
        }
        Ok(())
    }

    fn gen_features(&self, cond: &Tensor, upto: usize) -> Tensor {
        let p = &self.params;
        let c0 = self.config.channels(0);
        let n = cond.dim(0);
        let h = dense(p, "g.s0.dense", cond, SQRT2 / 4.0).reshape(&[n, c0, 4, 4]);
        let h = pixel_norm(&h.leaky_relu(LRELU_SLOPE));
        let mut h = pixel_norm(&conv(p, "g.s0.conv", &h, SQRT2).leaky_relu(LRELU_SLOPE));
        for s in 1..=upto {
            h = self.gen_block(&h, s);
        }
        h
    }

    fn gen_block(&self, h: &Tensor, s: usize) -> Tensor {
        let p = &self.params;
        let h = h.upsample2x();
        let h = pixel_norm(&conv(p, &format!("g.s{s}.conv0"), &h, SQRT2).leaky_relu(LRELU_SLOPE));
        pixel_norm(&conv(p, &format!("g.s{s}.conv1"), &h, SQRT2).leaky_relu(LRELU_SLOPE))
    }

    fn to_rgb(&self, h: &Tensor, s: usize) -> Tensor {
        conv(&self.params, &format!("g.rgb{s}"), h, 1.0).tanh()
    }

    /// Images (N, 3, R, R) in [-1, 1] from conditioning rows (N, cond_dim).
    pub fn generate(&self, cond: &Tensor, stage: StageState) -> Result<Tensor> {
        self.check_stage(stage)?;
        if cond.ndim() != 2 || cond.dim(1) != self.config.cond_dim() {
            return Err(Error::Shape(format!(
                "conditioning batch {:?}, expected (N, {})",
                cond.shape(),
                self.config.cond_dim()
            )));
        }
        let s = stage.stage;
        if s == 0 {
            return Ok(self.to_rgb(&self.gen_features(cond, 0), 0));
        }
        let prev = self.gen_features(cond, s - 1);
        let a = stage.alpha;
        if a == 0.0 {
            return Ok(self.to_rgb(&prev, s - 1).upsample2x());
        }
        let hi = self.to_rgb(&self.gen_block(&prev, s), s);
        if a == 1.0 {
            return Ok(hi);
        }
        let lo = self.to_rgb(&prev, s - 1).upsample2x();
        Ok(hi.mul_scalar(a).add(&lo.mul_scalar(1.0 - a)))
    }

    fn disc_block(&self, x: &Tensor, s: usize) -> Tensor {
        let p = &self.params;
        let h = conv(p, &format!("d.s{s}.conv0"), x, SQRT2).leaky_relu(LRELU_SLOPE);
        conv(p, &format!("d.s{s}.conv1"), &h, SQRT2).leaky_relu(LRELU_SLOPE).avg_pool2x()
    }

    fn from_rgb(&self, x: &Tensor, s: usize) -> Tensor {
        conv(&self.params, &format!("d.rgb{s}"), x, SQRT2).leaky_relu(LRELU_SLOPE)
    }

    /// Shared trunk features (N, C0).
    pub fn trunk(&self, images: &Tensor, stage: StageState) -> Result<Tensor> {
        self.check_stage(stage)?;
        let res = self.config.resolution(stage.stage);
        if images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != res || images.dim(3) != res {
            return Err(Error::Shape(format!(
                "images {:?} do not match stage resolution {res}",
                images.shape()
            )));
        }
        let s = stage.stage;
        let a = stage.alpha;
        let mut h = if s == 0 {
            self.from_rgb(images, 0)
        } else if a == 0.0 {
            self.from_rgb(&images.avg_pool2x(), s - 1)
        } else {
            let hi = self.disc_block(&self.from_rgb(images, s), s);
            if a == 1.0 {
                hi
            } else {
                let lo = self.from_rgb(&images.avg_pool2x(), s - 1);
                hi.mul_scalar(a).add(&lo.mul_scalar(1.0 - a))
            }
        };
        for t in (1..s).rev() {
            h = self.disc_block(&h, t);
        }
        let p = &self.params;
        let n = h.dim(0);
        let h = conv(p, "d.final.conv", &minibatch_stddev(&h), SQRT2).leaky_relu(LRELU_SLOPE);
        let h = h.reshape(&[n, h.numel() / n]);
        Ok(dense(p, "d.final.dense", &h, SQRT2).leaky_relu(LRELU_SLOPE))
    }

    pub fn discriminate(&self, images: &Tensor, stage: StageState) -> Result<DiscriminatorOutputs> {
        let h = self.trunk(images, stage)?;
        Ok(DiscriminatorOutputs {
            critic: dense(&self.params, CRITIC_HEAD, &h, 1.0),
            label_logits: dense(&self.params, CLS_HEAD, &h, 1.0),
            regressed_e: dense(&self.params, REG_HEAD, &h, 1.0),
        })
    }

    /// Critic score only (skips the L and R output layers).
    pub fn critic(&self, images: &Tensor, stage: StageState) -> Result<Tensor> {
        let h = self.trunk(images, stage)?;
        Ok(dense(&self.params, CRITIC_HEAD, &h, 1.0))
    }

    pub fn generator_param_names(&self) -> Vec<String> {
        self.params.names_with_prefix(GEN_PREFIX)
    }

    pub fn discriminator_param_names(&self) -> Vec<String> {
        self.params.names_with_prefix(DISC_PREFIX)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config, "stage": self.stage });
        let mut c = Checkpoint::new("gan", meta);
        for (name, t) in self.params.iter() {
            c.push(name, t.shape(), t.to_vec());
        }
        c
    }

    /// Restores a model from a checkpoint; extra (non-model) tensors are ignored.
    pub fn from_checkpoint(c: &Checkpoint, path: &Path) -> Result<GanModel> {
        c.expect_kind("gan", path)?;
        let config: GanConfig = c.meta_field("config", path)?;
        let stage: StageState = c.meta_field("stage", path)?;
        config.validate()?;
        let mut params = ParamStore::new();
        for t in &c.tensors {
            if t.name.starts_with(GEN_PREFIX) || t.name.starts_with(DISC_PREFIX) {
                params.insert(&t.name, t.data.clone(), &t.shape);
            }
        }
        let model = GanModel { config, stage, params };
        // Catch truncated or mismatched files before the first forward pass.
        let mut reference = GanModel::new(model.config.clone())?;
        while reference.stage.stage < stage.stage {
            reference.grow()?;
        }
        for (name, t) in reference.params.iter() {
            if !model.params.contains(name) || model.params.get(name).shape() != t.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    message: format!("parameter {name} missing or misshapen"),
                });
            }
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<GanModel> {
        GanModel::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

pub fn generator_forward(model: &GanModel, cond: &[ConditioningVector], stage: StageState) -> Result<Tensor> {
    model.generate(&conditioning_batch(cond)?, stage)
}

pub fn discriminator_forward(model: &GanModel, images: &Tensor, stage: StageState) -> Result<DiscriminatorOutputs> {
    model.discriminate(images, stage)
}

fn stage_rng(config: &GanConfig, stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(config.init_seed ^ mix64(stage as u64 + 1)))
}

/// Downsamples NCHW images by repeated 2×2 averaging until they are `res` wide.
pub fn downsample_to(images: &Tensor, res: usize) -> Tensor {
    let mut x = images.clone();
    while x.dim(2) > res {
        x = x.avg_pool2x();
    }
    assert_eq!(x.dim(2), res, "cannot reach resolution {res} from {}", images.dim(2));
    x
}

/// Real images as the discriminator sees them during a fade-in: the same
/// alpha blend of the sharp image and its upsampled half-resolution version.
pub fn fade_reals(images: &Tensor, stage: StageState) -> Tensor {
    if stage.stage == 0 || stage.alpha == 1.0 {
        return images.clone();
    }
    let lo = images.avg_pool2x().upsample2x();
    images.mul_scalar(stage.alpha).add(&lo.mul_scalar(1.0 - stage.alpha))
}

pub use nn::AdamConfig;
