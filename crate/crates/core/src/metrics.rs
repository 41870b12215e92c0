//! Evaluation measures: FID, Inception Score, and the two conditioning probes
//! (label cross entropy through L, embedding distance through R).
//!
//! FID and IS need a feature/classifier backbone. The default is
//! [`ConvExtractor`], a small convolutional sub-category classifier trained on
//! the synthetic data; its penultimate layer gives the FID features and its
//! softmax the IS class posteriors.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gan::{downsample_to, sample_noise_with, GanModel, StageState};
use crate::losses::{classification_loss, one_hot, regression_loss};
use crate::nn::{dense, init_conv, init_dense, Adam, AdamConfig, ParamStore, LRELU_SLOPE};
use crate::synthdata::{images_to_tensor, shuffled_indices, Dataset};
use crate::tensor::{grad, Tensor};
use crate::textemb::{mix64, WordVectorTable};

pub type Matrix = DMatrix<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: Matrix,
}

/// Sample mean and unbiased (N−1) covariance, symmetrized.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianFit> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Metrics(format!("need at least 2 samples for a Gaussian fit, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Metrics("feature rows have different lengths".into()));
    }
    let x = Matrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianFit { mean, cov })
}

fn scale_of(m: &Matrix) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0)
}

/// Square root of a symmetric positive semidefinite matrix via its
/// eigendecomposition; eigenvalues down to −1e-8 are clamped to 0.
pub fn matrix_sqrt_psd(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Metrics(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
    }
    let scale = scale_of(m);
    let asym = (m - m.transpose()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if asym > 1e-8 * scale {
        return Err(Error::Metrics(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -1e-8 * scale {
            return Err(Error::Metrics(format!("matrix is not positive semidefinite (eigenvalue {min:e})")));
        }
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let s = q * Matrix::from_diagonal(&roots) * q.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Fréchet distance between two Gaussian fits, with the cross term computed
/// as `tr((Σ_r^½ Σ_g Σ_r^½)^½)`.
pub fn fid(real: &GaussianFit, fake: &GaussianFit) -> Result<f64> {
    let d = real.mean.len();
    if fake.mean.len() != d || real.cov.nrows() != d || fake.cov.nrows() != d {
        return Err(Error::Metrics(format!(
            "feature dimensions differ: {} vs {}",
            d,
            fake.mean.len()
        )));
    }
    let diff = &real.mean - &fake.mean;
    let sr = matrix_sqrt_psd(&real.cov)?;
    // Validates the fake covariance too.
    matrix_sqrt_psd(&fake.cov)?;
    let sandwich = &sr * &fake.cov * &sr;
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sandwich).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = diff.norm_squared() + real.cov.trace() + fake.cov.trace() - 2.0 * cross;
    if value < 0.0 {
        if value < -1e-4 {
            log::warn!("FID evaluated to {value}; clamping to 0");
        }
        return Ok(0.0);
    }
    Ok(value)
}

/// Inception Score over `n_splits` equal splits: per split
/// `exp(mean_i KL(p(y|x_i) ‖ p̄))`; returns the mean and (population)
/// standard deviation over splits.
pub fn inception_score(probs: &[Vec<f64>], n_splits: usize) -> Result<(f64, f64)> {
    let n = probs.len();
    if n_splits == 0 || n < n_splits {
        return Err(Error::Metrics(format!("{n} rows cannot be split {n_splits} ways")));
    }
    let c = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != c || (s - 1.0).abs() > 1e-5 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Metrics(format!("row {i} is not a probability vector")));
        }
    }
    let floor = |p: f64| p.max(1e-12);
    let mut scores = Vec::with_capacity(n_splits);
    for k in 0..n_splits {
        let rows = &probs[k * n / n_splits..(k + 1) * n / n_splits];
        let m = rows.len() as f64;
        let marginal: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m).collect();
        let kl: f64 = rows
            .iter()
            .map(|r| (0..c).map(|j| r[j] * (floor(r[j]).ln() - floor(marginal[j]).ln())).sum::<f64>())
            .sum::<f64>()
            / m;
        scores.push(kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}

/// Cross entropy between the conditioning labels and the L head's prediction
/// on images generated under them.
pub fn conditioning_cross_entropy(model: &GanModel, images: &Tensor, labels: &[usize], stage: StageState) -> Result<f64> {
    let out = model.discriminate(images, stage)?;
    Ok(classification_loss(&out.label_logits, labels)?.item())
}

/// Squared distance between the conditioning embeddings and the R head's
/// regression on images generated under them.
pub fn conditioning_l2(model: &GanModel, images: &Tensor, e_cond: &Tensor, stage: StageState) -> Result<f64> {
    let out = model.discriminate(images, stage)?;
    Ok(regression_loss(&out.regressed_e, e_cond)?.item())
}

/// Images → features and class posteriors.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// Returns (features, probabilities) per image. Inputs are NCHW in [-1, 1]
    /// at any power-of-two resolution.
    fn extract(&self, images: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorMeta {
    pub name: String,
    pub resolution: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub feature_dim: usize,
    /// How the weights were obtained (data size, epochs, seed, accuracy).
    pub provenance: serde_json::Value,
}

#[derive(Clone)]
pub struct ConvExtractor {
    pub meta: ExtractorMeta,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub channels: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        ExtractorTraining { epochs: 4, batch_size: 32, lr: 1e-3, channels: 16, feature_dim: 64, seed: 0 }
    }
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

impl ConvExtractor {
    pub fn new(resolution: usize, num_classes: usize, channels: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if resolution < 4 || !resolution.is_power_of_two() || feature_dim < 2 || num_classes < 2 {
            return Err(Error::Config("extractor needs a power-of-two resolution >= 4, d_f >= 2 and >= 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
        let mut params = ParamStore::new();
        init_conv(&mut params, &mut rng, "x.stem", channels, 3, 3);
        let mut r = resolution;
        let mut i = 0;
        while r > 4 {
            init_conv(&mut params, &mut rng, &format!("x.b{i}"), channels, channels, 3);
            r /= 2;
            i += 1;
        }
        init_dense(&mut params, &mut rng, "x.feat", channels * 16, feature_dim, false);
        init_dense(&mut params, &mut rng, "x.out", feature_dim, num_classes, false);
        Ok(ConvExtractor {
            meta: ExtractorMeta {
                name: format!("conv{channels}-r{resolution}-d{feature_dim}"),
                resolution,
                num_classes,
                channels,
                feature_dim,
                provenance: serde_json::Value::Null,
            },
            params,
        })
    }

    /// Resamples to the extractor's resolution (nearest upsampling or 2×2
    /// averaging).
    fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        let r = self.meta.resolution;
        if images.ndim() != 4 || images.dim(1) != 3 || !images.dim(2).is_power_of_two() {
            return Err(Error::Shape(format!("cannot extract features from {:?}", images.shape())));
        }
        let mut x = images.detach();
        while x.dim(2) < r {
            x = x.upsample2x();
        }
        Ok(downsample_to(&x, r))
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let p = &self.params;
        let mut h = crate::nn::conv(p, "x.stem", x, SQRT2).leaky_relu(LRELU_SLOPE);
        let mut i = 0;
        while h.dim(2) > 4 {
            h = crate::nn::conv(p, &format!("x.b{i}"), &h, SQRT2).leaky_relu(LRELU_SLOPE).avg_pool2x();
            i += 1;
        }
        let n = h.dim(0);
        let h = h.reshape(&[n, h.numel() / n]);
        let feat = dense(p, "x.feat", &h, SQRT2).leaky_relu(LRELU_SLOPE);
        let logits = dense(p, "x.out", &feat, 1.0);
        (feat, logits)
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&self.prepare(images)?).1)
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        let mut correct = 0;
        for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(64) {
            let x = images_to_tensor(&chunk.iter().map(|&i| &dataset.examples[i].image).collect::<Vec<_>>());
            let logits = self.logits(&x)?;
            let k = logits.dim(1);
            for (row, &i) in chunk.iter().enumerate() {
                let r = &logits.data()[row * k..(row + 1) * k];
                let best = (0..k).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
                correct += (best == dataset.examples[i].sub_index) as usize;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("extractor", serde_json::json!({ "extractor": self.meta }));
        for (name, t) in self.params.iter() {
            c.push(name, t.shape(), t.to_vec());
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<ConvExtractor> {
        let c = Checkpoint::load(path)?;
        c.expect_kind("extractor", path)?;
        let meta: ExtractorMeta = c.meta_field("extractor", path)?;
        let reference = ConvExtractor::new(meta.resolution, meta.num_classes, meta.channels, meta.feature_dim, 0)?;
        let mut params = ParamStore::new();
        for (name, t) in reference.params.iter() {
            let stored = c.get(name).filter(|s| s.shape == t.shape()).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("parameter {name} missing or misshapen"),
            })?;
            params.insert(name, stored.data.clone(), &stored.shape);
        }
        Ok(ConvExtractor { meta, params })
    }
}

impl FeatureExtractor for ConvExtractor {
    fn name(&self) -> &str {
        &self.meta.name
    }

    fn feature_dim(&self) -> usize {
        self.meta.feature_dim
    }

    fn extract(&self, images: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (feat, logits) = self.forward(&self.prepare(images)?);
        let probs = logits.softmax();
        let rows = |t: &Tensor| t.data().chunks(t.dim(1)).map(|r| r.to_vec()).collect::<Vec<_>>();
        Ok((rows(&feat), rows(&probs)))
    }
}

/// Trains the default extractor as a sub-category classifier. `holdout` is
/// used only to record accuracy in the provenance.
pub fn train_extractor(train: &Dataset, holdout: Option<&Dataset>, num_classes: usize, opts: &ExtractorTraining) -> Result<ConvExtractor> {
    if train.is_empty() {
        return Err(Error::Dataset("extractor training set is empty".into()));
    }
    let mut ex = ConvExtractor::new(train.resolution, num_classes, opts.channels, opts.feature_dim, opts.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: opts.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let names: Vec<String> = ex.params.names().cloned().collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..opts.epochs {
        for batch in train.batches(opts.batch_size, mix64(opts.seed ^ mix64(epoch as u64 + 1))) {
            let x = images_to_tensor(&batch.iter().map(|e| &e.image).collect::<Vec<_>>());
            let labels: Vec<usize> = batch.iter().map(|e| e.sub_index).collect();
            let (_, logits) = ex.forward(&x);
            let loss = classification_loss(&logits, &labels)?;
            let params: Vec<&Tensor> = names.iter().map(|n| ex.params.get(n)).collect();
            let grads = grad(&loss, &params, false);
            adam.step(&mut ex.params, &names, &grads);
            last_loss = loss.item();
        }
        log::info!("extractor epoch {epoch}: loss {last_loss:.4}");
    }
    if !last_loss.is_finite() {
        return Err(Error::Metrics("extractor training diverged".into()));
    }
    let train_acc = ex.accuracy(train)?;
    let holdout_acc = holdout.map(|h| ex.accuracy(h)).transpose()?;
    ex.meta.provenance = serde_json::json!({
        "train_examples": train.len(),
        "epochs": opts.epochs,
        "seed": opts.seed,
        "train_accuracy": train_acc,
        "holdout_accuracy": holdout_acc,
    });
    Ok(ex)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub is_splits: usize,
    /// Over the model's own label layer (main categories for the baseline).
    pub cond_ce: f64,
    pub cond_l2: f64,
    /// R-head distance to the embedding of a different, randomly paired
    /// record's text; the chance level for `cond_l2`.
    pub cond_l2_shuffled: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
    pub checkpoint_id: String,
    pub variant: String,
    pub resolution: usize,
    pub extractor: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_real: usize,
    pub n_fake: usize,
    pub is_splits: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_real: 1000, n_fake: 1000, is_splits: 1, batch_size: 50, seed: 0 }
    }
}

/// Hex SHA-256 of a checkpoint file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Computes every metric for one model. Conditions for the generated images
/// are drawn from dataset records; everything is determined by `settings.seed`.
pub fn evaluate(
    model: &GanModel,
    checkpoint_id: &str,
    dataset: &Dataset,
    table: &WordVectorTable,
    extractor: &dyn FeatureExtractor,
    settings: &EvalSettings,
) -> Result<MetricReport> {
    let EvalSettings { n_real, n_fake, is_splits, batch_size, seed } = *settings;
    if n_real < 2 || n_fake < 2 {
        return Err(Error::Metrics("n_real and n_fake must be at least 2".into()));
    }
    if n_real > dataset.len() {
        return Err(Error::Metrics(format!("n_real = {n_real} exceeds the {} available examples", dataset.len())));
    }
    if batch_size < 2 {
        return Err(Error::Metrics("evaluation batch size must be at least 2".into()));
    }
    let config = &model.config;
    let stage = model.stage;
    let res = config.resolution(stage.stage);
    if dataset.resolution < res {
        return Err(Error::Metrics(format!("dataset resolution {} is below the model's {res}", dataset.resolution)));
    }

    let real_idx = &shuffled_indices(dataset.len(), mix64(seed ^ 0x7e))[..n_real];
    let mut real_feats = Vec::with_capacity(n_real);
    for chunk in real_idx.chunks(batch_size) {
        let x = images_to_tensor(&chunk.iter().map(|&i| &dataset.examples[i].image).collect::<Vec<_>>());
        real_feats.extend(extractor.extract(&downsample_to(&x, res))?.0);
    }

    // Conditions cycle through a shuffled order of the records.
    let order = shuffled_indices(dataset.len(), mix64(seed ^ 0xfa));
    let cond_idx: Vec<usize> = (0..n_fake).map(|i| order[i % order.len()]).collect();
    let mut partner: Vec<usize> = cond_idx.clone();
    partner.rotate_left(1 + n_fake / 2);
    let embed: std::collections::HashMap<usize, Vec<f64>> = cond_idx
        .iter()
        .map(|&i| (i, table.embed(&dataset.examples[i].text).vector))
        .collect();
    let mut z_rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x2e));

    let mut fake_feats = Vec::with_capacity(n_fake);
    let mut fake_probs = Vec::with_capacity(n_fake);
    let (mut ce_sum, mut l2_sum, mut l2_shuf_sum) = (0.0, 0.0, 0.0);
    for (chunk, pchunk) in cond_idx.chunks(batch_size).zip(partner.chunks(batch_size)) {
        let b = chunk.len();
        let labels: Vec<usize> = chunk
            .iter()
            .map(|&i| if config.use_ontology { dataset.examples[i].sub_index } else { dataset.mains[i] })
            .collect();
        let e = Tensor::from_vec(chunk.iter().flat_map(|i| embed[i].clone()).collect(), &[b, config.d_e]);
        let e_other = Tensor::from_vec(pchunk.iter().flat_map(|i| embed[i].clone()).collect(), &[b, config.d_e]);
        let z = Tensor::from_vec(sample_noise_with(&mut z_rng, config.d_z, b).concat(), &[b, config.d_z]);
        let e_in = if config.use_ontology { e.clone() } else { Tensor::zeros(e.shape()) };
        let cond = Tensor::concat(&[z, e_in, one_hot(&labels, config.label_dim())?], 1);
        let fake = model.generate(&cond, stage)?;
        let out = model.discriminate(&fake, stage)?;
        ce_sum += classification_loss(&out.label_logits, &labels)?.item() * b as f64;
        l2_sum += regression_loss(&out.regressed_e, &e)?.item() * b as f64;
        l2_shuf_sum += regression_loss(&out.regressed_e, &e_other)?.item() * b as f64;
        let (f, p) = extractor.extract(&fake)?;
        fake_feats.extend(f);
        fake_probs.extend(p);
    }
    let fid_value = fid(&fit_gaussian(&real_feats)?, &fit_gaussian(&fake_feats)?)?;
    let (is_mean, is_std) = inception_score(&fake_probs, is_splits)?;
    let n = n_fake as f64;
    Ok(MetricReport {
        fid: fid_value,
        is_mean,
        is_std,
        is_splits,
        cond_ce: ce_sum / n,
        cond_l2: l2_sum / n,
        cond_l2_shuffled: l2_shuf_sum / n,
        n_real,
        n_fake,
        seed,
        checkpoint_id: checkpoint_id.to_string(),
        variant: crate::trainer::variant_name(config).to_string(),
        resolution: res,
        extractor: extractor.name().to_string(),
    })
}

/// FID between two disjoint halves of the real data: the sampling-noise floor.
pub fn real_vs_real_fid(dataset: &Dataset, extractor: &dyn FeatureExtractor, n: usize, seed: u64) -> Result<f64> {
    if 2 * n > dataset.len() {
        return Err(Error::Metrics(format!("need {} examples for two halves of {n}", 2 * n)));
    }
    let order = shuffled_indices(dataset.len(), mix64(seed ^ 0x44));
    let feats = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for chunk in idx.chunks(50) {
            let x = images_to_tensor(&chunk.iter().map(|&i| &dataset.examples[i].image).collect::<Vec<_>>());
            out.extend(extractor.extract(&x)?.0);
        }
        Ok(out)
    };
    fid(&fit_gaussian(&feats(&order[..n])?)?, &fit_gaussian(&feats(&order[n..2 * n])?)?)
}
