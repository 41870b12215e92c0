//! Text → sub-category classifier used at generation time.
//!
//! Two independent LSTMs read the frozen word-vector sequence forwards and
//! backwards; their final hidden states are concatenated and fed to a linear
//! softmax layer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::classification_loss;
use crate::nn::{gaussian, Adam, AdamConfig, ParamStore};
use crate::synthdata::shuffled_indices;
use crate::tensor::{grad, Tensor};
use crate::textemb::{mix64, tokenize, WordVectorTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPredictorConfig {
    pub d_e: usize,
    pub hidden: usize,
    pub num_labels: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the corpus held out for the accuracy report.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for LabelPredictorConfig {
    fn default() -> Self {
        LabelPredictorConfig {
            d_e: 50,
            hidden: 32,
            num_labels: 6,
            max_len: 32,
            dropout: 0.1,
            lr: 1e-2,
            epochs: 6,
            batch_size: 32,
            holdout: 0.2,
            seed: 0,
        }
    }
}

impl LabelPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.d_e == 0 || self.num_labels == 0 {
            return bad("hidden, d_e and num_labels must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must be in [0, 1)");
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("batch_size and lr must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_loss: Vec<f64>,
    pub train_examples: usize,
    pub holdout_examples: usize,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
    /// Set when no token of the text had a word vector.
    pub empty_input: bool,
}

#[derive(Clone)]
pub struct LabelPredictor {
    pub config: LabelPredictorConfig,
    pub params: ParamStore,
}

const DIRS: [&str; 2] = ["fwd", "bwd"];

impl LabelPredictor {
    pub fn new(config: LabelPredictorConfig) -> Result<LabelPredictor> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ 0x1b));
        let mut params = ParamStore::new();
        let (d, h) = (config.d_e, config.hidden);
        let scaled = |rng: &mut ChaCha8Rng, n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            gaussian(rng, n).into_iter().map(|v| v * s).collect()
        };
        for dir in DIRS {
            params.insert(&format!("{dir}.wx"), scaled(&mut rng, d * 4 * h, d), &[d, 4 * h]);
            params.insert(&format!("{dir}.wh"), scaled(&mut rng, h * 4 * h, h), &[h, 4 * h]);
            // Forget gate bias starts at 1.
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].fill(1.0);
            params.insert(&format!("{dir}.b"), b, &[4 * h]);
        }
        params.insert("out.w", scaled(&mut rng, 2 * h * config.num_labels, 2 * h), &[2 * h, config.num_labels]);
        params.insert("out.b", vec![0.0; config.num_labels], &[config.num_labels]);
        Ok(LabelPredictor { config, params })
    }

    /// Word vectors of the first `max_len` tokens (unknown words skipped).
    pub fn encode(&self, table: &WordVectorTable, text: &str) -> Vec<Vec<f64>> {
        tokenize(text).iter().take(self.config.max_len).filter_map(|w| table.lookup(w)).collect()
    }

    fn cell(&self, dir: &str, x: &Tensor, h: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
        let hs = self.config.hidden;
        let p = &self.params;
        let gates = x.matmul(p.get(&format!("{dir}.wx"))).add(&h.matmul(p.get(&format!("{dir}.wh")))).add(p.get(&format!("{dir}.b")));
        let i = gates.narrow(1, 0, hs).sigmoid();
        let f = gates.narrow(1, hs, hs).sigmoid();
        let g = gates.narrow(1, 2 * hs, hs).tanh();
        let o = gates.narrow(1, 3 * hs, hs).sigmoid();
        let c = f.mul(c).add(&i.mul(&g));
        let h = o.mul(&c.tanh());
        (h, c)
    }

    /// Logits (B, K) for a batch of sequences. Empty sequences are read as a
    /// single zero vector. `dropout_rng` enables dropout on the final states.
    fn logits(&self, seqs: &[Vec<Vec<f64>>], dropout_rng: Option<&mut ChaCha8Rng>) -> Tensor {
        let (d, hs) = (self.config.d_e, self.config.hidden);
        let b = seqs.len();
        let lens: Vec<usize> = seqs.iter().map(|s| s.len().max(1)).collect();
        let t_max = *lens.iter().max().unwrap();
        let step_input = |t: usize| {
            let mut x = vec![0.0; b * d];
            for (row, s) in seqs.iter().enumerate() {
                if let Some(v) = s.get(t) {
                    x[row * d..(row + 1) * d].copy_from_slice(v);
                }
            }
            Tensor::from_vec(x, &[b, d])
        };
        let mask = |t: usize| Tensor::from_vec(lens.iter().map(|&l| (t < l) as u8 as f64).collect(), &[b, 1]);
        let mut finals = Vec::new();
        for (k, dir) in DIRS.iter().enumerate() {
            let mut h = Tensor::zeros(&[b, hs]);
            let mut c = Tensor::zeros(&[b, hs]);
            let order: Vec<usize> = if k == 0 { (0..t_max).collect() } else { (0..t_max).rev().collect() };
            for t in order {
                let (h_new, c_new) = self.cell(dir, &step_input(t), &h, &c);
                // Padded positions keep the previous state.
                let m = mask(t);
                let keep = m.neg().add_scalar(1.0);
                h = h_new.mul(&m).add(&h.mul(&keep));
                c = c_new.mul(&m).add(&c.mul(&keep));
            }
            finals.push(h);
        }
        let mut feat = Tensor::concat(&finals, 1);
        if let Some(rng) = dropout_rng {
            let p = self.config.dropout;
            if p > 0.0 {
                let keep: Vec<f64> = (0..feat.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }).collect();
                feat = feat.mask_mul(std::rc::Rc::new(keep));
            }
        }
        feat.matmul(self.params.get("out.w")).add(self.params.get("out.b"))
    }

    pub fn predict_sequence(&self, seq: &[Vec<f64>]) -> Prediction {
        let logits = self.logits(&[seq.to_vec()], None);
        let probabilities = logits.softmax().to_vec();
        let label = (0..probabilities.len()).max_by(|&a, &b| probabilities[a].total_cmp(&probabilities[b])).unwrap();
        Prediction { label, probabilities, empty_input: seq.is_empty() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Checkpoint::new("labelnet", serde_json::json!({ "config": self.config }));
        for (name, t) in self.params.iter() {
            c.push(name, t.shape(), t.to_vec());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<LabelPredictor> {
        let c = Checkpoint::load(path)?;
        c.expect_kind("labelnet", path)?;
        let config: LabelPredictorConfig = c.meta_field("config", path)?;
        let mut model = LabelPredictor::new(config)?;
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let shape = model.params.get(&name).shape().to_vec();
            let stored = c.get(&name).filter(|t| t.shape == shape).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("parameter {name} missing or misshapen"),
            })?;
            model.params.set(&name, stored.data.clone());
        }
        Ok(model)
    }
}

/// Predicted label and class distribution for `text`.
pub fn predict_label(model: &LabelPredictor, table: &WordVectorTable, text: &str) -> Prediction {
    let seq = model.encode(table, text);
    if seq.is_empty() {
        log::warn!("no known words in {text:?}; predicting from an empty sequence");
    }
    model.predict_sequence(&seq)
}

pub fn train_label_predictor(
    config: &LabelPredictorConfig,
    corpus: &[(String, usize)],
    table: &WordVectorTable,
) -> Result<(LabelPredictor, TrainingReport)> {
    if corpus.is_empty() {
        return Err(Error::Dataset("label predictor corpus is empty".into()));
    }
    if table.dim() != config.d_e {
        return Err(Error::Config(format!("word vectors have dimension {}, config expects {}", table.dim(), config.d_e)));
    }
    if let Some((_, l)) = corpus.iter().find(|(_, l)| *l >= config.num_labels) {
        return Err(Error::IndexOutOfRange { index: *l as i64, len: config.num_labels });
    }
    let mut model = LabelPredictor::new(config.clone())?;
    let seqs: Vec<Vec<Vec<f64>>> = corpus.iter().map(|(t, _)| model.encode(table, t)).collect();
    let order = shuffled_indices(corpus.len(), mix64(config.seed ^ 0x5a));
    let n_hold = (corpus.len() as f64 * config.holdout).floor() as usize;
    let (hold, train) = order.split_at(n_hold);

    let mut adam = Adam::new(AdamConfig { lr: config.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ 0xd0));
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let perm = shuffled_indices(train.len(), mix64(config.seed ^ mix64(epoch as u64 + 7)));
        let mut total = 0.0;
        for chunk in perm.chunks(config.batch_size) {
            let batch: Vec<Vec<Vec<f64>>> = chunk.iter().map(|&i| seqs[train[i]].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| corpus[train[i]].1).collect();
            let loss = classification_loss(&model.logits(&batch, Some(&mut drop_rng)), &labels)?;
            let params: Vec<&Tensor> = names.iter().map(|n| model.params.get(n)).collect();
            let grads = grad(&loss, &params, false);
            adam.step(&mut model.params, &names, &grads);
            total += loss.item() * chunk.len() as f64;
        }
        let mean = total / train.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Config("label predictor training diverged".into()));
        }
        log::info!("labelnet epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    let holdout_accuracy = if hold.is_empty() {
        None
    } else {
        let correct = hold.iter().filter(|&&i| model.predict_sequence(&seqs[i]).label == corpus[i].1).count();
        Some(correct as f64 / hold.len() as f64)
    };
    let report = TrainingReport {
        epoch_loss,
        train_examples: train.len(),
        holdout_examples: hold.len(),
        holdout_accuracy,
    };
    Ok((model, report))
}
