//! Progressive training loop.
//!
//! A *step* is one optimizer update. Steps cycle through `n_critic`
//! critic/head updates followed by one generator update, and every step
//! consumes one batch of real examples (the generator step uses the batch's
//! text and labels as conditioning). Each stage lasts `images_per_stage`
//! examples; after a grow, alpha ramps linearly from 0 to 1 over the first
//! `images_per_fade` of them.
//!
//! Files written under the output directory:
//! `log.jsonl` (one [`TrainLogRecord`] per step, byte-deterministic),
//! `log.meta.json`, `timing.jsonl` (wall clock per step), `metrics.jsonl`
//! (in-loop evaluations) and `checkpoints/`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gan::{downsample_to, fade_reals, sample_noise_with, GanConfig, GanModel, HeadWeights, StageState};
use crate::losses::{classification_loss, generator_loss_from_outputs, gradient_penalty, one_hot, regression_loss, wasserstein_adv};
use crate::nn::{Adam, AdamConfig, AdamSlot};
use crate::synthdata::{images_to_tensor, DataStream, Dataset};
use crate::tensor::{grad, Tensor};
use crate::textemb::{mix64, WordVectorTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub images_per_stage: u64,
    pub images_per_fade: u64,
    pub n_critic: u64,
    /// Batch size per stage; the last entry applies to any later stage.
    pub batch_sizes: Vec<usize>,
    pub adam: AdamConfig,
    /// Number of stages to train; `None` trains up to `max_resolution`.
    pub stages: Option<usize>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            images_per_stage: 60_000,
            images_per_fade: 30_000,
            n_critic: 5,
            batch_sizes: vec![32, 32, 32, 16],
            adam: AdamConfig::default(),
            stages: None,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, config: &GanConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_critic < 1 {
            return bad("n_critic must be at least 1".into());
        }
        if self.images_per_fade > self.images_per_stage {
            return bad("images_per_fade exceeds images_per_stage".into());
        }
        if self.images_per_stage == 0 {
            return bad("images_per_stage must be positive".into());
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch_sizes must be a non-empty list of positive sizes".into());
        }
        if self.batch_sizes.iter().any(|&b| b < 2) {
            return bad("batch sizes below 2 leave the minibatch statistics undefined".into());
        }
        if let Some(s) = self.stages {
            if s == 0 || s > config.num_stages() {
                return bad(format!("stages must be in 1..={}", config.num_stages()));
            }
        }
        let a = self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("invalid optimizer hyperparameters".into());
        }
        Ok(())
    }

    pub fn batch_size(&self, stage: usize) -> usize {
        *self.batch_sizes.get(stage).unwrap_or_else(|| self.batch_sizes.last().unwrap())
    }

    pub fn total_stages(&self, config: &GanConfig) -> usize {
        self.stages.unwrap_or(config.num_stages())
    }

    pub fn alpha(&self, stage: usize, images_in_stage: u64) -> f64 {
        if stage == 0 || self.images_per_fade == 0 {
            1.0
        } else {
            (images_in_stage as f64 / self.images_per_fade as f64).min(1.0)
        }
    }

    pub fn is_generator_step(&self, step: u64) -> bool {
        step % (self.n_critic + 1) == self.n_critic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Critic,
    Generator,
}

/// One step's record. Terms not measured by the step's kind are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub stage: usize,
    pub resolution: usize,
    pub alpha: f64,
    pub kind: StepKind,
    pub critic_adv: Option<f64>,
    pub gp: Option<f64>,
    /// L-head cross entropy on real images.
    pub cls_real: Option<f64>,
    /// R-head squared error on real images.
    pub reg_real: Option<f64>,
    pub critic_total: Option<f64>,
    pub gen_total: Option<f64>,
    /// Conditioning cross entropy on fakes over sub-categories (absent for
    /// the category-only baseline, which never sees them).
    pub cond_ce_sub: Option<f64>,
    /// Conditioning cross entropy on fakes over main categories.
    pub cond_ce_main: Option<f64>,
    pub cond_l2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub variant: String,
    pub config: GanConfig,
    pub schedule: TrainSchedule,
    pub dataset_len: usize,
    pub dataset_resolution: usize,
}

pub const VARIANT_OGAN: &str = "ogan";
pub const VARIANT_BASELINE: &str = "baseline-category-only";

pub fn variant_name(config: &GanConfig) -> &'static str {
    if config.use_ontology {
        VARIANT_OGAN
    } else {
        VARIANT_BASELINE
    }
}

/// Everything besides the model needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    step: u64,
    images_in_stage: u64,
    epoch: u64,
    cursor: usize,
    data_seed: u64,
    z_seed: u64,
    z_word_pos: String,
    eps_seed: u64,
    eps_word_pos: String,
    finished: bool,
    schedule: TrainSchedule,
    adam_g_t: Vec<(String, u64)>,
    adam_d_t: Vec<(String, u64)>,
}

pub type Evaluator<'a> = Box<dyn FnMut(&GanModel, u64) -> Result<serde_json::Value> + 'a>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from `checkpoints/latest.ckpt` in the output directory.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps have been taken in total.
    pub max_steps: Option<u64>,
    /// Extra checkpoint cadence in steps, on top of the stage-end ones.
    pub checkpoint_every: Option<u64>,
    pub metrics_every: Option<u64>,
    pub evaluator: Option<Evaluator<'a>>,
}

pub struct TrainOutcome {
    pub model: GanModel,
    pub steps: u64,
    pub finished: bool,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

pub fn log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("log.jsonl")
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

pub fn latest_checkpoint(out_dir: &Path) -> PathBuf {
    checkpoint_dir(out_dir).join("latest.ckpt")
}

pub fn final_checkpoint(out_dir: &Path) -> PathBuf {
    checkpoint_dir(out_dir).join("final.ckpt")
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn train_baseline(
    config: &GanConfig,
    schedule: &TrainSchedule,
    dataset: &Dataset,
    table: &WordVectorTable,
    out_dir: &Path,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    let config = GanConfig { use_ontology: false, ..config.clone() };
    train(&config, schedule, dataset, table, out_dir, options)
}

struct Streams {
    data: DataStream,
    z: ChaCha8Rng,
    eps: ChaCha8Rng,
}

struct Run<'d> {
    config: GanConfig,
    schedule: TrainSchedule,
    model: GanModel,
    adam_g: Adam,
    adam_d: Adam,
    streams: Streams,
    step: u64,
    images_in_stage: u64,
    dataset: &'d Dataset,
    embeddings: Vec<Vec<f64>>,
    /// Parent main category of each sub-category seen in the data.
    parents: Vec<Option<usize>>,
    out_dir: PathBuf,
}

pub fn train(
    config: &GanConfig,
    schedule: &TrainSchedule,
    dataset: &Dataset,
    table: &WordVectorTable,
    out_dir: &Path,
    mut options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    schedule.validate(config)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if dataset.resolution < config.max_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} is below max_resolution {}",
            dataset.resolution, config.max_resolution
        )));
    }
    if table.dim() != config.d_e {
        return Err(Error::Config(format!(
            "word vectors have dimension {}, config expects d_e = {}",
            table.dim(),
            config.d_e
        )));
    }
    let mut parents = vec![None; config.num_sub];
    for (ex, &main) in dataset.examples.iter().zip(&dataset.mains) {
        if ex.sub_index >= config.num_sub || main >= config.num_main {
            return Err(Error::Dataset(format!(
                "label ({}, {main}) outside the configured {} sub / {} main categories",
                ex.sub_index, config.num_sub, config.num_main
            )));
        }
        parents[ex.sub_index] = Some(main);
    }
    let embeddings = dataset.examples.iter().map(|ex| table.embed(&ex.text).vector).collect();

    std::fs::create_dir_all(checkpoint_dir(out_dir)).map_err(|e| Error::io(out_dir, e))?;
    let meta = LogMeta {
        variant: variant_name(config).to_string(),
        config: config.clone(),
        schedule: schedule.clone(),
        dataset_len: dataset.len(),
        dataset_resolution: dataset.resolution,
    };
    let meta_path = out_dir.join("log.meta.json");

    let mut run = if options.resume {
        let run = Run::resume(config, schedule, dataset, embeddings, parents, out_dir)?;
        truncate_log(&log_path(out_dir), run.step)?;
        truncate_log(&out_dir.join("timing.jsonl"), run.step)?;
        truncate_log(&out_dir.join("metrics.jsonl"), run.step)?;
        run
    } else {
        for f in ["log.jsonl", "timing.jsonl", "metrics.jsonl"] {
            let p = out_dir.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Run::fresh(config, schedule, dataset, embeddings, parents, out_dir)?
    };
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let mut log = Appender::open(&log_path(out_dir))?;
    let mut timing = Appender::open(&out_dir.join("timing.jsonl"))?;
    let mut metrics = Appender::open(&out_dir.join("metrics.jsonl"))?;
    let total_stages = schedule.total_stages(config);
    let started = Instant::now();

    let finished = loop {
        if run.model.stage.stage + 1 >= total_stages && run.images_in_stage >= schedule.images_per_stage {
            break true;
        }
        if options.max_steps.is_some_and(|m| run.step >= m) {
            break false;
        }
        let t0 = Instant::now();
        let record = run.step_once()?;
        log.line(&serde_json::to_string(&record)?)?;
        timing.line(&serde_json::json!({
            "step": record.step,
            "seconds": t0.elapsed().as_secs_f64(),
            "elapsed": started.elapsed().as_secs_f64(),
        }).to_string())?;

        if run.images_in_stage >= schedule.images_per_stage {
            let s = run.model.stage.stage;
            run.model.stage.alpha = 1.0;
            log.flush()?;
            run.save(&checkpoint_dir(out_dir).join(format!("stage{s}.ckpt")), false)?;
            if s + 1 < total_stages {
                run.model.grow()?;
                run.images_in_stage = 0;
            }
            run.save(&latest_checkpoint(out_dir), false)?;
        } else if options.checkpoint_every.is_some_and(|k| k > 0 && run.step % k == 0) {
            log.flush()?;
            run.save(&latest_checkpoint(out_dir), false)?;
        }
        if let (Some(k), Some(eval)) = (options.metrics_every, options.evaluator.as_mut()) {
            if k > 0 && run.step % k == 0 {
                let value = eval(&run.model, run.step)?;
                metrics.line(&serde_json::json!({ "step": run.step - 1, "report": value }).to_string())?;
            }
        }
    };
    log.flush()?;
    timing.flush()?;
    metrics.flush()?;
    let final_path = if finished { final_checkpoint(out_dir) } else { latest_checkpoint(out_dir) };
    run.save(&final_path, finished)?;
    if finished {
        run.save(&latest_checkpoint(out_dir), true)?;
    }
    Ok(TrainOutcome {
        steps: run.step,
        finished,
        final_checkpoint: final_path,
        log_path: log_path(out_dir),
        model: run.model,
    })
}

/// Buffered JSON-lines writer.
struct Appender {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Appender {
    fn open(path: &Path) -> Result<Appender> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Appender { path: path.to_path_buf(), w: BufWriter::new(f) })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Drops every JSON line whose `step` is at or beyond `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) => break, // torn final line
        };
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn seeds(schedule: &TrainSchedule) -> (u64, u64, u64) {
    let s = schedule.seed;
    (mix64(s ^ 0xd1), mix64(s ^ 0x2e), mix64(s ^ 0xe5))
}

fn adam_tensors(prefix: &str, adam: &Adam, c: &mut Checkpoint) -> Vec<(String, u64)> {
    let mut ts = Vec::new();
    for (name, slot) in &adam.slots {
        c.push(&format!("{prefix}.{name}.m"), &[slot.m.len()], slot.m.clone());
        c.push(&format!("{prefix}.{name}.v"), &[slot.v.len()], slot.v.clone());
        ts.push((name.clone(), slot.t));
    }
    ts
}

fn restore_adam(prefix: &str, config: AdamConfig, ts: &[(String, u64)], c: &Checkpoint, path: &Path) -> Result<Adam> {
    let mut adam = Adam::new(config);
    for (name, t) in ts {
        let get = |suffix: &str| {
            c.get(&format!("{prefix}.{name}.{suffix}")).map(|t| t.data.clone()).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("missing optimizer state for {name}"),
            })
        };
        adam.slots.insert(name.clone(), AdamSlot { m: get("m")?, v: get("v")?, t: *t });
    }
    Ok(adam)
}

impl<'d> Run<'d> {
    fn fresh(
        config: &GanConfig,
        schedule: &TrainSchedule,
        dataset: &'d Dataset,
        embeddings: Vec<Vec<f64>>,
        parents: Vec<Option<usize>>,
        out_dir: &Path,
    ) -> Result<Run<'d>> {
        let (data_seed, z_seed, eps_seed) = seeds(schedule);
        Ok(Run {
            config: config.clone(),
            schedule: schedule.clone(),
            model: GanModel::new(config.clone())?,
            adam_g: Adam::new(schedule.adam),
            adam_d: Adam::new(schedule.adam),
            streams: Streams {
                data: DataStream::new(dataset.len(), data_seed),
                z: ChaCha8Rng::seed_from_u64(z_seed),
                eps: ChaCha8Rng::seed_from_u64(eps_seed),
            },
            step: 0,
            images_in_stage: 0,
            dataset,
            embeddings,
            parents,
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn resume(
        config: &GanConfig,
        schedule: &TrainSchedule,
        dataset: &'d Dataset,
        embeddings: Vec<Vec<f64>>,
        parents: Vec<Option<usize>>,
        out_dir: &Path,
    ) -> Result<Run<'d>> {
        let path = latest_checkpoint(out_dir);
        let c = Checkpoint::load(&path)?;
        let model = GanModel::from_checkpoint(&c, &path)?;
        let state: TrainerState = c.meta_field("trainer", &path)?;
        if &model.config != config || &state.schedule != schedule {
            return Err(Error::Config(format!(
                "{} was written with a different configuration or schedule",
                path.display()
            )));
        }
        if state.finished {
            log::info!("{} is already complete", path.display());
        }
        let parse_pos = |s: &str| {
            s.parse::<u128>().map_err(|_| Error::Checkpoint { path: path.clone(), message: "bad RNG position".into() })
        };
        let mut z = ChaCha8Rng::seed_from_u64(state.z_seed);
        z.set_word_pos(parse_pos(&state.z_word_pos)?);
        let mut eps = ChaCha8Rng::seed_from_u64(state.eps_seed);
        eps.set_word_pos(parse_pos(&state.eps_word_pos)?);
        if state.data_seed != seeds(schedule).0 || state.cursor > dataset.len() {
            return Err(Error::Config(format!("{} does not match this dataset", path.display())));
        }
        Ok(Run {
            config: config.clone(),
            schedule: schedule.clone(),
            adam_g: restore_adam("adam_g", schedule.adam, &state.adam_g_t, &c, &path)?,
            adam_d: restore_adam("adam_d", schedule.adam, &state.adam_d_t, &c, &path)?,
            model,
            streams: Streams {
                data: DataStream::restore(dataset.len(), state.data_seed, state.epoch, state.cursor),
                z,
                eps,
            },
            step: state.step,
            images_in_stage: state.images_in_stage,
            dataset,
            embeddings,
            parents,
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn save(&self, path: &Path, finished: bool) -> Result<()> {
        let mut c = self.model.to_checkpoint();
        let adam_g_t = adam_tensors("adam_g", &self.adam_g, &mut c);
        let adam_d_t = adam_tensors("adam_d", &self.adam_d, &mut c);
        let (data_seed, z_seed, eps_seed) = seeds(&self.schedule);
        let state = TrainerState {
            step: self.step,
            images_in_stage: self.images_in_stage,
            epoch: self.streams.data.epoch,
            cursor: self.streams.data.cursor,
            data_seed,
            z_seed,
            z_word_pos: self.streams.z.get_word_pos().to_string(),
            eps_seed,
            eps_word_pos: self.streams.eps.get_word_pos().to_string(),
            finished,
            schedule: self.schedule.clone(),
            adam_g_t,
            adam_d_t,
        };
        if let Some(obj) = c.meta.as_object_mut() {
            obj.insert("trainer".into(), serde_json::to_value(&state)?);
            obj.insert("variant".into(), variant_name(&self.config).into());
        }
        c.save(path)
    }

    fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter()
            .map(|&i| if self.config.use_ontology { self.dataset.examples[i].sub_index } else { self.dataset.mains[i] })
            .collect()
    }

    fn step_once(&mut self) -> Result<TrainLogRecord> {
        let stage_idx = self.model.stage.stage;
        let res = self.config.resolution(stage_idx);
        let alpha = self.schedule.alpha(stage_idx, self.images_in_stage);
        let stage = StageState::new(stage_idx, alpha);
        self.model.stage = stage;
        let b = self.schedule.batch_size(stage_idx);
        let (epoch, idx) = self.streams.data.next_batch(b);
        self.images_in_stage += b as u64;

        let labels = self.labels(&idx);
        let d_e = self.config.d_e;
        let mut e_data = Vec::with_capacity(b * d_e);
        for &i in &idx {
            e_data.extend_from_slice(&self.embeddings[i]);
        }
        let e = Tensor::from_vec(e_data, &[b, d_e]);
        let z = sample_noise_with(&mut self.streams.z, self.config.d_z, b);
        let cond = self.conditioning(&z, &e, &labels)?;

        let mut rec = TrainLogRecord {
            step: self.step,
            epoch,
            stage: stage_idx,
            resolution: res,
            alpha,
            kind: StepKind::Critic,
            critic_adv: None,
            gp: None,
            cls_real: None,
            reg_real: None,
            critic_total: None,
            gen_total: None,
            cond_ce_sub: None,
            cond_ce_main: None,
            cond_l2: None,
        };
        let w = self.config.head_weights;

        if self.schedule.is_generator_step(self.step) {
            rec.kind = StepKind::Generator;
            let fake = self.model.generate(&cond, stage)?;
            let out = self.model.discriminate(&fake, stage)?;
            // The category-only generator never sees the text, so it is not
            // asked to match it; R still measures it.
            let gw = if self.config.use_ontology { w } else { HeadWeights { reg: 0.0, ..w } };
            let terms = generator_loss_from_outputs(&out.critic, &out.label_logits, &out.regressed_e, &labels, &e, gw)?;
            self.check_finite(terms.all_finite())?;
            let names = self.model.generator_param_names();
            let params: Vec<&Tensor> = names.iter().map(|n| self.model.params.get(n)).collect();
            let grads = grad(&terms.total, &params, false);
            self.check_finite(grads.iter().all(|g| g.all_finite()))?;
            self.adam_g.step(&mut self.model.params, &names, &grads);
            let br = terms.breakdown();
            rec.gen_total = Some(br.total);
            rec.cond_l2 = Some(br.reg);
            if self.config.use_ontology {
                rec.cond_ce_sub = Some(br.cls);
                rec.cond_ce_main = Some(self.main_ce_from_sub(&out.label_logits, &idx));
            } else {
                rec.cond_ce_main = Some(br.cls);
            }
        } else {
            let real = images_to_tensor(&idx.iter().map(|&i| &self.dataset.examples[i].image).collect::<Vec<_>>());
            let real = fade_reals(&downsample_to(&real, res), stage);
            let fake = self.model.generate(&cond, stage)?.detach();
            let out_real = self.model.discriminate(&real, stage)?;
            let critic_fake = self.model.critic(&fake, stage)?;
            let adv = wasserstein_adv(&out_real.critic, &critic_fake);
            let eps: Vec<f64> = (0..b).map(|_| self.streams.eps.random::<f64>()).collect();
            let model = &self.model;
            let gp = gradient_penalty(|x: &Tensor| model.critic(x, stage), &real, &fake, &eps)?;
            let cls = classification_loss(&out_real.label_logits, &labels)?;
            let reg = regression_loss(&out_real.regressed_e, &e)?;
            let drift = out_real.critic.square().mean_all();
            let total = adv
                .mul_scalar(w.adv)
                .add(&gp.mul_scalar(self.config.gp_lambda))
                .add(&cls.mul_scalar(w.cls))
                .add(&reg.mul_scalar(w.reg))
                .add(&drift.mul_scalar(self.config.drift));
            self.check_finite(total.all_finite())?;
            let names = self.model.discriminator_param_names();
            let params: Vec<&Tensor> = names.iter().map(|n| self.model.params.get(n)).collect();
            let grads = grad(&total, &params, false);
            self.check_finite(grads.iter().all(|g| g.all_finite()))?;
            self.adam_d.step(&mut self.model.params, &names, &grads);
            rec.critic_adv = Some(adv.item());
            rec.gp = Some(gp.item());
            rec.cls_real = Some(cls.item());
            rec.reg_real = Some(reg.item());
            rec.critic_total = Some(total.item());
        }
        self.step += 1;
        Ok(rec)
    }

    fn conditioning(&self, z: &[Vec<f64>], e: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let b = z.len();
        let k = self.config.label_dim();
        let y = one_hot(labels, k)?;
        let z = Tensor::from_vec(z.concat(), &[b, self.config.d_z]);
        let e = if self.config.use_ontology { e.clone() } else { Tensor::zeros(e.shape()) };
        Ok(Tensor::concat(&[z, e, y], 1))
    }

    /// Main-category cross entropy implied by sub-category logits (their
    /// probabilities summed within each parent).
    fn main_ce_from_sub(&self, logits: &Tensor, idx: &[usize]) -> f64 {
        let k = logits.dim(1);
        let probs = logits.softmax();
        let mut total = 0.0;
        for (row, &i) in idx.iter().enumerate() {
            let main = self.dataset.mains[i];
            let p: f64 = (0..k)
                .filter(|&s| self.parents[s] == Some(main))
                .map(|s| probs.data()[row * k + s])
                .sum();
            total -= p.max(1e-300).ln();
        }
        total / idx.len() as f64
    }

    fn check_finite(&self, ok: bool) -> Result<()> {
        if ok {
            return Ok(());
        }
        let path = checkpoint_dir(&self.out_dir).join(format!("nonfinite-step{}.ckpt", self.step));
        self.save(&path, false)?;
        log::error!("non-finite loss at step {}; state saved to {}", self.step, path.display());
        Err(Error::NonFinite { step: self.step, checkpoint: path })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{example_ontology, render_example, DatasetSpec};

    fn small_dataset(n: usize, res: usize) -> Dataset {
        let ont = example_ontology();
        let spec = DatasetSpec::new(ont.clone(), n, res, 3);
        let ex = (0..n as u64).map(|i| render_example(&spec, crate::synthdata::example_seed(3, i))).collect();
        Dataset::from_examples(ex, &ont)
    }

    fn tiny_config() -> GanConfig {
        GanConfig {
            d_z: 4,
            d_e: 6,
            num_sub: 6,
            num_main: 3,
            base_channels: 8,
            min_channels: 4,
            max_resolution: 8,
            ..GanConfig::default()
        }
    }

    fn tiny_schedule() -> TrainSchedule {
        TrainSchedule { images_per_stage: 40, images_per_fade: 20, n_critic: 2, batch_sizes: vec![4], ..TrainSchedule::default() }
    }

    #[test]
    fn schedule_arithmetic() {
        let s = TrainSchedule { n_critic: 5, ..TrainSchedule::default() };
        let gens = (0..600).filter(|&k| s.is_generator_step(k)).count();
        assert_eq!(gens, 100);
        assert_eq!(s.alpha(0, 0), 1.0);
        assert_eq!(s.alpha(1, 0), 0.0);
        assert_eq!(s.alpha(1, 15_000), 0.5);
        assert_eq!(s.alpha(1, 45_000), 1.0);
        assert_eq!(s.batch_size(3), 16);
        assert_eq!(s.batch_size(7), 16);
        let bad = TrainSchedule { images_per_fade: 70_000, ..TrainSchedule::default() };
        assert!(bad.validate(&GanConfig::default()).is_err());
        let bad = TrainSchedule { n_critic: 0, ..TrainSchedule::default() };
        assert!(bad.validate(&GanConfig::default()).is_err());
    }

    #[test]
    fn runs_and_logs_every_step() {
        let data = small_dataset(24, 8);
        let table = WordVectorTable::hashed(6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tiny_config(), &tiny_schedule(), &data, &table, dir.path(), TrainOptions::default()).unwrap();
        assert!(out.finished);
        assert_eq!(out.steps, 20);
        let log = read_log(&out.log_path).unwrap();
        assert_eq!(log.len(), 20);
        for (i, r) in log.iter().enumerate() {
            assert_eq!(r.step, i as u64);
            assert_eq!(r.kind == StepKind::Generator, i % 3 == 2);
        }
        // alpha: 1 during stage 0, then ramps from 0 and reaches 1 before the stage ends
        let s1: Vec<f64> = log.iter().filter(|r| r.stage == 1).map(|r| r.alpha).collect();
        assert_eq!(s1.len(), 10);
        assert_eq!(s1[0], 0.0);
        assert!(s1.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*s1.last().unwrap(), 1.0);
        let m = GanModel::load(&out.final_checkpoint).unwrap();
        assert_eq!(m.stage, StageState::stable(1));
        assert!(checkpoint_dir(dir.path()).join("stage0.ckpt").exists());
    }

    #[test]
    fn resume_reproduces_uninterrupted_log() {
        let data = small_dataset(24, 8);
        let table = WordVectorTable::hashed(6, 1).unwrap();
        let a = tempfile::tempdir().unwrap();
        train(&tiny_config(), &tiny_schedule(), &data, &table, a.path(), TrainOptions::default()).unwrap();
        let b = tempfile::tempdir().unwrap();
        let opts = TrainOptions { max_steps: Some(13), ..TrainOptions::default() };
        let part = train(&tiny_config(), &tiny_schedule(), &data, &table, b.path(), opts).unwrap();
        assert!(!part.finished);
        let opts = TrainOptions { resume: true, ..TrainOptions::default() };
        train(&tiny_config(), &tiny_schedule(), &data, &table, b.path(), opts).unwrap();
        let la = std::fs::read(log_path(a.path())).unwrap();
        let lb = std::fs::read(log_path(b.path())).unwrap();
        assert_eq!(la, lb);
        let fa = Checkpoint::load(&final_checkpoint(a.path())).unwrap();
        let fb = Checkpoint::load(&final_checkpoint(b.path())).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn generator_updates_leave_critic_untouched() {
        let data = small_dataset(24, 8);
        let table = WordVectorTable::hashed(6, 1).unwrap();
        let cfg = tiny_config();
        let sched = tiny_schedule();
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::fresh(&cfg, &sched, &data, data.examples.iter().map(|e| table.embed(&e.text).vector).collect(), vec![None; 6], dir.path()).unwrap();
        for _ in 0..3 {
            let before = run.model.params.clone();
            let gen = sched.is_generator_step(run.step);
            run.step_once().unwrap();
            let mut moved = 0;
            for (name, t) in before.iter() {
                let same = t.data() == run.model.params.get(name).data();
                if name.starts_with("g.") != gen {
                    assert!(same, "{name} changed");
                } else if !same {
                    moved += 1;
                }
            }
            assert!(moved > 0);
        }
    }

    #[test]
    fn baseline_has_main_labels_and_no_sub_series() {
        let data = small_dataset(24, 8);
        let table = WordVectorTable::hashed(6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_baseline(&tiny_config(), &tiny_schedule(), &data, &table, dir.path(), TrainOptions::default()).unwrap();
        assert_eq!(out.model.config.label_dim(), 3);
        let log = read_log(&out.log_path).unwrap();
        assert!(log.iter().all(|r| r.cond_ce_sub.is_none()));
        assert!(log.iter().any(|r| r.cond_ce_main.is_some()));
        let meta: LogMeta = serde_json::from_str(&std::fs::read_to_string(dir.path().join("log.meta.json")).unwrap()).unwrap();
        assert_eq!(meta.variant, VARIANT_BASELINE);
    }

    #[test]
    fn nan_aborts_with_diagnostic_checkpoint() {
        let data = small_dataset(24, 8);
        let table = WordVectorTable::hashed(6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let sched = TrainSchedule { adam: AdamConfig { lr: 1e300, ..AdamConfig::default() }, ..tiny_schedule() };
        match train(&cfg, &sched, &data, &table, dir.path(), TrainOptions::default()) {
            Err(Error::NonFinite { checkpoint, .. }) => assert!(checkpoint.exists()),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("training with a huge step size should diverge"),
        }
    }

    #[test]
    fn rejects_low_resolution_data() {
        let data = small_dataset(8, 4);
        let table = WordVectorTable::hashed(6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(train(&tiny_config(), &tiny_schedule(), &data, &table, dir.path(), TrainOptions::default()).is_err());
    }
}
