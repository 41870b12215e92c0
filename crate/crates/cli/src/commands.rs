use std::path::{Path, PathBuf};

use ogan_core::gan::{conditioning_batch, make_conditioning_vector, sample_noise, GanModel};
use ogan_core::labelnet::{predict_label, train_label_predictor, LabelPredictor};
use ogan_core::metrics::{self, checkpoint_id, evaluate, ConvExtractor, MetricReport};
use ogan_core::ontology::Ontology;
use ogan_core::synthdata::{
    generate_dataset, save_rgb_png, shuffled_indices, tensor_to_images, Dataset, DatasetSpec, MANIFEST_NAME,
};
use ogan_core::textemb::WordVectorTable;
use ogan_core::trainer::{self, TrainOptions, VARIANT_BASELINE, VARIANT_OGAN};
use serde_json::json;

use crate::config::LoadedConfig;
use crate::plot;
use crate::provenance::{git_revision, now_unix, RunRecord};
use crate::{Cli, CliError, Command, GlobalArgs};

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    cfg: Option<LoadedConfig>,
    global: GlobalArgs,
    started: f64,
    name: &'static str,
}

impl Ctx {
    fn cfg(&self) -> Result<&LoadedConfig> {
        self.cfg
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("`ogan {}` needs --config PATH", self.name)))
    }

    fn record(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let cfg = self.cfg.as_ref();
        let git_dir = cfg.map(|c| c.base.clone()).unwrap_or_default();
        RunRecord {
            command: self.name.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_path: cfg.map(|c| c.path.display().to_string()),
            config_sha256: cfg.map(|c| c.sha256.clone()),
            effective_config: cfg.map(|c| c.config.to_toml()),
            seed: cfg.map(|c| c.config.seed),
            git_revision: git_revision(&git_dir),
            started_unix: self.started,
            finished_unix: now_unix(),
            extra,
        }
        .write(dir)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::TrainExtractor => "train-extractor",
        Command::TrainLabelnet => "train-labelnet",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Sample { .. } => "sample",
        Command::Plot { .. } => "plot",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let name = command_name(&cli.command);
    let mut cfg = match &cli.global.config {
        Some(p) => Some(LoadedConfig::load(p)?),
        None => None,
    };
    if let Some(c) = cfg.as_mut() {
        if let Some(seed) = cli.global.seed {
            c.config.seed = seed;
        }
        if let Some(out) = &cli.global.out {
            c.config.out = absolute(out)?;
        }
    }
    let ctx = Ctx { cfg, global: cli.global, started: now_unix(), name };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainExtractor => train_extractor(&ctx),
        Command::TrainLabelnet => train_labelnet(&ctx),
        Command::Train { baseline, resume, max_steps } => train(&ctx, baseline, resume, max_steps),
        Command::Eval { checkpoints } => eval(&ctx, &checkpoints),
        Command::Sample { checkpoint, text, label, count } => {
            sample(&ctx, checkpoint.as_deref(), &text, label.as_deref(), count)
        }
        Command::Plot { logs } => plot_cmd(&ctx, &logs),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| CliError::Other(format!("current directory: {e}")))?;
    Ok(cwd.join(p))
}

fn require_file(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}{hint}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ogan_core::Error::io(dir, e).into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(ogan_core::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| ogan_core::Error::io(path, e).into())
}

/// Refuses to clobber `marker` unless --force; with --force removes `clear`.
fn guard_existing(ctx: &Ctx, marker: &Path, clear: &[PathBuf]) -> Result<()> {
    if !marker.exists() {
        return Ok(());
    }
    if !ctx.global.force {
        return Err(CliError::Exists(marker.to_path_buf()));
    }
    for p in clear {
        let r = if p.is_dir() { std::fs::remove_dir_all(p) } else { std::fs::remove_file(p) };
        match r {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(ogan_core::Error::io(p, e).into()),
        }
    }
    Ok(())
}

fn load_ontology(cfg: &LoadedConfig) -> Result<Ontology> {
    let path = cfg.ontology_path();
    require_file(&path, "ontology file", "")?;
    Ok(Ontology::load(&path)?)
}

fn load_table(cfg: &LoadedConfig) -> Result<WordVectorTable> {
    match cfg.word_vectors_path() {
        Some(path) => {
            require_file(&path, "word-vector file", "")?;
            Ok(WordVectorTable::load(&path)?)
        }
        None => Ok(WordVectorTable::hashed(cfg.config.embedding.hashed_dim, cfg.hashed_seed())?),
    }
}

fn manifest_path(cfg: &LoadedConfig) -> PathBuf {
    cfg.dataset_dir().join(MANIFEST_NAME)
}

fn load_dataset(cfg: &LoadedConfig, ontology: &Ontology) -> Result<Dataset> {
    let path = manifest_path(cfg);
    require_file(&path, "dataset manifest", "; run `ogan gen-data` first")?;
    let ds = Dataset::load(&path)?;
    ds.check_labels(ontology)?;
    Ok(ds)
}

fn load_extractor(cfg: &LoadedConfig) -> Result<ConvExtractor> {
    let path = cfg.extractor_path();
    require_file(&path, "feature extractor", "; run `ogan train-extractor` first")?;
    Ok(ConvExtractor::load(&path)?)
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg()?;
    let ontology = load_ontology(cfg)?;
    let dir = cfg.dataset_dir();
    let manifest = dir.join(MANIFEST_NAME);
    guard_existing(ctx, &manifest, &[manifest.clone(), dir.join("img"), dir.join("run.json")])?;
    let d = &cfg.config.dataset;
    let spec = DatasetSpec::new(ontology, d.num_examples, d.resolution, cfg.dataset_seed());
    spec.validate()?;
    create_dir(&dir)?;
    let summary = generate_dataset(&spec, &dir)?;
    println!("wrote {} examples at {}px to {}", summary.num_examples, summary.resolution, manifest.display());
    for (name, count) in &summary.counts {
        println!("  {name:<16} {count}");
    }
    ctx.record(&dir, json!({ "summary": summary, "dataset_seed": spec.seed }))
}

/// Deterministic (train, holdout) split.
fn split(ds: &Dataset, ontology: &Ontology, holdout: f64, seed: u64) -> (Dataset, Dataset) {
    let order = shuffled_indices(ds.len(), seed);
    let n_hold = ((ds.len() as f64) * holdout).round() as usize;
    let n_hold = n_hold.min(ds.len().saturating_sub(1));
    let pick = |idx: &[usize]| {
        Dataset::from_examples(idx.iter().map(|&i| ds.examples[i].clone()).collect(), ontology)
    };
    let (hold, train) = order.split_at(n_hold);
    (pick(train), pick(hold))
}

fn train_extractor(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg()?;
    let ontology = load_ontology(cfg)?;
    let ds = load_dataset(cfg, &ontology)?;
    let path = cfg.extractor_path();
    guard_existing(ctx, &path, &[path.clone()])?;
    let x = &cfg.config.extractor;
    if !(0.0..1.0).contains(&x.holdout) {
        return Err(CliError::Config("extractor.holdout must be in [0, 1)".into()));
    }
    let opts = cfg.extractor_training();
    let (train_set, hold) = split(&ds, &ontology, x.holdout, opts.seed);
    let hold = (!hold.is_empty()).then_some(&hold);
    let ex = metrics::train_extractor(&train_set, hold, ontology.num_sub(), &opts)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    create_dir(&dir)?;
    ex.save(&path)?;
    println!("extractor {} saved to {}", ex.meta.name, path.display());
    println!("provenance: {}", ex.meta.provenance);
    ctx.record(&dir, json!({ "extractor": ex.meta }))
}

fn train_labelnet(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg()?;
    let ontology = load_ontology(cfg)?;
    let table = load_table(cfg)?;
    let ds = load_dataset(cfg, &ontology)?;
    let path = cfg.labelnet_path();
    guard_existing(ctx, &path, &[path.clone()])?;
    let lc = cfg.labelnet_config(table.dim(), ontology.num_sub());
    let corpus: Vec<(String, usize)> = ds.examples.iter().map(|e| (e.text.clone(), e.sub_index)).collect();
    let (model, report) = train_label_predictor(&lc, &corpus, &table)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    create_dir(&dir)?;
    model.save(&path)?;
    write_json(&dir.join("report.json"), &report)?;
    match report.holdout_accuracy {
        Some(acc) => println!("label predictor saved to {}; held-out accuracy {acc:.4}", path.display()),
        None => println!("label predictor saved to {}", path.display()),
    }
    ctx.record(&dir, json!({ "report": report }))
}

fn train_dir(cfg: &LoadedConfig, baseline: bool) -> PathBuf {
    cfg.out_dir().join("train").join(if baseline { "baseline" } else { "ogan" })
}

fn train(ctx: &Ctx, baseline: bool, resume: bool, max_steps: Option<u64>) -> Result<()> {
    let cfg = ctx.cfg()?;
    let ontology = load_ontology(cfg)?;
    let table = load_table(cfg)?;
    let ds = load_dataset(cfg, &ontology)?;
    let out = train_dir(cfg, baseline);
    if resume {
        require_file(&trainer::latest_checkpoint(&out), "checkpoint to resume from", "")?;
    } else {
        guard_existing(ctx, &trainer::log_path(&out), &[out.clone()])?;
    }
    let t = &cfg.config.train;
    let extractor = match t.metrics_every {
        Some(_) => Some(load_extractor(cfg)?),
        None => None,
    };
    let gan = cfg.gan_config(ontology.num_sub(), ontology.num_main(), table.dim(), !baseline);
    let schedule = cfg.schedule();
    let settings = cfg.eval_settings();
    create_dir(&out)?;
    let evaluator: Option<trainer::Evaluator> = extractor.as_ref().map(|ex| {
        let (ds, table) = (&ds, &table);
        Box::new(move |model: &GanModel, step: u64| {
            let r = evaluate(model, &format!("step-{step}"), ds, table, ex, &settings)?;
            Ok(serde_json::to_value(r)?)
        }) as trainer::Evaluator
    });
    let options = TrainOptions {
        resume,
        max_steps: max_steps.or(t.max_steps),
        checkpoint_every: t.checkpoint_every,
        metrics_every: t.metrics_every,
        evaluator,
    };
    let outcome = trainer::train(&gan, &schedule, &ds, &table, &out, options)?;
    println!(
        "{}: {} steps, {} at {}px; checkpoint {}",
        trainer::variant_name(&gan),
        outcome.steps,
        if outcome.finished { "finished" } else { "stopped" },
        outcome.model.resolution(),
        outcome.final_checkpoint.display()
    );
    ctx.record(
        &out,
        json!({
            "variant": trainer::variant_name(&gan),
            "resumed": resume,
            "steps": outcome.steps,
            "finished": outcome.finished,
            "checkpoint": outcome.final_checkpoint,
        }),
    )
}

fn eval(ctx: &Ctx, checkpoints: &[PathBuf]) -> Result<()> {
    let cfg = ctx.cfg()?;
    for c in checkpoints {
        require_file(c, "checkpoint", "")?;
    }
    let extractor = load_extractor(cfg)?;
    let ontology = load_ontology(cfg)?;
    let table = load_table(cfg)?;
    let ds = load_dataset(cfg, &ontology)?;
    let settings = cfg.eval_settings();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for path in checkpoints {
        let model = GanModel::load(path)?;
        if model.config.d_e != table.dim() {
            return Err(CliError::Config(format!(
                "{} expects {}-d text embeddings but the word vectors are {}-d",
                path.display(),
                model.config.d_e,
                table.dim()
            )));
        }
        let report = evaluate(&model, &checkpoint_id(path)?, &ds, &table, &extractor, &settings)?;
        rows.push(row_name(path, &report));
        reports.push(report);
    }
    let dir = cfg.out_dir().join("eval");
    create_dir(&dir)?;
    write_json(&dir.join("report.json"), &reports)?;
    print!("{}", quality_table(&rows, &reports));
    println!("report written to {}", dir.join("report.json").display());
    ctx.record(&dir, json!({ "checkpoints": checkpoints }))
}

fn row_name(path: &Path, r: &MetricReport) -> String {
    let variant = match r.variant.as_str() {
        VARIANT_OGAN => "O-GAN",
        VARIANT_BASELINE => "PGAN (category-only)",
        other => other,
    };
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{variant} [{file}]")
}

/// Methods as rows, IS and FID as columns, plus the conditioning probes.
pub fn quality_table(rows: &[String], reports: &[MetricReport]) -> String {
    let w = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<w$}  {:>15}  {:>10}  {:>9}  {:>9}  {:>9}\n",
        "Method", "IS (higher)", "FID (lower)", "cond CE", "cond L2", "shuf L2"
    );
    for (name, r) in rows.iter().zip(reports) {
        let is = if r.is_splits > 1 {
            format!("{:.2} ± {:.2}", r.is_mean, r.is_std)
        } else {
            format!("{:.2}", r.is_mean)
        };
        s += &format!(
            "{name:<w$}  {is:>15}  {:>10.2}  {:>9.4}  {:>9.4}  {:>9.4}\n",
            r.fid, r.cond_ce, r.cond_l2, r.cond_l2_shuffled
        );
    }
    s
}

fn slug(text: &str) -> String {
    let mut s: String = text
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    let s = s.trim_matches('-');
    let s: String = s.chars().take(48).collect();
    if s.is_empty() {
        "sample".into()
    } else {
        s
    }
}

fn sample(ctx: &Ctx, checkpoint: Option<&Path>, text: &str, label: Option<&str>, count: Option<usize>) -> Result<()> {
    let cfg = ctx.cfg()?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => trainer::final_checkpoint(&train_dir(cfg, false)),
    };
    require_file(&ckpt, "checkpoint", "")?;
    let ontology = load_ontology(cfg)?;
    let table = load_table(cfg)?;
    let count = count.unwrap_or(cfg.config.sample.count);
    if count == 0 {
        return Err(CliError::Config("count must be positive".into()));
    }

    let (sub, source, probabilities) = match label {
        Some(name) => {
            let sub = ontology.sub_index(name).ok_or_else(|| {
                let known: Vec<&str> = ontology.sub_categories.iter().map(|s| s.name.as_str()).collect();
                CliError::Config(format!("unknown label {name:?}; expected one of {known:?}"))
            })?;
            (sub, "forced", None)
        }
        None => {
            let path = cfg.labelnet_path();
            require_file(&path, "label predictor", "; run `ogan train-labelnet` or pass --label")?;
            let model = LabelPredictor::load(&path)?;
            if model.config.num_labels != ontology.num_sub() || model.config.d_e != table.dim() {
                return Err(CliError::Config(format!(
                    "{} does not match the configured ontology and word vectors",
                    path.display()
                )));
            }
            let p = predict_label(&model, &table, text);
            (p.label, "labelnet", Some(p.probabilities))
        }
    };

    let model = GanModel::load(&ckpt)?;
    let gc = &model.config;
    if gc.d_e != table.dim() || gc.num_sub != ontology.num_sub() || gc.num_main != ontology.num_main() {
        return Err(CliError::Config(format!("{} does not match the configured ontology and word vectors", ckpt.display())));
    }
    let label_index = if gc.use_ontology { sub } else { ontology.sub_categories[sub].parent };
    let e = if gc.use_ontology { table.embed(text).vector } else { vec![0.0; gc.d_e] };
    let y = ontology.encode_label(sub, gc.label_layer())?;
    let seed = cfg.sample_seed();
    let conds = sample_noise(gc.d_z, count, seed)
        .into_iter()
        .map(|z| make_conditioning_vector(gc, z, e.clone(), y.clone()))
        .collect::<ogan_core::Result<Vec<_>>>()?;
    let images = tensor_to_images(&model.generate(&conditioning_batch(&conds)?, model.stage)?);

    let dir = cfg.out_dir().join("samples");
    create_dir(&dir)?;
    let stem = format!("{}-s{seed}", slug(text));
    let png = dir.join(format!("{stem}.png"));
    let (w, h, rgb) = grid(&images, cfg.config.sample.scale.max(1));
    save_rgb_png(&png, w, h, &rgb)?;
    let probs = probabilities.map(|p| {
        ontology
            .sub_categories
            .iter()
            .zip(p)
            .map(|(s, v)| (s.name.clone(), json!(v)))
            .collect::<serde_json::Map<_, _>>()
    });
    let sidecar = json!({
        "text": text,
        "label": ontology.sub_name(sub),
        "label_index": sub,
        "label_source": source,
        "conditioning_label": label_index,
        "conditioning_layer": gc.label_layer(),
        "probabilities": probs,
        "count": count,
        "seed": seed,
        "checkpoint": ckpt,
        "checkpoint_id": checkpoint_id(&ckpt)?,
        "variant": trainer::variant_name(gc),
        "resolution": model.resolution(),
        "image": png.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    write_json(&dir.join(format!("{stem}.json")), &sidecar)?;
    println!("{} ({source}): {} images -> {}", ontology.sub_name(sub), count, png.display());
    ctx.record(&dir, json!({ "image": png }))
}

/// Images tiled row-major on a grey background, upscaled by `scale`.
fn grid(images: &[ogan_core::synthdata::Image], scale: usize) -> (u32, u32, Vec<u8>) {
    const GAP: usize = 2;
    let n = images.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cell = images[0].res * scale;
    let (w, h) = (cols * cell + (cols + 1) * GAP, rows * cell + (rows + 1) * GAP);
    let mut out = vec![96u8; w * h * 3];
    for (i, img) in images.iter().enumerate() {
        let rgb = img.to_rgb8();
        let (x0, y0) = (GAP + (i % cols) * (cell + GAP), GAP + (i / cols) * (cell + GAP));
        for y in 0..cell {
            for x in 0..cell {
                let src = ((y / scale) * img.res + x / scale) * 3;
                let dst = ((y0 + y) * w + x0 + x) * 3;
                out[dst..dst + 3].copy_from_slice(&rgb[src..src + 3]);
            }
        }
    }
    (w as u32, h as u32, out)
}

fn plot_cmd(ctx: &Ctx, logs: &[PathBuf]) -> Result<()> {
    let out = match (&ctx.cfg, &ctx.global.out) {
        (Some(c), _) => c.out_dir(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(CliError::Config("`ogan plot` needs --out DIR or --config PATH".into())),
    };
    for l in logs {
        require_file(l, "log file", "")?;
    }
    let series = logs.iter().map(|l| plot::load_series(l)).collect::<Result<Vec<_>>>()?;
    let dir = out.join("plots");
    create_dir(&dir)?;
    let written = plot::render_all(&series, &dir)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    ctx.record(&dir, json!({ "logs": logs, "plots": written }))
}
