use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tvgan::dataio::{
    load_paired_dataset, make_attribute_split, make_subject_disjoint_split, manifest_sha256, synthesize_toy_dataset,
    write_dataset, DatasetSplit, ImageTensor, PairedSample,
};
use tvgan::nets::load_checkpoint;
use tvgan::recog::{evaluate, Embedder, ExternalEmbedder, Metrics, ToyEmbedder};
use tvgan::report::{cmc_csv, save_image_grid, ResultsTable};
use tvgan::train::{self, transform, ModelKind, TrainConfig, TransformModel};

use crate::config::{RunConfig, SplitMode};
use crate::{Cli, Command, EvaluateArgs, PrepareArgs, ReportArgs, SynthArgs, TableFormat, TrainArgs, TransformArgs};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Values shared by every command after merging flags over the config file.
struct Ctx {
    file: RunConfig,
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let seed = cli.seed.or(file.seed).unwrap_or(0);
        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Ctx { file, seed, out_dir })
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("cannot create output directory {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }

    fn model(&self, flag: Option<ModelKind>) -> Result<ModelKind> {
        flag.or(self.file.model).context("no model given (use --model or `model` in the config)")
    }

    fn manifest(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.file.data.manifest.clone())
            .context("no manifest given (use --manifest or `data.manifest` in the config)")
    }

    fn splits(&self, flag: &[PathBuf]) -> Vec<PathBuf> {
        if flag.is_empty() {
            self.file.data.splits.clone().unwrap_or_default()
        } else {
            flag.to_vec()
        }
    }

    fn train_config(&self, kind: ModelKind) -> Result<TrainConfig> {
        self.file.train_config(kind, Some(self.seed))
    }

    /// Loading resolution: `data.resolution`, else the training resolution.
    fn resolution(&self, kind: ModelKind) -> Result<usize> {
        match self.file.data.resolution {
            Some(r) => Ok(r),
            None => Ok(self.train_config(kind)?.arch.resolution),
        }
    }
}

fn load_dataset(manifest: &Path, resolution: usize) -> Result<Vec<PairedSample>> {
    load_paired_dataset(manifest, resolution).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::PrepareData(a) => prepare_data(&ctx, a),
        Command::SynthToy(a) => synth_toy(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Transform(a) => transform_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
    }
}

fn prepare_data(ctx: &Ctx, a: &PrepareArgs) -> Result<()> {
    let manifest = ctx.manifest(&a.manifest)?;
    let data = load_dataset(&manifest, ctx.resolution(ModelKind::Tvgan)?)?;
    let d = &ctx.file.data;
    let split = match a.mode.or(d.mode).unwrap_or_default() {
        SplitMode::Random => {
            let n_test = a
                .n_test
                .or(d.n_test)
                .context("random splits need --n-test (or `data.n_test`)")?;
            make_subject_disjoint_split(&data, n_test, ctx.seed)?
        }
        SplitMode::Attribute => {
            let attr = a
                .attribute
                .as_ref()
                .or(d.attribute.as_ref())
                .context("attribute splits need --attribute (or `data.attribute`)")?;
            make_attribute_split(&data, attr)?
        }
    };
    let path = match &a.output {
        Some(p) => p.clone(),
        None => ctx.out_dir()?.join("split.json"),
    };
    split.save(&path)?;
    println!(
        "wrote {}: {} train subjects, {} test subjects",
        path.display(),
        split.train_subjects.len(),
        split.test_subjects.len()
    );
    Ok(())
}

fn synth_toy(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let data = synthesize_toy_dataset(a.subjects, a.per_subject, a.resolution, ctx.seed)?;
    let dir = ctx.out_dir()?;
    write_dataset(&data, dir)?;
    println!("wrote {} pairs of {} subjects to {}", data.len(), a.subjects, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    model: ModelKind,
    seed: u64,
    manifest: &'a Path,
    manifest_sha256: String,
    split_file: &'a Path,
    split: &'a DatasetSplit,
    train: &'a TrainConfig,
    config: &'a RunConfig,
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let kind = ctx.model(a.model)?;
    if kind == ModelKind::Plain {
        bail!("the plain model is an identity mapping; nothing to train");
    }
    let mut cfg = ctx.train_config(kind)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let manifest = ctx.manifest(&a.manifest)?;
    let split_path = match &a.split {
        Some(p) => p.clone(),
        None => ctx
            .splits(&[])
            .into_iter()
            .next()
            .context("no split given (use --split or `data.splits` in the config)")?,
    };
    let split = DatasetSplit::load(&split_path)?;
    let data = load_dataset(&manifest, cfg.arch.resolution)?;
    let out = ctx.out_dir()?;
    write_json(
        &RunManifest {
            model: kind,
            seed: cfg.seed,
            manifest: &manifest,
            manifest_sha256: manifest_sha256(&manifest)?,
            split_file: &split_path,
            split: &split,
            train: &cfg,
            config: &ctx.file,
        },
        &out.join(RUN_MANIFEST_FILE),
    )?;
    let outcome = train::train(kind, &data, &split, &cfg, Some(out))?;
    let last = outcome.history.last().map(|r| r.losses.total_g).unwrap_or(f64::NAN);
    println!(
        "trained {kind} for {} epochs ({} steps, final total_g {last:.4})",
        cfg.epochs,
        outcome.history.len()
    );
    for c in &outcome.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn load_model(kind: ModelKind, checkpoint: Option<&Path>) -> Result<TransformModel> {
    let handle = match (kind, checkpoint) {
        (ModelKind::Plain, _) => None,
        (_, Some(p)) => Some(load_checkpoint(p).with_context(|| format!("reading checkpoint {}", p.display()))?),
        (_, None) => bail!("model {kind} needs a checkpoint"),
    };
    Ok(TransformModel::from_handle(kind, handle)?)
}

fn transform_cmd(ctx: &Ctx, a: &TransformArgs) -> Result<()> {
    let kind = ctx.model(a.model)?;
    let model = load_model(kind, a.checkpoint.as_deref())?;
    let out = ctx.out_dir()?;
    for input in &a.inputs {
        let x = match &model {
            TransformModel::Plain => ImageTensor::load_native(input, 3)?,
            TransformModel::Gan { generator, .. } => {
                let s = generator.spec();
                ImageTensor::load(input, s.resolution, s.in_channels)?
            }
            TransformModel::Patch(_) => ImageTensor::load_native(input, 1)?,
        };
        let y = transform(&model, &x)?;
        let stem = input
            .file_stem()
            .with_context(|| format!("input {} has no file name", input.display()))?;
        let path = out.join(stem).with_extension("png");
        y.save_png(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn make_embedder(ctx: &Ctx, spec: Option<&str>, resolution: usize) -> Result<Box<dyn Embedder>> {
    let e = &ctx.file.eval;
    let spec = match (spec, e.embedder.as_deref(), &e.embedding_file) {
        (Some(s), _, _) | (None, Some(s), _) => s.to_string(),
        (None, None, Some(f)) => format!("file:{}", f.display()),
        (None, None, None) => bail!("no embedder given (use --embedder toy|file:PATH|cmd:COMMAND)"),
    };
    Ok(if spec == "toy" {
        Box::new(ToyEmbedder::new(resolution))
    } else if let Some(path) = spec.strip_prefix("file:") {
        Box::new(ExternalEmbedder::new(Some(Path::new(path)), None, e.embedding_dim)?)
    } else if let Some(cmd) = spec.strip_prefix("cmd:") {
        Box::new(ExternalEmbedder::new(None, Some(cmd), e.embedding_dim)?)
    } else {
        bail!("unknown embedder `{spec}` (expected toy, file:PATH or cmd:COMMAND)")
    })
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let kind = ctx.model(a.model)?;
    let splits = ctx.splits(&a.splits);
    if splits.is_empty() {
        bail!("no split given (use --split or `data.splits` in the config)");
    }
    let checkpoints = if a.checkpoints.is_empty() {
        ctx.file.eval.checkpoints.clone().unwrap_or_default()
    } else {
        a.checkpoints.clone()
    };
    if kind != ModelKind::Plain && checkpoints.len() != splits.len() {
        bail!("{} splits but {} checkpoints; give one checkpoint per split", splits.len(), checkpoints.len());
    }
    let models = match kind {
        ModelKind::Plain => vec![TransformModel::Plain; splits.len()],
        _ => checkpoints
            .iter()
            .map(|c| load_model(kind, Some(c)))
            .collect::<Result<Vec<_>>>()?,
    };
    let resolution = match models.first() {
        Some(TransformModel::Gan { generator, .. }) => generator.spec().resolution,
        _ => ctx.resolution(kind)?,
    };
    let data = load_dataset(&ctx.manifest(&a.manifest)?, resolution)?;
    let embedder = make_embedder(ctx, a.embedder.as_deref(), resolution)?;
    let mut cfg = ctx.file.eval_config();
    cfg.gallery_seed = ctx.file.eval.gallery_seed.unwrap_or(ctx.seed);
    if let Some(p) = a.protocol {
        cfg.protocol = p;
    }
    if let Some(r) = &a.ranks {
        cfg.ranks = r.clone();
    }
    if let Some(m) = a.rank_mode {
        cfg.rank_mode = m.into();
    }
    if let Some(q) = a.query_set {
        cfg.query_set = q.into();
    }
    let out = ctx.out_dir()?;
    for (split_path, model) in splits.iter().zip(&models) {
        let split = DatasetSplit::load(split_path)?;
        let name = split_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "split".into());
        let m = evaluate(model, embedder.as_ref(), &data, &split, &name, &cfg)?;
        let path = out.join(format!("metrics_{kind}_{name}.json"));
        write_json(&m, &path)?;
        let acc: Vec<String> = m
            .accuracies
            .iter()
            .map(|(k, v)| format!("rank{k} {:.1}%", 100.0 * v))
            .collect();
        println!("{} [{name}]: {} -> {}", kind, acc.join(", "), path.display());
    }
    Ok(())
}

fn report_cmd(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    if a.metrics.is_empty() && a.grid_rows.is_empty() {
        bail!("nothing to report (give --metrics files and/or --grid-row images)");
    }
    let out = ctx.out_dir()?;
    if !a.metrics.is_empty() {
        let metrics = a
            .metrics
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                serde_json::from_str::<Metrics>(&text).with_context(|| format!("invalid metrics file {}", p.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        let table = ResultsTable::from_metrics(&metrics)?;
        let (text, file) = match a.format {
            TableFormat::Csv => (table.to_csv(), "results.csv"),
            TableFormat::Markdown => (table.to_markdown(), "results.md"),
        };
        fs::write(out.join(file), &text)?;
        fs::write(out.join("cmc.csv"), cmc_csv(&metrics)?)?;
        print!("{text}");
    }
    if !a.grid_rows.is_empty() {
        let rows = a
            .grid_rows
            .iter()
            .map(|r| {
                r.split(',')
                    .map(|p| Ok(ImageTensor::load_native(Path::new(p.trim()), 3)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let path = out.join("grid.png");
        save_image_grid(&rows, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}
