use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use ygan::config::{load_source, model_for_split, prepare_data, probe_set, ExperimentFile, PreparedData};
use ygan::data::{default_palette, load_dataset, make_color_mnist, write_image, AnomalyClass, DatasetSpec, PaletteColor};
use ygan::error::{Result, YganError};
use ygan::eval::{evaluate_scores, prepare_method, probe_disentanglement, run_protocol, ProtocolConfig, ProtocolReport};
use ygan::scoring::{score_dataset, ScoreKind};
use ygan::training::{load_checkpoint, resume, train, Ablation, Checkpoint, TrainOptions};
use ygan::weaklabels::{weak_labels, FeatureExtractor, RandomConvNet, RawPixels};

#[derive(Parser)]
#[command(name = "ygan", version, about = "Y-GAN anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the normal classes of the configured split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint to the end of its schedule.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured ablation variant.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Track AUC on the held-out split each epoch and keep best.ckpt.
        #[arg(long)]
        validate: bool,
    },
    /// Evaluate a checkpoint on the held-out split, or run the
    /// leave-one-class-out protocol with `--runs`.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        method: Option<ScoreKind>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-sample anomaly scores as CSV.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Option<ScoreKind>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        part: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a grayscale IDX digit corpus into Color-MNIST PNGs.
    Colorize {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        /// JSON list of `{"name", "rgb"}` colors.
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Cluster the training split into weak labels.
    Weaklabels {
        #[arg(long)]
        config: PathBuf,
        /// Candidate cluster counts, e.g. `2..12` (inclusive).
        #[arg(long, default_value = "2..12")]
        k_range: String,
        #[arg(long, value_enum, default_value_t = Extractor::Raw)]
        extractor: Extractor,
        #[arg(long, default_value_t = 100)]
        pca_dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap codes between samples and probe what each code encodes.
    DemoDisentangle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        cols: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge protocol reports into one markdown table.
    Report {
        /// `name=path/to/report.json`, repeatable.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Extractor {
    Raw,
    RandomConv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<Value> {
    match command {
        Command::Train {
            config,
            out,
            resume,
            ablation,
            validate,
        } => cmd_train(&config, &out, resume.as_deref(), ablation, validate),
        Command::Eval {
            config,
            checkpoint,
            method,
            runs,
            out,
        } => cmd_eval(&config, checkpoint.as_deref(), method, runs, &out),
        Command::Score {
            config,
            checkpoint,
            method,
            part,
            out,
        } => cmd_score(&config, &checkpoint, method, part, &out),
        Command::Colorize {
            src,
            dst,
            palette,
            seed,
            size,
            limit,
        } => cmd_colorize(&src, &dst, palette.as_deref(), seed, size, limit),
        Command::Weaklabels {
            config,
            k_range,
            extractor,
            pca_dims,
            seed,
            out,
        } => cmd_weaklabels(&config, &k_range, extractor, pca_dims, seed, &out),
        Command::DemoDisentangle {
            config,
            checkpoint,
            rows,
            cols,
            out,
        } => cmd_demo(&config, &checkpoint, rows, cols, &out),
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| YganError::io(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| YganError::io(path, e))
}

fn provenance(command: &str, exp: &ExperimentFile, extra: Value) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": exp.hash(),
        "seeds": {
            "train": exp.train.seed,
            "split": exp.split.seed,
            "data": exp.data.dataset.seed,
        },
        "extra": extra,
    })
}

fn load_model(path: &Path) -> Result<Checkpoint<f32>> {
    info!("loading checkpoint {}", path.display());
    load_checkpoint::<f32>(path)
}

fn cmd_train(config: &Path, out: &Path, resume_from: Option<&Path>, ablation: Option<Ablation>, validate: bool) -> Result<Value> {
    let mut exp = ExperimentFile::load(config)?;
    if let Some(a) = ablation {
        exp.train.ablation = a;
        exp.validate()?;
    }
    let data = prepare_data(&exp)?;
    let model = model_for_split(&exp, &data.split);
    create_dir(out)?;
    write_json(&out.join("split.json"), &data.split.manifest)?;
    write_json(&out.join("config.json"), &exp)?;
    let options = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        validation: validate.then_some(&data.split.test),
        stop_after_epoch: None,
    };
    let outcome = match resume_from {
        Some(path) => {
            let mut state = load_model(path)?;
            state.ensure_compatible(&model)?;
            if state.train_config.ablation != exp.train.ablation {
                return Err(YganError::Config(format!(
                    "checkpoint was trained as {}, the configuration asks for {}",
                    state.train_config.ablation, exp.train.ablation
                )));
            }
            // The schedule length may be extended; everything else stays as saved.
            state.train_config.epochs = exp.train.epochs;
            resume(state, &data.split.train, &options)?
        }
        None => train::<f32>(&model, &exp.train, &data.split.train, &options)?,
    };
    let state = &outcome.checkpoint;
    write_json(
        &out.join("provenance.json"),
        &provenance(
            "train",
            &exp,
            json!({ "resumed_from": resume_from, "ablation": exp.train.ablation }),
        ),
    )?;
    let last = outcome.history.last();
    Ok(json!({
        "command": "train",
        "checkpoint": out.join("last.ckpt"),
        "ablation": exp.train.ablation,
        "epochs": state.epoch,
        "steps": state.step,
        "train_samples": data.split.train.len(),
        "num_classes": model.num_classes,
        "final_total_G": last.map(|r| r.total_g),
        "final_total_D": last.and_then(|r| r.total_d),
        "best_validation_auc": outcome.validation_auc.iter().cloned().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
    }))
}

fn anomaly_class_of(data: &PreparedData) -> Option<usize> {
    match data.split.manifest.spec.anomaly_class {
        AnomalyClass::Class(c) => Some(c),
        AnomalyClass::External => None,
    }
}

fn cmd_eval(config: &Path, checkpoint: Option<&Path>, method: Option<ScoreKind>, runs: Option<usize>, out: &Path) -> Result<Value> {
    let exp = ExperimentFile::load(config)?;
    let kind = method.unwrap_or(exp.score.method);
    create_dir(out)?;
    let row_name = format!("{} ({})", exp.train.ablation, kind);
    let protocol_classes = match (&exp.eval.anomaly_classes, runs.or(exp.eval.runs)) {
        (Some(classes), _) => Some(classes.clone()),
        (None, Some(n)) => Some((0..n).collect()),
        (None, None) => None,
    };
    let protocol_classes = protocol_classes.filter(|c| c.len() > 1 || checkpoint.is_none());
    let report = match (protocol_classes, checkpoint) {
        (Some(classes), _) => {
            let (set, _) = load_source(&exp)?;
            let protocol = ProtocolConfig {
                model: exp.model.clone(),
                train: exp.train.clone(),
                split: exp.split.clone(),
                method: kind,
                anomaly_classes: classes,
            };
            run_protocol(&set, &protocol)?
        }
        (_, Some(path)) => {
            let data = prepare_data(&exp)?;
            let state = load_model(path)?;
            state.ensure_compatible(&model_for_split(&exp, &data.split))?;
            let method = prepare_method(&state.bundle, kind, &data.split.train, exp.train.seed)?;
            let mut scores = score_dataset(&state.bundle, &data.split.test, &method, exp.score.batch_size)?;
            scores.meta.checkpoint = Some(path.display().to_string());
            scores.meta.dataset = Some(exp.resolved_data_path().display().to_string());
            scores.meta.seed = Some(exp.split.seed);
            scores.write(&out.join("scores.csv"))?;
            let run = evaluate_scores(
                &scores.scores(),
                &scores.labels(),
                &data.split.test.labels,
                anomaly_class_of(&data),
                exp.train.seed,
                kind,
            )?;
            ProtocolReport::from_runs(vec![run], Vec::new())?
        }
        (None, None) => {
            return Err(YganError::Config(
                "eval needs --checkpoint, or --runs / eval.runs for the protocol".into(),
            ))
        }
    };
    report.write(&out.join("report.json"), &out.join("report.md"), &row_name)?;
    write_json(
        &out.join("provenance.json"),
        &provenance("eval", &exp, json!({ "checkpoint": checkpoint, "method": kind })),
    )?;
    Ok(json!({
        "command": "eval",
        "method": kind,
        "runs": report.runs.len(),
        "failures": report.failures.len(),
        "mean_auc": report.mean_auc,
        "std_auc": report.std_auc,
        "report": out.join("report.json"),
    }))
}

fn cmd_score(config: &Path, checkpoint: &Path, method: Option<ScoreKind>, part: Part, out: &Path) -> Result<Value> {
    let exp = ExperimentFile::load(config)?;
    let kind = method.unwrap_or(exp.score.method);
    let data = prepare_data(&exp)?;
    let state = load_model(checkpoint)?;
    state.ensure_compatible(&model_for_split(&exp, &data.split))?;
    let method = prepare_method(&state.bundle, kind, &data.split.train, exp.train.seed)?;
    let set = match part {
        Part::Train => &data.split.train,
        Part::Test => &data.split.test,
    };
    let mut report = score_dataset(&state.bundle, set, &method, exp.score.batch_size)?;
    report.meta.checkpoint = Some(checkpoint.display().to_string());
    report.meta.dataset = Some(exp.resolved_data_path().display().to_string());
    report.meta.seed = Some(exp.split.seed);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write(out)?;
    Ok(json!({
        "command": "score",
        "method": kind,
        "samples": report.rows.len(),
        "out": out,
    }))
}

fn cmd_colorize(src: &Path, dst: &Path, palette: Option<&Path>, seed: u64, size: usize, limit: Option<usize>) -> Result<Value> {
    let palette: Vec<PaletteColor> = match palette {
        Some(p) => serde_json::from_slice(&std::fs::read(p).map_err(|e| YganError::io(p, e))?)?,
        None => default_palette(),
    };
    let mut set = load_dataset(&DatasetSpec {
        path: src.to_path_buf(),
        image_size: size,
        ..Default::default()
    })?;
    if let Some(n) = limit {
        set = set.subset(&(0..n.min(set.len())).collect::<Vec<_>>());
    }
    let colored = make_color_mnist(&set, &palette, seed)?;
    create_dir(dst)?;
    let mut manifest = csv::Writer::from_path(dst.join("manifest.csv"))?;
    manifest.write_record(["sample_id", "file", "digit", "color"])?;
    for i in 0..colored.set.len() {
        let digit = colored.set.labels[i];
        let dir = dst.join(digit.to_string());
        if i < 10 || !dir.exists() {
            create_dir(&dir)?;
        }
        let file = format!("{}/{:06}.png", digit, colored.set.ids[i]);
        write_image(&dst.join(&file), colored.set.image(i), 3, size, size)?;
        manifest.write_record([
            colored.set.ids[i].to_string(),
            file,
            digit.to_string(),
            palette[colored.colors[i]].name.clone(),
        ])?;
    }
    manifest.flush().map_err(|e| YganError::io(dst.join("manifest.csv"), e))?;
    write_json(&dst.join("palette.json"), &palette)?;
    Ok(json!({
        "command": "colorize",
        "samples": colored.set.len(),
        "out": dst,
        "seed": seed,
    }))
}

fn parse_k_range(text: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || YganError::Config(format!("invalid k range {text:?}; expected e.g. 2..12"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let lo: usize = a.trim().parse().map_err(|_| bad())?;
    let hi: usize = b.trim().parse().map_err(|_| bad())?;
    if lo < 2 || hi < lo {
        return Err(bad());
    }
    Ok(lo..=hi)
}

fn cmd_weaklabels(config: &Path, k_range: &str, extractor: Extractor, pca_dims: usize, seed: u64, out: &Path) -> Result<Value> {
    let exp = ExperimentFile::load(config)?;
    let range = parse_k_range(k_range)?;
    let mut without_weak = exp.clone();
    without_weak.data.weak_labels = None;
    without_weak.data.augment = None;
    let data = prepare_data(&without_weak)?;
    let set = &data.split.train;
    let extractor: Box<dyn FeatureExtractor> = match extractor {
        Extractor::Raw => Box::new(RawPixels),
        Extractor::RandomConv => Box::new(RandomConvNet::new(set.size, set.channels, 16, seed)?),
    };
    let manifest = weak_labels(set, extractor.as_ref(), pca_dims, range, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    manifest.write(out)?;
    Ok(json!({
        "command": "weaklabels",
        "k": manifest.meta.k,
        "silhouette": manifest.meta.silhouette,
        "samples": manifest.rows.len(),
        "out": out,
    }))
}

fn cmd_demo(config: &Path, checkpoint: &Path, rows: usize, cols: usize, out: &Path) -> Result<Value> {
    let exp = ExperimentFile::load(config)?;
    if !exp.data.colorize {
        return Err(YganError::Config("demo-disentangle needs a colorized dataset (data.colorize)".into()));
    }
    if rows == 0 || cols == 0 {
        return Err(YganError::Config("rows and cols must be positive".into()));
    }
    let data = prepare_data(&exp)?;
    let state = load_model(checkpoint)?;
    let bundle = &state.bundle;
    let test = &data.split.test;
    let n = rows.max(cols);
    if test.len() < n {
        return Err(YganError::Protocol(format!("need {n} held-out samples, have {}", test.len())));
    }
    // Left column supplies z_r, top row supplies z_s; the same samples head
    // both, so the diagonal shows plain reconstructions.
    let sources: Vec<usize> = (0..n).collect();
    let x = test.batch::<f32>(&sources);
    let (z_s, z_r) = bundle.encode(&x)?;
    let z_r = z_r.ok_or_else(|| YganError::Config("the checkpoint has no residual code".into()))?;
    let (ch, s) = (test.channels, test.size);
    let (w, h) = ((cols + 1) * s, (rows + 1) * s);
    let mut canvas = vec![1f32; ch * w * h];
    let mut paste = |img: &[f32], r: usize, c: usize| {
        for k in 0..ch {
            for y in 0..s {
                let dst = k * w * h + (r * s + y) * w + c * s;
                canvas[dst..dst + s].copy_from_slice(&img[k * s * s + y * s..k * s * s + (y + 1) * s]);
            }
        }
    };
    for j in 0..cols {
        paste(test.image(j), 0, j + 1);
    }
    for i in 0..rows {
        paste(test.image(i), i + 1, 0);
        let zs_rows: Vec<usize> = (0..cols).collect();
        let zr_rows = vec![i; cols];
        let decoded = bundle.decode(&z_s.select_rows(&zs_rows), Some(&z_r.select_rows(&zr_rows)))?;
        for j in 0..cols {
            paste(decoded.row(j), i + 1, j + 1);
        }
    }
    create_dir(out)?;
    write_image(&out.join("grid.png"), &canvas, ch, w, h)?;
    let (probe_images, probe_colors) = probe_set(&exp, &data.split.manifest)?;
    let probes = probe_disentanglement(bundle, &probe_images, &probe_colors, exp.split.seed)?;
    write_json(&out.join("probes.json"), &probes)?;
    write_json(
        &out.join("provenance.json"),
        &provenance("demo-disentangle", &exp, json!({ "checkpoint": checkpoint, "rows": rows, "cols": cols })),
    )?;
    Ok(json!({
        "command": "demo-disentangle",
        "grid": out.join("grid.png"),
        "probes": probes,
    }))
}

fn cmd_report(inputs: &[String], out: &Path) -> Result<Value> {
    let mut table = String::new();
    for (k, input) in inputs.iter().enumerate() {
        let (name, path) = input
            .split_once('=')
            .ok_or_else(|| YganError::Config(format!("report input {input:?} is not name=path")))?;
        let path = Path::new(path);
        let report: ProtocolReport =
            serde_json::from_slice(&std::fs::read(path).map_err(|e| YganError::io(path, e))?)?;
        let md = report.markdown(name);
        // Keep the header of the first table only.
        let body = if k == 0 { md } else { md.lines().skip(2).map(|l| format!("{l}\n")).collect() };
        table.push_str(&body);
    }
    std::fs::write(out, &table).map_err(|e| YganError::io(out, e))?;
    Ok(json!({ "command": "report", "rows": inputs.len(), "out": out }))
}
