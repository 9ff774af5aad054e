use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use pmtmae::analysis::{self, CorrMode};
use pmtmae::data::{self, Dataset, PatchedSample, SyntheticSpec};
use pmtmae::distill;
use pmtmae::gradcheck;
use pmtmae::model::{Model, ModelConfig};
use pmtmae::train::{self, Checkpoint, Stage, TrainConfig, Trainer};
use pmtmae::Error;

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "pmtmae", version, about = "Dual-branch masked autoencoder for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shape dataset.
    GenData(Common),
    /// Run a frozen synthetic teacher over a dataset and write teacher records.
    MakeTeacher(Common),
    /// Masked-reconstruction pre-training, optionally with feature distillation.
    Pretrain(Common),
    /// Classification fine-tuning, optionally with logit distillation.
    Finetune(Common),
    /// Accuracy and confusion matrix of a checkpoint.
    Eval(Common),
    /// Branch-correlation histograms of a checkpoint.
    CorrHist(Common),
    /// Classifier-input features as CSV.
    ExportFeatures(Common),
    /// Masked reconstruction of one sample.
    Reconstruct(Common),
    /// Finite-difference gradient verification.
    GradCheck(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON file of flat dotted keys, e.g. {"train.epochs": 10}.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Encoder depth.
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Architecture preset: desk, small or large.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    teacher_records: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to initialize from, evaluate or analyse.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue the training run stored in --checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Sample id for reconstruct.
    #[arg(long)]
    sample: Option<u64>,
    /// Masked token selection for corr-hist.
    #[arg(long)]
    masked: bool,
    /// Number of random seeds for grad-check.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::NonFinite(_)) {
            3
        } else if e.is_data_error() {
            2
        } else {
            1
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn preset(name: &str) -> CliResult<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "small" => Ok(ModelConfig::small()),
        "large" => Ok(ModelConfig::large()),
        other => Err(usage(format!("unknown preset {other:?} (desk, small, large)"))),
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("config key {key:?} does not name a setting")))?;
        if !obj.contains_key(*part) {
            return Err(usage(format!("unknown config key {key:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}

/// Fully resolved settings of one run.
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    data: SyntheticSpec,
    teacher: ModelConfig,
    effective: Value,
}

fn resolve(c: &Common, stage: Stage) -> CliResult<Settings> {
    let file: Map<String, Value> = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Failure::from(Error::Io {
                    path: p.clone(),
                    source: e,
                })
            })?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => Map::new(),
    };
    let preset_name = c
        .preset
        .clone()
        .or_else(|| file.get("preset").and_then(|v| v.as_str()).map(String::from))
        .unwrap_or_else(|| "desk".into());
    let train_default = match stage {
        Stage::Pretrain => TrainConfig::pretrain(),
        Stage::Finetune => TrainConfig::finetune(),
    };
    let mut root = json!({
        "preset": preset_name,
        "model": preset(&preset_name)?,
        "train": train_default,
        "data": SyntheticSpec::default(),
        "teacher": ModelConfig::small(),
    });

    let mut flags: Vec<(&str, Value)> = Vec::new();
    if let Some(s) = c.seed {
        flags.extend([("train.seed", json!(s)), ("data.seed", json!(s))]);
    }
    let mut push = |k: &'static str, v: Option<Value>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("train.epochs", c.epochs.map(|v| json!(v)));
    push("train.batch_size", c.batch_size.map(|v| json!(v)));
    push("train.distill.alpha", c.alpha.map(|v| json!(v)));
    push("train.distill.beta", c.beta.map(|v| json!(v)));
    push("train.distill.temperature", c.temperature.map(|v| json!(v)));
    push("model.mask_ratio", c.mask_ratio.map(|v| json!(v)));
    push("model.encoder_blocks", c.blocks.map(|v| json!(v)));
    push("model.dim", c.dim.map(|v| json!(v)));
    push("model.heads", c.heads.map(|v| json!(v)));

    let mut explicit_total = false;
    for (k, v) in file.iter().filter(|(k, _)| k.as_str() != "preset") {
        explicit_total |= k == "train.schedule.total_epochs";
        set_dotted(&mut root, k, v.clone())?;
    }
    for (k, v) in flags {
        set_dotted(&mut root, k, v)?;
    }
    if !explicit_total {
        let epochs = root["train"]["epochs"].clone();
        root["train"]["schedule"]["total_epochs"] = epochs;
    }
    let bad = |section: &str, e: serde_json::Error| usage(format!("invalid {section} settings: {e}"));
    let model: ModelConfig = serde_json::from_value(root["model"].clone()).map_err(|e| bad("model", e))?;
    let train: TrainConfig = serde_json::from_value(root["train"].clone()).map_err(|e| bad("train", e))?;
    let data: SyntheticSpec = serde_json::from_value(root["data"].clone()).map_err(|e| bad("data", e))?;
    let teacher: ModelConfig = serde_json::from_value(root["teacher"].clone()).map_err(|e| bad("teacher", e))?;
    Ok(Settings {
        model,
        train,
        data,
        teacher,
        effective: root,
    })
}

fn write_effective(out: &Path, command: &str, s: &Settings, extra: Value) -> CliResult<()> {
    let mut v = s.effective.clone();
    v["command"] = json!(command);
    v["model"] = json!(s.model);
    v["train"] = json!(s.train);
    v["inputs"] = extra;
    write_text(
        &out.join("effective-config.json"),
        &(serde_json::to_string_pretty(&v).expect("json") + "\n"),
    )?;
    eprintln!("effective config: {}", serde_json::to_string(&v).expect("json"));
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| {
            Failure::from(Error::Io {
                path: dir.into(),
                source: e,
            })
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn load_data(c: &Common) -> CliResult<Dataset> {
    Ok(data::load_dataset(need(&c.data, "data")?)?)
}

fn samples(ds: &Dataset, split: Split) -> Vec<data::Sample> {
    match split {
        Split::Train => ds.train.clone(),
        Split::Test => ds.test.clone(),
        Split::All => ds.train.iter().chain(&ds.test).cloned().collect(),
    }
}

fn patched(set: &[data::Sample], cfg: &ModelConfig) -> CliResult<Vec<PatchedSample<f32>>> {
    Ok(data::patchify(set, cfg.num_patches, cfg.patch_k)?)
}

fn load_model(c: &Common) -> CliResult<Model<f32>> {
    Ok(Checkpoint::load(need(&c.checkpoint, "checkpoint")?)?.model()?)
}

fn inputs_of(c: &Common) -> Value {
    json!({
        "data": c.data,
        "checkpoint": c.checkpoint,
        "teacher_records": c.teacher_records,
        "resume": c.resume,
    })
}

fn gen_data(c: &Common) -> CliResult<()> {
    let s = resolve(c, Stage::Pretrain)?;
    let ds = data::gen_synthetic(&s.data)?;
    data::save_dataset(&c.out, &ds)?;
    write_effective(&c.out, "gen-data", &s, inputs_of(c))?;
    say!(
        "wrote {} train / {} test clouds to {}",
        ds.train.len(),
        ds.test.len(),
        c.out.display()
    );
    Ok(())
}

fn make_teacher(c: &Common) -> CliResult<()> {
    let s = resolve(c, Stage::Pretrain)?;
    let ds = load_data(c)?;
    let teacher_cfg = ModelConfig {
        num_patches: s.model.num_patches,
        patch_k: s.model.patch_k,
        num_classes: ds.num_classes(),
        teacher_dim: None,
        ..s.teacher.clone()
    };
    let teacher = distill::synth_teacher(teacher_cfg.clone(), s.train.seed)?;
    let all = patched(&samples(&ds, Split::All), &teacher_cfg)?;
    let records = teacher.records(&all, true)?;
    distill::write_teacher_records(&c.out.join("teacher.pmtt"), &records)?;
    let info = json!({ "digest": teacher.digest(), "config": teacher_cfg, "records": records.len() });
    write_text(
        &c.out.join("teacher.json"),
        &(serde_json::to_string_pretty(&info).expect("json") + "\n"),
    )?;
    write_effective(&c.out, "make-teacher", &s, inputs_of(c))?;
    say!(
        "wrote {} teacher records (width {}, digest {})",
        records.len(),
        teacher_cfg.dim,
        teacher.digest()
    );
    Ok(())
}

fn train_stage(c: &Common, stage: Stage) -> CliResult<()> {
    let mut s = resolve(c, stage)?;
    let ds = load_data(c)?;
    let teacher = c
        .teacher_records
        .as_ref()
        .map(|p| distill::read_teacher_records(p))
        .transpose()?;
    let mut trainer = if c.resume {
        let ck = Checkpoint::load(need(&c.checkpoint, "checkpoint")?)?;
        if ck.config.stage != Some(stage) {
            return Err(usage("--resume needs a checkpoint of the same training stage"));
        }
        let t = ck.resume::<f32>()?;
        s.model = t.model.config.clone();
        s.train = t.config.clone();
        t
    } else {
        s.model.num_classes = ds.num_classes();
        if let Some(t) = teacher.as_ref().and_then(|t| t.records().next()) {
            if stage == Stage::Pretrain && s.model.teacher_dim.is_none() {
                s.model.teacher_dim = Some(t.width());
            }
        }
        let mut model = Model::<f32>::new(s.model.clone(), s.train.seed)?;
        if let Some(p) = &c.checkpoint {
            Checkpoint::load(p)?.load_into(&mut model, false)?;
        }
        Trainer::new(model, s.train.clone(), stage)?
    };
    let cfg = s.model.clone();
    let train_set = patched(&ds.train, &cfg)?;
    let test_set = patched(&ds.test, &cfg)?;
    write_effective(
        &c.out,
        if stage == Stage::Pretrain {
            "pretrain"
        } else {
            "finetune"
        },
        &s,
        inputs_of(c),
    )?;
    let metrics = c.out.join("metrics.jsonl");
    if !c.resume {
        let _ = std::fs::remove_file(&metrics);
    }
    let eval = (stage == Stage::Finetune).then_some(test_set.as_slice());
    trainer.run(&train_set, eval, teacher.as_ref(), |t, log| {
        train::append_metric(&metrics, log)?;
        eprintln!("{}", log.to_json_line()?.trim_end());
        if t.checkpoint_due() && !t.is_done() {
            Checkpoint::from_trainer(t).save(&c.out.join(format!("checkpoint-e{:03}.pmtc", t.epoch)))?;
        }
        Ok(())
    })?;
    Checkpoint::from_trainer(&trainer).save(&c.out.join("checkpoint.pmtc"))?;
    if stage == Stage::Finetune {
        let e = train::evaluate(&trainer.model, &test_set, trainer.config.batch_size)?;
        say!("test accuracy {:.4} ({}/{})", e.accuracy, e.correct, e.total);
    } else {
        say!("pre-training finished after {} epochs", trainer.epoch);
    }
    Ok(())
}

fn eval(c: &Common) -> CliResult<()> {
    let model = load_model(c)?;
    let ds = load_data(c)?;
    let set = patched(&samples(&ds, c.split.unwrap_or(Split::Test)), &model.config)?;
    let e = train::evaluate(&model, &set, 32)?;
    let s = resolve(c, Stage::Finetune)?;
    write_effective(
        &c.out,
        "eval",
        &Settings {
            model: model.config.clone(),
            ..s
        },
        inputs_of(c),
    )?;
    let report = serde_json::to_string_pretty(&e).expect("json");
    write_text(&c.out.join("eval.json"), &(report.clone() + "\n"))?;
    say!("{report}");
    Ok(())
}

fn corr_hist(c: &Common) -> CliResult<()> {
    let model = load_model(c)?;
    let ds = load_data(c)?;
    let set = patched(&samples(&ds, c.split.unwrap_or(Split::Test)), &model.config)?;
    let s = resolve(c, Stage::Finetune)?;
    let mode = if c.masked {
        CorrMode::Masked {
            ratio: model.config.mask_ratio,
            seed: s.train.seed,
        }
    } else {
        CorrMode::Unmasked
    };
    let hists = analysis::correlation_histogram(&model, &set, analysis::DEFAULT_BINS, mode, 32)?;
    write_text(&c.out.join("corr_hist.jsonl"), &analysis::histograms_jsonl(&hists)?)?;
    write_text(&c.out.join("corr_hist.csv"), &analysis::histograms_csv(&hists))?;
    write_effective(
        &c.out,
        "corr-hist",
        &Settings {
            model: model.config.clone(),
            ..s
        },
        inputs_of(c),
    )?;
    for h in &hists {
        say!(
            "block {}: {} tokens, {} undefined, mean |r| = {:.4}",
            h.block,
            h.total,
            h.undefined,
            h.mean_abs_r
        );
    }
    Ok(())
}

fn export_features(c: &Common) -> CliResult<()> {
    let model = load_model(c)?;
    let ds = load_data(c)?;
    let set = patched(&samples(&ds, c.split.unwrap_or(Split::All)), &model.config)?;
    let path = c.out.join("features.csv");
    analysis::export_features(&model, &set, &path)?;
    let s = resolve(c, Stage::Finetune)?;
    write_effective(
        &c.out,
        "export-features",
        &Settings {
            model: model.config.clone(),
            ..s
        },
        inputs_of(c),
    )?;
    say!("wrote {} feature rows to {}", set.len(), path.display());
    Ok(())
}

fn reconstruct(c: &Common) -> CliResult<()> {
    let model = load_model(c)?;
    let ds = load_data(c)?;
    let all = samples(&ds, Split::All);
    let sample = match c.sample {
        Some(id) => all
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| usage(format!("no sample with id {id}")))?,
        None => all.first().ok_or_else(|| usage("empty dataset"))?,
    };
    let s = resolve(c, Stage::Pretrain)?;
    let path = c.out.join("reconstruction.pmts");
    let rec = analysis::export_reconstruction(&model, sample, s.train.seed, &path)?;
    write_effective(
        &c.out,
        "reconstruct",
        &Settings {
            model: model.config.clone(),
            ..s
        },
        inputs_of(c),
    )?;
    say!(
        "sample {}: {} masked patches, {} reconstructed points, chamfer {:.6}",
        sample.id,
        rec.masked_patches,
        rec.reconstructed.len(),
        rec.chamfer
    );
    Ok(())
}

fn grad_check(c: &Common) -> CliResult<()> {
    let s = resolve(c, Stage::Pretrain)?;
    let seed = c.seed.unwrap_or(0);
    let reports = gradcheck::run_suite(seed, c.seeds)?;
    say!("{:<20} {:>14} {:>10}", "op", "max rel err", "entries");
    for r in &reports {
        say!("{:<20} {:>14.3e} {:>10}", r.op, r.max_rel_err, r.checked);
    }
    write_effective(&c.out, "grad-check", &s, json!({ "seeds": c.seeds }))?;
    write_text(
        &c.out.join("grad-check.json"),
        &(serde_json::to_string_pretty(&reports).expect("json") + "\n"),
    )?;
    match reports.iter().find(|r| !(r.max_rel_err < 1e-4)) {
        Some(r) => Err(Failure {
            code: 3,
            message: format!("{} gradient error {:.3e} exceeds 1e-4", r.op, r.max_rel_err),
        }),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::MakeTeacher(c) => make_teacher(c),
        Command::Pretrain(c) => train_stage(c, Stage::Pretrain),
        Command::Finetune(c) => train_stage(c, Stage::Finetune),
        Command::Eval(c) => eval(c),
        Command::CorrHist(c) => corr_hist(c),
        Command::ExportFeatures(c) => export_features(c),
        Command::Reconstruct(c) => reconstruct(c),
        Command::GradCheck(c) => grad_check(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
