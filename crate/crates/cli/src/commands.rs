use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use psae::beamline::{
    read_dataset, sample_dataset, write_dataset, Dataset, GenOptions, PhaseVector, ScreenGeometry,
    Split, WorkingPoint,
};
use psae::diagnostics::{dataset_qa, LpsSummary};
use psae::loss::Loss;
use psae::model::{Autoencoder, DecoderConfig, EncoderConfig, ParamGroup, DEFAULT_LATENT_DIM};
use psae::trainer::{
    evaluate, load_checkpoint, predict, save_checkpoint, transfer_trainer, Checkpoint,
    EpochMetrics, TrainConfig, TrainReport, Trainer,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{EvalArgs, GenArgs, PredictArgs, ReplayArgs, TrainArgs, TransferArgs};
use crate::error::CliError;
use crate::manifest::{check_chain, now_ms, sibling, Artifact, RunManifest};
use crate::pgm;

type Result<T> = std::result::Result<T, CliError>;

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| CliError::usage(format!("missing --{flag}")))
}

fn parse_wp(s: &str) -> Result<WorkingPoint> {
    s.parse()
        .map_err(|_| CliError::usage(format!("unknown working point `{s}` (expected WP1 or WP2)")))
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn print_json(v: &Value) {
    println!("{v}");
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_data(path: &Path) -> Result<Dataset> {
    check_chain(path)?;
    Ok(read_dataset(path)?)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    check_chain(path)?;
    Ok(load_checkpoint(path)?)
}

/// Decoder preset that produces images of the dataset's size.
fn decoder_for(ds: &Dataset) -> Result<DecoderConfig> {
    for cfg in [DecoderConfig::desk(), DecoderConfig::full_scale()] {
        if cfg.output_dims()? == (ds.height, ds.width) {
            return Ok(cfg);
        }
    }
    Err(CliError::new(
        "config",
        format!(
            "no decoder preset emits {}x{} images (96x128 or 768x1024)",
            ds.height, ds.width
        ),
    ))
}

fn geometry_for(dims: (usize, usize)) -> Result<ScreenGeometry> {
    [ScreenGeometry::desk(), ScreenGeometry::full_scale()]
        .into_iter()
        .find(|g| g.output_dims() == dims)
        .ok_or_else(|| {
            CliError::new(
                "config",
                format!("no screen geometry for {}x{} images", dims.0, dims.1),
            )
        })
}

struct Recorder {
    command: &'static str,
    config: Value,
    started: u128,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

impl Recorder {
    fn new(command: &'static str, config: &impl Serialize) -> Self {
        Self {
            command,
            config: to_value(config),
            started: now_ms(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(role, path)?);
        Ok(())
    }

    fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(role, path)?);
        Ok(())
    }

    fn finish(self, primary: &Path, metrics: Value) -> Result<RunManifest> {
        let m = RunManifest {
            tool: format!("psae {}", env!("CARGO_PKG_VERSION")),
            command: self.command.into(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            metrics,
        };
        m.write(primary)?;
        Ok(m)
    }
}

pub fn gen(args: GenArgs) -> Result<RunManifest> {
    let wp = parse_wp(&required(&args.wp, "wp")?)?;
    let shots = required(&args.shots, "shots")?;
    let out = required(&args.out, "out")?;
    let mut opts = if args.full_scale {
        GenOptions::full_scale()
    } else {
        GenOptions::default()
    };
    if let Some(p) = args.particles {
        opts.particles = p;
    }
    let resolved = GenArgs {
        wp: Some(wp.id().into()),
        shots: Some(shots),
        out: Some(out.clone()),
        seed: Some(args.seed.unwrap_or(0)),
        full_scale: args.full_scale,
        particles: Some(opts.particles),
    };
    let seed = resolved.seed.unwrap_or(0);
    let mut rec = Recorder::new("gen", &resolved);
    rec.seeds.insert("dataset".into(), seed);

    let ds = sample_dataset(wp, shots, seed, &opts)?;
    write_dataset(&out, &ds)?;
    let (train, test) = ds.split_counts();
    let qa_path = sibling(&out, "qa.json");
    let qa = if ds.len() >= 2 {
        Some(dataset_qa(&ds)?)
    } else {
        None
    };
    let qa_json = json!({ "train": train, "test": test, "qa": qa });
    write_text(
        &qa_path,
        &(serde_json::to_string_pretty(&qa_json).map_err(CliError::internal)? + "\n"),
    )?;
    rec.output("dataset", &out)?;
    rec.output("qa", &qa_path)?;
    let summary = json!({
        "shots": ds.len(),
        "train": train,
        "test": test,
        "height": ds.height,
        "width": ds.width,
        "smallest_min_phase_distance": qa.as_ref().map(|q| q.smallest_min_distance),
        "duplicate": qa.as_ref().map(|q| q.duplicate),
        "com_extent": qa.as_ref().map(|q| q.com_extent),
    });
    print_json(&json!({ "dataset": out, "summary": summary }));
    rec.finish(&out, summary)
}

/// Metrics without wall-clock time, so that reruns write identical files.
fn metrics_line(m: &EpochMetrics) -> Value {
    json!({
        "epoch": m.epoch,
        "train_loss": m.train_loss,
        "test_mean_h": m.test_mean_h,
        "decoder_frozen": m.decoder_frozen,
    })
}

fn run_training(
    trainer: &mut Trainer,
    model: &mut Autoencoder<f32>,
    ds: &Dataset,
    metrics_path: &Path,
) -> Result<TrainReport> {
    let mut file =
        std::fs::File::create(metrics_path).map_err(|e| CliError::io(metrics_path, e))?;
    let mut io_err = None;
    let report = trainer.run(model, ds, |m| {
        let line = metrics_line(m);
        if let Err(e) = writeln!(file, "{line}") {
            io_err.get_or_insert(e);
        }
        let mut shown = line;
        shown["seconds"] = json!(m.seconds);
        print_json(&shown);
    })?;
    if let Some(e) = io_err {
        return Err(CliError::io(metrics_path, e));
    }
    Ok(report)
}

fn report_summary(report: &TrainReport) -> Value {
    json!({
        "epochs": report.metrics.len(),
        "steps": report.steps,
        "first_train_loss": report.metrics.first().map(|m| m.train_loss),
        "final_train_loss": report.metrics.last().map(|m| m.train_loss),
        "final_test_mean_h": report.final_test_mean_h(),
        "decoder_digest_before": report.decoder_digest_before,
        "decoder_digest_after": report.decoder_digest_after,
    })
}

pub fn train(args: TrainArgs) -> Result<RunManifest> {
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let loss_kind = args.loss.clone().unwrap_or_else(|| "ms_ssim".into());
    let loss = Loss::from_kind(&loss_kind).map_err(|e| CliError::usage(e.to_string()))?;
    let epochs = args.epochs.unwrap_or(600);
    if epochs == 0 {
        return Err(CliError::usage("--epochs must be at least 1"));
    }
    let resolved = TrainArgs {
        data: Some(data.clone()),
        loss: Some(loss_kind),
        epochs: Some(epochs),
        out: Some(out.clone()),
        batch_size: Some(args.batch_size.unwrap_or(16)),
        lr: Some(args.lr.unwrap_or(1e-3)),
        seed: Some(args.seed.unwrap_or(0)),
        eval_every: Some(args.eval_every.unwrap_or(1)),
        metrics: Some(
            args.metrics
                .clone()
                .unwrap_or_else(|| sibling(&out, "metrics.jsonl")),
        ),
    };
    let mut rec = Recorder::new("train", &resolved);
    let ds = load_data(&data)?;
    rec.input("dataset", &data)?;
    let wp = ds.working_point;
    let cfg = TrainConfig {
        loss,
        learning_rate: resolved.lr.unwrap_or(1e-3),
        epochs,
        batch_size: resolved.batch_size.unwrap_or(16),
        seed: resolved.seed.unwrap_or(0),
        encoder_id: wp.id().into(),
        freeze: Vec::new(),
        fine_tune_at: None,
        eval_every: resolved.eval_every.unwrap_or(1),
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    rec.seeds.insert("model_init".into(), cfg.seed);
    rec.seeds.insert("shuffle".into(), cfg.seed);

    let decoder = decoder_for(&ds)?;
    let mut model = Autoencoder::<f32>::build(
        wp.id(),
        &EncoderConfig::new(wp.phase_dim(), DEFAULT_LATENT_DIM),
        &decoder,
        cfg.seed,
    )?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let metrics_path = resolved.metrics.clone().expect("resolved");
    let report = run_training(&mut trainer, &mut model, &ds, &metrics_path)?;

    let ckpt = Checkpoint {
        model,
        optimizer: Some(trainer.optimizer.clone()),
        epoch: trainer.epoch,
        train_config: Some(cfg),
    };
    save_checkpoint(&out, &ckpt)?;
    rec.output("checkpoint", &out)?;
    rec.output("metrics", &metrics_path)?;
    let summary = report_summary(&report);
    print_json(&json!({ "checkpoint": out, "summary": summary }));
    rec.finish(&out, summary)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "test" => Ok(Split::Test),
        "train" => Ok(Split::Train),
        other => Err(CliError::usage(format!(
            "unknown split `{other}` (expected test or train)"
        ))),
    }
}

pub fn eval(args: EvalArgs) -> Result<RunManifest> {
    let ckpt_path = required(&args.ckpt, "ckpt")?;
    let data = required(&args.data, "data")?;
    let report_path = required(&args.report, "report")?;
    let split_name = args.split.clone().unwrap_or_else(|| "test".into());
    let split = parse_split(&split_name)?;
    let resolved = EvalArgs {
        split: Some(split_name),
        ..args
    };
    let mut rec = Recorder::new("eval", &resolved);
    let ckpt = load_ckpt(&ckpt_path)?;
    let ds = load_data(&data)?;
    rec.input("checkpoint", &ckpt_path)?;
    rec.input("dataset", &data)?;
    let id = ds.working_point.id();
    if ckpt.model.encoder(id).is_err() {
        let have: Vec<&String> = ckpt.model.encoders().keys().collect();
        return Err(CliError::new(
            "unknown-encoder",
            format!("dataset is {id} but the checkpoint only has encoders {have:?}; run `psae transfer` first"),
        ));
    }
    let report = evaluate(&ckpt.model, &ds, split, id)?;
    write_text(
        &report_path,
        &(serde_json::to_string_pretty(&report).map_err(CliError::internal)? + "\n"),
    )?;
    rec.output("report", &report_path)?;
    let summary = json!({
        "split": split.name(),
        "shots": report.shots,
        "mean_h": report.mean_h,
        "min_h": report.min_h,
        "max_h": report.max_h,
        "mean_current_max_error_a": report.mean_current_max_error_a,
        "mean_spectrum_peak_ratio": report.mean_spectrum_peak_ratio,
        "mean_sigma_e_ratio": report.mean_sigma_e_ratio,
    });
    print_json(&json!({ "report": report_path, "summary": summary }));
    rec.finish(&report_path, summary)
}

/// `dir/pred.pgm` → `dir/pred.<suffix>`.
fn beside(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

pub fn predict_cmd(args: PredictArgs) -> Result<RunManifest> {
    let ckpt_path = required(&args.ckpt, "ckpt")?;
    let out = required(&args.out, "out")?;
    let gun = required(&args.gun, "gun")?;
    let a1 = required(&args.a1, "a1")?;
    let encoder = args.encoder.clone().unwrap_or_else(|| {
        if args.ah1.is_some() {
            "WP1".into()
        } else {
            "WP2".into()
        }
    });
    let phases = match (encoder.parse::<WorkingPoint>(), args.ah1) {
        (Ok(WorkingPoint::Wp1), Some(ah1)) => PhaseVector::wp1(gun, a1, ah1),
        (Ok(WorkingPoint::Wp1), None) => return Err(CliError::usage("encoder WP1 needs --ah1")),
        (Ok(WorkingPoint::Wp2), None) => PhaseVector::wp2(gun, a1),
        (Ok(WorkingPoint::Wp2), Some(_)) => {
            return Err(CliError::usage("encoder WP2 takes no --ah1 (AH1 is off)"))
        }
        (Err(_), _) => {
            return Err(CliError::usage(format!(
                "unknown encoder `{encoder}` (expected WP1 or WP2)"
            )))
        }
    };
    let resolved = PredictArgs {
        encoder: Some(encoder.clone()),
        ..args
    };
    let mut rec = Recorder::new("predict", &resolved);
    let ckpt = load_ckpt(&ckpt_path)?;
    rec.input("checkpoint", &ckpt_path)?;
    let model = &ckpt.model;
    let cal = geometry_for(model.output_dims())?.output_calibration();
    let img = predict(model, &encoder, &phases, cal)?;
    std::fs::write(&out, pgm::encode(&img)).map_err(|e| CliError::io(&out, e))?;
    let lps = LpsSummary::of(&img)?;
    let profile = beside(&out, "profile.csv");
    let spectrum = beside(&out, "spectrum.csv");
    write_text(&profile, &lps.profile_csv(cal.time_per_px_ps))?;
    write_text(&spectrum, &lps.spectrum_csv(cal.energy_per_px_mev))?;
    rec.output("image", &out)?;
    rec.output("profile", &profile)?;
    rec.output("spectrum", &spectrum)?;
    let summary = json!({
        "encoder": encoder,
        "phases": phases.to_vec(),
        "height": img.height,
        "width": img.width,
        "peak_current_a": lps.current_profile.iter().copied().fold(0.0, f64::max),
        "center_of_mass": lps.center_of_mass,
        "mean_slice_sigma_e_mev": lps.mean_slice_spread(),
    });
    print_json(&json!({ "image": out, "summary": summary }));
    rec.finish(&out, summary)
}

pub fn transfer(args: TransferArgs) -> Result<RunManifest> {
    if !args.freeze_decoder {
        return Err(CliError::new(
            "refused",
            "transfer trains a new encoder against the checkpoint's decoder and needs --freeze-decoder \
             (add --fine-tune-at E to release the decoder later); use `psae train` to retrain everything",
        ));
    }
    let ckpt_path = required(&args.ckpt, "ckpt")?;
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let epochs = args.epochs.unwrap_or(300);
    if epochs == 0 {
        return Err(CliError::usage("--epochs must be at least 1"));
    }
    if args.fine_tune_at.is_some_and(|e| e == 0) {
        return Err(CliError::usage("--fine-tune-at counts epochs from 1"));
    }
    let resolved = TransferArgs {
        epochs: Some(epochs),
        batch_size: Some(args.batch_size.unwrap_or(16)),
        lr: Some(args.lr.unwrap_or(1e-3)),
        seed: Some(args.seed.unwrap_or(0)),
        eval_every: Some(args.eval_every.unwrap_or(1)),
        metrics: Some(
            args.metrics
                .clone()
                .unwrap_or_else(|| sibling(&out, "metrics.jsonl")),
        ),
        ..args
    };
    let mut rec = Recorder::new("transfer", &resolved);
    let ckpt = load_ckpt(&ckpt_path)?;
    let ds = load_data(&data)?;
    rec.input("checkpoint", &ckpt_path)?;
    rec.input("dataset", &data)?;
    let wp = ds.working_point;
    let id = wp.id();
    let mut model = ckpt.model;
    let seed = resolved.seed.unwrap_or(0);
    match model.encoder(id) {
        Ok(enc) if enc.config.input_dim != wp.phase_dim() => {
            return Err(CliError::new(
                "input",
                format!(
                    "checkpoint encoder `{id}` takes {} phases, {id} data has {}",
                    enc.config.input_dim,
                    wp.phase_dim()
                ),
            ));
        }
        Ok(_) => {}
        Err(_) => {
            let latent = model.decoder().config.latent_dim;
            model.attach_encoder(id, &EncoderConfig::new(wp.phase_dim(), latent), seed)?;
        }
    }
    model.freeze(&ParamGroup::Decoder)?;
    rec.seeds.insert("encoder_init".into(), seed);
    rec.seeds.insert("shuffle".into(), seed);
    let cfg = TrainConfig {
        loss: ckpt
            .train_config
            .as_ref()
            .map(|c| c.loss.clone())
            .unwrap_or_else(|| Loss::from_kind("ms_ssim").expect("known loss")),
        learning_rate: resolved.lr.unwrap_or(1e-3),
        epochs,
        batch_size: resolved.batch_size.unwrap_or(16),
        seed,
        encoder_id: id.into(),
        freeze: Vec::new(),
        fine_tune_at: resolved.fine_tune_at,
        eval_every: resolved.eval_every.unwrap_or(1),
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let mut trainer = transfer_trainer(&model, &cfg)?;
    let metrics_path = resolved.metrics.clone().expect("resolved");
    let report = run_training(&mut trainer, &mut model, &ds, &metrics_path)?;
    let out_ckpt = Checkpoint {
        model,
        optimizer: Some(trainer.optimizer.clone()),
        epoch: trainer.epoch,
        train_config: Some(cfg),
    };
    save_checkpoint(&out, &out_ckpt)?;
    rec.output("checkpoint", &out)?;
    rec.output("metrics", &metrics_path)?;
    let mut summary = report_summary(&report);
    summary["encoders"] = json!(out_ckpt.model.encoders().keys().collect::<Vec<_>>());
    summary["decoder_unchanged"] =
        json!(report.decoder_digest_before == report.decoder_digest_after);
    print_json(&json!({ "checkpoint": out, "summary": summary }));
    rec.finish(&out, summary)
}

fn redirect(path: &Option<PathBuf>, dir: &Path) -> Option<PathBuf> {
    path.as_ref()
        .and_then(|p| p.file_name())
        .map(|n| dir.join(n))
}

fn from_config<A: serde::de::DeserializeOwned>(config: &Value) -> Result<A> {
    serde_json::from_value(config.clone())
        .map_err(|e| CliError::new("format", format!("manifest config: {e}")))
}

pub fn replay(args: ReplayArgs) -> Result<Value> {
    let mpath = required(&args.manifest, "manifest")?;
    let recorded = RunManifest::read(&mpath)?;
    let tmp;
    let dir = match &args.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
            d.clone()
        }
        None => {
            tmp = tempfile::tempdir().map_err(|e| CliError::io(Path::new("<tempdir>"), e))?;
            tmp.path().to_path_buf()
        }
    };
    for input in &recorded.inputs {
        let now = Artifact::of(&input.role, &input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::new(
                "integrity",
                format!(
                    "input {} changed since the recorded run",
                    input.path.display()
                ),
            ));
        }
    }
    let rerun = match recorded.command.as_str() {
        "gen" => {
            let mut a: GenArgs = from_config(&recorded.config)?;
            a.out = redirect(&a.out, &dir);
            gen(a)?
        }
        "train" => {
            let mut a: TrainArgs = from_config(&recorded.config)?;
            a.out = redirect(&a.out, &dir);
            a.metrics = redirect(&a.metrics, &dir);
            train(a)?
        }
        "eval" => {
            let mut a: EvalArgs = from_config(&recorded.config)?;
            a.report = redirect(&a.report, &dir);
            eval(a)?
        }
        "predict" => {
            let mut a: PredictArgs = from_config(&recorded.config)?;
            a.out = redirect(&a.out, &dir);
            predict_cmd(a)?
        }
        "transfer" => {
            let mut a: TransferArgs = from_config(&recorded.config)?;
            a.out = redirect(&a.out, &dir);
            a.metrics = redirect(&a.metrics, &dir);
            transfer(a)?
        }
        other => {
            return Err(CliError::new(
                "format",
                format!("manifest records unknown command `{other}`"),
            ))
        }
    };
    let mut mismatched = Vec::new();
    for (old, new) in recorded.outputs.iter().zip(&rerun.outputs) {
        if old.sha256 != new.sha256 {
            mismatched.push(old.role.clone());
        }
    }
    if recorded.outputs.len() != rerun.outputs.len() || !mismatched.is_empty() {
        return Err(CliError::new(
            "integrity",
            format!(
                "replay of {} differs in outputs {mismatched:?}",
                mpath.display()
            ),
        ));
    }
    let result = json!({ "replayed": mpath, "command": recorded.command, "outputs_identical": recorded.outputs.len() });
    print_json(&result);
    Ok(result)
}
