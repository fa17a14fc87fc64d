use std::fs;
use std::path::{Path, PathBuf};

use oobnet_core::data::{dataset_stats_by_center, load_dataset, open_video, read_split_file, stats_csv, VideoSource};
use oobnet_core::model::{init_params, load_checkpoint, predict_frames, save_checkpoint};
use oobnet_core::pipeline::{apply_redaction, evaluate, predict_video, segments_from_trace};
use oobnet_core::synth::{write_dataset, SynthConfig, SynthGroup};
use oobnet_core::train::{select_threshold_max_f1, train as run_training, write_log_csv};
use oobnet_core::{Error, ModelConfig, PredictionTrace, RedactionPolicy, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{EvalArgs, Failure, ModelPreset, PredictArgs, RedactArgs, StatsArgs, SynthArgs, TrainArgs};

type Outcome = Result<(), Failure>;

fn split_path(data_dir: &Path, split: &Option<PathBuf>) -> PathBuf {
    split.clone().unwrap_or_else(|| data_dir.join("split.json"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::from(Error::io(parent, e)))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn video_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn open_single(dir: &Path) -> Result<VideoSource, Failure> {
    let name = video_name(dir);
    Ok(open_video(dir, &name, "unknown")?)
}

pub fn train(a: TrainArgs) -> Outcome {
    let model = match a.model {
        ModelPreset::Desk => ModelConfig::desk(),
        ModelPreset::Tiny => ModelConfig::tiny(),
        ModelPreset::MobilenetV2 => ModelConfig::mobilenet_v2(),
    };
    let config = TrainConfig {
        learning_rate: a.lr,
        clip_len: a.clip_len,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let data = load_dataset(&a.data_dir, &split_path(&a.data_dir, &a.split), model.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let initial = init_params(&model, &mut rng)?;
    log::info!(
        "{} training and {} validation videos, {} parameters",
        data.train.len(),
        data.validation.len(),
        initial.num_scalars()
    );
    let outcome = run_training(initial, &model, &data.train, &data.validation, &config, |row| {
        log::info!(
            "epoch {:>4}  loss {:.6}  val F1 {:.4}{}",
            row.epoch,
            row.train_loss,
            row.val_f1,
            if row.is_best { "  *" } else { "" }
        );
    })?;
    save_checkpoint(&outcome.params, &model, &a.out)?;

    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let mut csv = Vec::new();
    write_log_csv(&outcome.log, &mut csv).map_err(|e| Failure::from(Error::io(&log_path, e)))?;
    write_file(&log_path, &csv)?;

    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for seq in &data.validation {
        probs.extend(predict_frames(&outcome.params, &model, &seq.frames, config.clip_len)?);
        labels.extend_from_slice(&seq.labels);
    }
    match select_threshold_max_f1(&probs, &labels) {
        Ok(t) => log::info!("validation threshold maximising F1: {t:.6}"),
        Err(e) => log::warn!("no validation threshold: {e}"),
    }
    match outcome.best_epoch {
        Some(e) => log::info!("kept epoch {e}; checkpoint {}", a.out.display()),
        None => log::info!("no epochs run; wrote initial parameters to {}", a.out.display()),
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Outcome {
    let (params, model) = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data_dir, &split_path(&a.data_dir, &a.split), model.input_size)?;
    let groups = data.evaluation_groups();
    if groups.is_empty() {
        return Err(Error::Empty("split has no test or external videos".into()).into());
    }
    let report = evaluate(&params, &model, &groups, a.threshold, a.clip_len)?;
    for g in &report.groups {
        let m = g.pooled.metrics;
        log::info!(
            "{}: AUC {}  AP {}  F1 {:.4}  precision {:.4}  recall {:.4}",
            g.name,
            m.roc_auc.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.ap.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.f1,
            m.precision,
            m.recall
        );
    }
    let json = report.to_json()?;
    match &a.report {
        Some(path) => write_file(path, json.as_bytes()),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

pub fn predict(a: PredictArgs) -> Outcome {
    let (params, model) = load_checkpoint(&a.checkpoint)?;
    let source = open_single(&a.video_dir)?;
    let frames = source.load_frames(model.input_size)?;
    let trace = predict_video(&params, &model, source.video_id(), &frames, a.threshold, a.clip_len)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    write_file(&a.out_trace, &csv)?;
    let oob = trace.labels().iter().filter(|&&l| l == 1).count();
    log::info!("{} frames, {oob} predicted out-of-body", trace.len());
    Ok(())
}

pub fn redact(a: RedactArgs) -> Outcome {
    let policy = RedactionPolicy {
        mode: a.mode.into(),
        margin_frames: a.margin,
        blur_kernel: a.blur_kernel,
    };
    policy.validate()?;
    let source = open_single(&a.video_dir)?;
    let trace = match (&a.trace, &a.checkpoint) {
        (Some(path), _) => {
            let bytes = fs::read(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            PredictionTrace::read_csv(source.video_id(), &bytes)?
        }
        (None, Some(ckpt)) => {
            let (params, model) = load_checkpoint(ckpt)?;
            let frames = source.load_frames(model.input_size)?;
            predict_video(&params, &model, source.video_id(), &frames, a.threshold, a.clip_len)?
        }
        (None, None) => return Err(Failure::Usage("one of --trace or --checkpoint is required".into())),
    };
    let rows = source.sampled_rows();
    if trace.len() != rows.len() {
        return Err(Failure::Data(format!(
            "trace has {} frames but {} has {} sampled frames",
            trace.len(),
            a.video_dir.display(),
            rows.len()
        )));
    }
    let segments = segments_from_trace(&trace, &policy);
    let outcome = apply_redaction(&source.dir, &rows, &segments, &policy, &a.out)?;
    log::info!(
        "{} segments; {} frames obscured, {} deleted, {} written",
        segments.len(),
        outcome.obscured,
        outcome.deleted,
        outcome.manifest.len()
    );
    Ok(())
}

pub fn stats(a: StatsArgs) -> Outcome {
    let split = read_split_file(&a.data_dir, &split_path(&a.data_dir, &a.split))?;
    let groups = split
        .into_iter()
        .map(|(name, entries)| {
            let summaries = entries
                .iter()
                .map(|e| open_video(&e.dir, &e.video_id, &e.center_id)?.summary())
                .collect::<oobnet_core::Result<Vec<_>>>()?;
            Ok((name, summaries))
        })
        .collect::<oobnet_core::Result<Vec<_>>>()?;
    let csv = stats_csv(&dataset_stats_by_center(&groups))?;
    match &a.out {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(())
        }
    }
}

pub fn synth(a: SynthArgs) -> Outcome {
    let group = |name: &str, center: &str, videos| SynthGroup {
        name: name.into(),
        center: center.into(),
        videos,
    };
    let mut groups = vec![
        group("train", "internal", a.train),
        group("validation", "internal", a.validation),
        group("test", "internal", a.test),
    ];
    groups.push(group("external", "external", a.external));
    groups.retain(|g| g.videos > 0);
    let config = SynthConfig {
        seed: a.seed,
        groups,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        frame_size: a.frame_size,
    };
    let split = write_dataset(&a.out, &config)?;
    log::info!("wrote {}", split.display());
    Ok(())
}
