use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use v2m_core::checkpoint::Checkpoint;
use v2m_core::dataset::{split_dataset, synthesize_dataset, Dataset, FeatureRecord};
use v2m_core::extract::{extract_all, ExtractOptions};
use v2m_core::features::{default_key_profiles, load_key_profiles};
use v2m_core::model::{AmtModel, ModelConfig};
use v2m_core::music::{parse_compact_chord, parse_progression, ChordEvent, Key};
use v2m_core::pipeline::{
    compose, evaluate_model, load_model_checkpoint, model_checkpoint, render_song, ExpressiveSource, VideoFeatures,
};
use v2m_core::regressor::{train_regressor as fit_regressor, Regressor, RegressorKind};
use v2m_core::train::{train as fit_model, EpochLog, Resume};

use crate::config::RunConfig;

pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REGRESSOR_FILE: &str = "regressor.ckpt";
pub const REGRESSOR_LOG_FILE: &str = "regressor_log.csv";
const REGRESSOR_LOG_HEADER: &str = "# epoch,train_mse,val_rmse_density,val_rmse_loudness";

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Key-profile file (three [name] blocks with major/minor rows).
    #[arg(long)]
    profiles: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of records.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Seconds per record.
    #[arg(long)]
    length: Option<usize>,
    /// Semantic vector width.
    #[arg(long)]
    d_sem: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to continue from; epoch numbering carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainRegressorArgs {
    /// fc, lstm, bilstm, gru or bigru; defaults to the config value.
    #[arg(long)]
    kind: Option<RegressorKind>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Video feature file (JSON; full feature records also work).
    #[arg(long)]
    features: PathBuf,
    /// Chord model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Density/loudness regressor checkpoint.
    #[arg(long, required_unless_present = "use_ground_truth_expressive")]
    regressor: Option<PathBuf>,
    /// Take density and loudness from the feature file instead of a regressor.
    #[arg(long, conflicts_with = "regressor")]
    use_ground_truth_expressive: bool,
    #[arg(long, default_value = "C:major")]
    key: Key,
    /// Opening chords, e.g. "C Am F G".
    #[arg(long)]
    primer: Option<String>,
    /// Chord text output; defaults to the MIDI path with a .chords.txt extension.
    #[arg(long)]
    chords_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Chord model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Chord text file: whitespace-separated chords, one per second.
    #[arg(long)]
    chords: PathBuf,
    /// Feature file supplying density and loudness (ground truth unless --regressor is given).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Regressor predicting density and loudness from --features.
    #[arg(long, requires = "features")]
    regressor: Option<PathBuf>,
    /// Constant notes per second when no feature file is given.
    #[arg(long, default_value_t = 8.0)]
    density: f64,
    /// Constant loudness in [0, 1] when no feature file is given.
    #[arg(long, default_value_t = 0.5)]
    loudness: f64,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir()?;
    Dataset::load_dir(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Opens a CSV log, appending when continuing an earlier run.
fn open_log(path: &Path, header: &str, append: bool) -> Result<File> {
    if append && path.exists() {
        return OpenOptions::new()
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()));
    }
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "{header}")?;
    Ok(f)
}

pub fn extract(cfg: &RunConfig, a: &ExtractArgs) -> Result<()> {
    let inputs = cfg.data_dir()?;
    let out = cfg.out_path()?;
    let profiles = match a.profiles.as_ref().or(cfg.extract.key_profiles.as_ref()) {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            load_key_profiles(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => default_key_profiles(),
    };
    let opts = ExtractOptions {
        emotion_window: cfg.extract.emotion_window,
    };
    let (records, failed) = extract_all(inputs, &profiles, &opts)?;
    for (id, err) in &failed {
        log::warn!("record `{id}` skipped: {err}");
    }
    if records.is_empty() {
        bail!(
            "no record could be extracted from {} ({} failed)",
            inputs.display(),
            failed.len()
        );
    }
    for r in &records {
        println!("{}\tseconds={}\tkey={}\td_sem={}", r.id, r.length_s, r.key, r.d_sem());
    }
    let n = records.len();
    Dataset::new(records)?.save_dir(out)?;
    println!(
        "extracted {n} records ({} skipped) into {}",
        failed.len(),
        out.display()
    );
    Ok(())
}

pub fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let out = cfg.out_path()?;
    let mut sc = cfg.synth;
    if let Some(v) = a.length {
        sc.length_s = v;
    }
    if let Some(v) = a.d_sem {
        sc.d_sem = v;
    }
    let records = synthesize_dataset(a.n as usize, cfg.seed, &sc)?;
    Dataset::new(records)?.save_dir(out)?;
    println!("wrote {} records to {}", a.n, out.display());
    Ok(())
}

fn records(data: &Dataset, ids: &[String]) -> Vec<FeatureRecord> {
    data.subset(ids).records
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let data = load_dataset(cfg)?;
    let out = cfg.out_path()?;
    let split = split_dataset(&data.ids(), &cfg.split_spec());
    let (train_set, val_set) = (records(&data, &split.train), records(&data, &split.val));
    if train_set.is_empty() {
        bail!("the training split of {} records is empty", data.len());
    }
    let mut tc = cfg.train_config();
    let (mut model, resume): (AmtModel, Option<Resume>) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let (model, resume) = load_model_checkpoint(&ck)?;
            let resume = resume.with_context(|| format!("{} holds no optimizer state", path.display()))?;
            tc.optimizer = *resume.optimizer.spec();
            (model, Some(resume))
        }
        None => {
            let mc = ModelConfig {
                d_sem: data.d_sem,
                ..cfg.model
            };
            (AmtModel::new(mc, cfg.seed)?, None)
        }
    };
    if model.config().d_sem != data.d_sem {
        bail!(
            "dataset has d_sem {}, the checkpoint expects {}",
            data.d_sem,
            model.config().d_sem
        );
    }
    create_dir(out)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log_file = open_log(&log_path, EpochLog::HEADER, resume.is_some())?;
    println!(
        "training on {} records, validating on {}; {} parameters",
        train_set.len(),
        val_set.len(),
        model.params().scalar_count()
    );
    println!("{}", EpochLog::HEADER);
    let mut write_err = None;
    let outcome = fit_model(&mut model, &train_set, &val_set, &tc, resume, |e| {
        println!("{}", e.line());
        if let Err(err) = writeln!(log_file, "{}", e.line()) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }
    let ck_path = out.join(MODEL_FILE);
    model_checkpoint(&model, Some(&outcome.optimizer), outcome.epochs_done)?.save(&ck_path)?;
    println!("checkpoint: {}", ck_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

pub fn train_regressor(cfg: &RunConfig, a: &TrainRegressorArgs) -> Result<()> {
    let data = load_dataset(cfg)?;
    let out = cfg.out_path()?;
    let split = split_dataset(&data.ids(), &cfg.split_spec());
    let (train_set, val_set) = (records(&data, &split.train), records(&data, &split.val));
    let mut rc = cfg.regressor;
    if let Some(k) = a.kind {
        rc.kind = k;
    }
    create_dir(out)?;
    let log_path = out.join(REGRESSOR_LOG_FILE);
    let mut log_file = open_log(&log_path, REGRESSOR_LOG_HEADER, false)?;
    println!("{REGRESSOR_LOG_HEADER}");
    let mut write_err = None;
    let (reg, history) = fit_regressor(rc, &train_set, &val_set, |e| {
        println!("{}", e.line());
        if let Err(err) = writeln!(log_file, "{}", e.line()) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }
    let ck_path = out.join(REGRESSOR_FILE);
    reg.to_checkpoint(serde_json::json!({ "epochs": history.len() }))?
        .save(&ck_path)?;
    println!("checkpoint: {}", ck_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn load_regressor(path: &Path) -> Result<Regressor> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Regressor::from_checkpoint(&ck)?)
}

pub fn generate(cfg: &RunConfig, a: &GenerateArgs) -> Result<()> {
    let out = cfg.out_path()?;
    let video = VideoFeatures::load(&a.features).with_context(|| format!("loading {}", a.features.display()))?;
    let ck = Checkpoint::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (model, _) = load_model_checkpoint(&ck)?;
    let primer = match &a.primer {
        Some(text) => parse_progression(text).context("invalid --primer")?,
        None => Vec::new(),
    };
    let regressor = a.regressor.as_deref().map(load_regressor).transpose()?;
    let expressive = match &regressor {
        Some(r) => ExpressiveSource::Regressor(r),
        None => ExpressiveSource::GroundTruth,
    };
    let song = compose(&model, &video, a.key, &primer, &cfg.generation, expressive, cfg.t_max)?;
    let chords_path = a.chords_out.clone().unwrap_or_else(|| out.with_extension("chords.txt"));
    write_file(out, &song.midi)?;
    write_file(&chords_path, song.chord_text())?;
    let line: Vec<String> = song.chords.iter().map(ToString::to_string).collect();
    println!("{}", line.join(" "));
    println!("midi: {} ({} notes)", out.display(), song.notes.len());
    println!("chords: {}", chords_path.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let data = load_dataset(cfg)?;
    let out = cfg.out_path()?;
    let ck = Checkpoint::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (model, _) = load_model_checkpoint(&ck)?;
    let split = split_dataset(&data.ids(), &cfg.split_spec());
    let ids = match a.split {
        SplitName::Train => split.train,
        SplitName::Val => split.val,
        SplitName::Test => split.test,
        SplitName::All => data.ids(),
    };
    if ids.is_empty() {
        bail!("the {:?} split of {} records is empty", a.split, data.len());
    }
    let report = evaluate_model(&model, &records(&data, &ids), cfg.t_max, &cfg.generation)?;
    let summary = report.summary();
    print!("{summary}");
    create_dir(out)?;
    write_file(&out.join("report.txt"), &summary)?;
    report.write_confusion(out)?;
    println!("confusion matrices: {}", out.display());
    Ok(())
}

fn read_chords(path: &Path) -> Result<Vec<ChordEvent>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let chords = text
        .split_whitespace()
        .map(parse_compact_chord)
        .collect::<v2m_core::Result<Vec<_>>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if chords.is_empty() {
        bail!("{} holds no chords", path.display());
    }
    Ok(chords)
}

pub fn render(cfg: &RunConfig, a: &RenderArgs) -> Result<()> {
    let out = cfg.out_path()?;
    let chords = read_chords(&a.chords)?;
    let n = chords.len();
    let (density, loudness) = match &a.features {
        Some(path) => {
            let video = VideoFeatures::load(path).with_context(|| format!("loading {}", path.display()))?;
            if video.length_s < n {
                bail!(
                    "{} covers {} seconds but there are {n} chords",
                    path.display(),
                    video.length_s
                );
            }
            match &a.regressor {
                Some(rp) => {
                    let p = load_regressor(rp)?.predict(&video.matrix(n))?;
                    (p.note_density, p.loudness)
                }
                None => {
                    let missing = || format!("{} has no note_density/loudness", path.display());
                    let d = video.note_density.as_ref().with_context(missing)?;
                    let l = video.loudness.as_ref().with_context(missing)?;
                    (d[..n].iter().map(|&v| v as f64).collect(), l[..n].to_vec())
                }
            }
        }
        None => {
            if !a.density.is_finite() || a.density < 0.0 || !(0.0..=1.0).contains(&a.loudness) {
                bail!("--density must be >= 0 and --loudness within [0, 1]");
            }
            (vec![a.density; n], vec![a.loudness; n])
        }
    };
    let song = render_song(chords, density, loudness)?;
    write_file(out, &song.midi)?;
    println!("midi: {} ({} notes)", out.display(), song.notes.len());
    Ok(())
}
