//! Command-line surface. Every command reads one [`RunConfig`], writes under
//! `--out-dir`, and drops the resolved config next to its outputs:
//!
//! ```text
//! <out>/simulate/  report.json report.md moments.svg
//! <out>/data/      manifest.jsonl wav/
//! <out>/train/     loss_log.csv ckpt_*.ckpt model.ckpt state.bin summary.json
//! <out>/bank/      bank.json
//! <out>/convert/   results.jsonl <id>__source.mel <id>__t<a>.{mel,wav}
//! <out>/eval/      metrics.json metrics.md classwise_{target,source}.csv diagnostics_<id>.svg
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{
    load_manifest, load_mel, make_toy_dataset, mel_extract, mel_invert, normalize_peak, read_wav, write_wav,
    UtteranceRecord,
};
use crate::config::{ContourSource, RunConfig};
use crate::encoders::{
    stable_seed, ArousalLabel, CachedEmotionEncoder, CachedSpeakerEncoder, CentroidEmotionEncoder, EmbeddingCache,
    Encoders, HashedSpeakerEncoder, WindowAverageEncoder,
};
use crate::error::{Error, Result};
use crate::eval::{
    centroid_pitch_proxy, classwise_errors, contour_stats, diagnostics_plot, moments_plot, pitch_contour,
    quality_metric, spearman, BinStats, ConversionEvalRow, EvalReport, GroupBy, QualityCell, QualityScorer,
    RecordedScores,
};
use crate::inference::{build_bank, convert, ConversionMetadata, EmbeddingBank};
use crate::mel::MelSpectrogram;
use crate::optim::AdamConfig;
use crate::score_model::ScoreModel;
use crate::sde::forward_moment_check;
use crate::training::{prepare_samples, read_loss_log, train, LambdaMode, TrainPaths, TrainState};

#[derive(Debug, Parser)]
#[command(name = "emoshift", version, about = "Arousal-conditioned speech emotion conversion")]
pub struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; stages without a pinned seed derive theirs from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,
    /// Single-threaded everywhere and no wall-clock fields in outputs.
    #[arg(long, global = true)]
    pub strict_determinism: bool,
    /// Dotted-key override, e.g. `--set training.n_steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward-SDE simulation checked against the closed-form kernel.
    Simulate,
    /// Writes the synthetic corpus to `<out>/data`.
    Maketoy,
    /// Trains the score model.
    Train {
        /// Shorthand for `--set training.lambda_mode=...` (none, on_xt, on_x0).
        #[arg(long)]
        lambda_mode: Option<LambdaMode>,
        /// Continue from `<out>/train/state.bin`.
        #[arg(long)]
        resume: bool,
    },
    /// Builds the per-bin emotion embedding bank.
    Bank,
    /// Converts one source (with `--source` and `--target-arousal`) or the
    /// configured split across all configured targets.
    Convert {
        /// Utterance id from the manifest, or a `.wav` / `.mel` file.
        #[arg(long, requires = "target_arousal")]
        source: Option<String>,
        #[arg(long, requires = "source")]
        target_arousal: Option<f64>,
        /// Output directory; defaults to `<out>/convert`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics, per-bin tables and diagnostics plots for a conversion run.
    Evaluate {
        /// Directory holding `results.jsonl`; defaults to `<out>/convert`.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

/// Resolved configuration plus where to put things.
pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub out_dir: PathBuf,
    pub strict: bool,
}

impl Run {
    pub fn new(config: RunConfig, out_dir: PathBuf, strict: bool) -> Self {
        let config = config.resolved();
        let hash = config.hash();
        Self {
            config,
            hash,
            out_dir,
            strict,
        }
    }

    /// Creates `<out>/<name>` and writes the resolved config into it.
    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        self.prepare_dir(self.out_dir.join(name))
    }

    fn prepare_dir(&self, dir: PathBuf) -> Result<PathBuf> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_text(&dir.join("config.toml"), &self.config.to_toml())?;
        Ok(dir)
    }

    fn manifest_path(&self) -> PathBuf {
        self.config
            .data
            .manifest
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data").join("manifest.jsonl"))
    }

    fn model_path(&self) -> PathBuf {
        TrainPaths::new(self.out_dir.join("train")).final_model()
    }

    fn bank_path(&self) -> PathBuf {
        self.out_dir.join("bank").join("bank.json")
    }

    fn records(&self) -> Result<(Vec<UtteranceRecord>, PathBuf)> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::contract(format!(
                "manifest {} not found (run `maketoy` or set data.manifest)",
                path.display()
            )));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((load_manifest(&path)?, root))
    }

    pub fn encoders(&self) -> Result<Encoders> {
        let c = &self.config.encoders;
        let phoneme = Box::new(WindowAverageEncoder {
            window: c.phoneme_window,
        });
        Ok(match &c.cache {
            Some(path) => {
                let cache = Arc::new(EmbeddingCache::read_file(path, c.speaker_dim, c.emotion_dim)?);
                Encoders {
                    phoneme,
                    speaker: Box::new(CachedSpeakerEncoder(cache.clone())),
                    emotion: Box::new(CachedEmotionEncoder(cache)),
                }
            }
            None => Encoders {
                phoneme,
                speaker: Box::new(HashedSpeakerEncoder { dim: c.speaker_dim }),
                emotion: Box::new(CentroidEmotionEncoder {
                    dim: c.emotion_dim,
                    proxy: self.config.toy.proxy,
                }),
            },
        })
    }

    fn load_model(&self) -> Result<ScoreModel> {
        let path = self.model_path();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let model = ScoreModel::from_bytes(&bytes)?;
        if model.config().n_mels != self.config.mel.n_mels {
            return Err(Error::Config(format!(
                "checkpoint {} has {} mel bands but the config has {}",
                path.display(),
                model.config().n_mels,
                self.config.mel.n_mels
            )));
        }
        Ok(model)
    }
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seeds.master={seed}"));
    }
    if let Command::Train {
        lambda_mode: Some(m), ..
    } = &cli.command
    {
        overrides.push(format!("training.lambda_mode=\"{m}\""));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let run = Run::new(config, cli.out_dir.clone(), cli.strict_determinism);
    match cli.command {
        Command::Simulate => {
            cmd_simulate(&run)?;
            echo(&run.out_dir.join("simulate").join("report.md"))
        }
        Command::Maketoy => cmd_maketoy(&run).map(|_| ()),
        Command::Train { resume, .. } => cmd_train(&run, resume).map(|_| ()),
        Command::Bank => cmd_bank(&run).map(|_| ()),
        Command::Convert {
            source,
            target_arousal,
            out,
        } => {
            let single = source.zip(target_arousal);
            cmd_convert(&run, single.as_ref().map(|(s, a)| (s.as_str(), *a)), out).map(|_| ())
        }
        Command::Evaluate { results } => {
            cmd_evaluate(&run, results)?;
            echo(&run.out_dir.join("eval").join("metrics.md"))
        }
    }
}

fn echo(report: &Path) -> Result<()> {
    print!("{}", fs::read_to_string(report).map_err(|e| Error::io(report, e))?);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateReport {
    pub config_hash: String,
    pub checks: Vec<SimulateRow>,
    pub all_within_3_se: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateRow {
    #[serde(flatten)]
    pub check: crate::sde::MomentCheck,
    pub z: f64,
}

pub fn cmd_simulate(run: &Run) -> Result<SimulateReport> {
    let c = &run.config.simulate;
    let dir = run.stage_dir("simulate")?;
    let seed = stable_seed(&[b"simulate", &run.config.seeds.master.to_le_bytes()]);
    let (checks, track) = forward_moment_check(c.x0, c.y, &run.config.schedule, c.n_paths, c.n_steps, &c.times, seed)?;
    let rows: Vec<SimulateRow> = checks.into_iter().map(|check| SimulateRow { z: check.z(), check }).collect();
    let report = SimulateReport {
        config_hash: run.hash.clone(),
        all_within_3_se: rows.iter().all(|r| r.z <= 3.0),
        checks: rows,
    };
    let mut md = String::from("| t | kernel mean | sim mean | kernel var | sim var | max z |\n|---|---|---|---|---|---|\n");
    for r in &report.checks {
        let k = &r.check;
        writeln!(
            md,
            "| {:.3} | {:.5} | {:.5} | {:.5} | {:.5} | {:.2} |",
            k.t, k.kernel_mean, k.sim_mean, k.kernel_var, k.sim_var, r.z
        )
        .unwrap();
    }
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("report.md"), &md)?;
    moments_plot(&track, &run.config.schedule, c.x0, c.y, &dir.join("moments.svg"))?;
    Ok(report)
}

pub fn cmd_maketoy(run: &Run) -> Result<PathBuf> {
    let dir = run.stage_dir("data")?;
    let ds = make_toy_dataset(
        run.config.data.toy_utterances,
        run.config.seeds.toy(),
        &dir,
        &run.config.toy,
        &run.config.mel,
    )?;
    log::info!("wrote {} utterances to {}", ds.records.len(), ds.manifest_path.display());
    Ok(ds.manifest_path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub lambda_mode: LambdaMode,
    pub steps: u64,
    pub samples: usize,
    pub skipped: Vec<String>,
    /// Mean losses over the last 100 logged steps.
    pub tail_score_loss: f64,
    pub tail_mel_loss: f64,
    pub tail_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

pub fn cmd_train(run: &Run, resume: bool) -> Result<TrainSummary> {
    let cfg = &run.config;
    let (records, root) = run.records()?;
    let chosen: Vec<UtteranceRecord> = records
        .into_iter()
        .filter(|r| cfg.data.train_splits.contains(&r.split))
        .collect();
    if chosen.is_empty() {
        return Err(Error::contract("no manifest records in the training splits"));
    }
    let encoders = run.encoders()?;
    let (samples, bad) = prepare_samples(&chosen, &root, &encoders, &cfg.mel)?;
    let dir = run.stage_dir("train")?;
    let paths = TrainPaths::new(&dir);
    let mut state = if resume && paths.state().exists() {
        let bytes = fs::read(paths.state()).map_err(|e| Error::io(paths.state(), e))?;
        let s = TrainState::from_bytes(&bytes, cfg.training.adam)?;
        log::info!("resuming at step {}", s.step);
        s
    } else {
        let model = ScoreModel::init(cfg.model.clone(), cfg.schedule, cfg.seeds.init())?;
        TrainState::new(model, AdamConfig { ..cfg.training.adam })
    };
    let started = Instant::now();
    train(&mut state, &samples, &cfg.training, Some(&paths))?;
    let log = read_loss_log(&paths.log())?;
    let tail = &log[log.len().saturating_sub(100)..];
    let mean = |f: fn(&crate::training::StepReport) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
    let summary = TrainSummary {
        config_hash: run.hash.clone(),
        lambda_mode: cfg.training.lambda_mode,
        steps: state.step,
        samples: samples.len(),
        skipped: bad.into_iter().map(|(id, _)| id).collect(),
        tail_score_loss: mean(|r| r.score_loss),
        tail_mel_loss: mean(|r| r.mel_loss),
        tail_total: mean(|r| r.total),
        seconds: (!run.strict).then(|| started.elapsed().as_secs_f64()),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_bank(run: &Run) -> Result<EmbeddingBank> {
    let cfg = &run.config;
    let (records, root) = run.records()?;
    let refs: Vec<UtteranceRecord> = records
        .into_iter()
        .filter(|r| cfg.data.bank_splits.contains(&r.split))
        .collect();
    let encoders = run.encoders()?;
    let bank = build_bank(&refs, &root, &cfg.mel, encoders.emotion.as_ref(), cfg.inference.bank_p)?;
    let dir = run.stage_dir("bank")?;
    bank.write_file(&dir.join("bank.json"))?;
    for b in 1..=7u8 {
        match bank.entries.get(&b) {
            Some(e) => log::info!("bin {b}: {} of {} selected", e.selected.len(), e.support),
            None => log::warn!("bin {b} is empty"),
        }
    }
    Ok(bank)
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub output_id: String,
    pub utterance_id: String,
    /// Label of the source; for files outside the manifest, the SER estimate.
    pub source_arousal: ArousalLabel,
    pub target_arousal: ArousalLabel,
    /// SER estimate on the output; absent when the encoder cannot score new audio.
    pub predicted_arousal: Option<ArousalLabel>,
    /// Paths relative to the results directory.
    pub source_mel: String,
    pub mel: String,
    pub wav: Option<String>,
    pub metadata: ConversionMetadata,
    pub config_hash: String,
}

/// Unit of conversion work.
struct Job {
    record: UtteranceRecord,
    mel: MelSpectrogram,
    target: ArousalLabel,
}

pub fn cmd_convert(run: &Run, single: Option<(&str, f64)>, out: Option<PathBuf>) -> Result<Vec<ResultRow>> {
    let cfg = &run.config;
    // Validate the request before anything touches the disk.
    let single = single
        .map(|(s, a)| {
            ArousalLabel::new(a)
                .map_err(|_| Error::ArousalRange {
                    value: a,
                    context: Some("--target-arousal".into()),
                })
                .map(|l| (s, l))
        })
        .transpose()?;
    let encoders = run.encoders()?;
    let model = run.load_model()?;
    let bank = EmbeddingBank::read_file(&run.bank_path())?;

    let mut jobs = Vec::new();
    match single {
        Some((source, target)) => {
            let (record, mel) = resolve_source(run, &encoders, source)?;
            jobs.push(Job { record, mel, target });
        }
        None => {
            let (records, root) = run.records()?;
            for r in records.into_iter().filter(|r| cfg.data.convert_splits.contains(&r.split)) {
                let mel = load_mel(&root, &r, &cfg.mel)?;
                for &t in &cfg.inference.targets {
                    jobs.push(Job {
                        record: r.clone(),
                        mel: mel.clone(),
                        target: ArousalLabel::new(t)?,
                    });
                }
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::contract("nothing to convert: no records in the conversion splits"));
    }

    let dir = run.prepare_dir(out.unwrap_or_else(|| run.out_dir.join("convert")))?;
    let workers = if run.strict {
        1
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    };
    let one = |job: &Job| -> Result<ResultRow> { convert_one(run, &encoders, &model, &bank, &dir, job) };
    let rows: Vec<ResultRow> = if workers <= 1 {
        jobs.iter().map(one).collect::<Result<_>>()?
    } else {
        // Each job is seeded on its own, so the split does not change results.
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("conversion worker panicked"))
                .collect::<Result<Vec<Vec<_>>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    let mut sources = BTreeMap::new();
    for job in &jobs {
        sources.entry(job.record.utterance_id.clone()).or_insert(&job.mel);
    }
    for (id, mel) in sources {
        mel.write_file(&dir.join(format!("{id}__source.mel")))?;
    }
    let mut text = String::new();
    for r in &rows {
        writeln!(text, "{}", serde_json::to_string(r)?).unwrap();
    }
    write_text(&dir.join("results.jsonl"), &text)?;
    Ok(rows)
}

fn resolve_source(run: &Run, encoders: &Encoders, source: &str) -> Result<(UtteranceRecord, MelSpectrogram)> {
    let path = Path::new(source);
    if path.is_file() {
        let mel = match path.extension().and_then(|e| e.to_str()) {
            Some("mel") => MelSpectrogram::read_file(path)?,
            _ => {
                let (wave, sr) = read_wav(path)?;
                if sr != run.config.mel.sample_rate {
                    return Err(Error::Config(format!(
                        "{} is {sr} Hz but mel.sample_rate is {}",
                        path.display(),
                        run.config.mel.sample_rate
                    )));
                }
                mel_extract(&wave, &run.config.mel)?
            }
        };
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("source").to_string();
        let arousal = encoders.emotion.predict_arousal(&id, &mel)?;
        let record = UtteranceRecord {
            utterance_id: id.clone(),
            audio_path: source.to_string(),
            speaker_id: id,
            arousal,
            split: crate::audio::Split::Test,
        };
        return Ok((record, mel));
    }
    let (records, root) = run.records()?;
    let record = records
        .into_iter()
        .find(|r| r.utterance_id == source)
        .ok_or_else(|| Error::contract(format!("`{source}` is neither a file nor a manifest utterance id")))?;
    let mel = load_mel(&root, &record, &run.config.mel)?;
    Ok((record, mel))
}

fn convert_one(
    run: &Run,
    encoders: &Encoders,
    model: &ScoreModel,
    bank: &EmbeddingBank,
    dir: &Path,
    job: &Job,
) -> Result<ResultRow> {
    let cfg = &run.config;
    let id = &job.record.utterance_id;
    let seed = stable_seed(&[
        b"convert",
        &cfg.seeds.convert().to_le_bytes(),
        id.as_bytes(),
        &job.target.value().to_le_bytes(),
    ]) >> 1;
    let result = convert(&job.record, &job.mel, job.target, bank, encoders, model, &cfg.inference.solver, seed)?;
    let output_id = format!("{id}__t{:.2}", job.target.value());
    let mel_name = format!("{output_id}.mel");
    result.mel_out.write_file(&dir.join(&mel_name))?;
    let wav = if cfg.inference.write_audio {
        let name = format!("{output_id}.wav");
        let mut wave = mel_invert(&result.mel_out, &cfg.mel)?;
        normalize_peak(&mut wave, 0.5);
        write_wav(&dir.join(&name), &wave, cfg.mel.sample_rate)?;
        Some(name)
    } else {
        None
    };
    Ok(ResultRow {
        predicted_arousal: encoders.emotion.predict_arousal(&output_id, &result.mel_out).ok(),
        output_id,
        utterance_id: id.clone(),
        source_arousal: job.record.arousal,
        target_arousal: job.target,
        source_mel: format!("{id}__source.mel"),
        mel: mel_name,
        wav,
        metadata: result.metadata,
        config_hash: run.hash.clone(),
    })
}

pub fn read_results(dir: &Path) -> Result<Vec<ResultRow>> {
    let path = dir.join("results.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub results_config_hash: Vec<String>,
    #[serde(flatten)]
    pub report: EvalReport,
    /// Spearman of target against prediction within each source, averaged.
    pub spearman_per_source: Option<f64>,
    /// Spearman over all rows pooled.
    pub spearman_pooled: Option<f64>,
    /// Mean contour level and spread per target, averaged over sources.
    pub contour_by_target: Vec<ContourRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourRow {
    pub target: f64,
    pub mean_hz: f64,
    pub sd_hz: f64,
}

pub fn cmd_evaluate(run: &Run, results: Option<PathBuf>) -> Result<EvalSummary> {
    let cfg = &run.config;
    let results_dir = results.unwrap_or_else(|| run.out_dir.join("convert"));
    let rows = read_results(&results_dir)?;
    if rows.is_empty() {
        return Err(Error::contract(format!("{} holds no results", results_dir.display())));
    }
    let overrides: BTreeMap<String, f64> = match &cfg.eval.predictions {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    let mut eval_rows = Vec::with_capacity(rows.len());
    let mut missing = Vec::new();
    for r in &rows {
        let pred = match overrides.get(&r.output_id) {
            Some(&a) => Some(ArousalLabel::new(a)?),
            None => r.predicted_arousal,
        };
        match pred {
            Some(p) => eval_rows.push(ConversionEvalRow {
                utterance_id: r.utterance_id.clone(),
                source_arousal: r.source_arousal,
                target_arousal: r.target_arousal,
                predicted_arousal: p,
            }),
            None => missing.push(r.output_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "no arousal prediction for {} outputs (first: {}); supply eval.predictions",
            missing.len(),
            missing[0]
        )));
    }

    let scorer: Option<RecordedScores> = cfg.eval.quality_scores.as_deref().map(RecordedScores::read_file).transpose()?;
    let quality = aggregate_quality(scorer.as_ref().map(|s| s as &dyn QualityScorer), &rows, &results_dir);
    let report = EvalReport::new(&eval_rows, quality)?;

    let mut by_source: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &eval_rows {
        by_source
            .entry(&r.utterance_id)
            .or_default()
            .push((r.target_arousal.value(), r.predicted_arousal.value()));
    }
    let per_source: Vec<f64> = by_source
        .values()
        .filter_map(|v| {
            let (t, p): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
            spearman(&t, &p)
        })
        .collect();
    let (t, p): (Vec<f64>, Vec<f64>) = eval_rows
        .iter()
        .map(|r| (r.target_arousal.value(), r.predicted_arousal.value()))
        .unzip();

    let dir = run.stage_dir("eval")?;
    let contour = |r: &ResultRow| -> Result<Vec<Option<f64>>> {
        match cfg.eval.contour {
            ContourSource::CentroidProxy => {
                let mel = MelSpectrogram::read_file(&results_dir.join(&r.mel))?;
                Ok(centroid_pitch_proxy(&mel, cfg.eval.proxy_hz.0, cfg.eval.proxy_hz.1))
            }
            ContourSource::Autocorrelation => {
                let name = r.wav.as_ref().ok_or_else(|| {
                    Error::Config("eval.contour = autocorrelation needs inference.write_audio".into())
                })?;
                let (wave, sr) = read_wav(&results_dir.join(name))?;
                pitch_contour(&wave, sr, &cfg.eval.pitch)
            }
        }
    };
    let mut per_target: BTreeMap<u64, (f64, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in &rows {
        if let Some((m, s)) = contour_stats(&contour(r)?) {
            per_target
                .entry(r.target_arousal.value().to_bits())
                .or_insert((r.target_arousal.value(), Vec::new()))
                .1
                .push((m, s));
        }
    }
    let mut contour_by_target: Vec<ContourRow> = per_target
        .into_values()
        .map(|(target, v)| ContourRow {
            target,
            mean_hz: v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64,
            sd_hz: v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64,
        })
        .collect();
    contour_by_target.sort_by(|a, b| a.target.total_cmp(&b.target));

    for (id, _) in by_source.iter().take(cfg.eval.plots) {
        let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.utterance_id == *id).collect();
        let source = MelSpectrogram::read_file(&results_dir.join(&mine[0].source_mel))?;
        let mut converted = Vec::new();
        let mut contours = vec![(
            "source".to_string(),
            match cfg.eval.contour {
                ContourSource::CentroidProxy => centroid_pitch_proxy(&source, cfg.eval.proxy_hz.0, cfg.eval.proxy_hz.1),
                ContourSource::Autocorrelation => Vec::new(),
            },
        )];
        for r in mine {
            let label = format!("target {:.1}", r.target_arousal.value());
            converted.push((label.clone(), MelSpectrogram::read_file(&results_dir.join(&r.mel))?));
            contours.push((label, contour(r)?));
        }
        diagnostics_plot(&source, &converted, &contours, &dir.join(format!("diagnostics_{id}.svg")))?;
    }

    let mut hashes: Vec<String> = rows.iter().map(|r| r.config_hash.clone()).collect();
    hashes.sort();
    hashes.dedup();
    let summary = EvalSummary {
        config_hash: run.hash.clone(),
        results_config_hash: hashes,
        report,
        spearman_per_source: (!per_source.is_empty()).then(|| per_source.iter().sum::<f64>() / per_source.len() as f64),
        spearman_pooled: spearman(&t, &p),
        contour_by_target,
    };
    write_json(&dir.join("metrics.json"), &summary)?;
    let mut md = summary.report.to_markdown();
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    writeln!(
        md,
        "\nSpearman (target vs prediction): per source {}, pooled {}",
        fmt(summary.spearman_per_source),
        fmt(summary.spearman_pooled)
    )
    .unwrap();
    md.push_str("\n| target | contour mean (Hz) | contour sd (Hz) |\n|---|---|---|\n");
    for c in &summary.contour_by_target {
        writeln!(md, "| {:.2} | {:.2} | {:.2} |", c.target, c.mean_hz, c.sd_hz).unwrap();
    }
    write_text(&dir.join("metrics.md"), &md)?;
    write_text(&dir.join("classwise_target.csv"), &bins_csv(&classwise_errors(&eval_rows, GroupBy::Target)))?;
    write_text(&dir.join("classwise_source.csv"), &bins_csv(&classwise_errors(&eval_rows, GroupBy::Source)))?;
    Ok(summary)
}

fn aggregate_quality(scorer: Option<&dyn QualityScorer>, rows: &[ResultRow], dir: &Path) -> QualityCell {
    if scorer.is_none() {
        return QualityCell::NotConfigured;
    }
    let mut scored = Vec::new();
    for r in rows {
        let (audio, sr) = r
            .wav
            .as_ref()
            .and_then(|w| read_wav(&dir.join(w)).ok())
            .unwrap_or_default();
        if let QualityCell::Scored { sig, ovrl } = quality_metric(scorer, &r.output_id, &audio, sr) {
            scored.push((sig, ovrl));
        }
    }
    if scored.len() < rows.len() {
        return QualityCell::Unavailable {
            reason: format!("{} of {} outputs unscored", rows.len() - scored.len(), rows.len()),
        };
    }
    let n = scored.len() as f64;
    QualityCell::Scored {
        sig: scored.iter().map(|s| s.0).sum::<f64>() / n,
        ovrl: scored.iter().map(|s| s.1).sum::<f64>() / n,
    }
}

fn bins_csv(bins: &[BinStats]) -> String {
    let mut s = String::from("bin,count,mean,sd,empty\n");
    for b in bins {
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        writeln!(s, "{},{},{},{},{}", b.bin, b.count, f(b.mean), f(b.sd), b.is_empty()).unwrap();
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}
