//! Score-matching objective with the optional mel reconstruction term, and
//! the optimisation loop.
//!
//! Each sample in a batch is run through its own graph at its own length, so
//! variable-length utterances need no padding. The loss gradient with respect
//! to the score output is formed analytically and pushed through the network
//! with one backward pass per sample.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_mel, MelConfig, UtteranceRecord};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::mel::check_shape;
use crate::optim::{Adam, AdamConfig};
use crate::score_model::{ConditioningBundle, ScoreModel};
use crate::sde::{standard_normal, DEFAULT_ALPHA_FLOOR};

/// Which reconstruction term accompanies the score loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Score matching only.
    None,
    /// `λ_t · |X_t − X0|₁`, which carries no parameter dependence.
    OnXt,
    /// `λ_t · |X̂0 − X0|₁` with `X̂0` the one-step estimate from the score.
    OnX0,
}

impl LambdaMode {
    pub const ALL: [LambdaMode; 3] = [LambdaMode::None, LambdaMode::OnXt, LambdaMode::OnX0];

    pub fn name(self) -> &'static str {
        match self {
            LambdaMode::None => "none",
            LambdaMode::OnXt => "on_xt",
            LambdaMode::OnX0 => "on_x0",
        }
    }
}

impl std::fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LambdaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown lambda mode `{s}` (none, on_xt, on_x0)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_steps: u64,
    pub learning_rate: f64,
    pub lambda_mode: LambdaMode,
    /// Set from the run's seed table rather than from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub alpha_floor: f64,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate down to `learning_rate · lr_final_fraction`
    /// at `n_steps`; `1.0` keeps it constant.
    pub lr_final_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            n_steps: 2000,
            learning_rate: 1e-4,
            lambda_mode: LambdaMode::OnX0,
            seed: 0,
            checkpoint_every: 0,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
            adam: AdamConfig::default(),
            lr_final_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("training needs n_steps ≥ 1 and batch_size ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::Config("lr_final_fraction must lie in [0, 1]".into()));
        }
        if !(self.alpha_floor > 0.0 && self.alpha_floor < 1.0) {
            return Err(Error::Config("alpha floor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Learning rate used for the update that follows `step` completed steps.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let progress = (step as f64 / self.n_steps as f64).min(1.0);
        let f = self.lr_final_fraction;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// `‖s + ε/σ‖²` summed over entries.
pub fn score_loss(
    s_pred: &Array2<f64>,
    epsilon: &Array2<f64>,
    t: f64,
    schedule: &crate::sde::NoiseSchedule,
) -> Result<f64> {
    check_shape(s_pred, epsilon, "noise")?;
    let sigma = schedule.sigma(t)?;
    if sigma <= 0.0 {
        return Err(Error::DegenerateVariance { t });
    }
    Ok(Zip::from(s_pred)
        .and(epsilon)
        .fold(0.0, |acc, &s, &e| acc + (s + e / sigma).powi(2)))
}

/// Entrywise L1 distance.
pub fn mel_loss(x0_hat: &Array2<f64>, x0: &Array2<f64>) -> Result<f64> {
    check_shape(x0_hat, x0, "reference mel")?;
    Ok(Zip::from(x0_hat).and(x0).fold(0.0, |acc, &a, &b| acc + (a - b).abs()))
}

/// `λ_t = 1 − t²`.
pub fn lambda_weight(t: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&t) {
        Ok(1.0 - t * t)
    } else {
        Err(Error::Domain { t })
    }
}

/// Everything the loss needs for one utterance, computed once up front.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub x0: Array2<f64>,
    pub y: Array2<f64>,
    pub speaker: Vec<f64>,
    pub emotion: Vec<f64>,
}

impl TrainingSample {
    pub fn conditioning(&self, t: f64) -> ConditioningBundle {
        ConditioningBundle {
            y: self.y.clone(),
            speaker: self.speaker.clone(),
            emotion: self.emotion.clone(),
            t,
        }
    }
}

/// Loads and encodes records. Records that fail are returned alongside the
/// good ones and logged; it is an error only when none succeed.
pub fn prepare_samples(
    records: &[UtteranceRecord],
    root: &Path,
    encoders: &Encoders,
    mel: &MelConfig,
) -> Result<(Vec<TrainingSample>, Vec<(String, Error)>)> {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for r in records {
        let prepared = (|| -> Result<TrainingSample> {
            let x0 = load_mel(root, r, mel)?;
            let y = encoders.phoneme.encode(&x0)?;
            let speaker = encoders.speaker.encode(r)?;
            let emotion = encoders.emotion.embed(&r.utterance_id, &x0)?;
            Ok(TrainingSample {
                id: r.utterance_id.clone(),
                x0: x0.into_values(),
                y: y.into_values(),
                speaker: speaker.into_vec(),
                emotion: emotion.into_vec(),
            })
        })();
        match prepared {
            Ok(s) => good.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.utterance_id);
                bad.push((r.utterance_id.clone(), e));
            }
        }
    }
    if good.is_empty() {
        return Err(Error::contract(format!(
            "no usable training utterances ({} failed)",
            bad.len()
        )));
    }
    Ok((good, bad))
}

/// Loss terms for one sample at one `(t, ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleLoss {
    pub score: f64,
    /// Already multiplied by `λ_t`.
    pub mel: f64,
    pub mel_skipped: bool,
}

impl SampleLoss {
    pub fn total(&self) -> f64 {
        self.score + self.mel
    }
}

/// Evaluates the objective for one sample. When `grads` is given, adds
/// `weight · ∂loss/∂θ` into it.
pub fn sample_loss(
    model: &ScoreModel,
    sample: &TrainingSample,
    t: f64,
    epsilon: &Array2<f64>,
    mode: LambdaMode,
    alpha_floor: f64,
    grads: Option<(&mut [Vec<f64>], f64)>,
) -> Result<SampleLoss> {
    let schedule = model.schedule();
    check_shape(&sample.x0, epsilon, "noise")?;
    let alpha = schedule.alpha(t)?;
    let var = schedule.variance(t)?;
    let sigma = var.sqrt();
    if sigma <= 0.0 {
        return Err(Error::DegenerateVariance { t });
    }
    let x_t = Zip::from(&sample.x0)
        .and(&sample.y)
        .and(epsilon)
        .map_collect(|&x0, &y, &e| alpha * x0 + (1.0 - alpha) * y + sigma * e);
    let (graph, out) = model.forward(&x_t, &sample.conditioning(t))?;
    let s = &graph.value(out).data;

    let mut seed: Vec<f64> = s
        .iter()
        .zip(epsilon.iter())
        .map(|(&s, &e)| 2.0 * (s + e / sigma))
        .collect();
    let score = s.iter().zip(epsilon.iter()).map(|(&s, &e)| (s + e / sigma).powi(2)).sum();

    let lambda = lambda_weight(t)?;
    let (mel, mel_skipped) = match mode {
        LambdaMode::None => (0.0, false),
        LambdaMode::OnXt => (lambda * mel_loss(&x_t, &sample.x0)?, false),
        LambdaMode::OnX0 if alpha < alpha_floor => (0.0, true),
        LambdaMode::OnX0 => {
            let mut l1 = 0.0;
            for (i, ((&sv, (&xt, &y)), &x0)) in s
                .iter()
                .zip(x_t.iter().zip(sample.y.iter()))
                .zip(sample.x0.iter())
                .enumerate()
            {
                let d = (xt + var * sv - (1.0 - alpha) * y) / alpha - x0;
                l1 += d.abs();
                seed[i] += lambda * d.signum() * var / alpha;
            }
            (lambda * l1, false)
        }
    };
    if let Some((grads, weight)) = grads {
        seed.iter_mut().for_each(|g| *g *= weight);
        graph.backward(out, &seed, grads);
    }
    Ok(SampleLoss {
        score,
        mel,
        mel_skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub score_loss: f64,
    pub mel_loss: f64,
    pub total: f64,
    pub mel_skipped: usize,
}

/// Model, optimiser moments and step counter: everything needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ScoreModel,
    pub adam: Adam,
    pub step: u64,
}

const STATE_MAGIC: &[u8; 8] = b"ESTRAIN1";

impl TrainState {
    pub fn new(model: ScoreModel, adam: AdamConfig) -> Self {
        let adam = Adam::new(adam, model.params());
        Self { model, adam, step: 0 }
    }

    /// Layout: magic, u64 step, u64 Adam step, u64 model byte count, model
    /// checkpoint bytes, then first and second moments as f64 LE in
    /// parameter order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let model = self.model.to_bytes();
        let mut b = Vec::with_capacity(model.len() * 3 + 32);
        b.extend_from_slice(STATE_MAGIC);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        b.extend_from_slice(&(model.len() as u64).to_le_bytes());
        b.extend_from_slice(&model);
        for v in self.adam.m.iter().chain(&self.adam.v).flatten() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], adam: AdamConfig) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("train state: {m}"));
        if bytes.len() < 32 || &bytes[..8] != STATE_MAGIC {
            return Err(bad("missing magic"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let (step, adam_step, model_len) = (word(0), word(1), word(2) as usize);
        let model_end = 32usize.checked_add(model_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
        let model = ScoreModel::from_bytes(&bytes[32..model_end])?;
        let sizes: Vec<usize> = model.params().params.iter().map(|p| p.data.len()).collect();
        let total: usize = sizes.iter().sum();
        let rest = &bytes[model_end..];
        if rest.len() != total * 16 {
            return Err(bad("optimiser moments do not match the model"));
        }
        let mut floats = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = || -> Vec<Vec<f64>> { sizes.iter().map(|&n| floats.by_ref().take(n).collect()).collect() };
        let m = take();
        let v = take();
        Ok(Self {
            model,
            adam: Adam {
                config: adam,
                step: adam_step,
                m,
                v,
            },
            step,
        })
    }
}

/// Deterministic epoch-wise shuffling: sample `k` of the stream is drawn
/// from the permutation of epoch `k / n`.
#[derive(Debug, Clone)]
struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl BatchOrder {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn index(&mut self, k: u64) -> usize {
        let epoch = k / self.n as u64;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_ba7c_u64);
            rng.set_stream(epoch);
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.perm[(k % self.n as u64) as usize]
    }

    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        (0..size as u64).map(|j| self.index(step * size as u64 + j)).collect()
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// One optimiser update on the given batch; noise levels and noise are
/// drawn from a generator keyed by `(cfg.seed, state.step)`.
pub fn training_step(state: &mut TrainState, batch: &[&TrainingSample], cfg: &TrainConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let schedule = *state.model.schedule();
    let mut rng = step_rng(cfg.seed, state.step);
    let mut grads = state.model.params().zero_grads();
    let weight = 1.0 / batch.len() as f64;
    let mut report = StepReport {
        step: state.step + 1,
        score_loss: 0.0,
        mel_loss: 0.0,
        total: 0.0,
        mel_skipped: 0,
    };
    for sample in batch {
        let t = rng.gen_range(schedule.t_min..=schedule.t_max);
        let eps = standard_normal(&mut rng, sample.x0.dim());
        let l = sample_loss(
            &state.model,
            sample,
            t,
            &eps,
            cfg.lambda_mode,
            cfg.alpha_floor,
            Some((&mut grads, weight)),
        )?;
        report.score_loss += weight * l.score;
        report.mel_loss += weight * l.mel;
        report.mel_skipped += l.mel_skipped as usize;
    }
    report.total = report.score_loss + report.mel_loss;
    if !report.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.step as usize,
            t: f64::NAN,
        });
    }
    state.adam.update(state.model.params_mut(), &grads, cfg.learning_rate_at(state.step));
    state.step += 1;
    Ok(report)
}

/// Where a training run keeps its files.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub dir: PathBuf,
}

impl TrainPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("state.bin")
    }
    pub fn final_model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{step:07}.ckpt"))
    }
}

const LOG_HEADER: &str = "step,score_loss,mel_loss,total,mel_skipped";

/// Runs steps until `state.step == cfg.n_steps`. With `paths`, appends one
/// CSV row per step, writes periodic and final checkpoints and the resumable
/// state. Resuming from a saved state and running to the same `n_steps`
/// reproduces an uninterrupted run bit for bit.
pub fn train(
    state: &mut TrainState,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    paths: Option<&TrainPaths>,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("no training samples"));
    }
    let mut log_file = match paths {
        Some(p) => {
            fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            let path = p.log();
            if state.step == 0 || !path.exists() {
                fs::write(&path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
            } else {
                truncate_log(&path, state.step)?;
            }
            Some((OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut order = BatchOrder::new(cfg.seed, samples.len());
    let mut reports = Vec::new();
    while state.step < cfg.n_steps {
        let idx = order.batch(state.step, cfg.batch_size);
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
        let r = training_step(state, &batch, cfg)?;
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(
                f,
                "{},{:e},{:e},{:e},{}",
                r.step, r.score_loss, r.mel_loss, r.total, r.mel_skipped
            )
            .map_err(|e| Error::io(path.as_path(), e))?;
        }
        if r.step % 100 == 0 {
            log::info!("step {} total {:.4e} (score {:.4e}, mel {:.4e})", r.step, r.total, r.score_loss, r.mel_loss);
        }
        reports.push(r);
        if let Some(p) = paths {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                write_bytes(&p.checkpoint(state.step), &state.model.to_bytes())?;
                write_bytes(&p.state(), &state.to_bytes())?;
            }
        }
    }
    if let Some(p) = paths {
        write_bytes(&p.final_model(), &state.model.to_bytes())?;
        write_bytes(&p.state(), &state.to_bytes())?;
    }
    Ok(reports)
}

fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let keep: Vec<&str> = text.lines().take(steps as usize + 1).collect();
    fs::write(path, keep.join("\n") + "\n").map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a per-step loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f.get(i).and_then(|s| s.parse::<f64>().ok());
            match (f.len(), num(1), num(2), num(3)) {
                (5, Some(s), Some(m), Some(t)) => Ok(StepReport {
                    step: f[0].parse().map_err(|_| Error::contract(format!("bad log row `{l}`")))?,
                    score_loss: s,
                    mel_loss: m,
                    total: t,
                    mel_skipped: f[4].parse().map_err(|_| Error::contract(format!("bad log row `{l}`")))?,
                }),
                _ => Err(Error::contract(format!("bad log row `{l}`"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_model::ScoreModelConfig;
    use crate::sde::{analytic_score, NoiseSchedule};
    use ndarray::array;

    fn scalar_model(seed: u64) -> ScoreModel {
        let cfg = ScoreModelConfig {
            n_mels: 1,
            base_channels: 4,
            depth: 1,
            time_embed_dim: 16,
            speaker_dim: 1,
            emotion_dim: 1,
            sigma_data: 1.0,
        };
        ScoreModel::init(cfg, NoiseSchedule::default(), seed).unwrap()
    }

    fn point_mass() -> TrainingSample {
        TrainingSample {
            id: "x".into(),
            x0: array![[2.0]],
            y: array![[0.0]],
            speaker: vec![1.0],
            emotion: vec![0.5],
        }
    }

    #[test]
    fn score_loss_examples() {
        let s = NoiseSchedule::default();
        let eps = array![[0.3, -1.2], [2.0, 0.1]];
        let sigma = s.sigma(0.4).unwrap();
        assert_eq!(score_loss(&eps.mapv(|e| -e / sigma), &eps, 0.4, &s).unwrap(), 0.0);
        let zero = score_loss(&Array2::zeros((2, 2)), &eps, 0.4, &s).unwrap();
        let expected = eps.iter().map(|e| e * e).sum::<f64>() / (sigma * sigma);
        assert!((zero - expected).abs() < 1e-12 * expected);
        assert!(matches!(score_loss(&eps, &eps, 0.0, &s), Err(Error::DegenerateVariance { .. })));
    }

    #[test]
    fn mel_loss_examples() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mel_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mel_loss(&(&a + 0.5), &a).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal(&mut rng, (5, 7));
        let y = standard_normal(&mut rng, (5, 7));
        let mut brute = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                brute += (x[[i, j]] - y[[i, j]]).abs();
            }
        }
        assert_eq!(mel_loss(&x, &y).unwrap(), brute);
        assert!(mel_loss(&x, &Array2::zeros((5, 6))).is_err());
    }

    #[test]
    fn lambda_weight_values() {
        assert_eq!(lambda_weight(0.0).unwrap(), 1.0);
        assert_eq!(lambda_weight(1.0).unwrap(), 0.0);
        assert_eq!(lambda_weight(0.5).unwrap(), 0.75);
        assert!(lambda_weight(1.5).is_err());
        assert!(lambda_weight(0.995).unwrap() <= 0.02 * lambda_weight(0.05).unwrap());
    }

    #[test]
    fn none_mode_reports_no_mel_term_and_on_xt_has_no_gradient() {
        let model = scalar_model(1);
        let sample = point_mass();
        let eps = array![[0.7]];
        let l = sample_loss(&model, &sample, 0.3, &eps, LambdaMode::None, 1e-3, None).unwrap();
        assert_eq!(l.mel, 0.0);
        let mut g_none = model.params().zero_grads();
        let mut g_xt = model.params().zero_grads();
        sample_loss(&model, &sample, 0.3, &eps, LambdaMode::None, 1e-3, Some((&mut g_none, 1.0))).unwrap();
        let lx = sample_loss(&model, &sample, 0.3, &eps, LambdaMode::OnXt, 1e-3, Some((&mut g_xt, 1.0))).unwrap();
        assert!(lx.mel > 0.0);
        assert_eq!(g_none, g_xt);
    }

    #[test]
    fn mel_term_skipped_below_alpha_floor() {
        let model = scalar_model(1);
        let a1 = model.schedule().alpha(1.0).unwrap();
        let l = sample_loss(&model, &point_mass(), 1.0, &array![[0.2]], LambdaMode::OnX0, a1 * 2.0, None).unwrap();
        assert!(l.mel_skipped && l.mel == 0.0 && l.score > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_all_modes() {
        let cfg = ScoreModelConfig {
            n_mels: 5,
            base_channels: 4,
            depth: 1,
            time_embed_dim: 8,
            speaker_dim: 3,
            emotion_dim: 4,
            sigma_data: 1.0,
        };
        let model = ScoreModel::init(cfg, NoiseSchedule::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = TrainingSample {
            id: "g".into(),
            x0: standard_normal(&mut rng, (5, 6)),
            y: standard_normal(&mut rng, (5, 6)),
            speaker: vec![0.6, 0.0, 0.8],
            emotion: vec![0.3, 0.1, -0.4, 0.9],
        };
        let eps = standard_normal(&mut rng, (5, 6));
        let t = 0.35;
        for mode in LambdaMode::ALL {
            let mut grads = model.params().zero_grads();
            sample_loss(&model, &sample, t, &eps, mode, 1e-3, Some((&mut grads, 1.0))).unwrap();
            let mut checked = 0;
            let mut pick = ChaCha8Rng::seed_from_u64(9);
            while checked < 12 {
                let p = pick.gen_range(0..model.params().len());
                let i = pick.gen_range(0..model.params().params[p].data.len());
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut().params[p].data[i] += delta;
                    sample_loss(&m, &sample, t, &eps, mode, 1e-3, None).unwrap().total()
                };
                let h = 1e-6;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[p][i];
                if fd.abs().max(an.abs()) < 1e-6 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel <= 1e-4, "{mode} {} [{i}] fd {fd} an {an}", model.params().params[p].name);
                checked += 1;
            }
        }
    }

    #[test]
    fn point_mass_loss_halves_in_2000_steps() {
        let mut state = TrainState::new(scalar_model(2), AdamConfig::default());
        let cfg = TrainConfig {
            n_steps: 2000,
            learning_rate: 1e-2,
            lambda_mode: LambdaMode::None,
            ..TrainConfig::default()
        };
        let log = train(&mut state, &[point_mass()], &cfg, None).unwrap();
        let mean = |r: &[StepReport]| r.iter().map(|r| r.total).sum::<f64>() / r.len() as f64;
        let (head, tail) = (mean(&log[..100]), mean(&log[log.len() - 100..]));
        assert!(tail <= 0.5 * head, "head {head} tail {tail}");
    }

    #[test]
    fn learns_the_point_mass_score() {
        let mut state = TrainState::new(scalar_model(2), AdamConfig::default());
        let cfg = TrainConfig {
            n_steps: 10_000,
            batch_size: 32,
            learning_rate: 1e-2,
            lr_final_fraction: 0.01,
            lambda_mode: LambdaMode::None,
            ..TrainConfig::default()
        };
        train(&mut state, &[point_mass()], &cfg, None).unwrap();

        // Held-out grid: μ_t ± 2σ_t at t away from the training floor.
        let s = *state.model.schedule();
        let (mut num, mut den) = (0.0, 0.0);
        for ti in 1..=9 {
            let t = ti as f64 / 10.0;
            let mu = 2.0 * s.alpha(t).unwrap();
            let sd = s.sigma(t).unwrap();
            for k in -4..=4 {
                let x = array![[mu + 0.5 * k as f64 * sd]];
                let exact = analytic_score(&x, &array![[2.0]], &array![[0.0]], t, &s).unwrap()[[0, 0]];
                let got = state.model.evaluate(&x, &point_mass().conditioning(t)).unwrap()[[0, 0]];
                num += (got - exact).powi(2);
                den += exact * exact;
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.1, "relative L2 {rel}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<TrainingSample> = (0..5)
            .map(|i| TrainingSample {
                id: format!("s{i}"),
                x0: standard_normal(&mut rng, (1, 3 + i)),
                y: standard_normal(&mut rng, (1, 3 + i)),
                speaker: vec![1.0],
                emotion: vec![i as f64 / 5.0],
            })
            .collect();
        let cfg = TrainConfig {
            n_steps: 12,
            batch_size: 3,
            learning_rate: 1e-3,
            checkpoint_every: 5,
            ..TrainConfig::default()
        };
        let full_paths = TrainPaths::new(dir.path().join("full"));
        let mut full = TrainState::new(scalar_model(7), cfg.adam);
        train(&mut full, &samples, &cfg, Some(&full_paths)).unwrap();

        let part_paths = TrainPaths::new(dir.path().join("part"));
        let mut part = TrainState::new(scalar_model(7), cfg.adam);
        train(&mut part, &samples, &TrainConfig { n_steps: 5, ..cfg.clone() }, Some(&part_paths)).unwrap();
        let bytes = fs::read(part_paths.checkpoint(5)).unwrap();
        assert_eq!(bytes, fs::read(full_paths.checkpoint(5)).unwrap());
        let mut resumed = TrainState::from_bytes(&fs::read(part_paths.state()).unwrap(), cfg.adam).unwrap();
        assert_eq!(resumed.step, 5);
        train(&mut resumed, &samples, &cfg, Some(&part_paths)).unwrap();

        assert_eq!(resumed.model.to_bytes(), full.model.to_bytes());
        assert_eq!(fs::read(part_paths.log()).unwrap(), fs::read(full_paths.log()).unwrap());
        assert_eq!(read_loss_log(&full_paths.log()).unwrap().len(), 12);
        assert!(TrainState::from_bytes(&fs::read(full_paths.final_model()).unwrap(), cfg.adam).is_err());
    }

    #[test]
    fn lambda_mode_parsing() {
        for m in LambdaMode::ALL {
            assert_eq!(m.name().parse::<LambdaMode>().unwrap(), m);
        }
        assert!("on_y".parse::<LambdaMode>().is_err());
    }
}
