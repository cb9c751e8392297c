//! The conditional score network `s(X_t, Y, speaker, emotion, t)`.
//!
//! A small U-shaped convolutional network over the `(mel, time)` plane.
//! Inputs `X_t` and `Y` are stacked as two channels. A sinusoidal embedding
//! of `t` goes through a two-layer MLP; the speaker and emotion vectors are
//! linearly projected and added to it. Every block receives that vector
//! projected to one value per `(channel, mel row)` of its resolution,
//! broadcast over time.
//!
//! The network predicts a clean-mel estimate `D` and the score is read off the
//! Gaussian kernel, `s = −(X_t − (1 − α) Y − α D) / σ²`, so a perfect `D`
//! gives the exact kernel score. With `z = (X_t − (1 − α) Y) / α − Y`, a noisy
//! guess at `X0 − Y` with noise level `ς = σ / α`, the network sees
//! `c_in z` and `Y` and outputs `D − Y` directly, where
//! `c_in = σ_d / (ς² + σ_d²)` is the Wiener gain. The noisy channel is zero at
//! initialisation.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore, Tensor};
use crate::sde::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreModelConfig {
    pub n_mels: usize,
    pub base_channels: usize,
    /// Number of down/up resolution levels.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub speaker_dim: usize,
    pub emotion_dim: usize,
    /// Typical spread of `X0 − Y`; sets the input gain on the noisy channel.
    pub sigma_data: f64,
}

impl Default for ScoreModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            base_channels: 32,
            depth: 2,
            time_embed_dim: 64,
            speaker_dim: 128,
            emotion_dim: 1024,
            sigma_data: 1.0,
        }
    }
}

impl ScoreModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_mels", self.n_mels),
            ("base_channels", self.base_channels),
            ("depth", self.depth),
            ("time_embed_dim", self.time_embed_dim),
            ("speaker_dim", self.speaker_dim),
            ("emotion_dim", self.emotion_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Config("model.sigma_data must be positive".into()));
        }
        if self.depth > 6 {
            return Err(Error::Config("model.depth above 6 is not supported".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Mel extent after padding to a multiple of `2^depth`.
    fn padded_mels(&self) -> usize {
        round_up(self.n_mels, 1 << self.depth)
    }
}

/// Everything the score network is conditioned on besides `X_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// "Average voice" prior, same shape as the state.
    pub y: Array2<f64>,
    pub speaker: Vec<f64>,
    pub emotion: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
    cond: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    time_fc1: Linear,
    time_fc2: Linear,
    speaker_proj: Linear,
    emotion_proj: Linear,
    in_conv: Conv,
    down: Vec<Block>,
    mid: Block,
    up: Vec<Block>,
    out_conv: Conv,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let bound = gain * (3.0 / (cin * k * k) as f64).sqrt();
        let w = self
            .store
            .uniform(format!("{name}.w"), vec![cout, cin, k, k], bound, self.rng);
        let b = self.store.zeros(format!("{name}.b"), vec![cout]);
        Conv { w, b }
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, bias: bool, gain: f64) -> Linear {
        let bound = gain * (3.0 / inp as f64).sqrt();
        let w = self
            .store
            .uniform(format!("{name}.w"), vec![out, inp], bound, self.rng);
        let b = bias.then(|| self.store.zeros(format!("{name}.b"), vec![out]));
        Linear { w, b }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, rows: usize, temb: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1.0),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1.0),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1.0)),
            cond: self.linear(&format!("{name}.cond"), temb, cout * rows, true, 0.5),
        }
    }
}

impl Layout {
    fn build(config: &ScoreModelConfig, rng: &mut ChaCha8Rng) -> (Layout, ParamStore) {
        let mut b = Builder {
            store: ParamStore::default(),
            rng,
        };
        let temb = config.time_embed_dim;
        let rows = |level: usize| config.padded_mels() >> level;
        let time_fc1 = b.linear("time.fc1", temb, temb, true, 1.0);
        let time_fc2 = b.linear("time.fc2", temb, temb, true, 1.0);
        let speaker_proj = b.linear("speaker.proj", config.speaker_dim, temb, false, 1.0);
        let emotion_proj = b.linear("emotion.proj", config.emotion_dim, temb, false, 1.0);
        let in_conv = b.conv("in", 2, config.channels(0), 3, 1.0);
        // The noisy channel starts switched off, so at init `D` depends on `Y`
        // and the conditioning only; the network learns how much of `z` to use.
        let w = &mut b.store.params[in_conv.w].data;
        let per_input = 9;
        for (i, v) in w.iter_mut().enumerate() {
            if (i / per_input) % 2 == 0 {
                *v = 0.0;
            }
        }
        let down = (0..config.depth)
            .map(|l| {
                let cin = config.channels(l.saturating_sub(1));
                b.block(&format!("down{l}"), cin, config.channels(l), rows(l), temb)
            })
            .collect();
        let mid = b.block(
            "mid",
            config.channels(config.depth - 1),
            config.channels(config.depth),
            rows(config.depth),
            temb,
        );
        let up = (0..config.depth)
            .rev()
            .map(|l| {
                let cin = config.channels(l + 1) + config.channels(l);
                b.block(&format!("up{l}"), cin, config.channels(l), rows(l), temb)
            })
            .collect();
        let out_conv = b.conv("out", config.channels(0), 1, 3, 0.1);
        let layout = Layout {
            time_fc1,
            time_fc2,
            speaker_proj,
            emotion_proj,
            in_conv,
            down,
            mid,
            up,
            out_conv,
        };
        (layout, b.store)
    }
}

#[derive(Debug, Clone)]
pub struct ScoreModel {
    config: ScoreModelConfig,
    schedule: NoiseSchedule,
    params: ParamStore,
    layout: Layout,
}

impl ScoreModel {
    /// Random initialisation, deterministic in `seed`.
    pub fn init(config: ScoreModelConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = Layout::build(&config, &mut rng);
        Ok(Self {
            config,
            schedule,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ScoreModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Score field for one state; output has the shape of `x_t`.
    pub fn evaluate(&self, x_t: &Array2<f64>, cond: &ConditioningBundle) -> Result<Array2<f64>> {
        let (graph, out) = self.forward(x_t, cond)?;
        Ok(Array2::from_shape_vec(x_t.dim(), graph.value(out).data.clone()).expect("score shape"))
    }

    /// Records a forward pass; the returned node holds the score, shaped `(1, n, T)`.
    pub(crate) fn forward(&self, x_t: &Array2<f64>, cond: &ConditioningBundle) -> Result<(Graph<'_>, NodeId)> {
        self.check_inputs(x_t, cond)?;
        let cfg = &self.config;
        let l = &self.layout;
        let (n, frames) = x_t.dim();
        let (hp, wp) = (cfg.padded_mels(), round_up(frames, 1 << cfg.depth));

        let alpha = self.schedule.alpha(cond.t)?;
        let var = self.schedule.variance(cond.t)?;
        let c_in = input_scale(alpha, var, cfg.sigma_data);
        let z = Zip::from(x_t)
            .and(&cond.y)
            .map_collect(|&x, &y| (x - (1.0 - alpha) * y) / alpha - y);

        let mut g = Graph::new(&self.params);
        let mut stacked = reflect_pad(&z.mapv(|v| c_in * v), hp, wp);
        stacked.extend_from_slice(&reflect_pad(&cond.y, hp, wp));
        let input = g.input(Tensor::from_vec(2, hp, wp, stacked));

        let sinus = g.input(Tensor::vector(timestep_embedding(cond.t, cfg.time_embed_dim)));
        let h = g.linear(sinus, l.time_fc1.w, l.time_fc1.b);
        let h = g.silu(h);
        let h = g.linear(h, l.time_fc2.w, l.time_fc2.b);
        let spk = g.input(Tensor::vector(cond.speaker.clone()));
        let spk = g.linear(spk, l.speaker_proj.w, None);
        let emo = g.input(Tensor::vector(cond.emotion.clone()));
        let emo = g.linear(emo, l.emotion_proj.w, None);
        let h = g.add(h, spk);
        let h = g.add(h, emo);
        let cvec = g.silu(h);

        let mut x = g.conv(input, l.in_conv.w, l.in_conv.b);
        let mut skips = Vec::with_capacity(cfg.depth);
        for block in &l.down {
            x = apply_block(&mut g, block, x, cvec);
            skips.push(x);
            x = g.avg_pool2(x);
        }
        x = apply_block(&mut g, &l.mid, x, cvec);
        for block in &l.up {
            x = g.upsample2(x);
            let skip = skips.pop().expect("one skip per level");
            x = g.concat(x, skip);
            x = apply_block(&mut g, block, x, cvec);
        }
        let out = g.conv(x, l.out_conv.w, l.out_conv.b);
        let out = g.crop(out, n, frames);

        // s = (α/σ²)(D − Y − z) = (α/σ²)(F − z)
        let gain = alpha / var;
        let shift: Vec<f64> = z.iter().map(|&v| -gain * v).collect();
        let score = g.scale_shift(out, gain, &shift);
        Ok((g, score))
    }

    fn check_inputs(&self, x_t: &Array2<f64>, cond: &ConditioningBundle) -> Result<()> {
        let cfg = &self.config;
        if x_t.nrows() != cfg.n_mels || x_t.ncols() == 0 {
            return Err(Error::Shape {
                what: "noisy state",
                expected: (cfg.n_mels, x_t.ncols().max(1)),
                actual: x_t.dim(),
            });
        }
        crate::mel::check_shape(x_t, &cond.y, "average-voice prior")?;
        if cond.speaker.len() != cfg.speaker_dim {
            return Err(Error::DimensionMismatch {
                what: "speaker embedding",
                expected: cfg.speaker_dim,
                actual: cond.speaker.len(),
            });
        }
        if cond.emotion.len() != cfg.emotion_dim {
            return Err(Error::DimensionMismatch {
                what: "emotion embedding",
                expected: cfg.emotion_dim,
                actual: cond.emotion.len(),
            });
        }
        let finite = x_t.iter().chain(cond.y.iter()).all(|v| v.is_finite())
            && cond.speaker.iter().chain(&cond.emotion).all(|v| v.is_finite());
        if !finite {
            return Err(Error::contract("score model input contains non-finite values"));
        }
        if !(cond.t > 0.0 && cond.t <= 1.0) {
            return Err(Error::DegenerateVariance { t: cond.t });
        }
        Ok(())
    }

    /// Versioned checkpoint: magic `ESCKPT01`, u32 LE header length, JSON
    /// header (config, schedule, parameter names and shapes), then every
    /// parameter as f64 LE in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            schedule: self.schedule,
            emotion_dim: self.config.emotion_dim,
            params: self
                .params
                .params
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "format version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        if header.emotion_dim != header.config.emotion_dim {
            return Err(bad("emotion_dim disagrees with model config".into()));
        }
        let mut model = Self::init(header.config, header.schedule, 0)?;
        let expected: Vec<_> = model
            .params
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if expected != header.params {
            return Err(bad("parameter layout does not match the model config".into()));
        }
        let mut data = &bytes[12 + hlen..];
        if data.len() != 8 * model.params.scalar_count() {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                8 * model.params.scalar_count(),
                data.len()
            )));
        }
        for p in &mut model.params.params {
            for v in &mut p.data {
                *v = f64::from_le_bytes(data[..8].try_into().unwrap());
                data = &data[8..];
            }
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ESCKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ScoreModelConfig,
    schedule: NoiseSchedule,
    emotion_dim: usize,
    params: Vec<(String, Vec<usize>)>,
}

fn apply_block(g: &mut Graph<'_>, block: &Block, x: NodeId, cvec: NodeId) -> NodeId {
    let bias = g.linear(cvec, block.cond.w, block.cond.b);
    let h = g.conv(x, block.conv1.w, block.conv1.b);
    let h = g.plane_bias(h, bias);
    let h = g.silu(h);
    let h = g.conv(h, block.conv2.w, block.conv2.b);
    let h = g.silu(h);
    let res = match &block.skip {
        Some(s) => g.conv(x, s.w, s.b),
        None => x,
    };
    g.add(h, res)
}

/// Wiener gain `σ_d / (ς² + σ_d²)` with `ς² = σ² / α²`: near one for small
/// noise, vanishing once the noise swamps the data spread.
fn input_scale(alpha: f64, var: f64, sigma_data: f64) -> f64 {
    let s2 = var / (alpha * alpha);
    let d2 = sigma_data * sigma_data;
    sigma_data / (s2 + d2)
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads on the high side of both axes to `(rows, cols)`.
fn reflect_pad(x: &Array2<f64>, rows: usize, cols: usize) -> Vec<f64> {
    let (n, t) = x.dim();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let sr = reflect_index(r, n);
        for c in 0..cols {
            out.push(x[[sr, reflect_index(c, t)]]);
        }
    }
    out
}

/// Sinusoidal features of `1000 t`.
fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_config() -> ScoreModelConfig {
        ScoreModelConfig {
            n_mels: 16,
            base_channels: 4,
            depth: 2,
            time_embed_dim: 8,
            speaker_dim: 6,
            emotion_dim: 5,
            sigma_data: 1.0,
        }
    }

    fn probe(cfg: &ScoreModelConfig, frames: usize, t: f64) -> (Array2<f64>, ConditioningBundle) {
        let x = Array2::from_shape_fn((cfg.n_mels, frames), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((cfg.n_mels, frames), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let cond = ConditioningBundle {
            y,
            speaker: (0..cfg.speaker_dim).map(|i| (i as f64 * 0.3).sin()).collect(),
            emotion: (0..cfg.emotion_dim).map(|i| 0.2 * i as f64 - 0.4).collect(),
            t,
        };
        (x, cond)
    }

    #[test]
    fn output_shape_matches_input_for_odd_lengths() {
        let cfg = small_config();
        let m = ScoreModel::init(cfg.clone(), NoiseSchedule::default(), 1).unwrap();
        for frames in [1, 2, 5, 37] {
            let (x, c) = probe(&cfg, frames, 0.3);
            assert_eq!(m.evaluate(&x, &c).unwrap().dim(), (16, frames));
        }
        // mel count not divisible by 2^depth is padded too
        let odd = ScoreModelConfig { n_mels: 13, ..cfg };
        let m = ScoreModel::init(odd.clone(), NoiseSchedule::default(), 1).unwrap();
        let (x, c) = probe(&odd, 9, 0.3);
        assert_eq!(m.evaluate(&x, &c).unwrap().dim(), (13, 9));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = small_config();
        let (x, c) = probe(&cfg, 12, 0.4);
        let a = ScoreModel::init(cfg.clone(), NoiseSchedule::default(), 3).unwrap();
        let b = ScoreModel::init(cfg.clone(), NoiseSchedule::default(), 3).unwrap();
        let other = ScoreModel::init(cfg, NoiseSchedule::default(), 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.evaluate(&x, &c).unwrap(), a.evaluate(&x, &c).unwrap());
        assert_ne!(a.evaluate(&x, &c).unwrap(), other.evaluate(&x, &c).unwrap());
    }

    #[test]
    fn emotion_and_speaker_change_the_output() {
        let cfg = small_config();
        let m = ScoreModel::init(cfg.clone(), NoiseSchedule::default(), 5).unwrap();
        let (x, c) = probe(&cfg, 8, 0.5);
        let base = m.evaluate(&x, &c).unwrap();
        let mut c2 = c.clone();
        c2.emotion[0] += 1.0;
        let diff = (&m.evaluate(&x, &c2).unwrap() - &base).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "emotion conditioning has no effect");
        let mut c3 = c.clone();
        c3.speaker[2] -= 1.0;
        let diff = (&m.evaluate(&x, &c3).unwrap() - &base).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "speaker conditioning has no effect");
    }

    #[test]
    fn contract_errors() {
        let cfg = small_config();
        let m = ScoreModel::init(cfg.clone(), NoiseSchedule::default(), 5).unwrap();
        let (x, c) = probe(&cfg, 8, 0.5);
        assert!(matches!(m.evaluate(&x.slice(ndarray::s![..8, ..]).to_owned(), &c), Err(Error::Shape { .. })));
        let mut bad = c.clone();
        bad.emotion.push(0.0);
        assert!(matches!(m.evaluate(&x, &bad), Err(Error::DimensionMismatch { .. })));
        let mut nan = x.clone();
        nan[[0, 0]] = f64::NAN;
        assert!(matches!(m.evaluate(&nan, &c), Err(Error::Contract(_))));
        let mut t0 = c.clone();
        t0.t = 0.0;
        assert!(m.evaluate(&x, &t0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = small_config();
        let m = ScoreModel::init(cfg.clone(), NoiseSchedule::default(), 9).unwrap();
        let bytes = m.to_bytes();
        let back = ScoreModel::from_bytes(&bytes).unwrap();
        let (x, c) = probe(&cfg, 11, 0.7);
        assert_eq!(m.evaluate(&x, &c).unwrap(), back.evaluate(&x, &c).unwrap());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = ScoreModel::init(small_config(), NoiseSchedule::default(), 9).unwrap();
        let bytes = m.to_bytes();
        assert!(matches!(ScoreModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(ScoreModel::from_bytes(&wrong_magic).is_err());
        let text = String::from_utf8_lossy(&bytes[12..]).into_owned();
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        let mut v2 = bytes[..12].to_vec();
        v2.extend_from_slice(&bumped.as_bytes()[..]);
        let err = ScoreModel::from_bytes(&v2).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!((0..7).map(|i| reflect_index(i, 3)).collect::<Vec<_>>(), vec![0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(5, 1), 0);
    }
}
