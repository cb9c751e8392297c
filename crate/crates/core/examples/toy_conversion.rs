//! Trains on a synthetic corpus and sweeps every source over targets 1..7.
//!
//! cargo run --release --example toy_conversion -- [steps] [on_x0|on_xt|none] [lr]

use std::time::Instant;

use emoshift::audio::{load_mel, make_toy_dataset, MelConfig, Split, ToyConfig};
use emoshift::encoders::{ArousalLabel, Encoders};
use emoshift::eval::{ser_errors, spearman, ConversionEvalRow};
use emoshift::inference::{build_bank, convert, SolverConfig};
use emoshift::optim::AdamConfig;
use emoshift::score_model::{ScoreModel, ScoreModelConfig};
use emoshift::sde::NoiseSchedule;
use emoshift::training::{prepare_samples, train, LambdaMode, TrainConfig, TrainState};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(4000);
    let mode: LambdaMode = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(LambdaMode::OnX0);
    let lr: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);

    let dir = tempfile::tempdir()?;
    let mel = MelConfig::toy();
    let toy = ToyConfig {
        render_audio: false,
        ..ToyConfig::default()
    };
    let ds = make_toy_dataset(100, 7, dir.path(), &toy, &mel)?;
    let encoders = Encoders::mock(128, 8);
    let train_recs: Vec<_> = ds.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let (samples, _) = prepare_samples(&train_recs, &ds.root, &encoders, &mel)?;

    let model_cfg = ScoreModelConfig {
        n_mels: mel.n_mels,
        base_channels: 16,
        depth: 2,
        time_embed_dim: 32,
        speaker_dim: 128,
        emotion_dim: 8,
        sigma_data: 1.0,
    };
    let model = ScoreModel::init(model_cfg, NoiseSchedule::default(), 1)?;
    let mut state = TrainState::new(model, AdamConfig::default());
    let cfg = TrainConfig {
        n_steps: steps,
        batch_size: 8,
        learning_rate: lr,
        lr_final_fraction: 0.05,
        lambda_mode: mode,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let log = train(&mut state, &samples, &cfg, None)?;
    let tail = &log[log.len().saturating_sub(200)..];
    println!(
        "trained {steps} steps ({mode}) in {:.1}s, tail loss {:.4}",
        t0.elapsed().as_secs_f64(),
        tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64
    );

    let refs: Vec<_> = ds.records.iter().filter(|r| r.split != Split::Test).cloned().collect();
    let bank = build_bank(&refs, &ds.root, &mel, encoders.emotion.as_ref(), 0.2)?;
    println!("bank bins: {:?}", bank.entries.keys().collect::<Vec<_>>());
    let solver = SolverConfig {
        fallback_to_nearest_bin: true,
        ..SolverConfig::default()
    };
    let mut rows = Vec::new();
    let mut rhos = Vec::new();
    for src in ds.records.iter().filter(|r| r.split == Split::Test) {
        let x0 = load_mel(&ds.root, src, &mel)?;
        let source_pred = encoders.emotion.predict_arousal(&src.utterance_id, &x0)?;
        let mut preds = Vec::new();
        for target in 1..=7 {
            let target = ArousalLabel::new(target as f64)?;
            let out = convert(src, &x0, target, &bank, &encoders, &state.model, &solver, 11)?;
            let p = encoders.emotion.predict_arousal(&src.utterance_id, &out.mel_out)?;
            preds.push(p.value());
            rows.push(ConversionEvalRow {
                utterance_id: src.utterance_id.clone(),
                source_arousal: src.arousal,
                target_arousal: target,
                predicted_arousal: p,
            });
        }
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], &preds).unwrap_or(0.0);
        println!("{} src {:.2} (proxy {:.2}) -> {:?} rho {rho:.3}", src.utterance_id, src.arousal.value(), source_pred.value(), preds.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>());
        rhos.push(rho);
    }
    let e = ser_errors(&rows)?;
    let t: Vec<f64> = rows.iter().map(|r| r.target_arousal.value()).collect();
    let p: Vec<f64> = rows.iter().map(|r| r.predicted_arousal.value()).collect();
    println!(
        "mean per-source spearman {:.3}, pooled {:.3}, L_mse {:.4}, L_abs {:.1}%",
        rhos.iter().sum::<f64>() / rhos.len() as f64,
        spearman(&t, &p).unwrap_or(0.0),
        e.l_mse,
        e.l_abs_percent
    );
    Ok(())
}
