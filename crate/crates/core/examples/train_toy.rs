//! Trains the score network on the synthetic corpus with checkpoints, then
//! resumes from the saved optimiser state.
//!
//! cargo run --release --example train_toy -- [steps] [on_x0|on_xt|none]

use emoshift::audio::{make_toy_dataset, MelConfig, Split, ToyConfig};
use emoshift::encoders::Encoders;
use emoshift::optim::AdamConfig;
use emoshift::score_model::{ScoreModel, ScoreModelConfig};
use emoshift::sde::NoiseSchedule;
use emoshift::training::{prepare_samples, read_loss_log, train, LambdaMode, StepReport, TrainConfig, TrainPaths, TrainState};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let mode: LambdaMode = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(LambdaMode::OnX0);

    let dir = tempfile::tempdir()?;
    let mel = MelConfig::toy();
    let toy = ToyConfig {
        render_audio: false,
        ..ToyConfig::default()
    };
    let ds = make_toy_dataset(60, 3, &dir.path().join("data"), &toy, &mel)?;
    let encoders = Encoders::mock(128, 8);
    let train_set: Vec<_> = ds.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let (samples, skipped) = prepare_samples(&train_set, &ds.root, &encoders, &mel)?;
    println!("{} training samples, {} skipped", samples.len(), skipped.len());

    let model = ScoreModel::init(
        ScoreModelConfig {
            n_mels: mel.n_mels,
            base_channels: 8,
            depth: 2,
            time_embed_dim: 16,
            speaker_dim: 128,
            emotion_dim: 8,
            sigma_data: 1.0,
        },
        NoiseSchedule::default(),
        1,
    )?;
    println!("{} parameters", model.params().scalar_count());

    let cfg = TrainConfig {
        n_steps: steps,
        learning_rate: 1e-3,
        lambda_mode: mode,
        checkpoint_every: (steps / 4).max(1),
        ..TrainConfig::default()
    };
    let paths = TrainPaths::new(dir.path().join("train"));
    let mut state = TrainState::new(model, AdamConfig::default());
    train(&mut state, &samples, &cfg, Some(&paths))?;

    let log = read_loss_log(&paths.log())?;
    // Single steps are noisy (small t draws dominate), so print window means.
    let every = (log.len() / 8).max(1);
    for w in log.chunks(every) {
        let mean = |f: fn(&StepReport) -> f64| w.iter().map(f).sum::<f64>() / w.len() as f64;
        println!(
            "steps {:5}..{:5}  lr {:.2e}  score {:10.2}  mel {:7.3}",
            w[0].step,
            w[w.len() - 1].step,
            cfg.learning_rate_at(w[0].step),
            mean(|r| r.score_loss),
            mean(|r| r.mel_loss)
        );
    }

    // Resuming picks up the Adam moments and step counter from disk.
    let bytes = std::fs::read(paths.state())?;
    let resumed = TrainState::from_bytes(&bytes, AdamConfig::default())?;
    println!("resumable state at step {} ({} bytes)", resumed.step, bytes.len());
    Ok(())
}
