//! Scores a set of conversions: global errors, per-bin tables and rank
//! correlation, on made-up predictions.

use emoshift::encoders::ArousalLabel;
use emoshift::eval::{pooled_mse, spearman, ConversionEvalRow, EvalReport, QualityCell};

fn main() -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for (i, src) in [2.4, 3.8, 4.1, 5.6].into_iter().enumerate() {
        for target in 1..=7 {
            let t = f64::from(target);
            // A converter that undershoots extreme targets towards the source.
            let pred = (0.7 * t + 0.3 * src + 0.1 * (i as f64 - 1.5)).clamp(1.0, 7.0);
            rows.push(ConversionEvalRow {
                utterance_id: format!("utt{i}"),
                source_arousal: ArousalLabel::new(src)?,
                target_arousal: ArousalLabel::new(t)?,
                predicted_arousal: ArousalLabel::new(pred)?,
            });
        }
    }

    let report = EvalReport::new(&rows, QualityCell::NotConfigured)?;
    print!("{}", report.to_markdown());

    let pooled = pooled_mse(&report.by_target).unwrap_or(f64::NAN);
    println!("\nper-target bins pooled back: {pooled:.6} (global {:.6})", report.ser.l_mse);

    let t: Vec<f64> = rows.iter().map(|r| r.target_arousal.value()).collect();
    let p: Vec<f64> = rows.iter().map(|r| r.predicted_arousal.value()).collect();
    println!("Spearman(target, predicted) = {:.3}", spearman(&t, &p).unwrap_or(f64::NAN));
    Ok(())
}
