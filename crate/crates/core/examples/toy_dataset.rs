//! Generates the synthetic corpus and shows how the spectral-centroid proxy
//! tracks the arousal labels.
//!
//! cargo run --release --example toy_dataset -- [n_utts] [out_dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use emoshift::audio::{load_manifest, load_mel, make_toy_dataset, MelConfig, ToyConfig};
use emoshift::encoders::{CentroidEmotionEncoder, EmotionEncoder};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let tmp = tempfile::tempdir()?;
    let out = args.get(2).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());

    let mel = MelConfig::toy();
    let ds = make_toy_dataset(n, 7, &out, &ToyConfig::default(), &mel)?;
    // The manifest on disk is the source of truth for every later stage.
    let records = load_manifest(&ds.manifest_path)?;
    assert_eq!(records, ds.records);

    let mut per_split: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_bin: BTreeMap<u8, usize> = BTreeMap::new();
    for r in &records {
        *per_split.entry(format!("{:?}", r.split)).or_default() += 1;
        *per_bin.entry(r.arousal.bin()).or_default() += 1;
    }
    println!("{} utterances in {}", records.len(), ds.root.display());
    println!("splits {per_split:?}");
    println!("bins   {per_bin:?}");

    let enc = CentroidEmotionEncoder::new(8);
    let mut worst: f64 = 0.0;
    for r in &records {
        let x = load_mel(&ds.root, r, &mel)?;
        let p = enc.predict_arousal(&r.utterance_id, &x)?;
        worst = worst.max((p.value() - r.arousal.value()).abs());
    }
    for r in records.iter().take(5) {
        println!("{}  speaker {}  arousal {:.2}  {}", r.utterance_id, r.speaker_id, r.arousal.value(), r.audio_path);
    }
    println!("largest |proxy - label| over the corpus: {worst:.2e}");
    Ok(())
}
