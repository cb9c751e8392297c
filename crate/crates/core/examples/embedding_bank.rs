//! Builds the per-bin emotion embedding bank from labelled references, saves
//! it, and checks every entry against a re-average of its members.
//!
//! cargo run --release --example embedding_bank -- [p]

use emoshift::audio::{load_mel, make_toy_dataset, MelConfig, Split, ToyConfig};
use emoshift::encoders::{CentroidEmotionEncoder, EmotionEncoder};
use emoshift::inference::{build_bank, selection_count, EmbeddingBank};

fn main() -> anyhow::Result<()> {
    let p: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.2);
    let dir = tempfile::tempdir()?;
    let mel = MelConfig::toy();
    let toy = ToyConfig {
        render_audio: false,
        ..ToyConfig::default()
    };
    let ds = make_toy_dataset(100, 7, dir.path(), &toy, &mel)?;
    let refs: Vec<_> = ds.records.iter().filter(|r| r.split != Split::Test).cloned().collect();

    let enc = CentroidEmotionEncoder::new(8);
    let bank = build_bank(&refs, &ds.root, &mel, &enc, p)?;
    println!("p = {p}, ranking {}", bank.ranking);
    for (bin, e) in &bank.entries {
        println!(
            "bin {bin}: {:2} members, {} selected (ceil rule gives {}), first {:?}",
            e.support,
            e.selected.len(),
            selection_count(e.support, p),
            &e.selected[..e.selected.len().min(3)]
        );
    }

    // A target with no members borrows the nearest populated bin.
    for target in [1u8, 7] {
        match bank.lookup(target, true) {
            Ok((used, _)) if used != target => println!("target {target} falls back to bin {used}"),
            Ok(_) => println!("target {target} has its own entry"),
            Err(e) => println!("target {target}: {e}"),
        }
    }

    let path = dir.path().join("bank.json");
    bank.write_file(&path)?;
    let loaded = EmbeddingBank::read_file(&path)?;
    loaded.verify(|id| {
        let r = refs.iter().find(|r| r.utterance_id == id).expect("selected id is a reference");
        Ok(enc.embed(id, &load_mel(&ds.root, r, &mel)?)?.into_vec())
    })?;
    println!("reloaded bank matches a re-average of its members exactly");
    Ok(())
}
