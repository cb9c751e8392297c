//! Layers a TOML file and dotted-key overrides over the defaults, the same
//! way the command line does, and prints the resolved configuration.
//!
//! cargo run --example run_config -- [key=value ...]

use emoshift::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "[training]\nn_steps = 2000\n\n[inference]\nbank_p = 0.3\n")?;

    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let config = RunConfig::load(Some(&file), &overrides)?.resolved();
    println!("# hash {}", config.hash());
    print!("{}", config.to_toml());

    // Unknown keys are rejected rather than ignored.
    match RunConfig::load(None, &["training.n_step=5".to_string()]) {
        Err(e) => println!("# rejected typo: {e}"),
        Ok(_) => println!("# typo accepted?"),
    }
    Ok(())
}
