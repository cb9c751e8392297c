use clap::Parser;
use emoshift::cli::{run, Cli};
use emoshift::Error;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("{}", serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
        std::process::exit(if matches!(e, Error::Config(_) | Error::ArousalRange { .. }) { 2 } else { 1 });
    }
}
