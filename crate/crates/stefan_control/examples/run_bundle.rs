//! Programmatic use of the batch front end: load a configuration with
//! overrides and write one run bundle.

use stefan_control::cli::{bundle_dir, run_into, Command, RunConfig};

fn main() -> stefan_control::Result<()> {
    let out = std::env::temp_dir().join("stefan-control-example");
    let cfg = RunConfig::load(
        None,
        &[
            format!("output.dir={:?}", out.display().to_string()),
            "modes.pairing=\"matched\"".into(),
            "output.datasets=3".into(),
        ],
    )?;
    let dir = bundle_dir(&cfg, Command::Duality)?;
    let (code, summary) = run_into(Command::Duality, &cfg, &dir)?;
    println!("bundle {} (exit {code})", dir.display());
    println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
    Ok(())
}
