use anyhow::Context;
use clap::Parser;
use semlab::workbench::cli::{execute, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let files = execute(&cli).context("semlab failed")?;
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}
