//! Kill-and-restart drill against a real service process.

use std::path::Path;

use crs_serve::cli::{run, Cli, Command};
use crs_serve::drill::kill_restart;

use crate::{ensure, Outcome};

const CONFIG: &str = r#"
[serve]
active_model = "logistic"
snapshot_every = 5
admin_token = "drill-admin"

[[serve.raters]]
name = "R1"
token = "drill-r1"

[[serve.raters]]
name = "R2"
token = "drill-r2"

[[serve.raters]]
name = "R3"
token = "drill-r3"
"#;

/// `bin` is a build of the `crs` command line.
pub fn service_durability(bin: &Path) -> Outcome {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("crs.toml");
    std::fs::write(&config, CONFIG)?;
    for command in [Command::Synth { output: None }, Command::Ingest { input: None }, Command::Split, Command::Train { model: "logistic".into() }] {
        let cli = Cli { config: Some(config.clone()), seed: None, data_dir: Some(dir.path().to_path_buf()), port: None, command };
        run(cli)?;
    }
    let out = kill_restart(bin, &config, dir.path())?;
    ensure!(out.before == out.after, "served state changed across SIGKILL");
    ensure!(out.replayed == out.reopened, "log replay differs from snapshot plus tail");
    ensure!(out.replayed.seq == out.events, "{} events acknowledged, {} recovered", out.events, out.replayed.seq);
    let revisions = out.replayed.labels.iter().filter(|l| l.revision > 1).count();
    ensure!(revisions > 0, "drill wrote no revisions");
    Ok(format!(
        "{} events ({} labels, {revisions} revisions, {} sessions) survive SIGKILL; replay matches",
        out.events,
        out.replayed.labels.len(),
        out.replayed.sessions.len()
    ))
}
