//! Command implementations behind the `adpnet` binary: configure and run
//! experiments, verify the numerical core against its oracles, and export
//! plot-ready CSVs.

pub mod verify;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adpnet::tasks::{Checkpoint, CsvStepWriter, Experiment, RunConfig, TrainReport};
use serde::Serialize;

/// Process exit codes shared by all subcommands.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// A command error carrying the exit code to report.
#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn config(message: impl Into<String>) -> Self {
        CmdError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CmdError {}

pub type CmdResult<T> = Result<T, CmdError>;

fn io_err(context: &str, e: std::io::Error) -> CmdError {
    CmdError {
        code: EXIT_CONFIG,
        message: format!("{context}: {e}"),
    }
}

/// Parse a config file: TOML by default, JSON when the extension says so.
/// Unknown fields are rejected with the offending field named.
pub fn load_config(path: &Path) -> CmdResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| io_err(&format!("cannot read config {}", path.display()), e))?;
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    let config: RunConfig = if is_json {
        serde_json::from_str(&text)
            .map_err(|e| CmdError::config(format!("malformed JSON config: {e}")))?
    } else {
        toml::from_str(&text)
            .map_err(|e| CmdError::config(format!("malformed TOML config: {e}")))?
    };
    config
        .validate()
        .map_err(|e| CmdError::config(format!("invalid config: {e}")))?;
    Ok(config)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    episodes: usize,
    diverged_episodes: usize,
    final_tracking_mse: Option<f64>,
    wall_clock_seconds: f64,
    outputs: Vec<&'a str>,
}

/// Execute a training run: report CSV, per-episode CSV, checkpoint JSON,
/// and a resolved-config copy, all inside `out_dir`.
pub fn cmd_run(config_path: &Path, seed_override: Option<u64>, out_dir: &Path) -> CmdResult<i32> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| io_err(&format!("cannot create {}", out_dir.display()), e))?;

    // Resolved copy is always JSON and must re-parse to the same config.
    let resolved = serde_json::to_string_pretty(&config)
        .map_err(|e| CmdError::config(format!("cannot serialize config: {e}")))?;
    fs::write(out_dir.join("resolved-config.json"), &resolved)
        .map_err(|e| io_err("cannot write resolved config", e))?;

    let report_file = fs::File::create(out_dir.join("report.csv"))
        .map_err(|e| io_err("cannot create report.csv", e))?;
    let mut sink = CsvStepWriter::new(BufWriter::new(report_file), config.task.output_dim());

    let mut experiment = Experiment::prepare(&config).map_err(|e| CmdError {
        code: EXIT_CONFIG,
        message: format!("cannot prepare experiment: {e}"),
    })?;
    let report = experiment.train(&mut sink).map_err(|e| CmdError {
        code: EXIT_DIVERGENCE,
        message: format!("training aborted: {e}"),
    })?;
    sink.into_inner()
        .flush()
        .map_err(|e| io_err("cannot flush report.csv", e))?;

    write_episode_csv(out_dir, &report)?;

    let ckpt = experiment.checkpoint();
    let ckpt_json = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| CmdError::config(format!("cannot serialize checkpoint: {e}")))?;
    fs::write(out_dir.join("checkpoint.json"), ckpt_json)
        .map_err(|e| io_err("cannot write checkpoint", e))?;

    let diverged = report.diverged.iter().filter(|&&d| d).count();
    let summary = RunSummary {
        seed: config.seed,
        episodes: report.episodes(),
        diverged_episodes: diverged,
        final_tracking_mse: report.tracking_mse.last().copied(),
        wall_clock_seconds: report.wall_clock_seconds,
        outputs: vec![
            "resolved-config.json",
            "report.csv",
            "episodes.csv",
            "checkpoint.json",
        ],
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| io_err("cannot write summary", e))?;

    if diverged > 0 {
        eprintln!("{diverged} episode(s) hit the overflow guard");
        return Ok(EXIT_DIVERGENCE);
    }
    Ok(EXIT_OK)
}

fn write_episode_csv(out_dir: &Path, report: &TrainReport) -> CmdResult<()> {
    let file = fs::File::create(out_dir.join("episodes.csv"))
        .map_err(|e| io_err("cannot create episodes.csv", e))?;
    let mut w = BufWriter::new(file);
    report
        .write_episode_csv(&mut w)
        .map_err(|e| CmdError::config(format!("cannot write episodes.csv: {e}")))?;
    w.flush()
        .map_err(|e| io_err("cannot flush episodes.csv", e))?;
    Ok(())
}

/// Run seed sweeps in parallel workers, one output directory per seed.
pub fn cmd_run_seeds(config_path: &Path, seeds: &[u64], out_root: &Path) -> CmdResult<i32> {
    let mut handles = Vec::new();
    for &seed in seeds {
        let config_path = config_path.to_path_buf();
        let out = out_root.join(format!("seed-{seed}"));
        handles.push(std::thread::spawn(move || {
            cmd_run(&config_path, Some(seed), &out)
        }));
    }
    let mut worst = EXIT_OK;
    for handle in handles {
        match handle.join() {
            Ok(Ok(code)) => worst = worst.max(code),
            Ok(Err(e)) => {
                eprintln!("worker failed: {e}");
                worst = worst.max(e.code);
            }
            Err(_) => {
                eprintln!("worker panicked");
                worst = worst.max(EXIT_DIVERGENCE);
            }
        }
    }
    Ok(worst)
}

/// Re-derive plot-ready CSVs from a completed run directory.
pub fn cmd_export_plots(run_dir: &Path, out_dir: Option<&Path>) -> CmdResult<i32> {
    let report_path = run_dir.join("report.csv");
    let text = fs::read_to_string(&report_path)
        .map_err(|e| io_err(&format!("missing run file {}", report_path.display()), e))?;
    let out = out_dir.unwrap_or(run_dir);
    fs::create_dir_all(out).map_err(|e| io_err("cannot create output dir", e))?;

    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CmdError::config("report.csv is empty"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> CmdResult<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| CmdError::config(format!("report.csv lacks column {name}")))
    };
    let t_idx = find("t")?;
    let ep_idx = find("episode")?;
    let step_idx = find("step")?;
    let y_cols: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter_map(|(i, c)| (c.starts_with('y') && !c.starts_with("y_hat")).then_some(i))
        .collect();
    let yh_cols: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.starts_with("y_hat").then_some(i))
        .collect();
    if y_cols.is_empty() || yh_cols.len() != y_cols.len() {
        return Err(CmdError::config(
            "report.csv trajectory columns are inconsistent",
        ));
    }
    let ham_idx = find("hamiltonian")?;
    let res_idx = find("hjb_residual")?;
    let bell_idx = find("bellman_error")?;

    let traj_file = fs::File::create(out.join("trajectory.csv"))
        .map_err(|e| io_err("cannot create trajectory.csv", e))?;
    let mut traj = BufWriter::new(traj_file);
    let diag_file = fs::File::create(out.join("diagnostics.csv"))
        .map_err(|e| io_err("cannot create diagnostics.csv", e))?;
    let mut diag = BufWriter::new(diag_file);

    let mut head_t = String::from("episode,step,t");
    for i in 0..y_cols.len() {
        head_t.push_str(&format!(",y{i}"));
    }
    for i in 0..yh_cols.len() {
        head_t.push_str(&format!(",y_hat{i}"));
    }
    writeln!(traj, "{head_t}").map_err(|e| io_err("write trajectory.csv", e))?;
    writeln!(diag, "episode,step,hamiltonian,hjb_residual,bellman_error")
        .map_err(|e| io_err("write diagnostics.csv", e))?;

    let mut rows = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CmdError::config(format!(
                "report.csv row has {} fields, expected {}",
                fields.len(),
                cols.len()
            )));
        }
        let mut row = format!("{},{},{}", fields[ep_idx], fields[step_idx], fields[t_idx]);
        for &i in &y_cols {
            row.push(',');
            row.push_str(fields[i]);
        }
        for &i in &yh_cols {
            row.push(',');
            row.push_str(fields[i]);
        }
        writeln!(traj, "{row}").map_err(|e| io_err("write trajectory.csv", e))?;
        writeln!(
            diag,
            "{},{},{},{},{}",
            fields[ep_idx], fields[step_idx], fields[ham_idx], fields[res_idx], fields[bell_idx]
        )
        .map_err(|e| io_err("write diagnostics.csv", e))?;
        rows += 1;
    }
    if rows == 0 {
        return Err(CmdError::config("report.csv has no data rows"));
    }
    println!("exported {rows} rows to {}", out.display());
    Ok(EXIT_OK)
}

/// Load a checkpoint file.
pub fn load_checkpoint(path: &Path) -> CmdResult<Checkpoint> {
    let text = fs::read_to_string(path)
        .map_err(|e| io_err(&format!("cannot read checkpoint {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CmdError::config(format!("malformed checkpoint: {e}")))
}

/// Default output directory for a run.
pub fn default_out_dir() -> PathBuf {
    PathBuf::from("adpnet-run")
}
