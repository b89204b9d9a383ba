//! Command-line front end: run one experiment from a config file, encode a
//! time range to ternary entries, or sweep a parameter across runs.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dptnet::config::{parse_config, ExperimentConfig};
use dptnet::experiment::{encode_extremal_lines, encode_periodic_lines, run_experiment, RunOutput};

#[derive(Parser)]
#[command(name = "dptnet", about = "Timestamped-data-plane SDN simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for CSV reports.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the ternary entries of a time range in `*`/bit notation.
    Encode {
        /// Lower bound of a `T >= T0` range (integer field value).
        #[arg(long, conflicts_with = "periodic")]
        extremal: Option<u64>,
        /// Periodic range as `k:slot,slot,...`.
        #[arg(long)]
        periodic: Option<String>,
        /// Field width in bits for extremal encoding.
        #[arg(long, default_value_t = 32)]
        width: u32,
        /// Least significant bit of the periodic slot field.
        #[arg(long, default_value = "frac:32")]
        bit: String,
    },
    /// Run the config once per value of a swept parameter.
    Sweep {
        config: PathBuf,
        /// Parameter to sweep: `key=v1,v2,...` (e.g. app.pairs=4,8,16).
        #[arg(long)]
        param: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { config, seed, out } => {
            let cfg = match load_config(&config, seed) {
                Ok(cfg) => cfg,
                Err(code) => return code,
            };
            match execute(&cfg, &out) {
                Ok(violations) if violations == 0 => ExitCode::SUCCESS,
                Ok(_) => ExitCode::from(2),
                Err(code) => code,
            }
        }
        Cmd::Encode {
            extremal,
            periodic,
            width,
            bit,
        } => {
            let lines = match (extremal, periodic) {
                (Some(t0), None) => encode_extremal_lines(t0, width),
                (None, Some(spec)) => encode_periodic_lines(&spec, &bit),
                _ => Err("encode needs exactly one of --extremal / --periodic".to_string()),
            };
            match lines {
                Ok(lines) => {
                    for l in lines {
                        println!("{l}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Cmd::Sweep {
            config,
            param,
            seed,
            out,
        } => {
            let cfg = match load_config(&config, seed) {
                Ok(cfg) => cfg,
                Err(code) => return code,
            };
            let Some((key, values)) = param.split_once('=') else {
                eprintln!("error: --param must look like key=v1,v2,...");
                return ExitCode::from(1);
            };
            let mut any_violation = false;
            let mut sweep_rows = vec!["param,value,summary".to_string()];
            for value in values.split(',') {
                let mut run_cfg = cfg.clone();
                if let Err(e) = run_cfg.apply_override(key, value) {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
                let subdir = out.join(format!("{}={}", key.replace('.', "_"), value));
                println!("== {key}={value}");
                match execute(&run_cfg, &subdir) {
                    Ok(violations) => {
                        if violations > 0 {
                            any_violation = true;
                        }
                        let summary = std::fs::read_to_string(subdir.join("summary.txt"))
                            .unwrap_or_default()
                            .replace('\n', " | ");
                        sweep_rows.push(format!("{key},{value},{}", summary.trim_end()));
                    }
                    Err(code) => return code,
                }
            }
            if let Err(e) = std::fs::create_dir_all(&out)
                .and_then(|_| std::fs::write(out.join("sweep.csv"), sweep_rows.join("\n") + "\n"))
            {
                eprintln!("error: writing sweep.csv: {e}");
                return ExitCode::from(1);
            }
            if any_violation {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ExitCode> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", path.display());
            return Err(ExitCode::from(1));
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(cfg) => cfg,
        Err(errors) => {
            for e in &errors {
                eprintln!("error: {e}");
            }
            eprintln!("{} config error(s)", errors.len());
            return Err(ExitCode::from(1));
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs one experiment and writes its reports; returns the violation count.
fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<usize, ExitCode> {
    let output: RunOutput = match run_experiment(cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(1));
        }
    };
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        eprintln!("error: creating {}: {e}", out_dir.display());
        return Err(ExitCode::from(1));
    }
    for (name, contents) in &output.files {
        if let Err(e) = std::fs::write(out_dir.join(name), contents) {
            eprintln!("error: writing {name}: {e}");
            return Err(ExitCode::from(1));
        }
    }
    let summary = output.summary.join("\n") + "\n";
    if let Err(e) = std::fs::write(out_dir.join("summary.txt"), &summary) {
        eprintln!("error: writing summary.txt: {e}");
        return Err(ExitCode::from(1));
    }
    print!("{summary}");
    for v in &output.violations {
        eprintln!("violation: {v}");
    }
    Ok(output.violations.len())
}
