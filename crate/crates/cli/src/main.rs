//! `cleave`: trace-driven container partitioning and slimming.
//!
//! Pipeline stages persist intermediate documents so each can be rerun
//! independently: `analyze` turns syscall traces into an analysis document,
//! `partition` applies a policy and plans resource placement, `build`
//! materializes slimmed per-container trees. `rpe-server` is the runtime
//! entry point for containers that host remotely-executed programs.
//!
//! Exit codes: 0 success (warnings allowed), 1 input error, 2 internal
//! invariant violation.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cleave", version, about = "Trace-driven container partitioner and slimmer")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse traces and write the analysis document (executables,
    /// per-executable resource sets, call graph).
    Analyze {
        /// Trace files; each file is one traced run.
        #[arg(long = "trace")]
        traces: Vec<PathBuf>,
        /// Input format: strace | canonical.
        #[arg(long, default_value = "strace")]
        format: String,
        /// Initial working directory of the traced container.
        #[arg(long, default_value = "/")]
        root_cwd: String,
        /// Executable the trace's first process was running.
        #[arg(long, default_value = "/init")]
        root_exe: String,
        /// Output analysis document.
        #[arg(long, default_value = "analysis.json")]
        out: PathBuf,
        /// Also write the human-readable report here ('-' for stdout).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Fail on the first malformed trace line instead of warning.
        #[arg(long)]
        strict: bool,
    },
    /// Apply a policy to an analysis document and write the placement plan.
    Partition {
        #[arg(long, default_value = "analysis.json")]
        analysis: PathBuf,
        /// Policy file (see the repo docs for the grammar).
        #[arg(long)]
        policy: PathBuf,
        /// Root of the extracted original container filesystem.
        #[arg(long)]
        source_root: PathBuf,
        /// Output plan document.
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
        /// Error when a write-only path is missing from the source tree.
        #[arg(long)]
        strict_missing: bool,
    },
    /// Materialize a plan: slimmed trees, manifests, compose descriptor,
    /// size report.
    Build {
        /// Existing plan document; omit to compute one inline.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Needed when --plan is omitted.
        #[arg(long)]
        analysis: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        source_root: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Allow a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        strict_missing: bool,
        /// Stub binary to install at blocked-edge sites (defaults to the
        /// rpe-stub next to this executable).
        #[arg(long)]
        stub_binary: Option<PathBuf>,
        /// Server binary for serving containers (defaults likewise).
        #[arg(long)]
        server_binary: Option<PathBuf>,
    },
    /// Run the remote-process-execution server.
    RpeServer {
        #[arg(long)]
        socket: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    // a panic is a broken pipeline invariant, distinct from bad input
    let result = std::panic::catch_unwind(|| dispatch(cli.command));
    match result {
        Ok(Ok(())) => {}
        Ok(Err(commands::CliError::Input(e))) => {
            eprintln!("cleave: {e:#}");
            std::process::exit(1);
        }
        Ok(Err(commands::CliError::Internal(e))) => {
            eprintln!("cleave: internal invariant violation: {e:#}");
            std::process::exit(2);
        }
        Err(_) => {
            eprintln!("cleave: internal invariant violation (panic)");
            std::process::exit(2);
        }
    }
}

fn dispatch(command: Cmd) -> Result<(), commands::CliError> {
    match command {
        Cmd::Analyze {
            traces,
            format,
            root_cwd,
            root_exe,
            out,
            report,
            strict,
        } => commands::analyze(commands::AnalyzeArgs {
            traces,
            format,
            root_cwd,
            root_exe,
            out,
            report,
            strict,
        }),
        Cmd::Partition {
            analysis,
            policy,
            source_root,
            out,
            strict_missing,
        } => commands::partition(commands::PartitionArgs {
            analysis,
            policy,
            source_root,
            out,
            strict_missing,
        }),
        Cmd::Build {
            plan,
            analysis,
            policy,
            source_root,
            out,
            force,
            strict_missing,
            stub_binary,
            server_binary,
        } => commands::build(commands::BuildArgs {
            plan,
            analysis,
            policy,
            source_root,
            out,
            force,
            strict_missing,
            stub_binary,
            server_binary,
        }),
        Cmd::RpeServer { socket } => {
            let config = cleave_rpe::server::ServerConfig {
                socket_path: socket,
            };
            cleave_rpe::server::serve(&config).map_err(|e| commands::CliError::Input(e.into()))
        }
    }
}
