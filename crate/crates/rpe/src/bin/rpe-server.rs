//! Standalone remote-execution server.
//!
//! Usage: `rpe-server --socket <path>`

use std::path::PathBuf;

fn main() {
    let mut args = std::env::args_os().skip(1);
    let mut socket: Option<PathBuf> = None;
    while let Some(arg) = args.next() {
        match arg.to_str() {
            Some("--socket") => socket = args.next().map(PathBuf::from),
            Some("--help") | Some("-h") => {
                eprintln!("usage: rpe-server --socket <path>");
                return;
            }
            _ => {
                eprintln!("rpe-server: unknown argument {arg:?}");
                std::process::exit(2);
            }
        }
    }
    let Some(socket_path) = socket else {
        eprintln!("rpe-server: --socket is required");
        std::process::exit(2);
    };
    let config = cleave_rpe::server::ServerConfig { socket_path };
    if let Err(e) = cleave_rpe::server::serve(&config) {
        eprintln!("rpe-server: {e}");
        std::process::exit(1);
    }
}
