use std::process::ExitCode;

use clap::Parser;
use uapscan_cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match uapscan_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<uapscan::Error>() {
                Some(uapscan::Error::Version { .. }) => "version",
                Some(uapscan::Error::Format { .. }) => "format",
                Some(uapscan::Error::Io { .. }) => "io",
                Some(uapscan::Error::ShapeMismatch { .. }) => "shape",
                Some(_) => "pipeline",
                None => "usage",
            };
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            let body = serde_json::json!({ "error": kind, "message": chain.join(": ") });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
