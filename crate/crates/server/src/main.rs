use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use stackdrive_cli::config::RunConfig;
use stackdrive_server::{router, Service};

/// Serve interactive shared-control sessions over HTTP.
#[derive(Debug, Parser)]
#[command(name = "stackdrive-serve", version)]
struct Args {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config leaf, e.g. `scenario.lambda=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory holding `meta.json` and `adapted/`.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Directory with the built UI bundle.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match RunConfig::load(args.config.as_deref(), &args.set) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let svc = Service::new(cfg.scenario, cfg.learning, cfg.solver);
    match svc.load_run_dir(&args.runs) {
        Ok(names) if names.is_empty() => eprintln!("no tables under {}, only `zero` is available", args.runs.display()),
        Ok(names) => eprintln!("loaded {}", names.join(", ")),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let app = router(Arc::new(svc), args.static_dir.as_deref());
    let listener = match tokio::net::TcpListener::bind(&args.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}: {e}", args.bind);
            return ExitCode::FAILURE;
        }
    };
    eprintln!("listening on http://{}", args.bind);
    if let Err(e) = axum::serve(listener, app).await {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
