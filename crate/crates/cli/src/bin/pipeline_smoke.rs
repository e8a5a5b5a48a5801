//! End-to-end smoke run; prints the JSON-lines report and per-stage timings.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

#[derive(Debug, Parser)]
#[command(name = "pipeline_smoke", version = ufm_cli::BUILD_ID, about = "Run the tiny end-to-end pipeline and emit a JSON-lines report")]
struct Args {
    /// Root seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Working directory for data, checkpoints, matches and report.jsonl.
    #[arg(long, default_value = "smoke-out")]
    out: PathBuf,
    /// Worker thread cap.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = ufm_core::pipeline::pipeline_smoke(args.seed, &args.out).context("pipeline smoke run failed");
    match result {
        Ok(out) => {
            print!("{}", out.report_text());
            for (stage, secs) in &out.timings {
                eprintln!("{stage:>12}: {secs:8.2} s");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            ufm_cli::report_error(&e);
            ExitCode::from(ufm_cli::exit_code(&e))
        }
    }
}
