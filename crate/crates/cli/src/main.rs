mod args;
mod cases;
mod commands;
mod config;
mod failure;
mod overlay;
mod report;

use std::process::ExitCode;

use clap::Parser;
use slca_core::gradsuite;
use slca_core::tensorcore::GradCheckOptions;

use args::{Cli, Command, GradcheckArgs};
use config::RunConfig;
use failure::{CmdResult, Failure};

fn gradcheck_cmd(args: &GradcheckArgs) -> CmdResult {
    let cfg = RunConfig::load(args.config.as_deref())?;
    cfg.network.validate()?;
    let mut opts = GradCheckOptions::new(gradsuite::EPS);
    if args.fault_inject {
        opts.analytic_scale = 1.5;
    }
    let mut failed = Vec::new();
    println!(
        "{:<22} {:>14} {:>8} {:>6} {:>8}  status",
        "component", "max_rel_error", "checked", "kinks", "skipped"
    );
    for name in gradsuite::COMPONENTS {
        let report = gradsuite::check(name, &cfg.network, opts)?;
        let ok = report.checked > 0 && report.max_rel_error < gradsuite::TOLERANCE;
        println!(
            "{name:<22} {:>14.3e} {:>8} {:>6} {:>8}  {}",
            report.max_rel_error,
            report.checked,
            report.kink_adjusted,
            report.skipped,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check above {:e}: {}",
            gradsuite::TOLERANCE,
            failed.join(", ")
        )))
    }
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Segment(a) => commands::segment(a),
        Command::Evaluate(a) => commands::evaluate_dirs(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
