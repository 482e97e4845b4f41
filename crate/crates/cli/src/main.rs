//! `uspilot`: train, route, plan, evaluate and execute from the command line.

mod backend;
mod commands;
mod config;
mod error;
mod serve;

use std::io::Write;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::commands::*;
use crate::config::{AppConfig, GlobalArgs};
use crate::serve::ServeArgs;

#[derive(Debug, Parser)]
#[command(name = "uspilot", version, about = "Tool-graph planning for a robotic ultrasound assistant")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the selection model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Train the intent router on a Question Set.
    TrainRouter(TrainRouterArgs),
    /// Route an instruction, then answer it or print its plan.
    Plan(PlanArgs),
    /// Print the router's class and scores for an instruction.
    Route(RouteArgs),
    /// Plan every sample of a dataset and write report.csv and report.json.
    Eval(EvalArgs),
    /// Run a plan against the simulated robot and emit its trace.
    Exec(ExecArgs),
    /// Serve POST /plan and GET /healthz.
    Serve(ServeArgs),
    /// Check a tool graph or registry file and print its size.
    GraphValidate(GraphValidateArgs),
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("USPILOT_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = AppConfig::resolve(&cli.global).and_then(|cfg| match &cli.command {
        Command::Train(a) => train_cmd(&cfg, a),
        Command::TrainRouter(a) => train_router_cmd(&cfg, a),
        Command::Plan(a) => plan_cmd(&cfg, a),
        Command::Route(a) => route_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Exec(a) => exec_cmd(&cfg, a),
        Command::Serve(a) => serve::serve_cmd(&cfg, a),
        Command::GraphValidate(a) => graph_validate_cmd(&cfg, a),
    });
    let _ = std::io::stdout().flush();
    if let Err(e) = result {
        eprintln!("uspilot: {e}");
        std::process::exit(e.exit_code());
    }
}
