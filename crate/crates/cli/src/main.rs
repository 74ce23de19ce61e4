//! `haarfactor`: drivers for norms, block bases, selection lemmas and factorizations.
//!
//! Every command writes `{"config", "result"}` (or CSV with `--format csv`).
//! Exit codes: 0 success, 2 structured mathematical failure, 1 I/O or usage error.

mod commands;
mod output;
mod sources;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use haarfactor::Arith;
use serde::Serialize;
use serde_json::json;

use commands::{MathFailure, Outcome, RunContext};
use output::{Format, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "haarfactor", version, about = "Haar-coordinate operators on dyadic SL-infinity spaces")]
struct Cli {
    /// Write the output here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for batch runs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
enum Command {
    /// SL-infinity and H1 norms and pairings of Haar vectors.
    Norms(commands::NormsArgs),
    /// Write a seeded random operator.
    Randop(commands::RandopArgs),
    /// Check the compatibility conditions of a block-basis family and its maps B, Q, P.
    CertifyJones(commands::CertifyJonesArgs),
    /// Build a block basis that almost diagonalizes an operator.
    Quasidiag(commands::QuasidiagArgs),
    /// Level cover of small frequency weight.
    #[command(name = "lemma-comb1")]
    LemmaComb1(commands::Comb1Args),
    /// Dense root of a nested family with large Carleson constant.
    #[command(name = "lemma-comb2")]
    LemmaComb2(commands::Comb2Args),
    /// Prune a nested family to a uniformly dense subfamily.
    #[command(name = "lemma-comb3")]
    LemmaComb3(commands::Comb3Args),
    /// Factor the identity through an operator with large diagonal.
    FactorLocal(commands::FactorLocalArgs),
    /// Factor the identity through T or Id - T.
    FactorPrimary(commands::FactorPrimaryArgs),
    /// Recheck certificates in this process.
    VerifyCert(commands::VerifyCertArgs),
    /// Check the finite direct-sum maps E, P, G, Q on random inputs.
    DirectsumCheck(commands::DirectSumArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Norms(_) => "norms",
            Command::Randop(_) => "randop",
            Command::CertifyJones(_) => "certify-jones",
            Command::Quasidiag(_) => "quasidiag",
            Command::LemmaComb1(_) => "lemma-comb1",
            Command::LemmaComb2(_) => "lemma-comb2",
            Command::LemmaComb3(_) => "lemma-comb3",
            Command::FactorLocal(_) => "factor-local",
            Command::FactorPrimary(_) => "factor-primary",
            Command::VerifyCert(_) => "verify-cert",
            Command::DirectsumCheck(_) => "directsum-check",
        }
    }

    fn run(&self, ctx: &RunContext) -> Result<Outcome> {
        match self {
            Command::Norms(a) => commands::norms(a, ctx),
            Command::Randop(a) => commands::randop(a, ctx),
            Command::CertifyJones(a) => commands::certify_jones(a, ctx),
            Command::Quasidiag(a) => commands::quasidiag(a, ctx),
            Command::LemmaComb1(a) => commands::comb1(a, ctx),
            Command::LemmaComb2(a) => commands::comb2(a, ctx),
            Command::LemmaComb3(a) => commands::comb3(a, ctx),
            Command::FactorLocal(a) => commands::factor_local(a, ctx),
            Command::FactorPrimary(a) => commands::factor_primary_cmd(a, ctx),
            Command::VerifyCert(a) => commands::verify_cert(a, ctx),
            Command::DirectsumCheck(a) => commands::directsum_check(a, ctx),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let arith = match Arith::from_env() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: HAARFACTOR_ARITH: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(1);
        }
    }
    let config = RunConfig {
        subcommand: cli.command.name().into(),
        seed: cli.seed,
        arith,
        format: cli.format,
        out: cli.out.clone(),
        params: serde_json::to_value(&cli.command).unwrap_or_default(),
    };
    let ctx = RunContext { seed: cli.seed, arith };
    match cli.command.run(&ctx) {
        Ok(outcome) => match output::emit(&config, &outcome.result, outcome.table) {
            Ok(()) if outcome.failed => ExitCode::from(2),
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
        Err(e) => match e.downcast_ref::<MathFailure>() {
            Some(f) => {
                eprintln!("failed: {f}");
                let err = json!({ "kind": f.kind, "message": f.message, "detail": f.detail });
                if let Err(w) = output::emit_error(&config, &err) {
                    eprintln!("error: {w:#}");
                }
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
