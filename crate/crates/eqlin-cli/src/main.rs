//! `eqlin`: analyze finite softmax next-token predictors from the command line.
//!
//! Exit codes: 0 success or equivalent, 1 analysis-negative, 2 structural or usage error.

mod commands;
mod report;
mod selectors;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Default comparison tolerance when neither --tol nor EQLIN_TOL is given.
pub const DEFAULT_TOL: f64 = 1e-7;

#[derive(Debug, Parser)]
#[command(name = "eqlin", version, about = "Equivalence and linear-property analysis of softmax next-token predictors")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Emit the report as JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Comparison tolerance (relative to the natural scale of each check).
    #[arg(long, global = true, env = "EQLIN_TOL")]
    pub tol: Option<f64>,
    /// Relative singular-value cutoff for numerical rank.
    #[arg(long, global = true, default_value_t = 1e-12)]
    pub rank_tol: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dimensions, effective complexity k and diversity of a model.
    Inspect { model: PathBuf },
    /// Compare two models: distributions, EL certificate, L-equivalence.
    Equiv {
        model_a: PathBuf,
        model_b: PathBuf,
        /// Compare the conditional distributions (default when no other check is requested).
        #[arg(long)]
        check: bool,
        /// Construct and verify an extended-linear certificate.
        #[arg(long)]
        certificate: bool,
        /// Write the certificate JSON here (implies --certificate).
        #[arg(long)]
        cert_out: Option<PathBuf>,
        /// Look for an invertible linear map between the models.
        #[arg(long)]
        l_equiv: bool,
    },
    /// Generate a distribution-equivalent model of a chosen dimension.
    MakeEquivalent {
        model: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long, value_enum, default_value_t = DistortionArg::None)]
        distortion: DistortionArg,
        /// Strength of the distortion (scale for linear/square, amplitude for cosine).
        #[arg(long)]
        strength: Option<f64>,
        /// Noise added to unembeddings in directions invisible to the embeddings.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth certificate path (default: <out>.cert.json).
        #[arg(long)]
        cert_out: Option<PathBuf>,
    },
    /// Detect a linear property on one model.
    Prop {
        model: PathBuf,
        #[command(subcommand)]
        property: PropCommand,
    },
    /// Check that a property holds on both models of an equivalent pair or on neither.
    Verify {
        model_a: PathBuf,
        model_b: PathBuf,
        /// Certificate A → B (computed when omitted).
        #[arg(long)]
        cert: Option<PathBuf>,
        #[command(subcommand)]
        property: VerifyCommand,
    },
    /// Write projected embeddings or unembeddings as CSV.
    ExportProjection {
        model: PathBuf,
        #[arg(long, value_enum)]
        onto: Onto,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic model (and its planted truth, if any).
    Synth {
        /// none | diversity | low-rank:F,G,C | glr:G,GAMMA,IN_M | parallel:BETA,F | paraphrase:BETA,ANSWERS | tautology:G,NOISE | rank-one | pair-a | pair-b
        #[arg(long)]
        plant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 12)]
        s: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistortionArg {
    None,
    Linear,
    Cosine,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Onto {
    #[value(name = "M")]
    M,
    #[value(name = "N")]
    N,
    #[value(name = "G")]
    G,
    #[value(name = "pca2")]
    Pca2,
}

#[derive(Debug, Clone, Subcommand)]
pub enum PropCommand {
    /// Parallelism of g(y1)−g(y0) and g(y3)−g(y2), by geometry and by log-ratios.
    Parallel {
        /// Four comma-separated tokens y0,y1,y2,y3.
        #[arg(long)]
        tokens: String,
    },
    /// Relational linearity of a query on Γ, optionally with a subspace witness.
    Linrep {
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "G")]
        gamma: String,
        /// Comma-separated context sequences (default: every s with s⌢q sampled).
        #[arg(long)]
        contexts: Option<String>,
        /// Token pair yi,yj for a linear-subspace witness.
        #[arg(long)]
        witness: Option<String>,
    },
    /// Linear probe for a query over a token subset.
    Probe {
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "G")]
        gamma: String,
        #[arg(long)]
        tokens: String,
    },
    /// Steering vector for one query that leaves other queries untouched.
    Steer {
        #[arg(long)]
        query: String,
        #[arg(long)]
        others: String,
        #[arg(long, default_value = "G")]
        gamma: String,
    },
    /// Whether q1 paraphrases q2 with answers paired in order.
    Paraphrase {
        #[arg(long)]
        q1: String,
        #[arg(long)]
        answers1: String,
        #[arg(long)]
        q2: String,
        #[arg(long)]
        answers2: String,
    },
    /// Whether a query's reply is independent of its context.
    Tautology {
        #[arg(long)]
        query: String,
    },
}

#[derive(Debug, Clone, Subcommand)]
pub enum VerifyCommand {
    /// Relational linearity transferred along the certificate.
    Linrep {
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "G")]
        gamma: String,
    },
    /// Parallelism inside N of two token differences.
    Parallel {
        #[arg(long)]
        tokens: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match commands::run(&cli) {
        Ok(mut report) => {
            report.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
            if cli.common.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(err) => {
            if cli.common.json {
                let body = serde_json::json!({ "error": format!("{err:#}") });
                println!("{}", serde_json::to_string_pretty(&body).expect("error serializes"));
            }
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
