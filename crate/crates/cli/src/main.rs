//! `dynamo`: batch front end for the spectral toolkit.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
//! failures (the manifest is still written).

mod commands;
mod config;
mod output;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<dynamo_core::Error> for CliError {
    fn from(e: dynamo_core::Error) -> Self {
        use dynamo_core::Error as E;
        match e {
            E::InvalidTruncation(_)
            | E::InvalidScale(_)
            | E::NotMeanFree(_)
            | E::UndefinedDirection
            | E::InvalidParameter(_)
            | E::Format(_)
            | E::Io(_)
            | E::TooLarge { .. } => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dynamo", version, about = "Alpha-effect and modal dynamo toolkit on the 3-torus")]
struct Cli {
    /// TOML file with flag values; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "DYNAMO_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized probes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build flow fields.
    #[command(subcommand)]
    Field(FieldCmd),
    /// Alpha-matrix computations.
    #[command(subcommand)]
    Alpha(AlphaCmd),
    /// Modal eigenvalues of L(j, ε).
    #[command(subcommand)]
    Spectrum(SpectrumCmd),
    /// Time-step the modal equation and fit the growth rate.
    Evolve(EvolveArgs),
    /// Whole-space data from bands of modal eigenfunctions.
    #[command(subcommand)]
    Bloch(BlochCmd),
    /// Glued whole-space flow catalogs.
    #[command(subcommand)]
    Glue(GlueCmd),
}

#[derive(Subcommand, Debug)]
enum FieldCmd {
    /// Write an ABC flow snapshot.
    MakeAbc(MakeAbcArgs),
}

#[derive(Subcommand, Debug)]
enum AlphaCmd {
    /// Alpha-matrix eigenvalues over a set of directions.
    Scan(AlphaScanArgs),
    /// Alpha-matrix and eigen-decomposition for one direction.
    Matrix(AlphaMatrixArgs),
}

#[derive(Subcommand, Debug)]
enum SpectrumCmd {
    /// Leading eigenpairs of L(j, ε).
    Eigs(EigsArgs),
    /// Small eigenvalues against their first-order predictions.
    Kato(KatoArgs),
}

#[derive(Subcommand, Debug)]
enum BlochCmd {
    /// Sample the normalized band datum on a box.
    Synth(SynthArgs),
    /// Box masses against the coefficient-space norm.
    Parseval(ParsevalArgs),
}

#[derive(Subcommand, Debug)]
enum GlueCmd {
    /// Plan a block catalog.
    Build(GlueBuildArgs),
    /// Re-measure every static inequality of a catalog.
    Check(GlueCheckArgs),
}

/// Flow selection shared by most subcommands.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FlowArgs {
    /// ABC amplitudes `a,b,c` (default 1,1,1).
    #[arg(long, allow_hyphen_values = true)]
    pub abc: Option<String>,
    /// Flow snapshot file instead of an ABC flow.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Amplitude factor applied to the flow (default 1).
    #[arg(long)]
    pub delta0: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CellArgs {
    /// Cell solver: direct or neumann.
    #[arg(long)]
    pub method: Option<String>,
    /// Cell solver tolerance (default 1e-12).
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MakeAbcArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    /// Truncation (default 1).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AlphaScanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub cell: CellArgs,
    /// default, axes, cube, or icosphere:<levels>.
    #[arg(long)]
    pub directions: Option<String>,
    /// Certification threshold (default 1e-6·‖M‖_F).
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AlphaMatrixArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub cell: CellArgs,
    /// Direction `j` (default 1,0,0).
    #[arg(long, allow_hyphen_values = true)]
    pub j: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EigsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    /// Modal truncation (default 3).
    #[arg(long)]
    pub n: Option<usize>,
    /// Bloch wave vector (default 0.1,0,0).
    #[arg(long, allow_hyphen_values = true)]
    pub j: Option<String>,
    /// Diffusivity (default 1).
    #[arg(long)]
    pub eps: Option<f64>,
    /// Number of eigenpairs (default 3).
    #[arg(long)]
    pub count: Option<usize>,
    /// dense or krylov.
    #[arg(long)]
    pub solver: Option<String>,
    /// Relative residual tolerance (default 1e-8).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Write each eigenvector as a field snapshot.
    #[arg(long)]
    pub save_eigvec: Option<bool>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct KatoArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    /// Modal truncation (default 3).
    #[arg(long)]
    pub n: Option<usize>,
    /// Direction of `j` (default 1,0,0).
    #[arg(long, allow_hyphen_values = true)]
    pub direction: Option<String>,
    /// Decreasing magnitudes of `j` (default 0.01,0.005,0.0025).
    #[arg(long)]
    pub jmags: Option<String>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvolveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    /// Modal truncation (default 2).
    #[arg(long)]
    pub n: Option<usize>,
    /// Bloch wave vector (default 0.1,0,0).
    #[arg(long, allow_hyphen_values = true)]
    pub j: Option<String>,
    /// Diffusivity (default 1).
    #[arg(long)]
    pub eps: Option<f64>,
    /// Time step (default from the stability estimate).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Final time (default 20).
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Steps between trace samples (default 1).
    #[arg(long)]
    pub sample_every: Option<usize>,
    /// `eig` (leading eigenvector) or a field snapshot path.
    #[arg(long)]
    pub init: Option<String>,
    /// Re-project when the relative modal divergence exceeds this.
    #[arg(long)]
    pub project_divergence: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BandArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    /// Modal truncation (default 2).
    #[arg(long)]
    pub n: Option<usize>,
    /// Band center `j⋆` (default 0.2,0,0).
    #[arg(long, allow_hyphen_values = true)]
    pub j_star: Option<String>,
    /// Band half-width `J` (default 0.1).
    #[arg(long)]
    pub half_width: Option<f64>,
    /// Gauss-Legendre nodes per axis (default 5).
    #[arg(long)]
    pub order: Option<usize>,
    /// Diffusivity (default 1).
    #[arg(long)]
    pub eps: Option<f64>,
    /// Scale ratio (default 0.9).
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Physical grid spacing (default resolves the highest frequency).
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub band: BandArgs,
    /// Box half-width (default 10).
    #[arg(long)]
    pub r#box: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ParsevalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub band: BandArgs,
    /// Largest box half-width (default 40/J).
    #[arg(long)]
    pub r_max: Option<f64>,
    /// Also report the concentration radius for this mass deficit.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GlueBuildArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flow: FlowArgs,
    /// Separation constant (default 10).
    #[arg(long)]
    pub u_const: Option<f64>,
    /// Scale ratio (default 0.9).
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Largest scale index (default 3).
    #[arg(long)]
    pub n_max: Option<u32>,
    /// Copies per scale (default 3).
    #[arg(long)]
    pub l_max: Option<u32>,
    /// Odd cutoff ramp degree (default 5).
    #[arg(long)]
    pub ramp_degree: Option<u32>,
    /// Band half-width for the sinc tail model (default 0.1).
    #[arg(long)]
    pub tail_width: Option<f64>,
    /// Explicit `C` in `tail(R) ≤ C/R`, overriding the sinc model.
    #[arg(long)]
    pub tail_constant: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GlueCheckArgs {
    /// Catalog document (default <out>/catalog.toml).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Diffusivities for datum norms (default 0.9,0.81,0.729).
    #[arg(long)]
    pub eps: Option<String>,
    /// Times for block coverage (default 0.5,1.5,2.5,3.5).
    #[arg(long)]
    pub times: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dynamo: {e}");
            ExitCode::from(e.code())
        }
    }
}
