//! `mima` command-line front end: validation, fitting, model comparison,
//! OS prediction, cross-validation and synthetic data generation.

pub mod commands;
pub mod output;

use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mima_core::config::RunConfig;
use mima_core::{EndpointMode, Error, EvidenceSet, SharingStructure};

#[derive(Debug, Parser)]
#[command(
    name = "mima",
    version,
    about = "Multi-indication meta-analysis of log hazard ratios"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Evidence CSV.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; every chain and refit seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    /// Burn-in sweeps per chain.
    #[arg(long, global = true)]
    pub burnin: Option<usize>,
    /// Retained draws per chain.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Overrides `sharing` from the config.
    #[arg(long, global = true)]
    pub sharing: Option<SharingStructure>,
    /// Overrides `endpoint_mode` from the config.
    #[arg(long, global = true)]
    pub endpoint_mode: Option<EndpointMode>,
    /// Drops every record of this indication before fitting.
    #[arg(long, global = true, value_name = "LABEL")]
    pub exclude_indication: Option<String>,
    /// Independent conditional sds (psi) whatever the sharing structure.
    #[arg(long, global = true)]
    pub independent_psi: bool,
    /// One mixture indicator per indication for all surrogacy parameters.
    #[arg(long, global = true)]
    pub tie_mixture: bool,
    /// Common effect across trials within each indication.
    #[arg(long, global = true)]
    pub common_effect_within: bool,
    /// Keeps only estimates reported on or before this date (YYYY-MM-DD).
    #[arg(long, global = true, value_name = "DATE")]
    pub snapshot: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// PFS estimates from the independent-parameters univariate model.
    IpPfs,
    /// PFS estimates from the univariate model with the same sharing.
    Matched,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parses and checks an evidence file.
    Validate {
        /// Print the machine-readable report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Fits one model and writes summary, forest, convergence and fit tables.
    Fit {
        /// Also write raw draws to `draws.bin`.
        #[arg(long)]
        draws: bool,
    },
    /// Fits all five sharing structures and applies the DIC selection rule.
    Compare,
    /// Predicts OS effects from PFS estimates through the surrogate relationship.
    Predict {
        #[arg(long, value_enum, default_value = "matched")]
        mode: ModeArg,
        /// Adds the conditional variance to each predictive draw.
        #[arg(long)]
        include_psi: bool,
    },
    /// Leave-one-out validation of the surrogate relationship.
    Crossval,
    /// Generates a synthetic evidence set and its truth record.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 1,
            Self::Internal(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Input(m) | Self::Internal(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Row { .. }
            | Error::MissingColumn(_)
            | Error::NoRecords
            | Error::UnknownIndication(_)
            | Error::InvalidSpec(_)
            | Error::InvalidConfig(_)
            | Error::Config { .. }
            | Error::Csv(_)
            | Error::Prediction(_) => Self::Input(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn input_err(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

impl GlobalArgs {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn run_config(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| input_err(format!("{}: {e}", p.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.sampler.seed = s;
        }
        if let Some(n) = self.chains {
            c.sampler.n_chains = n;
        }
        if let Some(n) = self.burnin {
            c.sampler.burn_in = n;
        }
        if let Some(n) = self.samples {
            c.sampler.samples_per_chain = n;
        }
        if let Some(s) = self.sharing {
            c.spec.sharing = s;
        }
        if let Some(m) = self.endpoint_mode {
            c.spec.endpoint_mode = m;
        }
        if self.independent_psi {
            c.spec.sharing_psi = Some(SharingStructure::IP);
        }
        if self.tie_mixture {
            c.spec.tie_mixture_probabilities = true;
        }
        if self.common_effect_within {
            c.spec.common_effect_within_indication = true;
        }
        c.validate()?;
        Ok(c)
    }

    /// Raw evidence file text and the filtered set it yields.
    pub fn evidence(&self) -> CliResult<(Vec<u8>, EvidenceSet)> {
        let path = self.data.as_ref().ok_or_else(|| input_err("--data is required"))?;
        let bytes = std::fs::read(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return Err(Error::NoRecords.into());
        }
        let mut e = mima_core::parse_evidence(bytes.as_slice())?;
        if e.is_empty() {
            return Err(Error::NoRecords.into());
        }
        if let Some(date) = self.snapshot {
            e = e.snapshot(Some(date));
            if e.is_empty() {
                return Err(input_err(format!("no evidence reported on or before {date}")));
            }
        }
        if let Some(l) = &self.exclude_indication {
            e = e.exclude_indication(l)?;
            if e.is_empty() {
                return Err(input_err(format!("no evidence left after excluding `{l}`")));
            }
        }
        Ok((bytes, e))
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = self.out.clone().ok_or_else(|| input_err("--out is required"))?;
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Validate { json } => commands::validate(g, *json),
        Command::Fit { draws } => commands::fit(g, *draws),
        Command::Compare => commands::compare(g).map(|_| ()),
        Command::Predict { mode, include_psi } => commands::predict(g, *mode, *include_psi),
        Command::Crossval => commands::crossval(g),
        Command::Simulate { scenario } => commands::simulate(g, scenario),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
