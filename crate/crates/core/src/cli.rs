//! Command-line driver.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed verification,
//! empty training set), 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::keys::Keystore;
use crate::ledger::{ChainStatus, Ledger, PayloadType, PortableProfile};
use crate::model::FactorModel;
use crate::ratings::RatingMatrix;
use crate::sim::{self, RoundMetrics, SimulationConfig};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "consentrec", version, about = "Consent-gated latent-factor recommender and filter-bubble simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a `user,event,value` CSV and write a validated matrix file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model by SGD, optionally only on ledger-consented rows.
    Train(TrainArgs),
    /// Report objective and RMSE of a model on a matrix.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Print the top-N recommendations for one user.
    Recommend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        user: usize,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Keep events the user already rated.
        #[arg(long)]
        include_observed: bool,
    },
    /// Run the train/engage feedback loop on synthetic community data.
    Simulate(SimulateArgs),
    /// Operate the consent ledger.
    #[command(subcommand)]
    Ledger(LedgerCommand),
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Half-width of the uniform initialization range.
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    /// Early-stop threshold on relative objective change; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    pub tolerance: f64,
    /// Visit observations in sorted order instead of shuffling.
    #[arg(long)]
    pub no_shuffle: bool,
}

impl HyperArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            shuffle: !self.no_shuffle,
            tolerance: self.tolerance,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Fraction of observations held out for RMSE.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Gate training on consent recorded in this ledger.
    #[arg(long, requires = "keys")]
    pub ledger: Option<PathBuf>,
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Tokens credited to each consenting user per run.
    #[arg(long, default_value_t = 1)]
    pub reward: i64,
    /// Model JSON output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report JSON output path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 40)]
    pub users: usize,
    #[arg(long, default_value_t = 40)]
    pub events: usize,
    #[arg(long, default_value_t = 2)]
    pub communities: usize,
    #[arg(long, default_value_t = 0.5)]
    pub in_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub cross_rate: f64,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Recommendation list length the fragmentation index is measured on.
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    /// Unobserved recommendations each user engages with per round.
    #[arg(long, default_value_t = 2)]
    pub accept_top: usize,
    #[arg(long, default_value_t = 4.0)]
    pub accept_value: f64,
    /// Retrain each round from the initial factors instead of the previous model.
    #[arg(long)]
    pub fresh_retrain: bool,
    /// Metrics JSON output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV copy of the metrics.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AppendKind {
    Post,
    Credit,
}

#[derive(Debug, Subcommand)]
pub enum LedgerCommand {
    /// Create a ledger file holding only the genesis block.
    Init {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Generate a seeded keystore for users 0..N.
    Keygen {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        users: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Append a signed post or token credit.
    Append {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        user: usize,
        #[arg(long, value_enum)]
        kind: AppendKind,
        /// Post text, or the credit amount.
        #[arg(long, allow_hyphen_values = true)]
        payload: String,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Grant or revoke training consent.
    Consent {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        user: usize,
        #[arg(long, conflicts_with = "revoke", required_unless_present = "revoke")]
        grant: bool,
        #[arg(long)]
        revoke: bool,
        #[arg(long)]
        timestamp: Option<u64>,
    },
    /// Check the hash chain and signatures.
    Verify {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Print a user's consent and token balance.
    Balance {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        user: usize,
    },
    /// Export a user's blocks as a portable profile.
    Export {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        user: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a portable profile and reconstruct the account.
    Import {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn now_or(timestamp: Option<u64>) -> u64 {
    timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Runs an already-parsed command, returning the exit code.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Ingest { input, out: dest } => {
            let matrix = RatingMatrix::load_csv(&input)?;
            matrix.write_csv(&dest)?;
            say(
                out,
                format_args!(
                    "ingested {} observations ({} users x {} events, density {:.4})",
                    matrix.len(),
                    matrix.n_users(),
                    matrix.n_events(),
                    matrix.density()
                ),
            )?;
            Ok(EXIT_OK)
        }
        Command::Train(args) => cmd_train(args, out),
        Command::Eval { model, matrix } => {
            let model = FactorModel::load(&model)?;
            let matrix = RatingMatrix::load_csv(&matrix)?;
            #[derive(Serialize)]
            struct EvalReport {
                objective: f64,
                rmse: f64,
                n_observations: usize,
            }
            print_json(
                out,
                &EvalReport {
                    objective: model.objective(&matrix)?,
                    rmse: trainer::rmse(&model, &matrix)?,
                    n_observations: matrix.len(),
                },
            )?;
            Ok(EXIT_OK)
        }
        Command::Recommend {
            model,
            matrix,
            user,
            n,
            include_observed,
        } => {
            let model = FactorModel::load(&model)?;
            let matrix = RatingMatrix::load_csv(&matrix)?;
            model.check_matches(&matrix)?;
            let recs = sim::top_k(&model, &matrix, user, n, !include_observed)?;
            print_json(out, &recs)?;
            Ok(EXIT_OK)
        }
        Command::Simulate(args) => cmd_simulate(args, out),
        Command::Ledger(cmd) => cmd_ledger(cmd, out),
    }
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let config = args.hyper.train_config();
    config.validate()?;
    let full = RatingMatrix::load_csv(&args.matrix)?;

    let mut gate = None;
    let matrix = match &args.ledger {
        Some(ledger_path) => {
            let keys_path = args.keys.as_ref().expect("clap enforces --keys with --ledger");
            let ledger = load_verified(ledger_path)?;
            let keys = Keystore::load(keys_path)?;
            let gated = ledger.consented_ratings(&full, &keys.registry())?;
            gate = Some((ledger_path, ledger, keys));
            gated
        }
        None => full,
    };
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }

    let (train_set, holdout) = matrix.split_holdout(args.holdout, config.seed)?;
    let model = FactorModel::init(
        matrix.n_users(),
        matrix.n_events(),
        args.hyper.k,
        args.hyper.gamma,
        config.seed,
        args.hyper.scale,
    )?;
    let (model, report) = trainer::train(model, &train_set, &config)?;
    model.save(&args.out)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }

    let final_objective = report.final_loss().unwrap_or(f64::NAN);
    say(out, format_args!("final objective: {final_objective}"))?;
    if holdout.is_empty() {
        say(out, format_args!("holdout rmse: n/a"))?;
    } else {
        say(out, format_args!("holdout rmse: {}", trainer::rmse(&model, &holdout)?))?;
    }

    if let Some((ledger_path, mut ledger, keys)) = gate {
        if args.reward > 0 {
            let timestamp = now_or(args.timestamp);
            let before = ledger.len();
            for key in keys.iter() {
                if !matrix.user_ratings(key.user_index).is_empty() {
                    ledger.credit_tokens(&key.signing_key, args.reward, timestamp)?;
                }
            }
            Ledger::append_to_file(ledger_path, &ledger.blocks()[before..])?;
            say(
                out,
                format_args!(
                    "credited {} tokens to each of {} consenting users",
                    args.reward,
                    ledger.len() - before
                ),
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(args: SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    let config = SimulationConfig {
        n_users: args.users,
        n_events: args.events,
        n_communities: args.communities,
        in_rate: args.in_rate,
        cross_rate: args.cross_rate,
        rounds: args.rounds,
        k: args.hyper.k,
        gamma: args.hyper.gamma,
        init_scale: args.hyper.scale,
        train: args.hyper.train_config(),
        top_n: args.top_n,
        accept_top: args.accept_top,
        accept_value: args.accept_value,
        holdout: args.holdout,
        warm_start: !args.fresh_retrain,
    };
    let run = sim::run_simulation(&config, args.hyper.seed)?;
    write_json(&args.out, &run.metrics)?;
    if let Some(path) = &args.csv {
        write_file(path, &RoundMetrics::to_csv(&run.metrics))?;
    }
    for m in &run.metrics {
        say(
            out,
            format_args!(
                "round {}: fragmentation {:.4}, observations {}",
                m.round, m.fragmentation_index, m.n_observations
            ),
        )?;
    }
    Ok(EXIT_OK)
}

/// Loads a ledger file and refuses to work on a broken chain.
fn load_verified(path: &Path) -> Result<Ledger> {
    let ledger = Ledger::load(path)?;
    match ledger.verify() {
        ChainStatus::Valid => Ok(ledger),
        ChainStatus::Invalid { index, reason } => Err(Error::VerificationFailure(format!(
            "{} is invalid at block {index}: {reason}",
            path.display()
        ))),
    }
}

fn cmd_ledger(cmd: LedgerCommand, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        LedgerCommand::Init { ledger, timestamp } => {
            if ledger.exists() {
                return Err(Error::InvalidParameter(format!(
                    "{} already exists; ledgers are append-only",
                    ledger.display()
                )));
            }
            Ledger::new(now_or(timestamp)).save(&ledger)?;
            say(out, format_args!("initialized {}", ledger.display()))?;
        }
        LedgerCommand::Keygen { keys, users, seed } => {
            Keystore::generate(users, seed).save(&keys)?;
            say(out, format_args!("wrote {users} keys to {}", keys.display()))?;
        }
        LedgerCommand::Append {
            ledger: path,
            keys,
            user,
            kind,
            payload,
            timestamp,
        } => {
            let mut ledger = load_verified(&path)?;
            let keys = Keystore::load(&keys)?;
            let key = &keys.get(user)?.signing_key;
            let ts = now_or(timestamp);
            let block = match kind {
                AppendKind::Post => ledger.append_event(key, PayloadType::Post, payload.into_bytes(), ts)?,
                AppendKind::Credit => {
                    let amount: i64 = payload.trim().parse().map_err(|e| {
                        Error::InvalidPayload(format!("credit amount {payload:?}: {e}"))
                    })?;
                    ledger.credit_tokens(key, amount, ts)?
                }
            };
            Ledger::append_to_file(&path, std::slice::from_ref(&block))?;
            say(out, format_args!("appended block {}", block.index))?;
        }
        LedgerCommand::Consent {
            ledger: path,
            keys,
            user,
            grant,
            revoke: _,
            timestamp,
        } => {
            let mut ledger = load_verified(&path)?;
            let keys = Keystore::load(&keys)?;
            let block = ledger.set_consent(&keys.get(user)?.signing_key, grant, now_or(timestamp))?;
            Ledger::append_to_file(&path, std::slice::from_ref(&block))?;
            let word = if grant { "granted" } else { "revoked" };
            say(out, format_args!("consent {word} for user {user} (block {})", block.index))?;
        }
        LedgerCommand::Verify { ledger } => {
            let blocks = crate::ledger::read_blocks(&ledger)?;
            return match crate::ledger::verify_chain(&blocks) {
                ChainStatus::Valid => {
                    say(out, format_args!("valid"))?;
                    Ok(EXIT_OK)
                }
                ChainStatus::Invalid { index, reason } => {
                    say(out, format_args!("invalid at block {index}: {reason}"))?;
                    Ok(EXIT_DOMAIN)
                }
            };
        }
        LedgerCommand::Balance { ledger, keys, user } => {
            let ledger = load_verified(&ledger)?;
            let keys = Keystore::load(&keys)?;
            print_json(out, &ledger.account(&keys.get(user)?.public_key(), user))?;
        }
        LedgerCommand::Export {
            ledger,
            keys,
            user,
            out: dest,
        } => {
            let ledger = load_verified(&ledger)?;
            let keys = Keystore::load(&keys)?;
            let profile = ledger.export_profile(&keys.get(user)?.public_key())?;
            write_file(&dest, &(profile.to_json() + "\n"))?;
            say(out, format_args!("exported {} blocks to {}", profile.blocks.len(), dest.display()))?;
        }
        LedgerCommand::Import { profile, out: dest } => {
            let text = fs::read_to_string(&profile).map_err(|e| Error::io(&profile, e))?;
            let account = PortableProfile::from_json(&text)?.import()?;
            if let Some(dest) = dest {
                write_json(&dest, &account)?;
            }
            print_json(out, &account)?;
        }
    }
    Ok(EXIT_OK)
}
