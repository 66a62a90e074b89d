use std::io::Read;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand};
use serde::Serialize;

use sketchql::adaptation::Feedback;
use sketchql::db::Database;
use sketchql::decomposer::{decompose, reformat_to_cte};
use sketchql::pipeline::{Engine, PipelineConfig};
use sketchql::sample_data::{seed, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "sketchql", version, about = "CTE-structured text-to-SQL")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, env = "SKETCHQL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or extend the knowledge set from query logs and documents.
    Preprocess {
        #[arg(long)]
        logs: Option<PathBuf>,
        #[arg(long)]
        docs: Option<PathBuf>,
        /// Schema description file; defaults to introspecting the database.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Answer a natural-language question and print the response as JSON.
    Query { nl: String },
    /// Accept or reject the SQL produced for a request.
    #[command(group(ArgGroup::new("verdict").required(true).args(["accept", "reject"])))]
    Feedback {
        request_id: String,
        #[arg(long)]
        accept: bool,
        #[arg(long)]
        reject: bool,
        /// File holding the corrected SQL (reject only).
        #[arg(long, requires = "reject")]
        sql: Option<PathBuf>,
        #[arg(long)]
        note: Option<String>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Print the knowledge-set summary.
    Summary,
    /// Decompose a query (file or stdin) into its CTE sketch.
    Decompose { file: Option<PathBuf> },
    /// Write the seeded sports sample database to a file.
    SampleDb {
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => {
            let mut config = PipelineConfig::default();
            config.model = config.model.with_env()?;
            Ok(config)
        }
    }
}

fn engine(config: Option<&PathBuf>) -> Result<Engine> {
    Ok(Engine::open(load_config(config)?)?)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = cli.config.as_ref();
    match cli.command {
        Command::Preprocess { logs, docs, schema } => {
            if logs.is_none() && docs.is_none() && schema.is_none() {
                bail!("nothing to do: pass --logs, --docs or --schema");
            }
            let report = engine(config)?.run_preprocess(logs.as_deref(), docs.as_deref(), schema.as_deref())?;
            print_json(&report)
        }
        Command::Query { nl } => print_json(&engine(config)?.run_query(&nl)),
        Command::Feedback {
            request_id,
            accept,
            sql,
            note,
            ..
        } => {
            let corrected = sql
                .map(|p| std::fs::read_to_string(&p).with_context(|| p.display().to_string()))
                .transpose()?;
            let mut fb = if accept {
                Feedback::accept(request_id)
            } else {
                Feedback::reject(request_id, corrected)
            };
            fb.note = note;
            print_json(&engine(config)?.submit_feedback(&fb)?)
        }
        Command::Serve { port } => {
            let engine = Arc::new(engine(config)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let (listener, addr) = sketchql_service::bind(port).await?;
                eprintln!("listening on http://{addr}");
                sketchql_service::serve(engine, listener, shutdown_signal()).await
            })?;
            Ok(())
        }
        Command::Summary => print_json(&engine(config)?.summary()),
        Command::Decompose { file } => {
            let sql = match file {
                Some(p) => std::fs::read_to_string(&p).with_context(|| p.display().to_string())?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            print_json(&decompose(&reformat_to_cte(&sql)?)?)
        }
        Command::SampleDb { out, seed: s } => {
            if out.exists() {
                bail!("{} already exists", out.display());
            }
            let db = Database::open(&out)?;
            seed(&db, s)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}
