use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use pslab_cli::AppState;
use pslab_core::api::{
    train_job, Envelope, ExperimentRequest, FitMapRequest, ForwardRequest, GridRequest, Lab, PatchscopeRequest,
    RunRequest, TrainJob,
};
use pslab_core::fixtures::Fixtures;
use pslab_core::patchscope::{GridSpec, PairOptions};
use pslab_core::{load_model, Error};

#[derive(Parser)]
#[command(name = "pslab", version, about = "Patchscopes lab: train toy transformers, patch hidden states, run experiments")]
struct Cli {
    /// Default seed for anything seeded that does not carry its own seed.
    #[arg(long, global = true, env = "PSLAB_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

/// Where named models come from. A model argument that is an existing
/// directory is loaded directly; otherwise it is looked up by id.
#[derive(clap::Args, Clone, Default)]
struct Models {
    /// Model directory to register (repeatable).
    #[arg(long = "model-dir", value_name = "DIR")]
    model_dirs: Vec<PathBuf>,
    /// Fixture directory; registers the three fixture models.
    #[arg(long, value_name = "DIR")]
    fixtures: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a text corpus (one example per line).
    Train { corpus: PathBuf, config: PathBuf, out: PathBuf },
    /// Tokenize a prompt and greedily continue it.
    Run {
        model: String,
        prompt: String,
        #[arg(long, default_value_t = 0)]
        max_new: usize,
        #[command(flatten)]
        models: Models,
    },
    /// Logit-lens top-k at every layer and position.
    Forward {
        model: String,
        text: String,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[command(flatten)]
        models: Models,
    },
    /// Run one Patchscope from a JSON configuration.
    Patch {
        config: PathBuf,
        /// Print the full response envelope as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        models: Models,
    },
    /// Run a source-layer by target-layer grid from a JSON spec.
    Grid {
        spec: PathBuf,
        /// Print the long-format CSV instead of JSON.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        models: Models,
    },
    /// Run a named experiment; the spec file may be omitted.
    Experiment {
        name: String,
        spec: Option<PathBuf>,
        /// Default fixture directory when the spec names none.
        #[arg(long, value_name = "DIR")]
        fixtures: Option<PathBuf>,
        /// Directory for the report and heatmap CSVs.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Fit an affine map between two models' hidden states.
    FitMap {
        src: String,
        tgt: String,
        /// `l` or `l:l_target`.
        layers: String,
        /// Text file with one fitting prompt per line.
        corpus: PathBuf,
        /// Write the mapping here instead of printing it.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        ridge: f64,
        #[command(flatten)]
        models: Models,
    },
    /// Serve the JSON API.
    Serve {
        addr: String,
        model_dirs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        fixtures: Option<PathBuf>,
    },
    /// Build (or verify) the three fixture models.
    Fixtures { dir: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Usage(format!("invalid JSON in {}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn print_json<T: Serialize>(value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    emit(&format!("{text}\n"));
    Ok(())
}

/// Writes to stdout, treating a closed pipe as the reader being done.
fn emit(text: &str) {
    let mut out = io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() != io::ErrorKind::BrokenPipe {
            eprintln!("error: writing output: {e}");
        }
    }
}

/// Opens a lab and resolves each model argument to a registered id.
fn open(models: &Models, args: &[&str], seed: u64) -> Result<(Lab, Vec<String>), Failure> {
    let mut dirs = models.model_dirs.clone();
    let mut ids = Vec::new();
    for arg in args {
        let path = Path::new(arg);
        if path.is_dir() {
            ids.push(load_model(path)?.model_id().to_string());
            if !dirs.iter().any(|d| d == path) {
                dirs.push(path.to_path_buf());
            }
        } else {
            ids.push(arg.to_string());
        }
    }
    let lab = Lab::open(&dirs, models.fixtures.as_deref())?.with_default_seed(seed);
    Ok((lab, ids))
}

fn parse_layers(text: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("layers must be `l` or `l:l_target`, got {text:?}"));
    let mut parts = text.split(':');
    let l = parts.next().and_then(|p| p.trim().parse().ok()).ok_or_else(bad)?;
    let lt = match parts.next() {
        Some(p) => p.trim().parse().map_err(|_| bad())?,
        None => l,
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok((l, lt))
}

fn execute(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Train { corpus, config, out } => {
            let job: TrainJob = read_json(&config)?;
            let lines = read_lines(&corpus)?;
            let summary = train_job(&lines, &job, &out)?;
            print_json(&Envelope::new(&job, summary)?)
        }
        Command::Run { model, prompt, max_new, models } => {
            let (lab, ids) = open(&models, &[&model], seed)?;
            let req = RunRequest {
                model: ids[0].clone(),
                prompt,
                max_new,
            };
            let out = lab.run(&req)?;
            let ids: Vec<String> = out.ids.iter().map(usize::to_string).collect();
            let mut text = format!("{}\n{}\n", out.tokens.join(" "), ids.join(" "));
            if let Some(generated) = out.generated {
                text.push_str(&generated);
                text.push('\n');
            }
            emit(&text);
            Ok(())
        }
        Command::Forward { model, text, topk, models } => {
            let (lab, ids) = open(&models, &[&model], seed)?;
            let req = ForwardRequest {
                model: ids[0].clone(),
                text,
                topk,
            };
            let data = lab.forward(&req)?;
            print_json(&Envelope::new(&req, data)?)
        }
        Command::Patch { config, json, models } => {
            let req: PatchscopeRequest = read_json(&config)?;
            let (lab, _) = open(&models, &[], seed)?;
            let data = lab.patchscope(&req, config.parent())?;
            if json {
                return print_json(&Envelope::new(&req, data)?);
            }
            let mut text = format!("{}\n", data.text);
            if let Some(success) = data.success {
                text.push_str(&format!("success: {success}\n"));
            }
            emit(&text);
            Ok(())
        }
        Command::Grid { spec, csv, models } => {
            let spec: GridSpec = read_json(&spec)?;
            let (lab, _) = open(&models, &[], seed)?;
            let grid = lab.grid(
                &GridRequest {
                    spec: spec.clone(),
                    cancel_token: None,
                },
                None,
            )?;
            if csv {
                emit(&grid.to_csv());
                return Ok(());
            }
            print_json(&Envelope::new(&spec, grid)?)
        }
        Command::Experiment { name, spec, fixtures, out } => {
            let req: ExperimentRequest = match &spec {
                Some(path) => read_json(path)?,
                None => ExperimentRequest::default(),
            };
            let lab = Lab::open::<&Path>(&[], None)?.with_default_seed(seed);
            let lab = match fixtures {
                Some(dir) => lab.with_fixture_dir(dir),
                None => lab,
            };
            let resolved = lab.experiment_spec(&name, &req)?;
            let report = lab.experiment(&name, &req)?;
            if let Some(dir) = out {
                for path in report.write(&dir)? {
                    eprintln!("wrote {}", path.display());
                }
            }
            print_json(&Envelope::new(&resolved, report)?)
        }
        Command::FitMap {
            src,
            tgt,
            layers,
            corpus,
            out,
            ridge,
            models,
        } => {
            let (layer, target_layer) = parse_layers(&layers)?;
            let lines = read_lines(&corpus)?;
            let (lab, ids) = open(&models, &[&src, &tgt], seed)?;
            let req = FitMapRequest {
                source_model: ids[0].clone(),
                target_model: ids[1].clone(),
                layer,
                target_layer,
                corpus: lines,
                pairs: PairOptions::default(),
                ridge,
            };
            let data = lab.fit_map(&req)?;
            match out {
                Some(path) => {
                    let text = serde_json::to_string(&data.mapping).map_err(Error::from)?;
                    fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                    print_json(&serde_json::json!({
                        "mapping": path,
                        "n_pairs": data.n_pairs,
                        "residual": data.residual,
                        "identity_residual": data.identity_residual,
                    }))
                }
                None => print_json(&data),
            }
        }
        Command::Serve { addr, model_dirs, fixtures } => {
            let lab = Lab::open(&model_dirs, fixtures.as_deref())?.with_default_seed(seed);
            let state = AppState::new(lab);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: addr.clone().into(), source: e })?;
            runtime
                .block_on(async {
                    let listener = tokio::net::TcpListener::bind(&addr).await?;
                    eprintln!("listening on http://{}", listener.local_addr()?);
                    pslab_cli::serve(listener, state).await
                })
                .map_err(|e| Error::Io { path: addr.into(), source: e })?;
            Ok(())
        }
        Command::Fixtures { dir } => {
            let fx = Fixtures::ensure(&dir)?;
            print_json(&fx.models().iter().map(|m| (m.model_id(), m.checksum())).collect::<Vec<_>>())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
