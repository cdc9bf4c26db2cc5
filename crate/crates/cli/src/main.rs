use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use skillbase::embed::PrecomputedEmbeddings;
use skillbase::engine::{emit_report, observation_study, Engine, Method, Mode, ReportFormat, RunConfig, RunReport};
use skillbase::kb::KnowledgeBase;
use skillbase::skillgen::SkillStream;
use skillbase::{Error, Result};

#[derive(Parser)]
#[command(name = "skillbase", version, about = "Lifelong skill adapters with semantic-subspace aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skill stream and write it as JSON.
    GenStream {
        #[command(flatten)]
        run: RunArgs,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn every training skill in order and save the knowledge base.
    TrainStream {
        #[command(flatten)]
        run: RunArgs,
        /// Knowledge-base path (default: <output-dir>/kb.bin).
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Run one open-set query against a knowledge base.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Comma-separated input values.
        #[arg(long, value_delimiter = ',')]
        input: Vec<u32>,
        #[arg(long, default_value = "aggregate")]
        mode: Mode,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a knowledge base on every skill of the stream.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        kb: PathBuf,
        /// Inference mode; defaults to the method's own mode.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
    /// Train the method grid over several seeds and summarise forgetting.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "full,no-ggm,no-ina,no-sot,seq-ft")]
        methods: Vec<Method>,
    },
    /// Parameter-side versus semantic-side similarity study.
    Study {
        #[command(flatten)]
        run: RunArgs,
        /// Study this knowledge base instead of independently trained adapters.
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Knowledge-base utilities.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Re-emit a saved run report in another format.
    Report {
        /// A report.json written by train-stream or eval.
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// List the records of a knowledge-base file.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Run configuration: `--config` file first, then individual overrides.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Full JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Existing stream file; replaces the generated stream.
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Precomputed instruction embeddings (JSON object text -> vector).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    train_skills: Option<usize>,
    #[arg(long)]
    holdouts: Option<usize>,
    #[arg(long)]
    paraphrases: Option<usize>,
    #[arg(long)]
    train_episodes: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    subspace_rank: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<String>,
}

macro_rules! apply {
    ($cfg:expr, $args:expr, $($field:ident => $($target:ident).+),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$($target).+ = v; })*
    };
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        apply!(cfg, self,
            seed => seed,
            model_seed => model_seed,
            method => method,
            train_skills => stream.n_train_skills,
            holdouts => stream.n_holdout,
            paraphrases => stream.paraphrases,
            train_episodes => stream.train_episodes,
            eval_episodes => stream.eval_episodes,
            hidden => model.hidden,
            layers => model.layers,
            embed_dim => embedding.dim,
            rank => rank,
            subspace_rank => subspace_rank,
            gamma => gamma,
            tau => tau,
            lambda => lambda,
            lambda_s => lambda_s,
            eps => eps,
            lr => lr,
            epochs => epochs,
            batch_size => batch_size,
            max_steps => max_steps,
        );
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = Some(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn engine(&self) -> Result<Engine> {
        self.engine_with(self.config()?)
    }

    fn engine_with(&self, cfg: RunConfig) -> Result<Engine> {
        let engine = match &self.stream {
            Some(path) => Engine::with_stream(cfg, SkillStream::load(path)?)?,
            None => Engine::new(cfg)?,
        };
        match &self.embeddings {
            Some(path) => {
                let provider = PrecomputedEmbeddings::load(path, engine.cfg.embedding.dim)?;
                engine.with_embedder(Arc::new(provider))
            }
            None => Ok(engine),
        }
    }
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(cfg.output_dir.as_deref().unwrap_or("."))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.3}"))
}

fn print_summary(report: &RunReport) {
    println!(
        "{:>4}  {:<34} {:>6} {:>6} {:>9}",
        "id", "skill", "asr", "sr_gt", "fr"
    );
    for s in &report.skills {
        let name = if s.holdout { format!("{} (holdout)", s.name) } else { s.name.clone() };
        println!(
            "{:>4}  {:<34} {:>6.3} {:>6} {:>9}",
            s.skill_id,
            name,
            s.asr,
            s.sr_gt.map_or("-".into(), |g| format!("{g:.3}")),
            fmt_opt(s.fr)
        );
    }
    println!(
        "average asr {:.3}, average fr {}, holdout asr {}, routing {:.3}",
        report.average_asr,
        fmt_opt(report.average_fr),
        fmt_opt(report.holdout_asr),
        report.routing_accuracy
    );
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() || v.iter().any(|x| x.is_nan()) {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenStream { run, out } => {
            let engine = run.engine()?;
            match out {
                Some(path) => {
                    engine.stream.save(&path)?;
                    eprintln!("wrote {} skills to {}", engine.stream.skills.len(), path.display());
                }
                None => println!("{}", engine.stream.to_json()?),
            }
        }
        Command::TrainStream { run, kb } => {
            let engine = run.engine()?;
            let dir = output_dir(&engine.cfg);
            let n = engine.stream.config.n_train_skills;
            let out = engine.train_stream_with(|t, kb| {
                let sr = kb.records[t].sr_gt.unwrap_or(0.0);
                eprintln!("[{}/{n}] {} sr_gt={sr:.3}", t + 1, kb.records[t].name);
                Ok(())
            })?;
            let kb_path = kb.unwrap_or_else(|| dir.join("kb.bin"));
            if let Some(parent) = kb_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            out.kb.save(&kb_path)?;
            let report_path = emit_report(&out.report, ReportFormat::Json, &dir)?;
            write_json(&dir.join("timing.json"), &out.timing)?;
            print_summary(&out.report);
            eprintln!("knowledge base: {}", kb_path.display());
            eprintln!("report: {}", report_path.display());
        }
        Command::Infer {
            run,
            kb,
            instruction,
            input,
            mode,
            json,
        } => {
            let engine = run.engine()?;
            let kb = KnowledgeBase::load(&kb, &engine.cfg.fingerprint())?;
            let res = engine.infer(&kb, &instruction, &input, mode)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&res)?);
            } else {
                let values: Vec<String> = res
                    .values
                    .iter()
                    .map(|v| v.map_or("?".into(), |x| x.to_string()))
                    .collect();
                println!("output: {}", values.join(","));
                let name = kb.record(res.top1).map_or("", |r| r.name.as_str());
                println!("top-1: skill {} ({name})", res.top1);
                let omega: Vec<String> = kb
                    .records
                    .iter()
                    .zip(&res.omega)
                    .map(|(r, w)| format!("{}:{w:.3}", r.skill_id))
                    .collect();
                println!("omega: {}", omega.join(" "));
                let gates: String = res.gates.iter().map(|&g| if g { '1' } else { '0' }).collect();
                println!("gates: {gates}");
            }
        }
        Command::Eval { run, kb, mode, format } => {
            let engine = run.engine()?;
            let kb = KnowledgeBase::load(&kb, &engine.cfg.fingerprint())?;
            let mode = mode.unwrap_or_else(|| engine.cfg.method.inference_mode());
            let report = engine.evaluate_report(&kb, mode)?;
            let path = emit_report(&report, format, output_dir(&engine.cfg))?;
            print_summary(&report);
            eprintln!("report: {}", path.display());
        }
        Command::Ablate { run, seeds, methods } => {
            let base = run.config()?;
            let dir = output_dir(&base);
            let mut rows = Vec::new();
            for &method in &methods {
                let mut frs = Vec::new();
                let mut asrs = Vec::new();
                for &seed in &seeds {
                    let cfg = RunConfig {
                        seed,
                        method,
                        ..base.clone()
                    };
                    let out = run.engine_with(cfg)?.train_stream()?;
                    let run_dir = dir.join(format!("{method}-seed{seed}"));
                    emit_report(&out.report, ReportFormat::Json, &run_dir)?;
                    eprintln!(
                        "{method} seed {seed}: asr {:.3} fr {}",
                        out.report.average_asr,
                        fmt_opt(out.report.average_fr)
                    );
                    frs.push(out.report.average_fr.unwrap_or(f64::NAN));
                    asrs.push(out.report.average_asr);
                }
                rows.push(json!({
                    "method": method,
                    "seeds": seeds,
                    "average_fr": frs.iter().map(|f| if f.is_nan() { None } else { Some(*f) }).collect::<Vec<_>>(),
                    "median_fr": median(frs),
                    "median_asr": median(asrs),
                }));
            }
            write_json(&dir.join("ablation.json"), &rows)?;
            println!("{:<10} {:>10} {:>10}", "method", "median fr", "median asr");
            for r in &rows {
                println!(
                    "{:<10} {:>10} {:>10}",
                    r["method"].as_str().unwrap_or(""),
                    fmt_opt(r["median_fr"].as_f64()),
                    fmt_opt(r["median_asr"].as_f64())
                );
            }
        }
        Command::Study { run, kb, json } => {
            let engine = run.engine()?;
            let kb = match kb {
                Some(path) => {
                    let kb = KnowledgeBase::load(&path, &engine.cfg.fingerprint())?;
                    engine.check_kb(&kb)?;
                    kb
                }
                None => engine.train_independent()?,
            };
            let study = observation_study(&engine, &kb)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&study)?);
            } else {
                println!("skills: {:?}", study.skill_ids);
                println!("spearman(parameter, semantic): {:.3}", study.spearman);
                println!("spearman(semantic, primitive overlap): {:.3}", study.semantic_vs_relatedness);
                println!(
                    "mean cross-skill similarity: A {:.3}, B {:.3}",
                    study.mean_a_similarity, study.mean_b_similarity
                );
                let profile: Vec<String> = study.layer_profile.iter().map(|v| format!("{v:.4}")).collect();
                println!("mean |dW| per layer: {}", profile.join(" "));
            }
        }
        Command::Kb {
            command: KbCommand::Inspect { path, json },
        } => {
            let kb = KnowledgeBase::load_unchecked(&path)?;
            let summary = kb.summary();
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{summary}");
            }
        }
        Command::Report { input, format, out } => {
            let report = RunReport::load(&input)?;
            let path = emit_report(&report, format, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
