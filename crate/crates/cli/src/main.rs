use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use liveedit::benchmark::eval::trajectory_csv;
use liveedit::benchmark::studies::{self, rows_csv, summarize, Axis, StudyRow};
use liveedit::benchmark::{evaluate, lifelong_run, read_jsonl, Benchmark, EditRecord, Metrics};
use liveedit::config::{RunConfig, Variant};
use liveedit::editor::Editor;
use liveedit::numerics::Coverage;
use liveedit::repository::Repository;
use liveedit::surrogate::Surrogate;
use liveedit::training::gradcheck_suite;
use liveedit::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_FINGERPRINT: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_THRESHOLD: u8 = 5;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "liveedit", version, about = "Lifelong VLLM editing on a synthetic surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Repository file (default: <out>/repository.json).
    #[arg(long)]
    repo: Option<PathBuf>,
    /// Editor checkpoint (default: <out>/editor.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Surrogate checkpoint (default: <out>/surrogate.json).
    #[arg(long)]
    surrogate: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark and pretrain + freeze the surrogate.
    Pretrain(Common),
    /// Train the editor against a frozen surrogate.
    TrainEditor(Common),
    /// Replay the edit stream into a repository file.
    Edit {
        #[command(flatten)]
        common: Common,
        /// Edit stream as JSON lines (default: the configured benchmark's stream).
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Apply only the first N edits.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compute the five metrics for a repository (or the whole lifelong trajectory).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Rebuild the repository edit by edit and evaluate at the configured eval points.
        #[arg(long)]
        lifelong: bool,
        /// Exit with code 5 if any metric misses its threshold.
        #[arg(long)]
        assert: bool,
    },
    /// Train and evaluate editor variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (default: full,-sr1,-sr2,-SR,HR*).
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        /// Number of editor seeds, starting at the run seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Train and evaluate one editor per hyper-parameter value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// d_m, r, k or l_e.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Finite-difference check of every loss term in f64.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Check a sample of this many coordinates per tensor instead of all.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Summarise the artifacts in the output directory as CSV/JSON.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c) | Command::TrainEditor(c) | Command::Report(c) => c,
            Command::Edit { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::TrainEditor(_) => "train-editor",
            Command::Edit { .. } => "edit",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Report(_) => "report",
        }
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::Json(_) => (EXIT_CONFIG, "config"),
            Error::Fingerprint { .. } => (EXIT_FINGERPRINT, "fingerprint"),
            Error::Numerical(_) | Error::NotConverged(_) => (EXIT_NUMERICAL, "numerical"),
            Error::Checksum { .. } | Error::Format { .. } => (EXIT_FAILURE, "corrupt"),
            Error::Io { .. } => (EXIT_FAILURE, "io"),
            _ => (EXIT_FAILURE, "error"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn threshold_failure(message: String) -> Failure {
    Failure {
        code: EXIT_THRESHOLD,
        kind: "threshold",
        message,
    }
}

/// Holds `<out>/.lock` for the lifetime of a command.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure {
                code: EXIT_FAILURE,
                kind: "locked",
                message: format!("{} is in use by another command (remove {} if stale)", dir.display(), path.display()),
            }),
            Err(e) => Err(Error::Io { path, source: e }.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    common: Common,
}

impl Ctx {
    fn new(common: &Common) -> CliResult<Self> {
        let mut cfg = RunConfig::load(&common.config).map_err(|e| Failure {
            code: EXIT_CONFIG,
            kind: "config",
            message: e.to_string(),
        })?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        Ok(Ctx {
            cfg,
            out: common.out.clone(),
            common: common.clone(),
        })
    }

    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn surrogate_path(&self) -> PathBuf {
        self.path(&self.common.surrogate, "surrogate.json")
    }

    fn editor_path(&self) -> PathBuf {
        self.path(&self.common.checkpoint, "editor.json")
    }

    fn repo_path(&self) -> PathBuf {
        self.path(&self.common.repo, "repository.json")
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, contents).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        Ok(p)
    }

    /// Records the resolved configuration and artifact versions.
    fn provenance(&self, command: &str) -> CliResult<()> {
        self.write("run_config.json", &format!("{}\n", self.cfg.to_json()))?;
        let versions = json!({
            "command": command,
            "liveedit": env!("CARGO_PKG_VERSION"),
            "git": git_describe(),
        });
        self.write("versions.json", &format!("{}\n", serde_json::to_string_pretty(&versions).expect("json")))?;
        Ok(())
    }

    fn bench(&self) -> CliResult<Benchmark> {
        Ok(studies::generate_benchmark(&self.cfg)?)
    }

    fn surrogate(&self) -> CliResult<Surrogate<f32>> {
        let s = Surrogate::<f32>::load(&self.surrogate_path())?;
        if s.config() != &self.cfg.surrogate {
            return Err(Error::Fingerprint {
                expected: format!("{:?}", self.cfg.surrogate),
                found: format!("{:?}", s.config()),
            }
            .into());
        }
        Ok(s)
    }

    fn editor(&self) -> CliResult<Editor<f32>> {
        Ok(Editor::load(&self.editor_path(), &self.cfg.surrogate)?)
    }

    fn stream(&self, explicit: &Option<PathBuf>) -> CliResult<Vec<EditRecord>> {
        match explicit {
            Some(p) => Ok(read_jsonl(p)?),
            None => Ok(self.bench()?.stream),
        }
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    format!("{}\n", serde_json::to_string_pretty(v).expect("json"))
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({
        "rel": m.rel,
        "t_gen": m.t_gen,
        "m_gen": m.m_gen,
        "t_loc": m.t_loc,
        "m_loc": m.m_loc,
        "average": m.average(),
        "exact_rel": m.exact_rel,
        "exact_t_gen": m.exact_t_gen,
        "exact_m_gen": m.exact_m_gen,
    })
}

/// Default thresholds for `eval --assert`.
const THRESHOLDS: [(&str, f64); 5] = [("rel", 0.90), ("t_gen", 0.85), ("m_gen", 0.80), ("t_loc", 0.99), ("m_loc", 0.95)];

fn check_thresholds(m: &Metrics) -> Vec<String> {
    let vals = [m.rel, m.t_gen, m.m_gen, Some(m.t_loc), Some(m.m_loc)];
    THRESHOLDS
        .iter()
        .zip(vals)
        .filter_map(|(&(name, t), v)| match v {
            Some(x) if x >= t => None,
            Some(x) => Some(format!("{name} {x:.4} < {t}")),
            None => None,
        })
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    let command = cli.command;
    let ctx = Ctx::new(command.common())?;
    let _lock = Lock::acquire(&ctx.out)?;
    ctx.provenance(command.name())?;
    match &command {
        Command::Pretrain(_) => {
            let bench = ctx.bench()?;
            let (surrogate, report) = studies::pretrain_on(&ctx.cfg, &bench)?;
            surrogate.save(&ctx.surrogate_path())?;
            bench.write_stream(&ctx.out.join("stream.jsonl"))?;
            let summary = json!({ "steps": report.steps, "token_accuracy": report.token_accuracy });
            ctx.write("pretrain.json", &to_json(&summary))?;
            println!("{}", summary);
        }
        Command::TrainEditor(_) => {
            let bench = ctx.bench()?;
            let surrogate = ctx.surrogate()?;
            let (editor, log) = studies::train_editor(&ctx.cfg, &surrogate, &bench, Some(&ctx.out))?;
            editor.save(&ctx.editor_path())?;
            let last = log.last().map(|r| r.total);
            let summary = json!({ "steps": log.last().map(|r| r.step + 1), "final_loss": last, "parameters": editor.parameter_count() });
            ctx.write("train_summary.json", &to_json(&summary))?;
            println!("{}", summary);
        }
        Command::Edit { stream, limit, .. } => {
            let surrogate = ctx.surrogate()?;
            let editor = ctx.editor()?;
            let stream = ctx.stream(stream)?;
            let n = limit.unwrap_or(stream.len()).min(stream.len());
            let mut repo = editor.new_repository();
            for r in &stream[..n] {
                editor.apply_edit(&surrogate, &mut repo, &r.edit.to_input())?;
            }
            repo.save(&ctx.repo_path())?;
            println!("{}", json!({ "edits": repo.len(), "repository": ctx.repo_path() }));
        }
        Command::Eval { stream, lifelong, assert, .. } => {
            let surrogate = ctx.surrogate()?;
            let editor = ctx.editor()?;
            let stream = ctx.stream(stream)?;
            let metrics = if *lifelong {
                let (_, points) = lifelong_run(&editor, &surrogate, &stream, &ctx.cfg.benchmark.eval_points)?;
                ctx.write("trajectory.csv", &trajectory_csv(&points))?;
                ctx.write("trajectory.json", &to_json(&points))?;
                points.last().map(|p| p.metrics)
            } else {
                let path = ctx.repo_path();
                let repo = if path.exists() {
                    Repository::load(&path, editor.fingerprint())?
                } else {
                    editor.new_repository()
                };
                if repo.len() > stream.len() {
                    return Err(Error::Contract(format!("repository holds {} edits but the stream has {}", repo.len(), stream.len())).into());
                }
                Some(evaluate(&editor, &surrogate, &repo, &stream[..repo.len()])?)
            };
            let metrics = metrics.ok_or_else(|| Failure::from(Error::Config("no eval point within the stream".into())))?;
            let report = metrics_json(&metrics);
            ctx.write("metrics.json", &to_json(&report))?;
            println!("{report}");
            if *assert {
                let misses = check_thresholds(&metrics);
                if !misses.is_empty() {
                    return Err(threshold_failure(misses.join("; ")));
                }
            }
        }
        Command::Ablate { modes, seeds, .. } => {
            let variants = match modes {
                Some(m) => m.iter().map(|s| Variant::parse(s)).collect::<Result<Vec<_>, _>>()?,
                None => Variant::ALL.to_vec(),
            };
            let world = world(&ctx)?;
            let seeds: Vec<u64> = (0..*seeds).map(|i| ctx.cfg.seed + i).collect();
            let rows = studies::ablate(&ctx.cfg, &world, &variants, &seeds)?;
            write_study(&ctx, "ablation", &rows)?;
        }
        Command::Sweep { axis, values, seeds, .. } => {
            let axis = Axis::parse(axis)?;
            if values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()).into());
            }
            let world = world(&ctx)?;
            let seeds: Vec<u64> = (0..*seeds).map(|i| ctx.cfg.seed + i).collect();
            let rows = studies::sweep(&ctx.cfg, &world, axis, values, &seeds)?;
            write_study(&ctx, &format!("sweep_{}", axis.name()), &rows)?;
        }
        Command::Gradcheck { eps, sample, .. } => {
            let coverage = match sample {
                Some(n) => Coverage::Sampled { per_tensor: *n },
                None => Coverage::All,
            };
            let checks = gradcheck_suite(&ctx.cfg, *eps, coverage)?;
            let max = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            let report = json!({ "terms": checks, "max_rel_err": max, "tolerance": GRADCHECK_TOLERANCE });
            ctx.write("gradcheck.json", &to_json(&report))?;
            println!("{report}");
            if max.is_nan() || max >= GRADCHECK_TOLERANCE {
                return Err(threshold_failure(format!("max relative error {max:e} >= {GRADCHECK_TOLERANCE:e}")));
            }
        }
        Command::Report(_) => report(&ctx)?,
    }
    Ok(())
}

/// The surrogate from `<out>` when present, otherwise a freshly pretrained one.
fn world(ctx: &Ctx) -> CliResult<studies::World> {
    let bench = ctx.bench()?;
    let (surrogate, report) = if ctx.surrogate_path().exists() {
        let s = ctx.surrogate()?;
        (s, None)
    } else {
        let (s, r) = studies::pretrain_on(&ctx.cfg, &bench)?;
        s.save(&ctx.surrogate_path())?;
        (s, Some(r))
    };
    Ok(studies::World {
        bench,
        surrogate,
        report: report.unwrap_or_default(),
    })
}

fn write_study(ctx: &Ctx, name: &str, rows: &[StudyRow]) -> CliResult<()> {
    ctx.write(&format!("{name}.csv"), &rows_csv(rows))?;
    ctx.write(&format!("{name}.json"), &to_json(&rows))?;
    let mut s = String::from("label,mean_avg,std_avg\n");
    for (l, m, sd) in summarize(rows) {
        s.push_str(&format!("{l},{m:.6},{sd:.6}\n"));
    }
    ctx.write(&format!("{name}_summary.csv"), &s)?;
    print!("{s}");
    Ok(())
}

/// Collects whichever artifacts exist under `<out>` into `<out>/report/`.
fn report(ctx: &Ctx) -> CliResult<()> {
    let dir = ctx.out.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let mut index = serde_json::Map::new();
    let io = |p: &Path, e: std::io::Error| Failure::from(Error::Io { path: p.to_path_buf(), source: e });
    for name in ["train_log.csv", "trajectory.csv"] {
        let src = ctx.out.join(name);
        if src.exists() {
            fs::copy(&src, dir.join(name)).map_err(|e| io(&src, e))?;
            index.insert(name.into(), json!(format!("report/{name}")));
        }
    }
    for name in ["pretrain.json", "metrics.json", "gradcheck.json", "train_summary.json"] {
        let src = ctx.out.join(name);
        if src.exists() {
            let text = fs::read_to_string(&src).map_err(|e| io(&src, e))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            index.insert(name.trim_end_matches(".json").into(), v);
        }
    }
    let mut studies_found = Vec::new();
    if let Ok(entries) = fs::read_dir(&ctx.out) {
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| (n.starts_with("ablation") || n.starts_with("sweep_")) && n.ends_with(".json"))
            .collect();
        names.sort();
        for n in names {
            let src = ctx.out.join(&n);
            let text = fs::read_to_string(&src).map_err(|e| io(&src, e))?;
            let rows: Vec<StudyRow> = serde_json::from_str(&text).map_err(Error::from)?;
            let stem = n.trim_end_matches(".json");
            // metric-by-label table with parameter counts, one row per label
            let mut s = String::from("label,parameters,rel,t_gen,m_gen,t_loc,m_loc,avg,std_avg,seeds\n");
            for (label, mean, sd) in summarize(&rows) {
                let group: Vec<&StudyRow> = rows.iter().filter(|r| r.label == label).collect();
                let n = group.len() as f64;
                let m = |f: &dyn Fn(&Metrics) -> f64| group.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
                s.push_str(&format!(
                    "{label},{},{:.6},{:.6},{:.6},{:.6},{:.6},{mean:.6},{sd:.6},{}\n",
                    group[0].parameters,
                    m(&|x| x.rel.unwrap_or(f64::NAN)),
                    m(&|x| x.t_gen.unwrap_or(f64::NAN)),
                    m(&|x| x.m_gen.unwrap_or(f64::NAN)),
                    m(&|x| x.t_loc),
                    m(&|x| x.m_loc),
                    group.len()
                ));
            }
            let out = dir.join(format!("{stem}.csv"));
            fs::write(&out, s).map_err(|e| io(&out, e))?;
            studies_found.push(json!(format!("report/{stem}.csv")));
        }
    }
    index.insert("studies".into(), json!(studies_found));
    let summary = serde_json::Value::Object(index);
    ctx.write("report/summary.json", &to_json(&summary))?;
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let record = json!({ "error": "usage", "message": e.to_string(), "exit_code": EXIT_CONFIG });
            eprintln!("{record}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message, "exit_code": f.code }));
            ExitCode::from(f.code)
        }
    }
}
