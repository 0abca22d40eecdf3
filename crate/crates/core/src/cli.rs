//! Command-line entry point: `run`, `verify-fixtures` and `report`.
//!
//! Configuration files are flat INI: `key = value` lines under `[suite]`,
//! `[train]`, `[merge]` and `[output]`, plus a top-level `seed`. Flags
//! override file values. Exit codes: 0 success, 1 runtime or verification
//! failure, 2 usage or configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluator::{
    export_report, load_summary, reference_fixtures, verify_fixtures, write_report, RunSummary,
    SUMMARY_FILE,
};
use crate::tasks::{generate_suite, SuiteConfig};
use crate::trainer::{load_checkpoint, run_sequence, TrainConfig};

pub const RESOLVED_CONFIG: &str = "config.ini";
pub const LOG_ENV: &str = "MOEFORGE_LOG";

#[derive(Parser, Debug)]
#[command(name = "moeforge", version, about = "Continual MoE training with frequency-based expert merging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the suite, train every task, write checkpoints and reports.
    Run(RunArgs),
    /// Recompute the reference metric tables from the embedded raw results.
    VerifyFixtures {
        /// Shift one raw cell before checking: `METHOD:ROW:COL:DELTA`
        /// (1-based row and column).
        #[arg(long)]
        perturb: Option<String>,
    },
    /// Re-emit CSV reports from a run directory without retraining.
    Report { dir: PathBuf },
}

#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub merge_cycle: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub merge_enabled: Option<bool>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub suite: SuiteConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            train: TrainConfig::desk(),
            out: PathBuf::from("moeforge-run"),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

impl CliConfig {
    /// Applies `key = value` lines on top of the current values.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["suite", "train", "merge", "output"].contains(&section.as_str()) {
                    return Err(Error::Config(format!("line {}: unknown section [{section}]", n + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(&section, key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = &mut self.suite;
        let t = &mut self.train;
        match (section, key) {
            ("", "seed") => {
                let seed = parse(section, key, v)?;
                s.seed = seed;
                t.seed = seed;
            }
            ("suite", "tasks") => s.tasks = parse(section, key, v)?,
            ("suite", "d_in") => s.d_in = parse(section, key, v)?,
            ("suite", "pool") => s.pool = parse(section, key, v)?,
            ("suite", "classes_per_task") => s.classes_per_task = parse(section, key, v)?,
            ("suite", "separation") => s.separation = parse(section, key, v)?,
            ("suite", "overlap") => s.overlap = parse(section, key, v)?,
            ("suite", "noise") => s.noise = parse(section, key, v)?,
            ("suite", "train_per_class") => s.train_per_class = parse(section, key, v)?,
            ("suite", "test_per_class") => s.test_per_class = parse(section, key, v)?,
            ("suite", "shift_scale") => s.shift_scale = parse(section, key, v)?,
            ("suite", "shared_transform") => s.shared_transform = parse(section, key, v)?,
            ("train", "experts") => t.n_experts = parse(section, key, v)?,
            ("train", "topk") => t.top_k = parse(section, key, v)?,
            ("train", "batch") => t.batch = parse(section, key, v)?,
            ("train", "iterations") => t.iterations = parse(section, key, v)?,
            ("train", "lr") => t.lr = parse(section, key, v)?,
            ("train", "weight_decay") => t.weight_decay = parse(section, key, v)?,
            ("train", "label_smoothing") => t.label_smoothing = parse(section, key, v)?,
            ("train", "temperature") => t.temperature = parse(section, key, v)?,
            ("train", "width") => t.width = parse(section, key, v)?,
            ("train", "hidden") => t.hidden = parse(section, key, v)?,
            ("train", "depth") => t.depth = parse(section, key, v)?,
            ("train", "rank") => t.rank = parse(section, key, v)?,
            ("train", "ln_eps") => t.ln_eps = parse(section, key, v)?,
            ("train", "ae_bottleneck") => t.autoencoder.bottleneck = parse(section, key, v)?,
            ("train", "ae_epochs") => t.autoencoder.epochs = parse(section, key, v)?,
            ("train", "ae_lr") => t.autoencoder.lr = parse(section, key, v)?,
            ("train", "ae_quantile") => t.autoencoder.threshold_quantile = parse(section, key, v)?,
            ("merge", "cycle") => t.merge_cycle = parse(section, key, v)?,
            ("merge", "enabled") => t.merge_enabled = parse(section, key, v)?,
            ("output", "dir") => self.out = PathBuf::from(v),
            _ => {
                let where_ = if section.is_empty() { "top level".to_string() } else { format!("[{section}]") };
                return Err(Error::Config(format!("unknown key `{key}` at {where_}")));
            }
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, a: &RunArgs) {
        if let Some(seed) = a.seed {
            self.suite.seed = seed;
            self.train.seed = seed;
        }
        if let Some(v) = a.tasks {
            self.suite.tasks = v;
        }
        if let Some(v) = a.experts {
            self.train.n_experts = v;
        }
        if let Some(v) = a.topk {
            self.train.top_k = v;
        }
        if let Some(v) = a.merge_cycle {
            self.train.merge_cycle = v;
        }
        if let Some(v) = a.merge_enabled {
            self.train.merge_enabled = v;
        }
        if let Some(v) = a.iterations {
            self.train.iterations = v;
        }
        if let Some(v) = a.batch {
            self.train.batch = v;
        }
        if let Some(v) = &a.out {
            self.out = v.clone();
        }
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_ini(&text)?;
        }
        cfg.apply_flags(args);
        cfg.suite.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// INI text that resolves back to exactly this configuration.
    pub fn to_ini(&self) -> String {
        let s = &self.suite;
        let t = &self.train;
        let mut o = String::new();
        let _ = writeln!(o, "seed = {}", s.seed);
        let _ = writeln!(o, "\n[suite]");
        let _ = writeln!(o, "tasks = {}", s.tasks);
        let _ = writeln!(o, "d_in = {}", s.d_in);
        let _ = writeln!(o, "pool = {}", s.pool);
        let _ = writeln!(o, "classes_per_task = {}", s.classes_per_task);
        let _ = writeln!(o, "separation = {}", s.separation);
        let _ = writeln!(o, "overlap = {}", s.overlap);
        let _ = writeln!(o, "noise = {}", s.noise);
        let _ = writeln!(o, "train_per_class = {}", s.train_per_class);
        let _ = writeln!(o, "test_per_class = {}", s.test_per_class);
        let _ = writeln!(o, "shift_scale = {}", s.shift_scale);
        let _ = writeln!(o, "shared_transform = {}", s.shared_transform);
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "experts = {}", t.n_experts);
        let _ = writeln!(o, "topk = {}", t.top_k);
        let _ = writeln!(o, "batch = {}", t.batch);
        let _ = writeln!(o, "iterations = {}", t.iterations);
        let _ = writeln!(o, "lr = {}", t.lr);
        let _ = writeln!(o, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(o, "label_smoothing = {}", t.label_smoothing);
        let _ = writeln!(o, "temperature = {}", t.temperature);
        let _ = writeln!(o, "width = {}", t.width);
        let _ = writeln!(o, "hidden = {}", t.hidden);
        let _ = writeln!(o, "depth = {}", t.depth);
        let _ = writeln!(o, "rank = {}", t.rank);
        let _ = writeln!(o, "ln_eps = {}", t.ln_eps);
        let _ = writeln!(o, "ae_bottleneck = {}", t.autoencoder.bottleneck);
        let _ = writeln!(o, "ae_epochs = {}", t.autoencoder.epochs);
        let _ = writeln!(o, "ae_lr = {}", t.autoencoder.lr);
        let _ = writeln!(o, "ae_quantile = {}", t.autoencoder.threshold_quantile);
        let _ = writeln!(o, "\n[merge]");
        let _ = writeln!(o, "cycle = {}", t.merge_cycle);
        let _ = writeln!(o, "enabled = {}", t.merge_enabled);
        let _ = writeln!(o, "\n[output]");
        let _ = writeln!(o, "dir = {}", self.out.display());
        o
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn cmd_run(args: &RunArgs) -> i32 {
    let cfg = match CliConfig::resolve(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match execute_run(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute_run(cfg: &CliConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let echo = cfg.out.join(RESOLVED_CONFIG);
    fs::write(&echo, cfg.to_ini()).map_err(|e| Error::io(&echo, e))?;
    let suite = generate_suite(&cfg.suite)?;
    let run = run_sequence(&suite, &cfg.train, Some(&cfg.out))?;
    export_report(&run, &cfg.out)?;
    log::info!("run complete: {}", cfg.out.display());
    Ok(())
}

/// `METHOD:ROW:COL:DELTA`, 1-based row and column.
fn parse_perturbation(spec: &str) -> Result<(String, usize, usize, f64)> {
    let bad = || Error::Config(format!("--perturb expects METHOD:ROW:COL:DELTA, got `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [method, row, col, delta] = parts.as_slice() else {
        return Err(bad());
    };
    let row: usize = row.parse().map_err(|_| bad())?;
    let col: usize = col.parse().map_err(|_| bad())?;
    let delta: f64 = delta.parse().map_err(|_| bad())?;
    if !(1..=11).contains(&row) || !(1..=11).contains(&col) {
        return Err(bad());
    }
    Ok((method.to_string(), row - 1, col - 1, delta))
}

pub fn cmd_verify_fixtures(perturb: Option<&str>) -> i32 {
    let mut sets = reference_fixtures();
    if let Some(spec) = perturb {
        let (method, r, c, delta) = match parse_perturbation(spec) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        };
        match sets.iter_mut().find(|s| s.method == method) {
            Some(set) => set.matrix[r][c] += delta,
            None => {
                eprintln!("error: no fixture method `{method}`");
                return 2;
            }
        }
    }
    let report = verify_fixtures(&sets);
    print!("{}", report.render());
    if report.passed() {
        0
    } else {
        for c in report.failures() {
            eprintln!(
                "mismatch: {} {} {}: expected {:?}, got {:?}",
                c.method, c.metric, c.cell, c.expected, c.got
            );
        }
        1
    }
}

/// Newest `checkpoint_NN` directory under `dir`.
fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("checkpoint_"))
        })
        .collect();
    found.sort();
    found.pop()
}

fn summary_for(dir: &Path) -> Result<RunSummary> {
    if dir.join(SUMMARY_FILE).is_file() {
        return load_summary(dir);
    }
    let ckpt_dir = latest_checkpoint(dir)
        .ok_or_else(|| Error::Data(format!("{} holds no run summary or checkpoints", dir.display())))?;
    let c = load_checkpoint(&ckpt_dir)?;
    Ok(RunSummary {
        task_names: (1..=c.suite.tasks).map(|i| format!("task_{i}")).collect(),
        suite: c.suite,
        config: c.config,
        accuracy: c.accuracy_rows,
        oracle_accuracy: c.oracle_rows,
        heatmap: c.heatmap_rows,
        log: c.log,
    })
}

pub fn cmd_report(dir: &Path) -> i32 {
    let result = summary_for(dir).and_then(|s| write_report(&s, dir));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::VerifyFixtures { perturb } => cmd_verify_fixtures(perturb.as_deref()),
        Command::Report { dir } => cmd_report(dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(extra: &[&str]) -> RunArgs {
        let mut v = vec!["moeforge", "run"];
        v.extend_from_slice(extra);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Run(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desk.cfg");
        fs::write(&path, "seed = 3\n[train]\nexperts = 6\niterations = 10\n[merge]\nenabled = true\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = CliConfig::resolve(&args(&["--config", p, "--experts", "5", "--merge-enabled", "false"])).unwrap();
        assert_eq!(cfg.train.n_experts, 5);
        assert_eq!(cfg.train.iterations, 10);
        assert!(!cfg.train.merge_enabled);
        assert_eq!((cfg.suite.seed, cfg.train.seed), (3, 3));
        let cfg = CliConfig::resolve(&args(&["--config", p, "--seed", "7"])).unwrap();
        assert_eq!((cfg.suite.seed, cfg.train.seed), (7, 7));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = CliConfig::default();
        cfg.suite.overlap = 0.5;
        cfg.train.lr = 0.0123456789012345;
        cfg.train.merge_enabled = false;
        cfg.out = PathBuf::from("some/dir");
        let mut back = CliConfig::default();
        back.apply_ini(&cfg.to_ini()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors() {
        let mut c = CliConfig::default();
        assert!(matches!(c.apply_ini("[nope]\n"), Err(Error::Config(_))));
        assert!(matches!(c.apply_ini("[train]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(c.apply_ini("[train]\nexperts = many\n"), Err(Error::Config(_))));
        assert!(matches!(c.apply_ini("experts\n"), Err(Error::Config(_))));
        assert!(matches!(CliConfig::resolve(&args(&["--topk", "9"])), Err(Error::Config(_))));
        assert!(matches!(
            CliConfig::resolve(&args(&["--config", "/definitely/missing.cfg"])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut c = CliConfig::default();
        c.apply_ini("# desk\n\n[suite]\ntasks = 2 ; two\n").unwrap();
        assert_eq!(c.suite.tasks, 2);
    }

    #[test]
    fn perturbation_spec() {
        assert_eq!(parse_perturbation("MA:11:4:5").unwrap(), ("MA".to_string(), 10, 3, 5.0));
        assert!(parse_perturbation("MA:12:1:1").is_err());
        assert!(parse_perturbation("MA:1:1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["moeforge", "verify-fixtures"]), 0);
        assert_eq!(main_with_args(["moeforge", "verify-fixtures", "--perturb", "MA:11:4:5"]), 1);
        assert_eq!(main_with_args(["moeforge", "verify-fixtures", "--perturb", "x"]), 2);
        assert_eq!(main_with_args(["moeforge", "bogus"]), 2);
        assert_eq!(main_with_args(["moeforge", "run", "--topk", "0"]), 2);
        let empty = tempfile::tempdir().unwrap();
        assert_eq!(main_with_args(["moeforge".into(), "report".into(), empty.path().as_os_str().to_owned()]), 1);
    }
}
