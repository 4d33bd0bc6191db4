//! Flag and config-file settings, and their resolution into a [`RunConfig`].
//!
//! Precedence is command-line flag, then config file, then built-in default.
//! A flag that does not apply to the chosen subcommand is an error; a config
//! file key that does not apply is ignored, so one file can serve several
//! subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mmnl_core::assessment::PcdConfig;
use mmnl_core::batch::StopConfig;
use mmnl_core::data_io::{spaced_zeta, EventCount, SimSpec};
use mmnl_core::local::BackendKind;
use mmnl_core::mcmc::McmcConfig;
use mmnl_core::svi::SviConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Batch,
    Svi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Simulate,
    Fit,
    Mcmc,
    Assess,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Mcmc => "mcmc",
            Command::Assess => "assess",
            Command::Compare => "compare",
        }
    }

    fn allows(self, key: &str) -> bool {
        const COMMON: &[&str] = &["seed", "threads", "out"];
        const SIM: &[&str] = &["preset", "H", "J", "K", "T", "covariate-sd"];
        const VB: &[&str] = &["mode", "kappa", "batch-size", "alpha", "max-sweeps", "xi-threshold"];
        const PCD: &[&str] = &["queries", "query-sd", "outer", "inner"];
        let specific: &[&[&str]] = match self {
            Command::Simulate => &[SIM],
            Command::Fit => &[SIM, VB, &["data", "backend"]],
            Command::Mcmc => &[SIM, &["data", "chains", "iterations", "thin", "burn-in"]],
            Command::Assess => &[PCD, &["data", "fit", "reference", "J"]],
            Command::Compare => &[SIM, VB, PCD, &["data", "backends", "folds"]],
        };
        COMMON.contains(&key) || specific.iter().any(|set| set.contains(&key))
    }
}

/// Every setting, as given on the command line or in a TOML config file.
/// Keys in the file use the long flag names.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Dataset CSV (agent_id,event_id,alt_id,chosen,x1..xK)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Simulation design: desk, paper-high-het or paper-low-het
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of agents in a simulated dataset
    #[arg(long = "H")]
    #[serde(rename = "H")]
    pub agents: Option<usize>,
    /// Number of alternatives (simulation, or query size for assess)
    #[arg(long = "J")]
    #[serde(rename = "J")]
    pub alternatives: Option<usize>,
    /// Number of covariates in a simulated dataset
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub covariates: Option<usize>,
    /// Choice events per simulated agent
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub events: Option<usize>,
    /// Standard deviation of simulated covariates
    #[arg(long)]
    pub covariate_sd: Option<f64>,
    /// Local update backend: laplace, ncvmp or slr
    #[arg(long)]
    pub backend: Option<String>,
    /// Comma-separated backends to compare; the first is the TV reference
    #[arg(long, value_delimiter = ',')]
    pub backends: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Batch-size growth factor of the SVI controller
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Initial SVI minibatch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial SVI stepsize
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Stopping threshold on the relative parameter change
    #[arg(long)]
    pub xi_threshold: Option<f64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Fraction of each chain discarded
    #[arg(long)]
    pub burn_in: Option<f64>,
    /// Fit or MCMC draws file to assess
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Fit, MCMC draws or simulation truth file to assess against
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Number of random query matrices
    #[arg(long)]
    pub queries: Option<usize>,
    /// Standard deviation of query covariates
    #[arg(long)]
    pub query_sd: Option<f64>,
    /// Outer (zeta, Omega) draws per predictive estimate
    #[arg(long)]
    pub outer: Option<usize>,
    /// Inner beta draws per outer draw
    #[arg(long)]
    pub inner: Option<usize>,
    /// Cross-validation folds; 0 skips cross-validation
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! provided {
    ($s:expr, $($field:ident => $key:literal),* $(,)?) => {{
        let mut keys = Vec::new();
        $(if $s.$field.is_some() { keys.push($key); })*
        keys
    }};
}

macro_rules! merge {
    ($a:expr, $b:expr, $($field:ident),* $(,)?) => {
        Settings { $($field: $a.$field.or($b.$field)),* }
    };
}

impl Settings {
    pub fn provided(&self) -> Vec<&'static str> {
        provided!(self,
            data => "data", preset => "preset", agents => "H", alternatives => "J", covariates => "K",
            events => "T", covariate_sd => "covariate-sd", backend => "backend", backends => "backends",
            mode => "mode", kappa => "kappa", batch_size => "batch-size", alpha => "alpha",
            max_sweeps => "max-sweeps", xi_threshold => "xi-threshold", chains => "chains",
            iterations => "iterations", thin => "thin", burn_in => "burn-in", fit => "fit",
            reference => "reference", queries => "queries", query_sd => "query-sd", outer => "outer",
            inner => "inner", folds => "folds", seed => "seed", threads => "threads", out => "out",
        )
    }

    pub fn from_toml_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    fn or(self, other: Settings) -> Settings {
        merge!(self, other,
            data, preset, agents, alternatives, covariates, events, covariate_sd, backend, backends,
            mode, kappa, batch_size, alpha, max_sweeps, xi_threshold, chains, iterations, thin, burn_in,
            fit, reference, queries, query_sd, outer, inner, folds, seed, threads, out,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssessConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternatives: Option<usize>,
    pub queries: usize,
    pub query_sd: f64,
    pub pcd: PcdConfig,
}

/// Fully resolved settings of one run. Serialized into every output file.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimSpec>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub backends: Vec<BackendKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svi: Option<SviConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assess: Option<AssessConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    /// Keys taken from the config file, if one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_file: Option<PathBuf>,
}

impl RunConfig {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn backend(&self) -> BackendKind {
        self.backends[0]
    }
}

fn parse_backend(name: &str) -> CliResult<BackendKind> {
    name.parse().map_err(|e: mmnl_core::Error| CliError::config(e.to_string()))
}

fn simulation(s: &Settings, seed: u64) -> CliResult<SimSpec> {
    let name = s.preset.as_deref().unwrap_or("desk");
    let mut spec = SimSpec::preset(name, seed).map_err(|e| CliError::config(e.to_string()))?;
    let omega_scale = spec.omega_true[(0, 0)];
    if let Some(h) = s.agents {
        spec.n_agents = h;
    }
    if let Some(j) = s.alternatives {
        spec.n_alternatives = j;
    }
    if let Some(k) = s.covariates {
        spec.n_covariates = k;
        spec.zeta_true = spaced_zeta(k);
        spec.omega_true = nalgebra::DMatrix::identity(k, k) * omega_scale;
    }
    if let Some(t) = s.events {
        spec.events = EventCount::Constant(t);
    }
    if let Some(sd) = s.covariate_sd {
        spec.covariate_sd = sd;
    }
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(spec)
}

/// Applies precedence, checks that flags fit the subcommand and fills in defaults.
pub fn resolve(command: Command, flags: Settings, file: Option<(PathBuf, Settings)>) -> CliResult<RunConfig> {
    let bad: Vec<&str> = flags.provided().into_iter().filter(|k| !command.allows(k)).collect();
    if !bad.is_empty() {
        return Err(CliError::config(format!(
            "--{} cannot be used with `{}`",
            bad.join(", --"),
            command.name()
        )));
    }
    if flags.data.is_some() && flags.preset.is_some() {
        return Err(CliError::config("--data and --preset are mutually exclusive"));
    }
    let sim_flag = flags.preset.is_some()
        || flags.agents.is_some()
        || flags.covariates.is_some()
        || flags.events.is_some()
        || flags.covariate_sd.is_some()
        || (command != Command::Assess && flags.alternatives.is_some());
    if flags.data.is_some() && sim_flag {
        return Err(CliError::config("simulation settings cannot be combined with --data"));
    }
    let svi_flag = flags.kappa.is_some() || flags.batch_size.is_some() || flags.alpha.is_some();

    let (config_file, mut file) = match file {
        Some((path, s)) => (Some(path), s),
        None => (None, Settings::default()),
    };
    // The input source is taken as a whole from one layer.
    if flags.data.is_some() || sim_flag {
        file.data = None;
        file.preset = None;
    }
    let mut s = flags.or(file);
    for key in s.provided() {
        if !command.allows(key) {
            clear(&mut s, key);
        }
    }

    let seed = s.seed.unwrap_or(0);
    if s.threads == Some(0) {
        return Err(CliError::config("--threads must be at least 1"));
    }
    let mut cfg = RunConfig {
        command,
        seed,
        threads: s.threads,
        out: s.out.clone().unwrap_or_else(|| PathBuf::from(".")),
        data: None,
        simulation: None,
        backends: Vec::new(),
        mode: None,
        svi: None,
        stop: None,
        mcmc: None,
        assess: None,
        folds: None,
        config_file,
    };

    match command {
        Command::Simulate => cfg.simulation = Some(simulation(&s, seed)?),
        Command::Fit | Command::Mcmc | Command::Compare => {
            if let Some(d) = &s.data {
                cfg.data = Some(d.clone());
            } else if s.preset.is_some() || sim_flag {
                cfg.simulation = Some(simulation(&s, seed)?);
            } else {
                return Err(CliError::config(format!("`{}` needs --data or --preset", command.name())));
            }
        }
        Command::Assess => {}
    }

    if matches!(command, Command::Fit | Command::Compare) {
        let mode = s.mode.unwrap_or(Mode::Batch);
        if mode == Mode::Batch && svi_flag {
            return Err(CliError::config("--kappa, --batch-size and --alpha need --mode svi"));
        }
        cfg.mode = Some(mode);
        if mode == Mode::Svi {
            let mut svi = SviConfig::default();
            if let Some(k) = s.kappa {
                svi.kappa = k;
            }
            if let Some(b) = s.batch_size {
                svi.initial_batch = b;
            }
            if let Some(a) = s.alpha {
                svi.initial_alpha = a;
            }
            cfg.svi = Some(svi);
        }
        let mut stop = StopConfig::default();
        if let Some(m) = s.max_sweeps {
            stop.max_sweeps = m;
        }
        if let Some(x) = s.xi_threshold {
            stop.xi_threshold = x;
        }
        stop.validate().map_err(CliError::from)?;
        cfg.stop = Some(stop);
    }

    match command {
        Command::Fit => cfg.backends = vec![parse_backend(s.backend.as_deref().unwrap_or("ncvmp"))?],
        Command::Compare => {
            let names = s
                .backends
                .clone()
                .unwrap_or_else(|| vec!["ncvmp".into(), "slr".into(), "laplace".into()]);
            cfg.backends = names.iter().map(|n| parse_backend(n.trim())).collect::<CliResult<_>>()?;
            if cfg.backends.is_empty() {
                return Err(CliError::config("--backends is empty"));
            }
            let mut seen: Vec<&str> = cfg.backends.iter().map(|b| b.name()).collect();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != cfg.backends.len() {
                return Err(CliError::config("--backends lists a backend twice"));
            }
            let folds = s.folds.unwrap_or(5);
            if folds == 1 {
                return Err(CliError::config("--folds must be 0 (skip) or at least 2"));
            }
            cfg.folds = Some(folds);
        }
        Command::Mcmc => {
            let mut m = McmcConfig {
                seed,
                ..McmcConfig::default()
            };
            if let Some(c) = s.chains {
                m.chains = c;
            }
            if let Some(i) = s.iterations {
                m.iterations = i;
            }
            if let Some(t) = s.thin {
                m.thin = t;
            }
            if let Some(b) = s.burn_in {
                m.burn_in = b;
            }
            m.validate().map_err(CliError::from)?;
            cfg.mcmc = Some(m);
        }
        _ => {}
    }

    if matches!(command, Command::Assess | Command::Compare) {
        // Cross-validation evaluates a predictive estimate per held-out
        // event, so compare defaults to cheaper draw counts.
        let (outer, inner) = if command == Command::Assess { (500, 10_000) } else { (100, 1_000) };
        let pcd = PcdConfig {
            outer: s.outer.unwrap_or(outer),
            inner: s.inner.unwrap_or(inner),
            ..PcdConfig::default()
        };
        if pcd.outer == 0 || pcd.inner == 0 {
            return Err(CliError::config("--outer and --inner must be positive"));
        }
        let queries = s.queries.unwrap_or(100);
        let query_sd = s.query_sd.unwrap_or(0.5);
        if queries == 0 || !(query_sd > 0.0) {
            return Err(CliError::config("--queries and --query-sd must be positive"));
        }
        if command == Command::Assess {
            if s.fit.is_none() || s.reference.is_none() {
                return Err(CliError::config("`assess` needs --fit and --reference"));
            }
            cfg.data = s.data.clone();
        }
        cfg.assess = Some(AssessConfig {
            fit: s.fit.clone(),
            reference: s.reference.clone(),
            alternatives: if command == Command::Assess { s.alternatives } else { None },
            queries,
            query_sd,
            pcd,
        });
    }
    Ok(cfg)
}

fn clear(s: &mut Settings, key: &str) {
    match key {
        "data" => s.data = None,
        "preset" => s.preset = None,
        "H" => s.agents = None,
        "J" => s.alternatives = None,
        "K" => s.covariates = None,
        "T" => s.events = None,
        "covariate-sd" => s.covariate_sd = None,
        "backend" => s.backend = None,
        "backends" => s.backends = None,
        "mode" => s.mode = None,
        "kappa" => s.kappa = None,
        "batch-size" => s.batch_size = None,
        "alpha" => s.alpha = None,
        "max-sweeps" => s.max_sweeps = None,
        "xi-threshold" => s.xi_threshold = None,
        "chains" => s.chains = None,
        "iterations" => s.iterations = None,
        "thin" => s.thin = None,
        "burn-in" => s.burn_in = None,
        "fit" => s.fit = None,
        "reference" => s.reference = None,
        "queries" => s.queries = None,
        "query-sd" => s.query_sd = None,
        "outer" => s.outer = None,
        "inner" => s.inner = None,
        "folds" => s.folds = None,
        "seed" => s.seed = None,
        "threads" => s.threads = None,
        "out" => s.out = None,
        _ => unreachable!("unknown settings key {key}"),
    }
}
