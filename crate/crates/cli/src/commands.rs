use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use mmnl_core::assessment::{
    compare_estimates, estimate_queries, kfold_split, predictive_loglik, random_queries, write_comparison_csv,
    PosteriorSource, QueryComparison, Summary,
};
use mmnl_core::batch::{fit_batch, FitResult};
use mmnl_core::data_io::{self, Truth};
use mmnl_core::local::BackendKind;
use mmnl_core::mcmc::{run_chains, PosteriorDraws};
use mmnl_core::model::Hyperpriors;
use mmnl_core::svi::fit_svi;
use mmnl_core::{Dataset, Fit, Global};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Command, Mode, RunConfig};
use crate::error::{CliError, CliResult};

pub const TRUTH_FORMAT_VERSION: &str = "mmnl-truth/1";
pub const DRAWS_FORMAT_VERSION: &str = "mmnl-draws/1";

#[derive(Serialize, Deserialize)]
struct TruthFile {
    format_version: String,
    config: Value,
    truth: Truth,
}

#[derive(Serialize, Deserialize)]
struct DrawsFile {
    format_version: String,
    config: Value,
    draws: PosteriorDraws<f64>,
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(cfg.out.display(), e))?;
    match cfg.command {
        Command::Simulate => simulate(cfg),
        Command::Fit => fit(cfg),
        Command::Mcmc => mcmc(cfg),
        Command::Assess => assess(cfg),
        Command::Compare => compare(cfg),
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path.display(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path.display(), e))?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Writes a CSV whose first line is `# config: <resolved config as JSON>`.
fn write_csv(
    path: &Path,
    cfg: &RunConfig,
    body: impl FnOnce(&mut BufWriter<File>) -> mmnl_core::Result<()>,
) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config: {}", cfg.to_json()).map_err(|e| CliError::io(path.display(), e))?;
    body(&mut w)?;
    w.flush().map_err(|e| CliError::io(path.display(), e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_input(cfg: &RunConfig) -> CliResult<Dataset> {
    if let Some(path) = &cfg.data {
        let data = data_io::load_dataset(path).map_err(|e| CliError::from_data(path, e))?;
        info!(
            "loaded {}: H={} J={} K={} events={}",
            path.display(),
            data.n_agents(),
            data.n_alternatives(),
            data.n_covariates(),
            data.n_events()
        );
        return Ok(data);
    }
    let spec = cfg.simulation.as_ref().expect("resolved config has an input");
    Ok(data_io::simulate_dataset(spec)?.0)
}

fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let spec = cfg.simulation.as_ref().expect("simulate has a design");
    let (data, truth): (Dataset, Truth) = data_io::simulate_dataset(spec)?;
    write_csv(&out_path(cfg, "data.csv"), cfg, |w| data_io::write_dataset(&data, w))?;
    let file = TruthFile {
        format_version: TRUTH_FORMAT_VERSION.into(),
        config: cfg.to_json(),
        truth,
    };
    write_json(&out_path(cfg, "truth.json"), &serde_json::to_value(file).map_err(mmnl_core::Error::from)?)
}

fn run_fit(cfg: &RunConfig, data: &Dataset, backend: BackendKind) -> CliResult<Fit> {
    let priors = Hyperpriors::vague(data.n_covariates());
    let stop = cfg.stop.as_ref().expect("fit has stop settings");
    let fit = match cfg.mode {
        Some(Mode::Svi) => fit_svi(data, &priors, backend, cfg.svi.as_ref().expect("svi settings"), stop, cfg.seed)?,
        _ => fit_batch(data, &priors, backend, stop, cfg.seed)?,
    };
    for (iteration, size) in &fit.diagnostics.batch_growth {
        info!("{}: batch size grew to {size} at iteration {iteration}", backend.name());
    }
    info!(
        "{}: {} after {} iterations, final xi {}",
        backend.name(),
        if fit.converged { "converged" } else { "stopped at the sweep cap" },
        fit.iterations(),
        fit.final_xi().map_or("n/a".to_string(), |x| format!("{x:.3e}"))
    );
    if !fit.converged {
        log::warn!("{}: fit did not reach the stopping threshold", backend.name());
    }
    Ok(fit)
}

fn save_fit(cfg: &RunConfig, fit: &Fit, name: &str) -> CliResult<()> {
    let path = out_path(cfg, name);
    data_io::save_fit(fit, cfg.to_json(), &path).map_err(|e| CliError::io(path.display(), e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn fit(cfg: &RunConfig) -> CliResult<()> {
    let data = load_input(cfg)?;
    let fit = run_fit(cfg, &data, cfg.backend())?;
    save_fit(cfg, &fit, "fit.json")?;
    write_csv(&out_path(cfg, "trace.csv"), cfg, |w| data_io::write_trace(&fit.trace, w))
}

fn mcmc(cfg: &RunConfig) -> CliResult<()> {
    let data = load_input(cfg)?;
    let m = cfg.mcmc.as_ref().expect("mcmc settings");
    info!(
        "{} chains x {} iterations: first {} discarded, thinned by {}, {} draws kept per chain",
        m.chains,
        m.iterations,
        m.iterations - m.post_burn_in(),
        m.thin,
        m.retained_per_chain()
    );
    let draws = run_chains(&data, &Hyperpriors::vague(data.n_covariates()), m)?;
    let psrf = if m.chains >= 2 && m.retained_per_chain() >= 4 {
        draws.psrf()?
    } else {
        log::warn!("PSRF needs at least two chains with four retained draws each");
        Vec::new()
    };
    for (name, r) in &psrf {
        info!("PSRF {name}: {r:.4}");
    }
    write_csv(&out_path(cfg, "draws.csv"), cfg, |w| draws.write_csv(w))?;
    write_csv(&out_path(cfg, "psrf.csv"), cfg, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["parameter", "psrf"])?;
        for (name, r) in &psrf {
            c.write_record([name.clone(), r.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let acceptance: Vec<f64> = draws
        .chains
        .iter()
        .map(|c| c.acceptance.iter().sum::<f64>() / c.acceptance.len().max(1) as f64)
        .collect();
    let summary = json!({
        "config": cfg.to_json(),
        "chains": m.chains,
        "iterations": m.iterations,
        "burn_in_discarded": m.iterations - m.post_burn_in(),
        "thin": m.thin,
        "retained_per_chain": m.retained_per_chain(),
        "total_retained": draws.total_draws(),
        "mean_acceptance_per_chain": acceptance,
        "zeta_mean": draws.zeta_mean().as_slice(),
        "zeta_sd": draws.zeta_sd().as_slice(),
        "psrf": psrf.iter().map(|(n, r)| (n.clone(), json!(r))).collect::<serde_json::Map<_, _>>(),
    });
    write_json(&out_path(cfg, "mcmc_summary.json"), &summary)?;
    let file = DrawsFile {
        format_version: DRAWS_FORMAT_VERSION.into(),
        config: cfg.to_json(),
        draws,
    };
    write_json(&out_path(cfg, "draws.json"), &serde_json::to_value(file).map_err(mmnl_core::Error::from)?)
}

/// A posterior (or true parameter set) read from an output file.
enum Source {
    Fit(Box<Fit>),
    Draws(PosteriorDraws<f64>),
    Truth(Truth),
}

impl Source {
    fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let bad = |e: String| CliError::Data(format!("{}: {e}", path.display()));
        let version = value.get("format_version").and_then(Value::as_str).unwrap_or("");
        if value.get("fit").is_some() {
            let f = data_io::fit_from_json::<f64>(&text).map_err(|e| bad(e.to_string()))?;
            return Ok(Source::Fit(Box::new(f.fit)));
        }
        let check = |expected: &str| {
            if version == expected {
                Ok(())
            } else {
                Err(bad(format!("incompatible file version {version:?}, expected {expected:?}")))
            }
        };
        if value.get("draws").is_some() {
            check(DRAWS_FORMAT_VERSION)?;
            let f: DrawsFile = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            return Ok(Source::Draws(f.draws));
        }
        if value.get("truth").is_some() {
            check(TRUTH_FORMAT_VERSION)?;
            let f: TruthFile = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            return Ok(Source::Truth(f.truth));
        }
        Err(bad("not a fit, MCMC draws or simulation truth file".into()))
    }

    fn dim(&self) -> usize {
        match self {
            Source::Fit(f) => f.global.dim(),
            Source::Draws(d) => d.dim(),
            Source::Truth(t) => t.spec.n_covariates,
        }
    }

    fn label(&self) -> String {
        match self {
            Source::Fit(f) => format!("vb-{}", f.backend.name()),
            Source::Draws(_) => "mcmc".into(),
            Source::Truth(_) => "truth".into(),
        }
    }

    fn as_posterior(&self) -> PosteriorSource<'_, f64> {
        match self {
            Source::Fit(f) => PosteriorSource::VariationalFit(&f.global),
            Source::Draws(d) => PosteriorSource::McmcDraws(d),
            Source::Truth(t) => PosteriorSource::TrueParams {
                zeta: &t.spec.zeta_true,
                omega: &t.spec.omega_true,
            },
        }
    }
}

fn summary_json(rows: &[QueryComparison]) -> CliResult<Value> {
    let tv: Vec<f64> = rows.iter().map(|r| r.tv).collect();
    let s = Summary::of(&tv)?;
    Ok(s.rows().iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>().into())
}

/// `statistic,<column>...` with the six summary rows.
fn write_summary_csv(path: &Path, cfg: &RunConfig, columns: &[(String, Summary)]) -> CliResult<()> {
    write_csv(path, cfg, |w| {
        let mut c = csv::Writer::from_writer(w);
        let mut header = vec!["statistic".to_string()];
        header.extend(columns.iter().map(|(n, _)| n.clone()));
        c.write_record(&header)?;
        if let Some((_, first)) = columns.first() {
            for (i, (label, _)) in first.rows().iter().enumerate() {
                let mut row = vec![label.to_string()];
                row.extend(columns.iter().map(|(_, s)| s.rows()[i].1.to_string()));
                c.write_record(&row)?;
            }
        }
        c.flush()?;
        Ok(())
    })
}

fn tv_rows(
    cfg: &RunConfig,
    estimate: PosteriorSource<'_, f64>,
    reference: PosteriorSource<'_, f64>,
    j: usize,
    k: usize,
) -> CliResult<Vec<QueryComparison>> {
    let a = cfg.assess.as_ref().expect("assessment settings");
    let queries = random_queries::<f64>(a.queries, j, k, a.query_sd, cfg.seed);
    // Both sides share the seed, so a source compared with itself gives TV 0.
    let est = estimate_queries(&queries, estimate, &a.pcd, cfg.seed)?;
    let refs = estimate_queries(&queries, reference, &a.pcd, cfg.seed)?;
    let resampled: usize = est.iter().chain(&refs).map(|e| e.resampled).sum();
    if resampled > 0 {
        log::warn!("{resampled} Omega draws were not positive definite and were redrawn");
    }
    let p: Vec<_> = est.into_iter().map(|e| e.probs).collect();
    let r: Vec<_> = refs.into_iter().map(|e| e.probs).collect();
    Ok(compare_estimates(&queries, &p, &r)?)
}

fn assess(cfg: &RunConfig) -> CliResult<()> {
    let a = cfg.assess.as_ref().expect("assessment settings");
    let source = Source::load(a.fit.as_ref().expect("resolved"))?;
    let reference = Source::load(a.reference.as_ref().expect("resolved"))?;
    let k = source.dim();
    if reference.dim() != k {
        return Err(CliError::Data(format!(
            "source has K={k} but reference has K={}",
            reference.dim()
        )));
    }
    let data_j = match &cfg.data {
        Some(path) => Some(
            data_io::load_dataset::<f64>(path)
                .map_err(|e| CliError::from_data(path, e))?
                .n_alternatives(),
        ),
        None => None,
    };
    let truth_j = [&source, &reference].iter().find_map(|s| match s {
        Source::Truth(t) => Some(t.spec.n_alternatives),
        _ => None,
    });
    let j = a.alternatives.or(data_j).or(truth_j).ok_or_else(|| {
        CliError::config("query size unknown: pass --J, --data, or a truth file as either side")
    })?;
    if j < 2 {
        return Err(CliError::config("queries need at least two alternatives"));
    }
    let rows = tv_rows(cfg, source.as_posterior(), reference.as_posterior(), j, k)?;
    let summary = Summary::of(&rows.iter().map(|r| r.tv).collect::<Vec<_>>())?;
    info!(
        "{} vs {}: mean TV {:.4}, median {:.4}, max {:.4}",
        source.label(),
        reference.label(),
        summary.mean,
        summary.median,
        summary.max
    );
    write_csv(&out_path(cfg, "tv.csv"), cfg, |w| write_comparison_csv(&rows, w))?;
    let column = format!("{}_vs_{}", source.label(), reference.label());
    write_summary_csv(&out_path(cfg, "tv_summary.csv"), cfg, &[(column.clone(), summary)])?;
    write_json(
        &out_path(cfg, "tv_summary.json"),
        &json!({
            "config": cfg.to_json(),
            "source": source.label(),
            "reference": reference.label(),
            "alternatives": j,
            "summary": summary_json(&rows)?,
        }),
    )
}

fn compare(cfg: &RunConfig) -> CliResult<()> {
    let data = load_input(cfg)?;
    let (j, k) = (data.n_alternatives(), data.n_covariates());
    let mut fits = Vec::new();
    for &backend in &cfg.backends {
        let f = run_fit(cfg, &data, backend)?;
        save_fit(cfg, &f, &format!("fit_{}.json", backend.name()))?;
        fits.push(f);
    }

    let reference: &FitResult<f64> = &fits[0];
    let mut columns = Vec::new();
    let mut tv_json = serde_json::Map::new();
    for f in &fits[1..] {
        let name = format!("{}_vs_{}", f.backend.name(), reference.backend.name());
        let rows = tv_rows(cfg, global(f), global(reference), j, k)?;
        let s = Summary::of(&rows.iter().map(|r| r.tv).collect::<Vec<_>>())?;
        info!("{name}: mean TV {:.4}", s.mean);
        write_csv(&out_path(cfg, &format!("tv_{name}.csv")), cfg, |w| write_comparison_csv(&rows, w))?;
        tv_json.insert(name.clone(), summary_json(&rows)?);
        columns.push((name, s));
    }
    if !columns.is_empty() {
        write_summary_csv(&out_path(cfg, "tv_summary.csv"), cfg, &columns)?;
    }

    let folds = cfg.folds.unwrap_or(0);
    let mut cv_json = Value::Null;
    if folds > 0 {
        let table = cross_validate(cfg, &data, folds)?;
        write_csv(&out_path(cfg, "cv.csv"), cfg, |w| {
            let mut c = csv::Writer::from_writer(w);
            let mut header = vec!["fold".to_string()];
            header.extend(cfg.backends.iter().map(|b| b.name().to_string()));
            c.write_record(&header)?;
            for (f, row) in table.iter().enumerate() {
                let mut rec = vec![(f + 1).to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                c.write_record(&rec)?;
            }
            let mut mean = vec!["mean".to_string()];
            mean.extend((0..cfg.backends.len()).map(|b| {
                (table.iter().map(|row| row[b]).sum::<f64>() / table.len() as f64).to_string()
            }));
            c.write_record(&mean)?;
            c.flush()?;
            Ok(())
        })?;
        cv_json = json!({
            "folds": folds,
            "backends": cfg.backends.iter().map(|b| b.name()).collect::<Vec<_>>(),
            "loglik": table,
            "mean": (0..cfg.backends.len())
                .map(|b| table.iter().map(|row| row[b]).sum::<f64>() / table.len() as f64)
                .collect::<Vec<_>>(),
        });
    }
    write_json(
        &out_path(cfg, "compare.json"),
        &json!({
            "config": cfg.to_json(),
            "reference_backend": reference.backend.name(),
            "tv_summary": tv_json,
            "cross_validation": cv_json,
        }),
    )
}

fn global(f: &Fit) -> PosteriorSource<'_, f64> {
    let g: &Global = &f.global;
    PosteriorSource::VariationalFit(g)
}

/// Held-out predictive log-likelihood per fold (rows) and backend (columns).
fn cross_validate(cfg: &RunConfig, data: &Dataset, folds: usize) -> CliResult<Vec<Vec<f64>>> {
    let a = cfg.assess.as_ref().expect("assessment settings");
    let split = kfold_split(data, folds, cfg.seed)?;
    let mut table = Vec::with_capacity(folds);
    for (i, fold) in split.iter().enumerate() {
        let train = data.subset(&fold.train)?;
        let test = data.subset(&fold.test)?;
        let mut row = Vec::with_capacity(cfg.backends.len());
        for &backend in &cfg.backends {
            let f = run_fit(cfg, &train, backend)?;
            let ll = predictive_loglik(PosteriorSource::VariationalFit(&f.global), test.agents(), &a.pcd, cfg.seed)?;
            info!("fold {}: {} held-out log-likelihood {ll:.3}", i + 1, backend.name());
            row.push(ll);
        }
        table.push(row);
    }
    Ok(table)
}
