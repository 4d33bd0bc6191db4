//! Simulated datasets, the long-format CSV dataset file, and fit files.
//!
//! CSV layout, one row per alternative of each choice event:
//!
//! ```text
//! agent_id,event_id,alt_id,chosen,x1,...,xK
//! ```
//!
//! `event_id` is a non-negative integer; events of an agent are ordered by it
//! (stably, so duplicate ids keep file order). Within an event `alt_id` must
//! enumerate `0..J` and exactly one row must have `chosen = 1`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::batch::FitResult;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, AgentData, ChoiceDataset, ChoiceEvent};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::serde_mat;

pub const FIT_FORMAT_VERSION: &str = "mmnl-fit/1";

/// Events per agent: fixed, or drawn uniformly from an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventCount {
    Constant(usize),
    Range { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_agents: usize,
    pub n_alternatives: usize,
    pub n_covariates: usize,
    pub events: EventCount,
    #[serde(with = "serde_mat::vector")]
    pub zeta_true: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub omega_true: DMatrix<f64>,
    pub covariate_sd: f64,
    pub seed: u64,
}

/// `n` equally spaced values from −2 to 2 (a single value is 0).
pub fn spaced_zeta(n: usize) -> DVector<f64> {
    if n == 1 {
        return DVector::zeros(1);
    }
    DVector::from_fn(n, |i, _| -2.0 + 4.0 * i as f64 / (n - 1) as f64)
}

impl SimSpec {
    /// Named designs: `paper-high-het` (H=10⁴, J=12, K=10, T=25, Ω=I),
    /// `paper-low-het` (same with Ω=0.25 I) and `desk`
    /// (H=500, J=5, K=3, T=10, Ω=0.25 I). ζ is equally spaced on [−2, 2].
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let (h, j, k, t, omega_scale) = match name {
            "paper-high-het" => (10_000, 12, 10, 25, 1.0),
            "paper-low-het" => (10_000, 12, 10, 25, 0.25),
            "desk" => (500, 5, 3, 10, 0.25),
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset {other:?} (expected paper-high-het, paper-low-het or desk)"
                )))
            }
        };
        Ok(SimSpec {
            n_agents: h,
            n_alternatives: j,
            n_covariates: k,
            events: EventCount::Constant(t),
            zeta_true: spaced_zeta(k),
            omega_true: DMatrix::identity(k, k) * omega_scale,
            covariate_sd: 0.5,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_covariates;
        if self.n_agents == 0 || self.n_alternatives < 2 || k == 0 {
            return Err(Error::invalid("simulation needs H >= 1, J >= 2 and K >= 1"));
        }
        if self.zeta_true.len() != k || self.omega_true.shape() != (k, k) {
            return Err(Error::invalid("true zeta/Omega dimensions disagree with K"));
        }
        if let EventCount::Range { min, max } = self.events {
            if min > max {
                return Err(Error::invalid("event range has min > max"));
            }
        }
        if !(self.covariate_sd >= 0.0) {
            return Err(Error::invalid("covariate sd must be non-negative"));
        }
        let sym = (&self.omega_true - self.omega_true.transpose()).amax();
        if sym > 1e-12 || linalg::min_eigenvalue(&self.omega_true) < -1e-12 {
            return Err(Error::invalid("true Omega must be symmetric positive semi-definite"));
        }
        Ok(())
    }
}

/// Simulation ground truth kept for calibration checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SimSpec,
    pub agent_ids: Vec<String>,
    #[serde(with = "serde_mat::vector_vec")]
    pub betas: Vec<DVector<f64>>,
}

/// Draws `β_h ~ N(ζ, Ω)`, covariates iid `N(0, sd²)` and choices from the
/// logit probabilities. Each agent uses its own RNG stream.
pub fn simulate_dataset<T: Scalar>(spec: &SimSpec) -> Result<(ChoiceDataset<T>, Truth)> {
    use rand::Rng;

    spec.validate()?;
    let (j, k) = (spec.n_alternatives, spec.n_covariates);
    let factor = linalg::psd_factor(&spec.omega_true);
    let width = spec.n_agents.to_string().len();
    let mut agents = Vec::with_capacity(spec.n_agents);
    let mut betas = Vec::with_capacity(spec.n_agents);
    for h in 0..spec.n_agents {
        let mut r = rng::stream(spec.seed, Purpose::Simulation, h as u64, 0);
        let beta = linalg::sample_from_factor(&spec.zeta_true, &factor, &mut r);
        let t = match spec.events {
            EventCount::Constant(t) => t,
            EventCount::Range { min, max } => r.random_range(min..=max),
        };
        let beta_t = beta.map(T::c);
        let mut events = Vec::with_capacity(t);
        for _ in 0..t {
            let x = DMatrix::from_fn(j, k, |_, _| T::c(spec.covariate_sd * f64::standard_normal(&mut r)));
            let p = model::choice_probabilities(&x, &beta_t)?;
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut chosen = j - 1;
            for (i, pi) in p.iter().enumerate() {
                acc += pi.as_f64();
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            events.push(ChoiceEvent { x, chosen });
        }
        agents.push(AgentData::new(format!("{:0width$}", h + 1, width = width), events));
        betas.push(beta);
    }
    let ids = agents.iter().map(|a| a.id.clone()).collect();
    let data = ChoiceDataset::new(agents, j, k)?;
    Ok((
        data,
        Truth {
            spec: spec.clone(),
            agent_ids: ids,
            betas,
        },
    ))
}

fn header_for(k: usize) -> Vec<String> {
    let mut h: Vec<String> = ["agent_id", "event_id", "alt_id", "chosen"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=k).map(|i| format!("x{i}")));
    h
}

pub fn write_dataset<T: Scalar, W: Write>(data: &ChoiceDataset<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header_for(data.n_covariates()))?;
    let mut row: Vec<String> = Vec::with_capacity(4 + data.n_covariates());
    for agent in data.agents() {
        for (t, ev) in agent.events.iter().enumerate() {
            for alt in 0..data.n_alternatives() {
                row.clear();
                row.push(agent.id.clone());
                row.push(t.to_string());
                row.push(alt.to_string());
                row.push(if alt == ev.chosen { "1" } else { "0" }.to_string());
                row.extend(ev.x.row(alt).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset<T: Scalar>(data: &ChoiceDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_dataset(data, f)
}

struct PendingEvent<T> {
    line: u64,
    event_id: u64,
    rows: Vec<(usize, bool, Vec<T>, u64)>,
}

struct PendingAgent<T> {
    id: String,
    events: Vec<PendingEvent<T>>,
    index: HashMap<u64, usize>,
}

fn parse_field<V: std::str::FromStr>(s: &str, line: u64, name: &str) -> Result<V> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {name} from {s:?}"),
    })
}

/// Reads the long CSV format. Lines starting with `#` before the header are a
/// preamble and are skipped; reported line numbers still count them.
pub fn read_dataset<T: Scalar, R: Read>(input: R) -> Result<ChoiceDataset<T>> {
    let mut input = BufReader::new(input);
    let mut preamble = 0u64;
    while input.fill_buf()?.first() == Some(&b'#') {
        let mut skipped = Vec::new();
        input.read_until(b'\n', &mut skipped)?;
        preamble += 1;
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(|s| s.trim()).collect();
    if names.len() < 5 || names[..4] != ["agent_id", "event_id", "alt_id", "chosen"] {
        return Err(Error::Schema(
            "header must start with agent_id,event_id,alt_id,chosen and have at least one covariate".into(),
        ));
    }
    let k = names.len() - 4;
    for (i, n) in names[4..].iter().enumerate() {
        if *n != format!("x{}", i + 1) {
            return Err(Error::Schema(format!("covariate column {} is named {n:?}, expected x{}", i + 1, i + 1)));
        }
    }

    let mut agents: Vec<PendingAgent<T>> = Vec::new();
    let mut agent_index: HashMap<String, usize> = HashMap::new();
    let mut rows_read = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line()) + preamble;
        if rec.len() != 4 + k {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", 4 + k, rec.len()),
            });
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty agent_id".into(),
            });
        }
        let event_id: u64 = parse_field(&rec[1], line, "event_id")?;
        let alt: usize = parse_field(&rec[2], line, "alt_id")?;
        let chosen = match rec[3].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("chosen must be 0 or 1, found {other:?}"),
                })
            }
        };
        let mut x = Vec::with_capacity(k);
        for i in 0..k {
            let v: T = parse_field(&rec[4 + i], line, &format!("x{}", i + 1))?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("x{} is not finite", i + 1),
                });
            }
            x.push(v);
        }
        let ai = *agent_index.entry(id.clone()).or_insert_with(|| {
            agents.push(PendingAgent {
                id,
                events: Vec::new(),
                index: HashMap::new(),
            });
            agents.len() - 1
        });
        let agent = &mut agents[ai];
        let ei = *agent.index.entry(event_id).or_insert_with(|| {
            agent.events.push(PendingEvent {
                line,
                event_id,
                rows: Vec::new(),
            });
            agent.events.len() - 1
        });
        agent.events[ei].rows.push((alt, chosen, x, line));
        rows_read += 1;
    }
    if agents.is_empty() {
        return Err(Error::Schema("dataset has no rows".into()));
    }

    let mut n_alt: Option<usize> = None;
    let mut out = Vec::with_capacity(agents.len());
    let mut rows_used = 0usize;
    for mut pa in agents {
        pa.events.sort_by_key(|e| e.event_id);
        let mut events = Vec::with_capacity(pa.events.len());
        for ev in pa.events {
            let j = ev.rows.len();
            match n_alt {
                None => n_alt = Some(j),
                Some(expected) if expected != j => {
                    return Err(Error::Schema(format!(
                        "line {}: agent {:?} event {} has {j} alternatives, earlier events have {expected}",
                        ev.line, pa.id, ev.event_id
                    )))
                }
                _ => {}
            }
            let mut x = DMatrix::zeros(j, k);
            let mut seen = vec![false; j];
            let mut chosen = None;
            for (alt, is_chosen, values, line) in ev.rows {
                if alt >= j || seen[alt] {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "agent {:?} event {}: alt_id {alt} duplicated or outside 0..{j}",
                            pa.id, ev.event_id
                        ),
                    });
                }
                seen[alt] = true;
                for (c, v) in values.into_iter().enumerate() {
                    x[(alt, c)] = v;
                }
                if is_chosen {
                    if chosen.is_some() {
                        return Err(Error::Parse {
                            line,
                            message: format!("agent {:?} event {}: more than one chosen alternative", pa.id, ev.event_id),
                        });
                    }
                    chosen = Some(alt);
                }
                rows_used += 1;
            }
            let chosen = chosen.ok_or_else(|| Error::Parse {
                line: ev.line,
                message: format!("agent {:?} event {}: no chosen alternative", pa.id, ev.event_id),
            })?;
            events.push(ChoiceEvent { x, chosen });
        }
        out.push(AgentData::new(pa.id, events));
    }
    debug_assert_eq!(rows_read, rows_used);
    let j = n_alt.unwrap_or(0);
    if j < 2 {
        return Err(Error::Schema("events need at least two alternatives".into()));
    }
    ChoiceDataset::new(out, j, k)
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<ChoiceDataset<T>> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// On-disk fit: format version, the configuration that produced it, and the
/// fit itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FitFile<T: Scalar> {
    pub format_version: String,
    #[serde(default)]
    pub config: serde_json::Value,
    pub fit: FitResult<T>,
}

pub fn fit_to_json<T: Scalar>(fit: &FitResult<T>, config: serde_json::Value) -> Result<String> {
    let file = FitFile {
        format_version: FIT_FORMAT_VERSION.to_string(),
        config,
        fit: fit.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn fit_from_json<T: Scalar>(text: &str) -> Result<FitFile<T>> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Schema("fit file has no format_version".into()))?;
    if found != FIT_FORMAT_VERSION {
        return Err(Error::Version {
            found: found.to_string(),
            expected: FIT_FORMAT_VERSION.to_string(),
        });
    }
    let file: FitFile<T> = serde_json::from_value(raw).map_err(|e| Error::Schema(e.to_string()))?;
    let fit = &file.fit;
    let k = fit.priors.dim();
    if fit.global.dim() != k || fit.locals.len() != fit.agent_ids.len() {
        return Err(Error::Schema("fit dimensions are inconsistent".into()));
    }
    for (i, l) in fit.locals.iter().enumerate() {
        if l.mu.len() != k || !linalg::is_spd(&l.sigma) {
            return Err(Error::Schema(format!("local factor {i} is not a valid Gaussian")));
        }
    }
    if !linalg::is_spd(&fit.priors.sigma0) {
        return Err(Error::Schema("Sigma0 is not positive definite".into()));
    }
    Ok(file)
}

pub fn save_fit<T: Scalar>(fit: &FitResult<T>, config: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, fit_to_json(fit, config)?)?;
    Ok(())
}

pub fn load_fit<T: Scalar>(path: impl AsRef<Path>) -> Result<FitFile<T>> {
    fit_from_json(&std::fs::read_to_string(path)?)
}

/// One CSV row per trace record.
pub fn write_trace<W: Write>(trace: &[crate::batch::TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "phase", "xi", "min_ratio", "batch_size", "alpha", "lower_bound", "elapsed_secs"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in trace {
        let phase = match r.phase {
            crate::batch::Phase::Stochastic => "stochastic",
            crate::batch::Phase::Batch => "batch",
        };
        w.write_record([
            r.iteration.to_string(),
            phase.to_string(),
            opt(r.xi),
            opt(r.min_ratio),
            r.batch_size.to_string(),
            r.alpha.to_string(),
            opt(r.lower_bound),
            r.elapsed_secs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
