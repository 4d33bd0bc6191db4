//! Interchangeable updates for the local factors `q(β_h)`.

mod bfgs;
pub mod identities;
mod laplace;
mod ncvmp;
mod slr;

use serde::{Deserialize, Serialize};

pub use bfgs::{minimize as bfgs_minimize, BfgsOptions, BfgsOutcome};
pub use laplace::{laplace_local, laplace_local_with};
pub use ncvmp::ncvmp_local_step;
pub use slr::{slr_local, SlrConfig, SlrOutcome, SlrState};

use crate::error::Result;
use crate::model::{AgentData, GlobalVarParams, LocalVarParams};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Laplace,
    Ncvmp,
    Slr(SlrConfig),
}

impl BackendKind {
    pub fn slr_default() -> Self {
        BackendKind::Slr(SlrConfig::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::Laplace => "laplace",
            BackendKind::Ncvmp => "ncvmp",
            BackendKind::Slr(_) => "slr",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, BackendKind::Slr(_))
    }
}

impl std::str::FromStr for BackendKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(BackendKind::Laplace),
            "ncvmp" => Ok(BackendKind::Ncvmp),
            "slr" => Ok(BackendKind::slr_default()),
            other => Err(crate::error::Error::invalid(format!(
                "unknown backend {other:?} (expected laplace, ncvmp or slr)"
            ))),
        }
    }
}

/// One local update as performed inside a sweep. For NCVMP this is a single
/// fixed-point step. SLR draws from the stream keyed by
/// `(seed, agent index, iteration)`, so the result does not depend on which
/// thread runs it.
pub fn update_local<T: Scalar>(
    kind: &BackendKind,
    agent: &AgentData<T>,
    global: &GlobalVarParams<T>,
    current: &LocalVarParams<T>,
    seed: u64,
    agent_index: usize,
    iteration: usize,
) -> Result<(LocalVarParams<T>, usize)> {
    match kind {
        BackendKind::Laplace => Ok((laplace_local(agent, global, &current.mu)?, 0)),
        BackendKind::Ncvmp => Ok((ncvmp_local_step(agent, global, current)?, 0)),
        BackendKind::Slr(cfg) => {
            let mut r = rng::stream(seed, Purpose::LocalBackend, agent_index as u64, iteration as u64);
            let out = slr_local(agent, global, current, cfg, &mut r)?;
            Ok((out.local, out.rejections))
        }
    }
}
