use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use abe_core::remote::{Endpoint, RemoteModel};
use abe_core::{ModelAdapter, Result, ScenarioModel};

/// A `--model` argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Scenario(String),
    Remote(String),
    Spawn(String),
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| {
            format!("expected scenario:PATH, remote:HOST:PORT or spawn:COMMAND, got {s:?}")
        })?;
        if rest.is_empty() {
            return Err(format!("empty {kind} target"));
        }
        match kind {
            "scenario" => Ok(ModelSpec::Scenario(rest.into())),
            "remote" => Ok(ModelSpec::Remote(rest.into())),
            "spawn" => Ok(ModelSpec::Spawn(rest.into())),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Scenario(p) => write!(f, "scenario:{p}"),
            ModelSpec::Remote(a) => write!(f, "remote:{a}"),
            ModelSpec::Spawn(c) => write!(f, "spawn:{c}"),
        }
    }
}

impl ModelSpec {
    pub fn load(&self, timeout: Duration) -> Result<Box<dyn ModelAdapter>> {
        Ok(match self {
            ModelSpec::Scenario(path) => Box::new(ScenarioModel::load(path)?),
            ModelSpec::Remote(addr) => Box::new(RemoteModel::connect_with_timeout(
                &Endpoint::Tcp(addr.clone()),
                timeout,
            )?),
            ModelSpec::Spawn(cmd) => Box::new(RemoteModel::connect_with_timeout(
                &Endpoint::Spawn(cmd.clone()),
                timeout,
            )?),
        })
    }
}

/// Parses `0.3,0.7`-style weights and rescales them to sum to one.
pub fn parse_weights(text: &str, models: usize) -> Result<Vec<f64>, String> {
    let raw = text
        .split(',')
        .map(|w| {
            w.trim()
                .parse::<f64>()
                .map_err(|_| format!("invalid weight {w:?}"))
        })
        .collect::<Result<Vec<f64>, String>>()?;
    if raw.len() != models {
        return Err(format!("{} weights given for {models} models", raw.len()));
    }
    if let Some(w) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(format!("weights must be finite and nonnegative, got {w}"));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err("weights sum to zero".into());
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}
