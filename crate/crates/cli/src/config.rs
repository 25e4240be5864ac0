use std::path::Path;
use std::sync::Arc;

use multiangle::backend::{Backend, RemoteBackend, ToyBackend, ToyModelParams, DEFAULT_MAX_IN_FLIGHT};
use multiangle::codec::OrderPolicy;
use multiangle::sampler::{distinct_angles, read_pairs};
use multiangle::slots::{Angle, SlotRegistry};
use serde::Deserialize;

use crate::{Failure, GlobalArgs, Order, REMOTE_URL_ENV};

/// Defaults read from `--config`; command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub order: Option<Order>,
    pub backend: Option<String>,
    pub alpha: Option<f64>,
    pub max_in_flight: Option<usize>,
    pub max_input_tokens: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Toy(String),
    Remote(String),
}

impl BackendSpec {
    /// `toy:<file>` or `remote:<url>`; a bare `remote` takes its URL from
    /// the environment.
    pub fn parse(spec: &str, env_url: Option<&str>) -> Result<Self, Failure> {
        let bad = || Failure::Input(format!("backend `{spec}`: expected toy:<pairs-file> or remote:<base-url>"));
        let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
        match kind {
            "toy" if !arg.is_empty() => Ok(BackendSpec::Toy(arg.to_string())),
            "remote" => match env_url.filter(|u| !u.is_empty()) {
                Some(url) => Ok(BackendSpec::Remote(url.to_string())),
                None if !arg.is_empty() => Ok(BackendSpec::Remote(arg.to_string())),
                None => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub order: Order,
    pub backend: Option<BackendSpec>,
    pub alpha: f64,
    pub max_in_flight: usize,
    pub max_input_tokens: Option<usize>,
    pub registry: SlotRegistry,
}

/// A constructed backend plus the angles it was trained on, if known.
pub struct LoadedBackend {
    pub backend: Arc<dyn Backend>,
    pub trained_angles: Vec<Angle>,
}

impl Settings {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, Failure> {
        let file = match &args.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let env_url = std::env::var(REMOTE_URL_ENV).ok();
        let backend = match args.backend.as_ref().or(file.backend.as_ref()) {
            Some(spec) => Some(BackendSpec::parse(spec, env_url.as_deref())?),
            None => env_url.filter(|u| !u.is_empty()).map(BackendSpec::Remote),
        };
        Ok(Self {
            seed: args.seed.or(file.seed).unwrap_or(0),
            order: args.order.or(file.order).unwrap_or(Order::AsGiven),
            backend,
            alpha: args.alpha.or(file.alpha).unwrap_or(ToyModelParams::default().alpha),
            max_in_flight: args.max_in_flight.or(file.max_in_flight).unwrap_or(DEFAULT_MAX_IN_FLIGHT),
            max_input_tokens: args.max_input_tokens.or(file.max_input_tokens),
            registry: SlotRegistry::default(),
        })
    }

    pub fn policy(&self) -> OrderPolicy {
        match self.order {
            Order::AsGiven => OrderPolicy::AsGiven,
            Order::Scrambled => OrderPolicy::Scrambled { seed: self.seed },
        }
    }

    pub fn load_backend(&self) -> Result<LoadedBackend, Failure> {
        match &self.backend {
            None => Err(Failure::Input("this command needs --backend".into())),
            Some(BackendSpec::Toy(path)) => {
                let file = std::fs::File::open(path).map_err(|e| Failure::Input(format!("{path}: {e}")))?;
                let pairs = read_pairs(&self.registry, std::io::BufReader::new(file))?;
                let toy = ToyBackend::train(&pairs, ToyModelParams { alpha: self.alpha })?;
                Ok(LoadedBackend {
                    backend: Arc::new(toy),
                    trained_angles: distinct_angles(&pairs),
                })
            }
            Some(BackendSpec::Remote(url)) => {
                let mut remote = RemoteBackend::new(url.clone()).with_max_in_flight(self.max_in_flight);
                if let Some(limit) = self.max_input_tokens {
                    remote = remote.with_max_input_tokens(limit);
                }
                Ok(LoadedBackend {
                    backend: Arc::new(remote),
                    trained_angles: Vec::new(),
                })
            }
        }
    }
}
