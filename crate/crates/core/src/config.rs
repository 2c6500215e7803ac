//! Run configuration files (TOML) with strict key checking.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::body::PoseParams;
use crate::error::{Error, Result};
use crate::guidance::NoiseSchedule;
use crate::optim::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Exact denoiser for renders of a reference cloud from 16 fixed views.
    #[default]
    Analytic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Base URL of a score server (remote only).
    pub endpoint: String,
    pub timeout_secs: f64,
    /// Reference cloud for the analytic provider; a painted body cloud when absent.
    pub reference: Option<PathBuf>,
    pub reference_count: usize,
    pub reference_seed: u64,
    pub view_distance: f64,
    pub view_fovy: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Analytic,
            endpoint: String::new(),
            timeout_secs: 60.0,
            reference: None,
            reference_count: 2000,
            reference_seed: 1,
            view_distance: 1.75,
            view_fovy: 55.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Base profile supplying every default: `desk` or `full`.
    pub profile: String,
    pub output: PathBuf,
    /// Body model file; the built-in capsule person when absent.
    pub body: Option<PathBuf>,
    pub pose: PoseParams,
    pub provider: ProviderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile("desk").expect("built-in profile")
    }
}

impl RunConfig {
    pub fn for_profile(profile: &str) -> Option<Self> {
        Some(Self {
            profile: profile.to_string(),
            output: PathBuf::from("out"),
            body: None,
            pose: PoseParams::default(),
            provider: ProviderConfig::default(),
            train: TrainConfig::profile(profile)?,
        })
    }

    /// Parses `text` over the defaults of its `profile` and reports every
    /// unknown key and invalid value at once.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let profile = match user.get("profile") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(vec![format!("profile must be a string, got {v}")])),
        };
        let base = Self::for_profile(&profile)
            .ok_or_else(|| Error::Config(vec![format!("unknown profile `{profile}` (expected desk or full)")]))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(vec![e.to_string()]))?;
        merge(&mut merged, user);

        let mut problems = Vec::new();
        let parsed: std::result::Result<RunConfig, _> =
            serde_ignored::deserialize(toml::Value::Table(merged), |path| {
                problems.push(format!("unknown key `{path}`"))
            });
        let config = match parsed {
            Ok(c) => c,
            Err(e) => {
                problems.push(e.to_string());
                return Err(Error::Config(problems));
            }
        };
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.train.problems("train.", NoiseSchedule::default().steps());
        let pc = &self.provider;
        if pc.kind == ProviderKind::Remote && pc.endpoint.is_empty() {
            p.push("provider.endpoint is required for the remote provider".into());
        }
        if !(pc.timeout_secs > 0.0) {
            p.push("provider.timeout_secs must be positive".into());
        }
        if pc.reference_count == 0 {
            p.push("provider.reference_count must be positive".into());
        }
        if !(pc.view_distance > 0.0) || !(pc.view_fovy > 0.0 && pc.view_fovy < 180.0) {
            p.push("provider.view_distance must be positive and provider.view_fovy in (0, 180)".into());
        }
        p
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }
}

/// Overlays `user` onto `base`, recursing into tables. A table that names its
/// own `kind` replaces the default wholesale so variant fields do not mix.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
