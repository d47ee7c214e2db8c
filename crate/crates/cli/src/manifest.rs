//! Dataset manifests.
//!
//! ```toml
//! k = 5
//! seed = 0
//!
//! [[sources]]
//! name = "source1"
//! matrix = "X_1.csv"
//! labels = "labels_1.csv"
//!
//! [hyper]
//! lambda = 1.0
//! alpha0 = 1.1        # or one value per factor
//!
//! [solver]
//! engine = "map"
//! tol_outer = 1e-3    # any SolverConfig field; the rest keep the engine defaults
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bjmd::evaluation::LabelMatrix;
use bjmd::experiment::Engine;
use bjmd::{Hyperparams, MultiViewData, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub name: String,
    pub matrix: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha0 {
    Scalar(f64),
    PerFactor(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperBlock {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_alpha0")]
    pub alpha0: Alpha0,
    #[serde(default = "default_ab")]
    pub a0: f64,
    #[serde(default = "default_ab")]
    pub b0: f64,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_alpha0() -> Alpha0 {
    Alpha0::Scalar(1.1)
}

fn default_ab() -> f64 {
    1.0
}

impl Default for HyperBlock {
    fn default() -> Self {
        Self { lambda: default_lambda(), alpha0: default_alpha0(), a0: default_ab(), b0: default_ab() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    pub sources: Vec<SourceEntry>,
    #[serde(default)]
    pub hyper: HyperBlock,
    /// `engine` plus SolverConfig overrides.
    #[serde(default)]
    pub solver: toml::Table,
}

/// A manifest with its file references resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub manifest: Manifest,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text)?;
        ensure!(m.k >= 1, "k must be at least 1");
        ensure!(!m.sources.is_empty(), "manifest lists no sources");
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let alpha0 = match &self.hyper.alpha0 {
            Alpha0::Scalar(a) => vec![*a; self.k],
            Alpha0::PerFactor(v) => {
                ensure!(v.len() == self.k, "alpha0 lists {} values but k = {}", v.len(), self.k);
                v.clone()
            }
        };
        let hyper = Hyperparams { lambda: self.hyper.lambda, alpha0, a0: self.hyper.a0, b0: self.hyper.b0 };
        hyper.validate()?;
        Ok(hyper)
    }

    /// Engine named in the solver block, defaulting to MAP.
    pub fn engine(&self) -> Result<Engine> {
        match self.solver.get("engine") {
            None => Ok(Engine::Map),
            Some(toml::Value::String(s)) => Ok(s.parse()?),
            Some(v) => bail!("solver.engine must be a string, got {v}"),
        }
    }

    /// Engine defaults overlaid with the solver block's remaining keys.
    pub fn solver_config(&self, engine: Engine) -> Result<SolverConfig> {
        merge_config(engine.default_config(), &self.solver)
    }
}

/// Overlays `overrides` (minus `engine`) onto `base`, rejecting unknown keys.
pub fn merge_config(base: SolverConfig, overrides: &toml::Table) -> Result<SolverConfig> {
    let mut table = toml::Table::try_from(&base)?;
    for (key, value) in overrides {
        if key == "engine" {
            continue;
        }
        let slot = table.get_mut(key).with_context(|| format!("unknown solver setting '{key}'"))?;
        let value = match (&slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
            _ => value.clone(),
        };
        *slot = value;
    }
    let config: SolverConfig =
        toml::Value::Table(table).try_into().context("invalid solver settings")?;
    config.validate()?;
    Ok(config)
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let manifest = Manifest::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { manifest, dir };
        for s in &loaded.manifest.sources {
            for p in std::iter::once(&s.matrix).chain(&s.labels) {
                let full = loaded.resolve(p);
                ensure!(full.is_file(), "source '{}': file {} does not exist", s.name, full.display());
            }
        }
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn data(&self) -> Result<MultiViewData> {
        let mats = self
            .manifest
            .sources
            .iter()
            .map(|s| io::read_matrix(&self.resolve(&s.matrix)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiViewData::new(mats)?)
    }

    /// Per-source labels, `None` unless every source has a labels file.
    pub fn labels(&self) -> Result<Option<Vec<LabelMatrix>>> {
        let mut out = Vec::new();
        for s in &self.manifest.sources {
            match &s.labels {
                Some(p) => out.push(io::read_labels(&self.resolve(p))?),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    /// Copy of the manifest with every path made absolute.
    pub fn absolutized(&self) -> Result<Manifest> {
        let mut m = self.manifest.clone();
        for s in &mut m.sources {
            s.matrix = fs::canonicalize(self.resolve(&s.matrix))?;
            if let Some(l) = &s.labels {
                s.labels = Some(fs::canonicalize(self.resolve(l))?);
            }
        }
        Ok(m)
    }
}
