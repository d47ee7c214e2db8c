use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bjmd::datagen::{gen_dataset, SynthSpec};
use serde::Serialize;

use super::Outcome;
use crate::artifacts::{labels_file, x_file};
use crate::io;
use crate::manifest::{HyperBlock, Manifest, SourceEntry};

/// Spec from a TOML file, or a named preset with its last noise level set.
pub fn resolve_spec(path: Option<&Path>, preset: Option<&str>, sigma3: f64) -> Result<SynthSpec> {
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        return toml::from_str(&text).with_context(|| format!("parsing {}", p.display()));
    }
    match preset.unwrap_or("small") {
        "small" => Ok(SynthSpec::small_scale(sigma3)),
        "large" => Ok(SynthSpec::large_scale(sigma3)),
        other => bail!("unknown preset '{other}'"),
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    generator: String,
    seed: u64,
    spec: &'a SynthSpec,
}

pub fn run(mut spec: SynthSpec, seed: Option<u64>, out: &Path) -> Result<Outcome> {
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = gen_dataset(&spec).context("invalid generator spec")?;
    let mut sources = Vec::new();
    for c in 0..spec.n_sources() {
        io::write_matrix(&out.join(x_file(c)), ds.data.source(c))?;
        io::write_matrix(&out.join(format!("H_true_{}.csv", c + 1)), &ds.h_true[c])?;
        io::write_labels(&out.join(labels_file(c)), &ds.labels[c])?;
        sources.push(SourceEntry {
            name: format!("source{}", c + 1),
            matrix: PathBuf::from(x_file(c)),
            labels: Some(PathBuf::from(labels_file(c))),
        });
    }
    io::write_matrix(&out.join("W_true.csv"), &ds.w_true)?;

    let mut solver = toml::Table::new();
    solver.insert("engine".into(), toml::Value::String("map".into()));
    let manifest = Manifest { k: spec.k, seed: spec.seed, sources, hyper: HyperBlock::default(), solver };
    fs::write(out.join("manifest.toml"), manifest.to_toml()?)?;
    let provenance =
        Provenance { generator: format!("bjmd {}", env!("CARGO_PKG_VERSION")), seed: spec.seed, spec: &spec };
    io::write_json(&out.join("provenance.json"), &provenance)?;
    log::info!(
        "wrote {} sources of {}x{} to {}",
        spec.n_sources(),
        spec.n_features(),
        spec.n_samples,
        out.display()
    );
    Ok(Outcome::Success)
}
