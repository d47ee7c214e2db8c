use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use bjmd::evaluation::{select_features, SelectMode};

use super::Outcome;
use crate::artifacts::{x_file, Sigma2File, SIGMA2};
use crate::io;
use crate::manifest::Loaded;

pub fn run(manifest: &Path, fit_dir: &Path, alpha: f64, mode: SelectMode, out: &Path) -> Result<Outcome> {
    let loaded = Loaded::from_path(manifest)?;
    let data = loaded.data()?;
    let noise: Sigma2File = io::read_json(&fit_dir.join(SIGMA2))?;
    ensure!(
        noise.sources.len() == data.n_sources(),
        "{} has {} sources but the manifest lists {}",
        SIGMA2,
        noise.sources.len(),
        data.n_sources()
    );
    let sigma2: Vec<f64> = noise.sources.iter().map(|s| s.sigma2).collect();
    let report = select_features(&data, &sigma2, alpha, mode)?;
    io::write_json(&out.join("selection.json"), &report)?;

    let mut next = loaded.absolutized()?;
    if report.selected.is_empty() {
        log::warn!("no feature passed the test at level {alpha}; writing the original manifest");
    } else {
        let filtered = data.select_rows(&report.selected)?;
        for (c, entry) in next.sources.iter_mut().enumerate() {
            let name = format!("selected_{}", x_file(c));
            io::write_matrix(&out.join(&name), filtered.source(c))?;
            entry.matrix = PathBuf::from(name);
        }
        log::info!("kept {} of {} features", report.selected.len(), data.n_features());
    }
    fs::write(out.join("manifest.toml"), next.to_toml()?)?;
    Ok(Outcome::Success)
}
