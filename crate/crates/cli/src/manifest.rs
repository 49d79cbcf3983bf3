use serde::Serialize;
use std::path::{Path, PathBuf};

/// Everything needed to rerun a command, written next to its outputs.
#[derive(Debug, Default, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: Config,
    pub resolved: Resolved,
}

#[derive(Debug, Default, Serialize)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_fraction: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim_fraction: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_list: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotary_stage: Option<String>,
}

/// Integer budgets actually used, echoed for reproducibility.
#[derive(Debug, Default, Serialize)]
pub struct Resolved {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub k: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub d: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h2o_budget: Option<usize>,
}

impl RunManifest {
    pub fn new(subcommand: &'static str) -> Self {
        Self {
            subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            threads: crate::threads::current(),
            ..Default::default()
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// `report.tsv` → `report.tsv.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}
