use std::path::{Path, PathBuf};

use coe_core::train::DataConfig;
use coe_core::{Error, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// After training, write per-layer co-activation CSVs of the final evaluation here.
    pub out_dir: Option<PathBuf>,
}

/// One JSON document describing a run. Every field has a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    /// Copies derived fields into place and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.model = self.model.resolved();
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq {}",
                self.train.seq_len, self.model.max_seq
            )));
        }
        Ok(self)
    }
}

/// Reads a run config; relative paths inside it resolve against its directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let absolute = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    cfg.data.path = cfg.data.path.as_deref().map(absolute);
    cfg.analysis.out_dir = cfg.analysis.out_dir.as_deref().map(absolute);
    Ok(cfg)
}
