use std::fs;
use std::path::{Path, PathBuf};

use drugprot_core::ensemble::PipelineConfig;
use drugprot_core::{CorpusPaths, Error, Result};
use serde::{Deserialize, Serialize};

pub const OUT_DIR_ENV: &str = "DRUGPROT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "drugprot-out";

/// One JSON document describing a run. Flags given on the command line are
/// applied on top before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_corpus: Option<CorpusPaths>,
    pub vocab: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks every referenced input exists, plus the pipeline settings.
    pub fn validate(&self) -> Result<()> {
        let mut inputs: Vec<(&str, &Path)> = vec![("vocab", &self.vocab)];
        for (label, c) in [("corpus", Some(&self.corpus)), ("test_corpus", self.test_corpus.as_ref())] {
            if let Some(c) = c {
                inputs.push((label, &c.abstracts));
                inputs.push((label, &c.entities));
                if let Some(r) = &c.relations {
                    inputs.push((label, r));
                }
            }
        }
        for (label, p) in inputs {
            if !p.exists() {
                return Err(Error::Config(format!("{label} path {} does not exist", p.display())));
            }
        }
        self.pipeline.validate()
    }
}

/// Flag, then environment, then config file, then the default.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
