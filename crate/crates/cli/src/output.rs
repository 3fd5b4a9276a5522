//! Artifact writers that stamp every file with the config hash and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn line(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash, self.seed)
    }
}

pub struct Artifacts {
    pub dir: PathBuf,
    pub provenance: Provenance,
    pub json: bool,
    pub csv: bool,
    pub svg: bool,
}

impl Artifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn ensure_dir(&self, sub: Option<&str>) -> Result<PathBuf> {
        let d = match sub {
            Some(s) => self.dir.join(s),
            None => self.dir.clone(),
        };
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    /// Pretty JSON with a top-level `provenance` object. Non-object values are
    /// wrapped as `{"provenance": .., "data": ..}`.
    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let v = serde_json::to_value(value)?;
        let prov = serde_json::to_value(&self.provenance)?;
        let stamped = match v {
            serde_json::Value::Object(mut map) => {
                map.insert("provenance".into(), prov);
                serde_json::Value::Object(map)
            }
            other => serde_json::json!({ "provenance": prov, "data": other }),
        };
        let mut text = serde_json::to_string_pretty(&stamped)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        if self.json {
            self.write_json(&self.path(name), value)?;
        }
        Ok(())
    }

    /// Calls `write` with an open file and the provenance comment line.
    pub fn csv(&self, name: &str, write: impl FnOnce(BufWriter<File>, &str) -> lpm_core::Result<()>) -> Result<()> {
        if !self.csv {
            return Ok(());
        }
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write(BufWriter::new(file), &self.provenance.line())?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn svg(&self, name: &str, body: &str) -> Result<()> {
        if !self.svg {
            return Ok(());
        }
        let path = self.path(name);
        let mut f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(f, "<!-- {} -->", self.provenance.line())?;
        f.write_all(body.as_bytes())?;
        f.flush()?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn text(&self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, format!("<!-- {} -->\n{body}", self.provenance.line()))
            .with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}
