//! Run directories: `<root>/<config-hash>-<UTC timestamp>`, holding the
//! resolved config and everything a command writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::config::Config;

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, config: &Config, command: &str) -> anyhow::Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{}-{stamp}", config.hash());
        let mut path = root.join(&base);
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = root.join(format!("{base}-{n}"));
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join("config.toml"), config.to_toml())?;
        fs::write(path.join("command.txt"), format!("{command}\n"))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> anyhow::Result<PathBuf> {
        let p = self.file(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        self.write(name, &(text + "\n"))
    }
}
