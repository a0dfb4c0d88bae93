use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What produced an output file; written as `# key: value` lines at the top
/// of text outputs and as a `header` object in JSON outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub spec: Option<String>,
    pub spec_sha256: Option<String>,
    pub input: Option<String>,
    pub input_sha256: Option<String>,
    pub tolerances: String,
}

impl Provenance {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            spec: None,
            spec_sha256: None,
            input: None,
            input_sha256: None,
            tolerances: cfg.tolerance_summary(),
        }
    }

    pub fn with_spec(mut self, path: &Path, bytes: &[u8]) -> Self {
        self.spec = Some(path.display().to_string());
        self.spec_sha256 = Some(sha256_hex(bytes));
        self
    }

    pub fn with_input(mut self, path: &Path, bytes: &[u8]) -> Self {
        self.input = Some(path.display().to_string());
        self.input_sha256 = Some(sha256_hex(bytes));
        self
    }

    pub fn header(&self) -> String {
        let mut out = format!("# {} {}\n# command: {}\n", self.tool, self.version, self.command);
        match (&self.spec, &self.spec_sha256) {
            (Some(p), Some(h)) => out += &format!("# spec: {p} sha256={h}\n"),
            _ => out += "# spec: none\n",
        }
        if let (Some(p), Some(h)) = (&self.input, &self.input_sha256) {
            out += &format!("# input: {p} sha256={h}\n");
        }
        out += &format!("# tolerances: {}\n", self.tolerances);
        out
    }
}

/// Output directory, created on first write.
pub struct OutDir {
    dir: PathBuf,
    provenance: Provenance,
    extra: Vec<String>,
}

impl OutDir {
    pub fn new(dir: &Path, provenance: Provenance) -> Self {
        Self { dir: dir.to_path_buf(), provenance, extra: Vec::new() }
    }

    /// Additional `# key: value` line for every text output.
    pub fn note(&mut self, line: String) {
        self.extra.push(line);
    }

    fn header(&self) -> String {
        let mut h = self.provenance.header();
        for line in &self.extra {
            h += &format!("# {line}\n");
        }
        h
    }

    fn path(&self, name: &str) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        Ok(self.dir.join(name))
    }

    pub fn write(&self, name: &str, body: &str) -> anyhow::Result<PathBuf> {
        let path = self.path(name)?;
        std::fs::write(&path, format!("{}{body}", self.header())).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, key: &str, value: &T) -> anyhow::Result<PathBuf> {
        let path = self.path(name)?;
        let mut doc = serde_json::Map::new();
        doc.insert("header".into(), serde_json::to_value(&self.provenance)?);
        doc.insert(key.into(), serde_json::to_value(value)?);
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Buffered writer with the header already written.
    pub fn stream(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.path(name)?;
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        w.write_all(self.header().as_bytes())?;
        Ok(w)
    }
}
