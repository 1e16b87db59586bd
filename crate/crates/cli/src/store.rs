//! File-backed stage store. Each stage writes its outputs under
//! `<store>/<stage>/` and a manifest `<store>/manifests/<stage>.txt` that
//! lists the sha256 of every input and output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_DIR: &str = "manifests";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Every file under `dir`, keyed by its `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("under dir");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Inputs and outputs of one stage run, for its manifest.
#[derive(Debug, Default)]
pub struct StageRecord {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    params: Vec<(String, String)>,
}

impl StageRecord {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.params.push((key.to_string(), value.to_string()));
    }
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Fails with the missing file's name and the stage that produces it.
    pub fn require(path: &Path, producer: &str) -> Result<()> {
        if !path.exists() {
            bail!("missing input {} (run `stormcast {producer}` first)", path.display());
        }
        Ok(())
    }

    pub fn write(&self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    /// Clears a stage's output directory so stale files do not survive.
    pub fn reset_dir(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }

    fn hash_entry(&self, kind: &str, p: &Path, out: &mut String) -> Result<()> {
        if p.is_dir() {
            for (rel, sha) in hash_tree(p)? {
                out.push_str(&format!("{kind} {sha} {}/{rel}\n", self.display(p)));
            }
        } else {
            out.push_str(&format!("{kind} {} {}\n", sha256_file(p)?, self.display(p)));
        }
        Ok(())
    }

    /// Writes the stage manifest and returns its own digest.
    pub fn record(&self, stage: &str, rec: &StageRecord) -> Result<String> {
        let mut text = format!("stage {stage}\n");
        for (k, v) in &rec.params {
            text.push_str(&format!("param {k}={v}\n"));
        }
        for p in &rec.inputs {
            self.hash_entry("input", p, &mut text)?;
        }
        for p in &rec.outputs {
            self.hash_entry("output", p, &mut text)?;
        }
        let path = self.path(MANIFEST_DIR).join(format!("{stage}.txt"));
        self.write(&path, &text)?;
        Ok(sha256_bytes(text.as_bytes()))
    }
}
