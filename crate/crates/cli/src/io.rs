//! File helpers and the per-command manifest written beside outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use curate_core::corpus::{self, Document};
use curate_core::hashing::sha256_hex;

use crate::Globals;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn json_bytes<T: Serialize + ?Sized>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    for it in items {
        serde_json::to_writer(&mut b, it)?;
        b.push(b'\n');
    }
    Ok(b)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    write_file(path, &json_bytes(v)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_file(path, &jsonl_bytes(items)?)
}

pub fn write_shard_file(path: &Path, docs: &[Document]) -> Result<()> {
    write_file(path, &corpus::shard_bytes(docs))
}

fn input_records(inputs: &[PathBuf]) -> Result<Vec<Value>> {
    inputs
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(json!({"path": p, "sha256": sha256_hex(&bytes)}))
        })
        .collect()
}

fn manifest(command: &str, g: &Globals, inputs: &[PathBuf], outputs: BTreeMap<String, String>, summary: Value) -> Result<Value> {
    Ok(json!({
        "command": command,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "seed": g.seed,
        "tokenizer": g.tokenizer,
        "inputs": input_records(inputs)?,
        "outputs": outputs,
        "summary": summary,
    }))
}

/// Collects files written into one output directory, then records their
/// checksums in `manifest.json` beside them.
pub struct Outputs<'g> {
    command: &'static str,
    dir: PathBuf,
    globals: &'g Globals,
    inputs: Vec<PathBuf>,
    sums: BTreeMap<String, String>,
}

impl<'g> Outputs<'g> {
    pub fn new(command: &'static str, dir: &Path, globals: &'g Globals, inputs: &[PathBuf]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            command,
            dir: dir.to_path_buf(),
            globals,
            inputs: inputs.to_vec(),
            sums: BTreeMap::new(),
        })
    }

    pub fn bytes(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        write_file(&self.dir.join(name), &bytes)?;
        self.sums.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn shard(&mut self, name: &str, docs: &[Document]) -> Result<()> {
        self.bytes(name, corpus::shard_bytes(docs))
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, v: &T) -> Result<()> {
        self.bytes(name, json_bytes(v)?)
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        self.bytes(name, jsonl_bytes(items)?)
    }

    /// Records a file some library call already wrote.
    pub fn existing(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.sums.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish(self, summary: Value) -> Result<()> {
        let m = manifest(self.command, self.globals, &self.inputs, self.sums, summary)?;
        write_json(&self.dir.join(MANIFEST_FILE), &m)
    }
}

/// Manifest for a command whose output is a single file: `<file>.manifest.json`.
pub fn file_manifest(command: &str, out: &Path, g: &Globals, inputs: &[PathBuf], summary: Value) -> Result<()> {
    let bytes = fs::read(out).with_context(|| format!("reading {}", out.display()))?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let outputs = BTreeMap::from([(name.clone(), sha256_hex(&bytes))]);
    let m = manifest(command, g, inputs, outputs, summary)?;
    write_json(&out.with_file_name(format!("{name}.manifest.json")), &m)
}
