//! Run manifests: what was run, with which seeds and inputs, and the hashes
//! of everything it wrote. A manifest sits next to the primary output as
//! `<output>.manifest.json`; JSON outputs also name it in a `manifest` field.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use cbm_audit::io::{sha256_file, sha256_hex};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, verbatim.
    pub args: Vec<String>,
    pub working_dir: PathBuf,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Path (as given) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub version: String,
    pub wall_time_s: f64,
    pub budget_exceeded: bool,
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Collects the files a command reads and writes.
#[derive(Debug)]
pub struct Context {
    primary: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub budget_exceeded: bool,
}

impl Context {
    pub fn new(primary: Option<&Path>) -> Self {
        Self {
            primary: primary.map(Path::to_path_buf),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            budget_exceeded: false,
        }
    }

    pub fn primary(&self) -> Option<&Path> {
        self.primary.as_deref()
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Records a file that a library routine already wrote.
    pub fn wrote(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&mut self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        self.wrote(path);
        Ok(())
    }

    /// Writes `value` to `out` (tagged with the manifest name) or prints it.
    pub fn emit_json(&mut self, out: Option<&Path>, mut value: serde_json::Value) -> Result<()> {
        match out {
            Some(path) => {
                if let (Some(obj), Some(primary)) = (value.as_object_mut(), &self.primary) {
                    let name = manifest_path(primary);
                    let name = name.file_name().map(|f| f.to_string_lossy().into_owned());
                    obj.insert("manifest".into(), name.into());
                }
                self.write(path, &(serde_json::to_string_pretty(&value)? + "\n"))
            }
            None => {
                println!("{}", serde_json::to_string_pretty(&value)?);
                Ok(())
            }
        }
    }

    /// Prints a plain value, or writes it as a one-line file.
    pub fn emit_line(&mut self, out: Option<&Path>, line: &str) -> Result<()> {
        match out {
            Some(path) => self.write(path, &format!("{line}\n")),
            None => {
                println!("{line}");
                Ok(())
            }
        }
    }
}

fn hash_all(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            Ok((
                p.display().to_string(),
                sha256_file(p).with_context(|| format!("hashing {}", p.display()))?,
            ))
        })
        .collect()
}

pub fn build(
    command: &str,
    args: &[String],
    config: serde_json::Value,
    ctx: &Context,
    wall_time_s: f64,
) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.to_string(),
        args: args.to_vec(),
        working_dir: std::env::current_dir()?,
        config,
        seeds: ctx.seeds.clone(),
        inputs: hash_all(&ctx.inputs)?,
        outputs: hash_all(&ctx.outputs)?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s,
        budget_exceeded: ctx.budget_exceeded,
    })
}

pub fn save(manifest: &RunManifest, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Serialize)]
pub struct FileCheck {
    pub path: String,
    pub expected: String,
    pub actual: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ReplayReport {
    pub identical: bool,
    pub inputs_unchanged: bool,
    pub outputs: Vec<FileCheck>,
}

pub fn check_inputs(manifest: &RunManifest) -> bool {
    manifest
        .inputs
        .iter()
        .all(|(p, h)| sha256_file(Path::new(p)).is_ok_and(|a| &a == h))
}

pub fn compare_outputs(manifest: &RunManifest) -> Vec<FileCheck> {
    manifest
        .outputs
        .iter()
        .map(|(p, h)| FileCheck {
            path: p.clone(),
            expected: h.clone(),
            actual: fs::read(p).ok().map(|b| sha256_hex(&b)),
        })
        .collect()
}
