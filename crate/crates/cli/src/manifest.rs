//! Run manifests, digests and guarded output writing.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use swapsched_core::FORMAT_VERSION;

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// What a run read and how it was configured.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub subcommand: String,
    /// Role (network, hardware, ...) to the files read for it.
    pub inputs: BTreeMap<String, Vec<InputFile>>,
    pub params: BTreeMap<String, String>,
    pub out_dir: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        RunManifest {
            format_version: FORMAT_VERSION,
            subcommand: subcommand.to_string(),
            inputs: BTreeMap::new(),
            params: BTreeMap::new(),
            out_dir: None,
        }
    }

    /// Records an input; the file has to exist now.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.entry(role.to_string()).or_default().push(InputFile {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn opt_input(&mut self, role: &str, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => self.input(role, p),
            None => Ok(()),
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.params.insert(key.to_string(), value.to_string());
    }

    /// Hash of the subcommand, input contents and parameters. Paths and the
    /// output directory are left out so relocated runs share a digest.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            format_version: u32,
            subcommand: &'a str,
            inputs: BTreeMap<&'a str, Vec<&'a str>>,
            params: &'a BTreeMap<String, String>,
        }
        let key = Key {
            format_version: self.format_version,
            subcommand: &self.subcommand,
            inputs: self
                .inputs
                .iter()
                .map(|(role, files)| (role.as_str(), files.iter().map(|f| f.sha256.as_str()).collect()))
                .collect(),
            params: &self.params,
        };
        sha256_hex(&serde_json::to_vec(&key).expect("manifest key serializes"))
    }

    fn input_paths(&self) -> Vec<PathBuf> {
        self.inputs
            .values()
            .flatten()
            .filter_map(|f| fs::canonicalize(&f.path).ok())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
struct OutputRecord {
    name: String,
    sha256: String,
}

/// Writes documents into the output directory, refusing to clobber inputs.
pub struct Outputs {
    dir: PathBuf,
    canonical_dir: PathBuf,
    inputs: Vec<PathBuf>,
    digest: String,
    written: Vec<OutputRecord>,
}

impl Outputs {
    pub fn create(dir: &Path, manifest: &mut RunManifest) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        manifest.out_dir = Some(dir.display().to_string());
        Ok(Outputs {
            dir: dir.to_path_buf(),
            canonical_dir: fs::canonicalize(dir)?,
            inputs: manifest.input_paths(),
            digest: manifest.digest(),
            written: Vec::new(),
        })
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.canonical_dir.join(name);
        if self.inputs.iter().any(|p| *p == target) {
            bail!(io::Error::new(
                io::ErrorKind::AlreadyExists,
                format!("refusing to overwrite input {}", target.display())
            ));
        }
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(OutputRecord {
            name: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Serializes `doc` with `format_version` and `manifest_digest` added at
    /// the top level.
    pub fn write_json<T: Serialize>(&mut self, name: &str, doc: &T) -> Result<PathBuf> {
        let text = self.stamp(doc)?;
        self.write_bytes(name, text.as_bytes())
    }

    pub fn stamp<T: Serialize>(&self, doc: &T) -> Result<String> {
        let mut value = serde_json::to_value(doc)?;
        if let Value::Object(map) = &mut value {
            map.entry("format_version").or_insert(FORMAT_VERSION.into());
            map.insert("manifest_digest".into(), self.digest.clone().into());
        }
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    /// Writes `manifest.json` listing everything produced so far.
    pub fn finish(mut self, manifest: &RunManifest) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            manifest: &'a RunManifest,
            outputs: &'a [OutputRecord],
        }
        let outputs = std::mem::take(&mut self.written);
        self.write_json("manifest.json", &Doc { manifest, outputs: &outputs })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_paths() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        fs::write(&a, "{}").unwrap();
        fs::write(&b, "{}").unwrap();
        let mut m1 = RunManifest::new("plan");
        m1.input("network", &a).unwrap();
        let mut m2 = RunManifest::new("plan");
        m2.input("network", &b).unwrap();
        assert_eq!(m1.digest(), m2.digest());
        m2.param("step", 4);
        assert_ne!(m1.digest(), m2.digest());
    }

    #[test]
    fn refuses_to_overwrite_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("model.json");
        fs::write(&input, "{}").unwrap();
        let mut m = RunManifest::new("fit");
        m.input("model", &input).unwrap();
        let mut out = Outputs::create(dir.path(), &mut m).unwrap();
        let err = out.write_bytes("model.json", b"x").unwrap_err();
        assert!(err.chain().any(|c| c.is::<io::Error>()));
        assert_eq!(fs::read_to_string(&input).unwrap(), "{}");
        out.write_json("other.json", &serde_json::json!({"a": 1})).unwrap();
        let text = fs::read_to_string(dir.path().join("other.json")).unwrap();
        assert!(text.contains("manifest_digest") && text.contains("format_version"));
    }
}
