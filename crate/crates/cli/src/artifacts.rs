//! Run directories, content digests and the on-disk artifact formats.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dbgp_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Creates `<root>/<command>-<hash>-<unix seconds>`, adding a counter when
/// the name is taken.
pub fn create_run_dir(root: &Path, command: &str, config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{command}-{}-{secs}", config.hash());
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                write_text(&dir.join("config.toml"), &config.to_toml())?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(dir, e)),
        }
    }
    unreachable!()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `sha256:<hex>` over the named files of `dir`, in the given order.
pub fn digest_files(dir: &Path, files: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(f.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().fold(String::from("sha256:"), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// JSON document carrying the resolved configuration, input digests and a
/// payload.
pub struct Envelope {
    fields: Map<String, Value>,
}

impl Envelope {
    pub fn new(kind: &str, config: &RunConfig, inputs: &[(&str, String)]) -> Self {
        let mut fields = Map::new();
        fields.insert("kind".into(), Value::from(kind));
        fields.insert("config".into(), config.embedded());
        let inputs: Map<String, Value> = inputs.iter().map(|(k, v)| (k.to_string(), Value::from(v.clone()))).collect();
        fields.insert("inputs".into(), Value::Object(inputs));
        Self { fields }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        let v = serde_json::to_value(value).map_err(|e| Error::Numeric(format!("cannot serialize `{key}`: {e}")))?;
        self.fields.insert(key.into(), v);
        Ok(self)
    }

    pub fn write(&self, path: &Path, pretty: bool) -> Result<()> {
        let obj = Value::Object(self.fields.clone());
        let mut text = if pretty {
            serde_json::to_string_pretty(&obj)
        } else {
            serde_json::to_string(&obj)
        }
        .map_err(|e| Error::Numeric(e.to_string()))?;
        text.push('\n');
        write_text(path, &text)
    }
}

/// Reads field `key` of an envelope of the given kind.
pub fn read_field<T: DeserializeOwned>(path: &Path, kind: &str, key: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc: Map<String, Value> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if doc.get("kind").and_then(Value::as_str) != Some(kind) {
        return Err(Error::Checkpoint(format!("{} is not a {kind} artifact", path.display())));
    }
    let v = doc
        .remove(key)
        .ok_or_else(|| Error::Checkpoint(format!("{} has no `{key}` field", path.display())))?;
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("{}: `{key}`: {e}", path.display())))
}

/// Tab-separated table preceded by the embedded configuration as `#` lines.
pub struct Table {
    text: String,
}

impl Table {
    pub fn new(config: &RunConfig, columns: &[&str]) -> Self {
        let embedded: toml::Table = serde_json::from_value(config.embedded()).expect("configuration round-trips");
        let mut text = String::new();
        for line in toml::to_string(&embedded).expect("configuration serializes").lines() {
            if !line.is_empty() {
                let _ = writeln!(text, "# {line}");
            }
        }
        text.push_str(&columns.join("\t"));
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join("\t"));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.text)
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "NA".into())
}
