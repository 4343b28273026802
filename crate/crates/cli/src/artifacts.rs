//! CSV/JSON output with a checksummed manifest and a generated column schema.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Version of every JSON document written here.
pub const SCHEMA_VERSION: &str = "1.0";

pub const MANIFEST: &str = "manifest.json";
pub const CSV_SCHEMA: &str = "csv_schema.json";

/// A CSV table with documented columns.
#[derive(Debug, Clone)]
pub struct Table {
    pub description: String,
    pub columns: Vec<(&'static str, &'static str)>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(description: impl Into<String>, columns: &[(&'static str, &'static str)]) -> Self {
        Self {
            description: description.into(),
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn render(&self) -> String {
        let mut s = self.columns.iter().map(|c| c.0).collect::<Vec<_>>().join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Formats one CSV cell.
pub fn cell(v: impl Display) -> String {
    v.to_string()
}

/// Shortest round-trip form of `x`, in exponent notation outside `[1e-4, 1e15)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

/// Empty when absent.
pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Outcome of one gate.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Writes artifacts into one directory and keeps their inventory.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    files: BTreeMap<String, FileEntry>,
    schema: BTreeMap<String, Value>,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
            schema: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.insert(
            name.to_string(),
            FileEntry {
                path: name.to_string(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, table: &Table) -> std::io::Result<()> {
        let columns: Vec<Value> = table
            .columns
            .iter()
            .map(|(c, d)| json!({ "name": c, "description": d }))
            .collect();
        self.schema.insert(
            name.to_string(),
            json!({ "description": table.description, "columns": columns }),
        );
        self.write_bytes(name, table.render().as_bytes())
    }

    /// Serializes `value` as a JSON object carrying `schema_version`.
    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> std::io::Result<()> {
        let mut v = serde_json::to_value(value).map_err(std::io::Error::other)?;
        let obj = match v {
            Value::Object(ref mut m) => m,
            _ => {
                v = json!({ "data": v });
                v.as_object_mut().expect("object")
            }
        };
        obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
        let mut text = serde_json::to_string_pretty(&v).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Lists files written elsewhere under the subdirectory `prefix`.
    pub fn include(&mut self, prefix: &str, entries: &[FileEntry]) {
        for e in entries {
            let path = format!("{prefix}/{}", e.path);
            self.files.insert(path.clone(), FileEntry { path, ..e.clone() });
        }
    }

    /// Checksummed data files written so far, by name.
    pub fn files(&self) -> Vec<FileEntry> {
        self.files.values().cloned().collect()
    }

    /// Writes the CSV schema and the manifest. The manifest lists every other
    /// file; its own wall-time field makes it the only run-dependent output.
    pub fn finish(mut self, manifest: ManifestInfo) -> std::io::Result<RunManifest> {
        let schema = json!({ "tables": self.schema });
        self.write_json(CSV_SCHEMA, &schema)?;
        let m = RunManifest {
            schema_version: SCHEMA_VERSION.into(),
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: manifest.command,
            config: manifest.config,
            wall_time_seconds: manifest.wall_time_seconds,
            checks: manifest.checks,
            files: self.files(),
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(self.dir.join(MANIFEST), text)?;
        Ok(m)
    }
}

/// Run-level fields recorded next to the file inventory.
#[derive(Debug, Clone)]
pub struct ManifestInfo {
    pub command: String,
    pub config: String,
    pub wall_time_seconds: f64,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The validated configuration as TOML.
    pub config: String,
    pub wall_time_seconds: f64,
    pub checks: Vec<Check>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    /// `(path, sha256)` of every listed file.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.files.iter().map(|f| (f.path.clone(), f.sha256.clone())).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
