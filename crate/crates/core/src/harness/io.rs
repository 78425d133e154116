//! File plumbing: JSON and PGM artifacts, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::world::render::SIDE;
use crate::world::Image;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    write_bytes(path, text.as_bytes())
}

/// Reads an artifact written by an earlier stage.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{SIDE} {SIDE}\n255\n").into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image, HarnessError> {
    let bad = |why: &str| HarnessError::Invalid(format!("malformed PGM: {why}"));
    // header: magic, width, height, maxval, then one whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let dims: Vec<usize> = fields[1..3].iter().map(|f| f.parse().map_err(|_| bad("size"))).collect::<Result<_, _>>()?;
    if dims != [SIDE, SIDE] {
        return Err(bad("unexpected size"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != SIDE * SIDE {
        return Err(bad("pixel count"));
    }
    Ok(Image::from_bytes(data))
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<(), HarnessError> {
    write_bytes(path, &encode_pgm(image))
}

pub fn read_pgm(path: &Path) -> Result<Image, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact(path.to_path_buf()));
    }
    decode_pgm(&fs::read(path).map_err(io_err(path))?)
}

/// Artifacts emitted by one command, relative to the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<PathBuf>,
    /// Scalars worth surfacing (selected penalties, calibrated noise, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

/// Collects the files a command writes and then its manifest.
pub struct Recorder {
    root: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(root: &Path, command: &str, config_hash: String) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("neurodecode".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("format".to_string(), "1".to_string());
        Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash,
                versions,
                files: Vec::new(),
                notes: BTreeMap::new(),
            },
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, rel: &str) {
        self.manifest.files.push(PathBuf::from(rel));
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), HarnessError> {
        write_json(&self.path(rel), value)?;
        self.record(rel);
        Ok(())
    }

    pub fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        write_bytes(&self.path(rel), bytes)?;
        self.record(rel);
        Ok(())
    }

    pub fn pgm(&mut self, rel: &str, image: &Image) -> Result<(), HarnessError> {
        self.bytes(rel, &encode_pgm(image))
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.manifest
            .notes
            .insert(key.to_string(), serde_json::to_value(value).expect("note serializes"));
    }

    /// Writes `manifest_<command>.json` listing every recorded file.
    pub fn finish(mut self) -> Result<RunManifest, HarnessError> {
        let rel = format!("manifest_{}.json", self.manifest.command);
        self.record(&rel);
        write_json(&self.path(&rel), &self.manifest)?;
        Ok(self.manifest)
    }
}
