//! Deterministic artifact writers: CSV tables, JSON documents, and a manifest
//! of SHA-256 checksums.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of any serializable value via its canonical JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Collects everything a run writes below one directory.
pub struct ArtifactWriter {
    root: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.entries.retain(|e| e.path != rel);
        self.entries.push(ArtifactEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<PathBuf> {
        self.write_bytes(rel, csv_string(header, rows).as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_bytes(rel, s.as_bytes())
    }

    /// Writes `manifest.json` listing every artifact in write order.
    pub fn finish(mut self, fingerprint: &str, command: &str) -> Result<Vec<ArtifactEntry>> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            config_fingerprint: &'a str,
            artifacts: &'a [ArtifactEntry],
        }
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            command,
            config_fingerprint: fingerprint,
            artifacts: &self.entries,
        };
        let mut s = serde_json::to_string_pretty(&m)?;
        s.push('\n');
        fs::write(self.root.join("manifest.json"), s)?;
        Ok(self.entries)
    }
}

pub fn csv_string(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|&v| fmt17(v)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Two-column whitespace-separated data for plotting tools.
pub fn two_column(xs: &[f64], ys: &[f64]) -> String {
    let mut s = String::new();
    for (x, y) in xs.iter().zip(ys) {
        s.push_str(&format!("{} {}\n", fmt17(*x), fmt17(*y)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, std::f64::consts::PI] {
            let s = fmt17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn sha256_of_known_string() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new(dir.path()).unwrap();
        w.write_csv("a.csv", &["t", "u1"], &[vec![0.0, 1.0], vec![0.5, 2.0]]).unwrap();
        w.write_json("s.json", &serde_json::json!({"k": 1})).unwrap();
        let entries = w.finish("abc", "test").unwrap();
        assert_eq!(entries.len(), 2);
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let csv = fs::read(dir.path().join("a.csv")).unwrap();
        assert!(text.contains(&sha256_hex(&csv)));
    }
}
