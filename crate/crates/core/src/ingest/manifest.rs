//! Capture manifests: which pcap file belongs to which category.
//!
//! ```toml
//! labels = ["chat", "email"]   # optional; defines label indices
//!
//! [[capture]]
//! path = "chat_01.pcap"        # relative to the input directory
//! label = "chat"
//! ```
//!
//! Without `labels`, the distinct entry labels are used in sorted order.
//!
//! A directory without a manifest is read by [`DatasetManifest::discover`]:
//! every subdirectory is a category holding its captures.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::IngestError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub label_names: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    labels: Option<Vec<String>>,
    #[serde(default)]
    capture: Vec<EntryFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    path: PathBuf,
    label: String,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, label_names: Option<Vec<String>>) -> Result<Self, IngestError> {
        let label_names = label_names.unwrap_or_else(|| {
            let mut names: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
            names.sort();
            names.dedup();
            names
        });
        let m = Self {
            entries,
            label_names,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let file: ManifestFile =
            toml::from_str(text).map_err(|e| IngestError::Manifest(e.to_string()))?;
        Self::new(
            file.capture
                .into_iter()
                .map(|e| ManifestEntry {
                    path: e.path,
                    label: e.label,
                })
                .collect(),
            file.labels,
        )
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Uses `dir/manifest.toml` when present; otherwise treats each
    /// subdirectory of `dir` as a category and its `.pcap` files as captures.
    pub fn discover(dir: &Path) -> Result<Self, IngestError> {
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.is_file() {
            return Self::load(&manifest);
        }
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| IngestError::Io { path, source }
        };
        let mut entries = Vec::new();
        for sub in sorted_entries(dir).map_err(io(dir))? {
            if !sub.is_dir() {
                continue;
            }
            let label = sub.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for file in sorted_entries(&sub).map_err(io(&sub))? {
                let is_capture = file
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("pcap") || e.eq_ignore_ascii_case("cap"));
                if file.is_file() && is_capture {
                    entries.push(ManifestEntry {
                        path: file.strip_prefix(dir).unwrap_or(&file).to_path_buf(),
                        label: label.clone(),
                    });
                }
            }
        }
        if entries.is_empty() {
            return Err(IngestError::Manifest(format!(
                "no captures found under {}",
                dir.display()
            )));
        }
        Self::new(entries, None)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::from("labels = [");
        for (i, name) in self.label_names.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&toml_string(name));
        }
        out.push_str("]\n");
        for e in &self.entries {
            out.push_str("\n[[capture]]\n");
            out.push_str(&format!("path = {}\n", toml_string(&e.path.to_string_lossy())));
            out.push_str(&format!("label = {}\n", toml_string(&e.label)));
        }
        out
    }

    pub fn label_index(&self, name: &str) -> Option<u16> {
        self.label_names.iter().position(|n| n == name).map(|i| i as u16)
    }

    fn validate(&self) -> Result<(), IngestError> {
        let bad = |msg: String| Err(IngestError::Manifest(msg));
        if self.label_names.len() < 2 {
            return bad(format!(
                "need at least 2 categories, found {}",
                self.label_names.len()
            ));
        }
        if self.label_names.len() > u16::MAX as usize {
            return bad("too many categories".into());
        }
        for (i, name) in self.label_names.iter().enumerate() {
            if name.is_empty() || name.contains(['\t', '\n', '\r']) {
                return bad(format!("invalid label name {name:?}"));
            }
            if self.label_names[..i].contains(name) {
                return bad(format!("duplicate label {name:?}"));
            }
        }
        for e in &self.entries {
            if !self.label_names.contains(&e.label) {
                return bad(format!(
                    "capture {} has undeclared label {:?}",
                    e.path.display(),
                    e.label
                ));
            }
        }
        Ok(())
    }
}

/// File name looked up by [`DatasetManifest::discover`].
pub const MANIFEST_FILE: &str = "manifest.toml";

fn sorted_entries(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

fn toml_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if c.is_control() => out.push_str(&format!("\\u{:04X}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
