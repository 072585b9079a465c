//! Offspring laws on disk.
//!
//! A law file is JSON:
//!
//! ```json
//! { "name": "my-law", "atoms": [ { "prob": 0.25, "children": [-1.0, 1.0] } ] }
//! ```
//!
//! A law source is either a builtin name (`ssrw-coupled`, `two-atom`,
//! `bernoulli-pm:H`) or a path to such a file.

use std::fs;
use std::path::{Path, PathBuf};

use brwlab_core::{Atom, LawError, OffspringLaw};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LawFileError {
    #[error("law file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed law file {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid law: {0}")]
    Law(#[from] LawError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub prob: f64,
    pub children: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub atoms: Vec<AtomRecord>,
}

impl LawRecord {
    pub fn from_law(law: &OffspringLaw) -> Self {
        LawRecord {
            name: law.name().map(str::to_string),
            atoms: law
                .atoms()
                .iter()
                .map(|a| AtomRecord { prob: a.prob, children: a.children.clone() })
                .collect(),
        }
    }

    pub fn into_law(self) -> Result<OffspringLaw, LawError> {
        let atoms = self.atoms.into_iter().map(|a| Atom::new(a.prob, a.children)).collect();
        OffspringLaw::new(self.name, atoms)
    }
}

fn looks_builtin(source: &str) -> bool {
    matches!(source, "ssrw-coupled" | "two-atom") || source.starts_with("bernoulli-pm:")
}

/// Resolve a builtin name or read a law file.
pub fn load_law(source: &str) -> Result<OffspringLaw, LawFileError> {
    if looks_builtin(source) && !Path::new(source).exists() {
        return Ok(OffspringLaw::builtin(source)?);
    }
    read_law_file(Path::new(source))
}

pub fn read_law_file(path: &Path) -> Result<OffspringLaw, LawFileError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            LawFileError::NotFound(path.to_path_buf())
        } else {
            LawFileError::Io { path: path.to_path_buf(), source: e }
        }
    })?;
    parse_law(&text).map_err(|e| match e {
        LawFileError::Parse { message, .. } => LawFileError::Parse { path: path.to_path_buf(), message },
        other => other,
    })
}

pub fn parse_law(text: &str) -> Result<OffspringLaw, LawFileError> {
    let record: LawRecord = serde_json::from_str(text)
        .map_err(|e| LawFileError::Parse { path: PathBuf::from("<input>"), message: e.to_string() })?;
    Ok(record.into_law()?)
}

pub fn law_to_json(law: &OffspringLaw) -> String {
    serde_json::to_string_pretty(&LawRecord::from_law(law)).expect("law records always serialize")
}

pub fn write_law_file(path: &Path, law: &OffspringLaw) -> Result<(), LawFileError> {
    fs::write(path, law_to_json(law) + "\n").map_err(|e| LawFileError::Io { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve_by_name() {
        let law = load_law("ssrw-coupled").unwrap();
        assert_eq!(law.atoms().len(), 4);
        assert!(load_law("bernoulli-pm:0.4").is_ok());
        assert!(matches!(load_law("bernoulli-pm:2"), Err(LawFileError::Law(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_law("definitely/missing.json").unwrap_err();
        assert!(matches!(err, LawFileError::NotFound(_)));
        assert!(err.to_string().contains("missing.json"));
    }

    #[test]
    fn bad_atom_is_named() {
        let text = r#"{"atoms":[{"prob":0.5,"children":[1.0]},{"prob":0.7,"children":[]}]}"#;
        let err = parse_law(text).unwrap_err();
        assert!(matches!(err, LawFileError::Law(_)), "{err}");
        let text = r#"{"atoms":[{"prob":1.0,"children":[1.0]},{"prob":-0.0,"children":[]},{"prob":2.0,"children":[]}]}"#;
        let msg = parse_law(text).unwrap_err().to_string();
        assert!(msg.contains('2'), "{msg}");
    }
}
