//! Corpus directories.
//!
//! ```text
//! <dir>/manifest.json        optional; written by the synthetic generator
//! <dir>/insecure/<id>.<ext>  labelled insecure
//! <dir>/secure/<id>.<ext>    labelled secure
//! <dir>/unlabeled/<id>.<ext> no label (apply only)
//! ```
//!
//! The snippet id is the file stem; the language follows the extension.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::{PlantRecord, PlantSpec, SyntheticCorpus};
use super::HarnessError;
use crate::lexing::{ClassLabel, Language, SourceSnippet};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub language: Language,
    pub seed: u64,
    pub n_per_class: usize,
    pub plants: Vec<PlantSpec>,
    pub planted: Vec<PlantRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub snippets: Vec<SourceSnippet>,
    pub manifest: Option<CorpusManifest>,
}

impl Corpus {
    pub fn labelled(&self, class: ClassLabel) -> impl Iterator<Item = &SourceSnippet> {
        self.snippets.iter().filter(move |s| s.label == Some(class))
    }
}

fn class_dir(label: Option<ClassLabel>) -> &'static str {
    label.map_or("unlabeled", ClassLabel::as_str)
}

pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<(), HarnessError> {
    for sub in ["insecure", "secure"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for snippet in &corpus.snippets {
        let path = dir
            .join(class_dir(snippet.label))
            .join(format!("{}.{}", snippet.id, snippet.language.extension()));
        fs::write(path, &snippet.text)?;
    }
    let manifest = CorpusManifest {
        language: corpus.language,
        seed: corpus.seed,
        n_per_class: corpus.n_per_class,
        plants: corpus.plants.clone(),
        planted: corpus.planted.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads a corpus directory, keeping at most `class_cap` snippets per class
/// (lowest ids first). Snippets come back sorted by id.
pub fn load_corpus(dir: &Path, class_cap: usize) -> Result<Corpus, HarnessError> {
    if !dir.is_dir() {
        return Err(HarnessError::Corpus(format!("corpus directory {} not found", dir.display())));
    }
    let mut snippets = Vec::new();
    for label in [Some(ClassLabel::Insecure), Some(ClassLabel::Secure), None] {
        let sub = dir.join(class_dir(label));
        if !sub.is_dir() {
            continue;
        }
        let mut found = Vec::new();
        for entry in fs::read_dir(&sub)? {
            let path = entry?.path();
            let Some(language) = path.extension().and_then(|e| e.to_str()).and_then(|e| e.parse::<Language>().ok())
            else {
                continue;
            };
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| HarnessError::Corpus(format!("bad file name {}", path.display())))?
                .to_string();
            let text = fs::read_to_string(&path)?;
            if text.is_empty() {
                return Err(HarnessError::Corpus(format!("snippet {id} is empty")));
            }
            found.push(SourceSnippet { id, language, text, label });
        }
        found.sort_by(|a, b| a.id.cmp(&b.id));
        if label.is_some() {
            found.truncate(class_cap);
        }
        snippets.extend(found);
    }
    snippets.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(pair) = snippets.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(HarnessError::Corpus(format!("duplicate snippet id `{}`", pair[0].id)));
    }
    if snippets.is_empty() {
        return Err(HarnessError::Corpus(format!("no snippets under {}", dir.display())));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        Some(serde_json::from_str(&fs::read_to_string(manifest_path)?)?)
    } else {
        None
    };
    Ok(Corpus { snippets, manifest })
}

/// SHA-256 over `(id, label, text)` of every snippet, in the given order.
pub fn corpus_hash(snippets: &[SourceSnippet]) -> String {
    let mut h = Sha256::new();
    for s in snippets {
        h.update(s.id.as_bytes());
        h.update([0]);
        h.update(s.label.map_or("", ClassLabel::as_str).as_bytes());
        h.update([0]);
        h.update(s.text.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}
