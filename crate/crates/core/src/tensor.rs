//! Per-class SHAP tensors: one `(i, w_i, φ_i, μ_i)` row per token.
//!
//! On disk a tensor is JSON Lines. The first line is the provenance header;
//! every following line is one row with fields
//! `snippet_id, i, w, phi, mu, class`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::ShapVector;
use crate::lexing::{tag_of, AlignedToken, AstTag, ClassLabel, SourceSnippet};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("snippet `{id}`: {tokens} tokens but {phis} SHAP values")]
    LengthMismatch { id: String, tokens: usize, phis: usize },
    #[error("snippet `{0}` has no ground-truth label")]
    MissingLabel(String),
    #[error("snippet `{0}` has no model prediction to split by")]
    MissingPrediction(String),
    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),
    #[error("cannot merge two tensors of class `{0}`")]
    SameClass(ClassLabel),
    #[error("tensor line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapTensorRow {
    pub snippet_id: String,
    #[serde(rename = "i")]
    pub position: usize,
    #[serde(rename = "w")]
    pub lexeme: String,
    pub phi: f64,
    #[serde(rename = "mu")]
    pub tag: AstTag,
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub predictor: String,
    pub seed: u64,
    pub method: String,
    pub mask_token: String,
    pub corpus_hash: String,
}

impl Provenance {
    fn validate(&self) -> Result<(), TensorError> {
        let empty = [
            ("predictor", self.predictor.is_empty()),
            ("method", self.method.is_empty()),
            ("mask_token", self.mask_token.is_empty()),
            ("corpus_hash", self.corpus_hash.is_empty()),
        ];
        match empty.iter().find(|(_, e)| *e) {
            Some((field, _)) => Err(TensorError::ProvenanceMismatch(format!("provenance field `{field}` is empty"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    class: ClassLabel,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTensor {
    pub class_label: ClassLabel,
    pub rows: Vec<ShapTensorRow>,
    pub provenance: Provenance,
}

/// How snippets are routed to class tensors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    /// Ground-truth dataset label.
    #[default]
    Label,
    /// The model's own predicted class on the unmasked input.
    Prediction,
}

impl std::str::FromStr for SplitBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label" => Ok(SplitBy::Label),
            "prediction" => Ok(SplitBy::Prediction),
            other => Err(format!("unknown split `{other}` (expected label or prediction)")),
        }
    }
}

/// One attributed snippet ready for tensor construction.
#[derive(Debug, Clone, Copy)]
pub struct Attributed<'a> {
    pub snippet: &'a SourceSnippet,
    pub tokens: &'a [AlignedToken],
    pub shap: &'a ShapVector,
    pub predicted: Option<ClassLabel>,
}

/// Routes one row per (snippet, token) into the secure and insecure tensors,
/// returned in that order.
pub fn build_tensor(
    items: &[Attributed<'_>],
    provenance: &Provenance,
    split_by: SplitBy,
) -> Result<(ClassTensor, ClassTensor), TensorError> {
    provenance.validate()?;
    let mut secure = ClassTensor { class_label: ClassLabel::Secure, rows: Vec::new(), provenance: provenance.clone() };
    let mut insecure = ClassTensor { class_label: ClassLabel::Insecure, ..secure.clone() };
    for item in items {
        let id = &item.snippet.id;
        if item.tokens.len() != item.shap.phis.len() {
            return Err(TensorError::LengthMismatch {
                id: id.clone(),
                tokens: item.tokens.len(),
                phis: item.shap.phis.len(),
            });
        }
        let class = match split_by {
            SplitBy::Label => item.snippet.label.ok_or_else(|| TensorError::MissingLabel(id.clone()))?,
            SplitBy::Prediction => item.predicted.ok_or_else(|| TensorError::MissingPrediction(id.clone()))?,
        };
        let target = match class {
            ClassLabel::Secure => &mut secure,
            ClassLabel::Insecure => &mut insecure,
        };
        target.rows.extend(item.tokens.iter().zip(&item.shap.phis).map(|(tok, &phi)| ShapTensorRow {
            snippet_id: id.clone(),
            position: tok.position,
            lexeme: tok.lexeme.clone(),
            phi,
            tag: tag_of(tok),
            class_label: class,
        }));
    }
    Ok((secure, insecure))
}

/// Rows of both class tensors, labels retained.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedRows {
    pub rows: Vec<ShapTensorRow>,
    pub provenance: Provenance,
}

impl MergedRows {
    pub fn group_by_tag(&self) -> BTreeMap<AstTag, Vec<&ShapTensorRow>> {
        let mut groups: BTreeMap<AstTag, Vec<&ShapTensorRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(row.tag).or_default().push(row);
        }
        groups
    }
}

pub fn merge_tensors(a: &ClassTensor, b: &ClassTensor) -> Result<MergedRows, TensorError> {
    if a.class_label == b.class_label {
        return Err(TensorError::SameClass(a.class_label));
    }
    if a.provenance.predictor != b.provenance.predictor {
        return Err(TensorError::ProvenanceMismatch(format!(
            "predictor `{}` vs `{}`",
            a.provenance.predictor, b.provenance.predictor
        )));
    }
    if a.provenance.mask_token != b.provenance.mask_token {
        return Err(TensorError::ProvenanceMismatch(format!(
            "mask token `{}` vs `{}`",
            a.provenance.mask_token, b.provenance.mask_token
        )));
    }
    // Insecure rows first so the merged order does not depend on argument order.
    let (first, second) = if a.class_label == ClassLabel::Insecure { (a, b) } else { (b, a) };
    let rows = first.rows.iter().chain(&second.rows).cloned().collect();
    Ok(MergedRows { rows, provenance: first.provenance.clone() })
}

pub fn write_tensor<W: Write>(tensor: &ClassTensor, mut out: W) -> Result<(), TensorError> {
    let header = TensorHeader { class: tensor.class_label, provenance: tensor.provenance.clone() };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for row in &tensor.rows {
        serde_json::to_writer(&mut out, row).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor<R: BufRead>(input: R) -> Result<ClassTensor, TensorError> {
    let mut lines = input.lines().enumerate();
    let parse_err = |line: usize, message: String| TensorError::Parse { line: line + 1, message };
    let (_, first) = lines.next().ok_or_else(|| parse_err(0, "missing provenance header".into()))?;
    let header: TensorHeader = serde_json::from_str(&first?).map_err(|e| parse_err(0, e.to_string()))?;
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ShapTensorRow = serde_json::from_str(&line).map_err(|e| parse_err(idx, e.to_string()))?;
        if row.class_label != header.class {
            return Err(parse_err(idx, format!("row class `{}` in a `{}` tensor", row.class_label, header.class)));
        }
        rows.push(row);
    }
    Ok(ClassTensor { class_label: header.class, rows, provenance: header.provenance })
}

pub fn save_tensor(tensor: &ClassTensor, path: &Path) -> Result<(), TensorError> {
    write_tensor(tensor, BufWriter::new(File::create(path)?))
}

pub fn load_tensor(path: &Path) -> Result<ClassTensor, TensorError> {
    read_tensor(BufReader::new(File::open(path)?))
}
