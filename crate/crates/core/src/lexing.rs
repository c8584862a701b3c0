//! Grammar-leaf tokenization and AST-type tagging.
//!
//! Source text is parsed with a tree-sitter grammar; the leaves of the
//! concrete-syntax tree become tokens in source order. Each leaf's node kind
//! is then mapped to a coarse [`AstTag`] through a per-language taxonomy file
//! (`node_kind<TAB>ast_tag`, one entry per line).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tree_sitter::{Node, Parser};

/// Default token cap applied when reading snippets.
pub const DEFAULT_MAX_TOKENS: usize = 500;

const C_TAXONOMY: &str = include_str!("../taxonomy/c.tsv");
const JAVA_TAXONOMY: &str = include_str!("../taxonomy/java.tsv");

#[derive(Debug, Error)]
pub enum LexError {
    #[error("snippet `{0}` produced no tokens")]
    UnlexableInput(String),
    #[error("token/node-kind length mismatch: {tokens} tokens, {kinds} kinds")]
    LengthMismatch { tokens: usize, kinds: usize },
    #[error("maxTokens must be >= 1")]
    InvalidMaxTokens,
    #[error("grammar setup failed: {0}")]
    Grammar(String),
    #[error("taxonomy line {line}: {message}")]
    Taxonomy { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    C,
    Java,
}

impl Language {
    pub fn extension(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Java => "java",
        }
    }

    fn grammar(self) -> tree_sitter::Language {
        match self {
            Language::C => tree_sitter_c::LANGUAGE.into(),
            Language::Java => tree_sitter_java::LANGUAGE.into(),
        }
    }

    /// Node kinds kept whole even though the grammar gives them children.
    fn atomic_kinds(self) -> &'static [&'static str] {
        match self {
            Language::C => &["string_literal", "char_literal", "system_lib_string"],
            Language::Java => &["string_literal", "character_literal"],
        }
    }

    /// Every visible node kind the shipped grammar can produce.
    pub fn grammar_node_kinds(self) -> Vec<String> {
        let grammar = self.grammar();
        let mut kinds: Vec<String> = (0..grammar.node_kind_count() as u16)
            .filter(|&id| grammar.node_kind_is_visible(id))
            .filter_map(|id| grammar.node_kind_for_id(id))
            .map(str::to_string)
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "c" => Ok(Language::C),
            "java" => Ok(Language::Java),
            other => Err(format!("unknown language `{other}` (expected c or java)")),
        }
    }
}

/// Binary class label. `Insecure` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Secure,
    Insecure,
}

impl ClassLabel {
    pub fn from_positive(positive: bool) -> Self {
        if positive {
            ClassLabel::Insecure
        } else {
            ClassLabel::Secure
        }
    }

    pub fn is_positive(self) -> bool {
        self == ClassLabel::Insecure
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Secure => "secure",
            ClassLabel::Insecure => "insecure",
        }
    }

    pub fn other(self) -> Self {
        match self {
            ClassLabel::Secure => ClassLabel::Insecure,
            ClassLabel::Insecure => ClassLabel::Secure,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "secure" => Ok(ClassLabel::Secure),
            "insecure" => Ok(ClassLabel::Insecure),
            other => Err(format!("unknown class `{other}` (expected secure or insecure)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSnippet {
    pub id: String,
    pub language: Language,
    pub text: String,
    pub label: Option<ClassLabel>,
}

/// Coarse AST type attached to a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AstTag {
    Punctuation,
    Operator,
    Literal,
    Type,
    Primitive,
    Identifier,
    Keyword,
    Comment,
    Other,
}

impl AstTag {
    pub const ALL: [AstTag; 9] = [
        AstTag::Punctuation,
        AstTag::Operator,
        AstTag::Literal,
        AstTag::Type,
        AstTag::Primitive,
        AstTag::Identifier,
        AstTag::Keyword,
        AstTag::Comment,
        AstTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AstTag::Punctuation => "punctuation",
            AstTag::Operator => "operator",
            AstTag::Literal => "literal",
            AstTag::Type => "type",
            AstTag::Primitive => "primitive",
            AstTag::Identifier => "identifier",
            AstTag::Keyword => "keyword",
            AstTag::Comment => "comment",
            AstTag::Other => "other",
        }
    }
}

impl fmt::Display for AstTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AstTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AstTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown AST tag `{s}`"))
    }
}

/// A token `w_i` at position `i`, optionally tagged with its AST type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedToken {
    pub position: usize,
    pub lexeme: String,
    pub tag: Option<AstTag>,
    pub byte_span: (usize, usize),
}

/// Output of [`tokenize`]: untagged tokens plus the grammar node kind of each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leaves {
    pub tokens: Vec<AlignedToken>,
    pub node_kinds: Vec<String>,
}

/// Node-kind to AST-tag map for one grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    map: HashMap<String, AstTag>,
}

impl Taxonomy {
    pub fn builtin(language: Language) -> Self {
        let text = match language {
            Language::C => C_TAXONOMY,
            Language::Java => JAVA_TAXONOMY,
        };
        Self::parse(text).expect("shipped taxonomy is valid")
    }

    pub fn load(path: &Path) -> Result<Self, LexError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, LexError> {
        let mut map = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| LexError::Taxonomy { line: idx + 1, message };
            let (kind, tag) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `node_kind<TAB>ast_tag`".into()))?;
            if kind.is_empty() {
                return Err(err("empty node kind".into()));
            }
            let tag: AstTag = tag.trim_end_matches('\r').parse().map_err(err)?;
            if map.insert(kind.to_string(), tag).is_some() {
                return Err(err(format!("duplicate node kind `{kind}`")));
            }
        }
        Ok(Self { map })
    }

    pub fn lookup(&self, kind: &str) -> AstTag {
        self.map.get(kind).copied().unwrap_or(AstTag::Other)
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.map.contains_key(kind)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Leaf tokens of the snippet's concrete-syntax tree in source order,
/// truncated to `max_tokens`. Whitespace-only and zero-width leaves are
/// dropped; comments are kept.
pub fn tokenize(snippet: &SourceSnippet, max_tokens: usize) -> Result<Leaves, LexError> {
    if max_tokens == 0 {
        return Err(LexError::InvalidMaxTokens);
    }
    let mut parser = Parser::new();
    parser
        .set_language(&snippet.language.grammar())
        .map_err(|e| LexError::Grammar(e.to_string()))?;
    let tree = parser
        .parse(&snippet.text, None)
        .ok_or_else(|| LexError::UnlexableInput(snippet.id.clone()))?;

    let mut leaves = Leaves { tokens: Vec::new(), node_kinds: Vec::new() };
    let atomic = snippet.language.atomic_kinds();
    collect_leaves(tree.root_node(), &snippet.text, atomic, max_tokens, &mut leaves);
    if leaves.tokens.is_empty() {
        return Err(LexError::UnlexableInput(snippet.id.clone()));
    }
    Ok(leaves)
}

fn collect_leaves(node: Node<'_>, text: &str, atomic: &[&str], cap: usize, out: &mut Leaves) {
    if out.tokens.len() >= cap {
        return;
    }
    if node.child_count() == 0 || atomic.contains(&node.kind()) {
        let span = node.byte_range();
        let lexeme = &text[span.clone()];
        if lexeme.trim().is_empty() {
            return;
        }
        out.tokens.push(AlignedToken {
            position: out.tokens.len(),
            lexeme: lexeme.to_string(),
            tag: None,
            byte_span: (span.start, span.end),
        });
        out.node_kinds.push(node.kind().to_string());
        return;
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        collect_leaves(child, text, atomic, cap, out);
    }
}

/// The alignment function: tags every token with the AST type of its node kind.
pub fn align(
    tokens: Vec<AlignedToken>,
    node_kinds: &[String],
    taxonomy: &Taxonomy,
) -> Result<Vec<AlignedToken>, LexError> {
    if tokens.len() != node_kinds.len() {
        return Err(LexError::LengthMismatch { tokens: tokens.len(), kinds: node_kinds.len() });
    }
    Ok(tokens
        .into_iter()
        .zip(node_kinds)
        .map(|(mut token, kind)| {
            token.tag = Some(taxonomy.lookup(kind));
            token
        })
        .collect())
}

/// Tokenize and align in one step.
pub fn tag_snippet(
    snippet: &SourceSnippet,
    max_tokens: usize,
    taxonomy: &Taxonomy,
) -> Result<Vec<AlignedToken>, LexError> {
    let Leaves { tokens, node_kinds } = tokenize(snippet, max_tokens)?;
    align(tokens, &node_kinds, taxonomy)
}

/// Tag of an aligned token; untagged tokens report `other`.
pub fn tag_of(token: &AlignedToken) -> AstTag {
    token.tag.unwrap_or(AstTag::Other)
}
