//! Seeded synthetic corpus with planted (AST tag, position range, class)
//! patterns.
//!
//! Every snippet is assembled from statement templates whose lexemes are
//! exactly the grammar leaves the tokenizer will produce, so planted token
//! positions are known at generation time. Class-correlated marker calls
//! (e.g. `strcpy` vs `strncpy`) make the built-in toy predictor informative
//! without being perfect.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::lexing::{AstTag, ClassLabel, Language, SourceSnippet};
use crate::probing::PositionRange;

/// Weight of a class marker in the default toy predictor.
pub const MARKER_WEIGHT: f64 = 1.2;
/// Weight of a planted lexeme, signed toward the plant's target class.
pub const PLANT_WEIGHT: f64 = 1.5;

/// Probability that a marker call comes from the snippet's own class.
const OWN_MARKER_RATE: f64 = 0.7;
/// Probability that a declaration carries a literal initializer.
const INIT_DECL_RATE: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub tag: AstTag,
    pub range: PositionRange,
    pub target_class: ClassLabel,
    pub plant_rate: f64,
}

impl PlantSpec {
    fn validate(&self, language: Language) -> Result<(), HarnessError> {
        if !(self.plant_rate > 0.0 && self.plant_rate <= 1.0) {
            return Err(HarnessError::InvalidPlantSpec(format!("plant rate {} outside (0, 1]", self.plant_rate)));
        }
        if self.range.lo > self.range.hi {
            return Err(HarnessError::InvalidPlantSpec(format!("range {} has lo > hi", self.range)));
        }
        if plant_template(language, self.tag).is_none() {
            return Err(HarnessError::InvalidPlantSpec(format!("tag `{}` cannot be planted", self.tag)));
        }
        Ok(())
    }
}

impl std::str::FromStr for PlantSpec {
    type Err = HarnessError;

    /// `tag:lo-hi:class:rate`, e.g. `literal:0-49:insecure:0.9`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| HarnessError::InvalidPlantSpec(format!("`{s}`: {m}"));
        let parts: Vec<&str> = s.split(':').collect();
        let [tag, range, class, rate] = parts[..] else {
            return Err(bad("expected tag:lo-hi:class:rate".into()));
        };
        Ok(PlantSpec {
            tag: tag.parse().map_err(bad)?,
            range: range.parse().map_err(|e: crate::probing::ProbeError| bad(e.to_string()))?,
            target_class: class.parse().map_err(bad)?,
            plant_rate: rate.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        })
    }
}

/// A planted token as placed by the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub snippet_id: String,
    pub plant_index: usize,
    pub position: usize,
    pub lexeme: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub language: Language,
    pub seed: u64,
    pub n_per_class: usize,
    pub plants: Vec<PlantSpec>,
    pub snippets: Vec<SourceSnippet>,
    pub planted: Vec<PlantRecord>,
}

/// Lexemes of one statement plus, for planted statements, the offset of the
/// planted token.
#[derive(Debug, Clone)]
struct Statement {
    tokens: Vec<String>,
    plant: Option<(usize, usize)>,
}

impl Statement {
    fn of(words: &str, var: &str) -> Self {
        if words.starts_with("/*") {
            return Self { tokens: vec![words.to_string()], plant: None };
        }
        let tokens = words.split(' ').map(|w| if w == "{v}" { var.to_string() } else { w.to_string() }).collect();
        Self { tokens, plant: None }
    }
}

struct Vocabulary {
    header: &'static str,
    footer: &'static str,
    names: &'static [&'static str],
    decls: &'static [&'static str],
    init_decl: &'static str,
    body: &'static [&'static str],
    insecure_markers: &'static [(&'static str, &'static str)],
    secure_markers: &'static [(&'static str, &'static str)],
}

const C_VOCAB: Vocabulary = Vocabulary {
    header: "static int handle_request ( char * buf , size_t len ) {",
    footer: "return 0 ; }",
    names: &["idx", "count", "cursor", "node", "total", "name", "ptr", "state", "offset", "entry"],
    decls: &[
        "int {v} ;",
        "char * {v} ;",
        "size_t {v} ;",
        "struct entry * {v} ;",
        "unsigned long {v} ;",
        "const char * {v} ;",
        "ctx_t * {v} ;",
    ],
    init_decl: "int {v} = 0 ;",
    body: &[
        "{v} = len * 2 ;",
        "if ( {v} < len ) { {v} ++ ; }",
        "{v} = buf + {v} ;",
        "{v} = lookup ( buf , len ) ;",
        "flags |= 0x4 ;",
        "for ( {v} = 0 ; {v} < len ; {v} ++ ) { total += buf [ {v} ] ; }",
        "log_msg ( \"processing\" , {v} ) ;",
        "while ( total > 16 ) { total -= 16 ; }",
        "/* check bounds */",
        "{v} = NULL ;",
        "rc = validate ( {v} ) ;",
        "if ( ! {v} ) { return - 1 ; }",
    ],
    insecure_markers: &[
        ("strcpy", "strcpy ( {v} , buf ) ;"),
        ("gets", "gets ( buf ) ;"),
        ("sprintf", "sprintf ( buf , fmt , {v} ) ;"),
        ("system", "system ( cmd ) ;"),
    ],
    secure_markers: &[
        ("strncpy", "strncpy ( {v} , buf , len ) ;"),
        ("fgets", "fgets ( buf , len , stdin ) ;"),
        ("snprintf", "snprintf ( buf , len , fmt , {v} ) ;"),
        ("explicit_bzero", "explicit_bzero ( buf , len ) ;"),
    ],
};

const JAVA_VOCAB: Vocabulary = Vocabulary {
    header: "class Handler { public int handleRequest ( String input , int len ) {",
    footer: "return 0 ; } }",
    names: &["idx", "count", "cursor", "node", "total", "name", "ref", "state", "offset", "entry"],
    decls: &[
        "int {v} ;",
        "String {v} ;",
        "long {v} ;",
        "StringBuilder {v} ;",
        "List < String > {v} ;",
        "Object {v} ;",
        "Map < String , Integer > {v} ;",
    ],
    init_decl: "int {v} = 0 ;",
    body: &[
        "{v} = len * 2 ;",
        "if ( {v} < len ) { {v} ++ ; }",
        "sb . append ( {v} ) ;",
        "{v} = lookup ( input , len ) ;",
        "flags |= 0x4 ;",
        "for ( int i = 0 ; i < len ; i ++ ) { total += i ; }",
        "log ( \"processing\" , {v} ) ;",
        "while ( total > 16 ) { total -= 16 ; }",
        "/* check bounds */",
        "{v} = null ;",
        "rc = validate ( {v} ) ;",
        "if ( {v} == null ) { return - 1 ; }",
    ],
    insecure_markers: &[
        ("exec", "Runtime . getRuntime ( ) . exec ( input ) ;"),
        ("executeQuery", "stmt . executeQuery ( input ) ;"),
        ("md5Digest", "md5Digest ( input ) ;"),
        ("readObject", "in . readObject ( ) ;"),
    ],
    secure_markers: &[
        ("setString", "ps . setString ( 1 , input ) ;"),
        ("escapeHtml", "escapeHtml ( input ) ;"),
        ("sha256Digest", "sha256Digest ( input ) ;"),
        ("validateInput", "validateInput ( input ) ;"),
    ],
};

fn vocabulary(language: Language) -> &'static Vocabulary {
    match language {
        Language::C => &C_VOCAB,
        Language::Java => &JAVA_VOCAB,
    }
}

/// Statement template for planting `tag`, with the planted token's offset
/// and the interchangeable lexemes that may fill it.
fn plant_template(language: Language, tag: AstTag) -> Option<(&'static str, usize, &'static [&'static str])> {
    use AstTag::*;
    let c = language == Language::C;
    Some(match tag {
        Literal if c => ("char * secret = {p} ;", 4, &["\"P@ssw0rd\"", "\"hunter2\"", "\"admin123\""]),
        Literal => ("String secret = {p} ;", 3, &["\"P@ssw0rd\"", "\"hunter2\"", "\"admin123\""]),
        Operator => ("flags {p} mask ;", 1, &["^="]),
        Keyword if c => ("{p} cleanup ;", 0, &["goto"]),
        Keyword => ("{p} ready ;", 0, &["assert"]),
        Identifier if c => ("{p} ( buf ) ;", 0, &["unsafe_copy", "raw_copy"]),
        Identifier => ("{p} ( input ) ;", 0, &["unsafeCopy", "rawCopy"]),
        Type if c => ("{p} * raw ;", 0, &["legacy_buf_t"]),
        Type => ("{p} raw ;", 0, &["LegacyBuffer"]),
        Primitive => ("{p} ratio ;", 0, &["double"]),
        Punctuation => ("retry {p} ;", 1, &[":"]),
        Comment => ("{p}", 0, &["/* FIXME unchecked */"]),
        Other => return None,
    })
}

/// Every lexeme that a plant of `tag` may insert.
pub fn plant_lexemes(language: Language, tag: AstTag) -> &'static [&'static str] {
    plant_template(language, tag).map_or(&[], |(_, _, lexemes)| lexemes)
}

/// Class-marker weights for the built-in toy predictor.
pub fn default_markers(language: Language) -> BTreeMap<String, f64> {
    let vocab = vocabulary(language);
    let insecure = vocab.insecure_markers.iter().map(|(m, _)| (m.to_string(), MARKER_WEIGHT));
    let secure = vocab.secure_markers.iter().map(|(m, _)| (m.to_string(), -MARKER_WEIGHT));
    insecure.chain(secure).collect()
}

/// Default markers plus every planted lexeme, weighted toward its plant's
/// target class.
pub fn markers_with_plants(language: Language, plants: &[PlantSpec]) -> BTreeMap<String, f64> {
    let mut markers = default_markers(language);
    for plant in plants {
        let sign = if plant.target_class.is_positive() { 1.0 } else { -1.0 };
        for lexeme in plant_lexemes(language, plant.tag) {
            markers.insert(lexeme.to_string(), sign * PLANT_WEIGHT);
        }
    }
    markers
}

pub fn generate_synthetic_corpus(
    language: Language,
    n_per_class: usize,
    plants: &[PlantSpec],
    seed: u64,
) -> Result<SyntheticCorpus, HarnessError> {
    if n_per_class == 0 {
        return Err(HarnessError::Config("n_per_class must be >= 1".into()));
    }
    for plant in plants {
        plant.validate(language)?;
    }
    let vocab = vocabulary(language);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snippets = Vec::with_capacity(2 * n_per_class);
    let mut planted = Vec::new();
    for class in [ClassLabel::Insecure, ClassLabel::Secure] {
        for index in 0..n_per_class {
            let id = format!("{class}-{index:04}");
            let (text, records) = generate_snippet(vocab, language, class, plants, &mut rng);
            planted.extend(records.into_iter().map(|(plant_index, position, lexeme)| PlantRecord {
                snippet_id: id.clone(),
                plant_index,
                position,
                lexeme,
            }));
            snippets.push(SourceSnippet { id, language, text, label: Some(class) });
        }
    }
    Ok(SyntheticCorpus { language, seed, n_per_class, plants: plants.to_vec(), snippets, planted })
}

fn generate_snippet(
    vocab: &Vocabulary,
    language: Language,
    class: ClassLabel,
    plants: &[PlantSpec],
    rng: &mut ChaCha8Rng,
) -> (String, Vec<(usize, usize, String)>) {
    let name = |rng: &mut ChaCha8Rng| *vocab.names.choose(rng).unwrap();
    let mut statements = vec![Statement::of(vocab.header, "")];

    for _ in 0..rng.gen_range(10..=14) {
        let template =
            if rng.gen_bool(INIT_DECL_RATE) { vocab.init_decl } else { *vocab.decls.choose(rng).unwrap() };
        statements.push(Statement::of(template, name(rng)));
    }
    let body_start = statements.len();
    for _ in 0..rng.gen_range(12..=45) {
        statements.push(Statement::of(vocab.body.choose(rng).unwrap(), name(rng)));
    }
    for _ in 0..rng.gen_range(1..=3) {
        let own = rng.gen_bool(OWN_MARKER_RATE);
        let pool = match (class, own) {
            (ClassLabel::Insecure, true) | (ClassLabel::Secure, false) => vocab.insecure_markers,
            _ => vocab.secure_markers,
        };
        let (_, template) = pool.choose(rng).unwrap();
        let at = rng.gen_range(body_start..=statements.len());
        statements.insert(at, Statement::of(template, name(rng)));
    }

    for (plant_index, plant) in plants.iter().enumerate() {
        let rate = if plant.target_class == class { plant.plant_rate } else { plant.plant_rate / 4.0 };
        if !rng.gen_bool(rate) {
            continue;
        }
        let (template, offset, lexemes) = plant_template(language, plant.tag).expect("validated plant");
        let lexeme = *lexemes.choose(rng).unwrap();
        let mut stmt = Statement::of(template, "");
        stmt.tokens[offset] = lexeme.to_string();
        stmt.plant = Some((plant_index, offset));
        insert_plant(&mut statements, stmt, plant, plants, rng);
    }

    statements.push(Statement::of(vocab.footer, ""));
    let text = statements.iter().map(|s| s.tokens.join(" ")).collect::<Vec<_>>().join("\n") + "\n";

    let mut records = Vec::new();
    let mut position = 0;
    for s in &statements {
        if let Some((plant_index, offset)) = s.plant {
            records.push((plant_index, position + offset, s.tokens[offset].clone()));
        }
        position += s.tokens.len();
    }
    (text, records)
}

/// Inserts `stmt` at a statement boundary (after the header) that puts its
/// planted token inside `plant.range` and keeps earlier plants inside theirs.
/// Leaves `statements` untouched when no boundary qualifies.
fn insert_plant(
    statements: &mut Vec<Statement>,
    stmt: Statement,
    plant: &PlantSpec,
    plants: &[PlantSpec],
    rng: &mut ChaCha8Rng,
) {
    let offset = stmt.plant.expect("planted statement").1;
    let mut starts = Vec::with_capacity(statements.len() + 1);
    let mut pos = 0;
    for s in statements.iter() {
        starts.push(pos);
        pos += s.tokens.len();
    }
    starts.push(pos);
    let mut candidates: Vec<usize> = (1..=statements.len()).filter(|&i| plant.range.contains(starts[i] + offset)).collect();
    candidates.shuffle(rng);
    for at in candidates {
        let shift = stmt.tokens.len();
        let earlier_ok = statements.iter().enumerate().all(|(i, s)| match s.plant {
            Some((pi, off)) if i >= at => plants[pi].range.contains(starts[i] + shift + off),
            _ => true,
        });
        if earlier_ok {
            statements.insert(at, stmt);
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexing::{tag_of, tag_snippet, Taxonomy};

    fn literal_plant() -> PlantSpec {
        PlantSpec {
            tag: AstTag::Literal,
            range: PositionRange { lo: 0, hi: 49 },
            target_class: ClassLabel::Insecure,
            plant_rate: 0.9,
        }
    }

    #[test]
    fn one_per_class() {
        let corpus = generate_synthetic_corpus(Language::C, 1, &[literal_plant()], 3).unwrap();
        assert_eq!(corpus.snippets.len(), 2);
        assert_eq!(corpus.snippets[0].label, Some(ClassLabel::Insecure));
        assert_eq!(corpus.snippets[1].label, Some(ClassLabel::Secure));
    }

    #[test]
    fn seeded_determinism() {
        let a = generate_synthetic_corpus(Language::C, 20, &[literal_plant()], 11).unwrap();
        let b = generate_synthetic_corpus(Language::C, 20, &[literal_plant()], 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(Language::C, 20, &[literal_plant()], 12).unwrap();
        assert_ne!(a.snippets, c.snippets);
    }

    #[test]
    fn invalid_plants_rejected() {
        let zero = PlantSpec { plant_rate: 0.0, ..literal_plant() };
        assert!(matches!(
            generate_synthetic_corpus(Language::C, 2, &[zero], 0),
            Err(HarnessError::InvalidPlantSpec(_))
        ));
        let other = PlantSpec { tag: AstTag::Other, ..literal_plant() };
        assert!(generate_synthetic_corpus(Language::C, 2, &[other], 0).is_err());
        assert!(generate_synthetic_corpus(Language::C, 0, &[], 0).is_err());
    }

    #[test]
    fn plant_spec_parsing() {
        let spec: PlantSpec = "literal:0-49:insecure:0.9".parse().unwrap();
        assert_eq!(spec, literal_plant());
        assert!("literal:0-49:insecure".parse::<PlantSpec>().is_err());
        assert!("nope:0-49:insecure:0.9".parse::<PlantSpec>().is_err());
    }

    /// Generated lexemes must be exactly the grammar's leaves, and every
    /// planted token must land in range with the planted tag.
    fn check_alignment(language: Language, plants: &[PlantSpec]) {
        let corpus = generate_synthetic_corpus(language, 15, plants, 5).unwrap();
        let taxonomy = Taxonomy::builtin(language);
        for snippet in &corpus.snippets {
            let tokens = tag_snippet(snippet, usize::MAX, &taxonomy).unwrap();
            let parsed: Vec<&str> = tokens.iter().map(|t| t.lexeme.as_str()).collect();
            let generated: Vec<&str> = snippet.text.lines().flat_map(split_statement).collect();
            assert_eq!(parsed, generated, "snippet {}", snippet.id);
            for rec in corpus.planted.iter().filter(|r| r.snippet_id == snippet.id) {
                let plant = &plants[rec.plant_index];
                let token = &tokens[rec.position];
                assert_eq!(token.lexeme, rec.lexeme, "snippet {}", snippet.id);
                assert_eq!(tag_of(token), plant.tag, "{} in {}", rec.lexeme, snippet.id);
                assert!(plant.range.contains(rec.position));
            }
        }
    }

    /// Splits on spaces except inside comments and string literals.
    fn split_statement(line: &str) -> Vec<&str> {
        if line.starts_with("/*") {
            return vec![line];
        }
        let mut out = Vec::new();
        let mut start = 0;
        let mut in_string = false;
        for (i, ch) in line.char_indices() {
            match ch {
                '"' => in_string = !in_string,
                ' ' if !in_string => {
                    out.push(&line[start..i]);
                    start = i + 1;
                }
                _ => {}
            }
        }
        out.push(&line[start..]);
        out
    }

    #[test]
    fn c_templates_align_with_grammar() {
        let plants: Vec<PlantSpec> = [
            AstTag::Literal,
            AstTag::Operator,
            AstTag::Keyword,
            AstTag::Identifier,
            AstTag::Type,
            AstTag::Primitive,
            AstTag::Punctuation,
            AstTag::Comment,
        ]
        .into_iter()
        .enumerate()
        .map(|(i, tag)| PlantSpec {
            tag,
            range: PositionRange { lo: 20 + 30 * i, hi: 49 + 30 * i },
            target_class: ClassLabel::Insecure,
            plant_rate: 0.8,
        })
        .collect();
        check_alignment(Language::C, &plants);
    }

    #[test]
    fn java_templates_align_with_grammar() {
        let plants: Vec<PlantSpec> = [AstTag::Literal, AstTag::Keyword, AstTag::Type, AstTag::Punctuation, AstTag::Comment]
            .into_iter()
            .map(|tag| PlantSpec { tag, ..literal_plant() })
            .collect();
        check_alignment(Language::Java, &plants);
    }

    #[test]
    fn markers_include_plants() {
        let m = markers_with_plants(Language::C, &[literal_plant()]);
        assert_eq!(m["strcpy"], MARKER_WEIGHT);
        assert_eq!(m["strncpy"], -MARKER_WEIGHT);
        assert_eq!(m["\"hunter2\""], PLANT_WEIGHT);
    }
}
