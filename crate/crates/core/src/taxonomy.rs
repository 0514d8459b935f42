//! Dataset taxonomies, merge directives and the universal label-space.
//!
//! A taxonomy file declares one dataset:
//!
//! ```text
//! dataset cityscapes encoding=indexed
//! ignore 0 "unlabeled"
//! class 7 "road"
//! ```
//!
//! A directive file says how classes of different datasets relate:
//!
//! ```text
//! merge cityscapes.person sun_rgbd.person -> "person"
//! rename cityscapes.wall "outside wall"
//! map_ignore suim.robots
//! ```
//!
//! Class names in directives are written in normalized form with spaces
//! replaced by `_`. Every class not mentioned by a directive becomes its own
//! universal class.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label id reserved for pixels excluded from training and evaluation.
pub const IGNORE_ID: u8 = 255;

/// Highest id an evaluation class may use.
pub const MAX_CLASS_ID: u8 = 254;

/// Lowercases and collapses inner whitespace.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Form used to reference a class from a directive file.
pub fn directive_key(name: &str) -> String {
    normalize_name(name).replace(' ', "_")
}

fn is_dataset_token(token: &str) -> bool {
    !token.is_empty()
        && token
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// Pixel values are class ids.
    #[default]
    Indexed,
    /// Pixel colors carry one bit per channel.
    ColorCoded,
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::Indexed => "indexed",
            Encoding::ColorCoded => "color-coded",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    pub ignored: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetTaxonomy {
    pub dataset_id: String,
    pub encoding: Encoding,
    /// Classes in file order.
    pub classes: Vec<ClassDef>,
}

impl DatasetTaxonomy {
    pub fn evaluation_classes(&self) -> impl Iterator<Item = &ClassDef> {
        self.classes.iter().filter(|c| !c.ignored)
    }

    pub fn evaluation_class_count(&self) -> usize {
        self.evaluation_classes().count()
    }

    pub fn class(&self, id: u8) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Looks a class up by its directive key (`outside_wall`).
    pub fn find_by_key(&self, key: &str) -> Option<&ClassDef> {
        let key = key.to_lowercase();
        self.classes.iter().find(|c| directive_key(&c.name) == key)
    }
}

/// Splits a line into whitespace separated tokens, honouring double quotes
/// and dropping a trailing `#` comment.
fn tokenize(line: &str, line_no: usize) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '"' {
            chars.next();
            let mut text = String::new();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some(escaped @ ('"' | '\\')) => text.push(escaped),
                        Some(other) => {
                            return Err(Error::parse(line_no, format!("unknown escape '\\{other}'")))
                        }
                        None => break,
                    },
                    _ => text.push(c),
                }
            }
            if !closed {
                return Err(Error::parse(line_no, "unterminated quoted string"));
            }
            tokens.push(Token::Quoted(text));
        } else {
            let mut word = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() || c == '"' || c == '#' {
                    break;
                }
                word.push(c);
                chars.next();
            }
            tokens.push(Token::Word(word));
        }
    }
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Word(String),
    Quoted(String),
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Word(w) => format!("'{w}'"),
            Token::Quoted(q) => format!("\"{q}\""),
        }
    }
}

fn expect_name(token: Option<&Token>, line: usize, what: &str) -> Result<String> {
    match token {
        Some(Token::Quoted(name)) if !name.trim().is_empty() => Ok(name.trim().to_string()),
        Some(Token::Quoted(_)) => Err(Error::parse(line, format!("{what} must not be empty"))),
        Some(other) => Err(Error::parse(
            line,
            format!("expected quoted {what}, found {}", other.describe()),
        )),
        None => Err(Error::parse(line, format!("missing quoted {what}"))),
    }
}

/// Parses a taxonomy document. Classes keep their file order.
pub fn parse_taxonomy(text: &str) -> Result<DatasetTaxonomy> {
    let mut header: Option<(String, Encoding)> = None;
    let mut classes: Vec<ClassDef> = Vec::new();
    let mut ids: HashMap<u8, usize> = HashMap::new();
    let mut names: HashMap<String, usize> = HashMap::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let tokens = tokenize(raw, line)?;
        let Some(Token::Word(keyword)) = tokens.first() else {
            if tokens.is_empty() {
                continue;
            }
            return Err(Error::parse(line, "line must start with a keyword"));
        };

        match keyword.as_str() {
            "dataset" => {
                if header.is_some() {
                    return Err(Error::parse(line, "duplicate dataset header"));
                }
                let Some(Token::Word(token)) = tokens.get(1) else {
                    return Err(Error::parse(line, "dataset header needs a dataset token"));
                };
                if !is_dataset_token(token) {
                    return Err(Error::parse(
                        line,
                        format!("dataset token '{token}' must match [a-z0-9_]+"),
                    ));
                }
                let mut encoding = Encoding::Indexed;
                for extra in &tokens[2..] {
                    match extra {
                        Token::Word(w) if w == "encoding=indexed" => encoding = Encoding::Indexed,
                        Token::Word(w) if w == "encoding=color-coded" => {
                            encoding = Encoding::ColorCoded
                        }
                        other => {
                            return Err(Error::parse(
                                line,
                                format!("unexpected header field {}", other.describe()),
                            ))
                        }
                    }
                }
                header = Some((token.clone(), encoding));
            }
            "class" | "ignore" => {
                if header.is_none() {
                    return Err(Error::parse(line, "missing dataset header before class lines"));
                }
                let ignored = keyword == "ignore";
                let id = match tokens.get(1) {
                    Some(Token::Word(w)) => w
                        .parse::<u16>()
                        .map_err(|_| Error::parse(line, format!("invalid class id '{w}'")))?,
                    _ => return Err(Error::parse(line, "missing class id")),
                };
                if id > u16::from(IGNORE_ID) {
                    return Err(Error::parse(line, format!("class id {id} exceeds 255")));
                }
                let id = id as u8;
                if !ignored && id > MAX_CLASS_ID {
                    return Err(Error::parse(
                        line,
                        format!("evaluation class id {id} exceeds {MAX_CLASS_ID}; 255 is reserved"),
                    ));
                }
                let name = expect_name(tokens.get(2), line, "class name")?;
                if let Some(extra) = tokens.get(3) {
                    return Err(Error::parse(line, format!("unexpected {}", extra.describe())));
                }
                if let Some(first) = ids.insert(id, line) {
                    return Err(Error::parse(
                        line,
                        format!("duplicate class id {id} (first declared on line {first})"),
                    ));
                }
                if let Some(first) = names.insert(normalize_name(&name), line) {
                    return Err(Error::parse(
                        line,
                        format!("duplicate class name \"{name}\" (first declared on line {first})"),
                    ));
                }
                classes.push(ClassDef { id, name, ignored });
            }
            other => return Err(Error::parse(line, format!("unknown keyword '{other}'"))),
        }
    }

    let Some((dataset_id, encoding)) = header else {
        return Err(Error::parse(last_line.max(1), "missing dataset header"));
    };
    if !classes.iter().any(|c| !c.ignored) {
        return Err(Error::parse(
            last_line.max(1),
            format!("dataset '{dataset_id}' declares no evaluation class"),
        ));
    }
    Ok(DatasetTaxonomy { dataset_id, encoding, classes })
}

/// A (dataset, local id) pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassRef {
    pub dataset: String,
    #[serde(rename = "id")]
    pub local_id: u8,
}

impl ClassRef {
    pub fn new(dataset: impl Into<String>, local_id: u8) -> Self {
        ClassRef { dataset: dataset.into(), local_id }
    }
}

impl fmt::Display for ClassRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.dataset, self.local_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectiveKind {
    Merge,
    Rename,
    MapIgnore,
}

impl fmt::Display for DirectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectiveKind::Merge => "merge",
            DirectiveKind::Rename => "rename",
            DirectiveKind::MapIgnore => "map_ignore",
        })
    }
}

impl DirectiveKind {
    fn past(self) -> &'static str {
        match self {
            DirectiveKind::Merge => "merged",
            DirectiveKind::Rename => "renamed",
            DirectiveKind::MapIgnore => "map_ignore'd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Directive {
    pub kind: DirectiveKind,
    pub operands: Vec<ClassRef>,
    /// Required for merge and rename.
    pub new_name: Option<String>,
}

fn resolve_operand(token: &Token, line: usize, taxonomies: &[DatasetTaxonomy]) -> Result<ClassRef> {
    let Token::Word(word) = token else {
        return Err(Error::parse(
            line,
            format!("expected <dataset>.<class>, found {}", token.describe()),
        ));
    };
    let Some((dataset, key)) = word.split_once('.') else {
        return Err(Error::parse(line, format!("expected <dataset>.<class>, found '{word}'")));
    };
    let taxonomy = taxonomies
        .iter()
        .find(|t| t.dataset_id == dataset)
        .ok_or_else(|| Error::parse(line, format!("unknown dataset '{dataset}'")))?;
    let class = taxonomy
        .find_by_key(key)
        .ok_or_else(|| Error::parse(line, format!("dataset '{dataset}' has no class '{key}'")))?;
    if class.ignored {
        return Err(Error::parse(
            line,
            format!("'{word}' is an ignore class and cannot be referenced"),
        ));
    }
    Ok(ClassRef::new(dataset, class.id))
}

/// Parses a directive document against already parsed taxonomies.
pub fn parse_directives(text: &str, taxonomies: &[DatasetTaxonomy]) -> Result<Vec<Directive>> {
    let mut directives = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens = tokenize(raw, line)?;
        let Some(first) = tokens.first() else {
            continue;
        };
        let Token::Word(keyword) = first else {
            return Err(Error::parse(line, "line must start with a keyword"));
        };
        let directive = match keyword.as_str() {
            "merge" => {
                let arrow = tokens
                    .iter()
                    .position(|t| *t == Token::Word("->".into()))
                    .ok_or_else(|| Error::parse(line, "merge needs '-> \"<name>\"'"))?;
                let operands = tokens[1..arrow]
                    .iter()
                    .map(|t| resolve_operand(t, line, taxonomies))
                    .collect::<Result<Vec<_>>>()?;
                let new_name = expect_name(tokens.get(arrow + 1), line, "merged class name")?;
                if let Some(extra) = tokens.get(arrow + 2) {
                    return Err(Error::parse(line, format!("unexpected {}", extra.describe())));
                }
                if operands.len() < 2 {
                    return Err(Error::parse(line, "merge needs at least two operands"));
                }
                let distinct: BTreeSet<&ClassRef> = operands.iter().collect();
                if distinct.len() != operands.len() {
                    return Err(Error::parse(line, "merge lists the same class twice"));
                }
                let datasets: BTreeSet<&str> = operands.iter().map(|o| o.dataset.as_str()).collect();
                if datasets.len() < 2 {
                    return Err(Error::parse(
                        line,
                        "merge operands must come from at least two datasets",
                    ));
                }
                Directive { kind: DirectiveKind::Merge, operands, new_name: Some(new_name) }
            }
            "rename" => {
                if tokens.len() != 3 {
                    return Err(Error::parse(line, "usage: rename <dataset>.<class> \"<new name>\""));
                }
                let operand = resolve_operand(&tokens[1], line, taxonomies)?;
                let new_name = expect_name(tokens.get(2), line, "new class name")?;
                let normalized = normalize_name(&new_name);
                for taxonomy in taxonomies {
                    for class in taxonomy.evaluation_classes() {
                        let same = taxonomy.dataset_id == operand.dataset && class.id == operand.local_id;
                        if !same && normalize_name(&class.name) == normalized {
                            return Err(Error::parse(
                                line,
                                format!(
                                    "rename target \"{new_name}\" collides with {}.{}",
                                    taxonomy.dataset_id,
                                    directive_key(&class.name)
                                ),
                            ));
                        }
                    }
                }
                Directive { kind: DirectiveKind::Rename, operands: vec![operand], new_name: Some(new_name) }
            }
            "map_ignore" => {
                if tokens.len() != 2 {
                    return Err(Error::parse(line, "usage: map_ignore <dataset>.<class>"));
                }
                let operand = resolve_operand(&tokens[1], line, taxonomies)?;
                Directive { kind: DirectiveKind::MapIgnore, operands: vec![operand], new_name: None }
            }
            other => return Err(Error::parse(line, format!("unknown directive '{other}'"))),
        };
        directives.push(directive);
    }
    Ok(directives)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniversalClass {
    pub id: u8,
    pub name: String,
    pub contributors: Vec<ClassRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniversalLabelSpace {
    pub classes: Vec<UniversalClass>,
    pub ignore_id: u8,
}

impl UniversalLabelSpace {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.classes.get(id as usize).map(|c| c.name.as_str())
    }

    /// Universal classes with at least one contributor from `dataset`.
    pub fn reachable(&self, dataset: &str) -> BTreeSet<u8> {
        self.classes
            .iter()
            .filter(|c| c.contributors.iter().any(|r| r.dataset == dataset))
            .map(|c| c.id)
            .collect()
    }

    /// Dataset ids in first-contributor order.
    pub fn datasets(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for class in &self.classes {
            for r in &class.contributors {
                if !seen.contains(&r.dataset) {
                    seen.push(r.dataset.clone());
                }
            }
        }
        seen
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: UniversalLabelSpace = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    fn validate(&self) -> Result<()> {
        if self.ignore_id != IGNORE_ID {
            return Err(Error::Merge(format!("ignore_id must be {IGNORE_ID}")));
        }
        if self.classes.len() > usize::from(IGNORE_ID) {
            return Err(Error::Merge(format!("{} classes do not fit below the ignore id", self.classes.len())));
        }
        let mut names = HashMap::new();
        let mut contributors = BTreeSet::new();
        for (pos, class) in self.classes.iter().enumerate() {
            if usize::from(class.id) != pos {
                return Err(Error::Merge(format!("class '{}' has id {} at position {pos}", class.name, class.id)));
            }
            if let Some(other) = names.insert(normalize_name(&class.name), class.id) {
                return Err(Error::Merge(format!("classes {other} and {} share the name '{}'", class.id, class.name)));
            }
            for r in &class.contributors {
                if !contributors.insert(r.clone()) {
                    return Err(Error::Merge(format!("contributor {r} appears twice")));
                }
            }
        }
        Ok(())
    }
}

/// How strictly stray label values are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    /// Undeclared ids are an error when a pixel carries them.
    #[default]
    Strict,
    /// Undeclared ids silently become the ignore id.
    Lenient,
}

/// Total mapping from every declared (dataset, local id) to a universal id.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ClassMap {
    entries: BTreeMap<ClassRef, u8>,
}

impl ClassMap {
    pub fn get(&self, dataset: &str, local_id: u8) -> Option<u8> {
        self.entries.get(&ClassRef::new(dataset, local_id)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassRef, u8)> {
        self.entries.iter().map(|(k, v)| (k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_dataset(&self, dataset: &str) -> bool {
        self.entries.keys().any(|k| k.dataset == dataset)
    }

    pub fn build_lut(&self, dataset: &str, policy: Strictness) -> Result<Lut> {
        if !self.contains_dataset(dataset) {
            return Err(Error::UnknownDataset(dataset.to_string()));
        }
        let fill = match policy {
            Strictness::Strict => Lut::POISON,
            Strictness::Lenient => u16::from(IGNORE_ID),
        };
        let mut table = [fill; 256];
        for (key, universal) in self.iter().filter(|(k, _)| k.dataset == dataset) {
            table[usize::from(key.local_id)] = u16::from(universal);
        }
        table[usize::from(IGNORE_ID)] = u16::from(IGNORE_ID);
        Ok(Lut { dataset_id: dataset.to_string(), table })
    }
}

/// 256-entry table compiling one dataset's part of a [`ClassMap`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lut {
    dataset_id: String,
    table: [u16; 256],
}

impl Lut {
    /// Marks an undeclared id in strict mode. Any value with this bit set is
    /// not a valid universal id.
    pub const POISON: u16 = 0x100;

    /// A LUT mapping every id to itself, tagged with `dataset`.
    pub fn identity(dataset: impl Into<String>) -> Self {
        let mut table = [0u16; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            *slot = i as u16;
        }
        Lut { dataset_id: dataset.into(), table }
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    /// `None` for a poisoned entry.
    pub fn get(&self, local_id: u8) -> Option<u8> {
        let v = self.table[usize::from(local_id)];
        (v & Self::POISON == 0).then_some(v as u8)
    }

    pub(crate) fn table(&self) -> &[u16; 256] {
        &self.table
    }
}

/// Builds the universal label-space.
///
/// Universal ids follow first occurrence over (dataset order, local id).
/// A merged class takes the position of its first contributor.
pub fn merge_label_spaces(
    taxonomies: &[DatasetTaxonomy],
    directives: &[Directive],
) -> Result<(UniversalLabelSpace, ClassMap)> {
    let mut seen_datasets = BTreeSet::new();
    for t in taxonomies {
        if !seen_datasets.insert(t.dataset_id.as_str()) {
            return Err(Error::Merge(format!("dataset '{}' listed twice", t.dataset_id)));
        }
    }

    let mut claims: HashMap<ClassRef, usize> = HashMap::new();
    for (idx, directive) in directives.iter().enumerate() {
        validate_directive(directive, taxonomies)?;
        for operand in &directive.operands {
            if let Some(prev) = claims.insert(operand.clone(), idx) {
                let prev_kind = directives[prev].kind;
                let message = if prev_kind == directive.kind {
                    format!("{operand} is referenced by two {} directives", directive.kind)
                } else {
                    format!("{operand} is both {} and {}", prev_kind.past(), directive.kind.past())
                };
                return Err(Error::Merge(message));
            }
        }
    }

    let mut classes: Vec<UniversalClass> = Vec::new();
    let mut entries = BTreeMap::new();
    let mut merged_slots: HashMap<usize, u8> = HashMap::new();

    for taxonomy in taxonomies {
        let mut ordered: Vec<&ClassDef> = taxonomy.classes.iter().collect();
        ordered.sort_by_key(|c| c.id);
        for class in ordered {
            let key = ClassRef::new(taxonomy.dataset_id.clone(), class.id);
            if class.ignored {
                entries.insert(key, IGNORE_ID);
                continue;
            }
            let directive = claims.get(&key).map(|&i| (i, &directives[i]));
            let universal = match directive {
                Some((_, d)) if d.kind == DirectiveKind::MapIgnore => IGNORE_ID,
                Some((idx, d)) if d.kind == DirectiveKind::Merge => {
                    if let Some(&slot) = merged_slots.get(&idx) {
                        classes[usize::from(slot)].contributors.push(key.clone());
                        slot
                    } else {
                        let slot = push_class(&mut classes, d.new_name.clone().unwrap_or_default(), key.clone())?;
                        merged_slots.insert(idx, slot);
                        slot
                    }
                }
                Some((_, d)) => push_class(&mut classes, d.new_name.clone().unwrap_or_default(), key.clone())?,
                None => push_class(&mut classes, class.name.clone(), key.clone())?,
            };
            entries.insert(key, universal);
        }
    }

    let mut names: HashMap<String, &UniversalClass> = HashMap::new();
    for class in &classes {
        if let Some(other) = names.insert(normalize_name(&class.name), class) {
            return Err(Error::Merge(format!(
                "universal name collision on \"{}\" between {} and {}",
                class.name,
                describe_contributors(other),
                describe_contributors(class)
            )));
        }
    }

    Ok((UniversalLabelSpace { classes, ignore_id: IGNORE_ID }, ClassMap { entries }))
}

fn describe_contributors(class: &UniversalClass) -> String {
    class
        .contributors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("+")
}

fn push_class(classes: &mut Vec<UniversalClass>, name: String, contributor: ClassRef) -> Result<u8> {
    if classes.len() >= usize::from(IGNORE_ID) {
        return Err(Error::Merge(format!(
            "universal label-space exceeds {} classes",
            IGNORE_ID
        )));
    }
    let id = classes.len() as u8;
    classes.push(UniversalClass { id, name, contributors: vec![contributor] });
    Ok(id)
}

fn validate_directive(directive: &Directive, taxonomies: &[DatasetTaxonomy]) -> Result<()> {
    for operand in &directive.operands {
        let taxonomy = taxonomies
            .iter()
            .find(|t| t.dataset_id == operand.dataset)
            .ok_or_else(|| Error::UnknownDataset(operand.dataset.clone()))?;
        match taxonomy.class(operand.local_id) {
            Some(c) if !c.ignored => {}
            Some(c) => {
                return Err(Error::Directive(format!(
                    "{} references ignore class '{}'",
                    directive.kind, c.name
                )))
            }
            None => {
                return Err(Error::UnknownClass {
                    dataset: operand.dataset.clone(),
                    name: format!("#{}", operand.local_id),
                })
            }
        }
    }
    match directive.kind {
        DirectiveKind::Merge => {
            let datasets: BTreeSet<&str> = directive.operands.iter().map(|o| o.dataset.as_str()).collect();
            if directive.operands.len() < 2 || datasets.len() < 2 {
                return Err(Error::Directive("merge needs operands from at least two datasets".into()));
            }
        }
        DirectiveKind::Rename | DirectiveKind::MapIgnore => {
            if directive.operands.len() != 1 {
                return Err(Error::Directive(format!("{} takes exactly one operand", directive.kind)));
            }
        }
    }
    match (&directive.kind, &directive.new_name) {
        (DirectiveKind::MapIgnore, _) => Ok(()),
        (_, Some(name)) if !name.trim().is_empty() => Ok(()),
        (kind, _) => Err(Error::Directive(format!("{kind} requires a new name"))),
    }
}

/// Percentage by which `merged` classes exceed `baseline` classes.
pub fn label_space_expansion(merged: usize, baseline: usize) -> f64 {
    (merged as f64 / baseline as f64 - 1.0) * 100.0
}
