//! Prompt templates with `{name}` placeholders. `{{` and `}}` are literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("invalid placeholder name {0:?}")]
    InvalidName(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?} lacks required placeholder {{{placeholder}}}")]
    MissingSlot { template: String, placeholder: String },
    #[error("reading template {path}: {reason}")]
    Io { path: String, reason: String },
}

/// A value bound to a placeholder.
#[derive(Debug, Clone, PartialEq)]
pub enum Binding {
    Text(String),
    /// Rendered as one `- item` line per element.
    List(Vec<String>),
}

impl Binding {
    fn render(&self) -> String {
        match self {
            Binding::Text(t) => t.clone(),
            Binding::List(items) => items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n"),
        }
    }
}

pub type Bindings = BTreeMap<String, Binding>;

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut literal = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((pos, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|(_, n)| *n) == Some('{') => {
                    chars.next();
                    literal.push('{');
                }
                '}' if chars.peek().map(|(_, n)| *n) == Some('}') => {
                    chars.next();
                    literal.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    let mut closed = false;
                    for (_, n) in chars.by_ref() {
                        if n == '}' {
                            closed = true;
                            break;
                        }
                        name.push(n);
                    }
                    if !closed {
                        return Err(TemplateError::Unterminated(pos));
                    }
                    if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                        return Err(TemplateError::InvalidName(name));
                    }
                    if !literal.is_empty() {
                        pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                    }
                    pieces.push(Piece::Slot(name));
                }
                other => literal.push(other),
            }
        }
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        Ok(Self { pieces })
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name.as_str()),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    /// Renders the template. Every placeholder must be bound; extra bindings
    /// are ignored.
    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Literal(text) => out.push_str(text),
                Piece::Slot(name) => {
                    let value = bindings.get(name).ok_or_else(|| TemplateError::UnboundPlaceholder(name.clone()))?;
                    out.push_str(&value.render());
                }
            }
        }
        Ok(out)
    }
}

pub const SUMMARY: &str = "summary";
pub const PARAPHRASE: &str = "paraphrase";
pub const COUNTERARGUMENT: &str = "counterargument";

const REQUIRED: [(&str, &[&str]); 3] =
    [(SUMMARY, &["history"]), (PARAPHRASE, &["dissent"]), (COUNTERARGUMENT, &["summary"])];

/// The three agent prompts, loaded from a directory of `<name>.txt` files or
/// from the built-in defaults.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let sources = [
            (SUMMARY, include_str!("../templates/summary.txt")),
            (PARAPHRASE, include_str!("../templates/paraphrase.txt")),
            (COUNTERARGUMENT, include_str!("../templates/counterargument.txt")),
        ];
        let templates = sources
            .into_iter()
            .map(|(name, src)| (name.to_string(), Template::parse(src).expect("builtin template parses")))
            .collect();
        let set = Self { templates };
        set.check_slots().expect("builtin templates carry required slots");
        set
    }

    /// Loads overrides from `dir`; any of the three files that is missing
    /// falls back to the built-in text.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut set = Self::builtin();
        for (name, _) in REQUIRED {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io { path: path.display().to_string(), reason: e.to_string() })?;
            set.templates.insert(name.to_string(), Template::parse(&source)?);
        }
        set.check_slots()?;
        Ok(set)
    }

    pub fn insert(&mut self, name: &str, template: Template) {
        self.templates.insert(name.to_string(), template);
    }

    pub fn get(&self, name: &str) -> Result<&Template, TemplateError> {
        self.templates.get(name).ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    fn check_slots(&self) -> Result<(), TemplateError> {
        for (name, slots) in REQUIRED {
            let template = self.get(name)?;
            let present = template.placeholders();
            for slot in slots {
                if !present.contains(slot) {
                    return Err(TemplateError::MissingSlot {
                        template: name.to_string(),
                        placeholder: slot.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}
