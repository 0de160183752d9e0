//! `{{placeholder}}` templates with a closed placeholder vocabulary.
//!
//! Every template kind declares the placeholders it may use. Loading a
//! template that mentions anything else fails, as does rendering without a
//! value for a placeholder the template uses.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}` uses unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` has an unterminated placeholder")]
    Unterminated { template: String },
    #[error("template `{template}` needs a value for `{name}`")]
    MissingValue { template: String, name: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TemplateKind {
    OcrSolution,
    OcrFinal,
    System,
    Grade,
    DraftRubric,
    Message,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::OcrSolution,
        TemplateKind::OcrFinal,
        TemplateKind::System,
        TemplateKind::Grade,
        TemplateKind::DraftRubric,
        TemplateKind::Message,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::OcrSolution => "ocr_solution.txt",
            TemplateKind::OcrFinal => "ocr_final.txt",
            TemplateKind::System => "system.txt",
            TemplateKind::Grade => "grade.txt",
            TemplateKind::DraftRubric => "draft_rubric.txt",
            TemplateKind::Message => "message.txt",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::OcrSolution | TemplateKind::OcrFinal => &["statement"],
            TemplateKind::System => &["principles"],
            TemplateKind::Grade => &[
                "max_points",
                "statement",
                "reference_solution",
                "reference_final_answer",
                "rubric_kind",
                "rubric_body",
                "guidance",
                "solution_text",
                "final_answer_text",
            ],
            TemplateKind::DraftRubric => &[
                "rubric_kind",
                "max_points",
                "statement",
                "reference_solution",
                "exemplar_body",
            ],
            TemplateKind::Message => &["name", "sections", "total"],
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateKind::OcrSolution => include_str!("../templates/ocr_solution.txt"),
            TemplateKind::OcrFinal => include_str!("../templates/ocr_final.txt"),
            TemplateKind::System => include_str!("../templates/system.txt"),
            TemplateKind::Grade => include_str!("../templates/grade.txt"),
            TemplateKind::DraftRubric => include_str!("../templates/draft_rubric.txt"),
            TemplateKind::Message => include_str!("../templates/message.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    kind: TemplateKind,
    source: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(kind: TemplateKind, source: &str) -> Result<Self, TemplateError> {
        let name = kind.file_name();
        let mut pieces = Vec::new();
        let mut rest = source;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                pieces.push(Piece::Text(rest[..start].to_string()));
            }
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| TemplateError::Unterminated {
                    template: name.to_string(),
                })?;
            let slot = after[..end].trim();
            if !kind.placeholders().contains(&slot) {
                return Err(TemplateError::UnknownPlaceholder {
                    template: name.to_string(),
                    name: slot.to_string(),
                });
            }
            pieces.push(Piece::Slot(slot.to_string()));
            rest = &after[end + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Template {
            kind,
            source: source.to_string(),
            pieces,
        })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.source.len() * 2);
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => {
                    let v = values
                        .get(s.as_str())
                        .ok_or_else(|| TemplateError::MissingValue {
                            template: self.kind.file_name().to_string(),
                            name: s.clone(),
                        })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

/// The full set of templates used for one run, plus a short content hash
/// that is recorded with every grading run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKind, Template>,
    version: String,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::from_sources(|kind| Ok(kind.default_text().to_string()))
            .expect("builtin templates are valid")
    }

    /// Loads templates from `dir`; files that are absent fall back to the
    /// built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Self::from_sources(|kind| {
            let path = dir.join(kind.file_name());
            if path.exists() {
                fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })
            } else {
                Ok(kind.default_text().to_string())
            }
        })
    }

    fn from_sources(
        mut source: impl FnMut(TemplateKind) -> Result<String, TemplateError>,
    ) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        let mut hashed = String::new();
        for kind in TemplateKind::ALL {
            let text = source(kind)?;
            hashed.push_str(kind.file_name());
            hashed.push('\0');
            hashed.push_str(&text);
            hashed.push('\0');
            templates.insert(kind, Template::parse(kind, &text)?);
        }
        let version = format!("tpl-{}", &sha256_hex(hashed.as_bytes())[..12]);
        Ok(TemplateSet { templates, version })
    }

    pub fn get(&self, kind: TemplateKind) -> &Template {
        &self.templates[&kind]
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
