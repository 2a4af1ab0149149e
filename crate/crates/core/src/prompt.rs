//! Prompt templates and rendering.
//!
//! Templates are plain-text files whose first line is a header such as
//! `kind=judge version=v1`; the rest of the file is the body. Bodies carry
//! `{name}` placeholders, and each template kind has a fixed placeholder set
//! that must appear exactly once. Rendering substitutes in a single pass, so
//! brace sequences inside the substituted data are never re-expanded.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One judging criterion: a short name and what it measures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub description: String,
}

impl Criterion {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Criterion {
            name: name.into(),
            description: description.into(),
        }
    }
}

/// The built-in criterion list, in the order prompts present them.
pub fn default_criteria() -> Vec<Criterion> {
    vec![
        Criterion::new("accuracy", "factual correctness of every claim"),
        Criterion::new("completeness", "covers all parts of the question"),
        Criterion::new("clarity", "easy to follow and well organized"),
        Criterion::new("conciseness", "no padding or repetition"),
        Criterion::new("relevance", "stays on the question actually asked"),
    ]
}

/// Renders criteria as numbered `N. name: description` lines.
pub fn render_criteria(criteria: &[Criterion]) -> String {
    criteria
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}: {}", i + 1, c.name, c.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The four template roles the pipeline renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Feedback,
    Refine,
    Judge,
    Grade,
}

impl TemplateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateKind::Feedback => "feedback",
            TemplateKind::Refine => "refine",
            TemplateKind::Judge => "judge",
            TemplateKind::Grade => "grade",
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        match s {
            "feedback" => Some(TemplateKind::Feedback),
            "refine" => Some(TemplateKind::Refine),
            "judge" => Some(TemplateKind::Judge),
            "grade" => Some(TemplateKind::Grade),
            _ => None,
        }
    }

    /// The placeholder names this kind must contain, each exactly once.
    pub fn required_placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateKind::Feedback => &["query", "answer", "criteria"],
            TemplateKind::Refine => &["query", "answer", "feedback"],
            TemplateKind::Judge => &["query", "answer_a", "answer_b", "criteria"],
            TemplateKind::Grade => &["query", "answer", "criteria"],
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template header {0:?} is not of the form `kind=<kind> version=<version>`")]
    BadHeader(String),
    #[error("template header names unknown kind {0:?}")]
    UnknownKind(String),
    #[error("{kind} template is missing the {{{name}}} placeholder")]
    MissingPlaceholder {
        kind: TemplateKind,
        name: &'static str,
    },
    #[error("{kind} template contains {{{name}}} {count} times; exactly once is required")]
    DuplicatePlaceholder {
        kind: TemplateKind,
        name: &'static str,
        count: usize,
    },
    #[error("{kind} template contains unsupported placeholder {{{name}}}")]
    UnknownPlaceholder { kind: TemplateKind, name: String },
    #[error("expected a {expected} template, found {found}")]
    WrongKind {
        expected: TemplateKind,
        found: TemplateKind,
    },
}

/// A parsed, validated prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub version: String,
    body: String,
}

impl PromptTemplate {
    /// Parses header and body from raw file text and validates placeholders.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let (header, body) = match text.split_once('\n') {
            Some(parts) => parts,
            None => (text, ""),
        };
        let header = header.trim_end();
        let mut kind = None;
        let mut version = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("kind", v)) => kind = Some(v),
                Some(("version", v)) => version = Some(v),
                _ => return Err(PromptError::BadHeader(header.to_string())),
            }
        }
        let (kind, version) = match (kind, version) {
            (Some(k), Some(v)) if !v.is_empty() => (k, v),
            _ => return Err(PromptError::BadHeader(header.to_string())),
        };
        let kind = TemplateKind::from_str(kind)
            .ok_or_else(|| PromptError::UnknownKind(kind.to_string()))?;

        let template = PromptTemplate {
            kind,
            version: version.to_string(),
            body: body.to_string(),
        };
        template.validate()?;
        Ok(template)
    }

    /// Reads and parses a template file.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Short content digest; changes whenever the body or header changes.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.kind.as_str().as_bytes());
        hasher.update(b"\n");
        hasher.update(self.version.as_bytes());
        hasher.update(b"\n");
        hasher.update(self.body.as_bytes());
        hex::encode(&hasher.finalize()[..8])
    }

    fn validate(&self) -> Result<(), PromptError> {
        let required = self.kind.required_placeholders();
        let counts = placeholder_counts(&self.body);
        for &name in required {
            match counts.get(name).copied().unwrap_or(0) {
                0 => {
                    return Err(PromptError::MissingPlaceholder {
                        kind: self.kind,
                        name,
                    })
                }
                1 => {}
                count => {
                    return Err(PromptError::DuplicatePlaceholder {
                        kind: self.kind,
                        name,
                        count,
                    })
                }
            }
        }
        for name in counts.keys() {
            if !required.contains(&name.as_str()) {
                return Err(PromptError::UnknownPlaceholder {
                    kind: self.kind,
                    name: name.clone(),
                });
            }
        }
        Ok(())
    }

    fn render(&self, expected: TemplateKind, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        if self.kind != expected {
            return Err(PromptError::WrongKind {
                expected,
                found: self.kind,
            });
        }
        Ok(substitute(&self.body, vars))
    }
}

/// Counts well-formed `{name}` tokens where `name` is a lowercase
/// identifier. Other brace sequences are literal text.
fn placeholder_counts(body: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    let mut rest = body;
    while let Some(start) = rest.find('{') {
        rest = &rest[start + 1..];
        if let Some(end) = rest.find('}') {
            let token = &rest[..end];
            if is_placeholder_name(token) {
                *counts.entry(token.to_string()).or_insert(0) += 1;
                rest = &rest[end + 1..];
            }
        } else {
            break;
        }
    }
    counts
}

fn is_placeholder_name(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

/// Single-pass substitution: the output is built left to right and
/// substituted values are never rescanned, so placeholder-shaped text
/// inside the data comes through verbatim.
fn substitute(body: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(body.len() + 64);
    let mut rest = body;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start..];
        match after.find('}') {
            Some(end) => {
                let token = &after[1..end];
                if let Some((_, value)) = vars.iter().find(|(name, _)| *name == token) {
                    out.push_str(value);
                    rest = &after[end + 1..];
                } else {
                    out.push('{');
                    rest = &after[1..];
                }
            }
            None => {
                out.push_str(after);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_feedback(
    template: &PromptTemplate,
    query: &str,
    answer: &str,
    criteria: &[Criterion],
) -> Result<String, PromptError> {
    let criteria = render_criteria(criteria);
    template.render(
        TemplateKind::Feedback,
        &[
            ("query", query),
            ("answer", answer),
            ("criteria", &criteria),
        ],
    )
}

pub fn render_refine(
    template: &PromptTemplate,
    query: &str,
    answer: &str,
    feedback: &str,
) -> Result<String, PromptError> {
    template.render(
        TemplateKind::Refine,
        &[("query", query), ("answer", answer), ("feedback", feedback)],
    )
}

pub fn render_judge(
    template: &PromptTemplate,
    query: &str,
    answer_a: &str,
    answer_b: &str,
    criteria: &[Criterion],
) -> Result<String, PromptError> {
    let criteria = render_criteria(criteria);
    template.render(
        TemplateKind::Judge,
        &[
            ("query", query),
            ("answer_a", answer_a),
            ("answer_b", answer_b),
            ("criteria", &criteria),
        ],
    )
}

pub fn render_grade(
    template: &PromptTemplate,
    query: &str,
    answer: &str,
    criteria: &[Criterion],
) -> Result<String, PromptError> {
    let criteria = render_criteria(criteria);
    template.render(
        TemplateKind::Grade,
        &[
            ("query", query),
            ("answer", answer),
            ("criteria", &criteria),
        ],
    )
}

/// The four templates a run needs, loaded together so their versions can be
/// recorded in the run manifest as one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub feedback: PromptTemplate,
    pub refine: PromptTemplate,
    pub judge: PromptTemplate,
    pub grade: PromptTemplate,
}

impl TemplateSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        let parse =
            |text: &str| PromptTemplate::parse(text).expect("built-in template must be valid");
        TemplateSet {
            feedback: parse(include_str!("../templates/feedback.txt")),
            refine: parse(include_str!("../templates/refine.txt")),
            judge: parse(include_str!("../templates/judge.txt")),
            grade: parse(include_str!("../templates/grade.txt")),
        }
    }

    /// Loads `feedback.txt`, `refine.txt`, `judge.txt`, and `grade.txt` from
    /// a directory. All four files must exist and carry the matching kind.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let load = |kind: TemplateKind| -> Result<PromptTemplate, PromptError> {
            let template = PromptTemplate::load(&dir.join(format!("{kind}.txt")))?;
            if template.kind != kind {
                return Err(PromptError::WrongKind {
                    expected: kind,
                    found: template.kind,
                });
            }
            Ok(template)
        };
        Ok(TemplateSet {
            feedback: load(TemplateKind::Feedback)?,
            refine: load(TemplateKind::Refine)?,
            judge: load(TemplateKind::Judge)?,
            grade: load(TemplateKind::Grade)?,
        })
    }

    /// `kind -> version@digest` map, recorded in run manifests.
    pub fn versions(&self) -> BTreeMap<String, String> {
        [&self.feedback, &self.refine, &self.judge, &self.grade]
            .into_iter()
            .map(|t| (t.kind.to_string(), format!("{}@{}", t.version, t.digest())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates_parse_and_declare_v1() {
        let set = TemplateSet::builtin();
        for (template, kind) in [
            (&set.feedback, TemplateKind::Feedback),
            (&set.refine, TemplateKind::Refine),
            (&set.judge, TemplateKind::Judge),
            (&set.grade, TemplateKind::Grade),
        ] {
            assert_eq!(template.kind, kind);
            assert_eq!(template.version, "v1");
        }
    }

    #[test]
    fn criteria_render_as_numbered_lines() {
        let rendered = render_criteria(&default_criteria());
        let expected = "\
1. accuracy: factual correctness of every claim
2. completeness: covers all parts of the question
3. clarity: easy to follow and well organized
4. conciseness: no padding or repetition
5. relevance: stays on the question actually asked";
        assert_eq!(rendered, expected);
    }

    #[test]
    fn feedback_golden_render() {
        let set = TemplateSet::builtin();
        let criteria = vec![Criterion::new(
            "accuracy",
            "factual correctness of every claim",
        )];
        let rendered = render_feedback(
            &set.feedback,
            "Why is the sky blue?",
            "Because of water.",
            &criteria,
        )
        .unwrap();
        let expected = "\
You are reviewing an answer to a question. Critique it against each
criterion below, pointing at concrete problems. Be specific; do not
rewrite the answer yourself.

Question:
Why is the sky blue?

Answer:
Because of water.

Criteria:
1. accuracy: factual correctness of every claim

List the weaknesses you found, one per line.
";
        assert_eq!(rendered, expected);
    }

    #[test]
    fn refine_golden_render() {
        let set = TemplateSet::builtin();
        let rendered = render_refine(
            &set.refine,
            "Why is the sky blue?",
            "Because of water.",
            "Wrong cause.",
        )
        .unwrap();
        let expected = "\
Rewrite the answer below so it addresses every point of feedback while
keeping everything that is already correct. Output only the improved
answer, with no preamble.

Question:
Why is the sky blue?

Current answer:
Because of water.

Feedback:
Wrong cause.

Improved answer:
";
        assert_eq!(rendered, expected);
    }

    #[test]
    fn judge_golden_render() {
        let set = TemplateSet::builtin();
        let criteria = vec![Criterion::new(
            "clarity",
            "easy to follow and well organized",
        )];
        let rendered =
            render_judge(&set.judge, "Q?", "first answer", "second answer", &criteria).unwrap();
        let expected = "\
Compare the two answers below against each criterion. Score both answers
per criterion on a 0-10 scale, then state which answer is better overall.

Question:
Q?

Answer A:
first answer

Answer B:
second answer

Criteria:
1. clarity: easy to follow and well organized

For each criterion output exactly one line in the form
`<criterion>: A=<0-10> B=<0-10>`, then one final line in the form
`Preferred: A` or `Preferred: B`, or `Preferred: tie` when neither answer
is better.
";
        assert_eq!(rendered, expected);
    }

    #[test]
    fn grade_golden_render() {
        let set = TemplateSet::builtin();
        let criteria = vec![Criterion::new(
            "accuracy",
            "factual correctness of every claim",
        )];
        let rendered = render_grade(&set.grade, "Q?", "An answer.", &criteria).unwrap();
        let expected = "\
Grade the answer below against the criteria. Judge only what is written;
do not reward length for its own sake.

Question:
Q?

Answer:
An answer.

Criteria:
1. accuracy: factual correctness of every claim

Output exactly one line in the form `Score: <0-100>`.
";
        assert_eq!(rendered, expected);
    }

    #[test]
    fn substitution_is_single_pass() {
        let template =
            PromptTemplate::parse("kind=refine version=v1\nQ {query}\nA {answer}\nF {feedback}\n")
                .unwrap();
        let rendered = render_refine(
            &template,
            "literal {answer} inside query",
            "the answer",
            "{query}",
        )
        .unwrap();
        assert_eq!(
            rendered,
            "Q literal {answer} inside query\nA the answer\nF {query}\n"
        );
    }

    #[test]
    fn non_placeholder_braces_pass_through() {
        let template = PromptTemplate::parse(
            "kind=refine version=v1\n{query} {answer} {feedback} {NOT_ONE} {a b} {} {unclosed",
        )
        .unwrap();
        let rendered = render_refine(&template, "q", "a", "f").unwrap();
        assert_eq!(rendered, "q a f {NOT_ONE} {a b} {} {unclosed");
    }

    #[test]
    fn missing_placeholder_is_rejected() {
        let err =
            PromptTemplate::parse("kind=feedback version=v1\n{query} {criteria}\n").unwrap_err();
        assert!(
            matches!(err, PromptError::MissingPlaceholder { name: "answer", .. }),
            "{err}"
        );
    }

    #[test]
    fn duplicate_placeholder_is_rejected() {
        let err = PromptTemplate::parse(
            "kind=feedback version=v1\n{query} {answer} {criteria} {answer}\n",
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                PromptError::DuplicatePlaceholder {
                    name: "answer",
                    count: 2,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn foreign_placeholder_is_rejected() {
        let err = PromptTemplate::parse(
            "kind=feedback version=v1\n{query} {answer} {criteria} {feedback}\n",
        )
        .unwrap_err();
        match err {
            PromptError::UnknownPlaceholder { name, .. } => assert_eq!(name, "feedback"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn bad_headers_are_rejected() {
        for text in [
            "no header here\n{query}",
            "kind=feedback\n{query} {answer} {criteria}",
            "version=v1\n{query} {answer} {criteria}",
            "kind=verdict version=v1\nbody",
        ] {
            assert!(PromptTemplate::parse(text).is_err(), "accepted: {text:?}");
        }
    }

    #[test]
    fn load_dir_round_trips_builtin_files() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [
            ("feedback.txt", include_str!("../templates/feedback.txt")),
            ("refine.txt", include_str!("../templates/refine.txt")),
            ("judge.txt", include_str!("../templates/judge.txt")),
            ("grade.txt", include_str!("../templates/grade.txt")),
        ] {
            std::fs::write(dir.path().join(name), text).unwrap();
        }
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set, TemplateSet::builtin());
    }

    #[test]
    fn load_dir_requires_all_four_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("feedback.txt"),
            include_str!("../templates/feedback.txt"),
        )
        .unwrap();
        assert!(matches!(
            TemplateSet::load_dir(dir.path()),
            Err(PromptError::Io { .. })
        ));
    }

    #[test]
    fn load_dir_rejects_swapped_kinds() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["feedback.txt", "refine.txt", "judge.txt", "grade.txt"] {
            // Every file holds a feedback template; three names now lie.
            std::fs::write(
                dir.path().join(name),
                include_str!("../templates/feedback.txt"),
            )
            .unwrap();
        }
        assert!(matches!(
            TemplateSet::load_dir(dir.path()),
            Err(PromptError::WrongKind {
                expected: TemplateKind::Refine,
                ..
            })
        ));
    }

    #[test]
    fn digest_tracks_content() {
        let a =
            PromptTemplate::parse("kind=grade version=v1\n{query} {answer} {criteria}").unwrap();
        let same =
            PromptTemplate::parse("kind=grade version=v1\n{query} {answer} {criteria}").unwrap();
        let reworded =
            PromptTemplate::parse("kind=grade version=v1\n{query} {answer} — {criteria}").unwrap();
        assert_eq!(a.digest(), same.digest());
        assert_ne!(a.digest(), reworded.digest());
        assert_eq!(a.digest().len(), 16);
    }

    #[test]
    fn versions_map_lists_all_kinds() {
        let versions = TemplateSet::builtin().versions();
        let kinds: Vec<&str> = versions.keys().map(String::as_str).collect();
        assert_eq!(kinds, vec!["feedback", "grade", "judge", "refine"]);
        for value in versions.values() {
            assert!(value.starts_with("v1@"), "{value}");
        }
    }

    #[test]
    fn wrong_kind_at_render_is_rejected() {
        let set = TemplateSet::builtin();
        let err = render_feedback(&set.judge, "q", "a", &[]).unwrap_err();
        assert!(matches!(
            err,
            PromptError::WrongKind {
                expected: TemplateKind::Feedback,
                found: TemplateKind::Judge
            }
        ));
    }
}
