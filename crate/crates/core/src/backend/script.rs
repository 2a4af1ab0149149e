//! A provider that answers from an ordered rule list instead of a model.
//! Scripts drive integration tests and offline dry runs: each rule matches a
//! call tag plus a substring of the rendered prompt and returns a canned
//! completion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{estimated_tokens, Backend, BackendError, CallRequest, CallResponse, CallTag};

/// One matching rule. `tag` is a tag name or `"*"`; `pattern` is a substring
/// the prompt must contain, or `"*"` for any prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default = "any_pattern")]
    pub tag: String,
    #[serde(default = "any_pattern")]
    pub pattern: String,
    pub response: String,
}

fn any_pattern() -> String {
    "*".to_string()
}

impl ScriptRule {
    pub fn new(
        tag: impl Into<String>,
        pattern: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        ScriptRule {
            tag: tag.into(),
            pattern: pattern.into(),
            response: response.into(),
        }
    }

    fn matches(&self, request: &CallRequest) -> bool {
        let tag_ok = self.tag == "*" || self.tag == request.tag.as_str();
        let pattern_ok = self.pattern == "*" || request.user.contains(&self.pattern);
        tag_ok && pattern_ok
    }
}

/// On-disk script shape: a rule list plus the miss behavior.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub strict: bool,
    pub rules: Vec<ScriptRule>,
}

/// Deterministic provider: first matching rule wins. On a miss, strict
/// scripts refuse and lenient scripts echo the prompt back.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    strict: bool,
    label: String,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, strict: bool) -> Self {
        ScriptedBackend {
            rules,
            strict,
            label: "scripted".to_string(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Fatal {
            message: format!("cannot read script {}: {e}", path.display()),
        })?;
        let file: ScriptFile = serde_json::from_str(&text).map_err(|e| BackendError::Fatal {
            message: format!("script {} is not valid JSON: {e}", path.display()),
        })?;
        let label = path
            .file_stem()
            .map(|s| format!("scripted:{}", s.to_string_lossy()))
            .unwrap_or_else(|| "scripted".to_string());
        Ok(ScriptedBackend {
            rules: file.rules,
            strict: file.strict,
            label,
        })
    }

    /// Convenience for judge scripts that always answer the same thing,
    /// e.g. a judge pinned to `Preferred: A`.
    pub fn always(tag: CallTag, response: impl Into<String>) -> Self {
        ScriptedBackend::new(vec![ScriptRule::new(tag.as_str(), "*", response)], true)
    }

    /// Overrides the miss behavior declared in the script file.
    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }
}

impl Backend for ScriptedBackend {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        let response = match self.rules.iter().find(|rule| rule.matches(request)) {
            Some(rule) => rule.response.clone(),
            None if self.strict => {
                return Err(BackendError::Refusal {
                    message: format!(
                        "no script rule matches a {} call starting {:?}",
                        request.tag,
                        request.user.chars().take(48).collect::<String>()
                    ),
                })
            }
            None => request.user.clone(),
        };
        Ok(CallResponse {
            prompt_tokens: estimated_tokens(&request.user),
            completion_tokens: estimated_tokens(&response),
            text: response,
        })
    }

    fn name(&self) -> &str {
        &self.label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(tag: CallTag, user: &str) -> CallRequest {
        CallRequest::new(tag, user, 0.0)
    }

    #[test]
    fn first_matching_rule_wins() {
        let backend = ScriptedBackend::new(
            vec![
                ScriptRule::new("refine", "[[q3]]", "better [[q5]]"),
                ScriptRule::new("refine", "*", "generic rewrite"),
                ScriptRule::new("*", "*", "anything"),
            ],
            true,
        );
        let r = backend
            .call(&request(CallTag::Refine, "text with [[q3]] marker"))
            .unwrap();
        assert_eq!(r.text, "better [[q5]]");
        let r = backend
            .call(&request(CallTag::Refine, "no marker"))
            .unwrap();
        assert_eq!(r.text, "generic rewrite");
        let r = backend.call(&request(CallTag::Judge, "pick one")).unwrap();
        assert_eq!(r.text, "anything");
    }

    #[test]
    fn tag_must_match_when_not_wildcard() {
        let backend =
            ScriptedBackend::new(vec![ScriptRule::new("judge", "*", "Preferred: A")], true);
        assert!(backend.call(&request(CallTag::Judge, "x")).is_ok());
        let err = backend.call(&request(CallTag::Refine, "x")).unwrap_err();
        assert!(matches!(err, BackendError::Refusal { .. }));
    }

    #[test]
    fn lenient_script_echoes_on_miss() {
        let backend = ScriptedBackend::new(vec![], false);
        let r = backend
            .call(&request(CallTag::ZeroShot, "echo me"))
            .unwrap();
        assert_eq!(r.text, "echo me");
        assert_eq!(r.prompt_tokens, 2);
        assert_eq!(r.completion_tokens, 2);
    }

    #[test]
    fn loads_from_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judge.json");
        std::fs::write(
            &path,
            r#"{"strict": true, "rules": [{"tag": "judge", "response": "Preferred: B"}]}"#,
        )
        .unwrap();
        let backend = ScriptedBackend::from_file(&path).unwrap();
        assert_eq!(backend.name(), "scripted:judge");
        let r = backend.call(&request(CallTag::Judge, "anything")).unwrap();
        assert_eq!(r.text, "Preferred: B");
    }

    #[test]
    fn rejects_malformed_script_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(
            ScriptedBackend::from_file(&path),
            Err(BackendError::Fatal { .. })
        ));
        assert!(matches!(
            ScriptedBackend::from_file(&dir.path().join("absent.json")),
            Err(BackendError::Fatal { .. })
        ));
    }
}
