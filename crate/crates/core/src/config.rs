//! Run configuration: one TOML file describing the input, the loop knobs,
//! and the model backends, plus construction of the gateways it names.
//!
//! Credentials never appear in configuration. An HTTP backend names an
//! environment variable (`auth_env`) and the key is read from the process
//! environment when the backend is built, so config files are safe to
//! commit, share, and embed verbatim into run manifests.
//!
//! Relative paths inside a config file (`input`, `out`, `templates`,
//! `script`) resolve against the directory containing the file, so a run
//! can be launched from anywhere.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::http::{HttpBackend, HttpBackendConfig};
use crate::backend::script::ScriptedBackend;
use crate::backend::{Backend, Gateway, RetryPolicy};
use crate::engine::LoopSettings;
use crate::store::RunMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {}", problems.join("; "))]
    Invalid { problems: Vec<String> },
    #[error("cannot set up the {role} backend: {message}")]
    Backend { role: String, message: String },
}

/// Which provider implementation a backend section describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
}

/// One backend section. HTTP fields and the script field are mutually
/// exclusive; `requests_per_minute` and `retry_limit` apply to either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key. Only the
    /// name is ever written down; the value stays in the environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    /// Rule file for scripted backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Overrides the miss behavior declared inside the script file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
    /// Retries after the first attempt for transient failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_limit: Option<u32>,
}

impl BackendSpec {
    /// A scripted spec pointing at a rule file; handy for tests and docs.
    pub fn scripted(script: impl Into<PathBuf>) -> Self {
        BackendSpec {
            kind: BackendKind::Scripted,
            base_url: None,
            path: None,
            model: None,
            auth_env: None,
            timeout_secs: None,
            script: Some(script.into()),
            strict: None,
            requests_per_minute: None,
            retry_limit: None,
        }
    }

    fn problems(&self, role: &str) -> Vec<String> {
        let mut problems = Vec::new();
        match self.kind {
            BackendKind::Http => {
                if self.base_url.is_none() {
                    problems.push(format!("backends.{role}: http backends need base_url"));
                }
                if self.model.is_none() {
                    problems.push(format!("backends.{role}: http backends need model"));
                }
                if self.script.is_some() {
                    problems.push(format!(
                        "backends.{role}: script only applies to scripted backends"
                    ));
                }
            }
            BackendKind::Scripted => {
                if self.script.is_none() {
                    problems.push(format!("backends.{role}: scripted backends need script"));
                }
                for (field, present) in [
                    ("base_url", self.base_url.is_some()),
                    ("path", self.path.is_some()),
                    ("model", self.model.is_some()),
                    ("auth_env", self.auth_env.is_some()),
                    ("timeout_secs", self.timeout_secs.is_some()),
                ] {
                    if present {
                        problems.push(format!(
                            "backends.{role}: {field} only applies to http backends"
                        ));
                    }
                }
            }
        }
        problems
    }

    /// Builds the provider plus its gateway. `role` names the section in
    /// error messages.
    pub fn build(&self, role: &str) -> Result<Arc<Gateway>, ConfigError> {
        let fail = |message: String| ConfigError::Backend {
            role: role.to_string(),
            message,
        };
        let backend: Arc<dyn Backend> = match self.kind {
            BackendKind::Http => {
                let config = HttpBackendConfig {
                    base_url: self
                        .base_url
                        .clone()
                        .ok_or_else(|| fail("base_url is required".to_string()))?,
                    path: self.path.clone().unwrap_or_else(default_chat_path),
                    model: self
                        .model
                        .clone()
                        .ok_or_else(|| fail("model is required".to_string()))?,
                    auth_env: self.auth_env.clone(),
                    timeout_secs: self.timeout_secs.unwrap_or(120),
                };
                Arc::new(HttpBackend::new(&config).map_err(|e| fail(e.to_string()))?)
            }
            BackendKind::Scripted => {
                let path = self
                    .script
                    .as_ref()
                    .ok_or_else(|| fail("script is required".to_string()))?;
                let mut scripted =
                    ScriptedBackend::from_file(path).map_err(|e| fail(e.to_string()))?;
                if let Some(strict) = self.strict {
                    scripted = scripted.with_strict(strict);
                }
                Arc::new(scripted)
            }
        };
        let retry = RetryPolicy {
            max_retries: self
                .retry_limit
                .unwrap_or_else(|| RetryPolicy::default().max_retries),
            ..RetryPolicy::default()
        };
        Ok(Arc::new(Gateway::new(
            backend,
            retry,
            self.requests_per_minute,
        )))
    }

    fn rebase(&mut self, dir: &Path) {
        if let Some(script) = &self.script {
            if script.is_relative() {
                self.script = Some(dir.join(script));
            }
        }
    }
}

fn default_chat_path() -> String {
    "/v1/chat/completions".to_string()
}

/// Judge-panel settings that live outside the per-comparison knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    /// Votes cast per arrangement; must be odd so majorities exist.
    pub voters: usize,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection { voters: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refiner: Option<BackendSpec>,
    /// Falls back to the refiner spec when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<BackendSpec>,
}

/// Everything a run needs, as written in a TOML file. Command-line flags
/// override individual fields after loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; output bytes are identical at any setting.
    pub parallelism: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Directory of prompt template files; the built-in set when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<RunMode>,
    #[serde(rename = "loop")]
    pub loop_settings: LoopSettings,
    pub judge: JudgeSection,
    pub backends: BackendsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallelism: 1,
            input: None,
            out: None,
            templates: None,
            mode: None,
            loop_settings: LoopSettings::default(),
            judge: JudgeSection::default(),
            backends: BackendsSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads and parses a TOML config, resolving its relative paths
    /// against the file's own directory.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        for field in [&mut config.input, &mut config.out, &mut config.templates] {
            if let Some(p) = field {
                if p.is_relative() {
                    *p = dir.join(&p);
                }
            }
        }
        if let Some(spec) = &mut config.backends.refiner {
            spec.rebase(dir);
        }
        if let Some(spec) = &mut config.backends.judge {
            spec.rebase(dir);
        }
        Ok(config)
    }

    /// Everything that must hold before gateways are built; empty means
    /// the config is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.parallelism == 0 {
            problems.push("parallelism must be at least 1".to_string());
        }
        if self.judge.voters == 0 {
            problems.push("judge.voters must be at least 1".to_string());
        } else if self.judge.voters % 2 == 0 {
            problems.push(format!(
                "judge.voters must be odd so majorities exist, got {}",
                self.judge.voters
            ));
        }
        if self.loop_settings.best_of_n == 0 {
            problems.push("loop.best_of_n must be at least 1".to_string());
        }
        for (name, value) in [
            (
                "loop.refine_temperature",
                self.loop_settings.refine_temperature,
            ),
            (
                "loop.judge_temperature",
                self.loop_settings.judge_temperature,
            ),
        ] {
            if !(0.0..=2.0).contains(&value) {
                problems.push(format!("{name} must be within [0, 2], got {value}"));
            }
        }
        let penalty = self.loop_settings.length_penalty_per_token;
        if !penalty.is_finite() || penalty < 0.0 {
            problems.push(format!(
                "loop.length_penalty_per_token must be finite and non-negative, got {penalty}"
            ));
        }
        if let Some(spec) = &self.backends.refiner {
            problems.extend(spec.problems("refiner"));
        }
        if let Some(spec) = &self.backends.judge {
            problems.extend(spec.problems("judge"));
        }
        problems
    }

    /// Fails with every problem at once rather than one at a time.
    pub fn validated(self) -> Result<RunConfig, ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid { problems })
        }
    }

    /// Builds the refiner gateway and the judge voter panel. The judge spec
    /// falls back to the refiner's; voters share one judge gateway so rate
    /// limits and usage are accounted globally.
    pub fn build_backends(&self) -> Result<RunBackends, ConfigError> {
        let refiner_spec = self
            .backends
            .refiner
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid {
                problems: vec!["backends.refiner is required".to_string()],
            })?;
        let refiner = refiner_spec.build("refiner")?;
        let judge = match &self.backends.judge {
            Some(spec) => spec.build("judge")?,
            None => Arc::clone(&refiner),
        };
        let judges = vec![judge; self.judge.voters.max(1)];
        Ok(RunBackends { refiner, judges })
    }

    /// The configuration exactly as a run manifest records it.
    pub fn manifest_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("a config value always serializes")
    }
}

/// The gateways a run talks through.
#[derive(Debug)]
pub struct RunBackends {
    pub refiner: Arc<Gateway>,
    /// One entry per voter; entries may alias the same gateway.
    pub judges: Vec<Arc<Gateway>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CallRequest, CallTag};

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    #[test]
    fn minimal_config_fills_every_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        write(&path, "");
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.seed, 0);
        assert_eq!(config.parallelism, 1);
        assert_eq!(config.judge.voters, 1);
        assert_eq!(config.loop_settings, LoopSettings::default());
        assert!(config.problems().is_empty());
    }

    #[test]
    fn full_config_round_trips_every_section() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        write(
            &path,
            r#"
seed = 7
parallelism = 4
input = "data/questions.jsonl"
out = "runs/demo"
mode = "curate"

[loop]
max_refinements = 6
refine_temperature = 0.9
length_penalty_per_token = 0.25
debias = false
disagreement_policy = "rejudge_once_then_incumbent"

[judge]
voters = 3

[backends.refiner]
kind = "http"
base_url = "https://api.example.com"
model = "refiner-large"
auth_env = "REFINER_API_KEY"
requests_per_minute = 120
retry_limit = 2

[backends.judge]
kind = "scripted"
script = "scripts/judge.json"
strict = false
"#,
        );
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.mode, Some(RunMode::Curate));
        assert_eq!(config.loop_settings.max_refinements, 6);
        assert_eq!(config.loop_settings.refine_temperature, 0.9);
        assert!(!config.loop_settings.debias);
        assert_eq!(config.judge.voters, 3);
        let refiner = config.backends.refiner.as_ref().unwrap();
        assert_eq!(refiner.kind, BackendKind::Http);
        assert_eq!(refiner.auth_env.as_deref(), Some("REFINER_API_KEY"));
        assert_eq!(refiner.retry_limit, Some(2));
        // Relative paths are resolved against the config's directory.
        assert_eq!(
            config.input.as_deref(),
            Some(dir.path().join("data/questions.jsonl")).as_deref()
        );
        let judge = config.backends.judge.as_ref().unwrap();
        assert_eq!(
            judge.script.as_deref(),
            Some(dir.path().join("scripts/judge.json")).as_deref()
        );
        assert_eq!(judge.strict, Some(false));
        assert!(config.problems().is_empty(), "{:?}", config.problems());
    }

    #[test]
    fn unknown_keys_are_rejected_not_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        write(&path, "sede = 7\n");
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
        write(&path, "[loop]\nmax_refinments = 3\n");
        assert!(
            RunConfig::load(&path).is_err(),
            "typos inside sections must fail too"
        );
    }

    #[test]
    fn problems_catches_each_bad_field() {
        let mut config = RunConfig {
            parallelism: 0,
            ..RunConfig::default()
        };
        config.judge.voters = 2;
        config.loop_settings.best_of_n = 0;
        config.loop_settings.refine_temperature = 2.5;
        config.loop_settings.length_penalty_per_token = -1.0;
        config.backends.refiner = Some(BackendSpec {
            script: Some(PathBuf::from("x.json")),
            base_url: None,
            model: None,
            ..BackendSpec::scripted("unused")
        });
        config.backends.refiner.as_mut().unwrap().kind = BackendKind::Http;
        config.backends.judge = Some(BackendSpec {
            model: Some("m".to_string()),
            script: None,
            ..BackendSpec::scripted("unused")
        });
        let problems = config.problems();
        let text = problems.join("\n");
        for needle in [
            "parallelism must be at least 1",
            "judge.voters must be odd",
            "loop.best_of_n must be at least 1",
            "loop.refine_temperature must be within [0, 2]",
            "length_penalty_per_token must be finite and non-negative",
            "backends.refiner: http backends need base_url",
            "backends.refiner: http backends need model",
            "backends.refiner: script only applies to scripted backends",
            "backends.judge: scripted backends need script",
            "backends.judge: model only applies to http backends",
        ] {
            assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
        }
        assert!(matches!(
            config.validated(),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn builds_scripted_gateways_and_shares_the_judge_panel() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("all.json");
        write(
            &script,
            r#"{"strict": false, "rules": [{"tag": "judge", "response": "Preferred: A"}]}"#,
        );
        let mut config = RunConfig::default();
        config.backends.refiner = Some(BackendSpec::scripted(&script));
        config.judge.voters = 3;
        let backends = config.build_backends().unwrap();
        assert_eq!(backends.judges.len(), 3);
        assert!(Arc::ptr_eq(&backends.judges[0], &backends.judges[2]));
        assert!(
            Arc::ptr_eq(&backends.refiner, &backends.judges[0]),
            "judge spec falls back to the refiner backend"
        );
        let response = backends.judges[0]
            .call(&CallRequest::new(CallTag::Judge, "anything", 0.0))
            .unwrap();
        assert_eq!(response.text, "Preferred: A");
    }

    #[test]
    fn strict_override_beats_the_script_file() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("rules.json");
        write(&script, r#"{"strict": false, "rules": []}"#);
        let mut spec = BackendSpec::scripted(&script);
        spec.strict = Some(true);
        let gateway = spec.build("refiner").unwrap();
        let err = gateway
            .call(&CallRequest::new(CallTag::Refine, "no rule", 0.0))
            .unwrap_err();
        assert!(err.to_string().contains("no script rule"), "{err}");
    }

    #[test]
    fn missing_refiner_backend_is_reported_at_build_time() {
        let config = RunConfig::default();
        let err = config.build_backends().unwrap_err();
        assert!(
            err.to_string().contains("backends.refiner is required"),
            "{err}"
        );
    }

    #[test]
    fn manifest_value_never_contains_credentials() {
        let mut config = RunConfig::default();
        config.backends.refiner = Some(BackendSpec {
            kind: BackendKind::Http,
            base_url: Some("https://api.example.com".to_string()),
            model: Some("m".to_string()),
            auth_env: Some("SOME_KEY_VAR".to_string()),
            ..BackendSpec::scripted("unused")
        });
        config.backends.refiner.as_mut().unwrap().script = None;
        std::env::set_var("SOME_KEY_VAR", "super-secret-value");
        let json = config.manifest_value().to_string();
        assert!(
            json.contains("SOME_KEY_VAR"),
            "the variable NAME is recorded"
        );
        assert!(!json.contains("super-secret-value"), "the value never is");
        std::env::remove_var("SOME_KEY_VAR");
    }
}
