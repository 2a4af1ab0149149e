//! HTTP provider speaking the OpenAI-style chat-completions protocol.
//!
//! Credentials come only from the environment — the config names the
//! variable, never the key itself — so run configs stay shareable.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{estimated_tokens, Backend, BackendError, CallRequest, CallResponse};

/// Connection settings for one endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Scheme and host, e.g. `https://api.example.com`.
    pub base_url: String,
    /// Request path; joined onto `base_url`.
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// must never appear in configuration files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_path() -> String {
    "/v1/chat/completions".to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    label: String,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // api_key is withheld so debug output can never leak a credential.
        f.debug_struct("HttpBackend")
            .field("url", &self.url)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    /// Builds a client, reading the API key from the configured environment
    /// variable. A named-but-unset variable is a configuration error.
    pub fn new(config: &HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = match &config.auth_env {
            Some(var) => match std::env::var(var) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => {
                    return Err(BackendError::Fatal {
                        message: format!("environment variable {var} is unset or empty"),
                    })
                }
            },
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal {
                message: format!("cannot build client: {e}"),
            })?;
        let url = format!("{}{}", config.base_url.trim_end_matches('/'), config.path);
        Ok(HttpBackend {
            client,
            url,
            model: config.model.clone(),
            api_key,
            label: format!("http:{}", config.model),
        })
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &CallRequest) -> Result<CallResponse, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: &request.user,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut http = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| BackendError::Transient {
            status: None,
            message: format!("request failed: {e}"),
        })?;

        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient {
                status: Some(status.as_u16()),
                message: format!("endpoint returned {status}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Fatal {
                message: format!("endpoint returned {status}"),
            });
        }

        let parsed: ChatResponse = response.json().map_err(|e| BackendError::Fatal {
            message: format!("malformed completion payload: {e}"),
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or(BackendError::Refusal {
                message: "completion carried no choices".to_string(),
            })?;
        let text = choice.message.content.unwrap_or_default();
        if text.is_empty() || choice.finish_reason.as_deref() == Some("content_filter") {
            return Err(BackendError::Refusal {
                message: format!(
                    "empty completion (finish_reason {:?})",
                    choice.finish_reason.as_deref().unwrap_or("unknown")
                ),
            });
        }
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (estimated_tokens(&request.user), estimated_tokens(&text)),
        };
        Ok(CallResponse {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }

    fn name(&self) -> &str {
        &self.label
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CallTag, Gateway, GatewayError, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal HTTP/1.1 server: each connection gets the next scripted
    /// (status, body) pair. Returns the bound address and a request counter.
    fn spawn_server(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_in_thread = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = match listener.accept() {
                    Ok(conn) => conn,
                    Err(_) => return,
                };
                hits_in_thread.fetch_add(1, Ordering::SeqCst);
                serve_one(stream, status, &body);
            }
        });
        (addr, hits)
    }

    fn serve_one(stream: TcpStream, status: u16, body: &str) {
        let mut reader = BufReader::new(stream);
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(rest) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = rest.trim().parse().unwrap_or(0);
            }
        }
        let mut request_body = vec![0u8; content_length];
        let _ = reader.read_exact(&mut request_body);
        let reason = match status {
            200 => "OK",
            429 => "Too Many Requests",
            500 => "Internal Server Error",
            _ => "Status",
        };
        let response = format!(
            "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        let mut stream = reader.into_inner();
        let _ = stream.write_all(response.as_bytes());
        let _ = stream.flush();
    }

    fn completion_json(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 5}
        })
        .to_string()
    }

    fn backend_for(addr: &str) -> HttpBackend {
        HttpBackend::new(&HttpBackendConfig {
            base_url: addr.to_string(),
            path: "/v1/chat/completions".to_string(),
            model: "test-model".to_string(),
            auth_env: None,
            timeout_secs: 5,
        })
        .unwrap()
    }

    #[test]
    fn gateway_retries_through_rate_limit_responses() {
        let (addr, hits) = spawn_server(vec![
            (429, String::new()),
            (429, String::new()),
            (200, completion_json("recovered")),
        ]);
        let gateway = Gateway::new(
            Arc::new(backend_for(&addr)),
            RetryPolicy::immediate(5),
            None,
        )
        .with_sleeper(|_| {});
        let response = gateway
            .call(&CallRequest::new(CallTag::Refine, "rewrite it", 0.7))
            .unwrap();
        assert_eq!(response.text, "recovered");
        assert_eq!(response.prompt_tokens, 12);
        assert_eq!(response.completion_tokens, 5);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        let report = gateway.usage_report();
        assert_eq!(report.calls(CallTag::Refine), 1);
        assert_eq!(report.retries(CallTag::Refine), 2);
    }

    #[test]
    fn server_errors_exhaust_into_gateway_error() {
        let responses = vec![(500, String::new()); 3];
        let (addr, hits) = spawn_server(responses);
        let gateway = Gateway::new(
            Arc::new(backend_for(&addr)),
            RetryPolicy::immediate(2),
            None,
        )
        .with_sleeper(|_| {});
        let err = gateway
            .call(&CallRequest::new(CallTag::Judge, "pick", 0.0))
            .unwrap_err();
        match err {
            GatewayError::Exhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error: {other}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn empty_completion_is_a_refusal() {
        let body = serde_json::json!({
            "choices": [{"message": {"content": ""}, "finish_reason": "content_filter"}]
        })
        .to_string();
        let (addr, _) = spawn_server(vec![(200, body)]);
        let backend = backend_for(&addr);
        let err = backend
            .call(&CallRequest::new(CallTag::ZeroShot, "hello", 0.7))
            .unwrap_err();
        assert!(matches!(err, BackendError::Refusal { .. }), "{err}");
    }

    #[test]
    fn missing_usage_falls_back_to_token_estimates() {
        let body = serde_json::json!({
            "choices": [{"message": {"content": "four words exactly here"}}]
        })
        .to_string();
        let (addr, _) = spawn_server(vec![(200, body)]);
        let backend = backend_for(&addr);
        let response = backend
            .call(&CallRequest::new(CallTag::ZeroShot, "two words", 0.7))
            .unwrap();
        assert_eq!(response.prompt_tokens, 2);
        assert_eq!(response.completion_tokens, 4);
    }

    #[test]
    fn named_but_unset_auth_env_is_fatal() {
        let err = HttpBackend::new(&HttpBackendConfig {
            base_url: "http://127.0.0.1:1".to_string(),
            path: default_path(),
            model: "m".to_string(),
            auth_env: Some("PREFCHAIN_TEST_KEY_THAT_IS_NOT_SET".to_string()),
            timeout_secs: 1,
        })
        .unwrap_err();
        assert!(matches!(err, BackendError::Fatal { .. }), "{err}");
    }

    #[test]
    fn non_retryable_status_is_fatal() {
        let (addr, _) = spawn_server(vec![(404, String::new())]);
        let backend = backend_for(&addr);
        let err = backend
            .call(&CallRequest::new(CallTag::Judge, "q", 0.0))
            .unwrap_err();
        assert!(matches!(err, BackendError::Fatal { .. }), "{err}");
    }
}
