use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatProvider, CompletionRequest, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_secs == 0 {
            return Err(GatewayError::InvalidRequest("provider timeout must be positive".into()));
        }
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(GatewayError::InvalidRequest("provider endpoint and model are required".into()));
        }
        Ok(())
    }
}

/// Chat-completions over HTTP with retry and exponential backoff on
/// transient failures (transport errors, timeouts, 429 and 5xx).
pub struct HttpProvider {
    config: ProviderConfig,
    agent: ureq::Agent,
    backoff_base: Duration,
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

enum Attempt {
    Retry(GatewayError),
    Fail(GatewayError),
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent, backoff_base: Duration::from_millis(250) })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn api_key(&self) -> Option<String> {
        self.config.api_key_env.as_deref().and_then(|name| std::env::var(name).ok())
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, Attempt> {
        let mut call = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = self.api_key() {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(request).map_err(|e| match e {
            ureq::Error::Timeout(_) => Attempt::Retry(GatewayError::Timeout(self.config.timeout_secs)),
            other => Attempt::Retry(GatewayError::Transport(other.to_string())),
        })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(GatewayError::Transport(e.to_string())))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(GatewayError::Transport(format!("HTTP {status}: {body}"))));
        }
        if status >= 400 {
            return Err(Attempt::Fail(GatewayError::Transport(format!("HTTP {status}: {body}"))));
        }
        let parsed: ChatCompletionResponse = serde_json::from_str(&body)
            .map_err(|e| Attempt::Fail(GatewayError::Transport(format!("malformed response: {e}"))))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fail(GatewayError::Transport("response has no message content".into())))
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut request = request.clone();
        if let Some(t) = self.config.temperature {
            request.temperature = t;
        }
        let mut attempt = 0;
        loop {
            match self.attempt(&request) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.config.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    log::warn!("provider call failed ({e}), retry {}", attempt + 1);
                    std::thread::sleep(self.backoff_base * 2u32.pow(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves canned HTTP responses in order, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let len = text[..head_end]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= head_end + 4 + len {
                            bodies.push(text[head_end + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (url, hits, handle)
    }

    fn request() -> CompletionRequest {
        CompletionRequest { model: "m".into(), temperature: 0.0, messages: vec![ChatMessage::system("s"), ChatMessage::user("u")] }
    }

    fn config(url: String) -> ProviderConfig {
        ProviderConfig { endpoint: url, model: "m".into(), timeout_secs: 5, max_retries: 2, temperature: None, api_key_env: None }
    }

    #[test]
    fn sends_chat_completion_and_parses_reply() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#.to_string();
        let (url, _, handle) = serve(vec![(200, ok)]);
        let p = HttpProvider::new(config(url)).unwrap();
        assert_eq!(p.complete(&request()).unwrap(), "hello");
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn retries_server_errors() {
        let ok = r#"{"choices":[{"message":{"content":"fine"}}]}"#.to_string();
        let (url, hits, handle) = serve(vec![(503, "busy".into()), (200, ok)]);
        let p = HttpProvider::new(config(url)).unwrap().with_backoff_base(Duration::from_millis(1));
        assert_eq!(p.complete(&request()).unwrap(), "fine");
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, hits, handle) = serve(vec![(400, "bad".into())]);
        let p = HttpProvider::new(config(url)).unwrap().with_backoff_base(Duration::from_millis(1));
        assert!(matches!(p.complete(&request()), Err(GatewayError::Transport(_))));
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn zero_timeout_rejected() {
        let mut c = config("http://x".into());
        c.timeout_secs = 0;
        assert!(HttpProvider::new(c).is_err());
    }
}
