//! HTTP client for completion-style JSON servers.
//!
//! Request body: `{model, prompt, max_tokens, logprobs: true}`. The response is
//! read as `choices[0].text`, `choices[0].logprobs.token_logprobs` and
//! `usage.completion_tokens`, all but the text being optional.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, GenerationRequest, GenerationResult};
use crate::error::{Error, Result};
use crate::Tokens;

fn request_body(req: &GenerationRequest) -> Value {
    json!({
        "model": req.model_id,
        "prompt": req.prompt,
        "max_tokens": req.max_tokens,
        "logprobs": true,
        "seed": req.seed,
    })
}

fn map_send_error(err: reqwest::Error, timeout: Duration) -> Error {
    if err.is_timeout() {
        Error::Timeout(timeout.as_secs_f64())
    } else if err.is_decode() || err.is_body() {
        Error::Protocol(err.to_string())
    } else {
        Error::Transport(err.to_string())
    }
}

/// Parses a completion response; `wall_time_s` is filled in by the caller.
pub(crate) fn parse_response(body: &Value) -> Result<GenerationResult> {
    let choice = body
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| Error::Protocol("response has no choices".into()))?;
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Protocol("choice has no text".into()))?
        .to_string();
    let logprobs = match choice.get("logprobs").and_then(|l| l.get("token_logprobs")) {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    Value::Null => {}
                    v => {
                        let lp = v.as_f64().ok_or_else(|| Error::Protocol("non-numeric logprob".into()))?;
                        if lp.is_nan() || lp > 0.0 {
                            return Err(Error::Protocol(format!("log-probability {lp} is not <= 0")));
                        }
                        out.push(lp);
                    }
                }
            }
            Some(out)
        }
        Some(_) => return Err(Error::Protocol("token_logprobs is not an array".into())),
    };
    let generated_tokens = body
        .get("usage")
        .and_then(|u| u.get("completion_tokens"))
        .and_then(Value::as_u64)
        .map(|n| n as Tokens)
        .or_else(|| logprobs.as_ref().map(|l| l.len() as Tokens))
        .unwrap_or_else(|| text.split_whitespace().count() as Tokens);
    let degraded = logprobs.as_ref().is_none_or(Vec::is_empty);
    Ok(GenerationResult {
        text,
        token_logprobs: logprobs.unwrap_or_default(),
        generated_tokens,
        wall_time_s: 0.0,
        degraded,
    })
}

fn complete_with(client: &reqwest::blocking::Client, req: &GenerationRequest, endpoint: &str, timeout: Duration) -> Result<GenerationResult> {
    let start = Instant::now();
    let resp = client
        .post(endpoint)
        .timeout(timeout)
        .json(&request_body(req))
        .send()
        .map_err(|e| map_send_error(e, timeout))?;
    let status = resp.status();
    if status.is_server_error() {
        return Err(Error::Transport(format!("server returned {status}")));
    }
    if !status.is_success() {
        return Err(Error::Protocol(format!("server returned {status}")));
    }
    let body: Value = resp.json().map_err(|e| map_send_error(e, timeout))?;
    let mut result = parse_response(&body)?;
    result.wall_time_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Sends one completion request and waits at most `timeout_s` for the reply.
pub fn remote_complete(req: &GenerationRequest, endpoint: &str, timeout_s: f64) -> Result<GenerationResult> {
    if !(timeout_s.is_finite() && timeout_s > 0.0) {
        return Err(Error::Config("timeout must be positive".into()));
    }
    let client = reqwest::blocking::Client::builder()
        .build()
        .map_err(|e| Error::Transport(e.to_string()))?;
    complete_with(&client, req, endpoint, Duration::from_secs_f64(timeout_s))
}

/// Remote backend; `generate_batch` keeps all requests in flight at once.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, timeout_s: f64) -> Result<Self> {
        if !(timeout_s.is_finite() && timeout_s > 0.0) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(RemoteBackend { endpoint: endpoint.into(), timeout: Duration::from_secs_f64(timeout_s), client })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GenerationResult>> {
        Ok(vec![complete_with(&self.client, req, &self.endpoint, self.timeout)?])
    }

    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Result<Vec<Vec<GenerationResult>>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = reqs.iter().map(|r| s.spawn(move || self.generate(r))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("request thread panicked".into()))))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Role;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves `count` requests, replying with `body` after `delay`. Returns the endpoint URL.
    fn stub(body: &'static str, delay: Duration, count: usize) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut seen = Vec::new();
            for stream in listener.incoming().take(count) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                thread::sleep(delay);
                let reply = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                let _ = stream.write_all(reply.as_bytes());
            }
            seen
        });
        (url, handle)
    }

    fn req() -> GenerationRequest {
        GenerationRequest { prompt: "hello".into(), max_tokens: 8, role: Role::Expansion, seed: 1, model_id: "tiny".into() }
    }

    #[test]
    fn parses_fixture() {
        let (url, h) = stub(
            r#"{"choices":[{"text":"fixed answer text","logprobs":{"token_logprobs":[-0.1,-0.2,null,-0.3]}}],"usage":{"completion_tokens":3}}"#,
            Duration::ZERO,
            1,
        );
        let r = remote_complete(&req(), &url, 5.0).unwrap();
        assert_eq!(r.text, "fixed answer text");
        assert_eq!(r.token_logprobs, vec![-0.1, -0.2, -0.3]);
        assert_eq!(r.generated_tokens, 3);
        assert!(!r.degraded);
        assert!(r.wall_time_s > 0.0);
        let sent: Value = serde_json::from_str(&h.join().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "tiny");
        assert_eq!(sent["prompt"], "hello");
        assert_eq!(sent["max_tokens"], 8);
        assert_eq!(sent["logprobs"], true);
    }

    #[test]
    fn timeout_is_retryable() {
        let (url, _h) = stub(r#"{"choices":[{"text":"x"}]}"#, Duration::from_millis(800), 1);
        let err = remote_complete(&req(), &url, 0.2).unwrap_err();
        assert!(matches!(err, Error::Timeout(_)), "{err:?}");
        assert!(err.is_retryable());
    }

    #[test]
    fn missing_logprobs_degrades() {
        let (url, _h) = stub(r#"{"choices":[{"text":"a b c"}]}"#, Duration::ZERO, 1);
        let r = remote_complete(&req(), &url, 5.0).unwrap();
        assert!(r.degraded);
        assert!(r.token_logprobs.is_empty());
        assert_eq!(r.generated_tokens, 3);
        assert!(!r.into_candidate("tiny", 0).has_logprobs());
    }

    #[test]
    fn malformed_is_protocol_error() {
        let (url, _h) = stub(r#"{"nothing":true}"#, Duration::ZERO, 1);
        let err = remote_complete(&req(), &url, 5.0).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(!err.is_retryable());
    }

    #[test]
    fn unreachable_is_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = remote_complete(&req(), &format!("http://127.0.0.1:{port}/"), 2.0).unwrap_err();
        assert!(err.is_retryable(), "{err:?}");
    }

    #[test]
    fn batch_runs_requests_concurrently() {
        let (url, _h) = stub(r#"{"choices":[{"text":"ok","logprobs":{"token_logprobs":[-0.5]}}]}"#, Duration::from_millis(300), 4);
        let backend = RemoteBackend::new(url, 5.0).unwrap();
        let start = Instant::now();
        let out = backend.generate_batch(&vec![req(); 4]).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| r[0].text == "ok"));
        // the stub serves one connection at a time, so this only checks results, not overlap
        assert!(start.elapsed() >= Duration::from_millis(300));
    }

    #[test]
    fn rejects_positive_logprob() {
        let v: Value = serde_json::from_str(r#"{"choices":[{"text":"a","logprobs":{"token_logprobs":[0.5]}}]}"#).unwrap();
        assert!(matches!(parse_response(&v), Err(Error::Protocol(_))));
    }
}
