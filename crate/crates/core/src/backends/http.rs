use std::time::Duration;

use serde_json::Value;

use super::{BackendConfig, Transport};
use crate::error::{Error, Result};

/// Blocking HTTP transport posting JSON to a chat-completions endpoint.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let url = cfg
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config(format!("backend `{}` has no endpoint", cfg.model)))?;
        let token = match &cfg.credential_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Config(format!("credential variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s.max(1)))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { client, url, token })
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &Value) -> std::result::Result<(u16, String), String> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{completion_body, Client, Message};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    // Minimal one-request-per-connection server returning scripted responses in order.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn posts_openai_style_body_with_retry() {
        let (url, handle) = serve(vec![(500, "oops".into()), (200, completion_body("<scene> a <camera> b"))]);
        let cfg = BackendConfig {
            model: "vlm".into(),
            endpoint: Some(url),
            backoff_ms: 1,
            ..Default::default()
        };
        let client = Client::http(cfg, None).unwrap();
        let req = client.request(vec![Message::user("hi")], 0);
        let reply = client.chat(&req).unwrap();
        assert_eq!(reply.text, "<scene> a <camera> b");
        let bodies = handle.join().unwrap();
        assert_eq!(bodies.len(), 2);
        let sent: Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "vlm");
        assert_eq!(sent["messages"][0]["content"], "hi");
    }

    #[test]
    fn missing_credential_is_config_error() {
        let cfg = BackendConfig {
            endpoint: Some("http://127.0.0.1:9/".into()),
            credential_env: Some("SNS_TEST_SURELY_UNSET_VAR".into()),
            ..Default::default()
        };
        assert!(matches!(HttpTransport::from_config(&cfg), Err(Error::Config(_))));
    }
}
