//! HTTP backends for hosted multimodal models.
//!
//! Two wire dialects are supported: an OpenAI-style chat-completions API and
//! a Gemini-style generateContent API. Request bodies and response parsing
//! are plain functions so they can be checked without a network.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, GatewayError, GatewayRequest, ImagePart, RequestKind, EMBEDDING_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dialect {
    ChatCompletions,
    GenerateContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub dialect: Dialect,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub model: String,
    #[serde(default)]
    pub embed_model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

pub struct RemoteBackend {
    config: RemoteConfig,
    backend_id: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    /// Reads the key from the configured environment variable.
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::InvalidRequest(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: RemoteConfig, api_key: String) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let backend_id = format!(
            "{}:{}",
            match config.dialect {
                Dialect::ChatCompletions => "chat",
                Dialect::GenerateContent => "gemini",
            },
            config.model
        );
        Ok(RemoteBackend {
            config,
            backend_id,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut builder = self.client.post(url).json(body);
        builder = match self.config.dialect {
            Dialect::ChatCompletions => builder.bearer_auth(&self.api_key),
            Dialect::GenerateContent => builder.header("x-goog-api-key", &self.api_key),
        };
        let resp = builder
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if let Some(err) = status_error(status, &text) {
            return Err(err);
        }
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::BadResponse(format!("response is not JSON: {e}")))
    }
}

/// Maps an HTTP status to the gateway error taxonomy; `None` on success.
pub fn status_error(status: u16, body: &str) -> Option<GatewayError> {
    let snippet: String = body.chars().take(200).collect();
    match status {
        200..=299 => None,
        429 => Some(GatewayError::RateLimited(snippet)),
        500..=599 => Some(GatewayError::Transport(format!("HTTP {status}: {snippet}"))),
        _ => Some(GatewayError::BadResponse(format!(
            "HTTP {status}: {snippet}"
        ))),
    }
}

/// The user-visible text of a request: the prompt for describe/classify/embed,
/// the rendered meta-prompt for reflect/modify.
fn request_text(req: &GatewayRequest) -> &str {
    &req.text_parts[0]
}

fn encoded_image(req: &GatewayRequest) -> Result<Option<(&str, &str)>, GatewayError> {
    match &req.image_part {
        None => Ok(None),
        Some(ImagePart::Encoded(e)) => Ok(Some((e.media_type.as_str(), e.bytes_b64.as_str()))),
        Some(ImagePart::Synthetic { sample_id, .. }) => Err(GatewayError::InvalidRequest(format!(
            "synthetic sample {sample_id} cannot be sent to a remote model"
        ))),
    }
}

pub fn chat_body(model: &str, req: &GatewayRequest) -> Result<Value, GatewayError> {
    let mut content = vec![json!({"type": "text", "text": request_text(req)})];
    if let Some((media, b64)) = encoded_image(req)? {
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:{media};base64,{b64}")}
        }));
    }
    Ok(json!({
        "model": model,
        "temperature": req.params.temperature,
        "max_tokens": req.params.max_output_tokens,
        "messages": [{"role": "user", "content": content}]
    }))
}

pub fn gemini_body(req: &GatewayRequest) -> Result<Value, GatewayError> {
    let mut parts = vec![json!({"text": request_text(req)})];
    if let Some((media, b64)) = encoded_image(req)? {
        parts.push(json!({"inline_data": {"mime_type": media, "data": b64}}));
    }
    Ok(json!({
        "contents": [{"role": "user", "parts": parts}],
        "generationConfig": {
            "temperature": req.params.temperature,
            "maxOutputTokens": req.params.max_output_tokens
        }
    }))
}

pub fn chat_embed_body(model: &str, text: &str) -> Value {
    json!({"model": model, "input": text, "dimensions": EMBEDDING_DIM})
}

pub fn gemini_embed_body(model: &str, text: &str) -> Value {
    json!({
        "model": format!("models/{model}"),
        "content": {"parts": [{"text": text}]},
        "outputDimensionality": EMBEDDING_DIM
    })
}

fn bad(what: &str) -> GatewayError {
    GatewayError::BadResponse(format!("response is missing {what}"))
}

pub fn parse_chat(v: &Value) -> Result<String, GatewayError> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| bad("choices[0].message.content"))
}

pub fn parse_gemini(v: &Value) -> Result<String, GatewayError> {
    let parts = v
        .pointer("/candidates/0/content/parts")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("candidates[0].content.parts"))?;
    let text: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
    if text.is_empty() {
        return Err(bad("text parts"));
    }
    Ok(text)
}

fn float_array(v: Option<&Value>, what: &str) -> Result<Vec<f64>, GatewayError> {
    v.and_then(Value::as_array)
        .ok_or_else(|| bad(what))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| bad(what)))
        .collect()
}

pub fn parse_chat_embedding(v: &Value) -> Result<Vec<f64>, GatewayError> {
    float_array(v.pointer("/data/0/embedding"), "data[0].embedding")
}

pub fn parse_gemini_embedding(v: &Value) -> Result<Vec<f64>, GatewayError> {
    float_array(v.pointer("/embedding/values"), "embedding.values")
}

impl Backend for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn dispatch(&self, req: &GatewayRequest) -> Result<String, GatewayError> {
        let base = self.config.base_url.trim_end_matches('/');
        let model = &self.config.model;
        let embed_model = self.config.embed_model.as_deref().unwrap_or(model);
        match (self.config.dialect, req.kind) {
            (Dialect::ChatCompletions, RequestKind::Embed) => {
                let v = self.post(
                    &format!("{base}/embeddings"),
                    &chat_embed_body(embed_model, request_text(req)),
                )?;
                Ok(serde_json::to_string(&parse_chat_embedding(&v)?).expect("floats serialize"))
            }
            (Dialect::GenerateContent, RequestKind::Embed) => {
                let v = self.post(
                    &format!("{base}/models/{embed_model}:embedContent"),
                    &gemini_embed_body(embed_model, request_text(req)),
                )?;
                Ok(serde_json::to_string(&parse_gemini_embedding(&v)?).expect("floats serialize"))
            }
            (Dialect::ChatCompletions, _) => {
                let v = self.post(&format!("{base}/chat/completions"), &chat_body(model, req)?)?;
                parse_chat(&v)
            }
            (Dialect::GenerateContent, _) => {
                let v = self.post(
                    &format!("{base}/models/{model}:generateContent"),
                    &gemini_body(req)?,
                )?;
                parse_gemini(&v)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{EncodedImage, GenerationParams};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    fn describe_req() -> GatewayRequest {
        GatewayRequest::new(
            RequestKind::Describe,
            vec!["Describe the tissue.".into()],
            Some(ImagePart::Encoded(EncodedImage {
                media_type: "image/jpeg".into(),
                bytes_b64: "AAAA".into(),
                source_hash: "h".into(),
                width: 1,
                height: 1,
            })),
            GenerationParams::new("chat:m", 0.7),
        )
        .unwrap()
    }

    #[test]
    fn chat_body_shape() {
        let b = chat_body("m", &describe_req()).unwrap();
        assert_eq!(b["model"], "m");
        assert_eq!(b["temperature"], 0.7);
        let content = &b["messages"][0]["content"];
        assert_eq!(content[0]["text"], "Describe the tissue.");
        assert_eq!(
            content[1]["image_url"]["url"],
            "data:image/jpeg;base64,AAAA"
        );
    }

    #[test]
    fn gemini_body_shape() {
        let b = gemini_body(&describe_req()).unwrap();
        assert_eq!(b["contents"][0]["parts"][1]["inline_data"]["data"], "AAAA");
        assert_eq!(b["generationConfig"]["temperature"], 0.7);
        assert_eq!(gemini_embed_body("e", "x")["outputDimensionality"], 768);
        assert_eq!(chat_embed_body("e", "x")["dimensions"], 768);
    }

    #[test]
    fn synthetic_images_are_rejected() {
        let req = GatewayRequest::new(
            RequestKind::Classify,
            vec!["x".into()],
            Some(ImagePart::Synthetic {
                sample_id: "s".into(),
                source_hash: "h".into(),
            }),
            GenerationParams::new("chat:m", 0.0),
        )
        .unwrap();
        assert!(matches!(
            chat_body("m", &req),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn response_parsing() {
        let chat = json!({"choices": [{"message": {"content": "ANSWER: Normal"}}]});
        assert_eq!(parse_chat(&chat).unwrap(), "ANSWER: Normal");
        assert!(matches!(
            parse_chat(&json!({})),
            Err(GatewayError::BadResponse(_))
        ));
        let g = json!({"candidates": [{"content": {"parts": [{"text": "a"}, {"text": "b"}]}}]});
        assert_eq!(parse_gemini(&g).unwrap(), "ab");
        assert!(parse_gemini(&json!({"candidates": []})).is_err());
        assert_eq!(
            parse_chat_embedding(&json!({"data": [{"embedding": [1.0, 2.5]}]})).unwrap(),
            vec![1.0, 2.5]
        );
        assert_eq!(
            parse_gemini_embedding(&json!({"embedding": {"values": [0.5]}})).unwrap(),
            vec![0.5]
        );
    }

    #[test]
    fn status_mapping() {
        assert_eq!(status_error(200, ""), None);
        assert!(matches!(
            status_error(429, ""),
            Some(GatewayError::RateLimited(_))
        ));
        assert!(matches!(
            status_error(503, ""),
            Some(GatewayError::Transport(_))
        ));
        assert!(matches!(
            status_error(400, ""),
            Some(GatewayError::BadResponse(_))
        ));
        assert!(matches!(
            status_error(401, ""),
            Some(GatewayError::BadResponse(_))
        ));
    }

    /// Serves one canned response per connection and reports each request.
    fn mock_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line.to_ascii_lowercase().starts_with("content-length:") {
                        len = line[15..].trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((head, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    fn config(dialect: Dialect, base_url: String) -> RemoteConfig {
        RemoteConfig {
            dialect,
            base_url,
            api_key_env: "UNUSED".into(),
            model: "m".into(),
            embed_model: None,
            timeout_secs: 5,
        }
    }

    #[test]
    fn chat_round_trip_against_mock() {
        let (url, rx) = mock_server(vec![
            (
                200,
                json!({"choices": [{"message": {"content": "ANSWER: Invasive"}}]}).to_string(),
            ),
            (429, "{}".into()),
        ]);
        let b = RemoteBackend::with_key(config(Dialect::ChatCompletions, url), "sk-test".into())
            .unwrap();
        assert_eq!(b.dispatch(&describe_req()).unwrap(), "ANSWER: Invasive");
        let (head, body) = rx.recv().unwrap();
        assert!(head.starts_with("POST /chat/completions"));
        assert!(head
            .to_ascii_lowercase()
            .contains("authorization: bearer sk-test"));
        let body: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["model"], "m");
        assert!(matches!(
            b.dispatch(&describe_req()),
            Err(GatewayError::RateLimited(_))
        ));
    }

    #[test]
    fn gemini_round_trip_against_mock() {
        let values: Vec<f64> = (0..EMBEDDING_DIM).map(|i| i as f64).collect();
        let (url, rx) = mock_server(vec![
            (
                200,
                json!({"candidates": [{"content": {"parts": [{"text": "fine"}]}}]}).to_string(),
            ),
            (200, json!({"embedding": {"values": values}}).to_string()),
            (500, "oops".into()),
        ]);
        let b =
            RemoteBackend::with_key(config(Dialect::GenerateContent, url), "g-key".into()).unwrap();
        assert_eq!(b.dispatch(&describe_req()).unwrap(), "fine");
        let (head, _) = rx.recv().unwrap();
        assert!(head.starts_with("POST /models/m:generateContent"));
        assert!(head.to_ascii_lowercase().contains("x-goog-api-key: g-key"));
        let embed = GatewayRequest::new(
            RequestKind::Embed,
            vec!["stroma".into()],
            None,
            GenerationParams::new("gemini:m", 0.0),
        )
        .unwrap();
        let out: Vec<f64> = serde_json::from_str(&b.dispatch(&embed).unwrap()).unwrap();
        assert_eq!(out.len(), EMBEDDING_DIM);
        assert!(rx
            .recv()
            .unwrap()
            .0
            .starts_with("POST /models/m:embedContent"));
        assert!(matches!(
            b.dispatch(&describe_req()),
            Err(GatewayError::Transport(_))
        ));
    }

    #[test]
    fn missing_key_env_is_reported() {
        let mut c = config(Dialect::ChatCompletions, "http://127.0.0.1:9".into());
        c.api_key_env = "DESCPROMPT_DEFINITELY_UNSET_KEY".into();
        assert!(matches!(
            RemoteBackend::new(c),
            Err(GatewayError::InvalidRequest(_))
        ));
    }
}
