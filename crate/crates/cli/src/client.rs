//! Blocking client for the HTTP API.

use reqwest::blocking::Client as Http;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {message}")]
    Transport { url: String, message: String },
    #[error("{status} {code}: {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
        body: Value,
    },
}

impl ClientError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Api { status: 400, .. } => 2,
            ClientError::Api { status: 404, .. } => 3,
            ClientError::Api { status: 409, .. } => 4,
            ClientError::Api { status: 401 | 403, .. } => 5,
            _ => 1,
        }
    }
}

pub struct Client {
    base: String,
    token: Option<String>,
    http: Http,
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            token,
            http: Http::new(),
        }
    }

    fn send(&self, method: reqwest::Method, path: &str, body: Option<String>) -> Result<Value, ClientError> {
        let url = format!("{}{path}", self.base);
        let mut req = self.http.request(method, &url);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.body(b);
        }
        let transport = |e: reqwest::Error| ClientError::Transport {
            url: url.clone(),
            message: e.to_string(),
        };
        let resp = req.send().map_err(transport)?;
        let status = resp.status().as_u16();
        let body: Value = resp.json().map_err(transport)?;
        if (200..300).contains(&status) {
            return Ok(body);
        }
        let field = |k: &str| body["error"][k].as_str().unwrap_or_default().to_string();
        Err(ClientError::Api {
            status,
            code: field("code"),
            message: field("message"),
            body,
        })
    }

    pub fn get(&self, path: &str) -> Result<Value, ClientError> {
        self.send(reqwest::Method::GET, path, None)
    }

    pub fn post(&self, path: &str, body: String) -> Result<Value, ClientError> {
        self.send(reqwest::Method::POST, path, Some(body))
    }

    pub fn delete(&self, path: &str) -> Result<Value, ClientError> {
        self.send(reqwest::Method::DELETE, path, None)
    }
}
