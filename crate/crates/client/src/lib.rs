//! Typed client for the blind-test HTTP API.

use reqwest::{RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;

use inkrestore::blindtest::wire::{Answer, AnswerRecorded, CreateSession, ErrorBody, ItemList, SessionCreated};
use inkrestore::blindtest::{BlindReport, Judgment, SessionView};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error status.
    #[error("{status}: {} ({})", body.message, body.error)]
    Api { status: StatusCode, body: ErrorBody },

    #[error("transport error: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            token: None,
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    fn req(&self, method: reqwest::Method, path: &str) -> RequestBuilder {
        let r = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    async fn send(r: RequestBuilder) -> Result<reqwest::Response> {
        let resp = r.send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: "http".into(),
            message: text,
        });
        Err(ClientError::Api { status, body })
    }

    async fn json<T: DeserializeOwned>(r: RequestBuilder) -> Result<T> {
        Ok(Self::send(r).await?.json().await?)
    }

    pub async fn create_session(&self, req: &CreateSession) -> Result<SessionCreated> {
        Self::json(self.req(reqwest::Method::POST, "/sessions").json(req)).await
    }

    pub async fn session(&self, session_id: &str) -> Result<SessionView> {
        Self::json(self.req(reqwest::Method::GET, &format!("/sessions/{session_id}"))).await
    }

    pub async fn items(&self, session_id: &str) -> Result<ItemList> {
        Self::json(self.req(reqwest::Method::GET, &format!("/sessions/{session_id}/items"))).await
    }

    /// Encoded image bytes (PNG) of one item.
    pub async fn image(&self, item_id: &str) -> Result<Vec<u8>> {
        let resp = Self::send(self.req(reqwest::Method::GET, &format!("/items/{item_id}/image"))).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn answer(&self, item_id: &str, answer: Judgment) -> Result<AnswerRecorded> {
        let path = format!("/items/{item_id}/answer");
        Self::json(self.req(reqwest::Method::POST, &path).json(&Answer { answer })).await
    }

    pub async fn report(&self, session_id: &str, partial: bool) -> Result<BlindReport> {
        let path = format!("/sessions/{session_id}/report?partial={partial}");
        Self::json(self.req(reqwest::Method::GET, &path)).await
    }
}
