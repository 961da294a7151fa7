//! Async client for the simulation service. Request and response types are
//! the ones in `gepnet_core::service`.

use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use gepnet_core::channel::ConstellationJson;
use gepnet_core::complexity::ComplexityReport;
use gepnet_core::detectors::DetectionResult;
use gepnet_core::service::{ComplexityRequest, DetectRequest, ErrorBody, SimulateRequest, WeightsInfo};
use gepnet_core::sweep::SweepResult;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to service failed: {0}")]
    Transport(#[from] reqwest::Error),

    #[error("service returned {status}: {message}")]
    Api {
        status: StatusCode,
        message: String,
        exit_code: i32,
    },
}

impl ClientError {
    /// Exit code for the command line; transport failures count as I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Transport(_) => 3,
            ClientError::Api { exit_code, .. } => *exit_code,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let (message, exit_code) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => (body.error, body.exit_code),
            Err(_) => (text, if status.is_client_error() { 2 } else { 3 }),
        };
        Err(ClientError::Api {
            status,
            message,
            exit_code,
        })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(self.url(path)).json(body).send().await?;
        Self::decode(resp).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.http.get(self.url(path)).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<bool> {
        let resp = self.http.get(self.url("/healthz")).send().await?;
        Ok(resp.status().is_success())
    }

    /// Upload raw `GEPW` bytes; the returned id is used by later requests.
    pub async fn upload_weights(&self, bytes: Vec<u8>) -> Result<WeightsInfo> {
        let resp = self
            .http
            .post(self.url("/v1/weights"))
            .header("content-type", "application/octet-stream")
            .body(bytes)
            .send()
            .await?;
        Self::decode(resp).await
    }

    pub async fn weights_info(&self, id: &str) -> Result<WeightsInfo> {
        self.get(&format!("/v1/weights/{id}")).await
    }

    pub async fn constellation(&self, id: &str) -> Result<ConstellationJson> {
        self.get(&format!("/v1/weights/{id}/constellation")).await
    }

    pub async fn simulate(&self, req: &SimulateRequest) -> Result<SweepResult> {
        self.post("/v1/simulate", req).await
    }

    pub async fn detect(&self, req: &DetectRequest) -> Result<DetectionResult> {
        self.post("/v1/detect", req).await
    }

    pub async fn complexity(&self, req: &ComplexityRequest) -> Result<ComplexityReport> {
        self.post("/v1/complexity", req).await
    }
}
