//! Blocking client for the control-plane API.

use std::collections::{BTreeMap, BTreeSet};

use reqwest::blocking::{multipart, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use thiserror::Error;

use edgetier::control::{ActionOutcome, AgentRow, Placement, TaskAction, TaskFilter, TaskRow};
use edgetier::domain::{AttributeConstraint, TaskId};
use edgetier::executor::TaskLogs;

use crate::api::{ActionBody, ErrorBody, Submitted, REQUEST_ID_HEADER};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("{status}: {message}")]
    Api { status: u16, message: String },
    #[error("could not encode request: {0}")]
    Encode(#[from] serde_json::Error),
}

pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl Client {
    /// `addr` may omit the scheme; plain HTTP is assumed.
    pub fn new(addr: &str, token: Option<String>) -> Self {
        let base = if addr.contains("://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", addr.trim_end_matches('/'))
        };
        Self {
            base,
            token,
            http: reqwest::blocking::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder, request_id: Option<&str>) -> Result<T, ClientError> {
        let mut req = req;
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        if let Some(id) = request_id {
            req = req.header(REQUEST_ID_HEADER, id);
        }
        decode(req.send()?)
    }

    pub fn deploy(
        &self,
        manifest: &str,
        archive: Option<Vec<u8>>,
        placement: &Placement,
        request_id: Option<&str>,
    ) -> Result<Vec<TaskId>, ClientError> {
        let mut form = multipart::Form::new()
            .text("manifest", manifest.to_string())
            .text("placement", serde_json::to_string(placement)?);
        if let Some(bytes) = archive {
            form = form.part("archive", multipart::Part::bytes(bytes).file_name("archive.tar.gz"));
        }
        let done: Submitted = self.send(self.http.post(self.url("/tasks")).multipart(form), request_id)?;
        Ok(done.task_ids)
    }

    pub fn tasks(&self, filter: &TaskFilter) -> Result<Vec<TaskRow>, ClientError> {
        self.send(self.http.get(self.url("/tasks")).query(filter), None)
    }

    pub fn action(&self, task: &TaskId, action: TaskAction, request_id: Option<&str>) -> Result<ActionOutcome, ClientError> {
        let url = self.url(&format!("/tasks/{task}/actions"));
        self.send(self.http.post(url).json(&ActionBody { action }), request_id)
    }

    pub fn logs(&self, task: &TaskId) -> Result<TaskLogs, ClientError> {
        self.send(self.http.get(self.url(&format!("/tasks/{task}/logs"))), None)
    }

    pub fn agents(&self) -> Result<Vec<AgentRow>, ClientError> {
        self.send(self.http.get(self.url("/agents")), None)
    }

    pub fn attributes(
        &self,
        filter: &[AttributeConstraint],
    ) -> Result<BTreeMap<String, BTreeSet<String>>, ClientError> {
        let mut req = self.http.get(self.url("/attributes"));
        if !filter.is_empty() {
            req = req.query(&[("filter", serde_json::to_string(filter)?)]);
        }
        self.send(req, None)
    }
}

fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, ClientError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json()?);
    }
    let text = resp.text().unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
    Err(ClientError::Api {
        status: status.as_u16(),
        message,
    })
}
