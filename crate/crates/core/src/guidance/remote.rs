//! HTTP score provider and a reference echo server speaking the same frames.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::provider::{ScoreProvider, ScoreRequest, ScoreResponse};
use super::wire::{self, Frame, KIND_REQUEST};
use crate::error::{Error, Result};

pub const SCORE_PATH: &str = "/v1/score";
pub const DEFAULT_RETRIES: usize = 3;

pub struct RemoteProvider {
    url: String,
    agent: ureq::Agent,
    pub retries: usize,
}

impl RemoteProvider {
    /// `endpoint` is the server base, e.g. `http://127.0.0.1:8080`.
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url: format!("{}{SCORE_PATH}", endpoint.trim_end_matches('/')), agent, retries: DEFAULT_RETRIES }
    }

    fn post(&self, body: &[u8]) -> Result<Vec<u8>> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/octet-stream")
            .send(body)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        match status {
            200 => Ok(bytes),
            500..=599 => Err(Error::Transport(format!("{}: server returned {status}", self.url))),
            _ => Err(Error::Protocol(format!(
                "{}: server returned {status}: {}",
                self.url,
                String::from_utf8_lossy(&bytes[..bytes.len().min(200)])
            ))),
        }
    }
}

impl ScoreProvider for RemoteProvider {
    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<ScoreResponse>> {
        let frame = wire::request_frame(requests)?;
        let body = wire::encode(&frame);
        let mut attempt = 0;
        let bytes = loop {
            match self.post(&body) {
                Ok(b) => break b,
                Err(e) if e.is_retriable() && attempt < self.retries => {
                    attempt += 1;
                    log::warn!("score request failed ({e}); retry {attempt}/{}", self.retries);
                }
                Err(e) => return Err(e),
            }
        };
        let responses = wire::split_response(&wire::decode(&bytes)?, &frame.header)?;
        for (resp, req) in responses.iter().zip(requests) {
            resp.validate(req)?;
        }
        Ok(responses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoMode {
    /// Every ε-prediction is zero.
    Zeros,
    /// ε_cond echoes the noised input; the other branches are zero.
    Echo,
    /// Replies with height + 1.
    WrongHeight,
    /// Puts a NaN into the depth ε_cond.
    Nan,
    /// Answers 503 to everything.
    Unavailable,
}

impl std::str::FromStr for EchoMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "zeros" => EchoMode::Zeros,
            "echo" => EchoMode::Echo,
            "wrong-height" => EchoMode::WrongHeight,
            "nan" => EchoMode::Nan,
            "unavailable" => EchoMode::Unavailable,
            _ => return Err(format!("unknown echo mode `{s}`")),
        })
    }
}

fn echo_reply(mode: EchoMode, body: &[u8]) -> Result<Vec<u8>> {
    let req = wire::decode(body)?;
    if req.header.kind != KIND_REQUEST {
        return Err(Error::Protocol("expected a request frame".into()));
    }
    let px = (req.header.batch * req.header.height * req.header.width) as usize;
    let zeros = |c: usize| vec![0.0f32; px * c];
    let mut tensors = vec![zeros(3), zeros(3), zeros(3), zeros(1), zeros(1), zeros(1)];
    let mut header = req.header.clone();
    header.kind = wire::KIND_RESPONSE;
    header.prompt.clear();
    header.negative_prompt.clear();
    match mode {
        EchoMode::Echo => {
            tensors[0] = req.tensors[0].clone();
            tensors[3] = req.tensors[1].clone();
        }
        EchoMode::WrongHeight => {
            header.height += 1;
            let px = (header.batch * header.height * header.width) as usize;
            tensors = [3, 3, 3, 1, 1, 1].iter().map(|&c| vec![0.0; px * c]).collect();
        }
        EchoMode::Nan => tensors[3][0] = f32::NAN,
        EchoMode::Zeros | EchoMode::Unavailable => {}
    }
    Ok(wire::encode(&Frame { header, tensors }))
}

/// Serves `/v1/score` on a background thread until dropped.
pub struct EchoServer {
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
    pub addr: SocketAddr,
}

impl EchoServer {
    pub fn start(bind: &str, mode: EchoMode) -> Result<Self> {
        let server = tiny_http::Server::http(bind).map_err(|e| Error::Transport(format!("bind {bind}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Transport("echo server has no IP address".into()))?;
        let server = Arc::new(server);
        let worker = Arc::clone(&server);
        let thread = std::thread::spawn(move || {
            for mut request in worker.incoming_requests() {
                let mut body = Vec::new();
                let reply = if request.url() != SCORE_PATH {
                    (404, b"not found".to_vec())
                } else if mode == EchoMode::Unavailable {
                    (503, b"unavailable".to_vec())
                } else if request.as_reader().read_to_end(&mut body).is_err() {
                    (400, b"unreadable body".to_vec())
                } else {
                    match echo_reply(mode, &body) {
                        Ok(b) => (200, b),
                        Err(e) => (400, e.to_string().into_bytes()),
                    }
                };
                let _ = request.respond(tiny_http::Response::from_data(reply.1).with_status_code(reply.0));
            }
        });
        Ok(Self { server, thread: Some(thread), addr })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for EchoServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
