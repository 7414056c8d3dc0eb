//! Newline-delimited JSON protocol for the re-ranking service.
//!
//! Each request line is either a candidate set (embeddings as base64 `f32`
//! little-endian) or `{"type": "stats"}`. Every line gets exactly one response
//! line; malformed requests get `{"error": {"code", "message"}}` and the
//! stream stays open.

use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::fields::{first_coordinates, NO_COORDINATES_XY};
use super::{rerank, BehaviorStats, Candidate, CandidateSet, HistoryEmbeddings, RerankError, StateEmbeddings};
use crate::model::{ModelDims, ModelParams};

pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, WireError> {
    let bytes = STANDARD.decode(text).map_err(|e| WireError::BadEmbedding(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(WireError::BadEmbedding(format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WireError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("bad embedding: {0}")]
    BadEmbedding(String),
    #[error("{field} has {got} values, expected {expected}")]
    DimensionMismatch { field: String, expected: usize, got: usize },
    #[error("unknown request type {0:?}")]
    UnknownType(String),
    #[error(transparent)]
    Rerank(#[from] RerankError),
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Malformed(_) => "malformed_request",
            WireError::BadEmbedding(_) => "bad_embedding",
            WireError::DimensionMismatch { .. } => "dimension_mismatch",
            WireError::UnknownType(_) => "unknown_type",
            WireError::Rerank(RerankError::EmptyCandidateSet) => "empty_candidate_set",
            WireError::Rerank(RerankError::BadResolution(..)) => "bad_resolution",
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": { "code": self.code(), "message": self.to_string() } })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireHistory {
    pub screenshot: String,
    #[serde(default)]
    pub observation: Option<String>,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub code: Option<String>,
    #[serde(default)]
    pub xy: [f32; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireState {
    pub screenshot: String,
    #[serde(default)]
    pub observation: Option<String>,
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default)]
    pub reflection: Option<String>,
    #[serde(default)]
    pub history: Vec<WireHistory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireCandidate {
    #[serde(default)]
    pub thought_emb: Option<String>,
    #[serde(default)]
    pub action_emb: Option<String>,
    #[serde(default)]
    pub code_emb: Option<String>,
    #[serde(default)]
    pub code_text: String,
    /// Normalized; when absent it is read from `code_text`'s pixel coordinates.
    #[serde(default)]
    pub xy: Option<[f32; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub state: WireState,
    pub candidates: Vec<WireCandidate>,
    pub resolution: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

struct Decoder<'d> {
    dims: &'d ModelDims,
}

impl Decoder<'_> {
    fn vec(&self, field: &str, text: &str, expected: usize) -> Result<Vec<f32>, WireError> {
        let v = decode_f32(text).map_err(|e| match e {
            WireError::BadEmbedding(m) => WireError::BadEmbedding(format!("{field}: {m}")),
            other => other,
        })?;
        if v.len() != expected {
            return Err(WireError::DimensionMismatch { field: field.to_string(), expected, got: v.len() });
        }
        Ok(v)
    }

    fn text(&self, field: &str, text: &Option<String>) -> Result<Option<Vec<f32>>, WireError> {
        text.as_deref().map(|t| self.vec(field, t, self.dims.text)).transpose()
    }
}

impl WireRequest {
    pub fn decode(&self, dims: &ModelDims) -> Result<CandidateSet, WireError> {
        let d = Decoder { dims };
        let s = &self.state;
        let state = StateEmbeddings {
            screenshot: d.vec("state.screenshot", &s.screenshot, dims.vision)?,
            observation: d.text("state.observation", &s.observation)?,
            instruction: d.text("state.instruction", &s.instruction)?,
            reflection: d.text("state.reflection", &s.reflection)?,
            history: s
                .history
                .iter()
                .enumerate()
                .map(|(k, h)| {
                    Ok(HistoryEmbeddings {
                        screenshot: d.vec(&format!("state.history[{k}].screenshot"), &h.screenshot, dims.vision)?,
                        observation: d.text(&format!("state.history[{k}].observation"), &h.observation)?,
                        action: d.text(&format!("state.history[{k}].action"), &h.action)?,
                        code: d.text(&format!("state.history[{k}].code"), &h.code)?,
                        xy: h.xy,
                    })
                })
                .collect::<Result<_, WireError>>()?,
        };
        let [w, h] = self.resolution;
        let candidates = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let xy = c.xy.unwrap_or_else(|| match first_coordinates(&c.code_text) {
                    Some((x, y)) if w > 0 && h > 0 => [(x / w as f64) as f32, (y / h as f64) as f32],
                    _ => NO_COORDINATES_XY,
                });
                Ok(Candidate {
                    thought: d.text(&format!("candidates[{i}].thought_emb"), &c.thought_emb)?,
                    action: d.text(&format!("candidates[{i}].action_emb"), &c.action_emb)?,
                    code: d.text(&format!("candidates[{i}].code_emb"), &c.code_emb)?,
                    code_text: c.code_text.clone(),
                    xy,
                })
            })
            .collect::<Result<_, WireError>>()?;
        Ok(CandidateSet { state, candidates, resolution: self.resolution })
    }

    pub fn encode(set: &CandidateSet, sigma: Option<f64>) -> Self {
        let opt = |v: &Option<Vec<f32>>| v.as_deref().map(encode_f32);
        let s = &set.state;
        Self {
            kind: None,
            state: WireState {
                screenshot: encode_f32(&s.screenshot),
                observation: opt(&s.observation),
                instruction: opt(&s.instruction),
                reflection: opt(&s.reflection),
                history: s
                    .history
                    .iter()
                    .map(|h| WireHistory {
                        screenshot: encode_f32(&h.screenshot),
                        observation: opt(&h.observation),
                        action: opt(&h.action),
                        code: opt(&h.code),
                        xy: h.xy,
                    })
                    .collect(),
            },
            candidates: set
                .candidates
                .iter()
                .map(|c| WireCandidate {
                    thought_emb: opt(&c.thought),
                    action_emb: opt(&c.action),
                    code_emb: opt(&c.code),
                    code_text: c.code_text.clone(),
                    xy: Some(c.xy),
                })
                .collect(),
            resolution: set.resolution,
            sigma,
        }
    }
}

/// Shared scorer state: read-only parameters plus one stats aggregator.
pub struct Service {
    pub params: ModelParams<f32>,
    pub sigma: f64,
    stats: Mutex<BehaviorStats>,
}

impl Service {
    pub fn new(params: ModelParams<f32>, sigma: f64) -> Self {
        Self { params, sigma, stats: Mutex::new(BehaviorStats::default()) }
    }

    pub fn stats(&self) -> BehaviorStats {
        *self.stats.lock().expect("stats lock")
    }

    /// One request line in, one response value out.
    pub fn handle(&self, line: &str) -> Value {
        match self.try_handle(line) {
            Ok(v) => v,
            Err(e) => e.to_json(),
        }
    }

    fn try_handle(&self, line: &str) -> Result<Value, WireError> {
        let value: Value = serde_json::from_str(line).map_err(|e| WireError::Malformed(e.to_string()))?;
        match value.get("type").and_then(Value::as_str) {
            Some("stats") => return Ok(json!({ "stats": self.stats() })),
            None | Some("rerank") => {}
            Some(other) => return Err(WireError::UnknownType(other.to_string())),
        }
        let request: WireRequest = serde_json::from_value(value).map_err(|e| WireError::Malformed(e.to_string()))?;
        if request.candidates.is_empty() {
            return Err(RerankError::EmptyCandidateSet.into());
        }
        let sigma = request.sigma.unwrap_or(self.sigma);
        if !sigma.is_finite() {
            return Err(WireError::Malformed("sigma must be finite".into()));
        }
        let set = request.decode(&self.params.dims)?;
        let decision = rerank(&set, &self.params, sigma)?;
        self.stats.lock().expect("stats lock").record(&decision);
        Ok(serde_json::to_value(&decision).expect("decision serializes"))
    }
}

/// Serves one stream until EOF; blank lines are skipped. Returns the number of
/// requests answered.
pub fn serve_stream<R: BufRead, W: Write>(service: &Service, reader: R, mut writer: W) -> io::Result<usize> {
    let mut answered = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = service.handle(&line);
        writeln!(writer, "{response}")?;
        writer.flush()?;
        answered += 1;
    }
    Ok(answered)
}

/// Accepts connections forever (or `max_connections`), one thread each.
pub fn serve_tcp(service: Arc<Service>, listener: TcpListener, max_connections: Option<usize>) -> io::Result<()> {
    let mut workers = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let service = Arc::clone(&service);
        workers.push(std::thread::spawn(move || {
            let reader = io::BufReader::new(stream.try_clone()?);
            serve_stream(&service, reader, stream)
        }));
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for w in workers {
        if let Err(e) = w.join().expect("connection thread panicked") {
            log::warn!("connection ended with {e}");
        }
    }
    Ok(())
}
