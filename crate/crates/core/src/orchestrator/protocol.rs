//! Newline-delimited JSON spoken with external evaluator processes.
//!
//! Both sides open with `{"hello":"ecad-eval","protocol_version":1}`. Each
//! request line carries a schedule; each response line echoes its
//! `request_id` with either a finite `quality` (higher is better) or an
//! `error` object.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const PROTOCOL_VERSION: u32 = 1;
pub const HELLO: &str = "ecad-eval";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub hello: String,
    pub protocol_version: u32,
}

impl Hello {
    pub fn new(protocol_version: u32) -> Self {
        Self {
            hello: HELLO.to_string(),
            protocol_version,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("hello serializes")
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let h: Hello = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if h.hello != HELLO {
            return Err(format!("unexpected hello `{}`", h.hello));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalParams {
    pub prompt_set: String,
    pub images_per_prompt: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub protocol_version: u32,
    pub request_id: u64,
    pub topology_hash: String,
    /// Standard padded base64 of the packed little-endian bit vector.
    pub bits: String,
    pub eval_params: EvalParams,
}

impl EvalRequest {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalResponse {
    Ok {
        request_id: u64,
        quality: f64,
        detail: Option<Map<String, Value>>,
    },
    Err {
        request_id: u64,
        error: ErrorBody,
    },
}

impl EvalResponse {
    pub fn request_id(&self) -> u64 {
        match self {
            Self::Ok { request_id, .. } | Self::Err { request_id, .. } => *request_id,
        }
    }

    pub fn to_line(&self) -> String {
        let v = match self {
            Self::Ok {
                request_id,
                quality,
                detail,
            } => {
                let mut m = Map::new();
                m.insert("request_id".into(), (*request_id).into());
                m.insert("quality".into(), (*quality).into());
                if let Some(d) = detail {
                    m.insert("detail".into(), Value::Object(d.clone()));
                }
                Value::Object(m)
            }
            Self::Err { request_id, error } => serde_json::json!({
                "request_id": request_id,
                "error": error,
            }),
        };
        v.to_string()
    }

    /// Strict parse: a `request_id`, and exactly one of a finite `quality` or
    /// an `error` object.
    pub fn parse(line: &str) -> Result<Self, String> {
        let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
        let obj = v.as_object().ok_or("response is not a JSON object")?;
        let request_id = obj
            .get("request_id")
            .and_then(Value::as_u64)
            .ok_or("missing or non-integer request_id")?;
        match (obj.get("quality"), obj.get("error")) {
            (Some(q), None) => {
                let quality = q
                    .as_f64()
                    .filter(|q| q.is_finite())
                    .ok_or("quality is not a finite number")?;
                let detail = match obj.get("detail") {
                    None | Some(Value::Null) => None,
                    Some(Value::Object(m)) => Some(m.clone()),
                    Some(_) => return Err("detail is not an object".into()),
                };
                Ok(Self::Ok {
                    request_id,
                    quality,
                    detail,
                })
            }
            (None, Some(e)) => {
                let error: ErrorBody = serde_json::from_value(e.clone())
                    .map_err(|e| format!("bad error object: {e}"))?;
                Ok(Self::Err { request_id, error })
            }
            _ => Err("expected exactly one of `quality` or `error`".into()),
        }
    }
}
