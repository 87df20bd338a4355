//! Line-delimited JSON session with an external environment server.
//!
//! Each request is one line `{"op": "reset"|"step"|"score", "action": ...}`
//! and each reply one line `{"observation": ..., "done": ..., "reward": ...}`.
//! A `reset` carries the task id in its `action` field.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EnvBackend, EnvError, EnvOutcome, Environment, TaskSpec};
use crate::trajectory::{Action, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub op: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub action: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub observation: String,
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward: Option<f64>,
}

/// Parses one reply line; missing or mistyped fields are protocol errors.
pub fn parse_response(line: &str) -> Result<WireResponse, EnvError> {
    let value: serde_json::Value = serde_json::from_str(line.trim())
        .map_err(|e| EnvError::ProtocolError(format!("malformed reply: {e}")))?;
    let observation = value
        .get("observation")
        .and_then(|v| v.as_str())
        .ok_or_else(|| EnvError::ProtocolError("reply missing \"observation\"".into()))?;
    let done = value
        .get("done")
        .and_then(|v| v.as_bool())
        .ok_or_else(|| EnvError::ProtocolError("reply missing \"done\"".into()))?;
    let reward = match value.get("reward") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_f64()
                .ok_or_else(|| EnvError::ProtocolError("\"reward\" is not a number".into()))?,
        ),
    };
    if let Some(r) = reward {
        if !(0.0..=1.0).contains(&r) {
            return Err(EnvError::ProtocolError(format!("reward {r} outside [0, 1]")));
        }
    }
    Ok(WireResponse {
        observation: observation.to_string(),
        done,
        reward,
    })
}

#[derive(Debug, Clone)]
pub struct RemoteEnvBackend {
    pub addr: String,
    pub timeout: Duration,
}

impl RemoteEnvBackend {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
        }
    }
}

impl EnvBackend for RemoteEnvBackend {
    fn reset(&self, spec: &TaskSpec) -> Result<(Box<dyn Environment>, Observation), EnvError> {
        let (env, obs) = remote_env_session(&self.addr, spec, self.timeout)?;
        Ok((Box::new(env), obs))
    }
}

pub struct RemoteEnv {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    max_steps: usize,
    steps_taken: usize,
    terminated: bool,
    final_reward: Option<f64>,
}

/// Opens a session and resets the remote episode for `spec`.
pub fn remote_env_session(
    endpoint: &str,
    spec: &TaskSpec,
    timeout: Duration,
) -> Result<(RemoteEnv, Observation), EnvError> {
    let addrs: Vec<_> = endpoint
        .to_socket_addrs()
        .map_err(|e| EnvError::EnvTimeout(format!("{endpoint}: {e}")))?
        .collect();
    let mut last = None;
    let mut stream = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = Some(e),
        }
    }
    let stream = stream.ok_or_else(|| {
        EnvError::EnvTimeout(format!(
            "{endpoint}: {}",
            last.map(|e| e.to_string()).unwrap_or_else(|| "no address".into())
        ))
    })?;
    stream
        .set_read_timeout(Some(timeout))
        .and_then(|_| stream.set_write_timeout(Some(timeout)))
        .map_err(|e| EnvError::EnvTimeout(e.to_string()))?;
    let writer = stream
        .try_clone()
        .map_err(|e| EnvError::ProtocolError(e.to_string()))?;
    let mut env = RemoteEnv {
        reader: BufReader::new(stream),
        writer,
        max_steps: spec.max_steps,
        steps_taken: 0,
        terminated: false,
        final_reward: None,
    };
    let reply = env.call(&WireRequest {
        op: "reset".into(),
        action: Some(spec.id().to_string()),
    })?;
    Ok((env, Observation::new(reply.observation)))
}

impl RemoteEnv {
    fn call(&mut self, request: &WireRequest) -> Result<WireResponse, EnvError> {
        let mut line = serde_json::to_string(request).expect("requests serialize");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(io_error)?;
        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(io_error)?;
        if n == 0 {
            return Err(EnvError::ProtocolError("connection closed".into()));
        }
        parse_response(&reply)
    }
}

fn io_error(e: std::io::Error) -> EnvError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => EnvError::EnvTimeout(e.to_string()),
        _ => EnvError::ProtocolError(e.to_string()),
    }
}

impl Environment for RemoteEnv {
    fn step(&mut self, action: &Action) -> Result<EnvOutcome, EnvError> {
        if self.terminated {
            return Err(EnvError::EpisodeClosed);
        }
        let reply = self.call(&WireRequest {
            op: "step".into(),
            action: Some(action.raw().to_string()),
        })?;
        self.steps_taken += 1;
        let done = reply.done || self.steps_taken >= self.max_steps;
        if done {
            self.terminated = true;
            self.final_reward = reply.reward;
        }
        Ok(EnvOutcome {
            observation: Observation::new(reply.observation),
            done,
            reward_if_done: if done {
                Some(match reply.reward {
                    Some(r) => r,
                    None => self.score()?,
                })
            } else {
                None
            },
        })
    }

    fn score(&mut self) -> Result<f64, EnvError> {
        if !self.terminated {
            return Err(EnvError::EpisodeOpen);
        }
        if let Some(r) = self.final_reward {
            return Ok(r);
        }
        let reply = self.call(&WireRequest {
            op: "score".into(),
            action: None,
        })?;
        let r = reply
            .reward
            .ok_or_else(|| EnvError::ProtocolError("score reply missing \"reward\"".into()))?;
        self.final_reward = Some(r);
        Ok(r)
    }

    fn terminated(&self) -> bool {
        self.terminated
    }

    fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reply_fields() {
        let r = parse_response(r#"{"observation":"ok","done":true,"reward":0.5}"#).unwrap();
        assert_eq!(r.reward, Some(0.5));
        assert!(r.done);
        assert!(matches!(
            parse_response(r#"{"done":false}"#),
            Err(EnvError::ProtocolError(_))
        ));
        assert!(matches!(parse_response("not json"), Err(EnvError::ProtocolError(_))));
        assert!(matches!(
            parse_response(r#"{"observation":"x","done":true,"reward":3}"#),
            Err(EnvError::ProtocolError(_))
        ));
    }

    #[test]
    fn request_field_names() {
        let s = serde_json::to_string(&WireRequest {
            op: "step".into(),
            action: Some("open fridge".into()),
        })
        .unwrap();
        assert_eq!(s, r#"{"op":"step","action":"open fridge"}"#);
        let s = serde_json::to_string(&WireRequest {
            op: "score".into(),
            action: None,
        })
        .unwrap();
        assert_eq!(s, r#"{"op":"score"}"#);
    }
}
