//! In-process servers for hermetic tests and demos: a line-JSON TextGrid
//! server speaking the remote environment protocol, and an
//! OpenAI-compatible chat server backed by the template stub that can inject
//! 500s and stalls.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::env::remote::{WireRequest, WireResponse};
use crate::env::textgrid::{TextGrid, TextGridEnv};
use crate::env::{Environment, TaskSpec};
use crate::exec::derive_seed;
use crate::policy::{BaseModel, ChatMessage, TemplateStubBase};
use crate::trajectory::Action;

struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    fn spawn<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(TcpStream) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handler = Arc::new(handler);
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let h = handler.clone();
                thread::spawn(move || h(conn));
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Serves TextGrid episodes for the given tasks, one episode per connection.
pub struct EnvServer {
    server: Server,
}

impl EnvServer {
    pub fn spawn(specs: Vec<TaskSpec>) -> std::io::Result<Self> {
        let specs: Arc<HashMap<String, TaskSpec>> =
            Arc::new(specs.into_iter().map(|s| (s.id().to_string(), s)).collect());
        let server = Server::spawn(move |conn| {
            let _ = serve_env(conn, &specs);
        })?;
        Ok(Self { server })
    }

    pub fn addr(&self) -> String {
        self.server.addr.to_string()
    }
}

fn serve_env(conn: TcpStream, specs: &HashMap<String, TaskSpec>) -> std::io::Result<()> {
    let mut out = conn.try_clone()?;
    let mut env: Option<TextGridEnv> = None;
    for line in BufReader::new(conn).lines() {
        let line = line?;
        let Ok(req) = serde_json::from_str::<WireRequest>(&line) else {
            writeln!(out, "{{}}")?;
            continue;
        };
        let reply = match (req.op.as_str(), &mut env) {
            ("reset", _) => {
                let spec = req.action.as_deref().and_then(|id| specs.get(id));
                match spec.map(TextGrid::open) {
                    Some(Ok((e, obs))) => {
                        env = Some(e);
                        Some(WireResponse {
                            observation: obs.0,
                            done: false,
                            reward: None,
                        })
                    }
                    _ => None,
                }
            }
            ("step", Some(e)) => req
                .action
                .as_deref()
                .and_then(|a| Action::parse(a).ok())
                .and_then(|a| e.step(&a).ok())
                .map(|o| WireResponse {
                    observation: o.observation.0,
                    done: o.done,
                    reward: o.reward_if_done,
                }),
            ("score", Some(e)) => e.score().ok().map(|r| WireResponse {
                observation: String::new(),
                done: true,
                reward: Some(r),
            }),
            _ => None,
        };
        match reply {
            Some(r) => writeln!(out, "{}", serde_json::to_string(&r).expect("serializable"))?,
            None => writeln!(out, "{{\"error\":\"bad request\"}}")?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultConfig {
    /// Fraction of requests answered with HTTP 500.
    pub error_rate: f64,
    /// Fraction of requests that stall for `stall` before closing.
    pub timeout_rate: f64,
    pub stall: Duration,
    pub seed: u64,
}

impl FaultConfig {
    pub fn healthy() -> Self {
        Self {
            error_rate: 0.0,
            timeout_rate: 0.0,
            stall: Duration::ZERO,
            seed: 0,
        }
    }

    /// Every request fails.
    pub fn outage() -> Self {
        Self {
            error_rate: 1.0,
            ..Self::healthy()
        }
    }
}

#[derive(Deserialize)]
struct IncomingChat {
    messages: Vec<ChatMessage>,
}

/// Chat-completion endpoint at `http://<addr>/v1` answering with
/// [`TemplateStubBase`] on the last user message.
pub struct ChatServer {
    server: Server,
    requests: Arc<AtomicUsize>,
    faults: Arc<AtomicUsize>,
}

impl ChatServer {
    pub fn spawn(config: FaultConfig) -> std::io::Result<Self> {
        let requests = Arc::new(AtomicUsize::new(0));
        let faults = Arc::new(AtomicUsize::new(0));
        let (r, f) = (requests.clone(), faults.clone());
        let server = Server::spawn(move |conn| {
            let _ = serve_chat(conn, &config, &r, &f);
        })?;
        Ok(Self {
            server,
            requests,
            faults,
        })
    }

    pub fn api_base(&self) -> String {
        format!("http://{}/v1", self.server.addr)
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Requests answered with an injected 500 or stall.
    pub fn faults(&self) -> usize {
        self.faults.load(Ordering::SeqCst)
    }
}

fn unit(seed: u64, i: usize) -> f64 {
    (derive_seed(seed, &[i as u64]) >> 11) as f64 / (1u64 << 53) as f64
}

fn serve_chat(
    conn: TcpStream,
    config: &FaultConfig,
    requests: &AtomicUsize,
    faults: &AtomicUsize,
) -> std::io::Result<()> {
    let mut out = conn.try_clone()?;
    let mut reader = BufReader::new(conn);
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;

    let i = requests.fetch_add(1, Ordering::SeqCst);
    let u = unit(config.seed, i);
    if u < config.error_rate {
        faults.fetch_add(1, Ordering::SeqCst);
        return respond(&mut out, 500, r#"{"error":"injected"}"#);
    }
    if u < config.error_rate + config.timeout_rate {
        faults.fetch_add(1, Ordering::SeqCst);
        thread::sleep(config.stall);
        return Ok(());
    }
    let reply = serde_json::from_slice::<IncomingChat>(&body)
        .ok()
        .and_then(|c| c.messages.into_iter().rev().find(|m| m.role == "user"))
        .and_then(|m| TemplateStubBase.complete_text(&m.content, 0.0).ok());
    match reply {
        Some(content) => {
            let body = json!({
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop"
                }]
            });
            respond(&mut out, 200, &body.to_string())
        }
        None => respond(&mut out, 400, r#"{"error":"bad request"}"#),
    }
}

fn respond(out: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        _ => "Internal Server Error",
    };
    write!(
        out,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    out.flush()
}
