//! Minimal in-process HTTP server speaking the completions protocol.
//!
//! Replies come from a FIFO of scripted responses; once the script is
//! exhausted, an optional [`TabularPolicy`] answers requests (generation,
//! echo scoring and top logprobs). Every request body is recorded.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Map, Value};

use super::tabular::TabularPolicy;
use super::{FinishReason, GenerateRequest, PolicyBackend};

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
}

impl StubReply {
    pub fn json(value: Value) -> Self {
        Self { status: 200, body: value.to_string() }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Self { status, body: body.to_string() }
    }

    /// A completion choice with per-token logprobs and optional top logprobs
    /// at each position.
    pub fn completion(
        text: &str,
        finish_reason: &str,
        tokens: &[(&str, f64)],
        top: Option<Vec<Vec<(&str, f64)>>>,
    ) -> Self {
        let top = top.map(|rows| {
            rows.into_iter()
                .map(|row| Value::Object(row.into_iter().map(|(t, l)| (t.to_string(), json!(l))).collect::<Map<_, _>>()))
                .collect::<Vec<_>>()
        });
        Self::json(json!({
            "id": "stub",
            "object": "text_completion",
            "choices": [{
                "index": 0,
                "text": text,
                "finish_reason": finish_reason,
                "logprobs": {
                    "tokens": tokens.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
                    "token_logprobs": tokens.iter().map(|(_, l)| *l).collect::<Vec<_>>(),
                    "top_logprobs": top,
                },
            }],
        }))
    }
}

#[derive(Default)]
struct State {
    script: VecDeque<StubReply>,
    requests: Vec<RecordedRequest>,
    policy: Option<TabularPolicy>,
}

pub struct StubServer {
    addr: SocketAddr,
    state: Arc<Mutex<State>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start() -> io::Result<Self> {
        Self::spawn(None)
    }

    /// Serves completions from `policy` once the script runs out.
    pub fn with_policy(policy: TabularPolicy) -> io::Result<Self> {
        Self::spawn(Some(policy))
    }

    fn spawn(policy: Option<TabularPolicy>) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(State { policy, ..State::default() }));
        let stop = Arc::new(AtomicBool::new(false));
        let (st, sp) = (state.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if sp.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let st = st.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve(stream, &st) {
                        tracing::debug!("stub connection error: {e}");
                    }
                });
            }
        });
        Ok(Self { addr, state, stop, handle: Some(handle) })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn push(&self, reply: StubReply) {
        self.state.lock().expect("stub state").script.push_back(reply);
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().expect("stub state").requests.clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.lock().expect("stub state").requests.len()
    }

    pub fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Unblock accept().
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(mut stream: TcpStream, state: &Mutex<State>) -> io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    let mut content_length = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body)?;
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);

    let reply = {
        let mut st = state.lock().expect("stub state");
        st.requests.push(RecordedRequest { method, path, headers, body: body.clone() });
        match st.script.pop_front() {
            Some(r) => r,
            None => match &st.policy {
                Some(p) => policy_reply(p, &body),
                None => StubReply::status(404, r#"{"error":"no scripted reply"}"#),
            },
        }
    };
    let reason = match reply.status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.status,
        reason,
        reply.body.len()
    )?;
    stream.write_all(reply.body.as_bytes())?;
    stream.flush()
}

/// Top-k keyed by token surface as it would render after `preceding`.
fn top_map(policy: &TabularPolicy, ctx: &[u32], k: usize, preceding: &str) -> Value {
    let dist = policy.next_distribution(ctx);
    let mut pairs: Vec<(usize, f64)> = dist.iter().copied().enumerate().filter(|(_, p)| *p > 0.0).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
    pairs.truncate(k);
    Value::Object(pairs.into_iter().map(|(i, p)| (policy.render_after(i as u32, preceding), json!(p.ln()))).collect())
}

fn policy_reply(policy: &TabularPolicy, body: &Value) -> StubReply {
    let prompt = body["prompt"].as_str().unwrap_or_default();
    let max_tokens = body["max_tokens"].as_u64().unwrap_or(16) as usize;
    let temperature = body["temperature"].as_f64().unwrap_or(1.0);
    let stop = body["stop"].as_array().and_then(|a| a.first()).and_then(Value::as_str);
    let k = body["logprobs"].as_u64().unwrap_or(0) as usize;
    let echo = body["echo"].as_bool().unwrap_or(false);
    let seed = body["seed"].as_u64().unwrap_or(0);
    if prompt.is_empty() || max_tokens == 0 {
        return StubReply::status(400, r#"{"error":"empty prompt or zero max_tokens"}"#);
    }
    let gen = match policy.generate(&GenerateRequest { context: prompt, stop, max_tokens, temperature, seed }) {
        Ok(g) => g,
        Err(e) => return StubReply::status(500, &json!({"error": e.to_string()}).to_string()),
    };

    let mut tokens = Vec::new();
    let mut lps: Vec<Value> = Vec::new();
    let mut tops = Vec::new();
    let mut offsets = Vec::new();
    let mut ctx = Vec::new();
    let mut offset = 0;
    if echo {
        for (i, piece) in policy.tokenize(prompt).iter().enumerate() {
            tokens.push(piece.surface.to_string());
            lps.push(if i == 0 { Value::Null } else { json!(policy.prob(&ctx, piece.id).ln()) });
            tops.push(if i == 0 { Value::Null } else { top_map(policy, &ctx, k, &prompt[..offset]) });
            offsets.push(offset);
            offset += piece.surface.len();
            ctx.push(piece.id);
        }
    } else {
        offset = prompt.len();
    }
    let mut gen_ctx = policy.context_ids(prompt);
    let mut gen_text = String::new();
    for (t, piece) in gen.tokens.iter().zip(policy.tokenize(&gen.text)) {
        tokens.push(t.token.clone());
        lps.push(json!(t.logprob));
        tops.push(top_map(policy, &gen_ctx, k, &gen_text));
        gen_text.push_str(&t.token);
        offsets.push(offset);
        offset += t.token.len();
        gen_ctx.push(piece.id);
    }
    let (finish, stop_reason) = match gen.finish {
        FinishReason::Stop => ("stop", json!(stop)),
        FinishReason::Terminal => ("stop", Value::Null),
        FinishReason::Length => ("length", Value::Null),
    };
    // A terminal token ends generation without text; report its position so
    // callers asking for top logprobs still get a distribution.
    if tops.is_empty() {
        tops.push(top_map(policy, &gen_ctx, k, &gen_text));
    }
    let text = if echo { format!("{prompt}{}", gen.text) } else { gen.text.clone() };
    StubReply::json(json!({
        "id": "stub",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": text,
            "finish_reason": finish,
            "stop_reason": stop_reason,
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": lps,
                "top_logprobs": if k > 0 { Value::Array(tops) } else { Value::Null },
                "text_offset": offsets,
            },
        }],
        "usage": {"completion_tokens": gen.generated_tokens},
    }))
}
