//! Client side of the line-delimited JSON protocol spoken by model adapters.
//!
//! Requests and responses are single JSON objects on one line:
//!
//! ```text
//! -> {"op":"token_logprobs","items":[{"image":"img/1.jpg","text":"a dog"},{"image":"null","text":"a dog"}]}
//! <- {"items":[{"tokens":["a","dog"],"logp":[-1.2,-0.3]},{"tokens":["a","dog"],"logp":[-1.9,-2.2]}]}
//! <- {"error":"message"}
//! -> {"op":"identity"}
//! <- {"identity":{...}}
//! ```
//!
//! `"null"` is the reserved image: adapters render a black-filled image at the
//! model's native resolution for it.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::io::{sha256_hex, ConditionalTable};
use crate::similarity::{ItemId, TokenLogProbs, TokenSequence, LOGP_TOLERANCE, NULL_IMAGE};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdapterItem {
    /// Image path, or `"null"`.
    pub image: String,
    pub text: String,
}

impl AdapterItem {
    pub fn new(image: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput {
    pub tokens: TokenSequence,
    pub logp: TokenLogProbs,
}

/// Moves one request line to an adapter and returns its response line.
///
/// Transient failures (no answer in time, connection refused, child exited)
/// are reported as [`Error::AdapterTimeout`] and retried by the client.
pub trait Transport: Send + Sync {
    fn round_trip(&self, request: &str) -> Result<String>;
    fn describe(&self) -> String;
}

/// Child process speaking the protocol on stdin/stdout, run through `sh -c`.
pub struct StdioTransport {
    command: String,
    timeout: Duration,
    state: Mutex<Option<ChildState>>,
}

struct ChildState {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for ChildState {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl StdioTransport {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self {
            command: command.into(),
            timeout,
            state: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<ChildState> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::AdapterTimeout(format!("cannot start `{}`: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ChildState {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Transport for StdioTransport {
    fn round_trip(&self, request: &str) -> Result<String> {
        let mut guard = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let state = guard.as_mut().expect("spawned");
        let sent = writeln!(state.stdin, "{request}").and_then(|_| state.stdin.flush());
        if let Err(e) = sent {
            *guard = None;
            return Err(Error::AdapterTimeout(format!("adapter closed its input: {e}")));
        }
        match state.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => {
                *guard = None;
                Err(Error::AdapterTimeout(format!("reading adapter output: {e}")))
            }
            Err(RecvTimeoutError::Timeout) => {
                // a late answer would misalign later requests, so restart the child
                *guard = None;
                Err(Error::AdapterTimeout(format!("no response within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                Err(Error::AdapterTimeout("adapter process exited".into()))
            }
        }
    }

    fn describe(&self) -> String {
        format!("stdio:{}", self.command)
    }
}

/// HTTP POST of one request line per call.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn round_trip(&self, request: &str) -> Result<String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(request)
            .map_err(|e| Error::AdapterTimeout(format!("{}: {e}", self.url)))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::AdapterTimeout(format!("{}: {e}", self.url)))?;
        match status {
            200..=299 => Ok(body.trim_end().to_owned()),
            500..=599 => Err(Error::AdapterTimeout(format!("{}: status {status}", self.url))),
            _ => Err(Error::AdapterProtocol {
                detail: format!("HTTP status {status}"),
                raw: body,
            }),
        }
    }

    fn describe(&self) -> String {
        self.url.clone()
    }
}

type Handler = dyn Fn(&str) -> Result<String> + Send + Sync;

/// Calls a function in-process; counts calls.
pub struct InProcessTransport {
    handler: Box<Handler>,
    calls: AtomicUsize,
    name: String,
}

impl InProcessTransport {
    pub fn new(name: impl Into<String>, handler: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            handler: Box::new(handler),
            calls: AtomicUsize::new(0),
            name: name.into(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for InProcessTransport {
    fn round_trip(&self, request: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.handler)(request)
    }

    fn describe(&self) -> String {
        format!("in-process:{}", self.name)
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn round_trip(&self, request: &str) -> Result<String> {
        (**self).round_trip(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientConfig {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(100),
            timeout: Duration::from_secs(60),
            batch_size: 32,
            max_in_flight: 4,
        }
    }
}

/// Builds the transport for `stdio:<command>` or `http(s)://...`.
pub fn transport_for(endpoint: &str, timeout: Duration) -> Result<Box<dyn Transport>> {
    if let Some(cmd) = endpoint.strip_prefix("stdio:") {
        if cmd.trim().is_empty() {
            return Err(Error::InvalidInput("empty stdio command".into()));
        }
        Ok(Box::new(StdioTransport::new(cmd, timeout)))
    } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Box::new(HttpTransport::new(endpoint, timeout)))
    } else {
        Err(Error::InvalidInput(format!(
            "adapter endpoint `{endpoint}` must be stdio:<command> or http(s)://<address>"
        )))
    }
}

fn protocol(detail: impl Into<String>, raw: &str) -> Error {
    Error::AdapterProtocol {
        detail: detail.into(),
        raw: raw.to_owned(),
    }
}

/// Parses and validates a `token_logprobs` response against `expected` items.
pub fn parse_response(raw: &str, expected: usize) -> Result<Vec<AdapterOutput>> {
    let v: Value = serde_json::from_str(raw).map_err(|e| protocol(format!("invalid JSON: {e}"), raw))?;
    if let Some(err) = v.get("error") {
        let msg = err.as_str().map(str::to_owned).unwrap_or_else(|| err.to_string());
        return Err(protocol(format!("adapter error: {msg}"), raw));
    }
    let items = v
        .get("items")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("response has neither `items` nor `error`", raw))?;
    if items.len() != expected {
        return Err(protocol(
            format!("expected {expected} items, got {}", items.len()),
            raw,
        ));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let tokens: Vec<String> = item
                .get("tokens")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(|t| t.as_str().map(str::to_owned)).collect())
                .ok_or_else(|| protocol(format!("items[{i}].tokens must be a list of strings"), raw))?;
            let logp: Vec<f64> = item
                .get("logp")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(Value::as_f64).collect())
                .ok_or_else(|| protocol(format!("items[{i}].logp must be a list of numbers"), raw))?;
            if tokens.len() != logp.len() {
                return Err(protocol(
                    format!("items[{i}]: {} tokens but {} logp values", tokens.len(), logp.len()),
                    raw,
                ));
            }
            if let Some((j, x)) = logp.iter().enumerate().find(|(_, x)| **x > LOGP_TOLERANCE) {
                return Err(protocol(format!("items[{i}].logp[{j}] = {x} is positive"), raw));
            }
            let tokens = TokenSequence::new(tokens)
                .map_err(|e| protocol(format!("items[{i}].tokens: {e}"), raw))?;
            let logp = TokenLogProbs::new(logp)
                .map_err(|e| protocol(format!("items[{i}].logp: {e}"), raw))?;
            Ok(AdapterOutput { tokens, logp })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    identity: String,
    image: String,
    text: String,
}

/// Retrying, caching client for one adapter endpoint.
pub struct AdapterClient {
    transport: Box<dyn Transport>,
    config: ClientConfig,
    identity: OnceLock<String>,
    cache: Mutex<HashMap<CacheKey, AdapterOutput>>,
    image_digests: Mutex<HashMap<String, String>>,
}

impl AdapterClient {
    pub fn new(transport: Box<dyn Transport>, config: ClientConfig) -> Self {
        Self {
            transport,
            config,
            identity: OnceLock::new(),
            cache: Mutex::new(HashMap::new()),
            image_digests: Mutex::new(HashMap::new()),
        }
    }

    pub fn connect(endpoint: &str, config: ClientConfig) -> Result<Self> {
        Ok(Self::new(transport_for(endpoint, config.timeout)?, config))
    }

    pub fn describe(&self) -> String {
        self.transport.describe()
    }

    fn call(&self, request: &str) -> Result<String> {
        let mut delay = self.config.initial_backoff;
        let mut last = None;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.transport.round_trip(request) {
                Ok(line) => return Ok(line),
                Err(e @ Error::AdapterTimeout(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        let cause = last.map(|e| e.to_string()).unwrap_or_default();
        Err(Error::AdapterTimeout(format!(
            "{} unreachable after {} attempts: {cause}",
            self.transport.describe(),
            self.config.max_retries + 1
        )))
    }

    /// SHA-256 of the adapter's self-reported identity object.
    pub fn identity_digest(&self) -> Result<String> {
        if let Some(d) = self.identity.get() {
            return Ok(d.clone());
        }
        let raw = self.call(&json!({"op": "identity"}).to_string())?;
        let v: Value = serde_json::from_str(&raw).map_err(|e| protocol(format!("invalid JSON: {e}"), &raw))?;
        if let Some(err) = v.get("error") {
            return Err(protocol(format!("adapter error: {err}"), &raw));
        }
        let identity = v
            .get("identity")
            .filter(|i| i.is_object())
            .ok_or_else(|| protocol("identity response lacks an `identity` object", &raw))?;
        let digest = format!("sha256:{}", sha256_hex(identity.to_string().as_bytes()));
        Ok(self.identity.get_or_init(|| digest).clone())
    }

    /// One uncached round trip for a single batch.
    pub fn request(&self, items: &[AdapterItem]) -> Result<Vec<AdapterOutput>> {
        if items.is_empty() {
            return Err(Error::InvalidInput("empty adapter batch".into()));
        }
        let req = json!({"op": "token_logprobs", "items": items}).to_string();
        let raw = self.call(&req)?;
        parse_response(&raw, items.len())
    }

    /// Content digest for an image path; `"null"` stays literal, and names that
    /// are not readable files are keyed by name.
    fn image_key(&self, image: &str) -> String {
        if image == NULL_IMAGE {
            return NULL_IMAGE.to_owned();
        }
        let mut memo = self.image_digests.lock().unwrap_or_else(|p| p.into_inner());
        memo.entry(image.to_owned())
            .or_insert_with(|| match std::fs::read(image) {
                Ok(bytes) => format!("sha256:{}", sha256_hex(&bytes)),
                Err(_) => format!("name:{image}"),
            })
            .clone()
    }

    /// Token log-probs for every item, in order. Cached items cost no
    /// adapter call; the rest go out in batches with a bounded number in flight.
    pub fn token_logprobs(&self, items: &[AdapterItem]) -> Result<Vec<AdapterOutput>> {
        let identity = self.identity_digest()?;
        let keys: Vec<CacheKey> = items
            .iter()
            .map(|it| CacheKey {
                identity: identity.clone(),
                image: self.image_key(&it.image),
                text: it.text.clone(),
            })
            .collect();
        let mut out: Vec<Option<AdapterOutput>> = {
            let cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
            keys.iter().map(|k| cache.get(k).cloned()).collect()
        };
        let mut missing: Vec<usize> = Vec::new();
        let mut first_of: HashMap<&CacheKey, usize> = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            if out[i].is_none() && first_of.insert(k, i).is_none() {
                missing.push(i);
            }
        }
        let batches: Vec<&[usize]> = missing.chunks(self.config.batch_size.max(1)).collect();
        let mut fetched: Vec<Result<Vec<AdapterOutput>>> = Vec::with_capacity(batches.len());
        for wave in batches.chunks(self.config.max_in_flight.max(1)) {
            let results: Vec<Result<Vec<AdapterOutput>>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|batch| {
                        let reqs: Vec<AdapterItem> = batch.iter().map(|&i| items[i].clone()).collect();
                        s.spawn(move || self.request(&reqs))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("adapter worker panicked"))
                    .collect()
            });
            fetched.extend(results);
        }
        {
            let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
            for (batch, result) in batches.iter().zip(fetched) {
                for (&i, o) in batch.iter().zip(result?) {
                    cache.insert(keys[i].clone(), o.clone());
                    out[i] = Some(o);
                }
            }
            for (i, k) in keys.iter().enumerate() {
                if out[i].is_none() {
                    out[i] = cache.get(k).cloned();
                }
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every item resolved")).collect())
    }
}

/// Reference adapter answering from a table.
///
/// Known `(image, text)` pairs return their table row; the image is matched by
/// id or by file stem, the text by id or by its space-joined tokens. Unknown
/// pairs get a deterministic synthetic row: whitespace tokens with log-probs
/// derived from a hash of the pair.
pub struct EchoAdapter {
    table: Option<ConditionalTable>,
    text_index: HashMap<String, ItemId>,
}

impl EchoAdapter {
    pub fn new(table: Option<ConditionalTable>) -> Self {
        let mut text_index = HashMap::new();
        if let Some(t) = &table {
            for id in t.texts() {
                text_index.insert(id.as_str().to_owned(), id.clone());
                if let Some(tokens) = t.tokens(id) {
                    text_index.entry(tokens.tokens().join(" ")).or_insert_with(|| id.clone());
                }
            }
        }
        Self { table, text_index }
    }

    pub fn identity(&self) -> Value {
        json!({
            "model": "echo",
            "preprocessing": "none",
            "tokenizer": "whitespace",
            "null_image": {"resolution": [1, 1], "fill": 0},
            "table_entries": self.table.as_ref().map_or(0, ConditionalTable::len),
        })
    }

    fn lookup(&self, item: &AdapterItem) -> Option<AdapterOutput> {
        let table = self.table.as_ref()?;
        let text = self.text_index.get(&item.text)?;
        let stem = std::path::Path::new(&item.image)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&item.image);
        [item.image.as_str(), stem].iter().find_map(|name| {
            let image = ItemId::new(*name).ok()?;
            Some(AdapterOutput {
                tokens: table.tokens(text)?.clone(),
                logp: table.conditional(&image, text)?.clone(),
            })
        })
    }

    fn synthesize(item: &AdapterItem) -> Result<AdapterOutput> {
        let words: Vec<String> = item.text.split_whitespace().map(str::to_owned).collect();
        let tokens = TokenSequence::new(words)
            .map_err(|_| Error::InvalidInput("empty text".into()))?;
        let logp = tokens
            .tokens()
            .iter()
            .map(|w| {
                let h = sha256_hex(format!("{}\u{0}{}", item.image, w).as_bytes());
                let frac = u32::from_str_radix(&h[..8], 16).expect("hex") as f64 / u32::MAX as f64;
                -0.05 - 4.0 * frac
            })
            .collect();
        Ok(AdapterOutput {
            tokens,
            logp: TokenLogProbs::new(logp)?,
        })
    }

    /// Answers one request line.
    pub fn handle(&self, line: &str) -> String {
        let reply = (|| -> std::result::Result<Value, String> {
            let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid request: {e}"))?;
            match v.get("op").and_then(Value::as_str) {
                Some("identity") => Ok(json!({ "identity": self.identity() })),
                Some("token_logprobs") => {
                    let items: Vec<AdapterItem> = serde_json::from_value(v["items"].clone())
                        .map_err(|e| format!("invalid items: {e}"))?;
                    let rows = items
                        .iter()
                        .map(|it| match self.lookup(it) {
                            Some(o) => Ok(o),
                            None => Self::synthesize(it).map_err(|e| e.to_string()),
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let items: Vec<Value> = rows
                        .iter()
                        .map(|o| json!({"tokens": o.tokens.tokens(), "logp": o.logp.values()}))
                        .collect();
                    Ok(json!({ "items": items }))
                }
                other => Err(format!("unknown op {other:?}")),
            }
        })();
        match reply {
            Ok(v) => v.to_string(),
            Err(msg) => json!({ "error": msg }).to_string(),
        }
    }
}
