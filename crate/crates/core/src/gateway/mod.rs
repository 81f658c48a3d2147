//! Elicitation gateway: sends prompts to a chat-completion endpoint, parses
//! answers strictly, and records every response in a persistent cache.

mod batch;
mod cache;
mod client;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::run_batch;
pub use cache::{cache_key, prompt_digest, CacheError, CacheRecord, ParsedAnswer, ResponseCache};
pub use client::{extract_content, request_body, ChatTransport, HttpTransport};

use crate::config::{ConfigError, SamplingSpec, StudyConfig};
use crate::prompt::{render_direct, render_triplet, DirectQuery, RenderError, TripletQuery};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointSpec {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env_var: String,
    pub timeout_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Extra request fields passed through verbatim (e.g. reasoning settings).
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Default for EndpointSpec {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model_name: "gpt-oss-120b".into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_tokens: None,
            extra: BTreeMap::new(),
        }
    }
}

impl EndpointSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let url = url::Url::parse(&self.base_url)
            .map_err(|e| ConfigError::invalid("endpoint.base_url", format!("\"{}\": {e}", self.base_url)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(ConfigError::invalid("endpoint.base_url", "scheme must be http or https"));
        }
        if self.model_name.trim().is_empty() {
            return Err(ConfigError::invalid("endpoint.model_name", "must not be empty"));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(ConfigError::invalid("endpoint.timeout_secs", "must be positive"));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    Patient1,
    Patient2,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletAnswer {
    pub choice: Choice,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectAnswer {
    /// `None` when the reply never produced an in-range correlation.
    pub value: Option<f64>,
    pub raw: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("transient transport failure: {0}")]
    Transient(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Per-query failure. Unparseable answers are not errors; they come back as
/// `Choice::Invalid` / `value: None`.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnswerError {
    #[error("transient failure after retries: {0}")]
    Transient(String),
    #[error("endpoint protocol error: {0}")]
    Protocol(String),
    #[error("offline mode and no cached response for key {0}")]
    OfflineMiss(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Anything that can answer triplet and direct queries: the HTTP gateway or
/// the synthetic oracle.
pub trait AnswerSource: Sync {
    fn triplet(&self, cfg: &StudyConfig, query: &TripletQuery) -> Result<TripletAnswer, AnswerError>;
    fn direct(&self, cfg: &StudyConfig, query: &DirectQuery) -> Result<DirectAnswer, AnswerError>;
    fn stats(&self) -> RequestStats;
}

/// Trims and accepts exactly `1` or `2`.
pub fn parse_triplet(raw: &str) -> Option<Choice> {
    match raw.trim() {
        "1" => Some(Choice::Patient1),
        "2" => Some(Choice::Patient2),
        _ => None,
    }
}

/// Reads `correlation: <number>` from the final non-empty line,
/// case-insensitively, accepting only values in [-1, 1].
pub fn parse_direct(raw: &str) -> Option<f64> {
    let line = raw.lines().rev().find(|l| !l.trim().is_empty())?;
    let lower = line.to_ascii_lowercase();
    let at = lower.find("correlation:")?;
    let rest = line[at + "correlation:".len()..].trim_start();
    let bytes = rest.as_bytes();
    let mut end = 0;
    if matches!(bytes.first(), Some(b'+' | b'-')) {
        end = 1;
    }
    let digits_start = end;
    while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
        end += 1;
    }
    if end == digits_start {
        return None;
    }
    let v: f64 = rest[..end].parse().ok()?;
    (v.is_finite() && (-1.0..=1.0).contains(&v)).then_some(v)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestStats {
    /// Queries that needed the network (cache misses while online).
    pub sent: u64,
    pub cache_hits: u64,
    /// Queries whose final answer was unparseable.
    pub invalid: u64,
    pub transient_failures: u64,
    pub protocol_errors: u64,
    pub offline_misses: u64,
    /// Individual HTTP requests, including retries.
    pub http_requests: u64,
}

impl RequestStats {
    pub fn attempted(&self) -> u64 {
        self.sent + self.cache_hits + self.offline_misses
    }
}

#[derive(Debug, Default)]
pub struct RequestCounters {
    sent: AtomicU64,
    cache_hits: AtomicU64,
    invalid: AtomicU64,
    transient_failures: AtomicU64,
    protocol_errors: AtomicU64,
    offline_misses: AtomicU64,
    http_requests: AtomicU64,
}

impl RequestCounters {
    pub fn snapshot(&self) -> RequestStats {
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        RequestStats {
            sent: l(&self.sent),
            cache_hits: l(&self.cache_hits),
            invalid: l(&self.invalid),
            transient_failures: l(&self.transient_failures),
            protocol_errors: l(&self.protocol_errors),
            offline_misses: l(&self.offline_misses),
            http_requests: l(&self.http_requests),
        }
    }

    pub fn bump_sent(&self) {
        self.sent.fetch_add(1, Ordering::Relaxed);
    }

    pub fn bump_invalid(&self) {
        self.invalid.fetch_add(1, Ordering::Relaxed);
    }
}

pub struct Gateway<T: ChatTransport = HttpTransport> {
    endpoint: EndpointSpec,
    sampling: SamplingSpec,
    transport: T,
    cache: ResponseCache,
    offline: bool,
    backoff_base: Duration,
    counters: RequestCounters,
}

impl Gateway<HttpTransport> {
    pub fn http(endpoint: EndpointSpec, sampling: SamplingSpec, cache: ResponseCache) -> Result<Self, TransportError> {
        let transport = HttpTransport::new(&endpoint)?;
        Ok(Self::new(endpoint, sampling, transport, cache))
    }
}

impl<T: ChatTransport> Gateway<T> {
    pub fn new(endpoint: EndpointSpec, sampling: SamplingSpec, transport: T, cache: ResponseCache) -> Self {
        Self {
            endpoint,
            sampling,
            transport,
            cache,
            offline: false,
            backoff_base: Duration::from_secs(1),
            counters: RequestCounters::default(),
        }
    }

    /// Cache-only mode: a miss fails instead of reaching the network.
    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn ask_triplet(&self, prompt: &str, replicate_index: usize) -> Result<TripletAnswer, AnswerError> {
        let (raw, parsed) = self.ask(prompt, replicate_index, |raw| {
            parse_triplet(raw).map(|c| ParsedAnswer::Choice(if c == Choice::Patient1 { 1 } else { 2 }))
        })?;
        let choice = match parsed {
            ParsedAnswer::Choice(1) => Choice::Patient1,
            ParsedAnswer::Choice(2) => Choice::Patient2,
            _ => Choice::Invalid,
        };
        Ok(TripletAnswer { choice, raw })
    }

    pub fn ask_direct(&self, prompt: &str, replicate_index: usize) -> Result<DirectAnswer, AnswerError> {
        let (raw, parsed) = self.ask(prompt, replicate_index, |raw| parse_direct(raw).map(ParsedAnswer::Correlation))?;
        let value = match parsed {
            ParsedAnswer::Correlation(v) => Some(v),
            _ => None,
        };
        Ok(DirectAnswer { value, raw })
    }

    fn ask(
        &self,
        prompt: &str,
        replicate_index: usize,
        parse: impl Fn(&str) -> Option<ParsedAnswer>,
    ) -> Result<(String, ParsedAnswer), AnswerError> {
        let key = cache_key(&self.endpoint.model_name, self.sampling.temperature, prompt, replicate_index);
        if let Some(rec) = self.cache.get(&key) {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok((rec.raw_response, rec.parsed));
        }
        if self.offline {
            self.counters.offline_misses.fetch_add(1, Ordering::Relaxed);
            return Err(AnswerError::OfflineMiss(key));
        }
        self.counters.sent.fetch_add(1, Ordering::Relaxed);

        let mut raw = String::new();
        let mut parsed = ParsedAnswer::Invalid;
        for _ in 0..=self.sampling.retry_limit {
            raw = self.request_with_backoff(prompt)?;
            if let Some(p) = parse(&raw) {
                parsed = p;
                break;
            }
        }
        if parsed == ParsedAnswer::Invalid {
            self.counters.invalid.fetch_add(1, Ordering::Relaxed);
        }
        let record = CacheRecord {
            key,
            prompt_digest: prompt_digest(prompt),
            replicate_index,
            raw_response: raw,
            parsed,
            timestamp: Utc::now(),
        };
        let stored = self.cache.insert(record).map_err(|e| AnswerError::Cache(e.to_string()))?;
        Ok((stored.raw_response, stored.parsed))
    }

    fn request_with_backoff(&self, prompt: &str) -> Result<String, AnswerError> {
        let mut delay = self.backoff_base;
        let mut attempt = 0;
        loop {
            self.counters.http_requests.fetch_add(1, Ordering::Relaxed);
            match self.transport.complete(&self.endpoint, &self.sampling, prompt) {
                Ok(text) => return Ok(text),
                Err(TransportError::Protocol(m)) => {
                    self.counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
                    return Err(AnswerError::Protocol(m));
                }
                Err(TransportError::Transient(m)) => {
                    if attempt >= self.sampling.retry_limit {
                        self.counters.transient_failures.fetch_add(1, Ordering::Relaxed);
                        return Err(AnswerError::Transient(m));
                    }
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

impl<T: ChatTransport> AnswerSource for Gateway<T> {
    fn triplet(&self, cfg: &StudyConfig, query: &TripletQuery) -> Result<TripletAnswer, AnswerError> {
        let prompt = render_triplet(cfg, query)?;
        self.ask_triplet(&prompt, query.replicate_index)
    }

    fn direct(&self, cfg: &StudyConfig, query: &DirectQuery) -> Result<DirectAnswer, AnswerError> {
        let prompt = render_direct(cfg, query)?;
        self.ask_direct(&prompt, query.replicate_index)
    }

    fn stats(&self) -> RequestStats {
        self.counters.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replies from a fixed script, then repeats the last entry.
    struct Scripted {
        replies: Mutex<Vec<Result<String, TransportError>>>,
        calls: AtomicU64,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<&str, TransportError>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies.into_iter().map(|r| r.map(str::to_string)).collect()),
                calls: AtomicU64::new(0),
            }
        }
    }

    impl ChatTransport for Scripted {
        fn complete(&self, _: &EndpointSpec, _: &SamplingSpec, _: &str) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut r = self.replies.lock().unwrap();
            if r.len() > 1 {
                r.pop().unwrap()
            } else {
                r.last().cloned().unwrap()
            }
        }
    }

    fn gateway(script: Vec<Result<&str, TransportError>>) -> Gateway<Scripted> {
        Gateway::new(EndpointSpec::default(), SamplingSpec::default(), Scripted::new(script), ResponseCache::in_memory())
            .backoff_base(Duration::from_millis(1))
    }

    #[test]
    fn strict_triplet_parsing() {
        assert_eq!(parse_triplet(" 2\n"), Some(Choice::Patient2));
        assert_eq!(parse_triplet("1"), Some(Choice::Patient1));
        assert_eq!(parse_triplet("Patient 1 is more similar"), None);
        assert_eq!(parse_triplet("12"), None);
    }

    #[test]
    fn direct_parsing() {
        assert_eq!(parse_direct("blah\ncorrelation: 0.65"), Some(0.65));
        assert_eq!(parse_direct("Correlation: 0.50\n\n"), Some(0.50));
        assert_eq!(parse_direct("x\n  CORRELATION:   -0.3  "), Some(-0.3));
        assert_eq!(parse_direct("correlation: -1.30"), None);
        assert_eq!(parse_direct("correlation: 0.5\nthanks"), None);
        assert_eq!(parse_direct("correlation: n/a"), None);
        assert_eq!(parse_direct(""), None);
    }

    #[test]
    fn retries_then_records_invalid() {
        let g = gateway(vec![Ok("Patient 1 is more similar")]);
        let a = g.ask_triplet("p", 0).unwrap();
        assert_eq!(a.choice, Choice::Invalid);
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 4);
        let s = g.stats();
        assert_eq!((s.sent, s.invalid, s.http_requests), (1, 1, 4));
        // the invalid outcome is cached too
        assert_eq!(g.ask_triplet("p", 0).unwrap().choice, Choice::Invalid);
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn parse_retry_can_recover() {
        let g = gateway(vec![Ok("maybe"), Ok(" 2\n")]);
        assert_eq!(g.ask_triplet("p", 0).unwrap().choice, Choice::Patient2);
        assert_eq!(g.stats().invalid, 0);
    }

    #[test]
    fn second_identical_ask_is_served_from_cache() {
        let g = gateway(vec![Ok("1")]);
        g.ask_triplet("p", 3).unwrap();
        g.ask_triplet("p", 3).unwrap();
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 1);
        g.ask_triplet("p", 4).unwrap();
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 2);
        let s = g.stats();
        assert_eq!((s.sent, s.cache_hits), (2, 1));
    }

    #[test]
    fn transient_failures_are_distinct_from_invalid() {
        let g = gateway(vec![Err(TransportError::Transient("down".into()))]);
        assert!(matches!(g.ask_triplet("p", 0), Err(AnswerError::Transient(_))));
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 4);
        assert_eq!(g.stats().transient_failures, 1);
        assert!(g.cache().is_empty());

        let g = gateway(vec![Err(TransportError::Transient("blip".into())), Ok("1")]);
        assert_eq!(g.ask_triplet("p", 0).unwrap().choice, Choice::Patient1);
    }

    #[test]
    fn protocol_errors_are_not_retried() {
        let g = gateway(vec![Err(TransportError::Protocol("bad".into()))]);
        assert!(matches!(g.ask_direct("p", 0), Err(AnswerError::Protocol(_))));
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn out_of_range_direct_is_invalid_after_retries() {
        let g = gateway(vec![Ok("reasoning\ncorrelation: -1.30")]);
        let a = g.ask_direct("p", 0).unwrap();
        assert_eq!(a.value, None);
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn offline_miss_is_an_error() {
        let g = gateway(vec![Ok("1")]).offline(true);
        assert!(matches!(g.ask_triplet("p", 0), Err(AnswerError::OfflineMiss(_))));
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn endpoint_validation() {
        let mut ep = EndpointSpec::default();
        ep.validate().unwrap();
        assert_eq!(ep.completions_url(), "http://127.0.0.1:8000/v1/chat/completions");
        ep.base_url = "not a url".into();
        assert!(ep.validate().is_err());
        ep.base_url = "http://x/".into();
        ep.model_name = " ".into();
        assert!(ep.validate().unwrap_err().to_string().contains("model_name"));
    }
}
