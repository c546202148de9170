//! Shared completion gateway.
//!
//! Wraps a backend with the context-limit precheck, bounded concurrency,
//! retries with exponential backoff and full jitter, and the cost ledger.
//! One gateway is shared by all pipeline workers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use webr_core::complete::{Complete, CompletionRequest, GatewayError, TokenCounter};
use webr_core::cost::{Completion, CostLedger};
use webr_core::mock::MockCompleter;
use webr_core::seed;

/// How a single backend attempt failed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    /// Worth retrying (429, 5xx, timeouts, connection resets).
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
    #[error("empty completion")]
    Empty,
}

/// One attempt against a model service.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, request: &CompletionRequest) -> Result<Completion, CallError>;
}

pub struct MockBackend {
    inner: MockCompleter<SharedCounter>,
}

impl MockBackend {
    pub fn new(counter: Arc<dyn TokenCounter>, empty_rate: f64) -> Self {
        let mut inner = MockCompleter::new(SharedCounter(counter));
        inner.empty_rate = empty_rate;
        Self { inner }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        webr_core::mock::BACKEND_ID
    }

    fn call(&self, request: &CompletionRequest) -> Result<Completion, CallError> {
        match self.inner.complete(request) {
            Ok(c) => Ok(c),
            Err(GatewayError::EmptyCompletion) => Err(CallError::Empty),
            Err(e) => Err(CallError::Permanent(e.to_string())),
        }
    }
}

/// Lets an `Arc<dyn TokenCounter>` be used where a sized counter is needed.
#[derive(Clone)]
pub struct SharedCounter(pub Arc<dyn TokenCounter>);

impl TokenCounter for SharedCounter {
    fn count(&self, text: &str) -> u64 {
        self.0.count(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Full jitter: uniform in `[0, base * factor^retry)`, drawn from `key`.
    pub fn delay(&self, retry: u32, key: u64) -> Duration {
        let cap = self.base_delay.as_secs_f64() * self.factor.powi(retry as i32);
        Duration::from_secs_f64(cap * seed::unit_f64(seed::mix64(key ^ retry as u64)))
    }
}

/// Counting semaphore that also remembers its peak occupancy.
struct InFlight {
    max: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().unwrap();
        while s.0 >= self.max {
            s = self.freed.wait(s).unwrap();
        }
        s.0 += 1;
        s.1 = s.1.max(s.0);
        Permit(self)
    }

    fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().unwrap();
        s.0 -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub attempts: u64,
    pub retries: u64,
    pub empty: u64,
    pub peak_in_flight: usize,
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    counter: Arc<dyn TokenCounter>,
    context_limit: u64,
    retry: RetryPolicy,
    in_flight: InFlight,
    ledger: Mutex<CostLedger>,
    requests: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
    empty: AtomicU64,
}

impl Gateway {
    pub fn new(
        backend: Box<dyn Backend>,
        counter: Arc<dyn TokenCounter>,
        max_in_flight: usize,
        context_limit: u64,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            backend,
            counter,
            context_limit,
            retry,
            in_flight: InFlight::new(max_in_flight),
            ledger: Mutex::new(CostLedger::new()),
            requests: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            empty: AtomicU64::new(0),
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn counter(&self) -> &Arc<dyn TokenCounter> {
        &self.counter
    }

    /// Snapshot of usage recorded by this gateway.
    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            empty: self.empty.load(Ordering::Relaxed),
            peak_in_flight: self.in_flight.peak(),
        }
    }
}

impl Complete for Gateway {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        if request.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let estimated = self.counter.count(&request.prompt);
        let max_output = request.params.max_output_tokens as u64;
        if estimated + max_output > self.context_limit {
            return Err(GatewayError::ContextLimit {
                estimated,
                max_output,
                limit: self.context_limit,
            });
        }
        self.requests.fetch_add(1, Ordering::Relaxed);

        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let started = Instant::now();
            let result = {
                let _permit = self.in_flight.acquire();
                self.backend.call(request)
            };
            match result {
                Ok(mut c) => {
                    if c.text.trim().is_empty() {
                        self.empty.fetch_add(1, Ordering::Relaxed);
                        return Err(GatewayError::EmptyCompletion);
                    }
                    if c.latency_ms == 0 {
                        c.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    self.ledger.lock().unwrap().record(&request.stage, &c);
                    if attempt > 1 {
                        log::debug!("stage {} succeeded after {attempt} attempts", request.stage);
                    }
                    return Ok(c);
                }
                Err(CallError::Empty) => {
                    self.empty.fetch_add(1, Ordering::Relaxed);
                    return Err(GatewayError::EmptyCompletion);
                }
                Err(CallError::Transient(msg)) if attempt < self.retry.max_attempts => {
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    let delay = self.retry.delay(attempt - 1, request.seed);
                    log::warn!(
                        "stage {}: attempt {attempt} failed ({msg}), retrying in {:?}",
                        request.stage,
                        delay
                    );
                    std::thread::sleep(delay);
                }
                Err(CallError::Transient(message)) | Err(CallError::Permanent(message)) => {
                    return Err(GatewayError::Backend {
                        message,
                        attempts: attempt,
                    });
                }
            }
        }
    }
}

/// OpenAI-style `/chat/completions` backend.
pub mod http {
    use super::*;

    #[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
    pub struct ChatMessage {
        pub role: String,
        pub content: String,
    }

    #[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
    pub struct ChatRequest {
        pub model: String,
        pub messages: Vec<ChatMessage>,
        pub temperature: f64,
        pub top_p: f64,
        pub max_tokens: u32,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
    }

    impl ChatRequest {
        pub fn from_request(req: &CompletionRequest) -> Self {
            Self {
                model: req.params.model.clone(),
                messages: vec![ChatMessage {
                    role: "user".into(),
                    content: req.prompt.clone(),
                }],
                temperature: req.params.temperature,
                top_p: req.params.top_p,
                max_tokens: req.params.max_output_tokens,
                // Some providers reject seeds above i64::MAX.
                seed: Some(req.seed >> 1),
            }
        }
    }

    #[derive(Debug, Clone, Deserialize)]
    pub struct ChatResponse {
        pub choices: Vec<Choice>,
        #[serde(default)]
        pub usage: Option<Usage>,
    }

    #[derive(Debug, Clone, Deserialize)]
    pub struct Choice {
        pub message: ResponseMessage,
    }

    #[derive(Debug, Clone, Deserialize)]
    pub struct ResponseMessage {
        #[serde(default)]
        pub content: Option<String>,
    }

    #[derive(Debug, Clone, Copy, Deserialize)]
    pub struct Usage {
        pub prompt_tokens: u64,
        pub completion_tokens: u64,
    }

    pub fn classify_status(status: u16, body: &str) -> CallError {
        let msg = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
        if status == 408 || status == 409 || status == 429 || status >= 500 {
            CallError::Transient(msg)
        } else {
            CallError::Permanent(msg)
        }
    }

    /// Turns a response body into a completion. Missing usage falls back to
    /// the configured counter.
    pub fn parse_response(
        body: &str,
        prompt: &str,
        counter: &dyn TokenCounter,
        backend_id: &str,
    ) -> Result<Completion, CallError> {
        let resp: ChatResponse = serde_json::from_str(body)
            .map_err(|e| CallError::Permanent(format!("unparseable response: {e}")))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(CallError::Empty);
        }
        let (input_tokens, output_tokens) = match resp.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (counter.count(prompt), counter.count(&text)),
        };
        Ok(Completion {
            text,
            input_tokens,
            output_tokens,
            backend_id: backend_id.to_string(),
            latency_ms: 0,
        })
    }

    pub struct HttpBackend {
        agent: ureq::Agent,
        endpoint: String,
        api_key: Option<String>,
        counter: Arc<dyn TokenCounter>,
        id: String,
    }

    impl HttpBackend {
        pub fn new(
            base_url: &str,
            api_key: Option<String>,
            counter: Arc<dyn TokenCounter>,
            timeout: Duration,
        ) -> Self {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(timeout))
                .build()
                .into();
            Self {
                agent,
                endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
                api_key,
                counter,
                id: format!("http:{}", base_url.trim_end_matches('/')),
            }
        }
    }

    impl Backend for HttpBackend {
        fn id(&self) -> &str {
            &self.id
        }

        fn call(&self, request: &CompletionRequest) -> Result<Completion, CallError> {
            let body = ChatRequest::from_request(request);
            let mut req = self.agent.post(&self.endpoint);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(&body)
                .map_err(|e| CallError::Transient(format!("request failed: {e}")))?;
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| CallError::Transient(format!("reading body: {e}")))?;
            if !(200..300).contains(&status) {
                return Err(classify_status(status, &text));
            }
            parse_response(&text, &request.prompt, self.counter.as_ref(), &self.id)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use webr_core::complete::ApproxTokenCounter;
    use webr_core::cost::GenerationParams;

    fn counter() -> Arc<dyn TokenCounter> {
        Arc::new(ApproxTokenCounter)
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            base_delay: Duration::ZERO,
            ..RetryPolicy::default()
        }
    }

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            params: GenerationParams::gpt_4o_mini(),
            stage: "persona".into(),
            seed: 11,
        }
    }

    /// Fails with the scripted errors first, then answers.
    struct Scripted {
        failures: Mutex<Vec<CallError>>,
        calls: AtomicUsize,
    }

    impl Backend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn call(&self, _: &CompletionRequest) -> Result<Completion, CallError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if let Some(e) = self.failures.lock().unwrap().pop() {
                return Err(e);
            }
            Ok(Completion {
                text: "ok".into(),
                input_tokens: 7,
                output_tokens: 2,
                backend_id: "scripted".into(),
                latency_ms: 1,
            })
        }
    }

    fn scripted(failures: Vec<CallError>) -> Box<Scripted> {
        Box::new(Scripted {
            failures: Mutex::new(failures),
            calls: AtomicUsize::new(0),
        })
    }

    #[test]
    fn retries_transient_errors() {
        let b = scripted(vec![
            CallError::Transient("429".into()),
            CallError::Transient("429".into()),
        ]);
        let g = Gateway::new(b, counter(), 4, 128_000, fast_retry());
        let c = g.complete(&req("hi")).unwrap();
        assert_eq!(c.text, "ok");
        assert_eq!(g.stats().attempts, 3);
        assert_eq!(g.stats().retries, 2);
        assert_eq!(g.ledger().calls("persona"), 1);
    }

    #[test]
    fn gives_up_after_attempt_cap() {
        let b = scripted(vec![CallError::Transient("503".into()); 5]);
        let g = Gateway::new(b, counter(), 4, 128_000, fast_retry());
        let err = g.complete(&req("hi")).unwrap_err();
        assert!(matches!(err, GatewayError::Backend { attempts: 5, .. }));
        assert_eq!(g.ledger().calls("persona"), 0);
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let b = scripted(vec![CallError::Permanent("401".into())]);
        let g = Gateway::new(b, counter(), 4, 128_000, fast_retry());
        assert!(matches!(
            g.complete(&req("hi")),
            Err(GatewayError::Backend { attempts: 1, .. })
        ));
    }

    #[test]
    fn context_limit_precheck_skips_backend() {
        let b = scripted(vec![]);
        let g = Gateway::new(b, counter(), 4, 8192, fast_retry());
        let mut r = req(&"x".repeat(36_000)); // ~9000 tokens
        r.params.max_output_tokens = 100;
        assert!(matches!(
            g.complete(&r),
            Err(GatewayError::ContextLimit { estimated: 9000, limit: 8192, .. })
        ));
        assert_eq!(g.stats().attempts, 0);
    }

    #[test]
    fn empty_completion_is_distinct() {
        let g = Gateway::new(Box::new(MockBackend::new(counter(), 1.0)), counter(), 1, 128_000, fast_retry());
        assert_eq!(g.complete(&req("hi")), Err(GatewayError::EmptyCompletion));
        assert_eq!(g.stats().empty, 1);
    }

    #[test]
    fn mock_through_gateway_is_deterministic() {
        let g = Gateway::new(Box::new(MockBackend::new(counter(), 0.0)), counter(), 2, 128_000, fast_retry());
        let a = g.complete(&req("same prompt")).unwrap();
        let b = g.complete(&req("same prompt")).unwrap();
        assert_eq!(a.text, b.text);
    }

    struct Slow {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for Slow {
        fn id(&self) -> &str {
            "slow"
        }
        fn call(&self, _: &CompletionRequest) -> Result<Completion, CallError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(Completion {
                text: "ok".into(),
                input_tokens: 1,
                output_tokens: 1,
                backend_id: "slow".into(),
                latency_ms: 2,
            })
        }
    }

    #[test]
    fn in_flight_is_bounded() {
        let g = Arc::new(Gateway::new(
            Box::new(Slow {
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            }),
            counter(),
            3,
            128_000,
            fast_retry(),
        ));
        std::thread::scope(|s| {
            for _ in 0..12 {
                let g = Arc::clone(&g);
                s.spawn(move || {
                    for _ in 0..10 {
                        g.complete(&req("x")).unwrap();
                    }
                });
            }
        });
        let stats = g.stats();
        assert!(stats.peak_in_flight <= 3, "peak {}", stats.peak_in_flight);
        assert_eq!(g.ledger().calls("persona"), 120);
        assert_eq!(g.ledger().total().input_tokens, 120);
    }

    #[test]
    fn jitter_stays_under_cap() {
        let p = RetryPolicy::default();
        for retry in 0..4 {
            for key in 0..50 {
                assert!(p.delay(retry, key) < Duration::from_secs(1 << retry));
            }
        }
    }

    #[test]
    fn http_wire_format() {
        let body = serde_json::to_value(http::ChatRequest::from_request(&req("hello"))).unwrap();
        assert_eq!(body["model"], "gpt-4o-mini");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hello");
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["top_p"], 1.0);

        let c = http::parse_response(
            r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":5,"completion_tokens":1,"total_tokens":6}}"#,
            "hello",
            &ApproxTokenCounter,
            "http",
        )
        .unwrap();
        assert_eq!((c.input_tokens, c.output_tokens), (5, 1));
        let c = http::parse_response(
            r#"{"choices":[{"message":{"content":"four"}}]}"#,
            "12345678",
            &ApproxTokenCounter,
            "http",
        )
        .unwrap();
        assert_eq!((c.input_tokens, c.output_tokens), (2, 1));
        assert_eq!(
            http::parse_response(r#"{"choices":[{"message":{"content":""}}]}"#, "x", &ApproxTokenCounter, "h"),
            Err(CallError::Empty)
        );
        assert!(matches!(http::classify_status(429, ""), CallError::Transient(_)));
        assert!(matches!(http::classify_status(503, ""), CallError::Transient(_)));
        assert!(matches!(http::classify_status(400, ""), CallError::Permanent(_)));
    }
}
