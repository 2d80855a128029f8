//! Agent abstraction shared by curation (generator and judge) and relevance
//! scoring.
//!
//! An agent is either a remote chat-completion endpoint (`http://` or
//! `https://`) or a deterministic offline stub (`stub:<behavior>`). Remote
//! calls POST `{"model", "messages", "temperature"}` and expect a 2xx answer
//! carrying `{"content": "..."}`.

mod stub;
mod transport;

use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use stub::{mutate_answer, StubBehavior};
pub use transport::{HttpResponse, HttpTransport, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub name: String,
    pub endpoint: String,
    /// Model name sent over the wire; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    /// Transport attempts per call (first try plus retries).
    #[serde(default = "default_attempts")]
    pub max_rounds_per_call: u32,
    /// Overrides the built-in template for every purpose this agent serves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
}

fn default_attempts() -> u32 {
    4
}

impl AgentSpec {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            model: None,
            temperature: 0.0,
            max_rounds_per_call: default_attempts(),
            prompt_template: None,
        }
    }

    pub fn stub(name: impl Into<String>, behavior: &str) -> Self {
        Self::new(name, format!("stub:{behavior}"))
    }

    pub fn validate(&self) -> Result<()> {
        self.endpoint_kind()?;
        if !(self.temperature >= 0.0) {
            return Err(Error::validation(format!(
                "agent {}: temperature must be >= 0",
                self.name
            )));
        }
        if self.max_rounds_per_call == 0 {
            return Err(Error::validation(format!(
                "agent {}: max_rounds_per_call must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn endpoint_kind(&self) -> Result<Endpoint> {
        if let Some(behavior) = self.endpoint.strip_prefix("stub:") {
            return Ok(Endpoint::Stub(behavior.parse()?));
        }
        if self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://") {
            return Ok(Endpoint::Http(self.endpoint.clone()));
        }
        Err(Error::validation(format!(
            "agent {}: endpoint '{}' must use http(s) or stub",
            self.name, self.endpoint
        )))
    }

    pub fn fill(&self, vars: &PromptVars) -> Prompt {
        let template = self
            .prompt_template
            .as_deref()
            .unwrap_or_else(|| vars.purpose.default_template(vars.include_ground_truth));
        Prompt::fill(template, vars.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Http(String),
    Stub(StubBehavior),
}

/// What an agent call is for. Determines the default template and, for
/// stubs, which rule produces the reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Sample an answer from the target model.
    Generate,
    /// Pick the most hallucinated candidate, or reply `NONE`.
    Select,
    /// Write a new hallucinated answer from the ground truth.
    Hallucinate,
    /// Rate the clinical relevance of a dispreferred answer.
    Score,
}

impl Purpose {
    pub fn default_template(self, include_ground_truth: bool) -> &'static str {
        match self {
            Purpose::Generate => include_str!("../../templates/generate.txt"),
            Purpose::Select => include_str!("../../templates/select.txt"),
            Purpose::Hallucinate => include_str!("../../templates/hallucinate.txt"),
            Purpose::Score if include_ground_truth => include_str!("../../templates/score.txt"),
            Purpose::Score => include_str!("../../templates/score_no_gt.txt"),
        }
    }

    fn system_message(self) -> &'static str {
        match self {
            Purpose::Generate => "You are a medical vision-language assistant.",
            Purpose::Select | Purpose::Hallucinate => "You are a careful medical data curator.",
            Purpose::Score => "You are a medical expert evaluating clinical relevance.",
        }
    }
}

/// Values substituted into `{query}`, `{ground_truth}`, `{candidate}`,
/// `{candidates}` and `{prior_score}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVars {
    pub purpose: Purpose,
    pub query: String,
    pub ground_truth: String,
    pub candidate: String,
    pub candidates: Vec<String>,
    pub prior_score: Option<f64>,
    /// Position of this request within a batch of generator samples.
    pub sample_index: usize,
    pub include_ground_truth: bool,
}

impl PromptVars {
    pub fn new(purpose: Purpose, query: &str, ground_truth: &str) -> Self {
        Self {
            purpose,
            query: query.to_string(),
            ground_truth: ground_truth.to_string(),
            candidate: String::new(),
            candidates: Vec::new(),
            prior_score: None,
            sample_index: 0,
            include_ground_truth: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub vars: PromptVars,
}

impl Prompt {
    pub fn fill(template: &str, vars: PromptVars) -> Self {
        let candidates = vars
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        let prior = vars
            .prior_score
            .map(format_score)
            .unwrap_or_else(|| "none".to_string());
        let ground_truth = if vars.include_ground_truth {
            vars.ground_truth.as_str()
        } else {
            "(withheld)"
        };
        let text = template
            .replace("{query}", &vars.query)
            .replace("{ground_truth}", ground_truth)
            .replace("{candidates}", &candidates)
            .replace("{candidate}", &vars.candidate)
            .replace("{prior_score}", &prior);
        Self { text, vars }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentReply {
    pub text: String,
    pub parsed_score: Option<f64>,
}

impl AgentReply {
    pub fn new(text: String) -> Self {
        let parsed_score = first_number(&text).filter(|v| v.is_finite());
        Self { text, parsed_score }
    }
}

pub(crate) fn format_score(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?").unwrap())
}

fn first_number(text: &str) -> Option<f64> {
    number_regex()
        .find(text)
        .and_then(|m| m.as_str().parse::<f64>().ok())
}

/// First numeric literal in `text`, clamped to `[low, high]`.
pub fn parse_score(text: &str, low: f64, high: f64) -> Result<f64> {
    if !(low < high) {
        return Err(Error::validation(format!(
            "score scale [{low}, {high}] is empty"
        )));
    }
    let value = first_number(text)
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::format(format!("no numeric score in reply: {text:?}")))?;
    Ok(value.clamp(low, high))
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(250),
        }
    }
}

/// Dispatches agent calls to stubs or to an HTTP transport.
pub struct AgentClient {
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
    api_key: Option<String>,
}

impl Default for AgentClient {
    fn default() -> Self {
        Self::new(Box::new(HttpTransport::default()))
    }
}

impl AgentClient {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self {
            transport,
            retry: RetryPolicy::default(),
            api_key: std::env::var("AGENT_API_KEY")
                .ok()
                .filter(|k| !k.is_empty()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn call(&self, spec: &AgentSpec, prompt: &Prompt, rng: &mut Rng) -> Result<AgentReply> {
        if prompt.text.trim().is_empty() {
            return Err(Error::validation(format!(
                "agent {}: empty prompt",
                spec.name
            )));
        }
        match spec.endpoint_kind()? {
            Endpoint::Stub(behavior) => behavior.reply(spec, prompt, rng),
            Endpoint::Http(url) => self.call_http(spec, &url, prompt),
        }
    }

    fn call_http(&self, spec: &AgentSpec, url: &str, prompt: &Prompt) -> Result<AgentReply> {
        let body = serde_json::json!({
            "model": spec.model.as_deref().unwrap_or(&spec.name),
            "messages": [
                {"role": "system", "content": prompt.vars.purpose.system_message()},
                {"role": "user", "content": prompt.text},
            ],
            "temperature": spec.temperature,
        });
        let attempts = spec.max_rounds_per_call.max(1);
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
                log::warn!(
                    "agent {}: retrying after transport error ({last_err}), attempt {}/{attempts}",
                    spec.name,
                    attempt + 1
                );
                std::thread::sleep(delay);
            }
            match self
                .transport
                .post_json(url, &body, self.api_key.as_deref())
            {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return parse_wire_reply(&resp.body)
                }
                Ok(resp) => {
                    return Err(Error::Protocol {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(e) => last_err = e,
            }
        }
        Err(Error::Transport {
            attempts,
            message: last_err,
        })
    }
}

fn parse_wire_reply(body: &str) -> Result<AgentReply> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| Error::format(format!("agent reply is not JSON: {e}")))?;
    let content = value
        .get("content")
        .and_then(|c| c.as_str())
        .or_else(|| {
            value
                .pointer("/choices/0/message/content")
                .and_then(|c| c.as_str())
        })
        .ok_or_else(|| Error::format("agent reply has no string 'content' field"))?;
    Ok(AgentReply::new(content.to_string()))
}

/// Call an agent with the default HTTP client for remote endpoints.
pub fn call_agent(spec: &AgentSpec, prompt: &Prompt, rng: &mut Rng) -> Result<AgentReply> {
    AgentClient::default().call(spec, prompt, rng)
}
