//! Generative model backends.
//!
//! [`ToyBackend`] memorizes input→output pairs and defines a smoothed
//! autoregressive distribution around them, which makes forced-decoding
//! probabilities computable by hand. [`RemoteBackend`] talks to a model
//! server over HTTP/JSON:
//!
//! - `POST /v1/generate` `{"input", "mode", "beam_size", "top_p", "temperature", "max_tokens", "seed"}` → `{"output"}`
//! - `POST /v1/force` `{"input", "output"}` → `{"token_logprobs": [...]}`

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::EncodedPair;

/// Reserved token closing every toy-model sequence.
pub const END_MARKER: &str = "</s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam,
    Nucleus,
}

fn one() -> u32 {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    128
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    #[serde(default)]
    pub mode: DecodeMode,
    #[serde(default = "one")]
    pub beam_size: u32,
    #[serde(default = "unit")]
    pub top_p: f64,
    #[serde(default = "unit")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: 1,
            top_p: 1.0,
            temperature: 1.0,
            max_tokens: 128,
            seed: None,
        }
    }
}

impl DecodeOptions {
    pub fn beam(beam_size: u32) -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_size,
            ..Self::default()
        }
    }

    pub fn nucleus(top_p: f64, temperature: f64, seed: Option<u64>) -> Self {
        Self {
            mode: DecodeMode::Nucleus,
            top_p,
            temperature,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDecodeOptions(m.to_string()));
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        match self.mode {
            DecodeMode::Greedy => {}
            DecodeMode::Beam if self.beam_size == 0 => return bad("beam_size must be positive"),
            DecodeMode::Beam => {}
            DecodeMode::Nucleus => {
                if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                    return bad("top_p must lie in (0, 1]");
                }
                if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                    return bad("temperature must be positive");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub output: String,
    /// Natural-log probability per generated token, when the backend reports them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

/// A text-to-text model that can generate and score forced outputs.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, input: &str, opts: &DecodeOptions) -> Result<GenerationResult>;

    /// Log-probabilities of each token of `forced_output`, followed by the
    /// end of sequence, conditioned on `input`.
    fn force_score(&self, input: &str, forced_output: &str) -> Result<Vec<f64>>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn generate(&self, input: &str, opts: &DecodeOptions) -> Result<GenerationResult> {
        (**self).generate(input, opts)
    }
    fn force_score(&self, input: &str, forced_output: &str) -> Result<Vec<f64>> {
        (**self).force_score(input, forced_output)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn generate(&self, input: &str, opts: &DecodeOptions) -> Result<GenerationResult> {
        (**self).generate(input, opts)
    }
    fn force_score(&self, input: &str, forced_output: &str) -> Result<Vec<f64>> {
        (**self).force_score(input, forced_output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    /// Probability mass spread uniformly over the vocabulary at each step.
    pub alpha: f64,
}

impl Default for ToyModelParams {
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

#[derive(Debug, Clone)]
struct Memorized {
    input: String,
    input_tokens: HashSet<String>,
    output: String,
    output_tokens: Vec<String>,
}

/// Deterministic memorizing model.
///
/// Given the memorized continuation `m_1..m_k, END` of the nearest input,
/// the next-token distribution while the forced prefix still follows `m` is
/// `(1 - alpha) + alpha / V` for `m_i` and `alpha / V` for every other
/// vocabulary token; after the first divergence every token gets `1 / V`.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    params: ToyModelParams,
    entries: Vec<Memorized>,
    exact: HashMap<String, usize>,
    vocabulary: BTreeSet<String>,
}

fn ws_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

impl ToyBackend {
    /// Memorizes `pairs`. Repeated inputs must agree on their output.
    pub fn train<'a, I>(pairs: I, params: ToyModelParams) -> Result<Self>
    where
        I: IntoIterator<Item = &'a EncodedPair>,
    {
        Self::from_memory(pairs.into_iter().map(|p| (p.input.as_str(), p.output.as_str())), params)
    }

    pub fn from_memory<'a, I>(pairs: I, params: ToyModelParams) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        if !(params.alpha > 0.0 && params.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                params.alpha
            )));
        }
        let mut memory: BTreeMap<&str, &str> = BTreeMap::new();
        for (input, output) in pairs {
            if let Some(prev) = memory.insert(input, output) {
                if prev != output {
                    return Err(Error::ConflictingPairs(input.to_string()));
                }
            }
        }
        let mut vocabulary: BTreeSet<String> = BTreeSet::new();
        vocabulary.insert(END_MARKER.to_string());
        let mut entries = Vec::with_capacity(memory.len());
        for (input, output) in memory {
            let output_tokens: Vec<String> = ws_tokens(output).map(str::to_string).collect();
            vocabulary.extend(output_tokens.iter().cloned());
            entries.push(Memorized {
                input: input.to_string(),
                input_tokens: ws_tokens(input).map(str::to_string).collect(),
                output: output.to_string(),
                output_tokens,
            });
        }
        let exact = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.input.clone(), i))
            .collect();
        Ok(Self {
            params,
            entries,
            exact,
            vocabulary,
        })
    }

    pub fn params(&self) -> ToyModelParams {
        self.params
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Memorized entry for `input`: exact match, else highest token
    /// Jaccard similarity, ties to the lexicographically smallest input.
    fn nearest(&self, input: &str) -> Result<&Memorized> {
        if let Some(&i) = self.exact.get(input) {
            return Ok(&self.entries[i]);
        }
        let query: HashSet<&str> = ws_tokens(input).collect();
        let mut best: Option<(&Memorized, f64)> = None;
        // entries are sorted by input, so a strict `>` keeps the smallest on ties
        for e in &self.entries {
            let inter = e.input_tokens.iter().filter(|t| query.contains(t.as_str())).count();
            let union = e.input_tokens.len() + query.len() - inter;
            let sim = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((e, sim));
            }
        }
        best.map(|(e, _)| e).ok_or(Error::EmptyModel)
    }

    fn score_tokens<'a>(&self, memorized: &[String], forced: impl Iterator<Item = &'a str>) -> Vec<f64> {
        let v = self.vocab_size() as f64;
        let alpha = self.params.alpha;
        let on_path = ((1.0 - alpha) + alpha / v).ln();
        let off_path = (alpha / v).ln();
        let uniform = (1.0 / v).ln();
        let expected = memorized.iter().map(String::as_str).chain(std::iter::once(END_MARKER));
        let mut expected = expected.fuse();
        let mut diverged = false;
        forced
            .chain(std::iter::once(END_MARKER))
            .map(|tok| {
                if diverged {
                    return uniform;
                }
                if expected.next() == Some(tok) {
                    on_path
                } else {
                    diverged = true;
                    off_path
                }
            })
            .collect()
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn generate(&self, input: &str, opts: &DecodeOptions) -> Result<GenerationResult> {
        opts.validate()?;
        let m = self.nearest(input)?;
        let limit = opts.max_tokens as usize;
        let output = if m.output_tokens.len() > limit {
            m.output_tokens[..limit].join(" ")
        } else {
            m.output.clone()
        };
        let logprobs = self.score_tokens(&m.output_tokens, ws_tokens(&output));
        Ok(GenerationResult {
            output,
            token_logprobs: Some(logprobs),
        })
    }

    fn force_score(&self, input: &str, forced_output: &str) -> Result<Vec<f64>> {
        if forced_output.trim().is_empty() {
            return Err(Error::EmptyForcedOutput);
        }
        let m = self.nearest(input)?;
        Ok(self.score_tokens(&m.output_tokens, ws_tokens(forced_output)))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            free: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Request body of `POST /v1/generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub input: String,
    #[serde(flatten)]
    pub options: DecodeOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub output: String,
}

/// Request body of `POST /v1/force`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceRequest {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceResponse {
    pub token_logprobs: Vec<f64>,
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// HTTP client for a remote model server.
pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
    in_flight: InFlight,
    max_input_tokens: Option<usize>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base_url", &self.base_url)
            .field("max_input_tokens", &self.max_input_tokens)
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
            in_flight: InFlight::new(DEFAULT_MAX_IN_FLIGHT),
            max_input_tokens: None,
        }
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = InFlight::new(limit);
        self
    }

    /// Inputs longer than `limit` whitespace tokens lose their tail, which
    /// is where the encoder puts the context slot.
    pub fn with_max_input_tokens(mut self, limit: usize) -> Self {
        self.max_input_tokens = Some(limit);
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn prepare_input<'a>(&self, input: &'a str) -> &'a str {
        match self.max_input_tokens {
            Some(limit) => truncate_tokens(input, limit),
            None => input,
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, path: &str, body: &Req) -> Result<Resp> {
        let _permit = self.in_flight.acquire();
        let url = format!("{}{}", self.base_url, path);
        let mut response = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::BackendUnavailable(format!("{url}: {e}")))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::BackendUnavailable(format!("{url}: reading body: {e}")))?;
        if !status.is_success() {
            return Err(Error::BackendUnavailable(format!("{url}: HTTP {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::BackendUnavailable(format!("{url}: malformed body ({e}): {text}")))
    }
}

/// Keeps the first `limit` whitespace-separated tokens of `text`.
pub fn truncate_tokens(text: &str, limit: usize) -> &str {
    let mut count = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                in_token = false;
                if count == limit {
                    return &text[..i];
                }
            }
        } else if !in_token {
            in_token = true;
            count += 1;
            if count > limit {
                return text[..i].trim_end();
            }
        }
    }
    text
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate(&self, input: &str, opts: &DecodeOptions) -> Result<GenerationResult> {
        opts.validate()?;
        let request = GenerateRequest {
            input: self.prepare_input(input).to_string(),
            options: *opts,
        };
        let response: GenerateResponse = self.post("/v1/generate", &request)?;
        Ok(GenerationResult {
            output: response.output,
            token_logprobs: None,
        })
    }

    fn force_score(&self, input: &str, forced_output: &str) -> Result<Vec<f64>> {
        if forced_output.trim().is_empty() {
            return Err(Error::EmptyForcedOutput);
        }
        let request = ForceRequest {
            input: self.prepare_input(input).to_string(),
            output: forced_output.to_string(),
        };
        let response: ForceResponse = self.post("/v1/force", &request)?;
        if response.token_logprobs.iter().any(|lp| lp.is_nan() || *lp > 0.0) {
            return Err(Error::BackendUnavailable(format!(
                "server returned a positive or NaN log-probability: {:?}",
                response.token_logprobs
            )));
        }
        Ok(response.token_logprobs)
    }
}

/// Sum of log-probabilities and its exponent.
pub fn sequence_probability(logprobs: &[f64]) -> (f64, f64) {
    let sum: f64 = logprobs.iter().sum();
    (sum, sum.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const INPUT: &str = "$answer$ ; $explanation$ ; $question$ = Which surface is best for rollerskating? ; $mcoptions$ = (A) gravel (B) sand (C) blacktop";
    const OUTPUT: &str = "$answer$ = blacktop ; $explanation$ = A wheeled vehicle requires smooth surfaces.";

    /// One memorized answer token; V = 10 with the end marker.
    fn ten_token_model() -> ToyBackend {
        ToyBackend::from_memory(
            [
                ("q1", "blacktop"),
                ("q2", "gravel sand"),
                ("q3", "grass mud ice"),
                ("q4", "snow rock wood"),
            ],
            ToyModelParams { alpha: 0.1 },
        )
        .unwrap()
    }

    #[test]
    fn exact_recall() {
        let toy = ToyBackend::from_memory([(INPUT, OUTPUT)], ToyModelParams::default()).unwrap();
        for opts in [DecodeOptions::default(), DecodeOptions::beam(4), DecodeOptions::nucleus(0.9, 0.7, Some(3))] {
            assert_eq!(toy.generate(INPUT, &opts).unwrap().output, OUTPUT);
        }
    }

    #[test]
    fn nearest_neighbour_fallback() {
        let toy = ToyBackend::from_memory(
            [(INPUT, OUTPUT), ("$answer$ ; $question$ = What gas do producers produce?", "$answer$ = oxygen")],
            ToyModelParams::default(),
        )
        .unwrap();
        // Jaccard 17/19 against INPUT versus 4/23 against the other
        let unseen = INPUT.replace("rollerskating?", "skating?");
        assert_eq!(toy.generate(&unseen, &DecodeOptions::default()).unwrap().output, OUTPUT);
    }

    #[test]
    fn jaccard_ties_go_to_smallest_input() {
        let toy = ToyBackend::from_memory([("b x", "second"), ("a x", "first")], ToyModelParams::default()).unwrap();
        assert_eq!(toy.generate("x", &DecodeOptions::default()).unwrap().output, "first");
    }

    #[test]
    fn empty_model() {
        let toy = ToyBackend::from_memory(std::iter::empty(), ToyModelParams::default()).unwrap();
        assert!(matches!(toy.generate("x", &DecodeOptions::default()), Err(Error::EmptyModel)));
        assert!(matches!(toy.force_score("x", "y"), Err(Error::EmptyModel)));
    }

    #[test]
    fn conflicting_pairs() {
        assert!(matches!(
            ToyBackend::from_memory([("x", "a"), ("x", "b")], ToyModelParams::default()),
            Err(Error::ConflictingPairs(_))
        ));
        assert!(ToyBackend::from_memory([("x", "a"), ("x", "a")], ToyModelParams::default()).is_ok());
    }

    #[test]
    fn vocabulary_size() {
        let toy = ToyBackend::from_memory([("x", "a b a c")], ToyModelParams::default()).unwrap();
        assert_eq!(toy.vocab_size(), 4);
        assert_eq!(ten_token_model().vocab_size(), 10);
    }

    #[test]
    fn forced_probabilities() {
        let toy = ten_token_model();
        let lp = toy.force_score("q1", "blacktop").unwrap();
        assert!((lp[0] - 0.91f64.ln()).abs() < 1e-12);
        assert!((lp[1] - 0.91f64.ln()).abs() < 1e-12);
        assert!((sequence_probability(&lp).1 - 0.8281).abs() < 1e-9);

        let lp = toy.force_score("q1", "sand").unwrap();
        assert!((lp[0] - 0.01f64.ln()).abs() < 1e-12);
        assert!((lp[1] - 0.1f64.ln()).abs() < 1e-12);
        assert!((sequence_probability(&lp).1 - 0.001).abs() < 1e-12);

        assert!(matches!(toy.force_score("q1", " "), Err(Error::EmptyForcedOutput)));
    }

    #[test]
    fn small_alpha_limit() {
        let toy = ToyBackend::from_memory([("x", "a b c")], ToyModelParams { alpha: 1e-9 }).unwrap();
        let p = sequence_probability(&toy.force_score("x", "a b c").unwrap()).1;
        assert!((p - 1.0).abs() < 1e-8);
        assert!(ToyBackend::from_memory([("x", "a")], ToyModelParams { alpha: 0.0 }).is_err());
    }

    #[test]
    fn max_tokens_truncates() {
        let toy = ToyBackend::from_memory([("x", "a b c d")], ToyModelParams::default()).unwrap();
        let opts = DecodeOptions { max_tokens: 2, ..DecodeOptions::default() };
        let g = toy.generate("x", &opts).unwrap();
        assert_eq!(g.output, "a b");
        assert!(g.token_logprobs.unwrap().iter().all(|lp| *lp <= 0.0));
    }

    #[test]
    fn decode_option_validation() {
        assert!(DecodeOptions::beam(0).validate().is_err());
        assert!(DecodeOptions::nucleus(0.0, 1.0, None).validate().is_err());
        assert!(DecodeOptions::nucleus(1.2, 1.0, None).validate().is_err());
        assert!(DecodeOptions::nucleus(0.9, 0.0, None).validate().is_err());
        assert!(DecodeOptions { max_tokens: 0, ..DecodeOptions::default() }.validate().is_err());
        // greedy ignores nucleus-only fields
        assert!(DecodeOptions { top_p: 7.0, ..DecodeOptions::default() }.validate().is_ok());
    }

    #[test]
    fn generate_request_wire_shape() {
        let req = GenerateRequest { input: "x".into(), options: DecodeOptions::nucleus(0.9, 0.7, Some(5)) };
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"input": "x", "mode": "nucleus", "beam_size": 1, "top_p": 0.9,
                               "temperature": 0.7, "max_tokens": 128, "seed": 5})
        );
        let back: GenerateRequest = serde_json::from_value(serde_json::json!({"input": "y"})).unwrap();
        assert_eq!(back.options, DecodeOptions::default());
    }

    #[test]
    fn truncation_keeps_head() {
        assert_eq!(truncate_tokens("a b  c d", 2), "a b");
        assert_eq!(truncate_tokens("a b", 5), "a b");
        assert_eq!(truncate_tokens("  a  b  ", 1), "  a");
        assert_eq!(truncate_tokens("a", 0), "");
    }

    #[test]
    fn unreachable_remote_is_backend_error() {
        let remote = RemoteBackend::new("http://127.0.0.1:1");
        let err = remote.generate("x", &DecodeOptions::default()).unwrap_err();
        assert!(err.is_backend(), "{err}");
    }

    fn vocab_sequence(vocab: Vec<String>) -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(proptest::sample::select(vocab), 1..4)
    }

    proptest! {
        #[test]
        fn distinct_candidates_sum_at_most_one(
            cands in proptest::collection::btree_set(
                vocab_sequence(ten_token_model().vocabulary().iter().filter(|t| *t != END_MARKER).cloned().collect()),
                1..12,
            ),
            which in 0usize..4,
        ) {
            let toy = ten_token_model();
            let input = ["q1", "q2", "q3", "q4"][which];
            let total: f64 = cands
                .iter()
                .map(|c| sequence_probability(&toy.force_score(input, &c.join(" ")).unwrap()).1)
                .sum();
            prop_assert!(total <= 1.0 + 1e-9, "{total}");
        }

        #[test]
        fn memorized_path_dominates(
            cand in vocab_sequence(ten_token_model().vocabulary().iter().filter(|t| *t != END_MARKER).cloned().collect()),
        ) {
            let toy = ten_token_model();
            let mem = sequence_probability(&toy.force_score("q4", "snow rock wood").unwrap()).1;
            let other = sequence_probability(&toy.force_score("q4", &cand.join(" ")).unwrap()).1;
            if cand.len() == 3 {
                prop_assert!(mem >= other);
            }
        }
    }
}
