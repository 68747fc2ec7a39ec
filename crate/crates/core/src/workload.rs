//! Synthetic multi-turn traces with Poisson session arrivals, and the token
//! content model that turns trace records into concrete prompts.
//!
//! A record carries only lengths. Prompt tokens are rebuilt on demand: every
//! prompt starts with the shared system prompt, turn 0 continues with its
//! document (if any) and a fresh question, and turn `t + 1` extends turn `t`'s
//! prompt with turn `t`'s output and new user tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Poisson, Zipf};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid trace spec: {field}: {message}")]
    InvalidSpec { field: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    LoogleLike,
    ScbenchLike,
    SharegptLike,
    Mixed,
}

/// One request of a trace file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub request_id: u64,
    pub session_id: u64,
    pub turn_index: u32,
    /// Seconds. Later turns are released this long after the previous turn's
    /// arrival, counted from the previous turn's completion.
    pub arrival_time: f64,
    /// Full prompt length, including the system prompt and earlier turns.
    pub input_len: u64,
    pub output_len: u64,
    pub shared_prefix_id: Option<u64>,
}

pub const TRACE_FIELDS: [&str; 7] = [
    "request_id",
    "session_id",
    "turn_index",
    "arrival_time",
    "input_len",
    "output_len",
    "shared_prefix_id",
];

fn default_system_prompt_len() -> u64 {
    1024
}
fn default_question_len() -> u64 {
    128
}
fn default_output_mean() -> f64 {
    256.0
}
fn default_think_time_mean() -> f64 {
    5.0
}
fn default_loogle_mean_len() -> f64 {
    24_000.0
}
fn default_loogle_documents() -> u64 {
    1000
}
fn default_zipf_exponent() -> f64 {
    1.1
}
fn default_scbench_mean_len() -> f64 {
    227_000.0
}
fn default_scbench_mean_turns() -> f64 {
    5.0
}
fn default_sharegpt_min_len() -> u64 {
    64
}
fn default_sharegpt_max_len() -> u64 {
    2400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub preset: Preset,
    /// Session arrivals per second.
    pub rate_lambda: f64,
    /// Seconds of arrivals. Ignored when `sessions` is set.
    #[serde(default)]
    pub duration: f64,
    /// Exact number of sessions to generate.
    #[serde(default)]
    pub sessions: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_system_prompt_len")]
    pub system_prompt_len: u64,
    #[serde(default = "default_question_len")]
    pub question_len: u64,
    #[serde(default = "default_output_mean")]
    pub output_mean: f64,
    #[serde(default = "default_think_time_mean")]
    pub think_time_mean: f64,
    /// Mean prompt length of a single-turn document question.
    #[serde(default = "default_loogle_mean_len")]
    pub loogle_mean_len: f64,
    /// Documents shared across sessions with Zipf popularity.
    #[serde(default = "default_loogle_documents")]
    pub loogle_documents: u64,
    #[serde(default = "default_zipf_exponent")]
    pub zipf_exponent: f64,
    /// Mean total sequence length of a multi-turn session.
    #[serde(default = "default_scbench_mean_len")]
    pub scbench_mean_len: f64,
    #[serde(default = "default_scbench_mean_turns")]
    pub scbench_mean_turns: f64,
    #[serde(default = "default_sharegpt_min_len")]
    pub sharegpt_min_len: u64,
    #[serde(default = "default_sharegpt_max_len")]
    pub sharegpt_max_len: u64,
}

impl TraceSpec {
    pub fn new(preset: Preset, rate_lambda: f64, duration: f64, seed: u64) -> Self {
        Self {
            preset,
            rate_lambda,
            duration,
            sessions: None,
            seed,
            system_prompt_len: default_system_prompt_len(),
            question_len: default_question_len(),
            output_mean: default_output_mean(),
            think_time_mean: default_think_time_mean(),
            loogle_mean_len: default_loogle_mean_len(),
            loogle_documents: default_loogle_documents(),
            zipf_exponent: default_zipf_exponent(),
            scbench_mean_len: default_scbench_mean_len(),
            scbench_mean_turns: default_scbench_mean_turns(),
            sharegpt_min_len: default_sharegpt_min_len(),
            sharegpt_max_len: default_sharegpt_max_len(),
        }
    }

    pub fn content(&self) -> ContentModel {
        ContentModel {
            system_prompt_len: self.system_prompt_len,
            question_len: self.question_len,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |field, message: &str| {
            Err(TraceError::InvalidSpec {
                field,
                message: message.to_string(),
            })
        };
        let fixed = self.system_prompt_len + self.question_len;
        if !(self.rate_lambda >= 0.0 && self.rate_lambda.is_finite()) {
            return bad("rate_lambda", "must be finite and >= 0");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration", "must be finite and >= 0");
        }
        if !(self.output_mean >= 1.0) {
            return bad("output_mean", "must be >= 1");
        }
        if !(self.think_time_mean >= 0.0 && self.think_time_mean.is_finite()) {
            return bad("think_time_mean", "must be finite and >= 0");
        }
        if !(self.loogle_mean_len > fixed as f64) {
            return bad("loogle_mean_len", "must exceed system_prompt_len + question_len");
        }
        if self.loogle_documents == 0 {
            return bad("loogle_documents", "must be >= 1");
        }
        if !(self.zipf_exponent > 0.0) {
            return bad("zipf_exponent", "must be > 0");
        }
        if !(self.scbench_mean_turns >= 1.0) {
            return bad("scbench_mean_turns", "must be >= 1");
        }
        let scbench_fixed = fixed as f64 + self.scbench_mean_turns * (self.output_mean + self.question_len as f64);
        if !(self.scbench_mean_len > scbench_fixed) {
            return bad(
                "scbench_mean_len",
                "too small for the configured prompt, turns and outputs",
            );
        }
        if self.sharegpt_min_len == 0 || self.sharegpt_min_len > self.sharegpt_max_len {
            return bad("sharegpt_min_len", "must satisfy 1 <= min <= sharegpt_max_len");
        }
        Ok(())
    }
}

/// z with P(Z > z) = 0.1 for a standard normal.
const Z_90: f64 = 1.281_551_565_544_600_4;

/// Lognormal sigma with P(X > 2 * mean) = 0.1 (the smaller root of
/// sigma^2 / 2 - z * sigma + ln 2 = 0).
pub fn tail_sigma() -> f64 {
    Z_90 - (Z_90 * Z_90 - 2.0 * std::f64::consts::LN_2).sqrt()
}

fn lognormal_with_mean(mean: f64) -> LogNormal<f64> {
    let sigma = tail_sigma();
    LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("valid lognormal")
}

fn sample_len(dist: &LogNormal<f64>, rng: &mut ChaCha8Rng) -> u64 {
    dist.sample(rng).round().max(1.0) as u64
}

/// Offset separating per-session documents from shared ones.
const SESSION_DOC_BASE: u64 = 1 << 40;

struct Generator<'a> {
    spec: &'a TraceSpec,
    output: LogNormal<f64>,
    think: Option<Exp<f64>>,
    loogle_docs: Vec<u64>,
    zipf: Zipf<f64>,
    loogle_question: LogNormal<f64>,
    scbench_doc: LogNormal<f64>,
    scbench_turns: Option<Poisson<f64>>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a TraceSpec, rng: &mut ChaCha8Rng) -> Self {
        let fixed = (spec.system_prompt_len + spec.question_len) as f64;
        let doc_len = lognormal_with_mean(spec.loogle_mean_len - fixed);
        let loogle_docs = (0..spec.loogle_documents).map(|_| sample_len(&doc_len, rng)).collect();
        let extra_turns = spec.scbench_mean_turns - 1.0;
        let scbench_doc_mean = spec.scbench_mean_len
            - fixed
            - spec.scbench_mean_turns * spec.output_mean
            - extra_turns * spec.question_len as f64;
        Self {
            spec,
            output: lognormal_with_mean(spec.output_mean),
            think: (spec.think_time_mean > 0.0).then(|| Exp::new(1.0 / spec.think_time_mean).expect("valid rate")),
            loogle_docs,
            zipf: Zipf::new(spec.loogle_documents as f64, spec.zipf_exponent).expect("valid zipf"),
            loogle_question: lognormal_with_mean(spec.question_len.max(1) as f64),
            scbench_doc: lognormal_with_mean(scbench_doc_mean),
            scbench_turns: (extra_turns > 0.0).then(|| Poisson::new(extra_turns).expect("valid poisson")),
        }
    }

    /// Records of one session (request ids assigned later).
    fn session(&self, preset: Preset, session_id: u64, start: f64, rng: &mut ChaCha8Rng) -> Vec<TraceRecord> {
        let s = self.spec;
        let record = |turn: u32, arrival: f64, input_len: u64, doc: Option<u64>, rng: &mut ChaCha8Rng| TraceRecord {
            request_id: 0,
            session_id,
            turn_index: turn,
            arrival_time: arrival,
            input_len,
            output_len: sample_len(&self.output, rng),
            shared_prefix_id: doc,
        };
        match preset {
            Preset::LoogleLike => {
                let doc = self.zipf.sample(rng) as u64 - 1;
                let question = sample_len(&self.loogle_question, rng);
                let input = s.system_prompt_len + self.loogle_docs[doc as usize] + question;
                vec![record(0, start, input, Some(doc), rng)]
            }
            Preset::SharegptLike => {
                let body = rng.random_range(s.sharegpt_min_len..=s.sharegpt_max_len);
                vec![record(0, start, s.system_prompt_len + body, None, rng)]
            }
            Preset::ScbenchLike => {
                let turns = 1 + self.scbench_turns.map_or(0, |p| p.sample(rng) as u32);
                let doc = SESSION_DOC_BASE + session_id;
                let mut input = s.system_prompt_len + sample_len(&self.scbench_doc, rng) + s.question_len;
                let mut arrival = start;
                let mut out = Vec::with_capacity(turns as usize);
                for t in 0..turns {
                    if t > 0 {
                        let prev: &TraceRecord = out.last().expect("previous turn");
                        input += prev.output_len + s.question_len;
                        arrival += self.think.map_or(0.0, |e| e.sample(rng));
                    }
                    out.push(record(t, arrival, input, Some(doc), rng));
                }
                out
            }
            Preset::Mixed => unreachable!("mixed is resolved per session"),
        }
    }
}

/// Generate a trace. Pure in `spec`.
pub fn generate(spec: &TraceSpec) -> Result<Vec<TraceRecord>, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.rate_lambda == 0.0 {
        return Ok(Vec::new());
    }
    let generator = Generator::new(spec, &mut rng);
    let gap = Exp::new(spec.rate_lambda).expect("positive rate");
    let mut records = Vec::new();
    let mut clock = 0.0;
    for session_id in 0.. {
        clock += gap.sample(&mut rng);
        let done = match spec.sessions {
            Some(n) => session_id >= n,
            None => clock >= spec.duration,
        };
        if done {
            break;
        }
        let preset = match spec.preset {
            Preset::Mixed => [Preset::LoogleLike, Preset::ScbenchLike, Preset::SharegptLike][(session_id % 3) as usize],
            p => p,
        };
        records.extend(generator.session(preset, session_id, clock, &mut rng));
    }
    records.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.session_id.cmp(&b.session_id))
            .then(a.turn_index.cmp(&b.turn_index))
    });
    for (i, r) in records.iter_mut().enumerate() {
        r.request_id = i as u64;
    }
    Ok(records)
}

pub fn save(trace: &[TraceRecord], path: &Path) -> Result<(), TraceError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in trace {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, line_no)?);
    }
    Ok(out)
}

pub fn parse_record(line: &str, line_no: usize) -> Result<TraceRecord, TraceError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| TraceError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let Some(obj) = value.as_object() else {
        return Err(TraceError::Parse {
            line: line_no,
            message: "expected a JSON object".into(),
        });
    };
    for field in TRACE_FIELDS {
        if !obj.contains_key(field) {
            return Err(TraceError::Schema {
                line: line_no,
                field: field.into(),
                message: "missing".into(),
            });
        }
    }
    if let Some(extra) = obj.keys().find(|k| !TRACE_FIELDS.contains(&k.as_str())) {
        return Err(TraceError::Schema {
            line: line_no,
            field: extra.clone(),
            message: "unknown field".into(),
        });
    }
    for field in TRACE_FIELDS {
        let v = obj[field].clone();
        let checked = match field {
            "arrival_time" => serde_json::from_value::<f64>(v).map(drop),
            "turn_index" => serde_json::from_value::<u32>(v).map(drop),
            "shared_prefix_id" => serde_json::from_value::<Option<u64>>(v).map(drop),
            _ => serde_json::from_value::<u64>(v).map(drop),
        };
        if let Err(e) = checked {
            return Err(TraceError::Schema {
                line: line_no,
                field: field.into(),
                message: e.to_string(),
            });
        }
    }
    serde_json::from_value(value).map_err(|e| TraceError::Schema {
        line: line_no,
        field: "record".into(),
        message: e.to_string(),
    })
}

/// Summary statistics printed by the trace generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub records: usize,
    pub sessions: usize,
    pub mean_turns: f64,
    pub mean_input_len: f64,
    pub mean_output_len: f64,
    /// Mean total length (last prompt plus last output) per session.
    pub mean_session_len: f64,
    pub mean_session_interarrival: f64,
}

pub fn summarize(trace: &[TraceRecord]) -> TraceSummary {
    use std::collections::BTreeMap;
    let mut sessions: BTreeMap<u64, (&TraceRecord, &TraceRecord, usize)> = BTreeMap::new();
    for r in trace {
        let e = sessions.entry(r.session_id).or_insert((r, r, 0));
        if r.turn_index < e.0.turn_index {
            e.0 = r;
        }
        if r.turn_index >= e.1.turn_index {
            e.1 = r;
        }
        e.2 += 1;
    }
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let mut starts: Vec<f64> = sessions.values().map(|s| s.0.arrival_time).collect();
    starts.sort_by(f64::total_cmp);
    let span = match (starts.first(), starts.last()) {
        (Some(a), Some(b)) if starts.len() > 1 => (b - a) / (starts.len() - 1) as f64,
        _ => 0.0,
    };
    TraceSummary {
        records: trace.len(),
        sessions: sessions.len(),
        mean_turns: mean(trace.len() as f64, sessions.len()),
        mean_input_len: mean(trace.iter().map(|r| r.input_len as f64).sum(), trace.len()),
        mean_output_len: mean(trace.iter().map(|r| r.output_len as f64).sum(), trace.len()),
        mean_session_len: mean(
            sessions.values().map(|s| (s.1.input_len + s.1.output_len) as f64).sum(),
            sessions.len(),
        ),
        mean_session_interarrival: span,
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Source {
    System,
    Document(u64),
    User { session: u64, turn: u32 },
    Output { session: u64, turn: u32 },
}

impl Source {
    fn seed(self) -> u64 {
        let (tag, a, b) = match self {
            Source::System => (1, 0, 0),
            Source::Document(d) => (2, d, 0),
            Source::User { session, turn } => (3, session, turn as u64),
            Source::Output { session, turn } => (4, session, turn as u64),
        };
        splitmix64(splitmix64(splitmix64(tag) ^ a) ^ b)
    }

    /// Append the first `count` tokens of this source.
    fn extend(self, out: &mut Vec<u32>, count: u64) {
        let seed = self.seed();
        out.extend((0..count).map(|i| (splitmix64(seed ^ i) >> 32) as u32));
    }
}

/// Maps trace records to prompt tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentModel {
    pub system_prompt_len: u64,
    /// Fresh question tokens following a turn-0 document.
    pub question_len: u64,
}

impl Default for ContentModel {
    fn default() -> Self {
        Self {
            system_prompt_len: default_system_prompt_len(),
            question_len: default_question_len(),
        }
    }
}

impl ContentModel {
    pub fn system_prompt(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.system_prompt_len as usize);
        Source::System.extend(&mut v, self.system_prompt_len);
        v
    }

    /// Output tokens generated by one turn.
    pub fn output_tokens(&self, record: &TraceRecord) -> Vec<u32> {
        let mut v = Vec::with_capacity(record.output_len as usize);
        Source::Output {
            session: record.session_id,
            turn: record.turn_index,
        }
        .extend(&mut v, record.output_len);
        v
    }

    /// Prompt of `session[turn]`, where `session` holds the session's records
    /// ordered by turn. Turn `t + 1` sees turn `t`'s prompt and output followed
    /// by fresh user tokens, cut or padded to its input length.
    pub fn prompt(&self, session: &[TraceRecord], turn: usize) -> Vec<u32> {
        // Only the first need[t] tokens of turn t's stream reach the result.
        let mut need = vec![0u64; turn + 1];
        need[turn] = session[turn].input_len;
        for t in (0..turn).rev() {
            need[t] = session[t].input_len.min(need[t + 1]);
        }
        let mut stream: Vec<u32> = Vec::with_capacity(session[turn].input_len as usize);
        for (t, r) in session[..=turn].iter().enumerate() {
            let cap = need[t] as usize;
            let room = |s: &Vec<u32>| cap.saturating_sub(s.len()) as u64;
            if t == 0 {
                let k = self.system_prompt_len.min(room(&stream));
                Source::System.extend(&mut stream, k);
                if let Some(doc) = r.shared_prefix_id {
                    let body = r.input_len.saturating_sub(self.system_prompt_len);
                    let question = self.question_len.min(body);
                    let k = (body - question).min(room(&stream));
                    Source::Document(doc).extend(&mut stream, k);
                }
            } else {
                let prev = &session[t - 1];
                let out = Source::Output {
                    session: prev.session_id,
                    turn: prev.turn_index,
                };
                let k = prev.output_len.min(room(&stream));
                out.extend(&mut stream, k);
            }
            let user = Source::User {
                session: r.session_id,
                turn: r.turn_index,
            };
            let k = room(&stream);
            user.extend(&mut stream, k);
            stream.truncate(cap);
        }
        stream
    }
}
