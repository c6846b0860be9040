//! Querying a vision-language model for the interaction prompt, the object
//! box and the interaction region, then parsing its free-text replies.
//!
//! Four queries run in sequence: the prompt, the object box, the region on
//! the person, and which words of the prompt name the object. Box replies are
//! read from the first bracketed four-number group; values above 1.5 are taken
//! as pixels of the background image. Every attempt lands in a [`QueryTrace`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

pub const STAGE_PROMPT: &str = "stage1";
pub const STAGE_OBJECT_BOX: &str = "stage2";
pub const STAGE_REGION: &str = "stage3";
pub const STAGE_TOKENS: &str = "tokens";

/// A multimodal chat model. Implementations must tolerate concurrent calls.
pub trait VisionLanguageClient: Send + Sync {
    fn query(&self, images: &[&Image], instruction: &str) -> Result<String>;
}

/// Instruction wording. `{prompt}` and `{object_box}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplates {
    pub prompt: String,
    pub object_box: String,
    pub region: String,
    pub tokens: String,
    pub prompt_retry: String,
    pub box_retry: String,
    pub tokens_retry: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            prompt: "The first image is a foreground object, the second a person. Please analyze and describe a \
                     suitable type of interaction between them and generate a simple prompt for this interaction."
                .into(),
            object_box: "Interaction prompt: \"{prompt}\". Please describe the position of the foreground object \
                         and give bounding box coordinates so that it aligns with the specified interaction. Use \
                         normalized [x0, y0, x1, y1] coordinates of the second image."
                .into(),
            region: "Interaction prompt: \"{prompt}\". Based on the images and interaction prompt, and assuming the \
                     object is at {object_box}, identify the regions on the person that would be affected during \
                     the interaction and return their bounding box as normalized [x0, y0, x1, y1]."
                .into(),
            tokens: "Interaction prompt: \"{prompt}\". Which word or words of this prompt name the foreground \
                     object? Reply with the exact words."
                .into(),
            prompt_retry: "Respond only with the prompt.".into(),
            box_retry: "Respond only with the bounding box.".into(),
            tokens_retry: "Respond only with the words.".into(),
        }
    }
}

fn fill(template: &str, prompt: &str, object_box: Option<&BBox>) -> String {
    let mut s = template.replace("{prompt}", prompt);
    if let Some(b) = object_box {
        s = s.replace("{object_box}", &format_box(b));
    }
    s
}

pub fn format_box(b: &BBox) -> String {
    format!("[{:.3}, {:.3}, {:.3}, {:.3}]", b.x0, b.y0, b.x1, b.y1)
}

fn with_retry(instruction: &str, attempt: usize, suffix: &str) -> String {
    if attempt == 0 {
        instruction.to_string()
    } else {
        format!("{instruction} {suffix}")
    }
}

/// What the protocol produces for one (foreground, background) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpec {
    pub prompt: String,
    pub object_box: BBox,
    pub interaction_region: BBox,
    /// Byte offsets `[start, end)` of the object words in `prompt`.
    pub foreground_span: (usize, usize),
}

impl InteractionSpec {
    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.foreground_span;
        if self.prompt.trim().is_empty() {
            return Err(Error::Validation("empty prompt".into()));
        }
        if s >= e || e > self.prompt.len() || !self.prompt.is_char_boundary(s) || !self.prompt.is_char_boundary(e) {
            return Err(Error::Validation(format!("span {:?} outside the prompt", self.foreground_span)));
        }
        BBox::new(self.object_box.x0, self.object_box.y0, self.object_box.x1, self.object_box.y1)?;
        BBox::new(
            self.interaction_region.x0,
            self.interaction_region.y0,
            self.interaction_region.x1,
            self.interaction_region.y1,
        )?;
        Ok(())
    }
}

const QUOTES: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];

/// Strips whitespace and surrounding quotes; keeps inner punctuation.
pub fn parse_prompt(raw: &str) -> Result<String> {
    let mut s = raw.trim();
    loop {
        let t = s.trim_matches(QUOTES).trim();
        if t == s {
            break;
        }
        s = t;
    }
    if s.is_empty() {
        return Err(Error::protocol(STAGE_PROMPT, "empty prompt", raw));
    }
    Ok(s.to_string())
}

fn box_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)";
        Regex::new(&format!(r"\[\s*{num}\s*,\s*{num}\s*,\s*{num}\s*,\s*{num}\s*\]")).expect("box pattern")
    })
}

/// First bracketed four-number group of `raw` as a normalized box.
///
/// If any value exceeds 1.5 all four are read as pixels of a
/// `width x height` image. Values are then clamped to `[0, 1]`.
pub fn parse_box(raw: &str, stage: &str, width: usize, height: usize) -> Result<BBox> {
    let caps = box_pattern()
        .captures(raw)
        .ok_or_else(|| Error::protocol(stage, "no [x0, y0, x1, y1] group", raw))?;
    let mut v = [0.0; 4];
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = caps[i + 1]
            .parse::<f64>()
            .map_err(|e| Error::protocol(stage, e.to_string(), raw))?;
    }
    if v.iter().any(|x| *x > 1.5) {
        let (w, h) = (width.max(1) as f64, height.max(1) as f64);
        v = [v[0] / w, v[1] / h, v[2] / w, v[3] / h];
    }
    let c = v.map(|x| x.clamp(0.0, 1.0));
    if !(c[0] < c[2] && c[1] < c[3]) {
        return Err(Error::DegenerateBox(c));
    }
    BBox::new(c[0], c[1], c[2], c[3])
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "be", "with", "and", "of", "on", "in", "at", "to", "his", "her", "their",
    "its", "into", "onto", "from", "by", "for", "up", "while", "person", "people", "man", "woman", "girl", "boy",
    "child", "kid", "lady", "guy", "someone", "he", "she", "they",
];

fn words(prompt: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in prompt.char_indices() {
        match (ch.is_alphanumeric() || ch == '-', start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, prompt.len()));
    }
    out
}

/// Longest word that is neither a function word, a person word nor an
/// `-ing` verb; ties go to the later word.
pub fn longest_noun_span(prompt: &str) -> Option<(usize, usize)> {
    words(prompt)
        .into_iter()
        .filter(|&(s, e)| {
            let w = prompt[s..e].to_lowercase();
            !STOPWORDS.contains(&w.as_str()) && !(w.ends_with("ing") && w.len() > 4) && w.chars().any(char::is_alphabetic)
        })
        .fold(None, |best: Option<(usize, usize)>, (s, e)| match best {
            Some((bs, be)) if be - bs > e - s => Some((bs, be)),
            _ => Some((s, e)),
        })
}

/// Locates the reply's words in the prompt, ignoring case and surrounding
/// quotes or punctuation.
pub fn locate_span(prompt: &str, reply: &str) -> Option<(usize, usize)> {
    let needle = reply.trim().trim_matches(QUOTES).trim().trim_end_matches(['.', ',', '!', '?']).trim();
    if needle.is_empty() {
        return None;
    }
    let hay = prompt.to_lowercase();
    let low = needle.to_lowercase();
    if hay.len() != prompt.len() || low.len() != needle.len() {
        return None;
    }
    hay.find(&low).map(|s| (s, s + low.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: String,
    pub attempt: usize,
    pub instruction: String,
    pub reply: Option<String>,
    pub error: Option<String>,
}

/// Every query attempt of one protocol run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub entries: Vec<TraceEntry>,
    /// Failed attempts per stage that were followed by another attempt.
    pub retries: BTreeMap<String, usize>,
    /// Whether the foreground span came from the longest-noun fallback.
    pub span_fallback: bool,
}

impl QueryTrace {
    pub fn retry_count(&self, stage: &str) -> usize {
        self.retries.get(stage).copied().unwrap_or(0)
    }
}

fn attempt<T>(
    client: &dyn VisionLanguageClient,
    images: &[&Image],
    stage: &str,
    instruction: &str,
    suffix: &str,
    attempts: usize,
    trace: &mut QueryTrace,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    let mut failures = Vec::new();
    let mut last_raw = String::new();
    for k in 0..attempts {
        let text = with_retry(instruction, k, suffix);
        let outcome = client.query(images, &text);
        let (result, reply) = match outcome {
            Ok(raw) => {
                last_raw = raw.clone();
                (parse(&raw), Some(raw))
            }
            Err(e) => (Err(e), None),
        };
        log::debug!("{stage} attempt {k}: {reply:?}");
        match result {
            Ok(v) => {
                trace.entries.push(TraceEntry {
                    stage: stage.into(),
                    attempt: k,
                    instruction: text,
                    reply,
                    error: None,
                });
                if k > 0 {
                    trace.retries.insert(stage.into(), k);
                }
                return Ok(v);
            }
            Err(e) => {
                failures.push(e.to_string());
                trace.entries.push(TraceEntry {
                    stage: stage.into(),
                    attempt: k,
                    instruction: text,
                    reply,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if attempts > 1 {
        trace.retries.insert(stage.into(), attempts - 1);
    }
    Err(Error::protocol(
        stage,
        format!("failed after {attempts} attempt(s): {}", failures.join("; ")),
        last_raw,
    ))
}

fn check_images(foreground: &Image, background: &Image) -> Result<()> {
    for img in [foreground, background] {
        if img.channels() != 3 {
            return Err(Error::Shape("query images must be RGB".into()));
        }
    }
    Ok(())
}

/// One attempt at the interaction prompt.
pub fn stage1_prompt(
    client: &dyn VisionLanguageClient,
    foreground: &Image,
    background: &Image,
    templates: &PromptTemplates,
) -> Result<String> {
    check_images(foreground, background)?;
    parse_prompt(&client.query(&[foreground, background], &templates.prompt)?)
}

/// One attempt at the object box.
pub fn stage2_object_box(
    client: &dyn VisionLanguageClient,
    foreground: &Image,
    background: &Image,
    prompt: &str,
    templates: &PromptTemplates,
) -> Result<BBox> {
    check_images(foreground, background)?;
    let raw = client.query(&[foreground, background], &fill(&templates.object_box, prompt, None))?;
    parse_box(&raw, STAGE_OBJECT_BOX, background.width(), background.height())
}

/// One attempt at the interaction region, given the object box.
pub fn stage3_interaction_region(
    client: &dyn VisionLanguageClient,
    foreground: &Image,
    background: &Image,
    prompt: &str,
    object_box: &BBox,
    templates: &PromptTemplates,
) -> Result<BBox> {
    check_images(foreground, background)?;
    let raw = client.query(&[foreground, background], &fill(&templates.region, prompt, Some(object_box)))?;
    parse_box(&raw, STAGE_REGION, background.width(), background.height())
}

/// Runs all four queries with up to `attempts` tries per stage.
pub fn run_region_query(
    client: &dyn VisionLanguageClient,
    foreground: &Image,
    background: &Image,
    templates: &PromptTemplates,
    attempts: usize,
) -> Result<(InteractionSpec, QueryTrace)> {
    if attempts == 0 {
        return Err(Error::Parameter("at least one attempt per stage is needed".into()));
    }
    check_images(foreground, background)?;
    let images = [foreground, background];
    let (w, h) = (background.width(), background.height());
    let mut trace = QueryTrace::default();
    let prompt = attempt(
        client,
        &images,
        STAGE_PROMPT,
        &templates.prompt,
        &templates.prompt_retry,
        attempts,
        &mut trace,
        parse_prompt,
    )?;
    let object_box = attempt(
        client,
        &images,
        STAGE_OBJECT_BOX,
        &fill(&templates.object_box, &prompt, None),
        &templates.box_retry,
        attempts,
        &mut trace,
        |r| parse_box(r, STAGE_OBJECT_BOX, w, h),
    )?;
    let interaction_region = attempt(
        client,
        &images,
        STAGE_REGION,
        &fill(&templates.region, &prompt, Some(&object_box)),
        &templates.box_retry,
        attempts,
        &mut trace,
        |r| parse_box(r, STAGE_REGION, w, h),
    )?;
    let located = attempt(
        client,
        &images,
        STAGE_TOKENS,
        &fill(&templates.tokens, &prompt, None),
        &templates.tokens_retry,
        attempts,
        &mut trace,
        |r| locate_span(&prompt, r).ok_or_else(|| Error::protocol(STAGE_TOKENS, "words not in the prompt", r)),
    );
    let foreground_span = match located {
        Ok(span) => span,
        Err(_) => {
            trace.span_fallback = true;
            longest_noun_span(&prompt)
                .ok_or_else(|| Error::protocol(STAGE_TOKENS, "no candidate object word", prompt.clone()))?
        }
    };
    let spec = InteractionSpec {
        prompt,
        object_box,
        interaction_region,
        foreground_span,
    };
    spec.validate()?;
    Ok((spec, trace))
}

/// Hex SHA-256 of an instruction; the key of mock fixtures.
pub fn instruction_hash(instruction: &str) -> String {
    hex::encode(Sha256::digest(instruction.as_bytes()))
}

/// A canned reply, or a queue of replies consumed one call at a time (the
/// last one repeats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureReply {
    One(String),
    Sequence(Vec<String>),
}

/// JSON fixture for [`MockClient`]: instruction hash to reply, plus an
/// optional expected result for regression checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub replies: BTreeMap<String, FixtureReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<InteractionSpec>,
}

impl Fixture {
    /// Fixture answering the four default-template queries for a transcript
    /// whose replies are `prompt`, `object_box`, `region` and `words`.
    pub fn scripted(templates: &PromptTemplates, prompt: &str, object_box: &str, region: &str, words: &str) -> Result<Self> {
        let p = parse_prompt(prompt)?;
        let ob = parse_box(object_box, STAGE_OBJECT_BOX, 1, 1)?;
        let mut replies = BTreeMap::new();
        let mut put = |instr: String, reply: &str| {
            replies.insert(instruction_hash(&instr), FixtureReply::One(reply.to_string()));
        };
        put(templates.prompt.clone(), prompt);
        put(fill(&templates.object_box, &p, None), object_box);
        put(fill(&templates.region, &p, Some(&ob)), region);
        put(fill(&templates.tokens, &p, None), words);
        Ok(Self { replies, expected: None })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Replays fixture replies; images are ignored.
pub struct MockClient {
    queues: Mutex<HashMap<String, VecDeque<String>>>,
}

impl MockClient {
    pub fn new(fixture: &Fixture) -> Self {
        let queues = fixture
            .replies
            .iter()
            .map(|(k, v)| {
                let q = match v {
                    FixtureReply::One(s) => VecDeque::from([s.clone()]),
                    FixtureReply::Sequence(s) => s.iter().cloned().collect(),
                };
                (k.clone(), q)
            })
            .collect();
        Self {
            queues: Mutex::new(queues),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(&Fixture::load(path)?))
    }
}

impl VisionLanguageClient for MockClient {
    fn query(&self, _images: &[&Image], instruction: &str) -> Result<String> {
        let key = instruction_hash(instruction);
        let mut queues = self.queues.lock().map_err(|_| Error::Backend("mock state poisoned".into()))?;
        let q = queues
            .get_mut(&key)
            .ok_or_else(|| Error::Backend(format!("no fixture reply for instruction {key}")))?;
        match q.len() {
            0 => Err(Error::Backend(format!("fixture reply list for {key} is empty"))),
            1 => Ok(q[0].clone()),
            _ => Ok(q.pop_front().expect("non-empty")),
        }
    }
}

pub const ENDPOINT_VAR: &str = "HOI_VLM_ENDPOINT";
pub const API_KEY_VAR: &str = "HOI_VLM_API_KEY";
pub const MODEL_VAR: &str = "HOI_VLM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-4o";

fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.to_rgb8()?.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Chat-completions client over HTTP with an optional on-disk reply cache
/// keyed by the hash of the images and the instruction.
pub struct HttpClient {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    temperature: f64,
    cache_dir: Option<PathBuf>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            temperature: 0.0,
            cache_dir: None,
            http,
        })
    }

    /// Reads the endpoint, key and model name from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| Error::Config(format!("{ENDPOINT_VAR} is not set")))?;
        let key = std::env::var(API_KEY_VAR).ok();
        let model = std::env::var(MODEL_VAR).unwrap_or_else(|_| DEFAULT_MODEL.into());
        Self::new(endpoint, key, model)
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    fn request_body(&self, pngs: &[Vec<u8>], instruction: &str) -> serde_json::Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut content = vec![serde_json::json!({"type": "text", "text": instruction})];
        for p in pngs {
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", b64.encode(p))}
            }));
        }
        serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

impl VisionLanguageClient for HttpClient {
    fn query(&self, images: &[&Image], instruction: &str) -> Result<String> {
        let pngs = images.iter().map(|i| png_bytes(i)).collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        for p in &pngs {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        h.update(instruction.as_bytes());
        let key = hex::encode(h.finalize());
        let cached = self.cache_dir.as_ref().map(|d| d.join(format!("{key}.txt")));
        if let Some(path) = &cached {
            if let Ok(text) = fs::read_to_string(path) {
                return Ok(text);
            }
        }
        let mut req = self.http.post(&self.endpoint).json(&self.request_body(&pngs, instruction));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| Error::Backend(e.to_string()))?;
        let status = resp.status();
        let body: serde_json::Value = resp.json().map_err(|e| Error::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("HTTP {status}: {body}")));
        }
        let text = body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::Backend(format!("no message content in {body}")))?
            .to_string();
        if let Some(path) = &cached {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        }
        Ok(text)
    }
}
