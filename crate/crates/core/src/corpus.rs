//! Dialogues, tokenization, vocabulary, sequence encoding and the seeded
//! synthetic corpus generator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, splits on whitespace and detaches every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered: String = text.chars().flat_map(char::to_lowercase).collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(core::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(core::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(text: &str) -> Self {
        Utterance { text: text.to_string(), tokens: tokenize(text) }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub context: Vec<Utterance>,
    pub incomplete: Utterance,
    pub rewrite: Option<Utterance>,
}

impl Dialogue {
    /// Builds and validates a dialogue: at least one context utterance and
    /// no utterance that tokenizes to nothing.
    pub fn new<S: AsRef<str>>(id: &str, context: &[S], incomplete: &str, rewrite: Option<&str>) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::EmptyContext { id: id.to_string() });
        }
        let context: Vec<Utterance> = context.iter().map(|c| Utterance::new(c.as_ref())).collect();
        if let Some(k) = context.iter().position(Utterance::is_empty) {
            return Err(Error::EmptyUtterance { id: id.to_string(), what: format!("context[{k}]") });
        }
        let incomplete = Utterance::new(incomplete);
        if incomplete.is_empty() {
            return Err(Error::EmptyUtterance { id: id.to_string(), what: "incomplete".to_string() });
        }
        let rewrite = rewrite.map(Utterance::new);
        if rewrite.as_ref().is_some_and(Utterance::is_empty) {
            return Err(Error::EmptyUtterance { id: id.to_string(), what: "rewrite".to_string() });
        }
        Ok(Dialogue { id: id.to_string(), context, incomplete, rewrite })
    }

    /// All context tokens in order, without separators.
    pub fn context_tokens(&self) -> Vec<String> {
        self.context.iter().flat_map(|u| u.tokens.iter().cloned()).collect()
    }

    /// Owning utterance index for every context token.
    pub fn context_owners(&self) -> Vec<usize> {
        self.context.iter().enumerate().flat_map(|(k, u)| core::iter::repeat_n(k, u.len())).collect()
    }

    /// `[start, end)` of each context utterance in context-token coordinates.
    pub fn context_ranges(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.context
            .iter()
            .map(|u| {
                let r = (start, start + u.len());
                start += u.len();
                r
            })
            .collect()
    }

    pub fn n_context_tokens(&self) -> usize {
        self.context.iter().map(Utterance::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const SEP: u32 = 1;
    pub const UNK: u32 = 2;
    const RESERVED: [&'static str; 3] = ["[PAD]", "[SEP]", "[UNK]"];

    pub fn new() -> Self {
        let mut v = Vocab { id_to_token: Vec::new(), token_to_id: BTreeMap::new() };
        for r in Self::RESERVED {
            v.insert(r);
        }
        v
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Vocabulary over every token of the given dialogues, in first-seen order.
    pub fn build<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue>) -> Self {
        let mut v = Vocab::new();
        for d in dialogues {
            let utts = d.context.iter().chain(core::iter::once(&d.incomplete)).chain(d.rewrite.iter());
            for u in utts {
                for t in &u.tokens {
                    v.insert(t);
                }
            }
        }
        v
    }

    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != Self::RESERVED {
            return Err(Error::InvalidVocab);
        }
        let mut v = Vocab { id_to_token: Vec::new(), token_to_id: BTreeMap::new() };
        for t in tokens {
            if v.token_to_id.contains_key(t) {
                return Err(Error::InvalidVocab);
            }
            v.insert(t);
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

/// Joint model input: `[ctx_1, SEP, ..., ctx_n, SEP, incomplete]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub token_ids: Vec<u32>,
    /// One `[start, end)` per utterance (contexts first, incomplete last).
    pub segment_spans: Vec<(usize, usize)>,
    pub n_context: usize,
    pub n_incomplete: usize,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_utterances(&self) -> usize {
        self.segment_spans.len() - 1
    }

    /// Sequence positions of the context tokens, in order.
    pub fn context_positions(&self) -> Vec<usize> {
        let n = self.n_utterances();
        self.segment_spans[..n].iter().flat_map(|&(s, e)| s..e).collect()
    }

    pub fn incomplete_span(&self) -> (usize, usize) {
        *self.segment_spans.last().expect("encoded example has an incomplete span")
    }

    /// 0 for context and separator positions, 1 for the incomplete utterance.
    pub fn segment_types(&self) -> Vec<u32> {
        let (s, _) = self.incomplete_span();
        (0..self.len()).map(|p| u32::from(p >= s)).collect()
    }
}

pub fn encode_example(d: &Dialogue, v: &Vocab) -> EncodedExample {
    let mut token_ids = Vec::new();
    let mut segment_spans = Vec::with_capacity(d.context.len() + 1);
    for u in &d.context {
        let start = token_ids.len();
        token_ids.extend(u.tokens.iter().map(|t| v.id(t)));
        segment_spans.push((start, token_ids.len()));
        token_ids.push(Vocab::SEP);
    }
    let start = token_ids.len();
    token_ids.extend(d.incomplete.tokens.iter().map(|t| v.id(t)));
    segment_spans.push((start, token_ids.len()));
    EncodedExample { token_ids, segment_spans, n_context: d.n_context_tokens(), n_incomplete: d.incomplete.len() }
}

/// Encodes a single utterance (e.g. the gold rewrite) as a standalone sequence.
pub fn encode_standalone(tokens: &[String], v: &Vocab) -> EncodedExample {
    let token_ids: Vec<u32> = tokens.iter().map(|t| v.id(t)).collect();
    let n = token_ids.len();
    EncodedExample { token_ids, segment_spans: vec![(0, n)], n_context: 0, n_incomplete: n }
}

// ---------------------------------------------------------------------------
// synthetic corpus

const MALE: &[&str] = &["tom", "james", "peter", "david", "oliver", "liam", "noah", "ethan", "lucas", "jack"];
const FEMALE: &[&str] = &["anna", "maria", "lucy", "sarah", "emma", "sophia", "mia", "olivia", "ava", "chloe"];
const TOPICS: &[&str] = &[
    "biology",
    "philosophy",
    "history",
    "physics",
    "chemistry",
    "economics",
    "poetry",
    "astronomy",
    "law",
    "medicine",
    "computer science",
    "modern art",
    "ancient history",
    "machine learning",
];
const PLACES: &[&str] = &[
    "paris", "london", "tokyo", "berlin", "rome", "madrid", "boston", "chicago", "amherst", "oxford", "new york",
    "san francisco",
];
const FOODS: &[&str] = &["pizza", "sushi", "pasta", "tacos", "curry", "noodles", "salad", "ice cream", "fried rice"];
const SPORTS: &[&str] = &["tennis", "football", "chess", "golf", "basketball", "volleyball", "table tennis"];
const FILLERS: &[&str] = &[
    "the weather is nice today .",
    "i watched a movie yesterday .",
    "my phone battery died this morning .",
    "we should meet for lunch sometime .",
    "that sounds great .",
    "i am not sure about that .",
    "the train was late again .",
    "thanks for asking .",
];

struct Pick<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Pick<'_> {
    fn below(&mut self, n: usize) -> usize {
        (self.rng.next_u64() % n as u64) as usize
    }

    fn one<'s>(&mut self, pool: &[&'s str]) -> &'s str {
        pool[self.below(pool.len())]
    }

    /// One item from `pool` sharing no token with `avoid`.
    fn avoiding<'s>(&mut self, pool: &[&'s str], avoid: &[String]) -> &'s str {
        loop {
            let c = self.one(pool);
            if !tokenize(c).iter().any(|t| avoid.contains(t)) {
                return c;
            }
        }
    }

    fn chance(&mut self, p: f64) -> bool {
        ((self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) < p
    }
}

struct Person {
    name: &'static str,
    subj: &'static str,
    obj: &'static str,
}

fn person(p: &mut Pick<'_>) -> Person {
    if p.chance(0.5) {
        Person { name: p.one(MALE), subj: "he", obj: "him" }
    } else {
        Person { name: p.one(FEMALE), subj: "she", obj: "her" }
    }
}

/// (relevant context utterances, incomplete, rewrite)
type Scene = (Vec<String>, String, String);

fn scene(p: &mut Pick<'_>) -> Scene {
    match p.below(10) {
        0 => {
            let who = person(p);
            let (topic, place) = (p.one(TOPICS), p.one(PLACES));
            let ctx = vec![format!("{} studied {topic} at {place} .", who.name)];
            (ctx, format!("what did {} do after graduating ?", who.subj), format!("what did {} do after graduating ?", who.name))
        }
        1 => {
            let topic = p.one(TOPICS);
            let ctx = vec![format!("i have been learning {topic} lately .")];
            (ctx, "is it difficult ?".into(), format!("is {topic} difficult ?"))
        }
        2 => {
            let food = p.one(FOODS);
            let ctx = vec![format!("do you like {food} ?"), "yes , i love it .".into()];
            (ctx, "why ?".into(), format!("why do you like {food} ?"))
        }
        3 => {
            let who = person(p);
            let sport = p.one(SPORTS);
            let ctx = vec![format!("{} plays {sport} every weekend .", who.name)];
            let inc = format!("how long has {} been playing ?", who.subj);
            (ctx, inc, format!("how long has {} been playing {sport} ?", who.subj))
        }
        4 => {
            let who = person(p);
            let place = p.one(PLACES);
            let ctx = vec![format!("{} moved to {place} last year .", who.name)];
            let inc = format!("does {} like it ?", who.subj);
            (ctx, inc, format!("does {} like {place} ?", who.name))
        }
        5 => {
            let place = p.one(PLACES);
            let ctx = vec![format!("i spent a week in {place} .")];
            (ctx, "what did you see ?".into(), format!("what did you see in {place} ?"))
        }
        6 => {
            let place = p.one(PLACES);
            let ctx = vec![format!("have you ever been to {place} ?"), "only once , a long time ago .".into()];
            (ctx, "how was it ?".into(), format!("how was {place} ?"))
        }
        7 => {
            // entity mentioned twice; the later mention is the copy source
            let who = person(p);
            let topic = p.one(TOPICS);
            let ctx = vec![
                format!("{} is a student .", who.name),
                format!("{} wrote a thesis about {topic} .", who.name),
            ];
            let inc = format!("why did {} choose it ?", who.subj);
            (ctx, inc, format!("why did {} choose {topic} ?", who.name))
        }
        8 => {
            let who = person(p);
            let food = p.one(FOODS);
            let ctx = vec![format!("{} cooked {food} for dinner .", who.name)];
            let inc = format!("did you help {} ?", who.obj);
            (ctx, inc, format!("did you help {} ?", who.name))
        }
        _ => {
            let who = person(p);
            let sport = p.one(SPORTS);
            let ctx = vec![format!("{} played in the {sport} final yesterday .", who.name), "everyone was surprised .".into()];
            let inc = format!("who did {} beat ?", who.subj);
            (ctx, inc, format!("who did {} beat in the {sport} final ?", who.name))
        }
    }
}

fn distractor(p: &mut Pick<'_>, avoid: &[String]) -> String {
    match p.below(4) {
        0 => p.avoiding(FILLERS, avoid).to_string(),
        1 => {
            let name = p.avoiding(MALE, avoid);
            let place = p.avoiding(PLACES, avoid);
            format!("{name} works at a bank in {place} .")
        }
        2 => {
            let name = p.avoiding(FEMALE, avoid);
            let sport = p.avoiding(SPORTS, avoid);
            format!("{name} enjoys watching {sport} .")
        }
        _ => {
            let food = p.avoiding(FOODS, avoid);
            format!("the {food} here is expensive .")
        }
    }
}

/// Seeded templated corpus of ellipsis and coreference cases, with
/// distractor utterances that contain none of the restored words.
pub fn make_synthetic_corpus(seed: u64, size: usize) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut p = Pick { rng: &mut rng };
        let (relevant, inc, rw) = scene(&mut p);
        let inc_tokens = tokenize(&inc);
        // restored tokens, plus anything in the scene itself, are off limits
        let mut avoid: Vec<String> = tokenize(&rw).into_iter().filter(|t| !inc_tokens.contains(t)).collect();
        avoid.retain(|t| t.chars().any(char::is_alphanumeric));
        for r in &relevant {
            for t in tokenize(r) {
                if t.chars().any(char::is_alphanumeric) && !crate::supervision::is_stopword(&t) && !avoid.contains(&t) {
                    avoid.push(t);
                }
            }
        }
        let n_before = p.below(3);
        let n_after = if p.chance(0.4) { 1 } else { 0 };
        let mut context = Vec::new();
        for _ in 0..n_before {
            context.push(distractor(&mut p, &avoid));
        }
        context.extend(relevant);
        for _ in 0..n_after {
            context.push(distractor(&mut p, &avoid));
        }
        let d = Dialogue::new(&format!("syn-{seed}-{i}"), &context, &inc, Some(&rw)).expect("templates are non-empty");
        out.push(d);
    }
    out
}
