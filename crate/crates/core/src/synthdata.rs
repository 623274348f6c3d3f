//! Synthetic corpora with a controllable language prior.
//!
//! Two registers share one visual vocabulary: register A is plain and short,
//! register B is ornate and long. A base LM trained on one register acquires
//! that register's style; captions in the other register then conflict with it.
//! Every caption word carries a ground-truth class (visual, style, other).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";

pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"];
pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "star", "heart", "hexagon", "diamond", "oval",
];
pub const COUNTS: [&str; 5] = ["one", "two", "three", "four", "five"];

pub const STYLE_A: [&str; 4] = ["a", "the", "photo", "of"];
pub const STYLE_B: [&str; 17] = [
    "this",
    "image",
    "captures",
    "scene",
    "featuring",
    "rendered",
    "in",
    "vivid",
    "detail",
    "beautifully",
    "elegantly",
    "gracefully",
    "softly",
    "lively",
    "serene",
    "vibrant",
    "radiant",
];
pub const PUNCT: [&str; 3] = [".", "!", ","];
pub const QUESTION_WORDS: [&str; 6] = ["what", "color", "shape", "how", "many", "?"];

/// Words that become two tokens in split mode, with their pieces.
pub const SPLIT_WORDS: [(&str, &str, &str); 5] = [
    ("triangle", "tri", "##angle"),
    ("hexagon", "hex", "##agon"),
    ("diamond", "dia", "##mond"),
    ("beautifully", "beauti", "##fully"),
    ("captures", "capt", "##ures"),
];

const B_ADVERBS: [&str; 4] = ["beautifully", "elegantly", "gracefully", "softly"];
const B_ADJECTIVES: [&str; 4] = ["lively", "serene", "vibrant", "radiant"];

pub const ATTR_DIM: usize = COLORS.len() + SHAPES.len() + COUNTS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, schemars::JsonSchema)]
pub enum Register {
    A,
    B,
}

impl Register {
    pub fn other(self) -> Self {
        match self {
            Register::A => Register::B,
            Register::B => Register::A,
        }
    }
}

impl std::fmt::Display for Register {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Register::A => "A",
            Register::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordClass {
    Visual,
    Style,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Color,
    Shape,
    Count,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::Color, QuestionType::Shape, QuestionType::Count];
}

/// Word-level vocabulary. Ids are dense and fixed by construction order.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    id_to_word: Vec<String>,
    word_to_id: indexmap::IndexMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let mut words: Vec<String> = vec![PAD.into(), BOS.into()];
        let groups: [&[&str]; 6] = [&COLORS, &SHAPES, &COUNTS, &STYLE_A, &STYLE_B, &PUNCT];
        for g in groups {
            words.extend(g.iter().map(|w| w.to_string()));
        }
        words.extend(QUESTION_WORDS.iter().map(|w| w.to_string()));
        for (_, a, b) in SPLIT_WORDS {
            words.push(a.into());
            words.push(b.into());
        }
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        *self
            .index
            .get(word)
            .unwrap_or_else(|| panic!("word `{word}` not in vocabulary"))
    }

    pub fn try_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn bos(&self) -> u32 {
        self.id(BOS)
    }

    pub fn ids(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn color_ids(&self) -> Vec<u32> {
        self.ids(&COLORS)
    }

    pub fn shape_ids(&self) -> Vec<u32> {
        self.ids(&SHAPES)
    }

    pub fn count_ids(&self) -> Vec<u32> {
        self.ids(&COUNTS)
    }

    /// Candidate answers for a question type.
    pub fn candidates(&self, q: QuestionType) -> Vec<u32> {
        match q {
            QuestionType::Color => self.color_ids(),
            QuestionType::Shape => self.shape_ids(),
            QuestionType::Count => self.count_ids(),
        }
    }

    pub fn style_words(&self, register: Register) -> Vec<u32> {
        match register {
            Register::A => self.ids(&STYLE_A),
            Register::B => self.ids(&STYLE_B),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            id_to_word: self.words.clone(),
            word_to_id: self
                .words
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i as u32))
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        Ok(Self::from_words(file.id_to_word))
    }
}

/// Categorical image content and its noisy one-hot encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageAttrs {
    pub color: usize,
    pub shape: usize,
    pub count: usize,
}

impl ImageAttrs {
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            color: rng.random_range(0..COLORS.len()),
            shape: rng.random_range(0..SHAPES.len()),
            count: rng.random_range(0..COUNTS.len()),
        }
    }

    pub fn one_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; ATTR_DIM];
        v[self.color] = 1.0;
        v[COLORS.len() + self.shape] = 1.0;
        v[COLORS.len() + SHAPES.len() + self.count] = 1.0;
        v
    }

    pub fn encode(&self, noise_std: f64, rng: &mut Rng) -> Vec<f32> {
        let mut v = self.one_hot();
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("valid std");
            for x in &mut v {
                *x += normal.sample(rng) as f32;
            }
        }
        v
    }

    /// Inverse of [`encode`](Self::encode): argmax within each category block.
    pub fn decode(v: &[f32]) -> Result<Self> {
        if v.len() != ATTR_DIM {
            return Err(Error::shape(
                "decode_attrs",
                format!("expected {ATTR_DIM}, got {}", v.len()),
            ));
        }
        let argmax = |s: &[f32]| {
            s.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (i, &x)| if x > best.1 { (i, x) } else { best },
                )
                .0
        };
        let (c, rest) = v.split_at(COLORS.len());
        let (s, n) = rest.split_at(SHAPES.len());
        Ok(Self {
            color: argmax(c),
            shape: argmax(s),
            count: argmax(n),
        })
    }

    pub fn answer_word(&self, q: QuestionType) -> &'static str {
        match q {
            QuestionType::Color => COLORS[self.color],
            QuestionType::Shape => SHAPES[self.shape],
            QuestionType::Count => COUNTS[self.count],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub label: WordClass,
}

/// One training example. Text-only corpora leave `attrs` empty; instruction
/// samples carry `question`/`answer` and an empty caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MMSample {
    pub attrs: Option<Vec<f32>>,
    pub caption: Vec<u32>,
    pub spans: Vec<Span>,
    pub question: Option<Vec<u32>>,
    pub answer: Option<Vec<u32>>,
    pub register: Option<Register>,
}

impl MMSample {
    pub fn is_instruction(&self) -> bool {
        self.question.is_some() && self.answer.is_some()
    }

    /// Token ids of each labeled word in the caption.
    pub fn words(&self) -> impl Iterator<Item = (&[u32], Span)> + '_ {
        self.spans
            .iter()
            .map(move |s| (&self.caption[s.start..s.start + s.len], *s))
    }

    pub fn image(&self) -> Option<ImageAttrs> {
        self.attrs.as_deref().and_then(|a| ImageAttrs::decode(a).ok())
    }
}

/// Held-out visual QA item with its candidate answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    #[serde(flatten)]
    pub sample: MMSample,
    pub question_type: QuestionType,
    pub gold: u32,
    pub candidates: Vec<u32>,
}

#[derive(Clone, Copy)]
enum Slot {
    Lit(&'static str),
    Count,
    Color,
    Shape,
    Adverb,
    Adjective,
}

use Slot::*;

const TEMPLATES_A: [&[Slot]; 2] = [
    &[Lit("a"), Count, Color, Shape, Lit(".")],
    &[Lit("the"), Lit("photo"), Lit("of"), Count, Color, Shape, Lit(".")],
];

const TEMPLATES_B: [&[Slot]; 2] = [
    &[
        Lit("this"),
        Lit("image"),
        Adverb,
        Lit("captures"),
        Adjective,
        Lit("scene"),
        Lit("featuring"),
        Count,
        Color,
        Shape,
        Lit("rendered"),
        Lit("in"),
        Lit("vivid"),
        Lit("detail"),
        Lit("!"),
    ],
    &[
        Lit("rendered"),
        Lit("in"),
        Lit("vivid"),
        Lit("detail"),
        Lit(","),
        Lit("this"),
        Adjective,
        Lit("scene"),
        Adverb,
        Lit("captures"),
        Count,
        Color,
        Shape,
        Lit("!"),
    ],
];

/// Deterministic corpus generator.
#[derive(Clone, Debug)]
pub struct Generator {
    pub vocab: Vocab,
    pub noise_std: f64,
    /// Emit the words in [`SPLIT_WORDS`] as two tokens.
    pub split_words: bool,
}

impl Generator {
    pub fn new(noise_std: f64, split_words: bool) -> Self {
        Self {
            vocab: Vocab::standard(),
            noise_std,
            split_words,
        }
    }

    fn push_word(&self, word: &str, label: WordClass, caption: &mut Vec<u32>, spans: &mut Vec<Span>) {
        let start = caption.len();
        match SPLIT_WORDS
            .iter()
            .find(|(w, _, _)| *w == word)
            .filter(|_| self.split_words)
        {
            Some((_, a, b)) => {
                caption.push(self.vocab.id(a));
                caption.push(self.vocab.id(b));
            }
            None => caption.push(self.vocab.id(word)),
        }
        spans.push(Span {
            start,
            len: caption.len() - start,
            label,
        });
    }

    fn render(&self, register: Register, attrs: &ImageAttrs, rng: &mut Rng) -> (Vec<u32>, Vec<Span>) {
        let templates = match register {
            Register::A => &TEMPLATES_A,
            Register::B => &TEMPLATES_B,
        };
        let template = templates[rng.random_range(0..templates.len())];
        let mut caption = Vec::new();
        let mut spans = Vec::new();
        for slot in template {
            let (word, label) = match *slot {
                Lit(w) if PUNCT.contains(&w) => (w, WordClass::Other),
                Lit(w) => (w, WordClass::Style),
                Count => (COUNTS[attrs.count], WordClass::Visual),
                Color => (COLORS[attrs.color], WordClass::Visual),
                Shape => (SHAPES[attrs.shape], WordClass::Visual),
                Adverb => (*B_ADVERBS.choose(rng).expect("non-empty"), WordClass::Style),
                Adjective => (*B_ADJECTIVES.choose(rng).expect("non-empty"), WordClass::Style),
            };
            self.push_word(word, label, &mut caption, &mut spans);
        }
        (caption, spans)
    }

    /// Text-only sentences mostly in `register`; each sentence switches to the
    /// other register with probability `other_fraction`. With a fraction of 0
    /// the output equals [`Generator::base_corpus`].
    pub fn base_corpus_mixed(&self, register: Register, n: usize, other_fraction: f64, seed: u64) -> Vec<MMSample> {
        let root = SeedStream::new(seed).child("base");
        let mut main = root.child(&register.to_string()).rng();
        let mut other = root.child(&register.other().to_string()).rng();
        let mut pick = root.child("mix").rng();
        (0..n)
            .map(|_| {
                let switch = pick.random::<f64>() < other_fraction;
                let (reg, rng) = if switch {
                    (register.other(), &mut other)
                } else {
                    (register, &mut main)
                };
                let attrs = ImageAttrs::sample(rng);
                let (caption, spans) = self.render(reg, &attrs, rng);
                MMSample {
                    attrs: None,
                    caption,
                    spans,
                    question: None,
                    answer: None,
                    register: Some(reg),
                }
            })
            .collect()
    }

    /// Text-only sentences in `register`.
    pub fn base_corpus(&self, register: Register, n: usize, seed: u64) -> Vec<MMSample> {
        let mut rng = SeedStream::new(seed).child("base").child(&register.to_string()).rng();
        (0..n)
            .map(|_| {
                let attrs = ImageAttrs::sample(&mut rng);
                let (caption, spans) = self.render(register, &attrs, &mut rng);
                MMSample {
                    attrs: None,
                    caption,
                    spans,
                    question: None,
                    answer: None,
                    register: Some(register),
                }
            })
            .collect()
    }

    /// Image-caption pairs in `register`.
    pub fn caption_corpus(&self, register: Register, n: usize, seed: u64) -> Vec<MMSample> {
        // Attributes and noise come from streams that do not depend on the
        // register, so both registers describe the very same images.
        let root = SeedStream::new(seed).child("captions");
        let mut attr_rng = root.child("attrs").rng();
        let mut text_rng = root.child("text").child(&register.to_string()).rng();
        (0..n)
            .map(|_| {
                let attrs = ImageAttrs::sample(&mut attr_rng);
                let vector = attrs.encode(self.noise_std, &mut attr_rng);
                let (caption, spans) = self.render(register, &attrs, &mut text_rng);
                MMSample {
                    attrs: Some(vector),
                    caption,
                    spans,
                    question: None,
                    answer: None,
                    register: Some(register),
                }
            })
            .collect()
    }

    fn qa_sample(&self, attrs: &ImageAttrs, q: QuestionType, rng: &mut Rng) -> MMSample {
        let question = match q {
            QuestionType::Color => self.vocab.ids(&["what", "color", "?"]),
            QuestionType::Shape => self.vocab.ids(&["what", "shape", "?"]),
            QuestionType::Count => self.vocab.ids(&["how", "many", "?"]),
        };
        MMSample {
            attrs: Some(attrs.encode(self.noise_std, rng)),
            caption: Vec::new(),
            spans: Vec::new(),
            question: Some(question),
            answer: Some(vec![self.vocab.id(attrs.answer_word(q))]),
            register: None,
        }
    }

    /// Visual question answering samples with single-word answers.
    pub fn instruct_corpus(&self, n: usize, seed: u64) -> Vec<MMSample> {
        let mut rng = SeedStream::new(seed).child("instruct").rng();
        (0..n)
            .map(|_| {
                let attrs = ImageAttrs::sample(&mut rng);
                let q = QuestionType::ALL[rng.random_range(0..3)];
                self.qa_sample(&attrs, q, &mut rng)
            })
            .collect()
    }

    /// Held-out probe items. Uses its own seed stream, disjoint from training data.
    pub fn probe_set(&self, n: usize, seed: u64) -> Vec<ProbeItem> {
        let mut rng = SeedStream::new(seed).child("probe").rng();
        (0..n)
            .map(|_| {
                let attrs = ImageAttrs::sample(&mut rng);
                let q = QuestionType::ALL[rng.random_range(0..3)];
                let sample = self.qa_sample(&attrs, q, &mut rng);
                ProbeItem {
                    gold: self.vocab.id(attrs.answer_word(q)),
                    candidates: self.vocab.candidates(q),
                    question_type: q,
                    sample,
                }
            })
            .collect()
    }
}

/// Reads the visual words of a caption back into attributes.
pub fn decode_caption(vocab: &Vocab, sample: &MMSample) -> Option<ImageAttrs> {
    let mut color = None;
    let mut shape = None;
    let mut count = None;
    for (ids, span) in sample.words() {
        if span.label != WordClass::Visual {
            continue;
        }
        let word: String = match ids {
            [one] => vocab.word(*one).to_string(),
            [a, b] => SPLIT_WORDS
                .iter()
                .find(|(_, x, y)| *x == vocab.word(*a) && *y == vocab.word(*b))
                .map(|(w, _, _)| w.to_string())?,
            _ => return None,
        };
        let w = word.as_str();
        if let Some(i) = COLORS.iter().position(|&c| c == w) {
            color = Some(i);
        } else if let Some(i) = SHAPES.iter().position(|&c| c == w) {
            shape = Some(i);
        } else if let Some(i) = COUNTS.iter().position(|&c| c == w) {
            count = Some(i);
        }
    }
    Some(ImageAttrs {
        color: color?,
        shape: shape?,
        count: count?,
    })
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<S: DeserializeOwned>(path: &Path) -> Result<Vec<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn gen() -> Generator {
        Generator::new(0.05, false)
    }

    #[test]
    fn vocab_fits_and_lexicons_are_disjoint() {
        let v = Vocab::standard();
        assert!(v.len() <= 128, "vocab {}", v.len());
        let sets: Vec<HashSet<&str>> = vec![
            COLORS.iter().chain(&SHAPES).chain(&COUNTS).copied().collect(),
            STYLE_A.iter().copied().collect(),
            STYLE_B.iter().copied().collect(),
        ];
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        let unique: HashSet<_> = (0..v.len() as u32).map(|i| v.word(i)).collect();
        assert_eq!(unique.len(), v.len());
    }

    #[test]
    fn register_a_grammar_instance() {
        let g = gen();
        let corpus = g.base_corpus(Register::A, 200, 1);
        let short = corpus
            .iter()
            .find(|s| s.caption.len() == 5)
            .expect("template A1 appears");
        let text = g.vocab.decode(&short.caption);
        let words: Vec<&str> = text.split(' ').collect();
        assert_eq!(words[0], "a");
        assert!(COUNTS.contains(&words[1]) && COLORS.contains(&words[2]) && SHAPES.contains(&words[3]));
        assert_eq!(words[4], ".");
    }

    #[test]
    fn generators_are_deterministic() {
        let g = gen();
        assert_eq!(g.base_corpus(Register::A, 50, 9), g.base_corpus(Register::A, 50, 9));
        assert_eq!(
            g.caption_corpus(Register::B, 50, 9),
            g.caption_corpus(Register::B, 50, 9)
        );
        assert_eq!(g.instruct_corpus(50, 9), g.instruct_corpus(50, 9));
        assert_eq!(g.probe_set(50, 9), g.probe_set(50, 9));
        assert_ne!(g.base_corpus(Register::A, 50, 9), g.base_corpus(Register::A, 50, 10));
    }

    #[test]
    fn register_a_never_uses_register_b_words() {
        let g = gen();
        let b: HashSet<u32> = g.vocab.style_words(Register::B).into_iter().collect();
        for s in g.base_corpus(Register::A, 500, 3) {
            assert!(s.caption.iter().all(|t| !b.contains(t)));
        }
    }

    #[test]
    fn mixed_base_corpus() {
        let g = gen();
        assert_eq!(
            g.base_corpus_mixed(Register::A, 300, 0.0, 5),
            g.base_corpus(Register::A, 300, 5)
        );
        let mixed = g.base_corpus_mixed(Register::A, 2000, 0.1, 5);
        let b = mixed.iter().filter(|s| s.register == Some(Register::B)).count();
        assert!((150..250).contains(&b), "{b} of 2000 in register B");
        let b_words: HashSet<u32> = g.vocab.style_words(Register::B).into_iter().collect();
        for s in mixed.iter().filter(|s| s.register == Some(Register::A)) {
            assert!(s.caption.iter().all(|t| !b_words.contains(t)));
        }
        assert!(g
            .base_corpus_mixed(Register::B, 50, 1.0, 5)
            .iter()
            .all(|s| s.register == Some(Register::A)));
    }

    #[test]
    fn register_b_caption_structure() {
        let g = gen();
        for s in g.caption_corpus(Register::B, 100, 4) {
            let visual: Vec<&str> = s
                .words()
                .filter(|(_, sp)| sp.label == WordClass::Visual)
                .map(|(ids, _)| g.vocab.word(ids[0]))
                .collect();
            assert_eq!(visual.len(), 3);
            let attrs = s.image().unwrap();
            assert_eq!(
                visual,
                vec![COUNTS[attrs.count], COLORS[attrs.color], SHAPES[attrs.shape]]
            );
            assert!(g.vocab.decode(&s.caption).contains("captures"));
        }
    }

    #[test]
    fn spans_partition_the_caption() {
        for split in [false, true] {
            let g = Generator::new(0.05, split);
            for s in g.caption_corpus(Register::B, 100, 5) {
                let mut next = 0;
                for sp in &s.spans {
                    assert_eq!(sp.start, next);
                    next += sp.len;
                }
                assert_eq!(next, s.caption.len());
                let by_class = |c| s.spans.iter().filter(|sp| sp.label == c).count();
                assert_eq!(
                    by_class(WordClass::Visual) + by_class(WordClass::Style) + by_class(WordClass::Other),
                    s.spans.len()
                );
            }
        }
    }

    #[test]
    fn register_b_captions_are_longer_and_describe_same_images() {
        let g = gen();
        let a = g.caption_corpus(Register::A, 300, 6);
        let b = g.caption_corpus(Register::B, 300, 6);
        let max_a = a.iter().map(|s| s.caption.len()).max().unwrap();
        let min_b = b.iter().map(|s| s.caption.len()).min().unwrap();
        assert!(min_b > max_a);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.attrs, y.attrs);
        }
    }

    #[test]
    fn caption_decodes_to_attrs() {
        for split in [false, true] {
            let g = Generator::new(0.05, split);
            for s in g
                .caption_corpus(Register::B, 200, 8)
                .iter()
                .chain(&g.caption_corpus(Register::A, 200, 8))
            {
                assert_eq!(decode_caption(&g.vocab, s), s.image());
            }
        }
    }

    #[test]
    fn split_mode_produces_two_token_words() {
        let g = Generator::new(0.0, true);
        let corpus = g.caption_corpus(Register::B, 50, 2);
        let two = corpus
            .iter()
            .flat_map(|s| s.spans.iter())
            .filter(|sp| sp.len == 2)
            .count();
        assert!(two >= 50, "every B caption contains `captures`");
    }

    #[test]
    fn unigram_style_classifier_separates_registers() {
        let g = gen();
        let a: HashSet<u32> = g.vocab.style_words(Register::A).into_iter().collect();
        let b: HashSet<u32> = g.vocab.style_words(Register::B).into_iter().collect();
        let mut correct = 0;
        let mut total = 0;
        for reg in [Register::A, Register::B] {
            for s in g.caption_corpus(reg, 200, 11) {
                let score_a = s.caption.iter().filter(|t| a.contains(t)).count();
                let score_b = s.caption.iter().filter(|t| b.contains(t)).count();
                let pred = if score_a > score_b { Register::A } else { Register::B };
                correct += usize::from(pred == reg);
                total += 1;
            }
        }
        assert_eq!(correct, total);
    }

    #[test]
    fn instruct_answers_match_attrs() {
        let g = gen();
        let visual: HashSet<u32> = g
            .vocab
            .color_ids()
            .into_iter()
            .chain(g.vocab.shape_ids())
            .chain(g.vocab.count_ids())
            .collect();
        for s in g.instruct_corpus(300, 3) {
            let ans = s.answer.as_ref().unwrap();
            assert_eq!(ans.len(), 1);
            assert!(visual.contains(&ans[0]));
            let attrs = s.image().unwrap();
            let q = g.vocab.decode(s.question.as_ref().unwrap());
            let expect = match q.as_str() {
                "what color ?" => COLORS[attrs.color],
                "what shape ?" => SHAPES[attrs.shape],
                "how many ?" => COUNTS[attrs.count],
                other => panic!("unexpected question {other}"),
            };
            assert_eq!(g.vocab.word(ans[0]), expect);
        }
    }

    #[test]
    fn red_circle_three_color_question() {
        let g = Generator::new(0.0, false);
        let attrs = ImageAttrs {
            color: 0,
            shape: 0,
            count: 2,
        };
        let s = g.qa_sample(&attrs, QuestionType::Color, &mut SeedStream::new(0).rng());
        assert_eq!(g.vocab.decode(s.answer.as_ref().unwrap()), "red");
    }

    #[test]
    fn question_types_roughly_uniform() {
        // χ² with 2 degrees of freedom; 13.8 is the 0.001 critical value.
        let g = gen();
        let n = 3000;
        let mut counts = [0usize; 3];
        for s in g.instruct_corpus(n, 21) {
            let q = s.question.unwrap();
            let k = match g.vocab.word(q[1]) {
                "color" => 0,
                "shape" => 1,
                _ => 2,
            };
            counts[k] += 1;
        }
        let e = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 13.8, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn probe_items_carry_candidates() {
        let g = gen();
        let probe = g.probe_set(500, 1);
        assert_eq!(probe.len(), 500);
        for item in &probe {
            assert!(item.candidates.contains(&item.gold));
            let expected = match item.question_type {
                QuestionType::Count => 5,
                _ => 8,
            };
            assert_eq!(item.candidates.len(), expected);
        }
        let shape_item = probe.iter().find(|p| p.question_type == QuestionType::Shape).unwrap();
        let attrs = shape_item.sample.image().unwrap();
        assert_eq!(g.vocab.word(shape_item.gold), SHAPES[attrs.shape]);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = gen();
        let corpus = g.caption_corpus(Register::B, 10, 1);
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &corpus).unwrap();
        let back: Vec<MMSample> = read_jsonl(&path).unwrap();
        assert_eq!(back, corpus);
        let line = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(first["register"], "B");
        assert_eq!(first["spans"][0]["label"], "style");
        assert!(first["question"].is_null());

        let vpath = dir.path().join("vocab.json");
        g.vocab.write_json(&vpath).unwrap();
        let v = Vocab::read_json(&vpath).unwrap();
        assert_eq!(v.len(), g.vocab.len());
        assert_eq!(v.id("captures"), g.vocab.id("captures"));
    }
}
