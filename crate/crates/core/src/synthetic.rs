//! Seeded generator for a synthetic patient-doctor benchmark with known
//! gold highlights, used by the examples, the fixtures and the acceptance
//! suite.
//!
//! Every chat follows the same anatomy: an opening patient message that
//! states age and gender and names a category-specific complaint, doctor
//! follow-ups, and further patient turns adding symptoms, durations and
//! temperatures. Gold highlights are planted by construction — lexicon
//! terms, shared medical vocabulary, numbers, and the age/gender phrase.
//!
//! The corpus deliberately bakes in the failure modes the models are
//! measured on:
//!
//! * the words `year`, `old` and `days` are gold but appear in every single
//!   chat, so their document frequency equals the corpus size and an IDF
//!   weighting scores them zero;
//! * numbers, gender words and the duration phrase are gold but never
//!   listed in the term lexicon, so a model pretrained on the lexicon only
//!   learns them from fine-tuning;
//! * six ambiguous words (one per category, e.g. `cold`, `period`,
//!   `pressure`) are gold only in their medical sense, which is
//!   recognizable from neighboring words alone — context-free scoring
//!   cannot separate the two senses.

use crate::corpus::{Conversation, IssueCategory, Message, Role, TermLexicon};
use crate::tagger::EmbeddingTable;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

const SIGNAL_TERMS: [(IssueCategory, [&str; 8]); 6] = [
    (
        IssueCategory::ColdOrFlu,
        [
            "sneezing",
            "congestion",
            "chills",
            "phlegm",
            "sinus",
            "coughing",
            "hoarse",
            "shivering",
        ],
    ),
    (
        IssueCategory::Covid19,
        [
            "covid",
            "anosmia",
            "breathless",
            "fatigue",
            "oximeter",
            "variant",
            "booster",
            "pneumonia",
        ],
    ),
    (
        IssueCategory::Gastrointestinal,
        [
            "diarrhea",
            "bloating",
            "constipation",
            "heartburn",
            "vomiting",
            "cramping",
            "indigestion",
            "bowel",
        ],
    ),
    (
        IssueCategory::Pregnancy,
        [
            "trimester",
            "ultrasound",
            "contractions",
            "midwife",
            "folate",
            "ovulation",
            "nausea",
            "spotting",
        ],
    ),
    (
        IssueCategory::SexualHealth,
        [
            "chlamydia",
            "herpes",
            "contraception",
            "libido",
            "genital",
            "syphilis",
            "testosterone",
            "hiv",
        ],
    ),
    (
        IssueCategory::Skin,
        [
            "eczema",
            "psoriasis",
            "hives",
            "acne",
            "blister",
            "mole",
            "dermatitis",
            "itchy",
        ],
    ),
];

const GENERAL_TERMS: [&str; 6] = ["fever", "pain", "infection", "medication", "swelling", "ache"];

const GENDER_WORDS: [&str; 4] = ["woman", "man", "female", "male"];
const AGES: [&str; 10] = ["19", "23", "27", "31", "34", "38", "42", "47", "51", "55"];
const DAY_COUNTS: [&str; 6] = ["2", "3", "4", "5", "7", "10"];
const TEMPERATURES: [&str; 4] = ["37.8", "38.4", "38.9", "39.2"];

const FILLER_TERMS: [&str; 12] = [
    "morning",
    "evening",
    "work",
    "home",
    "week",
    "today",
    "yesterday",
    "weather",
    "coffee",
    "garden",
    "holiday",
    "traffic",
];

const DOCTOR_LINES: [&str; 6] = [
    "how long have you had these symptoms",
    "are you taking any medication right now",
    "does anything make it better or worse",
    "i see thank you for explaining that",
    "have you measured your temperature today",
    "please describe when it all started",
];

const PATIENT_FILLERS: [&str; 4] = [
    "it is really getting worse",
    "i am quite worried about it",
    "nothing seems to help so far",
    "it started earlier this week",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub train_chats: usize,
    pub test_chats: usize,
    pub seed: u64,
    pub embedding_dim: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            train_chats: 300,
            test_chats: 50,
            seed: 0,
            embedding_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub train: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub lexicon: TermLexicon,
    pub embeddings: EmbeddingTable,
}

/// Word-by-word sentence assembly with aligned gold flags.
#[derive(Default)]
struct Draft {
    words: Vec<String>,
    gold: Vec<u8>,
}

impl Draft {
    /// Appends space-separated words, all carrying the same gold flag.
    fn say(&mut self, phrase: &str, gold: bool) {
        for word in phrase.split_whitespace() {
            self.words.push(word.to_string());
            self.gold.push(u8::from(gold));
        }
    }

    fn into_message(self, role: Role) -> Message {
        let text = self.words.join(" ");
        let gold = match role {
            Role::Patient => Some(self.gold),
            Role::Doctor => None,
        };
        Message::new(role, &text, gold).expect("synthetic text tokenizes one word per token")
    }
}

fn signal_terms(category: IssueCategory) -> &'static [&'static str; 8] {
    &SIGNAL_TERMS
        .iter()
        .find(|(c, _)| *c == category)
        .expect("every category has terms")
        .1
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// The ambiguous words and their home categories: each is gold in its home
/// category's medical sense and mundane everywhere else.
const AMBIGUOUS: [(&str, IssueCategory); 6] = [
    ("cold", IssueCategory::ColdOrFlu),
    ("pressure", IssueCategory::Covid19),
    ("movement", IssueCategory::Gastrointestinal),
    ("period", IssueCategory::Pregnancy),
    ("burning", IssueCategory::SexualHealth),
    ("spots", IssueCategory::Skin),
];

fn ambiguous_gold_sentence(draft: &mut Draft, word: &str) {
    match word {
        "cold" => {
            draft.say("i think i caught a bad", false);
            draft.say("cold", true);
        }
        "pressure" => {
            draft.say("i feel", false);
            draft.say("pressure", true);
            draft.say("in my chest", false);
        }
        "movement" => {
            draft.say("every", false);
            draft.say("bowel movement", true);
            draft.say("hurts", false);
        }
        "period" => {
            draft.say("i missed my", false);
            draft.say("period", true);
            draft.say("this month", false);
        }
        "burning" => {
            draft.say("there is a", false);
            draft.say("burning", true);
            draft.say("sensation", false);
        }
        "spots" => {
            draft.say("i found", false);
            draft.say("spots", true);
            draft.say("on my arm", false);
        }
        _ => unreachable!(),
    }
}

fn ambiguous_plain_sentence(draft: &mut Draft, word: &str) {
    match word {
        "cold" => draft.say("the cold weather makes it worse", false),
        "pressure" => draft.say("the pressure at work is high", false),
        "movement" => draft.say("gentle movement helps me relax", false),
        "period" => draft.say("over a long period it got worse", false),
        "burning" => draft.say("a burning smell from the kitchen", false),
        "spots" => draft.say("no parking spots near the office", false),
        _ => unreachable!(),
    }
}

fn build_conversation(id: String, category: IssueCategory, rng: &mut ChaCha8Rng) -> Conversation {
    let signals = signal_terms(category);
    let first_signal = pick(rng, signals.as_slice());
    let mut second_signal = pick(rng, signals.as_slice());
    while second_signal == first_signal {
        second_signal = pick(rng, signals.as_slice());
    }

    // Opening turn: greeting, the age/gender phrase, the main complaint and
    // its duration.
    let mut p1 = Draft::default();
    p1.say("hello i am a", false);
    p1.say(pick(rng, &AGES), true);
    p1.say("year old", true);
    p1.say(pick(rng, &GENDER_WORDS), true);
    p1.say("and i have", false);
    p1.say(first_signal, true);
    p1.say("for", false);
    p1.say(pick(rng, &DAY_COUNTS), true);
    p1.say("days", true);
    p1.say("now", false);

    let d1 = {
        let mut d = Draft::default();
        d.say(pick(rng, &DOCTOR_LINES), false);
        d
    };

    // Second patient turn: more symptoms, sometimes a temperature, maybe an
    // ambiguous sentence, and a filler complaint about e.g. the weather.
    let mut p2 = Draft::default();
    p2.say("yes i also have", false);
    p2.say(second_signal, true);
    if rng.random::<f64>() < 0.7 {
        p2.say("and some", false);
        p2.say(pick(rng, &GENERAL_TERMS), true);
        p2.say("too", false);
    }
    let feverish = matches!(
        category,
        IssueCategory::ColdOrFlu | IssueCategory::Covid19 | IssueCategory::Gastrointestinal
    );
    if feverish && rng.random::<f64>() < 0.5 {
        p2.say("my temperature was", false);
        p2.say(pick(rng, &TEMPERATURES), true);
    }
    let (home_word, _) = AMBIGUOUS
        .iter()
        .find(|(_, home)| *home == category)
        .expect("every category has an ambiguous word");
    if rng.random::<f64>() < 0.9 {
        ambiguous_gold_sentence(&mut p2, home_word);
    }
    if rng.random::<f64>() < 0.6 {
        let others: Vec<&str> = AMBIGUOUS
            .iter()
            .filter(|(_, home)| *home != category)
            .map(|(word, _)| *word)
            .collect();
        ambiguous_plain_sentence(&mut p2, others[rng.random_range(0..others.len())]);
    }
    if rng.random::<f64>() < 0.6 {
        p2.say("the", false);
        p2.say(pick(rng, &FILLER_TERMS), false);
        p2.say("does not help", false);
    }
    p2.say(pick(rng, &PATIENT_FILLERS), false);

    let mut messages = vec![
        p1.into_message(Role::Patient),
        d1.into_message(Role::Doctor),
        p2.into_message(Role::Patient),
    ];

    // Half the chats get one more exchange.
    if rng.random::<f64>() < 0.5 {
        let mut d2 = Draft::default();
        d2.say(pick(rng, &DOCTOR_LINES), false);
        let mut p3 = Draft::default();
        p3.say("the", false);
        p3.say(pick(rng, &GENERAL_TERMS), true);
        p3.say("is still there", false);
        p3.say(pick(rng, &PATIENT_FILLERS), false);
        messages.push(d2.into_message(Role::Doctor));
        messages.push(p3.into_message(Role::Patient));
    }

    Conversation {
        id,
        issue_category: Some(category),
        messages,
    }
}

fn build_split(prefix: &str, chats: usize, rng: &mut ChaCha8Rng) -> Vec<Conversation> {
    let categories: Vec<IssueCategory> = IssueCategory::ALL.to_vec();
    (0..chats)
        .map(|idx| {
            build_conversation(
                format!("{prefix}-{idx:04}"),
                categories[idx % categories.len()],
                rng,
            )
        })
        .collect()
}

fn build_lexicon() -> TermLexicon {
    let mut medical_terms = BTreeSet::new();
    for (_, terms) in SIGNAL_TERMS {
        for term in terms {
            medical_terms.insert(term.to_string());
        }
    }
    for term in GENERAL_TERMS {
        medical_terms.insert(term.to_string());
    }
    let non_medical_terms = FILLER_TERMS.iter().map(|t| t.to_string()).collect();
    TermLexicon {
        medical_terms,
        non_medical_terms,
    }
}

fn build_embeddings(
    benchmark_vocab: &BTreeSet<String>,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> EmbeddingTable {
    let mut vectors = BTreeMap::new();
    let mut sum = vec![0.0; dim];
    for word in benchmark_vocab {
        let vector: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.8..0.8)).collect();
        for (s, v) in sum.iter_mut().zip(&vector) {
            *s += v;
        }
        vectors.insert(word.clone(), vector);
    }
    let n = vectors.len().max(1) as f64;
    EmbeddingTable {
        dim,
        oov_vector: sum.into_iter().map(|s| s / n).collect(),
        vectors,
    }
}

/// Generates the full benchmark: train and test splits, the term lexicon,
/// and a seeded embedding table covering the whole synthetic vocabulary.
pub fn generate(options: &SyntheticOptions) -> SyntheticBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let train = build_split("train", options.train_chats, &mut rng);
    let test = build_split("test", options.test_chats, &mut rng);
    let lexicon = build_lexicon();

    let mut vocab = BTreeSet::new();
    for conversation in train.iter().chain(&test) {
        for message in &conversation.messages {
            for token in &message.tokens {
                vocab.insert(token.norm.clone());
            }
        }
    }
    for term in lexicon.medical_terms.iter().chain(&lexicon.non_medical_terms) {
        for word in term.split_whitespace() {
            vocab.insert(word.to_string());
        }
    }
    let embeddings = build_embeddings(&vocab, options.embedding_dim, &mut rng);

    SyntheticBenchmark {
        train,
        test,
        lexicon,
        embeddings,
    }
}

// ---------------------------------------------------------------------------
// On-disk fixture layout

#[derive(Serialize)]
struct JsonMessage<'a> {
    role: &'static str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<&'a [u8]>,
}

#[derive(Serialize)]
struct JsonConversation<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    issue_category: Option<&'static str>,
    messages: Vec<JsonMessage<'a>>,
}

/// Serializes conversations in the JSON-lines layout that
/// [`crate::corpus::load_dataset`] reads back.
pub fn write_dataset(path: &Path, conversations: &[Conversation]) -> std::io::Result<()> {
    let mut out = fs::File::create(path)?;
    for conversation in conversations {
        let json = JsonConversation {
            id: &conversation.id,
            issue_category: conversation.issue_category.map(|c| c.as_str()),
            messages: conversation
                .messages
                .iter()
                .map(|m| JsonMessage {
                    role: match m.role {
                        Role::Patient => "patient",
                        Role::Doctor => "doctor",
                    },
                    text: &m.raw_text,
                    gold: m.gold.as_deref(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &json)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes the embedding table in the `"vocab_size dim"` text format that
/// [`EmbeddingTable::load`] reads back.
pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", table.vectors.len(), table.dim));
    for (word, vector) in &table.vectors {
        out.push_str(word);
        for v in vector {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)
}

fn write_term_list(path: &Path, terms: &BTreeSet<String>) -> std::io::Result<()> {
    let mut out = String::new();
    for term in terms {
        out.push_str(term);
        out.push('\n');
    }
    fs::write(path, out)
}

/// Dumps the whole benchmark under `dir`: `train.jsonl`, `test.jsonl`,
/// `medical_terms.txt`, `non_medical_terms.txt` and `embeddings.txt`.
pub fn write_benchmark(dir: &Path, benchmark: &SyntheticBenchmark) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(&dir.join("train.jsonl"), &benchmark.train)?;
    write_dataset(&dir.join("test.jsonl"), &benchmark.test)?;
    write_term_list(&dir.join("medical_terms.txt"), &benchmark.lexicon.medical_terms)?;
    write_term_list(
        &dir.join("non_medical_terms.txt"),
        &benchmark.lexicon.non_medical_terms,
    )?;
    write_embeddings(&dir.join("embeddings.txt"), &benchmark.embeddings)
}
