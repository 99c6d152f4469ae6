//! Deterministic synthetic data: an entity corpus with a QA benchmark whose
//! answers can only be resolved through background sentences, plus small
//! fixtures for smoke training.
//!
//! Every entity page states the entity's occupation in one sentence. A QA
//! passage lists several entities, and the question asks which of them
//! holds a given occupation. The passage never states occupations, and
//! train and dev questions use disjoint entities, so a reader without
//! backgrounds is at chance.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LinkRecord, PageRecord, SentenceRecord};
use crate::packer::QaRecord;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
pub const ROLES: &[&str] = &["pilot", "farmer", "singer", "baker", "doctor", "sailor"];
const TOWNS: &[&str] = &["harbor", "valley", "ridge", "delta", "meadow", "summit"];
const HOBBIES: &[&str] = &["chess", "tennis", "poetry", "fishing", "painting", "hiking"];
const OPENERS: &[&str] = &[
    "It rained all morning .",
    "The hall was crowded .",
    "Music played in the square .",
    "Nobody expected the news .",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train_entities: usize,
    pub dev_entities: usize,
    pub train_questions: usize,
    pub dev_questions: usize,
    /// Entities listed per passage; exactly one holds the asked role.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_entities: 240,
            dev_entities: 80,
            train_questions: 2000,
            dev_questions: 200,
            candidates: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub page_id: String,
    pub name: String,
    pub role: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub corpus: Vec<PageRecord>,
    pub train: Vec<QaRecord>,
    pub dev: Vec<QaRecord>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn fresh_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name: String = (0..3)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if seen.insert(name.clone()) {
            out.push(capitalize(&name));
        }
    }
    out
}

fn sentence(text: String, links: Vec<LinkRecord>) -> SentenceRecord {
    SentenceRecord { text, links }
}

fn link_to(text: &str, surface: &str, target: &str) -> LinkRecord {
    let byte = text.rfind(surface).expect("surface present");
    let start = text[..byte].chars().count();
    LinkRecord {
        start,
        end: start + surface.chars().count(),
        target: target.to_string(),
    }
}

fn entity_page(e: &Entity, friend: &Entity, rng: &mut ChaCha8Rng) -> PageRecord {
    let town = TOWNS.choose(rng).unwrap();
    let hobby = HOBBIES.choose(rng).unwrap();
    let friend_text = format!("{} is a friend of {} .", e.name, friend.name);
    let friend_link = link_to(&friend_text, &friend.name, &friend.page_id);
    let mut sentences = vec![
        sentence(format!("{} was born in {} .", e.name, town), vec![]),
        sentence(format!("{} works as a {} .", e.name, ROLES[e.role]), vec![]),
        sentence(format!("{} enjoys {} .", e.name, hobby), vec![]),
        sentence(friend_text, vec![friend_link]),
    ];
    sentences[..3].shuffle(rng);
    PageRecord {
        page_id: e.page_id.clone(),
        title: e.name.clone(),
        sentences,
    }
}

fn question_record(qid: String, pool: &[Entity], k: usize, rng: &mut ChaCha8Rng) -> QaRecord {
    // Distinct roles among the listed entities, so the answer is unique.
    let mut chosen: Vec<&Entity> = Vec::with_capacity(k);
    while chosen.len() < k {
        let e = pool.choose(rng).unwrap();
        if chosen.iter().all(|c| c.role != e.role) {
            chosen.push(e);
        }
    }
    let answer = chosen[rng.random_range(0..k)];
    let names: Vec<&str> = chosen.iter().map(|e| e.name.as_str()).collect();
    let listed = format!("{} and {}", names[..k - 1].join(" , "), names[k - 1]);
    let body = match rng.random_range(0..3) {
        0 => format!("At the meeting were {listed} ."),
        1 => format!("The guests were {listed} ."),
        _ => format!("{listed} arrived at the hall ."),
    };
    QaRecord {
        qid,
        question: format!("Which guest works as a {} ?", ROLES[answer.role]),
        context: format!("{} {}", OPENERS.choose(rng).unwrap(), body),
        answers: vec![answer.name.clone()],
        passage_refs: Vec::new(),
    }
}

/// Corpus plus train/dev questions over disjoint entity sets.
pub fn tek_benchmark(cfg: &SyntheticConfig) -> SyntheticBenchmark {
    assert!(cfg.candidates >= 2 && cfg.candidates <= ROLES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.train_entities + cfg.dev_entities;
    let entities: Vec<Entity> = fresh_names(n, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, name)| Entity {
            page_id: format!("E{i:05}"),
            name,
            role: i % ROLES.len(),
        })
        .collect();
    let corpus = entities
        .iter()
        .enumerate()
        .map(|(i, e)| entity_page(e, &entities[(i * 7 + 3) % n], &mut rng))
        .collect();
    let (train_pool, dev_pool) = entities.split_at(cfg.train_entities);
    let train = (0..cfg.train_questions)
        .map(|i| question_record(format!("train-{i:05}"), train_pool, cfg.candidates, &mut rng))
        .collect();
    let dev = (0..cfg.dev_questions)
        .map(|i| question_record(format!("dev-{i:05}"), dev_pool, cfg.candidates, &mut rng))
        .collect();
    SyntheticBenchmark { corpus, train, dev }
}

/// Twenty hand-written reading-comprehension records for overfitting.
pub fn overfit_qa_records() -> Vec<QaRecord> {
    const ROWS: [(&str, &str, &str); 20] = [
        (
            "Which river flows west of the city ?",
            "The Tigris runs through the city and the Euphrates flows west of it .",
            "Euphrates",
        ),
        (
            "Who painted the ceiling ?",
            "The ceiling was painted by Michelangelo over four years .",
            "Michelangelo",
        ),
        (
            "What is the capital of Peru ?",
            "Lima is the capital of Peru and its largest city .",
            "Lima",
        ),
        (
            "When did the bridge open ?",
            "Work began in 1933 and the bridge opened in 1937 .",
            "1937",
        ),
        (
            "What metal is the statue made of ?",
            "The statue is made of copper that turned green .",
            "copper",
        ),
        (
            "Who wrote the letter ?",
            "The letter was written by Marie before she left Paris .",
            "Marie",
        ),
        (
            "Which planet is closest to the sun ?",
            "Mercury is the planet closest to the sun .",
            "Mercury",
        ),
        (
            "What does the bakery sell ?",
            "The bakery on the corner sells bread and little else .",
            "bread",
        ),
        (
            "Where was the treaty signed ?",
            "The treaty was signed in Utrecht after long talks .",
            "Utrecht",
        ),
        (
            "How many moons does Mars have ?",
            "Mars has two moons , Phobos and Deimos .",
            "two",
        ),
        (
            "Which team won the final ?",
            "Porto beat Monaco to win the final in Gelsenkirchen .",
            "Porto",
        ),
        (
            "What instrument did she play ?",
            "She played the cello in a small orchestra .",
            "cello",
        ),
        (
            "Who founded the company ?",
            "The company was founded by Tanaka in a garage .",
            "Tanaka",
        ),
        (
            "What color is the door ?",
            "The old house has a red door and white walls .",
            "red",
        ),
        (
            "Which language is spoken there ?",
            "Most people in the valley speak Romansh at home .",
            "Romansh",
        ),
        (
            "What animal guards the farm ?",
            "A large goose guards the farm at night .",
            "goose",
        ),
        (
            "Who discovered the comet ?",
            "The comet was discovered by Halley in the autumn .",
            "Halley",
        ),
        (
            "What grain is grown in the delta ?",
            "Farmers in the delta grow rice on flooded fields .",
            "rice",
        ),
        (
            "Which ship sank first ?",
            "The Vasa sank first , long before the other ships .",
            "Vasa",
        ),
        (
            "What did the boy find ?",
            "Walking home , the boy found a silver coin .",
            "coin",
        ),
    ];
    ROWS.iter()
        .enumerate()
        .map(|(i, (q, c, a))| QaRecord {
            qid: format!("overfit-{i:02}"),
            question: q.to_string(),
            context: c.to_string(),
            answers: vec![a.to_string()],
            passage_refs: Vec::new(),
        })
        .collect()
}
