//! Corpus files and synthetic generators.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pkmlab::numerics::rng_from_seed;
use pkmlab::train::LabeledExample;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::vocab::Vocab;

/// Non-blank lines of a UTF-8 text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect();
    if lines.is_empty() {
        bail!("{} is empty", path.display());
    }
    Ok(lines)
}

/// A `label<TAB>text` file. Labels become class ids in lexicographic order.
pub struct LabeledText {
    pub labels: Vec<String>,
    pub rows: Vec<(usize, String)>,
}

impl LabeledText {
    pub fn read(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        for (i, line) in read_lines(path)?.into_iter().enumerate() {
            let Some((label, text)) = line.split_once('\t') else {
                bail!("{}:{}: expected `label<TAB>text`", path.display(), i + 1);
            };
            raw.push((label.trim().to_owned(), text.to_owned()));
        }
        let labels: Vec<String> = raw.iter().map(|(l, _)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let rows = raw
            .into_iter()
            .map(|(l, t)| (labels.binary_search(&l).expect("label collected above"), t))
            .collect();
        Ok(Self { labels, rows })
    }

    pub fn texts(&self) -> Vec<&str> {
        self.rows.iter().map(|(_, t)| t.as_str()).collect()
    }

    pub fn encode(&self, vocab: &Vocab) -> Vec<LabeledExample> {
        self.rows
            .iter()
            .map(|(label, text)| LabeledExample {
                tokens: vocab.encode(text),
                label: *label,
            })
            .collect()
    }
}

const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ren", "su", "ta", "vo", "ne", "ri", "do", "ba", "zu", "fe", "gi", "ho", "pa"];
const CITIES: usize = 40;
const JOBS: usize = 30;
const PETS: usize = 20;
const COLORS: usize = 20;
const FOODS: usize = 30;

struct Person {
    name: String,
    city: usize,
    job: usize,
    pet: usize,
    color: usize,
    food: usize,
}

/// Lines of short factual sentences about a fixed population of people.
///
/// Every person has one city, job, pet, pet colour and favourite food, and
/// persons are drawn with Zipfian popularity, so most facts are rare. Lines are
/// added until the text reaches `target_bytes`.
pub fn synthetic_corpus(target_bytes: usize, people: usize, seed: u64) -> Vec<String> {
    let mut rng = rng_from_seed(seed);
    let mut names = BTreeSet::new();
    while names.len() < people {
        let n = rng.random_range(2..=3);
        let name: String = (0..n).map(|_| *SYLLABLES.choose(&mut rng).expect("non-empty")).collect();
        names.insert(name);
    }
    let mut names: Vec<String> = names.into_iter().collect();
    // Popularity must not follow alphabetical order.
    for i in (1..names.len()).rev() {
        names.swap(i, rng.random_range(0..=i));
    }
    let pop: Vec<Person> = names
        .into_iter()
        .map(|name| Person {
            name,
            city: rng.random_range(0..CITIES),
            job: rng.random_range(0..JOBS),
            pet: rng.random_range(0..PETS),
            color: rng.random_range(0..COLORS),
            food: rng.random_range(0..FOODS),
        })
        .collect();
    let zipf = Zipf::new(people as f64, 1.0).expect("valid zipf");

    let mut lines = Vec::new();
    let mut bytes = 0;
    while bytes < target_bytes {
        let sentences = rng.random_range(2..=5);
        let mut line = Vec::with_capacity(sentences);
        for _ in 0..sentences {
            let p = &pop[zipf.sample(&mut rng) as usize - 1];
            let n = &p.name;
            let s = match rng.random_range(0..7) {
                0 => format!("{n} lives in city{} .", p.city),
                1 => format!("{n} works as a job{} .", p.job),
                2 => format!("{n} has a color{} pet{} .", p.color, p.pet),
                3 => format!("{n} likes food{} and lives in city{} .", p.food, p.city),
                4 => format!("the job{} from city{} is {n} .", p.job, p.city),
                5 => format!("the pet{} of {n} is color{} .", p.pet, p.color),
                _ => format!("{n} eats food{} every day .", p.food),
            };
            line.push(s);
        }
        let line = line.join(" ");
        bytes += line.len() + 1;
        lines.push(line);
    }
    lines
}

const GOOD: [&str; 8] = ["great", "fine", "lovely", "superb", "bright", "kind", "warm", "brilliant"];
const BAD: [&str; 8] = ["awful", "poor", "dull", "grim", "rude", "cold", "broken", "dreadful"];
const FILLER: [&str; 10] = ["the", "film", "was", "and", "a", "very", "plot", "cast", "really", "it"];

/// Two-class `(label, text)` reviews: positives use words from one list,
/// negatives from another, padded with shared filler. Every review holds at
/// least two words of its own class and none of the other.
pub fn synthetic_reviews(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let own = if positive { &GOOD } else { &BAD };
            let len = rng.random_range(6..=12);
            let mut words: Vec<&str> = (0..len)
                .map(|i| {
                    if i < 2 || rng.random_bool(0.3) {
                        *own.choose(&mut rng).expect("non-empty")
                    } else {
                        *FILLER.choose(&mut rng).expect("non-empty")
                    }
                })
                .collect();
            words.shuffle(&mut rng);
            let label = if positive { "pos" } else { "neg" };
            (label.to_owned(), words.join(" "))
        })
        .collect()
}
