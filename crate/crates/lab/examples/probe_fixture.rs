//! Regenerates the shipped probe fixture: 1,000 synthetic completions for the
//! prompts of `addlab probe --pairs 1000 --max-digits 100 --seed 0`, split
//! 665 non-numerical / 328 numerical-incorrect / 7 correct, plus the golden
//! summary produced by replaying them.
//!
//! cargo run -p addlab --example probe_fixture -- crates/lab/fixtures/probe

use std::path::PathBuf;

use addlab::core::probe::{classify_response, render_prompts, Classification, Prompt};
use addlab::core::rng::Rng;
use addlab::core::taskgen::gen_large_digit_pairs;
use addlab::probe::{replay, write_outputs, FixtureRecord};
use addlab::fsutil;

fn group_commas(digits: &str) -> String {
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn correct(p: &Prompt, rng: &mut Rng) -> String {
    match rng.below(4) {
        0 => p.truth.clone(),
        1 => format!(" {}.", p.truth),
        2 => format!("{}\n", group_commas(&p.truth)),
        _ => format!("\n{}", p.truth),
    }
}

fn numerical(p: &Prompt, rng: &mut Rng) -> String {
    let mut digits: Vec<u8> = p.truth.bytes().collect();
    match rng.below(3) {
        0 => {
            let i = rng.below(digits.len() as u64) as usize;
            let old = digits[i] - b'0';
            let mut new = rng.below(9) as u8;
            if new >= old {
                new += 1;
            }
            if i == 0 && new == 0 && digits.len() > 1 {
                new = if old == 1 { 2 } else { 1 };
            }
            digits[i] = b'0' + new;
            String::from_utf8(digits).unwrap()
        }
        1 if digits.len() > 1 => {
            let keep = 1 + rng.below(digits.len() as u64 - 1) as usize;
            String::from_utf8(digits[..keep].to_vec()).unwrap()
        }
        _ => format!("{}{}", p.truth, rng.below(10)),
    }
}

fn non_numerical(p: &Prompt, rng: &mut Rng) -> String {
    match rng.below(6) {
        0 => format!("The answer is {}.", p.truth),
        1 => format!("{} + {} = {}", p.a, p.b, p.truth),
        2 => format!("{}\n\nWhat is {} + {}?", p.truth, p.b, p.a),
        3 => String::new(),
        4 => format!("{}?", p.truth),
        _ => "I don't know.".to_string(),
    }
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/lab/fixtures/probe".into()));
    let prompts = render_prompts(&gen_large_digit_pairs(1000, 100, 0).unwrap());
    let mut classes: Vec<Classification> = std::iter::repeat(Classification::NonNumerical)
        .take(665)
        .chain(std::iter::repeat(Classification::NumericalIncorrect).take(328))
        .chain(std::iter::repeat(Classification::Correct).take(7))
        .collect();
    let mut rng = Rng::seed(2024);
    rng.shuffle(&mut classes);
    let records: Vec<FixtureRecord> = prompts
        .iter()
        .zip(&classes)
        .map(|(p, &class)| {
            let raw = match class {
                Classification::Correct => correct(p, &mut rng),
                Classification::NumericalIncorrect => numerical(p, &mut rng),
                Classification::NonNumerical => non_numerical(p, &mut rng),
            };
            assert_eq!(classify_response(&raw, &p.truth).0, class, "{raw:?} for {}", p.text);
            FixtureRecord { prompt_id: p.id, raw_completion: raw, samples: None }
        })
        .collect();
    std::fs::create_dir_all(&dir).unwrap();
    fsutil::write_jsonl(&dir.join("completions.jsonl"), &records).unwrap();
    let responses = replay(&prompts, &records, usize::MAX).unwrap();
    let scratch = tempfile::tempdir().unwrap();
    let summary = write_outputs(scratch.path(), &responses).unwrap();
    std::fs::copy(scratch.path().join("summary.json"), dir.join("summary.json")).unwrap();
    println!("{:?}", summary.counts);
}
