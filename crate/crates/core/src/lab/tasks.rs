//! Synthetic tasks small enough to train on a laptop.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curation::{BenchmarkItem, PlainBenchmark};
use crate::tinyformer::TokenSeq;

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn word<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char).collect()
}

/// Random `key → value` pairs with distinct keys, prompted as `"<key>:"`.
/// The only way to answer is to have seen the pair.
pub fn memorization_pairs(n: usize, key_len: usize, value_len: usize, seed: u64, exclude: &HashSet<String>) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let key = word(&mut rng, key_len);
        if seen.insert(key.clone()) {
            out.push((format!("{key}:"), word(&mut rng, value_len)));
        }
    }
    out
}

pub fn memorization_benchmark(n: usize, key_len: usize, value_len: usize, seed: u64) -> PlainBenchmark {
    let items = memorization_pairs(n, key_len, value_len, seed, &HashSet::new())
        .into_iter()
        .enumerate()
        .map(|(i, (p, a))| BenchmarkItem::new(format!("mem-{i:04}"), p, a))
        .collect();
    PlainBenchmark::new("memorization", items).expect("generated ids are unique")
}

/// Same format as the benchmark, over keys the benchmark does not use.
pub fn memorization_corpus(
    n: usize,
    key_len: usize,
    value_len: usize,
    seed: u64,
    benchmark: &PlainBenchmark,
) -> Vec<TokenSeq> {
    let exclude: HashSet<String> = benchmark
        .items
        .iter()
        .map(|it| it.prompt.trim_end_matches(':').to_string())
        .collect();
    memorization_pairs(n, key_len, value_len, seed, &exclude)
        .iter()
        .map(|(p, a)| TokenSeq::example(p, a))
        .collect()
}

/// One in-context lookup: 3 to 5 `letter=digit` bindings, then a queried
/// letter. E.g. `"c=4 a=7 f=1 a?"` → `"7"`.
pub fn lookup_item<R: Rng>(rng: &mut R) -> (String, String) {
    let mut keys: Vec<u8> = b"abcdefgh".to_vec();
    keys.shuffle(rng);
    let n = rng.gen_range(3..=5);
    let values: Vec<u8> = (0..n).map(|_| b'0' + rng.gen_range(0..10u8)).collect();
    let q = rng.gen_range(0..n);
    let mut prompt = String::new();
    for i in 0..n {
        prompt.push(keys[i] as char);
        prompt.push('=');
        prompt.push(values[i] as char);
        prompt.push(' ');
    }
    prompt.push(keys[q] as char);
    prompt.push('?');
    (prompt, (values[q] as char).to_string())
}

pub fn lookup_benchmark(n: usize, seed: u64) -> PlainBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let (p, a) = lookup_item(&mut rng);
            BenchmarkItem::new(format!("lookup-{i:04}"), p, a)
        })
        .collect();
    PlainBenchmark::new("lookup", items).expect("generated ids are unique")
}

pub fn lookup_corpus(n: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (p, a) = lookup_item(&mut rng);
            TokenSeq::example(&p, &a)
        })
        .collect()
}
