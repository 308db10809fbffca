//! Synthetic desk-scale tasks with long-range structure.
//!
//! Classification: sequences over 20 filler symbols plus markers `A` and
//! `B`; the label is 1 iff some `A` precedes some `B` with at least
//! `max_len / 2` tokens between them. Half of the generated sequences are
//! built positive; negatives are spread evenly over no markers, a single
//! `A`, a single `B`, two far-apart `A`s and two far-apart `B`s.
//!
//! Tagging: balanced bracket sequences with fillers; each token is tagged
//! with the bracket depth (capped at 3). An opening bracket carries the
//! depth after entering, a closing bracket the depth before leaving.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Result};

pub const MARKER_A: &str = "A";
pub const MARKER_B: &str = "B";
pub const OPEN: &str = "(";
pub const CLOSE: &str = ")";
pub const FILLERS: usize = 20;
pub const MAX_DEPTH: usize = 3;

pub fn filler(k: usize) -> String {
    format!("w{k}")
}

/// Minimum number of tokens strictly between a positive `A ... B` pair.
pub fn min_gap(max_len: usize) -> usize {
    max_len / 2
}

pub fn classification_label<S: AsRef<str>>(tokens: &[S], max_len: usize) -> usize {
    let gap = min_gap(max_len);
    let mut first_a = None;
    for (j, t) in tokens.iter().enumerate() {
        match t.as_ref() {
            MARKER_A if first_a.is_none() => first_a = Some(j),
            MARKER_B => {
                if let Some(i) = first_a {
                    if j - i > gap {
                        return 1;
                    }
                }
            }
            _ => {}
        }
    }
    0
}

pub fn synth_classification(n: usize, max_len: usize, seed: u64) -> Result<Vec<(Vec<String>, usize)>> {
    if max_len < 8 {
        return arg(format!("max_len {max_len} below 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = min_gap(max_len);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(gap + 2..=max_len);
        let mut toks: Vec<String> = (0..len).map(|_| filler(rng.gen_range(0..FILLERS))).collect();
        let far_pair = |rng: &mut ChaCha8Rng| {
            let i = rng.gen_range(0..len - gap - 1);
            let j = rng.gen_range(i + gap + 1..len);
            (i, j)
        };
        match rng.gen_range(0..10) {
            0..=4 => {
                let (i, j) = far_pair(&mut rng);
                toks[i] = MARKER_A.into();
                toks[j] = MARKER_B.into();
            }
            5 => {}
            6 => toks[rng.gen_range(0..len)] = MARKER_A.into(),
            7 => toks[rng.gen_range(0..len)] = MARKER_B.into(),
            kind => {
                let (i, j) = far_pair(&mut rng);
                let m = if kind == 8 { MARKER_A } else { MARKER_B };
                toks[i] = m.into();
                toks[j] = m.into();
            }
        }
        let label = classification_label(&toks, max_len);
        out.push((toks, label));
    }
    Ok(out)
}

/// Depth tag of every token.
pub fn bracket_depths<S: AsRef<str>>(tokens: &[S]) -> Vec<usize> {
    let mut depth = 0usize;
    tokens
        .iter()
        .map(|t| match t.as_ref() {
            OPEN => {
                depth += 1;
                depth.min(MAX_DEPTH)
            }
            CLOSE => {
                let tag = depth.min(MAX_DEPTH);
                depth = depth.saturating_sub(1);
                tag
            }
            _ => depth.min(MAX_DEPTH),
        })
        .collect()
}

pub fn synth_tagging(n: usize, max_len: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<usize>)>> {
    if max_len < 4 {
        return arg(format!("max_len {max_len} below 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(max_len / 2..=max_len);
        let mut depth = 0;
        let mut toks = Vec::with_capacity(len);
        for p in 0..len {
            let remaining = len - p;
            let tok = if depth == remaining {
                CLOSE.to_string()
            } else {
                let can_open = depth < MAX_DEPTH && depth + 2 <= remaining;
                let r: f64 = rng.gen();
                if can_open && r < 0.3 {
                    OPEN.to_string()
                } else if depth > 0 && r >= 0.3 && r < 0.55 {
                    CLOSE.to_string()
                } else {
                    filler(rng.gen_range(0..10))
                }
            };
            match tok.as_str() {
                OPEN => depth += 1,
                CLOSE => depth -= 1,
                _ => {}
            }
            toks.push(tok);
        }
        let tags = bracket_depths(&toks);
        out.push((toks, tags));
    }
    Ok(out)
}
