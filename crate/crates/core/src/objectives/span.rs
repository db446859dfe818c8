//! Sentinel-based span corruption and its inverse.

use rand::seq::index;
use rand::Rng as _;

use super::{NoiseSpec, ObjectiveError};
use crate::vocab::{TokenId, TokenSeq, Vocab, EOS};
use crate::Rng;

/// Output of [`span_corrupt`]: the encoder-side sequence with each masked
/// span collapsed to a sentinel, and the sentinel-delimited span contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub corrupted: TokenSeq,
    pub span_target: TokenSeq,
}

/// `clamp(round(ρ·n), 1, n−1)`.
pub fn masked_count(maskable: usize, noise_density: f64) -> usize {
    debug_assert!(maskable >= 2);
    let m = (noise_density * maskable as f64).round() as usize;
    m.clamp(1, maskable - 1)
}

/// `max(1, round(m/μ))`.
pub fn span_count(masked: usize, mean_span_length: f64) -> usize {
    ((masked as f64 / mean_span_length).round() as usize).max(1)
}

/// Span-corrupts `tokens`; every position is maskable.
pub fn span_corrupt(
    tokens: &[TokenId],
    vocab: &Vocab,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<Corruption, ObjectiveError> {
    span_corrupt_with(tokens, |_| false, vocab, noise, rng)
}

/// Span-corrupts `tokens`, never masking a position for which `exempt`
/// returns true. Exempt tokens still count as the unmasked gap between two
/// spans.
pub fn span_corrupt_with(
    tokens: &[TokenId],
    exempt: impl Fn(TokenId) -> bool,
    vocab: &Vocab,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<Corruption, ObjectiveError> {
    noise.validate()?;
    let blocked: Vec<bool> = tokens.iter().map(|&t| exempt(t)).collect();
    if let Some(&t) = tokens
        .iter()
        .zip(&blocked)
        .find(|(&t, &b)| !b && vocab.is_special(t))
        .map(|(t, _)| t)
    {
        return Err(ObjectiveError::SpecialToken(t));
    }
    let maskable = blocked.iter().filter(|&&b| !b).count();
    if maskable < 2 {
        return Err(ObjectiveError::TooShort {
            len: maskable,
            min: 2,
        });
    }
    if vocab.sentinel_count() < 2 {
        return Err(ObjectiveError::NotEnoughSentinels(vocab.sentinel_count()));
    }
    let m = masked_count(maskable, noise.noise_density);
    // The terminal sentinel also needs an id, so at most k-1 spans.
    let s = span_count(m, noise.mean_span_length)
        .min(vocab.sentinel_count() - 1)
        .min(m);

    let spans = place_spans(&blocked, m, s, rng).ok_or(ObjectiveError::Unplaceable {
        len: tokens.len(),
        masked: m,
    })?;
    Ok(assemble(tokens, &spans, vocab))
}

/// Chooses `(start, len)` spans covering exactly `m` maskable positions.
/// Tries `s` spans first, then fewer, then more, since with exempt
/// positions a smaller span count is not always the easier one.
fn place_spans(blocked: &[bool], m: usize, s: usize, rng: &mut Rng) -> Option<Vec<(usize, usize)>> {
    let order = (1..=s).rev().chain(s + 1..=m);
    for count in order {
        // Compositions are random; a few redraws cover the exempt case
        // where some length vectors do not fit between blocked positions.
        let tries = if blocked.iter().any(|&b| b) { 16 } else { 1 };
        for _ in 0..tries {
            let lengths = random_composition(m, count, rng);
            if let Some(starts) = sample_placement(blocked, &lengths, rng) {
                return Some(starts.into_iter().zip(lengths).collect());
            }
        }
    }
    None
}

/// Uniform random composition of `m` into `s` positive parts.
fn random_composition(m: usize, s: usize, rng: &mut Rng) -> Vec<usize> {
    if s == 1 {
        return vec![m];
    }
    let mut cuts: Vec<usize> = index::sample(rng, m - 1, s - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut parts = Vec::with_capacity(s);
    for c in cuts {
        parts.push(c - prev);
        prev = c;
    }
    parts.push(m - prev);
    parts
}

/// Draws span start positions uniformly among all valid placements of the
/// given ordered lengths: spans in order, at least one position between
/// consecutive spans, none covering a blocked position. Returns `None` if
/// no placement exists.
///
/// `ways[j][i]` is the log of the number of placements of spans `j..` with
/// span `j` starting at or after `i`.
fn sample_placement(blocked: &[bool], lengths: &[usize], rng: &mut Rng) -> Option<Vec<usize>> {
    let n = blocked.len();
    let s = lengths.len();
    // fits[i] = length of the unblocked run starting at i.
    let mut run = vec![0usize; n + 1];
    for i in (0..n).rev() {
        run[i] = if blocked[i] { 0 } else { run[i + 1] + 1 };
    }
    let neg = f64::NEG_INFINITY;
    let mut ways = vec![vec![neg; n + 2]; s + 1];
    ways[s].iter_mut().for_each(|w| *w = 0.0);
    for j in (0..s).rev() {
        let len = lengths[j];
        for i in (0..n).rev() {
            let skip = ways[j][i + 1];
            let take = if run[i] >= len {
                ways[j + 1][(i + len + 1).min(n + 1)]
            } else {
                neg
            };
            ways[j][i] = log_add(skip, take);
        }
    }
    if ways[0][0] == neg {
        return None;
    }
    let mut starts = Vec::with_capacity(s);
    let (mut i, mut j) = (0usize, 0usize);
    while j < s {
        let len = lengths[j];
        let take = if run[i] >= len {
            ways[j + 1][(i + len + 1).min(n + 1)]
        } else {
            neg
        };
        let p_take = (take - ways[j][i]).exp();
        if take > neg && rng.gen::<f64>() < p_take {
            starts.push(i);
            i += len + 1;
            j += 1;
        } else {
            i += 1;
        }
    }
    Some(starts)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn assemble(tokens: &[TokenId], spans: &[(usize, usize)], vocab: &Vocab) -> Corruption {
    let mut corrupted = Vec::with_capacity(tokens.len());
    let mut span_target = Vec::new();
    let mut cursor = 0;
    for (i, &(start, len)) in spans.iter().enumerate() {
        let sentinel = vocab
            .sentinel(i)
            .expect("span count capped by sentinel count");
        corrupted.extend_from_slice(&tokens[cursor..start]);
        corrupted.push(sentinel);
        span_target.push(sentinel);
        span_target.extend_from_slice(&tokens[start..start + len]);
        cursor = start + len;
    }
    corrupted.extend_from_slice(&tokens[cursor..]);
    span_target.push(vocab.sentinel(spans.len()).expect("terminal sentinel"));
    span_target.push(EOS);
    Corruption {
        corrupted,
        span_target,
    }
}

/// Splices the span contents of `span_target` back in place of the
/// sentinels in `corrupted`.
pub fn reconstruct(
    corrupted: &[TokenId],
    span_target: &[TokenId],
    vocab: &Vocab,
) -> Result<TokenSeq, ObjectiveError> {
    let body = match span_target.last() {
        Some(&EOS) => &span_target[..span_target.len() - 1],
        _ => span_target,
    };
    // Group the target into (sentinel index, content) runs.
    let mut groups: Vec<(usize, &[TokenId])> = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let Some(idx) = vocab.sentinel_index(body[i]) else {
            return Err(ObjectiveError::SentinelMismatch(format!(
                "target position {i} is not a sentinel"
            )));
        };
        if idx != groups.len() {
            return Err(ObjectiveError::SentinelMismatch(format!(
                "target sentinel S_{idx} out of order"
            )));
        }
        let end = body[i + 1..]
            .iter()
            .position(|&t| vocab.is_sentinel(t))
            .map_or(body.len(), |p| i + 1 + p);
        groups.push((idx, &body[i + 1..end]));
        i = end;
    }

    let mut out = Vec::with_capacity(corrupted.len() + body.len());
    let mut next = 0;
    for &t in corrupted {
        match vocab.sentinel_index(t) {
            Some(idx) => {
                if idx != next {
                    return Err(ObjectiveError::SentinelMismatch(format!(
                        "input sentinel S_{idx} where S_{next} expected"
                    )));
                }
                let Some((_, content)) = groups.get(idx) else {
                    return Err(ObjectiveError::SentinelMismatch(format!(
                        "S_{idx} missing from target"
                    )));
                };
                out.extend_from_slice(content);
                next += 1;
            }
            None => out.push(t),
        }
    }
    // Anything after the last input sentinel must be the empty terminal group.
    if groups.len() > next + 1 || groups.get(next).is_some_and(|(_, c)| !c.is_empty()) {
        return Err(ObjectiveError::SentinelMismatch(format!(
            "target has {} sentinel groups for {next} input sentinels",
            groups.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use crate::vocab::{build_vocab, SEP};

    fn vocab() -> Vocab {
        build_vocab(&["en", "de"], 100).unwrap()
    }

    fn noise(rho: f64, mu: f64) -> NoiseSpec {
        NoiseSpec {
            noise_density: rho,
            mean_span_length: mu,
        }
    }

    #[test]
    fn counts_follow_formula() {
        assert_eq!(masked_count(10, 0.15), 2);
        assert_eq!(span_count(2, 3.0), 1);
        assert_eq!(masked_count(2, 0.4), 1);
        assert_eq!(masked_count(5, 0.99), 4);
        assert_eq!(masked_count(100, 0.001), 1);
        assert_eq!(span_count(15, 3.0), 5);
    }

    #[test]
    fn ten_tokens_one_span_of_two() {
        let v = vocab();
        let toks = v.encode("abcdefghij");
        for seed in 0..50 {
            let c = span_corrupt(&toks, &v, &noise(0.15, 3.0), &mut seeded_rng(seed)).unwrap();
            let s0 = v.sentinel(0).unwrap();
            assert_eq!(c.corrupted.iter().filter(|&&t| t == s0).count(), 1);
            assert_eq!(c.corrupted.len(), 9);
            assert_eq!(c.span_target.len(), 5);
            assert_eq!(c.span_target[0], s0);
            assert_eq!(c.span_target[3], v.sentinel(1).unwrap());
            assert_eq!(c.span_target[4], EOS);
            let pos = c.corrupted.iter().position(|&t| t == s0).unwrap();
            assert_eq!(&c.span_target[1..3], &toks[pos..pos + 2]);
        }
    }

    #[test]
    fn two_tokens_hits_both_placements() {
        let v = vocab();
        let toks = v.encode("ab");
        let mut seen = [false; 2];
        for seed in 0..64 {
            let c = span_corrupt(&toks, &v, &noise(0.4, 3.0), &mut seeded_rng(seed)).unwrap();
            assert_eq!(c.corrupted.len(), 2);
            let pos = c.corrupted.iter().position(|&t| v.is_sentinel(t)).unwrap();
            seen[pos] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn exempt_tokens_are_never_masked() {
        let v = vocab();
        let mut toks = v.encode("ab");
        toks.push(SEP);
        toks.extend(v.encode("cd"));
        for seed in 0..200 {
            let c = span_corrupt_with(
                &toks,
                |t| t == SEP,
                &v,
                &noise(0.9, 3.0),
                &mut seeded_rng(seed),
            )
            .unwrap();
            assert!(c.corrupted.contains(&SEP));
            assert!(!c.span_target.contains(&SEP));
            assert_eq!(reconstruct(&c.corrupted, &c.span_target, &v).unwrap(), toks);
            // m = clamp(round(0.9*4), 1, 3) = 3 masked tokens.
            let masked = c
                .span_target
                .iter()
                .filter(|&&t| v.byte_of(t).is_some())
                .count();
            assert_eq!(masked, 3);
        }
    }

    #[test]
    fn rejects_specials_and_short_input() {
        let v = vocab();
        let mut rng = seeded_rng(0);
        assert!(matches!(
            span_corrupt(&v.encode("a"), &v, &noise(0.15, 3.0), &mut rng),
            Err(ObjectiveError::TooShort { .. })
        ));
        let toks = vec![v.encode("a")[0], SEP, v.encode("b")[0]];
        assert!(matches!(
            span_corrupt(&toks, &v, &noise(0.15, 3.0), &mut rng),
            Err(ObjectiveError::SpecialToken(SEP))
        ));
        assert!(span_corrupt(&v.encode("abc"), &v, &noise(1.0, 3.0), &mut rng).is_err());
        let one = build_vocab(&["en"], 1).unwrap();
        assert!(matches!(
            span_corrupt(&one.encode("abc"), &one, &noise(0.5, 1.0), &mut rng),
            Err(ObjectiveError::NotEnoughSentinels(1))
        ));
    }

    #[test]
    fn reconstruct_direct_splice() {
        let v = vocab();
        let [a, b, c, d]: [TokenId; 4] = v.encode("abcd").try_into().unwrap();
        let s0 = v.sentinel(0).unwrap();
        let s1 = v.sentinel(1).unwrap();
        assert_eq!(
            reconstruct(&[a, s0, d], &[s0, b, c, s1, EOS], &v).unwrap(),
            vec![a, b, c, d]
        );
        assert_eq!(reconstruct(&[a, b], &[], &v).unwrap(), vec![a, b]);
        assert_eq!(reconstruct(&[a, b], &[s0, EOS], &v).unwrap(), vec![a, b]);
    }

    #[test]
    fn reconstruct_rejects_mismatches() {
        let v = vocab();
        let [a, b]: [TokenId; 2] = v.encode("ab").try_into().unwrap();
        let s0 = v.sentinel(0).unwrap();
        let s1 = v.sentinel(1).unwrap();
        let s2 = v.sentinel(2).unwrap();
        // Sentinel in input missing from target.
        assert!(reconstruct(&[a, s0], &[], &v).is_err());
        // Out-of-order input sentinels.
        assert!(reconstruct(&[s1, a, s0], &[s0, b, s1, a, s2, EOS], &v).is_err());
        // Target has content for a span the input lacks.
        assert!(reconstruct(&[a], &[s0, b, s1, EOS], &v).is_err());
        // Target not starting with a sentinel.
        assert!(reconstruct(&[a, s0], &[b, s0, EOS], &v).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let v = vocab();
        let toks = v.encode("the quick brown fox jumps over the lazy dog");
        let a = span_corrupt(&toks, &v, &NoiseSpec::default(), &mut seeded_rng(5)).unwrap();
        let b = span_corrupt(&toks, &v, &NoiseSpec::default(), &mut seeded_rng(5)).unwrap();
        assert_eq!(a, b);
    }
}
