use super::span::{span_corrupt, span_corrupt_with};
use super::{Example, NoiseSpec, ObjectiveError, ObjectiveKind};
use crate::corpus::{Document, ParallelPair};
use crate::vocab::{Vocab, EOS, SEP};
use crate::Rng;

/// Too-short inputs become a skip; any other corruption error propagates.
fn skip_short<T>(r: Result<T, ObjectiveError>) -> Result<Option<T>, ObjectiveError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(ObjectiveError::TooShort { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn build_mlm(
    doc: &Document,
    vocab: &Vocab,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<Option<Example>, ObjectiveError> {
    let tokens = vocab.encode(&doc.text);
    let Some(c) = skip_short(span_corrupt(&tokens, vocab, noise, rng))? else {
        return Ok(None);
    };
    Ok(Some(Example {
        objective: ObjectiveKind::Mlm,
        input: c.corrupted,
        target: c.span_target,
        src_lang: doc.lang.clone(),
        tgt_lang: None,
    }))
}

/// Span corruption over `source ++ [SEP] ++ target`, SEP never masked, no
/// language code.
pub fn build_tlm(
    pair: &ParallelPair,
    vocab: &Vocab,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<Option<Example>, ObjectiveError> {
    if pair.src_text.is_empty() || pair.tgt_text.is_empty() {
        return Ok(None);
    }
    let mut concat = vocab.encode(&pair.src_text);
    concat.push(SEP);
    concat.extend(vocab.encode(&pair.tgt_text));
    let Some(c) = skip_short(span_corrupt_with(&concat, |t| t == SEP, vocab, noise, rng))? else {
        return Ok(None);
    };
    Ok(Some(Example {
        objective: ObjectiveKind::Tlm,
        input: c.corrupted,
        target: c.span_target,
        src_lang: pair.src_lang.clone(),
        tgt_lang: Some(pair.tgt_lang.clone()),
    }))
}

pub fn build_nmt(pair: &ParallelPair, vocab: &Vocab) -> Result<Example, ObjectiveError> {
    let mut input = vec![vocab.lang_code(&pair.tgt_lang)?];
    input.extend(vocab.encode(&pair.src_text));
    let mut target = vocab.encode(&pair.tgt_text);
    target.push(EOS);
    Ok(Example {
        objective: ObjectiveKind::Nmt,
        input,
        target,
        src_lang: pair.src_lang.clone(),
        tgt_lang: Some(pair.tgt_lang.clone()),
    })
}

/// NMT with a span-corrupted source. The masked-out source tokens are not
/// part of the target.
pub fn build_denoised_nmt(
    pair: &ParallelPair,
    vocab: &Vocab,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<Option<Example>, ObjectiveError> {
    let code = vocab.lang_code(&pair.tgt_lang)?;
    let src = vocab.encode(&pair.src_text);
    let Some(c) = skip_short(span_corrupt(&src, vocab, noise, rng))? else {
        return Ok(None);
    };
    let mut input = Vec::with_capacity(c.corrupted.len() + 1);
    input.push(code);
    input.extend(c.corrupted);
    let mut target = vocab.encode(&pair.tgt_text);
    target.push(EOS);
    Ok(Some(Example {
        objective: ObjectiveKind::DenoisedNmt,
        input,
        target,
        src_lang: pair.src_lang.clone(),
        tgt_lang: Some(pair.tgt_lang.clone()),
    }))
}

/// Denoised-NMT whose target is `translation ++ [SEP] ++ full source ++ [EOS]`.
pub fn build_denoised_nmt_lm(
    pair: &ParallelPair,
    vocab: &Vocab,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<Option<Example>, ObjectiveError> {
    let Some(mut ex) = build_denoised_nmt(pair, vocab, noise, rng)? else {
        return Ok(None);
    };
    ex.objective = ObjectiveKind::DenoisedNmtLm;
    ex.target.pop();
    ex.target.push(SEP);
    ex.target.extend(vocab.encode(&pair.src_text));
    ex.target.push(EOS);
    Ok(Some(ex))
}
