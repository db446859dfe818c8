//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::time::Instant;

use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use nmtlab::corpus::{Document, ParallelPair, RawTask};
use nmtlab::harness::{
    gen_cipher_corpus, render_report, run_experiment, CipherSpec, CorpusSizes, ExperimentConfig,
    Report,
};
use nmtlab::metrics::{
    average_languages, entity_f1, lcs_len, rouge_l, task_average, token_f1, LangScores, Score,
    TaskScore, TaskScores,
};
use nmtlab::model::{
    adam_step, finite_diff_check, forward, init_model, loss_and_grads, token_accuracy, AdamConfig,
    Batch, ModelConfig, OptState, Params,
};
use nmtlab::objectives::{reconstruct, span_corrupt, NoiseSpec, ObjectiveKind, ObjectiveRegistry};
use nmtlab::sampler::{language_probs, MixedStream, MixtureSpec};
use nmtlab::seeded_rng;
use nmtlab::trainer::{
    load_checkpoint, pretrain, save_checkpoint, Checkpoint, Integrity, ObjectiveMap,
    PretrainOptions, TrainConfig,
};
use nmtlab::vocab::{TokenId, Vocab, EOS};

/// Writes straight to stdout so the lines survive the test harness's capture.
macro_rules! say {
    ($($arg:tt)*) => {{
        let mut out = std::io::stdout().lock();
        writeln!(out, $($arg)*).unwrap();
        out.flush().unwrap();
    }};
}

fn verdict(n: u32, name: &str, ok: bool, detail: String) {
    say!(
        "criterion {n}: {} {name} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

fn s(v: f64) -> Score {
    Score::new(v).unwrap()
}

fn qa(f1: f64, em: f64) -> TaskScore {
    TaskScore::Qa {
        f1: s(f1),
        em: s(em),
    }
}

fn row(tydi: (f64, f64), mtop: f64, ner: f64, wiki: f64) -> TaskScores {
    TaskScores::from([
        ("tydiqa".into(), qa(tydi.0, tydi.1)),
        ("mtop".into(), TaskScore::Single(s(mtop))),
        ("ner".into(), TaskScore::Single(s(ner))),
        ("wikilingua".into(), TaskScore::Single(s(wiki))),
    ])
}

fn langs(values: &[f64]) -> LangScores {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| (format!("l{i:02}"), s(v)))
        .collect()
}

#[test]
fn criterion_1_aggregation_fidelity() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, printed: f64, tol: f64| {
        let err = (got - printed).abs();
        worst = worst.max(err);
        err <= tol
    };
    let mut ok = true;

    let table2 = [
        (row((66.3, 49.8), 43.7, 58.4, 25.2), 46.3),
        (row((71.3, 55.6), 48.6, 59.9, 26.1), 49.5),
        (row((71.1, 54.6), 48.6, 61.4, 26.1), 49.7),
        (row((75.1, 60.1), 57.7, 61.4, 27.4), 53.5),
        (row((75.3, 60.2), 56.5, 61.5, 27.4), 53.3),
        (row((75.0, 59.4), 56.0, 62.4, 26.9), 53.1),
    ];
    for (r, avg) in &table2 {
        ok &= check(task_average(r).unwrap().value(), *avg, 0.05);
    }

    let large = (
        row((66.3, 49.8), 43.7, 58.4, 25.2),
        row((75.1, 60.1), 57.7, 61.4, 27.4),
    );
    let xl = (
        row((77.8, 61.8), 63.4, 65.5, 27.9),
        row((78.4, 63.3), 64.9, 66.2, 28.4),
    );
    for ((base, treat), delta) in [(large, 7.2), (xl, 0.9)] {
        let d = task_average(&treat).unwrap().value() - task_average(&base).unwrap().value();
        ok &= check(d, delta, 0.05);
    }

    let appendix: &[(&[f64], f64)] = &[
        (
            &[75.0, 68.9, 54.5, 70.4, 74.3, 57.4, 61.5, 69.7, 65.5],
            66.3,
        ),
        (
            &[63.0, 51.4, 37.2, 54.6, 57.0, 47.5, 37.1, 52.5, 48.0],
            49.8,
        ),
        (
            &[78.5, 76.1, 59.0, 73.5, 76.7, 64.4, 68.6, 74.2, 71.1],
            71.3,
        ),
        (
            &[68.2, 59.9, 40.7, 61.0, 60.0, 55.4, 48.9, 57.7, 48.6],
            55.6,
        ),
        (
            &[78.4, 78.9, 74.0, 77.0, 79.9, 64.9, 72.1, 77.2, 73.3],
            75.1,
        ),
        (
            &[69.3, 63.1, 54.9, 64.8, 64.8, 56.2, 51.8, 63.1, 53.1],
            60.1,
        ),
        (&[83.5, 41.2, 45.4, 43.3, 21.3, 27.5], 43.7),
        (&[83.3, 44.5, 46.3, 51.8, 31.9, 34.0], 48.6),
        (&[85.0, 42.4, 47.5, 49.6, 31.8, 35.2], 48.6),
        (&[86.1, 55.1, 59.0, 61.7, 42.2, 42.1], 57.7),
        (&[85.8, 51.6, 55.2, 59.5, 42.7, 43.9], 56.5),
        (&[85.9, 51.9, 55.0, 57.0, 44.1, 41.9], 56.0),
        (
            &[
                29.2, 23.2, 22.4, 25.0, 25.3, 24.6, 25.2, 25.3, 24.1, 26.2, 23.8, 25.7, 24.6, 23.9,
                25.3, 30.9, 22.9, 25.8,
            ],
            25.2,
        ),
        (
            &[
                31.5, 25.7, 24.0, 27.0, 27.5, 26.4, 27.7, 27.0, 25.8, 29.5, 26.7, 27.7, 26.3, 25.9,
                28.6, 34.1, 23.9, 28.1,
            ],
            27.4,
        ),
        (
            &[
                44.8, 50.8, 83.3, 38.1, 21.7, 66.5, 56.7, 39.8, 64.2, 42.1, 48.2, 64.8, 63.2, 42.1,
                46.3, 69.8, 39.1, 62.2, 62.1, 48.1, 81.5, 61.1, 64.1, 17.4, 78.6, 27.5, 66.9, 63.6,
                74.4, 58.4,
            ],
            54.9,
        ),
        (
            &[
                46.7, 53.6, 84.8, 43.7, 28.3, 72.2, 58.1, 41.9, 65.6, 41.2, 51.0, 69.8, 62.4, 43.6,
                43.0, 72.0, 45.5, 61.7, 66.7, 51.2, 83.5, 55.4, 67.6, 23.0, 79.4, 35.6, 66.7, 68.0,
                77.5, 62.2,
            ],
            57.4,
        ),
    ];
    let mut lang_ok = true;
    for (values, avg) in appendix {
        lang_ok &= (average_languages(&langs(values)).unwrap().value() - avg).abs() <= 0.1;
    }
    let elapsed = t.elapsed().as_secs_f64();
    verdict(
        1,
        "aggregation fidelity",
        ok && lang_ok && elapsed < 1.0,
        format!(
            "{} table averages and deltas, worst error {worst:.4} <= 0.05; {} language rows within 0.1: {lang_ok}; {elapsed:.3}s",
            table2.len() + 2,
            appendix.len()
        ),
    )
}

const FUZZ_LANGS: [&str; 4] = ["en", "de", "xa", "zz"];

fn fuzz_text(rng: &mut nmtlab::Rng, max_chars: usize) -> String {
    const POOL: &[char] = &[
        'a', 'b', 'e', 'k', 'z', ' ', ' ', '.', 'é', 'ß', 'Ж', '中', '7', '-',
    ];
    let n = rng.gen_range(1..=max_chars);
    let text: String = (0..n).map(|_| POOL[rng.gen_range(0..POOL.len())]).collect();
    if text.trim().is_empty() {
        "a".into()
    } else {
        text
    }
}

fn fuzz_task(rng: &mut nmtlab::Rng, parallel: bool) -> RawTask {
    let src = FUZZ_LANGS[rng.gen_range(0..FUZZ_LANGS.len())];
    if !parallel {
        return RawTask::Mono(Document::new(src, fuzz_text(rng, 80)));
    }
    let tgt = loop {
        let t = FUZZ_LANGS[rng.gen_range(0..FUZZ_LANGS.len())];
        if t != src {
            break t;
        }
    };
    RawTask::Parallel(ParallelPair::new(
        src,
        tgt,
        fuzz_text(rng, 60),
        fuzz_text(rng, 60),
    ))
}

#[test]
fn criterion_2_objective_format_suite() {
    let vocab = Vocab::new(&FUZZ_LANGS, 100).unwrap();
    let registry = ObjectiveRegistry::default();
    let mut rng = seeded_rng(2);
    let mut report = Vec::new();
    let mut all_ok = true;
    for kind in ObjectiveKind::ALL {
        let obj = registry.get(kind.name()).unwrap();
        let parallel = obj.source() == nmtlab::objectives::TaskSource::Parallel;
        let (mut built, mut skipped, mut bad) = (0, 0, 0);
        for i in 0..10_000 {
            let noise = NoiseSpec {
                noise_density: rng.gen_range(0.05..0.6),
                mean_span_length: rng.gen_range(1.0..5.0),
            };
            let task = fuzz_task(&mut rng, parallel);
            let Some(ex) = obj.build(&task, &vocab, &noise, &mut rng).unwrap() else {
                skipped += 1;
                continue;
            };
            built += 1;
            let mut problems = ex
                .check_invariants(&vocab)
                .err()
                .into_iter()
                .collect::<Vec<_>>();
            let expected_code = match (&task, kind) {
                (RawTask::Parallel(p), k) if k != ObjectiveKind::Tlm => {
                    Some(vocab.lang_code(&p.tgt_lang).unwrap())
                }
                _ => None,
            };
            if ex.input.first().copied().filter(|&t| vocab.is_lang_code(t)) != expected_code {
                problems.push("language code prefix does not name the target language".into());
            }
            if ex
                .input
                .iter()
                .skip(1)
                .chain(&ex.target[..ex.target.len() - 1])
                .any(|&t| t == EOS || vocab.is_lang_code(t))
            {
                problems.push("stray EOS or language code".into());
            }
            if !problems.is_empty() {
                bad += 1;
                if bad <= 3 {
                    eprintln!("{kind} case {i}: {problems:?}");
                }
            }
        }
        all_ok &= bad == 0 && built > 9_000;
        report.push(format!("{kind} {built} built/{skipped} short/{bad} bad"));
    }
    verdict(2, "objective format suite", all_ok, report.join(", "))
}

/// `clamp(round(rho * n), 1, n - 1)`, written out independently.
fn oracle_masked(n: usize, rho: f64) -> usize {
    let m = (rho * n as f64 + 0.5).floor() as usize;
    m.max(1).min(n - 1)
}

/// Mask pattern implied by a corruption: sentinel `i` in `corrupted`
/// stands for the `i`-th span of `span_target`.
fn mask_of(corrupted: &[TokenId], span_target: &[TokenId], vocab: &Vocab) -> Vec<bool> {
    let mut spans: Vec<usize> = Vec::new();
    for &t in &span_target[..span_target.len() - 1] {
        if vocab.is_sentinel(t) {
            spans.push(0);
        } else {
            *spans.last_mut().unwrap() += 1;
        }
    }
    let mut mask = Vec::new();
    for &t in corrupted {
        match vocab.sentinel_index(t) {
            Some(i) => mask.extend(std::iter::repeat(true).take(spans[i])),
            None => mask.push(false),
        }
    }
    mask
}

/// All masks of length `n` with `m` masked positions in exactly `s` runs.
fn valid_placements(n: usize, m: usize, s: usize) -> BTreeSet<Vec<bool>> {
    (0u32..1 << n)
        .map(|bits| (0..n).map(|i| bits >> i & 1 == 1).collect::<Vec<bool>>())
        .filter(|mask| {
            let runs = mask
                .iter()
                .enumerate()
                .filter(|&(i, &b)| b && (i == 0 || !mask[i - 1]))
                .count();
            mask.iter().filter(|&&b| b).count() == m && runs == s
        })
        .collect()
}

#[test]
fn criterion_3_span_corruption() {
    let t = Instant::now();
    let vocab = Vocab::new(&["en"], 100).unwrap();
    let mut rng = seeded_rng(3);
    let (mut formula_ok, mut roundtrip_ok, mut placement_ok) = (0usize, 0usize, true);
    let mut cases = 0usize;
    for _ in 0..1000 {
        let n = rng.gen_range(2..200);
        let tokens: Vec<TokenId> = (0..n)
            .map(|_| vocab.byte_offset() + rng.gen_range(0..256))
            .collect();
        let noise = NoiseSpec {
            noise_density: rng.gen_range(0.01..0.99),
            mean_span_length: rng.gen_range(1.0..8.0),
        };
        let c = span_corrupt(&tokens, &vocab, &noise, &mut rng).unwrap();
        cases += 1;
        let masked = c
            .span_target
            .iter()
            .filter(|&&t| !vocab.is_special(t))
            .count();
        formula_ok += usize::from(masked == oracle_masked(n, noise.noise_density));
        roundtrip_ok +=
            usize::from(reconstruct(&c.corrupted, &c.span_target, &vocab).unwrap() == tokens);
    }
    let mut placements = 0usize;
    let mut cover = true;
    for n in 2..=12usize {
        for rho in [0.15, 0.3, 0.5, 0.8] {
            for mu in [1.0, 2.0, 3.0] {
                let noise = NoiseSpec {
                    noise_density: rho,
                    mean_span_length: mu,
                };
                let tokens: Vec<TokenId> = (0..n as u32)
                    .map(|i| vocab.byte_offset() + 97 + i)
                    .collect();
                let m = oracle_masked(n, rho);
                // s spans need m + s - 1 positions; fewer spans are used when they do not fit.
                let s = ((m as f64 / mu + 0.5).floor() as usize)
                    .max(1)
                    .min(m)
                    .min(n - m + 1);
                let valid = valid_placements(n, m, s);
                let mut seen = BTreeSet::new();
                for _ in 0..300 {
                    let c = span_corrupt(&tokens, &vocab, &noise, &mut rng).unwrap();
                    let mask = mask_of(&c.corrupted, &c.span_target, &vocab);
                    if !valid.contains(&mask) && placement_ok {
                        eprintln!("n={n} rho={rho} mu={mu} m={m} s={s}: {mask:?}");
                        placement_ok = false;
                    }
                    seen.insert(mask);
                    placements += 1;
                }
                if n <= 6 && seen != valid {
                    eprintln!(
                        "n={n} rho={rho} mu={mu}: saw {} of {}",
                        seen.len(),
                        valid.len()
                    );
                    cover = false;
                }
            }
        }
    }
    verdict(
        3,
        "span corruption",
        formula_ok == cases && roundtrip_ok == cases && placement_ok && cover,
        format!(
            "masked count {formula_ok}/{cases}, roundtrip {roundtrip_ok}/{cases}, {placements} placements in the enumerated set: {placement_ok}, full coverage for n <= 6: {cover}; {:.2}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn chi_square_p(observed: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((observed.len() - 1) as f64)
        .unwrap()
        .cdf(stat)
}

#[test]
fn criterion_4_sampling_calibration() {
    let t = Instant::now();
    let oracle: &[(&[u64], f64, &[f64])] = &[
        (
            &[900, 100],
            0.3,
            &[0.65907332559603748895, 0.34092667440396251105],
        ),
        (
            &[1, 10, 100, 1000, 10000, 100000, 1000000],
            0.3,
            &[
                0.0079689491908016908384,
                0.015900144010308361086,
                0.031724958146346424773,
                0.063299613433369981322,
                0.12629933323570097475,
                0.25200030001089067549,
                0.50280670197258189174,
            ],
        ),
        (&[5000; 6], 0.3, &[1.0 / 6.0; 6]),
        (&[7, 3, 1], 0.0, &[1.0 / 3.0; 3]),
        (
            &[123456789, 1],
            0.7,
            &[0.99999783260246706327, 2.1673975329367294674e-6],
        ),
        (
            &[5000, 2000],
            1.0,
            &[0.71428571428571428571, 0.28571428571428571429],
        ),
    ];
    let mut max_err: f64 = 0.0;
    for (counts, alpha, expected) in oracle {
        let map: BTreeMap<String, u64> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (format!("k{i}"), c))
            .collect();
        let d = language_probs(&map, *alpha).unwrap();
        for (p, e) in d.probs().iter().zip(*expected) {
            max_err = max_err.max((p - e).abs());
        }
    }

    let mono_counts = [("aa", 3000), ("bb", 900), ("cc", 200), ("dd", 40)];
    let pair_counts = [
        (("aa", "bb"), 800),
        (("bb", "aa"), 800),
        (("aa", "cc"), 150),
        (("aa", "dd"), 20),
    ];
    let docs: Vec<Document> = mono_counts
        .iter()
        .flat_map(|&(l, n)| (0..n).map(move |i| Document::new(l, format!("doc {i}"))))
        .collect();
    let pairs: Vec<ParallelPair> = pair_counts
        .iter()
        .flat_map(|&((a, b), n)| {
            (0..n).map(move |i| ParallelPair::new(a, b, format!("s {i}"), format!("t {i}")))
        })
        .collect();
    let mut detail = vec![format!("oracle max error {max_err:.2e}")];
    let mut ok = max_err <= 1e-9;
    for r in [0.1, 0.5] {
        let spec = MixtureSpec {
            parallel_ratio: r,
            seed: 44,
            ..MixtureSpec::default()
        };
        let stream = MixedStream::from_records(docs.clone(), pairs.clone(), spec).unwrap();
        let mono_dist = stream.mono_distribution().unwrap().clone();
        let pair_dist = stream.pair_distribution().unwrap().clone();
        let draws = 100_000u64;
        let mut mono_obs = vec![0u64; mono_dist.len()];
        let mut pair_obs = vec![0u64; pair_dist.len()];
        let mut parallel = 0u64;
        for task in stream.take(draws as usize) {
            match task {
                RawTask::Mono(d) => {
                    mono_obs[mono_dist.keys().iter().position(|k| *k == d.lang).unwrap()] += 1
                }
                RawTask::Parallel(p) => {
                    parallel += 1;
                    let key = (p.src_lang, p.tgt_lang);
                    pair_obs[pair_dist.keys().iter().position(|k| *k == key).unwrap()] += 1;
                }
            }
        }
        let frac = parallel as f64 / draws as f64;
        let bound = 3.0 * (r * (1.0 - r) / draws as f64).sqrt();
        let (p_mono, p_pair) = (
            chi_square_p(&mono_obs, mono_dist.probs()),
            chi_square_p(&pair_obs, pair_dist.probs()),
        );
        ok &= (frac - r).abs() <= bound && p_mono > 0.001 && p_pair > 0.001;
        detail.push(format!(
            "r={r}: fraction {frac:.4} (±{bound:.4}), chi2 p mono {p_mono:.3} pairs {p_pair:.3}"
        ));
    }
    let elapsed = t.elapsed().as_secs_f64();
    detail.push(format!("{elapsed:.2}s"));
    verdict(
        4,
        "sampling calibration",
        ok && elapsed < 60.0,
        detail.join("; "),
    )
}

fn random_pairs(
    rng: &mut nmtlab::Rng,
    n: usize,
    vocab: usize,
) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    (0..n)
        .map(|_| {
            let src = (0..rng.gen_range(3..8))
                .map(|_| rng.gen_range(3..vocab as u32))
                .collect();
            let mut tgt: Vec<TokenId> = (0..rng.gen_range(2..7))
                .map(|_| rng.gen_range(3..vocab as u32))
                .collect();
            tgt.push(EOS);
            (src, tgt)
        })
        .collect()
}

fn batch_of(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Batch {
    Batch::from_pairs(pairs.iter().map(|(a, b)| (&a[..], &b[..])))
}

#[test]
fn criterion_5_numerical_core() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let cfg = ModelConfig::tiny(23);
        let p: Params<f64> = init_model(cfg, &mut seeded_rng(seed)).unwrap();
        let b = batch_of(&random_pairs(&mut seeded_rng(50 + seed), 3, 23));
        worst = worst.max(
            finite_diff_check(&p, &b, 1e-5, 256, seed)
                .unwrap()
                .max_rel_error,
        );
    }

    let corpus = gen_cipher_corpus(
        &CipherSpec::default(),
        &CorpusSizes {
            mono_per_lang: 1,
            pairs_per_direction: 1,
            task_train_per_direction: 2,
            task_valid_per_direction: 0,
            task_test_per_direction: 0,
        },
        &mut seeded_rng(5),
    )
    .unwrap();
    let vocab = Vocab::new(&corpus.spec.languages(), 100).unwrap();
    let examples = nmtlab::harness::task_examples(&corpus.task.train, &vocab).unwrap();
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = examples
        .iter()
        .map(|e| (e.input.clone(), e.target.clone()))
        .collect();
    let b = batch_of(&pairs[..8]);
    let cfg = ModelConfig::desk(vocab.size());
    let uniform = (vocab.size() as f64).ln();
    let mut init_err: f64 = 0.0;
    for seed in 0..5 {
        let p: Params<f32> = init_model(cfg, &mut seeded_rng(seed)).unwrap();
        init_err = init_err.max((forward(&p, &b).unwrap().loss as f64 - uniform).abs() / uniform);
    }

    let mut p: Params<f32> = init_model(cfg, &mut seeded_rng(0)).unwrap();
    let mut st = OptState::new(p.layout().clone(), AdamConfig::default());
    let mut reached = None;
    for step in 1..=500 {
        let (_, g) = loss_and_grads(&p, &b).unwrap();
        adam_step(&mut p, &g, &mut st).unwrap();
        if step % 10 == 0 && token_accuracy(&p, &b).unwrap() >= 0.99 {
            reached = Some(step);
            break;
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    verdict(
        5,
        "numerical core",
        worst < 1e-4 && init_err < 0.10 && reached.is_some() && elapsed < 300.0,
        format!(
            "gradient check max relative error {worst:.2e} over 5 seeds; initial loss within {:.1}% of ln({}); 8-pair batch at >= 99% token accuracy after {reached:?} steps; {elapsed:.1}s",
            100.0 * init_err,
            vocab.size()
        ),
    )
}

#[test]
fn criterion_6_metric_oracles() {
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        (0u32..1 << a.len())
            .filter_map(|bits| {
                let sub: Vec<u8> = (0..a.len())
                    .filter(|&i| bits >> i & 1 == 1)
                    .map(|i| a[i])
                    .collect();
                let mut it = b.iter();
                sub.iter().all(|x| it.any(|y| y == x)).then_some(sub.len())
            })
            .max()
            .unwrap_or(0)
    }
    fn rouge_oracle(a: &[u8], b: &[u8]) -> f64 {
        if a.is_empty() && b.is_empty() {
            return 100.0;
        }
        let l = brute_lcs(a, b) as f64;
        if l == 0.0 {
            return 0.0;
        }
        let (p, r) = (l / a.len() as f64, l / b.len() as f64);
        100.0 * 2.0 * p * r / (p + r)
    }
    let text = |s: &[u8]| {
        s.iter()
            .map(|&c| (c as char).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut seqs: Vec<Vec<u8>> = vec![vec![]];
    for len in 1..=4 {
        let prev: Vec<Vec<u8>> = seqs
            .iter()
            .filter(|s| s.len() == len - 1)
            .cloned()
            .collect();
        for s in prev {
            for c in [b'a', b'b', b'c'] {
                let mut t = s.clone();
                t.push(c);
                seqs.push(t);
            }
        }
    }
    let mut exhaustive = 0usize;
    let mut ok = true;
    for a in &seqs {
        for b in &seqs {
            ok &= lcs_len(a, b) == brute_lcs(a, b);
            ok &= (rouge_l(&text(a), &text(b)).value() - rouge_oracle(a, b)).abs() < 1e-9;
            exhaustive += 1;
        }
    }
    let mut rng = seeded_rng(6);
    for _ in 0..500 {
        let mut gen = || -> Vec<u8> {
            (0..rng.gen_range(0..=8))
                .map(|_| b"abc"[rng.gen_range(0..3)])
                .collect()
        };
        let (a, b) = (gen(), gen());
        ok &= lcs_len(&a, &b) == brute_lcs(&a, &b);
        ok &= (rouge_l(&text(&a), &text(&b)).value() - rouge_oracle(&a, &b)).abs() < 1e-9;
    }

    let ent = |v: &[(&str, &str)]| {
        v.iter()
            .map(|&(t, s)| (t.to_string(), s.to_string()))
            .collect::<BTreeSet<_>>()
    };
    let hand = [
        (
            "token_f1(a b c, b c d)",
            token_f1("a b c", "b c d").value(),
            66.67,
        ),
        (
            "rouge_l(the cat sat, the cat was sat)",
            rouge_l("the cat sat", "the cat was sat").value(),
            85.71,
        ),
        (
            "entity_f1({LOC paris}, {LOC paris, PER marie})",
            entity_f1(
                &ent(&[("LOC", "paris")]),
                &ent(&[("LOC", "paris"), ("PER", "marie")]),
            )
            .value(),
            66.67,
        ),
        ("token_f1(empty, empty)", token_f1("", "").value(), 100.0),
        (
            "entity_f1(empty, {PER marie})",
            entity_f1(&ent(&[]), &ent(&[("PER", "marie")])).value(),
            0.0,
        ),
    ];
    let hand_ok = hand.iter().all(|(_, got, want)| (got - want).abs() <= 0.01);
    verdict(
        6,
        "metric oracles",
        ok && hand_ok,
        format!(
            "{exhaustive} exhaustive + 500 random pairs agree with brute-force LCS: {ok}; hand-derived values: {}",
            hand.iter().map(|(n, g, _)| format!("{n} = {g:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

#[test]
fn criterion_7_checkpoint_roundtrip() {
    let t = Instant::now();
    let corpus = gen_cipher_corpus(
        &CipherSpec::default(),
        &CorpusSizes {
            mono_per_lang: 200,
            pairs_per_direction: 100,
            task_train_per_direction: 0,
            task_valid_per_direction: 0,
            task_test_per_direction: 0,
        },
        &mut seeded_rng(7),
    )
    .unwrap();
    let vocab = Vocab::new(&corpus.spec.languages(), 100).unwrap();
    let start = Checkpoint::initial(ModelConfig::desk(vocab.size()), &vocab, 7).unwrap();
    let cfg = TrainConfig {
        batch_tokens: 512,
        steps: 100,
        checkpoint_every: 50,
        learning_rate: 1e-3,
        seed: 7,
    };
    let objectives =
        ObjectiveMap::from_name(&ObjectiveRegistry::default(), "dnmt-lm", 0.5).unwrap();
    let mixture = MixtureSpec {
        parallel_ratio: 0.5,
        seed: 7,
        ..MixtureSpec::default()
    };
    let stream = || {
        MixedStream::from_records(corpus.mono.clone(), corpus.parallel.clone(), mixture).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..PretrainOptions::default()
    };
    let full = pretrain(
        &cfg,
        stream(),
        &objectives,
        &NoiseSpec::default(),
        &vocab,
        &start,
        &opts,
    )
    .unwrap();

    let mid_dir = dir.path().join(nmtlab::trainer::checkpoint_dir_name(50));
    let (mid, integrity) = load_checkpoint(&mid_dir).unwrap();
    let original = &full.checkpoints[0];
    let bitwise = integrity == Integrity::Verified
        && mid.step == 50
        && mid.params.bitwise_eq(&original.params)
        && mid.opt.m.bitwise_eq(&original.opt.m)
        && mid.opt.v.bitwise_eq(&original.opt.v)
        && mid.opt.step == original.opt.step;
    let again = tempfile::tempdir().unwrap();
    save_checkpoint(&mid, again.path()).unwrap();
    let same_bytes = std::fs::read(mid_dir.join("tensors.bin")).unwrap()
        == std::fs::read(again.path().join("tensors.bin")).unwrap();

    let resume = PretrainOptions {
        resume: true,
        ..PretrainOptions::default()
    };
    let rest = pretrain(
        &cfg,
        stream(),
        &objectives,
        &NoiseSpec::default(),
        &vocab,
        &mid,
        &resume,
    )
    .unwrap();
    let max_diff = full.losses[50..]
        .iter()
        .zip(&rest.losses)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let elapsed = t.elapsed().as_secs_f64();
    verdict(
        7,
        "checkpoint roundtrip",
        bitwise && same_bytes && rest.losses.len() == 50 && max_diff <= 1e-6 && elapsed < 60.0,
        format!(
            "load is bitwise-identical: {bitwise}, re-save byte-identical: {same_bytes}; resumed steps 51-100 max loss difference {max_diff:.2e}; {elapsed:.1}s"
        ),
    )
}

/// Thresholds for the directional experiment. Pilot runs used seed 0 (corpus,
/// initialisation and fine-tuning); see README for the pilot table.
const FEW_SHOT_MIN_GAP: f64 = 5.0;
const MIX_MAX_EXCESS: f64 = 2.0;

#[test]
fn criterion_8_qualitative_reproduction() {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let corpus = gen_cipher_corpus(
        &CipherSpec::default(),
        &CorpusSizes::default(),
        &mut seeded_rng(cfg.seed),
    )
    .unwrap();
    let report: Report = run_experiment(&cfg, &corpus).unwrap();
    say!("{}", render_report(&report).text);

    let cell = |label: &str, regime: &str| report.cell(label, regime);
    let agg = |label: &str| report.row(label).and_then(|r| r.aggregate);
    let gap = |regime: &str| Some(cell("nmt@0.1", regime)? - cell("mlm@0", regime)?);
    let (few, high) = (gap("few-shot"), gap("high"));
    let excess = (|| Some((agg("nmt@0.5")? - agg("mlm@0")?) - (agg("nmt@0.1")? - agg("mlm@0")?)))();
    let a = few.is_some_and(|g| g >= FEW_SHOT_MIN_GAP);
    let b = matches!((few, high), (Some(f), Some(h)) if f > h);
    let c = excess.is_some_and(|e| e <= MIX_MAX_EXCESS);
    let elapsed = t.elapsed().as_secs_f64();
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:+.1}"));
    say!(
        "criterion 8a: {} few-shot gap {} >= {FEW_SHOT_MIN_GAP}",
        if a { "PASS" } else { "FAIL" },
        fmt(few)
    );
    say!(
        "criterion 8b: {} few-shot gap {} > high gap {}",
        if b { "PASS" } else { "FAIL" },
        fmt(few),
        fmt(high)
    );
    say!(
        "criterion 8c: {} gap(r=0.5) - gap(r=0.1) = {} <= {MIX_MAX_EXCESS}",
        if c { "PASS" } else { "FAIL" },
        fmt(excess)
    );
    verdict(
        8,
        "qualitative reproduction",
        a && b && c,
        format!("median over {} runs, {:.1} min", cfg.runs, elapsed / 60.0),
    )
}
