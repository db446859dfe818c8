use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use super::cipher::{CipherCorpus, CipherSpec, TaskRecord, TaskSplits};
use super::HarnessError;
use crate::corpus::{read_monolingual, read_parallel, write_monolingual, write_parallel};
use crate::trainer::{EvalItem, TaskExample};
use crate::vocab::{Vocab, EOS};
use crate::Rng;

pub const MONO_FILE: &str = "mono.tsv";
pub const PARALLEL_FILE: &str = "parallel.tsv";
pub const CIPHER_FILE: &str = "cipher.json";
pub const TASK_TRAIN_FILE: &str = "task.train.tsv";
pub const TASK_VALID_FILE: &str = "task.valid.tsv";
pub const TASK_TEST_FILE: &str = "task.test.tsv";

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes `id<TAB>src_lang<TAB>tgt_lang<TAB>input<TAB>target` lines.
pub fn write_task(path: impl AsRef<Path>, records: &[TaskRecord]) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for r in records {
        for field in [&r.id, &r.src_lang, &r.tgt_lang, &r.input, &r.target] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(HarnessError::Format {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("field {field:?} contains a tab or newline"),
                });
            }
        }
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.id, r.src_lang, r.tgt_lang, r.input, r.target
        )
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_task(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>, HarnessError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, src, tgt, input, target] = fields[..] else {
            return Err(HarnessError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        };
        out.push(TaskRecord {
            id: id.into(),
            src_lang: src.into(),
            tgt_lang: tgt.into(),
            input: input.into(),
            target: target.into(),
        });
    }
    Ok(out)
}

/// Writes the corpus files and `cipher.json` into `dir`.
pub fn write_corpus(corpus: &CipherCorpus, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_monolingual(dir.join(MONO_FILE), &corpus.mono)?;
    write_parallel(dir.join(PARALLEL_FILE), &corpus.parallel)?;
    write_task(dir.join(TASK_TRAIN_FILE), &corpus.task.train)?;
    write_task(dir.join(TASK_VALID_FILE), &corpus.task.valid)?;
    write_task(dir.join(TASK_TEST_FILE), &corpus.task.test)?;
    let path = dir.join(CIPHER_FILE);
    let json = serde_json::to_string_pretty(&corpus.spec)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<CipherCorpus, HarnessError> {
    let dir = dir.as_ref();
    let path = dir.join(CIPHER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let spec: CipherSpec = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    spec.validate()?;
    Ok(CipherCorpus {
        spec,
        mono: read_monolingual(dir.join(MONO_FILE))?,
        parallel: read_parallel(dir.join(PARALLEL_FILE))?,
        task: TaskSplits {
            train: read_task(dir.join(TASK_TRAIN_FILE))?,
            valid: read_task(dir.join(TASK_VALID_FILE))?,
            test: read_task(dir.join(TASK_TEST_FILE))?,
        },
    })
}

/// Translation-task input: target-language code, then the source bytes.
pub fn task_input(r: &TaskRecord, vocab: &Vocab) -> Result<Vec<u32>, HarnessError> {
    let mut input = vec![vocab.lang_code(&r.tgt_lang)?];
    input.extend(vocab.encode(&r.input));
    Ok(input)
}

pub fn task_examples(
    records: &[TaskRecord],
    vocab: &Vocab,
) -> Result<Vec<TaskExample>, HarnessError> {
    records
        .iter()
        .map(|r| {
            let mut target = vocab.encode(&r.target);
            target.push(EOS);
            Ok(TaskExample {
                input: task_input(r, vocab)?,
                target,
            })
        })
        .collect()
}

/// Evaluation items keyed by direction (`src-tgt`).
pub fn eval_items(records: &[TaskRecord], vocab: &Vocab) -> Result<Vec<EvalItem>, HarnessError> {
    records
        .iter()
        .map(|r| {
            Ok(EvalItem {
                id: r.id.clone(),
                lang: r.direction(),
                input: task_input(r, vocab)?,
                reference: r.target.clone(),
            })
        })
        .collect()
}

/// Uniform sample of `k` items without replacement.
pub fn few_shot_subsample<T: Clone>(
    items: &[T],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<T>, HarnessError> {
    if k > items.len() {
        return Err(HarnessError::Config(format!(
            "cannot sample {k} of {} examples",
            items.len()
        )));
    }
    Ok(items.choose_multiple(rng, k).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::cipher::{gen_cipher_corpus, CorpusSizes};
    use crate::seeded_rng;

    #[test]
    fn subsample_cases() {
        let items: Vec<u32> = (0..50).collect();
        let mut all = few_shot_subsample(&items, 50, &mut seeded_rng(1)).unwrap();
        all.sort();
        assert_eq!(all, items);
        assert!(few_shot_subsample(&items, 0, &mut seeded_rng(1))
            .unwrap()
            .is_empty());
        let a = few_shot_subsample(&items, 10, &mut seeded_rng(7)).unwrap();
        let b = few_shot_subsample(&items, 10, &mut seeded_rng(7)).unwrap();
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 10);
        assert!(few_shot_subsample(&items, 51, &mut seeded_rng(1)).is_err());
    }

    #[test]
    fn corpus_roundtrips_through_files() {
        let sizes = CorpusSizes {
            mono_per_lang: 5,
            pairs_per_direction: 3,
            task_train_per_direction: 2,
            task_valid_per_direction: 1,
            task_test_per_direction: 2,
        };
        let corpus = gen_cipher_corpus(&CipherSpec::default(), &sizes, &mut seeded_rng(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn task_encoding_matches_translation_format() {
        let vocab = Vocab::new(&["en", "xa"], 4).unwrap();
        let r = TaskRecord {
            id: "1".into(),
            src_lang: "en".into(),
            tgt_lang: "xa".into(),
            input: "ab".into(),
            target: "qz".into(),
        };
        let ex = &task_examples(std::slice::from_ref(&r), &vocab).unwrap()[0];
        assert_eq!(ex.input[0], vocab.lang_code("xa").unwrap());
        assert_eq!(&ex.input[1..], vocab.encode("ab").as_slice());
        assert_eq!(*ex.target.last().unwrap(), EOS);
        assert_eq!(eval_items(&[r], &vocab).unwrap()[0].lang, "en-xa");
    }

    #[test]
    fn bad_task_lines_are_rejected_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        fs::write(&path, "a\ten\txa\tx\ty\nb\ten\txa\tx\n").unwrap();
        match read_task(&path) {
            Err(HarnessError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
