//! Monolingual documents, parallel pairs, and their TSV formats.
//!
//! Monolingual files hold one `lang<TAB>text` record per line; parallel
//! files hold `src_lang<TAB>tgt_lang<TAB>src_text<TAB>tgt_text`. Records are
//! terminated by `\n`, blank lines are skipped, and everything is UTF-8.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: expected {expected} tab-separated fields, found {found}")]
    FieldCount {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: line is not valid UTF-8")]
    Utf8 { path: PathBuf, line: usize },
    #[error("{path}:{line}: {reason}")]
    Invalid {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Document {
    pub lang: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelPair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
}

/// One raw record drawn from the training mixture, before any objective
/// turns it into an [`Example`](crate::objectives::Example).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawTask {
    Mono(Document),
    Parallel(ParallelPair),
}

impl RawTask {
    pub fn is_parallel(&self) -> bool {
        matches!(self, RawTask::Parallel(_))
    }
}

impl Document {
    pub fn new(lang: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            lang: lang.into(),
            text: text.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        check_lang(&self.lang)?;
        if self.text.trim().is_empty() {
            return Err("document text is empty".into());
        }
        check_field(&self.text)
    }
}

impl ParallelPair {
    pub fn new(
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        src_text: impl Into<String>,
        tgt_text: impl Into<String>,
    ) -> Self {
        Self {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            src_text: src_text.into(),
            tgt_text: tgt_text.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        check_lang(&self.src_lang)?;
        check_lang(&self.tgt_lang)?;
        if self.src_lang == self.tgt_lang {
            return Err(format!(
                "source and target language are both {:?}",
                self.src_lang
            ));
        }
        if self.src_text.is_empty() || self.tgt_text.is_empty() {
            return Err("parallel pair has an empty side".into());
        }
        check_field(&self.src_text)?;
        check_field(&self.tgt_text)
    }
}

fn check_lang(code: &str) -> Result<(), String> {
    if code.is_empty() || code.chars().any(char::is_whitespace) {
        return Err(format!("invalid language code {code:?}"));
    }
    Ok(())
}

fn check_field(text: &str) -> Result<(), String> {
    if text.contains(['\t', '\n']) {
        return Err("field contains a tab or newline".into());
    }
    Ok(())
}

/// Line-numbered TSV reader shared by both loaders.
struct TsvLines<R> {
    reader: R,
    path: PathBuf,
    line: usize,
    buf: Vec<u8>,
}

impl<R: BufRead> TsvLines<R> {
    /// Next non-blank line as `(line_number, fields)`.
    fn next_record(&mut self) -> Option<Result<(usize, Vec<String>), CorpusError>> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(source) => {
                    return Some(Err(CorpusError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            }
            self.line += 1;
            if self.buf.last() == Some(&b'\n') {
                self.buf.pop();
            }
            if self.buf.is_empty() {
                continue;
            }
            let Ok(text) = std::str::from_utf8(&self.buf) else {
                return Some(Err(CorpusError::Utf8 {
                    path: self.path.clone(),
                    line: self.line,
                }));
            };
            let fields = text.split('\t').map(str::to_string).collect();
            return Some(Ok((self.line, fields)));
        }
    }
}

pub struct MonolingualReader<R> {
    lines: TsvLines<R>,
}

impl<R: BufRead> MonolingualReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        Self {
            lines: TsvLines {
                reader,
                path: path.into(),
                line: 0,
                buf: Vec::new(),
            },
        }
    }
}

impl<R: BufRead> Iterator for MonolingualReader<R> {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line, mut fields) = match self.lines.next_record()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let path = &self.lines.path;
        if fields.len() != 2 {
            return Some(Err(CorpusError::FieldCount {
                path: path.clone(),
                line,
                expected: 2,
                found: fields.len(),
            }));
        }
        let text = fields.pop().unwrap();
        let lang = fields.pop().unwrap();
        let doc = Document { lang, text };
        Some(
            doc.validate()
                .map(|_| doc)
                .map_err(|reason| CorpusError::Invalid {
                    path: path.clone(),
                    line,
                    reason,
                }),
        )
    }
}

pub struct ParallelReader<R> {
    lines: TsvLines<R>,
}

impl<R: BufRead> ParallelReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        Self {
            lines: TsvLines {
                reader,
                path: path.into(),
                line: 0,
                buf: Vec::new(),
            },
        }
    }
}

impl<R: BufRead> Iterator for ParallelReader<R> {
    type Item = Result<ParallelPair, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line, fields) = match self.lines.next_record()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let path = &self.lines.path;
        if fields.len() != 4 {
            return Some(Err(CorpusError::FieldCount {
                path: path.clone(),
                line,
                expected: 4,
                found: fields.len(),
            }));
        }
        let [src_lang, tgt_lang, src_text, tgt_text]: [String; 4] = fields.try_into().unwrap();
        let pair = ParallelPair {
            src_lang,
            tgt_lang,
            src_text,
            tgt_text,
        };
        Some(
            pair.validate()
                .map(|_| pair)
                .map_err(|reason| CorpusError::Invalid {
                    path: path.clone(),
                    line,
                    reason,
                }),
        )
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Lazily streams documents from a monolingual TSV file.
pub fn load_monolingual(
    path: impl AsRef<Path>,
) -> Result<MonolingualReader<BufReader<File>>, CorpusError> {
    let path = path.as_ref();
    Ok(MonolingualReader::new(open(path)?, path))
}

/// Lazily streams pairs from a parallel TSV file.
pub fn load_parallel(
    path: impl AsRef<Path>,
) -> Result<ParallelReader<BufReader<File>>, CorpusError> {
    let path = path.as_ref();
    Ok(ParallelReader::new(open(path)?, path))
}

pub fn read_monolingual(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    load_monolingual(path)?.collect()
}

pub fn read_parallel(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>, CorpusError> {
    load_parallel(path)?.collect()
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_monolingual<'a>(
    path: impl AsRef<Path>,
    docs: impl IntoIterator<Item = &'a Document>,
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for d in docs {
        writeln!(w, "{}\t{}", d.lang, d.text).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_parallel<'a>(
    path: impl AsRef<Path>,
    pairs: impl IntoIterator<Item = &'a ParallelPair>,
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.src_lang, p.tgt_lang, p.src_text, p.tgt_text
        )
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Per-language and per-pair example counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mono_counts: BTreeMap<String, u64>,
    pub pair_counts: BTreeMap<(String, String), u64>,
}

impl CorpusStats {
    pub fn from_records(docs: &[Document], pairs: &[ParallelPair]) -> Self {
        let mut stats = Self::default();
        for d in docs {
            *stats.mono_counts.entry(d.lang.clone()).or_default() += 1;
        }
        for p in pairs {
            *stats
                .pair_counts
                .entry((p.src_lang.clone(), p.tgt_lang.clone()))
                .or_default() += 1;
        }
        stats
    }

    pub fn mono_total(&self) -> u64 {
        self.mono_counts.values().sum()
    }

    pub fn pair_total(&self) -> u64 {
        self.pair_counts.values().sum()
    }
}

/// Counts records across all files with a single streaming pass each.
pub fn corpus_stats<P: AsRef<Path>, Q: AsRef<Path>>(
    mono_paths: &[P],
    parallel_paths: &[Q],
) -> Result<CorpusStats, CorpusError> {
    let mut stats = CorpusStats::default();
    for path in mono_paths {
        for doc in load_monolingual(path)? {
            *stats.mono_counts.entry(doc?.lang).or_default() += 1;
        }
    }
    for path in parallel_paths {
        for pair in load_parallel(path)? {
            let pair = pair?;
            *stats
                .pair_counts
                .entry((pair.src_lang, pair.tgt_lang))
                .or_default() += 1;
        }
    }
    Ok(stats)
}
