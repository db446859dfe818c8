use std::collections::VecDeque;

use crate::model::Batch;
use crate::objectives::Example;
use crate::vocab::{TokenId, TokenSeq};

/// Anything trainable as an (input, target) pair.
pub trait SeqPair {
    fn input(&self) -> &[TokenId];
    fn target(&self) -> &[TokenId];
    /// Cuts both sides to `max_len`; true if anything was removed.
    fn truncate_to(&mut self, max_len: usize) -> bool;
}

impl SeqPair for Example {
    fn input(&self) -> &[TokenId] {
        &self.input
    }

    fn target(&self) -> &[TokenId] {
        &self.target
    }

    fn truncate_to(&mut self, max_len: usize) -> bool {
        let cut = self.input.len() > max_len || self.target.len() > max_len;
        self.input.truncate(max_len);
        self.target.truncate(max_len);
        cut
    }
}

/// A fine-tuning pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub input: TokenSeq,
    pub target: TokenSeq,
}

impl SeqPair for TaskExample {
    fn input(&self) -> &[TokenId] {
        &self.input
    }

    fn target(&self) -> &[TokenId] {
        &self.target
    }

    fn truncate_to(&mut self, max_len: usize) -> bool {
        let cut = self.input.len() > max_len || self.target.len() > max_len;
        self.input.truncate(max_len);
        self.target.truncate(max_len);
        cut
    }
}

pub fn to_batch<E: SeqPair>(items: &[E]) -> Batch {
    Batch::from_pairs(items.iter().map(|e| (e.input(), e.target())))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub batches: u64,
    pub examples: u64,
    pub truncated: u64,
    pub oversize: u64,
}

/// Greedy token-count packer. A batch of `n` examples costs
/// `n · (max input + max target)` tokens, padding included.
#[derive(Debug)]
pub struct Packer<E> {
    batch_tokens: usize,
    max_len: usize,
    pending: Vec<E>,
    widths: (usize, usize),
    ready: VecDeque<Vec<E>>,
    pub stats: BatchStats,
}

impl<E: SeqPair> Packer<E> {
    pub fn new(batch_tokens: usize, max_len: usize) -> Self {
        Packer {
            batch_tokens,
            max_len,
            pending: Vec::new(),
            widths: (0, 0),
            ready: VecDeque::new(),
            stats: BatchStats::default(),
        }
    }

    fn emit(&mut self, batch: Vec<E>) {
        self.stats.batches += 1;
        self.stats.examples += batch.len() as u64;
        self.ready.push_back(batch);
    }

    pub fn push(&mut self, mut ex: E) {
        if ex.truncate_to(self.max_len) {
            self.stats.truncated += 1;
        }
        let (wi, wt) = (ex.input().len(), ex.target().len());
        if wi + wt > self.batch_tokens {
            self.stats.oversize += 1;
            log::warn!(
                "example of {} tokens exceeds batch_tokens {}; emitted alone",
                wi + wt,
                self.batch_tokens
            );
            self.flush();
            self.emit(vec![ex]);
            return;
        }
        let widths = (self.widths.0.max(wi), self.widths.1.max(wt));
        if !self.pending.is_empty()
            && (self.pending.len() + 1) * (widths.0 + widths.1) > self.batch_tokens
        {
            self.flush();
            self.widths = (wi, wt);
        } else {
            self.widths = widths;
        }
        self.pending.push(ex);
    }

    pub fn flush(&mut self) {
        if !self.pending.is_empty() {
            let batch = std::mem::take(&mut self.pending);
            self.emit(batch);
        }
        self.widths = (0, 0);
    }

    pub fn pop(&mut self) -> Option<Vec<E>> {
        self.ready.pop_front()
    }
}

/// Iterator adapter packing examples into token-bounded batches.
pub struct MakeBatches<I: Iterator> {
    inner: I,
    packer: Packer<I::Item>,
    done: bool,
}

impl<I> MakeBatches<I>
where
    I: Iterator,
    I::Item: SeqPair,
{
    pub fn stats(&self) -> BatchStats {
        self.packer.stats
    }
}

impl<I> Iterator for MakeBatches<I>
where
    I: Iterator,
    I::Item: SeqPair,
{
    type Item = Vec<I::Item>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(b) = self.packer.pop() {
                return Some(b);
            }
            if self.done {
                return None;
            }
            match self.inner.next() {
                Some(ex) => self.packer.push(ex),
                None => {
                    self.done = true;
                    self.packer.flush();
                }
            }
        }
    }
}

pub fn make_batches<I>(examples: I, batch_tokens: usize, max_len: usize) -> MakeBatches<I::IntoIter>
where
    I: IntoIterator,
    I::Item: SeqPair,
{
    MakeBatches {
        inner: examples.into_iter(),
        packer: Packer::new(batch_tokens, max_len),
        done: false,
    }
}
