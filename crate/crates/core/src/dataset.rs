//! Sliding-window (context, target) pairs for next-token prediction.

use crate::corpus::{EncodedCorpus, TokenId, BOS};

/// Flat storage: `contexts[i*n..(i+1)*n]` predicts `targets[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairs {
    pub context_size: usize,
    pub contexts: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

impl Pairs {
    /// One pair per position after BOS in every sequence. Contexts reaching
    /// before the start of a sequence are left-padded with BOS.
    pub fn from_corpus(corpus: &EncodedCorpus, context_size: usize) -> Self {
        let n = context_size;
        let total: usize = corpus
            .sequences
            .iter()
            .map(|s| s.len().saturating_sub(1))
            .sum();
        let mut contexts = Vec::with_capacity(total * n);
        let mut targets = Vec::with_capacity(total);
        for seq in &corpus.sequences {
            for i in 1..seq.len() {
                for back in (1..=n).rev() {
                    contexts.push(if back > i { BOS } else { seq[i - back] });
                }
                targets.push(seq[i]);
            }
        }
        Pairs {
            context_size: n,
            contexts,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn context(&self, i: usize) -> &[TokenId] {
        &self.contexts[i * self.context_size..(i + 1) * self.context_size]
    }

    /// Gathers the pairs at `indices` into flat buffers.
    pub fn gather(
        &self,
        indices: &[usize],
        contexts: &mut Vec<TokenId>,
        targets: &mut Vec<TokenId>,
    ) {
        contexts.clear();
        targets.clear();
        for &i in indices {
            contexts.extend_from_slice(self.context(i));
            targets.push(self.targets[i]);
        }
    }
}
