use alloc::vec;
use alloc::vec::Vec;

use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Right-padded source and target ids for a group of examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    /// `[size, src_width]`.
    pub src: Vec<TokenId>,
    pub src_width: usize,
    pub src_lens: Vec<usize>,
    /// BOS followed by the answer, `[size, tgt_width]`.
    pub tgt_in: Vec<TokenId>,
    /// The answer followed by EOS, `[size, tgt_width]`.
    pub tgt_out: Vec<TokenId>,
    pub tgt_width: usize,
}

impl Batch {
    /// `pairs` are `(source, answer)` ids without special tokens.
    pub fn new(pairs: &[(&[TokenId], &[TokenId])]) -> Self {
        let size = pairs.len();
        let src_width = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_width = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(0);
        let mut src = vec![PAD; size * src_width];
        let mut tgt_in = vec![PAD; size * tgt_width];
        let mut tgt_out = vec![PAD; size * tgt_width];
        for (i, (s, a)) in pairs.iter().enumerate() {
            src[i * src_width..i * src_width + s.len()].copy_from_slice(s);
            tgt_in[i * tgt_width] = BOS;
            tgt_in[i * tgt_width + 1..i * tgt_width + 1 + a.len()].copy_from_slice(a);
            tgt_out[i * tgt_width..i * tgt_width + a.len()].copy_from_slice(a);
            tgt_out[i * tgt_width + a.len()] = EOS;
        }
        Self { size, src, src_width, src_lens: pairs.iter().map(|p| p.0.len()).collect(), tgt_in, tgt_out, tgt_width }
    }

    /// Source-only batch for decoding.
    pub fn sources(sources: &[&[TokenId]]) -> Self {
        let pairs: Vec<(&[TokenId], &[TokenId])> = sources.iter().map(|s| (*s, &[][..])).collect();
        Self::new(&pairs)
    }

    pub fn src_padding(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t == PAD).collect()
    }

    pub fn tgt_padding(&self) -> Vec<bool> {
        self.tgt_in.iter().map(|&t| t == PAD).collect()
    }
}
