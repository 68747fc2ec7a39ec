use serde::{Deserialize, Serialize};
use std::fmt;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Token id. Tokens are abstract; no tokenizer is involved.
pub type Token = u32;

/// Content hash of every token from the prefix root through a segment's last
/// token (64-bit FNV-1a over little-endian token bytes).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey(pub u64);

impl fmt::Debug for SegmentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SegmentKey({:016x})", self.0)
    }
}

impl fmt::Display for SegmentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Continue an FNV-1a state over more tokens.
pub fn fnv1a_extend(mut state: u64, tokens: &[Token]) -> u64 {
    for t in tokens {
        for b in t.to_le_bytes() {
            state ^= b as u64;
            state = state.wrapping_mul(FNV_PRIME);
        }
    }
    state
}

pub fn fnv1a(tokens: &[Token]) -> u64 {
    fnv1a_extend(FNV_OFFSET_BASIS, tokens)
}

/// Instance a normal segment lives on. The FNV value goes through a 64-bit
/// avalanche finalizer before a multiply-shift range reduction, since the low
/// bits of FNV-1a depend only on the low bits of each input byte.
pub fn home_instance(key: SegmentKey, n: usize) -> usize {
    assert!(n >= 1, "home_instance needs at least one instance");
    let mut x = key.0;
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    ((x as u128 * n as u128) >> 64) as usize
}

/// One link of a segment chain, root first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainLink {
    pub key: SegmentKey,
    pub parent: Option<SegmentKey>,
    pub depth: u32,
    pub token_count: u32,
}

/// A token sequence with the keys of all its full segments precomputed, so
/// that chains for any prefix length cost at most one partial-segment hash.
#[derive(Debug, Clone)]
pub struct TokenChain {
    tokens: Vec<Token>,
    segment_size: usize,
    full_keys: Vec<SegmentKey>,
}

impl TokenChain {
    pub fn new(tokens: Vec<Token>, segment_size: usize) -> Self {
        assert!(segment_size >= 1);
        let mut state = FNV_OFFSET_BASIS;
        let full_keys = tokens
            .chunks_exact(segment_size)
            .map(|chunk| {
                state = fnv1a_extend(state, chunk);
                SegmentKey(state)
            })
            .collect();
        Self {
            tokens,
            segment_size,
            full_keys,
        }
    }

    /// Append tokens, hashing only the new full segments.
    pub fn extend(&mut self, more: &[Token]) {
        let c = self.segment_size;
        let done = self.full_keys.len() * c;
        self.tokens.extend_from_slice(more);
        let mut state = self.state_before(self.full_keys.len());
        for chunk in self.tokens[done..].chunks_exact(c) {
            state = fnv1a_extend(state, chunk);
            self.full_keys.push(SegmentKey(state));
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segment_size(&self) -> usize {
        self.segment_size
    }

    /// FNV state after the first `depth` full segments.
    fn state_before(&self, depth: usize) -> u64 {
        if depth == 0 {
            FNV_OFFSET_BASIS
        } else {
            self.full_keys[depth - 1].0
        }
    }

    /// Key of the link that ends at token `end` (1 ..= len). The link starts at
    /// the last segment boundary strictly before `end`.
    pub fn key_at(&self, end: usize) -> SegmentKey {
        assert!(end >= 1 && end <= self.tokens.len(), "link end {end} out of range");
        let depth = (end - 1) / self.segment_size;
        let start = depth * self.segment_size;
        if end - start == self.segment_size {
            return self.full_keys[depth];
        }
        SegmentKey(fnv1a_extend(self.state_before(depth), &self.tokens[start..end]))
    }

    /// Links covering tokens `[0, len)`: full segments plus a partial tail.
    pub fn links(&self, len: usize) -> Vec<ChainLink> {
        self.links_from(0, len)
    }

    /// The links of `links(len)` from depth `first` on.
    pub fn links_from(&self, first: usize, len: usize) -> Vec<ChainLink> {
        assert!(len <= self.tokens.len());
        let c = self.segment_size;
        let n = len.div_ceil(c);
        if first >= n {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(n - first);
        let mut parent = first.checked_sub(1).map(|d| self.full_keys[d]);
        for depth in first..n {
            let end = ((depth + 1) * c).min(len);
            let key = self.key_at(end);
            out.push(ChainLink {
                key,
                parent,
                depth: depth as u32,
                token_count: (end - depth * c) as u32,
            });
            parent = Some(key);
        }
        out
    }

    /// Full-segment links only, covering `[0, floor(len / C) * C)`.
    pub fn full_links(&self, len: usize) -> Vec<ChainLink> {
        let c = self.segment_size;
        self.links((len / c) * c)
    }
}
