//! Word-level helpers for the fixed-width occupancy bitsets.
//!
//! Bit `i` of a bitset refers to tracked site index `i` (index 0 is the
//! leftmost site of the current level's sublattice inside the window). All
//! operations keep bits above `width` cleared.

/// Number of 64-bit words needed for `width` bits.
#[inline]
pub fn words_for(width: usize) -> usize {
    width.div_ceil(64)
}

/// Clears any bits at positions `>= width`.
#[inline]
pub fn mask_width(v: &mut [u64], width: usize) {
    let rem = width % 64;
    if rem != 0 {
        if let Some(last) = v.last_mut() {
            *last &= (1u64 << rem) - 1;
        }
    }
}

/// `out = v << 1` across word boundaries.
pub fn shl1(v: &[u64], out: &mut [u64]) {
    let mut carry = 0u64;
    for (o, &w) in out.iter_mut().zip(v.iter()) {
        *o = (w << 1) | carry;
        carry = w >> 63;
    }
}

/// `out = v >> 1` across word boundaries.
pub fn shr1(v: &[u64], out: &mut [u64]) {
    let n = v.len();
    for i in 0..n {
        let hi = if i + 1 < n { v[i + 1] << 63 } else { 0 };
        out[i] = (v[i] >> 1) | hi;
    }
}

#[inline]
pub fn get(v: &[u64], i: usize) -> bool {
    v[i / 64] >> (i % 64) & 1 == 1
}

#[inline]
pub fn set(v: &mut [u64], i: usize) {
    v[i / 64] |= 1u64 << (i % 64);
}

#[inline]
pub fn is_zero(v: &[u64]) -> bool {
    v.iter().all(|&w| w == 0)
}

#[inline]
pub fn count_ones(v: &[u64]) -> u32 {
    v.iter().map(|w| w.count_ones()).sum()
}

/// Index of the highest set bit, if any.
pub fn highest_set(v: &[u64]) -> Option<usize> {
    for (i, &w) in v.iter().enumerate().rev() {
        if w != 0 {
            return Some(i * 64 + 63 - w.leading_zeros() as usize);
        }
    }
    None
}

/// Indices of set bits in increasing order.
pub fn iter_ones(v: &[u64]) -> impl Iterator<Item = usize> + '_ {
    v.iter().enumerate().flat_map(|(i, &w)| {
        let mut w = w;
        std::iter::from_fn(move || {
            if w == 0 {
                None
            } else {
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(i * 64 + b)
            }
        })
    })
}

/// Sets bits `lo..=hi` (clamped to `width`), assuming `lo <= hi`.
pub fn set_range(v: &mut [u64], lo: usize, hi: usize, width: usize) {
    let hi = hi.min(width.saturating_sub(1));
    for i in lo..=hi {
        set(v, i);
    }
}

/// True when `a` is a sitewise subset of `b`.
#[inline]
pub fn is_subset(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b.iter()).all(|(&x, &y)| x & !y == 0)
}

/// Any set bit with index in `lo..=hi`?
pub fn any_in_range(v: &[u64], lo: usize, hi: usize) -> bool {
    if lo > hi {
        return false;
    }
    let (wl, wh) = (lo / 64, hi / 64);
    let last = wh.min(v.len() - 1);
    for (w, &word) in v.iter().enumerate().take(last + 1).skip(wl) {
        let mut mask = u64::MAX;
        if w == wl {
            mask &= u64::MAX << (lo % 64);
        }
        if w == wh && hi % 64 != 63 {
            mask &= (1u64 << (hi % 64 + 1)) - 1;
        }
        if word & mask != 0 {
            return true;
        }
    }
    false
}

/// Elementwise intersection.
pub fn and(a: &[u64], b: &[u64]) -> Vec<u64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| x & y).collect()
}

/// `v << s` across word boundaries, same word count (top bits fall off).
pub fn shl(v: &[u64], s: usize) -> Vec<u64> {
    let words = v.len();
    let mut out = vec![0u64; words];
    let word_shift = s / 64;
    let bit_shift = s % 64;
    for w in (word_shift..words).rev() {
        let mut x = v[w - word_shift] << bit_shift;
        if bit_shift > 0 && w > word_shift {
            x |= v[w - word_shift - 1] >> (64 - bit_shift);
        }
        out[w] = x;
    }
    out
}
