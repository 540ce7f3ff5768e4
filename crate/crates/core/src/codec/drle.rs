//! Delta + run-length codec.
//!
//! The payload is first turned into a byte-wise delta stream
//! (`d[0] = b[0]`, `d[i] = b[i] - b[i-1] mod 256`), which is then run-length
//! coded with one control byte per run:
//!
//! * `0..=127`: the next `c + 1` bytes are literals;
//! * `128..=255`: the next byte is repeated `c - 125` times (3..=130).
//!
//! The encoder is canonical-greedy: a repeat run is emitted whenever the next
//! three or more delta bytes are equal (up to 130), otherwise a literal run is
//! extended (up to 128) until a repeat of three begins. One exception: a run
//! of exactly 132 equal bytes is coded as 129 + 3 rather than 130 followed by
//! a two-byte literal.

use std::cell::RefCell;

use super::CodecError;

pub const MAX_LITERAL: usize = 128;
pub const MIN_REPEAT: usize = 3;
pub const MAX_REPEAT: usize = 130;

const LO: u64 = 0x0101_0101_0101_0101;
const HI: u64 = 0x8080_8080_8080_8080;

thread_local! {
    static SCRATCH: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn delta_into(input: &[u8], d: &mut Vec<u8>) {
    d.clear();
    d.resize(input.len(), 0);
    if input.is_empty() {
        return;
    }
    d[0] = input[0];
    for (o, (cur, prev)) in d[1..].iter_mut().zip(input[1..].iter().zip(input.iter())) {
        *o = cur.wrapping_sub(*prev);
    }
}

#[inline]
fn triple_at(d: &[u8], j: usize) -> bool {
    j + 2 < d.len() && d[j] == d[j + 1] && d[j + 1] == d[j + 2]
}

#[inline]
fn load(d: &[u8], j: usize) -> u64 {
    u64::from_le_bytes(d[j..j + 8].try_into().unwrap())
}

/// First position in `from..to` where a run of three equal bytes starts, or `to`.
fn next_triple(d: &[u8], from: usize, to: usize) -> usize {
    let mut j = from;
    // Word step: byte k of `x` is zero iff d[j+k] == d[j+k+1]. No equal pair
    // in j..j+8 rules out a triple starting anywhere in j..j+8.
    while j + 9 <= d.len() && j + 8 <= to {
        let x = load(d, j) ^ load(d, j + 1);
        if x.wrapping_sub(LO) & !x & HI == 0 {
            j += 8;
            continue;
        }
        for k in j..j + 8 {
            if triple_at(d, k) {
                return k;
            }
        }
        j += 8;
    }
    while j < to {
        if triple_at(d, j) {
            return j;
        }
        j += 1;
    }
    to
}

fn encode_delta(d: &[u8], out: &mut Vec<u8>) {
    let n = d.len();
    let mut i = 0;
    while i < n {
        if triple_at(d, i) {
            let v = d[i];
            // look two past the cap: a run of exactly 132 is split 129 + 3
            // so no two-byte literal is stranded behind it
            let limit = (i + MAX_REPEAT + 2).min(n);
            let mut j = i + MIN_REPEAT;
            while j < limit && d[j] == v {
                j += 1;
            }
            j = match j - i {
                r if r == MAX_REPEAT + 2 && (j == n || d[j] != v) => i + MAX_REPEAT - 1,
                r => i + r.min(MAX_REPEAT),
            };
            out.push((j - i + 125) as u8);
            out.push(v);
            i = j;
        } else {
            let limit = (i + MAX_LITERAL).min(n);
            let j = next_triple(d, i + 1, limit);
            out.push((j - i - 1) as u8);
            out.extend_from_slice(&d[i..j]);
            i = j;
        }
    }
}

/// Appends the encoding of `input` to `out`.
pub fn encode_into(input: &[u8], out: &mut Vec<u8>) {
    out.reserve(input.len() + input.len().div_ceil(MAX_LITERAL));
    SCRATCH.with(|s| {
        let mut d = s.borrow_mut();
        delta_into(input, &mut d);
        encode_delta(&d, out);
        if d.capacity() > 64 << 20 {
            *d = Vec::new();
        }
    });
}

pub fn encode(input: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(input, &mut out);
    out
}

pub fn decode(input: &[u8], expected_len: usize) -> Result<Vec<u8>, CodecError> {
    let mut out: Vec<u8> = Vec::with_capacity(expected_len);
    let mut pos = 0;
    while pos < input.len() {
        let c = input[pos];
        pos += 1;
        if c < 128 {
            let len = c as usize + 1;
            let Some(lit) = input.get(pos..pos + len) else {
                return Err(CodecError::Corrupt("literal run overruns the input".into()));
            };
            if out.len() + len > expected_len {
                return Err(CodecError::Corrupt("decoded data exceeds the expected length".into()));
            }
            out.extend_from_slice(lit);
            pos += len;
        } else {
            let Some(&v) = input.get(pos) else {
                return Err(CodecError::Corrupt("repeat run without a value byte".into()));
            };
            let count = c as usize - 125;
            if out.len() + count > expected_len {
                return Err(CodecError::Corrupt("decoded data exceeds the expected length".into()));
            }
            out.resize(out.len() + count, v);
            pos += 1;
        }
    }
    if out.len() != expected_len {
        return Err(CodecError::Corrupt(format!(
            "decoded {} bytes, expected {}",
            out.len(),
            expected_len
        )));
    }
    for i in 1..out.len() {
        out[i] = out[i].wrapping_add(out[i - 1]);
    }
    Ok(out)
}
