//! Codec inputs shared by the property tests and the acceptance run.

use proptest::prelude::*;

/// Lengths spread over 0..=10⁶ on a log scale, with raw byte patterns that
/// range from pure noise to long runs and ramps.
pub fn payload() -> impl Strategy<Value = Vec<u8>> {
    (0u32..=20, any::<u64>(), 0u8..5).prop_map(|(bits, seed, mode)| {
        let mut x = seed | 1;
        let max = (1usize << bits).min(1_000_000);
        let len = (x as usize) % (max + 1);
        (0..len)
            .map(|i| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                match mode {
                    0 => x as u8,
                    1 => (i / (1 + (seed as usize % 300))) as u8,
                    2 => (i as u8).wrapping_mul(3),
                    3 => if x % 50 == 0 { x as u8 } else { 7 },
                    _ => (x % 3) as u8,
                }
            })
            .collect()
    })
}

/// Input whose delta stream has no three equal consecutive bytes.
pub fn runless(seed: u64, len: usize) -> Vec<u8> {
    let mut x = seed | 1;
    let mut d: Vec<u8> = Vec::with_capacity(len);
    for i in 0..len {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        let mut v = x as u8;
        if i >= 2 && d[i - 1] == d[i - 2] && v == d[i - 1] {
            v = v.wrapping_add(1);
        }
        d.push(v);
    }
    let mut acc = 0u8;
    d.into_iter().map(|v| { acc = acc.wrapping_add(v); acc }).collect()
}
