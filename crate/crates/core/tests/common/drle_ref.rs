//! Byte-at-a-time DRLE written from the format description, used as an
//! oracle for the optimized codec.

pub fn encode(b: &[u8]) -> Vec<u8> {
    let d: Vec<u8> = (0..b.len()).map(|i| if i == 0 { b[0] } else { b[i].wrapping_sub(b[i - 1]) }).collect();
    let triple = |i: usize| i + 2 < d.len() && d[i] == d[i + 1] && d[i] == d[i + 2];
    let mut out = Vec::new();
    let mut i = 0;
    while i < d.len() {
        if triple(i) {
            let mut r = 0;
            while i + r < d.len() && d[i + r] == d[i] {
                r += 1;
            }
            let take = if r == 132 { 129 } else { r.min(130) };
            out.push((take + 125) as u8);
            out.push(d[i]);
            i += take;
        } else {
            let start = i;
            i += 1;
            while i < d.len() && i - start < 128 && !triple(i) {
                i += 1;
            }
            out.push((i - start - 1) as u8);
            out.extend_from_slice(&d[start..i]);
        }
    }
    out
}

pub fn decode(e: &[u8], expected_len: usize) -> Option<Vec<u8>> {
    let mut d = Vec::new();
    let mut i = 0;
    while i < e.len() {
        let c = e[i] as usize;
        i += 1;
        if c < 128 {
            d.extend_from_slice(e.get(i..i + c + 1)?);
            i += c + 1;
        } else {
            let v = *e.get(i)?;
            d.extend(std::iter::repeat_n(v, c - 125));
            i += 1;
        }
    }
    if d.len() != expected_len {
        return None;
    }
    let mut acc = 0u8;
    Some(d.into_iter().map(|x| { acc = acc.wrapping_add(x); acc }).collect())
}
