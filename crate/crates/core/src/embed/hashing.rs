//! Deterministic bag-of-tokens features.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing into `dim` buckets followed by L2 normalization.
///
/// Each token is hashed with 64-bit FNV-1a; the bucket is `h mod dim` and the
/// sign is `+1` when bit 63 is clear, `-1` otherwise. Text without tokens
/// maps to the zero vector.
pub fn hashing_embed(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 8, "hashing dimension must be at least 8");
    let mut out = vec![0.0; dim];
    for token in tokenize(text) {
        let h = fnv1a64(token.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        out[(h % dim as u64) as usize] += sign;
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
