use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) type Rng = ChaCha8Rng;

/// SplitMix64 finalizer; derives independent stream seeds from a base seed.
pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng(seed: u64, salt: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salt))
}

/// Stream salts, one per consumer, so that seeds never alias across stages.
pub(crate) mod salt {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PROTOTYPE: u64 = 3;
    pub const JITTER: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const TRIGGER: u64 = 6;
    pub const FINETUNE: u64 = 7;
    pub const FISHER: u64 = 8;
    pub const QUERIES: u64 = 9;
    pub const NOISE: u64 = 10;
    pub const LIPSCHITZ: u64 = 11;
    pub const DIRECTIONS: u64 = 12;
    pub const OOD: u64 = 13;
    pub const CERTIFIED: u64 = 14;
    pub const BATCH: u64 = 15;
}

pub(crate) fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Sample standard deviation over all entries (population form).
pub(crate) fn pixel_std(x: &[f32]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Formats with six significant digits in plain decimal notation.
pub(crate) fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.starts_with("-0") && s.trim_start_matches(['-', '0', '.']).is_empty() {
        return "0".into();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.95), "0.950000");
        assert_eq!(sig6(2.5), "2.50000");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(0.0012345678), "0.00123457");
    }

    #[test]
    fn mix_separates_streams() {
        assert_ne!(mix(0, 1), mix(0, 2));
        assert_ne!(mix(1, 1), mix(0, 1));
        assert_eq!(mix(7, 3), mix(7, 3));
    }
}
