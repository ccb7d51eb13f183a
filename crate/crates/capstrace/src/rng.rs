//! Deterministic random numbers.
//!
//! Every stochastic choice in the crate (weight init, shuffles, noise, dropout
//! masks) draws from [`SeededRng`], a SplitMix64 generator.  SplitMix64 is pure
//! 64-bit integer arithmetic, so a given seed yields the same stream on every
//! platform, build, and process — the property the reproducibility tests pin.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer from SplitMix64; also used to derive child seeds.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream.  Cheap to construct; state is a single u64.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    /// Independent stream keyed by `(seed, salt)`.  Used for per-item dropout
    /// masks so parallel evaluation order cannot change the draws.
    pub fn derived(seed: u64, salt: u64) -> Self {
        SeededRng::new(seed ^ mix64(salt.wrapping_add(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n).  Modulo reduction: the tiny bias is irrelevant
    /// here, bit-for-bit determinism is not.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn golden_sequence_seed_42() {
        // Frozen first draws for seed 42; a change here means the generator
        // no longer matches the published SplitMix64 and every artifact in
        // the wild would silently disagree.
        let mut r = SeededRng::new(42);
        let got: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                13679457532755275413,
                2949826092126892291,
                5139283748462763858,
                6349198060258255764,
            ]
        );
    }

    #[test]
    fn floats_are_in_unit_interval() {
        let mut r = SeededRng::new(7);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn derived_streams_differ_from_parent_and_each_other() {
        let mut base = SeededRng::new(9);
        let mut d0 = SeededRng::derived(9, 0);
        let mut d1 = SeededRng::derived(9, 1);
        let (a, b, c) = (base.next_u64(), d0.next_u64(), d1.next_u64());
        assert_ne!(a, b);
        assert_ne!(b, c);
        assert_ne!(a, c);
    }

    #[test]
    fn shuffle_is_deterministic() {
        let mut r1 = SeededRng::new(3);
        let mut r2 = SeededRng::new(3);
        let mut v1: Vec<u32> = (0..50).collect();
        let mut v2: Vec<u32> = (0..50).collect();
        r1.shuffle(&mut v1);
        r2.shuffle(&mut v2);
        assert_eq!(v1, v2);
        let mut sorted = v1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<u32>>());
    }
}
