//! Deterministic, splittable random streams.
//!
//! A [`RandomStream`] is keyed by `(seed, stream_id)` and backed by the ChaCha
//! block function, which is counter based: the output at position `k` of a
//! stream is a pure function of the key, the stream id and `k`. Monte Carlo
//! replication `r` uses stream id `r`, so runs never share a sequence no matter
//! how they are scheduled.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    splits: u64,
    rng: ChaCha12Rng,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            splits: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Normal draw; `sd == 0` returns `mean` exactly.
    pub fn gaussian(&mut self, mean: f64, sd: f64) -> f64 {
        debug_assert!(sd >= 0.0, "negative standard deviation");
        if sd == 0.0 {
            return mean;
        }
        mean + sd * self.standard_normal()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Derives `k` child streams.
    ///
    /// Children are keyed from the parent's `(seed, stream_id)` and a split
    /// counter, so splitting never consumes parent output and two splits of
    /// identical parents give identical children.
    pub fn split(&mut self, k: usize) -> Vec<RandomStream> {
        assert!(k >= 1, "split requires k >= 1");
        let key = mix64(self.seed ^ mix64(self.stream_id ^ mix64(self.splits.wrapping_add(1))));
        self.splits += 1;
        (0..k as u64).map(|i| RandomStream::new(key, i)).collect()
    }

    /// Single child stream; shorthand for `split(1)`.
    pub fn fork(&mut self) -> RandomStream {
        self.split(1).pop().expect("split(1) yields one stream")
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_sequence() {
        let mut a = RandomStream::new(1, 0);
        let mut b = RandomStream::new(1, 0);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn distinct_stream_ids_differ() {
        let mut a = RandomStream::new(1, 0);
        let mut b = RandomStream::new(1, 1);
        assert_ne!(a.uniform(), b.uniform());
    }

    #[test]
    fn uniform_mean_and_ks() {
        let mut s = RandomStream::new(7, 3);
        let n = 1_000_000;
        let mut xs: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        // sd of the mean is (1/12)^0.5 / 1000 ~ 2.9e-4
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks <= 0.002, "ks {ks}");
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn gaussian_degenerate_and_moments() {
        let mut s = RandomStream::new(11, 0);
        assert_eq!(s.gaussian(3.0, 0.0), 3.0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| s.gaussian(0.0, 1.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn gaussian_deterministic() {
        let mut a = RandomStream::new(5, 9);
        let mut b = RandomStream::new(5, 9);
        for _ in 0..50 {
            assert_eq!(a.gaussian(1.0, 2.0).to_bits(), b.gaussian(1.0, 2.0).to_bits());
        }
    }

    #[test]
    fn split_children_distinct_and_reproducible() {
        let mut p1 = RandomStream::new(42, 0);
        let mut p2 = RandomStream::new(42, 0);
        let mut c1 = p1.split(2);
        let mut c2 = p2.split(2);
        let a0 = c1[0].uniform();
        let a1 = c1[1].uniform();
        assert_ne!(a0, a1);
        assert_eq!(a0, c2[0].uniform());
        assert_eq!(a1, c2[1].uniform());
        // a second split gives fresh children
        let mut again = p1.split(2);
        assert_ne!(again[0].uniform(), RandomStream::new(42, 0).split(2)[0].uniform());
    }

    #[test]
    fn split_does_not_perturb_parent() {
        let mut a = RandomStream::new(3, 1);
        let mut b = RandomStream::new(3, 1);
        let _ = a.split(4);
        assert_eq!(a.uniform(), b.uniform());
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        let mut p = RandomStream::new(99, 0);
        let mut kids = p.split(2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| kids[0].uniform()).collect();
        let ys: Vec<f64> = (0..n).map(|_| kids[1].uniform()).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx).powi(2);
            syy += (y - my).powi(2);
        }
        let rho = sxy / (sxx * syy).sqrt();
        assert!(rho.abs() <= 0.01, "rho {rho}");
    }
}
