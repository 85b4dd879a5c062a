//! Seedable, splittable, counter-based pseudo-random generator.
//!
//! The generator is a pure function of `(key, counter)`:
//!
//! ```text
//! out_i = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer
//! (`z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!  z *= 0x94D049BB133111EB; z ^= z >> 31`).
//! Splitting derives a child key as `mix64(key ^ mix64(tag + GOLDEN))` with a
//! fresh counter, so independent streams never share outputs.
//! Uniform doubles take the top 53 bits; normals use Box-Muller.

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58476D1CE4E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    z
}

#[derive(Debug, Clone)]
pub struct Prng {
    key: u64,
    counter: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng {
            key: mix64(seed.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    /// Derive an independent child stream identified by `tag`.
    pub fn split(&self, tag: u64) -> Prng {
        Prng {
            key: mix64(self.key ^ mix64(tag.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Derive an independent child stream identified by a name (FNV-1a hash).
    pub fn split_str(&self, name: &str) -> Prng {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        self.split(h)
    }

    /// Snapshot of the `(key, counter)` state, e.g. for checkpointed resume.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    /// Rebuild a generator from a [`Prng::state`] snapshot.
    pub fn from_state(key: u64, counter: u64) -> Self {
        Prng { key, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize, sigma: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * sigma).collect()
    }
}
