//! Counter-based deterministic randomness.
//!
//! Generators here are pure functions of `(seed, stream, counter)`, so
//! per-pixel and per-beam draws are identical no matter how work is split
//! across threads. Sequential contexts (batch sampling, weight init) use
//! seeded ChaCha instead.

/// SplitMix64 finalizer; full-period bijection on u64.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless counter RNG: every draw is addressed, never sequenced.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derive a sub-stream, e.g. one per frame or per view.
    pub fn substream(&self, id: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix(self.stream ^ splitmix(id.wrapping_add(0x51ed_270b))),
        }
    }

    pub fn bits(&self, counter: u64) -> u64 {
        splitmix(self.seed ^ splitmix(self.stream.wrapping_add(splitmix(counter))))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&self, counter: u64) -> f64 {
        // 53 top bits -> [0,1) with full double precision
        (self.bits(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; two uniforms per draw.
    pub fn gaussian(&self, counter: u64) -> f64 {
        let u1 = self.uniform(counter.wrapping_mul(2));
        let u2 = self.uniform(counter.wrapping_mul(2).wrapping_add(1));
        // guard log(0)
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }
}
