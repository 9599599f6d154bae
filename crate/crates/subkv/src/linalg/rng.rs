use super::Matrix;

/// Deterministic 64-bit PRNG used everywhere randomness is needed.
///
/// Generation rule (fixed so that calibration data is reproducible across
/// implementations and platforms):
///
/// * State: four u64 words seeded by running splitmix64 from the user seed
///   (`z += 0x9e3779b97f4a7c15; z = (z ^ z>>30) * 0xbf58476d1ce4e5b9;
///   z = (z ^ z>>27) * 0x94d049bb133111eb; z ^= z>>31`), four times.
/// * Output: xoshiro256++ — `rotl(s0 + s3, 23) + s0`, then the linear
///   state transition with `t = s1 << 17`.
/// * Uniform doubles take the top 53 bits: `(x >> 11) * 2^-53`, in [0, 1).
/// * Normal draws use the Marsaglia polar method (sqrt/ln only, no
///   trigonometric calls), consuming uniforms in pairs until accepted;
///   the spare draw is cached.
#[derive(Debug, Clone)]
pub struct RngState {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        RngState {
            s,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform double in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw, Marsaglia polar method.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * factor);
                return u * factor;
            }
        }
    }
}

/// Matrix with i.i.d. standard normal entries, filled in row-major order.
pub fn random_gaussian(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.next_normal();
    }
    m
}

/// Seed derivation for independent sub-streams, so the result of a training
/// cell does not depend on the order cells are visited in.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0xa076_1d64_78bd_642f;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9e3779b97f4a7c15);
        out ^= splitmix64(&mut state);
    }
    out
}
