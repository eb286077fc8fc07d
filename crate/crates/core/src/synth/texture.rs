//! Band-limited value noise evaluated analytically at real coordinates.

/// SplitMix64 finalizer; used to hash lattice coordinates.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn lattice_value(seed: u64, i: i64, j: i64) -> f64 {
    let h = mix64(seed ^ mix64((i as u64).wrapping_mul(0x1656_67B1) ^ (j as u64).wrapping_mul(0x27D4_EB2F_1656_67C5)));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Single octave of value noise in `[-1, 1]` with lattice spacing `period`.
fn value_noise(seed: u64, x: f64, y: f64, period: f64) -> f64 {
    let u = x / period;
    let v = y / period;
    let (i, j) = (u.floor(), v.floor());
    let (fx, fy) = (fade(u - i), fade(v - j));
    let (i, j) = (i as i64, j as i64);
    let a = lattice_value(seed, i, j);
    let b = lattice_value(seed, i + 1, j);
    let c = lattice_value(seed, i, j + 1);
    let d = lattice_value(seed, i + 1, j + 1);
    let top = a + (b - a) * fx;
    let bot = c + (d - c) * fx;
    top + (bot - top) * fy
}

const OCTAVES: [(f64, f64); 4] = [(48.0, 0.42), (24.0, 0.30), (12.0, 0.20), (6.0, 0.12)];

/// Procedural RGB texture; channel values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseTexture {
    pub seed: u64,
}

impl NoiseTexture {
    fn channel(&self, salt: u64, x: f64, y: f64) -> f64 {
        let norm: f64 = OCTAVES.iter().map(|o| o.1).sum();
        let mut s = 0.0;
        for (k, (period, amp)) in OCTAVES.iter().enumerate() {
            s += amp * value_noise(mix64(self.seed ^ salt ^ (k as u64 + 1)), x, y, *period);
        }
        (0.5 + 0.5 * s / norm * 1.6).clamp(0.0, 1.0)
    }

    pub fn rgb(&self, x: f64, y: f64) -> [f64; 3] {
        let base = self.channel(0x51, x, y);
        let g = self.channel(0x77, x, y);
        let b = self.channel(0x93, x, y);
        [base, 0.7 * base + 0.3 * g, 0.55 * base + 0.45 * b]
    }
}
