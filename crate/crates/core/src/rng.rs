//! Counter-based random number generation (Philox 4x64, 10 rounds).
//!
//! Every random draw in the laboratory is addressed by `(seed, stream,
//! counter)`. Streams never share state, so particles can be simulated in
//! parallel, in any order, and still produce bit-identical results. The
//! generator name recorded in run manifests is [`ALGORITHM`].

/// Generator identifier written into run manifests.
pub const ALGORITHM: &str = "philox4x64-10";

const PHILOX_M0: u64 = 0xD2E7_470E_E14C_6C93;
const PHILOX_M1: u64 = 0xCA5A_8263_9512_1157;
const PHILOX_W0: u64 = 0x9E37_79B9_7F4A_7C15;
const PHILOX_W1: u64 = 0xBB67_AE85_84CA_A73B;

/// Stream-id namespaces. A stream is `(domain << 32) | index`, which keeps
/// draws for different purposes (initial sampling, trajectory noise,
/// subsampling, ...) disjoint for indices below 2^32.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SUBSAMPLE: u64 = 3;
    pub const SAMPLING_CHECK: u64 = 4;
    pub const RESAMPLE: u64 = 5;
}

/// Build a stream id from a namespace and an index.
#[inline]
pub fn stream_id(domain: u64, index: u64) -> u64 {
    (domain << 32) | (index & 0xFFFF_FFFF)
}

#[inline]
fn mulhilo(a: u64, b: u64) -> (u64, u64) {
    let p = (a as u128) * (b as u128);
    ((p >> 64) as u64, p as u64)
}

#[inline]
fn round(ctr: [u64; 4], key: [u64; 2]) -> [u64; 4] {
    let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
    let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
    [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0]
}

/// One Philox 4x64-10 block: four 64-bit words for a given counter and key.
#[inline]
pub fn philox4x64(mut ctr: [u64; 4], mut key: [u64; 2]) -> [u64; 4] {
    ctr = round(ctr, key);
    for _ in 1..10 {
        key[0] = key[0].wrapping_add(PHILOX_W0);
        key[1] = key[1].wrapping_add(PHILOX_W1);
        ctr = round(ctr, key);
    }
    ctr
}

#[inline]
fn u64_to_unit(x: u64) -> f64 {
    // 53 significant bits, uniform on [0, 1).
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn u64_to_unit_open(x: u64) -> f64 {
    // Uniform on (0, 1], safe to feed into ln().
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Four standard normal draws addressed by `(seed, stream, counter)`.
///
/// Uses one Philox block and two Box-Muller pairs; the draw is a pure
/// function of its address.
#[inline]
pub fn normals_at(seed: u64, stream: u64, counter: u64) -> [f64; 4] {
    let words = philox4x64([counter, 0, 0, 0], [seed, stream]);
    let (z0, z1) = box_muller(u64_to_unit_open(words[0]), u64_to_unit(words[1]));
    let (z2, z3) = box_muller(u64_to_unit_open(words[2]), u64_to_unit(words[3]));
    [z0, z1, z2, z3]
}

#[inline]
fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Buffered standard-normal stream over one Philox stream.
///
/// Box-Muller pairs are produced lazily, one spare value is carried over,
/// so consecutive draws cost half a pair each.
#[derive(Clone, Debug)]
pub struct NormalStream {
    words: PhiloxStream,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        NormalStream { words: PhiloxStream::new(seed, stream), spare: None }
    }

    #[inline]
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = u64_to_unit_open(self.words.next_u64());
        let u2 = u64_to_unit(self.words.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// Sequential view over one Philox stream.
///
/// Produces the same 64-bit word sequence as a counter-mode block cipher:
/// block `n` yields words `4n..4n+4`.
#[derive(Clone, Debug)]
pub struct PhiloxStream {
    key: [u64; 2],
    counter: [u64; 4],
    buf: [u64; 4],
    pos: usize,
}

impl PhiloxStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        PhiloxStream {
            key: [seed, stream],
            counter: [0, 0, 0, 0],
            buf: [0; 4],
            pos: 4,
        }
    }

    #[inline]
    fn refill(&mut self) {
        self.buf = philox4x64(self.counter, self.key);
        // 256-bit little-endian counter increment.
        for w in self.counter.iter_mut() {
            *w = w.wrapping_add(1);
            if *w != 0 {
                break;
            }
        }
        self.pos = 0;
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        if self.pos == 4 {
            self.refill();
        }
        let v = self.buf[self.pos];
        self.pos += 1;
        v
    }

    /// Uniform draw on [0, 1).
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        u64_to_unit(self.next_u64())
    }

    /// Standard normal draw (Box-Muller; consumes two words per pair).
    pub fn next_normal(&mut self) -> f64 {
        let (z, _) = box_muller(u64_to_unit_open(self.next_u64()), u64_to_unit(self.next_u64()));
        z
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let v = (self.next_unit() * n as f64) as usize;
        v.min(n - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference outputs generated with an independent Philox 4x64-10
    // implementation (numpy.random.Philox raw stream).
    #[test]
    fn matches_reference_stream_zero_key() {
        let mut s = PhiloxStream::new(0, 0);
        let expected: [u64; 8] = [
            0x16554d9eca36314c,
            0xdb20fe9d672d0fdc,
            0xd7e772cee186176b,
            0x7e68b68aec7ba23b,
            0x02f4ba6408e4d89b,
            0x3dd62b0b9ca8c5b2,
            0x1c8667a55d902e79,
            0x907d7a052fd5b4dc,
        ];
        for e in expected {
            assert_eq!(s.next_u64(), e);
        }
    }

    #[test]
    fn matches_reference_stream_nontrivial_key() {
        let mut s = PhiloxStream::new(42, 7);
        let expected: [u64; 4] = [
            0x2fd1bc0d2c8697bb,
            0x8ee17f67a549bba6,
            0x1bdce1f847e7df47,
            0xe123b6bbe4e89f03,
        ];
        for e in expected {
            assert_eq!(s.next_u64(), e);
        }
    }

    #[test]
    fn matches_reference_block_with_counter() {
        let words = philox4x64(
            [1, 2, 3, 4],
            [0x0123456789abcdef, 0x0fedcba987654321],
        );
        assert_eq!(
            words,
            [
                0xccad7a7646d2965f,
                0x04224aebd066017a,
                0x58aafb9adbf9a811,
                0xbf339b3cee14e5ac
            ]
        );
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut s = PhiloxStream::new(9, stream_id(domain::NOISE, 3));
            (0..16).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = PhiloxStream::new(9, stream_id(domain::NOISE, 3));
            (0..16).map(|_| s.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut s = PhiloxStream::new(9, stream_id(domain::NOISE, 4));
            (0..16).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normals_have_sane_moments() {
        let n = 200_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let z = normals_at(1234, stream_id(domain::NOISE, (i / 4) as u64), 0)[i % 4];
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn normals_at_is_stateless() {
        let a = normals_at(5, 6, 7);
        let b = normals_at(5, 6, 7);
        assert_eq!(a, b);
        assert!(a.iter().all(|z| z.is_finite()));
    }
}
