//! Multiresolution hash encoding with linear interpolation.
//!
//! Level `l` has grid scale `base·s^l`; a point `x ∈ [0,1]^d` falls into the
//! cell `floor(x·scale)` and its feature vector is the multilinear blend of
//! the cell's `2^d` corner entries. Levels whose vertex grid fits into the
//! table are indexed densely, finer levels through the XOR-of-primes spatial
//! hash.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::kink;
use crate::real::Real;

const PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashConfig {
    pub levels: usize,
    pub features: usize,
    pub per_level_scale: f64,
    pub log2_table_size: u32,
    pub base_resolution: f64,
    pub input_dim: usize,
}

impl HashConfig {
    /// 16 levels × 4 features, scale 1.61, 2^17 entries, base resolution 4.
    pub fn standard(input_dim: usize) -> Self {
        HashConfig {
            levels: 16,
            features: 4,
            per_level_scale: 1.61,
            log2_table_size: 17,
            base_resolution: 4.0,
            input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub scale: f64,
    /// Vertices per axis.
    pub res: u64,
    /// First entry of this level in the table.
    pub offset: usize,
    /// Entries in this level.
    pub size: usize,
    pub dense: bool,
}

/// Per-level table layout derived from a [`HashConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoding {
    pub config: HashConfig,
    pub levels: Vec<Level>,
    /// Total entries; the parameter array holds `entries × features` values.
    pub entries: usize,
}

impl HashEncoding {
    pub fn new(config: HashConfig) -> Self {
        assert!(
            (1..=4).contains(&config.input_dim),
            "hash encoding supports 1 to 4 inputs"
        );
        let cap = 1usize << config.log2_table_size;
        let mut levels = Vec::with_capacity(config.levels);
        let mut offset = 0;
        for l in 0..config.levels {
            let scale = config.base_resolution * config.per_level_scale.powi(l as i32);
            let res = scale.ceil() as u64 + 1;
            let full = (res as f64).powi(config.input_dim as i32);
            let dense = full <= cap as f64;
            let size = if dense { full as usize } else { cap };
            levels.push(Level {
                scale,
                res,
                offset,
                size,
                dense,
            });
            offset += size;
        }
        HashEncoding {
            config,
            levels,
            entries: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries * self.config.features
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Levels that contribute at least one unmasked feature.
    fn active_levels(&self, active_dims: usize) -> usize {
        active_dims
            .div_ceil(self.config.features)
            .min(self.config.levels)
    }

    /// Corner entries and interpolation data of one point on one level.
    ///
    /// Corner `k` takes the upper vertex along axis `j` when bit `j` of `k`
    /// is set; entries and weights are built one axis at a time.
    #[inline]
    fn locate<R: Real>(&self, level: &Level, x: &[R]) -> Cell<R> {
        let d = self.config.input_dim;
        let mut cell = [0u64; 4];
        let mut frac = [R::zero(); 4];
        let mut idx = [0u64; 16];
        let mut w = [R::one(); 16];
        let scale = R::lit(level.scale);
        let mut stride = 1u64;
        for j in 0..d {
            let xj = if x[j] < R::zero() {
                R::zero()
            } else if x[j] > R::one() {
                R::one()
            } else {
                x[j]
            };
            let pos = xj * scale;
            let c = (num_traits::Float::floor(pos).as_f64() as u64).min(level.res - 2);
            cell[j] = c;
            let fr = pos - R::lit(c as f64);
            frac[j] = fr;
            let (lo, hi) = if level.dense {
                (c * stride, (c + 1) * stride)
            } else {
                let p = PRIMES[j] as u64;
                (
                    (c as u32 as u64).wrapping_mul(p) as u32 as u64,
                    ((c + 1) as u32 as u64).wrapping_mul(p) as u32 as u64,
                )
            };
            stride *= level.res;
            let half = 1usize << j;
            let wl = R::one() - fr;
            for k in 0..half {
                let (i0, w0) = (idx[k], w[k]);
                if level.dense {
                    idx[k] = i0 + lo;
                    idx[k + half] = i0 + hi;
                } else {
                    idx[k] = i0 ^ lo;
                    idx[k + half] = i0 ^ hi;
                }
                w[k] = w0 * wl;
                w[k + half] = w0 * fr;
            }
        }
        let mask = if level.dense {
            u64::MAX
        } else {
            level.size as u64 - 1
        };
        let idx = idx.map(|i| (level.offset as u64 + (i & mask)) as u32);
        Cell { idx, w, frac, cell }
    }

    /// Encode `n` points (`inputs` is `n × input_dim`) into `out`
    /// (`n × output_dim`). Features beyond `active_dims` are zero.
    pub fn encode<R: Real>(&self, table: &[R], inputs: &[R], active_dims: usize, out: &mut [R]) {
        let d = self.config.input_dim;
        let f = self.config.features;
        let e = self.output_dim();
        let n = inputs.len() / d;
        let levels = self.active_levels(active_dims);
        let corners = 1usize << d;
        let trace = kink::enabled();
        out[..n * e].iter_mut().for_each(|v| *v = R::zero());
        for p in 0..n {
            let x = &inputs[p * d..(p + 1) * d];
            for (l, level) in self.levels[..levels].iter().enumerate() {
                let c = self.locate(level, x);
                if trace {
                    note_cell(l, &c.cell, x);
                }
                let o = &mut out[p * e + l * f..p * e + (l + 1) * f];
                for k in 0..corners {
                    let base = c.idx[k] as usize * f;
                    for (ft, ov) in o.iter_mut().enumerate() {
                        *ov += c.w[k] * table[base + ft];
                    }
                }
            }
            for v in out[p * e + active_dims.min(e)..(p + 1) * e].iter_mut() {
                *v = R::zero();
            }
        }
    }

    /// Reverse pass of [`HashEncoding::encode`]: adds input adjoints into
    /// `d_in` and appends `(element index, gradient)` pairs for the table.
    pub fn backward<R: Real>(
        &self,
        table: &[R],
        inputs: &[R],
        active_dims: usize,
        d_out: &[R],
        d_in: &mut [R],
        table_grad: Option<&mut Vec<(u32, R)>>,
    ) {
        let d = self.config.input_dim;
        let f = self.config.features;
        let e = self.output_dim();
        let n = inputs.len() / d;
        let levels = self.active_levels(active_dims);
        let corners = 1usize << d;
        let mut table_grad = table_grad;
        for p in 0..n {
            let x = &inputs[p * d..(p + 1) * d];
            let clamped: [bool; 4] =
                std::array::from_fn(|j| j < d && (x[j] < R::zero() || x[j] > R::one()));
            for (l, level) in self.levels[..levels].iter().enumerate() {
                let lo = l * f;
                let hi = ((l + 1) * f).min(active_dims);
                if hi <= lo {
                    break;
                }
                let g = &d_out[p * e + lo..p * e + hi];
                if g.iter().all(|v| *v == R::zero()) {
                    continue;
                }
                let c = self.locate(level, x);
                let mut dw = [R::zero(); 16];
                for k in 0..corners {
                    let base = c.idx[k] as usize * f;
                    // d(out)/d(weight) · upstream
                    for (ft, gv) in g.iter().enumerate() {
                        dw[k] += *gv * table[base + ft];
                    }
                    if let Some(tg) = table_grad.as_deref_mut() {
                        for (ft, gv) in g.iter().enumerate() {
                            tg.push(((base + ft) as u32, c.w[k] * *gv));
                        }
                    }
                }
                let scale = R::lit(level.scale);
                for j in 0..d {
                    if clamped[j] {
                        continue;
                    }
                    // Corner weights differentiated along axis j.
                    let mut dwj = [R::one(); 16];
                    for m in 0..d {
                        let half = 1usize << m;
                        let (lo, hi) = if m == j {
                            (-scale, scale)
                        } else {
                            (R::one() - c.frac[m], c.frac[m])
                        };
                        for k in 0..half {
                            let v = dwj[k];
                            dwj[k] = v * lo;
                            dwj[k + half] = v * hi;
                        }
                    }
                    let mut acc = R::zero();
                    for k in 0..corners {
                        acc += dwj[k] * dw[k];
                    }
                    d_in[p * d + j] += acc;
                }
            }
        }
    }

    /// Uniform `±1e-4` initialization. Tables are large, so the values
    /// come from a fast generator seeded by `rng`.
    pub fn init<R: Real>(&self, rng: &mut impl rand::Rng) -> Vec<R> {
        let mut fast = Xoshiro256PlusPlus::from_rng(rng);
        (0..self.param_count())
            .map(|_| R::lit(fast.random_range(-1e-4..1e-4)))
            .collect()
    }
}

struct Cell<R> {
    idx: [u32; 16],
    w: [R; 16],
    frac: [R; 4],
    cell: [u64; 4],
}

fn note_cell<R: Real>(level: usize, cell: &[u64; 4], x: &[R]) {
    let mut h = 0u64;
    for (j, c) in cell.iter().enumerate() {
        h = h.wrapping_mul(1_000_003).wrapping_add(*c);
        if j < x.len() {
            let region = (x[j] < R::zero()) as u64 + 2 * (x[j] > R::one()) as u64;
            h = h.wrapping_mul(7).wrapping_add(region);
        }
    }
    kink::note(0x40 + level as u64, h);
}

/// Keep the first `ceil(τ·E)` features (at least one level) and zero the
/// rest, coarse levels first.
pub fn active_dims(tau: f64, dims: usize, features: usize) -> usize {
    ((tau.clamp(0.0, 1.0) * dims as f64).ceil() as usize)
        .max(features)
        .min(dims)
}

pub fn apply_sparsity<R: Real>(features: &mut [R], tau: f64, per_level: usize) {
    let keep = active_dims(tau, features.len(), per_level);
    features[keep..].iter_mut().for_each(|v| *v = R::zero());
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn standard_layout() {
        let enc = HashEncoding::new(HashConfig::standard(2));
        assert_eq!(enc.output_dim(), 64);
        assert_eq!(enc.levels[0].res, 5);
        assert!(enc.levels[0].dense);
        assert!(!enc.levels[15].dense);
        assert_eq!(enc.levels[15].size, 1 << 17);
    }

    #[test]
    fn zero_table_gives_zero_features() {
        let enc = HashEncoding::new(HashConfig::standard(2));
        let table = vec![0.0f64; enc.param_count()];
        let mut out = vec![1.0; 64];
        enc.encode(&table, &[0.3, 0.7], 64, &mut out);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn corner_point_reads_the_corner_entry() {
        let enc = HashEncoding::new(HashConfig::standard(2));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let table: Vec<f64> = enc.init(&mut rng);
        // Vertex (1, 2) of the 5×5 base level sits at x = (0.25, 0.5).
        let mut out = vec![0.0; 64];
        enc.encode(&table, &[0.25, 0.5], 64, &mut out);
        let entry = 1 + 2 * 5;
        for f in 0..4 {
            assert_eq!(out[f], table[entry * 4 + f]);
        }
    }

    #[test]
    fn sparsity_examples() {
        let mut v = vec![1.0f64; 64];
        apply_sparsity(&mut v, 1.0, 4);
        assert!(v.iter().all(|x| *x == 1.0));
        let mut v = vec![1.0f64; 64];
        apply_sparsity(&mut v, 0.5, 4);
        assert!(v[..32].iter().all(|x| *x == 1.0) && v[32..].iter().all(|x| *x == 0.0));
        let mut v = vec![1.0f64; 64];
        apply_sparsity(&mut v, 0.0, 4);
        assert_eq!(v.iter().filter(|x| **x == 1.0).count(), 4);
    }
}
