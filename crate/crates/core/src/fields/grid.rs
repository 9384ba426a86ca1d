//! Regular texel grids with bilinear lookup.

use crate::autodiff::{kink, Scalar};
use crate::real::Real;

/// A `width × height` grid of `channels`-vectors, row major. Texel `(i, j)`
/// has its center at `((i + 0.5)/width, (j + 0.5)/height)` in `[0,1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<R> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<R>,
}

impl<R: Real> Grid<R> {
    pub fn filled(width: usize, height: usize, channels: usize, value: R) -> Self {
        Grid {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> R {
        self.data[(j * self.width + i) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: R) {
        self.data[(j * self.width + i) * self.channels + c] = v;
    }

    /// Texel-center coordinates in `[0,1]²`.
    pub fn texel_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            (i as f64 + 0.5) / self.width as f64,
            (j as f64 + 0.5) / self.height as f64,
        ]
    }

    pub fn cast<S: Real>(&self) -> Grid<S> {
        Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| S::lit(v.as_f64())).collect(),
        }
    }

    /// Bilinear interpolation at `x` with edge clamping; differentiable in
    /// `x` (the grid itself is constant).
    pub fn sample<S: Scalar<R>, const C: usize>(&self, x: [S; 2]) -> [S; C] {
        debug_assert_eq!(self.channels, C);
        let (i0, fx) = axis(x[0], self.width);
        let (j0, fy) = axis(x[1], self.height);
        kink::note(0x30, (i0 as u64) << 32 | j0 as u64);
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        std::array::from_fn(|c| {
            let v00 = self.at(i0, j0, c);
            let v10 = self.at(i1, j0, c);
            let v01 = self.at(i0, j1, c);
            let v11 = self.at(i1, j1, c);
            let top = fx * (v10 - v00) + v00;
            let bottom = fx * (v11 - v01) + v01;
            (bottom - top) * fy + top
        })
    }

    /// Plain bilinear lookup.
    pub fn sample_plain<const C: usize>(&self, x: [R; 2]) -> [R; C] {
        self.sample::<R, C>(x)
    }
}

/// Lower texel index and fractional offset along one axis.
#[inline]
fn axis<R: Real, S: Scalar<R>>(x: S, n: usize) -> (usize, S) {
    let u = (x * R::lit(n as f64) - R::lit(0.5)).clamp(R::zero(), R::lit((n - 1) as f64));
    if n == 1 {
        return (0, u * R::zero());
    }
    let i0 = (num_traits::Float::floor(u.value()).as_f64() as usize).min(n - 2);
    (i0, u - R::lit(i0 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Grid<f64> {
        let mut g = Grid::filled(4, 3, 1, 0.0);
        for j in 0..3 {
            for i in 0..4 {
                g.set(i, j, 0, (i + 10 * j) as f64);
            }
        }
        g
    }

    #[test]
    fn texel_centers_reproduce_values() {
        let g = ramp();
        for j in 0..3 {
            for i in 0..4 {
                let c = g.texel_center(i, j);
                assert_eq!(g.sample_plain::<1>(c)[0], g.at(i, j, 0));
            }
        }
    }

    #[test]
    fn midpoint_and_clamp() {
        let mut g = Grid::filled(2, 1, 1, 0.0);
        g.set(1, 0, 0, 1.0);
        assert_eq!(g.sample_plain::<1>([0.5, 0.5])[0], 0.5);
        let g = ramp();
        assert_eq!(
            g.sample_plain::<1>([-0.1, 0.5]),
            g.sample_plain::<1>([0.0, 0.5])
        );
        assert_eq!(g.sample_plain::<1>([1.3, 1.2]), [g.at(3, 2, 0)]);
    }
}
