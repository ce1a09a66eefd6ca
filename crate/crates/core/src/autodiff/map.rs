//! Fixed sparse linear maps over image planes.
//!
//! Upsampling, average pooling, flips and rotations with a frozen angle are
//! all linear in the pixels, so each is stored as a list of weighted taps.
//! The tape applies a map (or its transpose) to every plane of a tensor,
//! which makes the adjoint, and therefore any order of derivative, exact.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub out: u32,
    pub inp: u32,
    pub weight: f64,
}

/// One plane-to-plane linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    pub(crate) taps: Vec<Tap>,
}

impl SparseMap {
    fn from_taps(mut taps: Vec<Tap>) -> Self {
        taps.retain(|t| t.weight != 0.0);
        SparseMap { taps }
    }
}

/// A family of plane maps sharing input and output plane shapes.
///
/// A tensor whose trailing dims equal `in_plane` is viewed as a stack of
/// planes; plane `p` uses `maps[(p / group) % maps.len()]`. With one map
/// every plane is transformed identically; with one map per sample and
/// `group` equal to the channel count each sample gets its own transform.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    pub(crate) in_plane: [usize; 2],
    pub(crate) out_plane: [usize; 2],
    pub(crate) maps: Vec<SparseMap>,
    pub(crate) group: usize,
}

impl MapSet {
    pub fn shared(in_plane: [usize; 2], out_plane: [usize; 2], map: SparseMap) -> Self {
        MapSet {
            in_plane,
            out_plane,
            maps: vec![map],
            group: 1,
        }
    }

    /// One map per sample, each applied to `channels` consecutive planes.
    pub fn per_sample(plane: [usize; 2], maps: Vec<SparseMap>, channels: usize) -> Self {
        MapSet {
            in_plane: plane,
            out_plane: plane,
            maps,
            group: channels.max(1),
        }
    }

    pub fn in_plane(&self) -> [usize; 2] {
        self.in_plane
    }

    pub fn out_plane(&self) -> [usize; 2] {
        self.out_plane
    }

    /// Applies the maps to `planes` consecutive planes of `x`.
    pub(crate) fn apply(&self, x: &[f64], planes: usize, transpose: bool) -> Vec<f64> {
        let in_len = self.in_plane[0] * self.in_plane[1];
        let out_len = self.out_plane[0] * self.out_plane[1];
        let (src_len, dst_len) = if transpose {
            (out_len, in_len)
        } else {
            (in_len, out_len)
        };
        let mut y = vec![0.0; planes * dst_len];
        for p in 0..planes {
            let map = &self.maps[(p / self.group) % self.maps.len()];
            let src = &x[p * src_len..(p + 1) * src_len];
            let dst = &mut y[p * dst_len..(p + 1) * dst_len];
            if transpose {
                for t in &map.taps {
                    dst[t.inp as usize] += t.weight * src[t.out as usize];
                }
            } else {
                for t in &map.taps {
                    dst[t.out as usize] += t.weight * src[t.inp as usize];
                }
            }
        }
        y
    }
}

/// Bilinear ×2 upsampling: output pixel `(i, j)` samples the input at
/// `((i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5)` with coordinates clamped to
/// the valid range.
pub fn upsample2x_map(h: usize, w: usize) -> SparseMap {
    let axis = |n: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = libm::floor(pos) as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    let (oh, ow) = (2 * h, 2 * w);
    let mut taps = Vec::with_capacity(oh * ow * 4);
    for i in 0..oh {
        let (y0, y1, wy) = axis(h, i);
        for j in 0..ow {
            let (x0, x1, wx) = axis(w, j);
            let out = (i * ow + j) as u32;
            for (y, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                for (x, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                    taps.push(Tap {
                        out,
                        inp: (y * w + x) as u32,
                        weight: fy * fx,
                    });
                }
            }
        }
    }
    SparseMap::from_taps(taps)
}

/// 2×2 average pooling with floor semantics for odd sizes.
pub fn avg_pool2x2_map(h: usize, w: usize) -> SparseMap {
    let (oh, ow) = (h / 2, w / 2);
    let mut taps = Vec::with_capacity(oh * ow * 4);
    for i in 0..oh {
        for j in 0..ow {
            for a in 0..2 {
                for b in 0..2 {
                    taps.push(Tap {
                        out: (i * ow + j) as u32,
                        inp: ((2 * i + a) * w + 2 * j + b) as u32,
                        weight: 0.25,
                    });
                }
            }
        }
    }
    SparseMap::from_taps(taps)
}

/// Optional horizontal flip followed by a rotation of `angle_deg` degrees
/// about the plane centre. Samples falling outside the plane read zero.
pub fn flip_rotate_map(h: usize, w: usize, flip: bool, angle_deg: f64) -> SparseMap {
    let theta = angle_deg.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut taps = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            // inverse rotation of the output coordinate
            let sy = c * dy - s * dx + cy;
            let sx = s * dy + c * dx + cx;
            let (y0, x0) = (libm::floor(sy), libm::floor(sx));
            let (wy, wx) = (sy - y0, sx - x0);
            for (y, fy) in [(y0, 1.0 - wy), (y0 + 1.0, wy)] {
                for (x, fx) in [(x0, 1.0 - wx), (x0 + 1.0, wx)] {
                    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                        continue;
                    }
                    let (y, mut x) = (y as usize, x as usize);
                    if flip {
                        x = w - 1 - x;
                    }
                    taps.push(Tap {
                        out: (i * w + j) as u32,
                        inp: (y * w + x) as u32,
                        weight: fy * fx,
                    });
                }
            }
        }
    }
    SparseMap::from_taps(taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply1(map: SparseMap, inp: [usize; 2], out: [usize; 2], x: &[f64]) -> Vec<f64> {
        MapSet::shared(inp, out, map).apply(x, 1, false)
    }

    #[test]
    fn upsample_single_pixel_replicates() {
        let y = apply1(upsample2x_map(1, 1), [1, 1], [2, 2], &[7.0]);
        assert_eq!(y, vec![7.0; 4]);
    }

    #[test]
    fn upsample_constant_is_exact() {
        let y = apply1(upsample2x_map(3, 2), [3, 2], [6, 4], &[5.0; 6]);
        assert!(y.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 2.0).collect();
        let y = apply1(flip_rotate_map(4, 5, false, 0.0), [4, 5], [4, 5], &x);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let once = apply1(flip_rotate_map(3, 4, true, 0.0), [3, 4], [3, 4], &x);
        assert_eq!(once[0], 3.0);
        let twice = apply1(flip_rotate_map(3, 4, true, 0.0), [3, 4], [3, 4], &once);
        assert_eq!(twice, x);
    }

    #[test]
    fn transpose_is_the_adjoint() {
        // <M x, y> == <x, Mᵀ y>
        let set = MapSet::shared([3, 3], [3, 3], flip_rotate_map(3, 3, true, 17.0));
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).sin()).collect();
        let y: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).cos()).collect();
        let mx = set.apply(&x, 1, false);
        let mty = set.apply(&y, 1, true);
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
