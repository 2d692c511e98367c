//! Score-field smoothing, quantile thresholding and binary mask algebra.
//!
//! Fields and masks are `[C, H, W]` tensors; every spatial operation is
//! applied to each channel independently. The order used by the pipeline is
//! blur → dilate → threshold, see [`MaskParams::build`].

use crate::{Error, Result, Tensor};

pub const DEFAULT_QUANTILE: f64 = 0.70;
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_BLUR_RADIUS: usize = 2;
pub const DEFAULT_DILATE_RADIUS: usize = 1;

/// Nonnegative per-latent-element importance of one subject token.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub subject: usize,
    pub values: Tensor,
}

/// Tensor whose entries are all exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    values: Tensor,
}

impl BinaryMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if let Some(v) = values.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Mask(format!("mask value {v} is not binary")));
        }
        Ok(Self { values })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self {
            values: Tensor::full(shape, 1.0),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            values: Tensor::zeros(shape),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn count_ones(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.values.map(|v| 1.0 - v),
        }
    }

    /// Pointwise `self ≤ other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .values
                .data()
                .iter()
                .zip(other.values.data())
                .all(|(a, b)| a <= b)
    }
}

/// Offsets `(dx, dy)` and additive heights of a grayscale structuring element.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuringElement {
    offsets: Vec<(i32, i32)>,
    heights: Vec<f64>,
}

impl StructuringElement {
    pub const MAX_RADIUS: i32 = 3;

    pub fn new(offsets: Vec<(i32, i32)>, heights: Vec<f64>) -> Result<Self> {
        if offsets.len() != heights.len() {
            return Err(Error::Mask("offsets and heights differ in length".into()));
        }
        if !offsets.contains(&(0, 0)) {
            return Err(Error::Mask("structuring element must contain (0, 0)".into()));
        }
        if offsets
            .iter()
            .any(|(x, y)| x.abs() > Self::MAX_RADIUS || y.abs() > Self::MAX_RADIUS)
        {
            return Err(Error::Mask(format!(
                "structuring element radius exceeds {}",
                Self::MAX_RADIUS
            )));
        }
        Ok(Self { offsets, heights })
    }

    /// Flat `(2r+1)×(2r+1)` square.
    pub fn square(radius: usize) -> Result<Self> {
        let r = radius as i32;
        let offsets: Vec<_> = (-r..=r).flat_map(|y| (-r..=r).map(move |x| (x, y))).collect();
        let n = offsets.len();
        Self::new(offsets, vec![0.0; n])
    }

    /// Flat disk of the given radius.
    pub fn disk(radius: usize) -> Result<Self> {
        let r = radius as i32;
        let offsets: Vec<_> = (-r..=r)
            .flat_map(|y| (-r..=r).map(move |x| (x, y)))
            .filter(|(x, y)| x * x + y * y <= r * r)
            .collect();
        let n = offsets.len();
        Self::new(offsets, vec![0.0; n])
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Mask(format!("expected a [C, H, W] field, got {s:?}"))),
    }
}

/// Sampled 2-D Gaussian on integer offsets in `[-r, r]²`, normalised to unit sum.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Mask(format!("sigma must be positive, got {sigma}")));
    }
    if radius == 0 {
        return Err(Error::Mask("kernel radius must be at least 1".into()));
    }
    let size = 2 * radius + 1;
    let r = radius as f64;
    let mut k = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let total = k.sum();
    k.data_mut().iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Per-channel convolution with edge-replicated borders, evaluated as
/// `I(x) + Σ K(d)·(I(x−d) − I(x))` so that constant regions come out
/// bit-for-bit unchanged regardless of rounding in the kernel sum.
pub fn blur(field: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = planes(field)?;
    let ks = kernel.shape();
    if ks.len() != 2 || ks[0] != ks[1] || ks[0] % 2 == 0 {
        return Err(Error::Mask(format!("kernel must be odd and square, got {ks:?}")));
    }
    let r = (ks[0] / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = field.data();
    let mut out = Tensor::zeros(field.shape());
    let o = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let centre = plane[y * w + x];
                let mut acc = 0.0;
                for dy in -r..=r {
                    let sy = clampi(y as isize - dy, h);
                    for dx in -r..=r {
                        let sx = clampi(x as isize - dx, w);
                        acc += kernel.data()[((dy + r) as usize) * ks[0] + (dx + r) as usize]
                            * (plane[sy * w + sx] - centre);
                    }
                }
                o[ch * h * w + y * w + x] = (centre + acc).max(0.0);
            }
        }
    }
    Ok(out)
}

/// Grayscale dilation `max_{(s,t) ∈ S} I(x − s, y − t) + K(s, t)`; neighbours
/// that fall outside the grid are skipped.
pub fn dilate(field: &Tensor, se: &StructuringElement) -> Result<Tensor> {
    let (c, h, w) = planes(field)?;
    let src = field.data();
    let mut out = Tensor::zeros(field.shape());
    let o = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::NEG_INFINITY;
                for (&(s, t), &k) in se.offsets.iter().zip(&se.heights) {
                    let (sx, sy) = (x as i64 - s as i64, y as i64 - t as i64);
                    if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                        continue;
                    }
                    best = best.max(src[ch * h * w + sy as usize * w + sx as usize] + k);
                }
                o[ch * h * w + y * w + x] = best;
            }
        }
    }
    Ok(out)
}

/// Linear-interpolation quantile over all entries.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 >= v.len() {
        v[lo]
    } else {
        v[lo] + frac * (v[lo + 1] - v[lo])
    }
}

/// `mask = 1` where the field is at least its `q`-quantile.
///
/// With linear interpolation the quantile lies in `(v_lo, v_hi]` unless it
/// hits an order statistic exactly, so the comparison is made against the
/// order statistic `v_hi` (or `v_lo`) itself. The result then depends only on
/// the ranks of the entries, never on interpolation rounding.
pub fn threshold_dynamic(field: &Tensor, q: f64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Mask(format!("quantile {q} outside [0, 1)")));
    }
    let mut sorted = field.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let theta = sorted[(pos.ceil() as usize).min(sorted.len() - 1)];
    Ok(BinaryMask {
        values: field.map(|v| if v >= theta { 1.0 } else { 0.0 }),
    })
}

fn combine(masks: &[BinaryMask], f: fn(f64, f64) -> f64, what: &str) -> Result<BinaryMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Mask(format!("{what} of an empty mask sequence")))?;
    let mut acc = first.values.clone();
    for m in rest {
        acc = acc
            .zip_map(&m.values, f)
            .map_err(|_| Error::Mask(format!("{what}: mask shapes differ")))?;
    }
    Ok(BinaryMask { values: acc })
}

pub fn mask_union(masks: &[BinaryMask]) -> Result<BinaryMask> {
    combine(masks, f64::max, "union")
}

pub fn mask_intersect(masks: &[BinaryMask]) -> Result<BinaryMask> {
    combine(masks, f64::min, "intersection")
}

/// Nearest-neighbour resampling of a `[C, H, W]` tensor to `height × width`.
/// Upsampling repeats each cell; downsampling keeps the top-left cell of each
/// block. The two grids must be related by an integer factor.
pub fn resample_nearest(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = planes(t)?;
    let ratio = |from: usize, to: usize| -> Option<(bool, usize)> {
        if to >= from && to % from == 0 {
            Some((true, to / from))
        } else if from > to && to > 0 && from % to == 0 {
            Some((false, from / to))
        } else {
            None
        }
    };
    let (ry, rx) = match (ratio(h, height), ratio(w, width)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Mask(format!(
                "cannot resample {h}x{w} to {height}x{width}: non-integer ratio"
            )))
        }
    };
    let map = |i: usize, (up, r): (bool, usize)| if up { i / r } else { i * r };
    let src = t.data();
    Ok(Tensor::from_fn(&[c, height, width], |i| {
        let (ch, y, x) = (i / (height * width), (i / width) % height, i % width);
        src[ch * h * w + map(y, ry) * w + map(x, rx)]
    }))
}

pub fn resample_mask(m: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    Ok(BinaryMask {
        values: resample_nearest(&m.values, height, width)?,
    })
}

/// Smoothing and threshold settings used to turn a score field into a mask.
#[derive(Clone, Debug)]
pub struct MaskParams {
    pub quantile: f64,
    pub kernel: Tensor,
    pub element: StructuringElement,
}

impl MaskParams {
    pub fn new(quantile: f64, sigma: f64, blur_radius: usize, dilate_radius: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&quantile) {
            return Err(Error::Mask(format!("quantile {quantile} outside [0, 1)")));
        }
        Ok(Self {
            quantile,
            kernel: gaussian_kernel(sigma, blur_radius)?,
            element: StructuringElement::square(dilate_radius)?,
        })
    }

    /// blur → dilate → threshold.
    pub fn build(&self, field: &Tensor) -> Result<BinaryMask> {
        let smoothed = blur(field, &self.kernel)?;
        let dilated = dilate(&smoothed, &self.element)?;
        threshold_dynamic(&dilated, self.quantile)
    }
}

impl Default for MaskParams {
    fn default() -> Self {
        Self::new(
            DEFAULT_QUANTILE,
            DEFAULT_SIGMA,
            DEFAULT_BLUR_RADIUS,
            DEFAULT_DILATE_RADIUS,
        )
        .expect("default mask parameters are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::from_fn(&[4, 8, 8], |i| i as f64)
    }

    #[test]
    fn kernel_normalised_symmetric_and_peaked() {
        for (s, r) in [(0.5, 1), (1.0, 2), (2.0, 3)] {
            let k = gaussian_kernel(s, r).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
            let n = 2 * r + 1;
            let c = k.at(&[r, r]);
            assert_eq!(c, k.max());
            for y in 0..n {
                for x in 0..n {
                    let v = k.at(&[y, x]);
                    assert_eq!(v, k.at(&[y, n - 1 - x]));
                    assert_eq!(v, k.at(&[n - 1 - y, x]));
                    assert_eq!(v, k.at(&[x, y]));
                }
            }
        }
        let k = gaussian_kernel(1.0, 1).unwrap();
        assert!((k.at(&[0, 0]) / k.at(&[1, 1]) - (-1.0f64).exp()).abs() < 1e-15);
        assert!(gaussian_kernel(0.0, 1).is_err());
        assert!(gaussian_kernel(-1.0, 1).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_reproduces_impulse() {
        let k = gaussian_kernel(1.0, 2).unwrap();
        let c = Tensor::full(&[2, 8, 8], 0.37);
        let out = blur(&c, &k).unwrap();
        for v in out.data() {
            assert_eq!(*v, 0.37);
        }
        let mut spike = Tensor::zeros(&[1, 9, 9]);
        spike.set(&[0, 4, 4], 1.0);
        let out = blur(&spike, &k).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert!((out.at(&[0, y + 2, x + 2]) - k.at(&[y, x])).abs() < 1e-15);
            }
        }
        assert!((out.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dilation_local_max_and_extensivity() {
        let mut f = Tensor::zeros(&[1, 1, 3]);
        f.set(&[0, 0, 1], 1.0);
        let se = StructuringElement::new(vec![(-1, 0), (0, 0), (1, 0)], vec![0.0; 3]).unwrap();
        assert_eq!(dilate(&f, &se).unwrap().data(), &[1.0, 1.0, 1.0]);
        let flat = Tensor::full(&[2, 8, 8], 3.0);
        assert_eq!(dilate(&flat, &StructuringElement::square(1).unwrap()).unwrap(), flat);
        let r = ramp().map(|v| (v * 0.77).sin().abs());
        let d = dilate(&r, &StructuringElement::disk(2).unwrap()).unwrap();
        assert!(d.data().iter().zip(r.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn structuring_element_invariants() {
        assert!(StructuringElement::new(vec![(1, 0)], vec![0.0]).is_err());
        assert!(StructuringElement::square(4).is_err());
        assert_eq!(StructuringElement::square(1).unwrap().offsets().len(), 9);
    }

    #[test]
    fn quantile_threshold_counts() {
        let f = Tensor::from_fn(&[4, 8, 8], |i| i as f64);
        assert_eq!(threshold_dynamic(&f, 0.75).unwrap().count_ones(), 64);
        assert_eq!(threshold_dynamic(&f, 0.0).unwrap().count_ones(), 256);
        let c = Tensor::full(&[4, 8, 8], 2.0);
        assert_eq!(threshold_dynamic(&c, 0.9).unwrap().count_ones(), 256);
        assert!(threshold_dynamic(&f, 1.0).is_err());
    }

    #[test]
    fn mask_algebra() {
        let m = threshold_dynamic(&ramp().map(|v| (v * 1.3).cos()), 0.5).unwrap();
        let n = m.complement();
        assert_eq!(mask_union(&[m.clone(), n.clone()]).unwrap(), BinaryMask::ones(&[4, 8, 8]));
        assert_eq!(mask_intersect(&[m.clone(), n]).unwrap(), BinaryMask::zeros(&[4, 8, 8]));
        assert_eq!(mask_union(&[m.clone(), m.clone()]).unwrap(), m);
        assert_eq!(mask_intersect(&[m.clone(), m.clone()]).unwrap(), m);
        assert!(mask_union(&[]).is_err());
        assert!(mask_intersect(&[m.clone(), BinaryMask::ones(&[4, 4, 4])]).is_err());
        assert!(BinaryMask::new(Tensor::full(&[1, 1, 1], 0.5)).is_err());
    }

    #[test]
    fn resampling() {
        let cb = Tensor::from_fn(&[1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        let up = resample_nearest(&cb, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(up.at(&[0, y, x]), cb.at(&[0, y / 2, x / 2]));
            }
        }
        assert_eq!(resample_nearest(&cb, 4, 4).unwrap(), cb);
        let c = Tensor::full(&[2, 8, 8], 1.5);
        let back = resample_nearest(&resample_nearest(&c, 4, 4).unwrap(), 8, 8).unwrap();
        assert_eq!(back, c);
        assert!(resample_nearest(&cb, 6, 6).is_err());
    }
}
