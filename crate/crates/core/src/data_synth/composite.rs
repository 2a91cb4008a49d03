use crate::error::{Error, Result};
use crate::image::{Image, Mask, SoftMask};

/// Per-pixel blend weight for the stylized layer.
///
/// Zero outside the mask. With `feather_px > 0`, mask pixels closer than
/// `feather_px + 1` to the background ramp linearly with Euclidean distance.
pub fn feather_alpha(mask: &Mask, feather_px: usize) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut alpha = vec![0.0; h * w];
    let reach = feather_px as isize + 1;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            if feather_px == 0 {
                alpha[y * w + x] = 1.0;
                continue;
            }
            let mut best = f64::INFINITY;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if !mask.get(yy as usize, xx as usize) {
                        best = best.min(((dy * dy + dx * dx) as f64).sqrt());
                    }
                }
            }
            alpha[y * w + x] = (best / reach as f64).min(1.0);
        }
    }
    alpha
}

/// Pastes `stylized` into `original` inside `mask`.
pub fn composite_pseudo_gt(
    original: &Image,
    stylized: &Image,
    mask: &Mask,
    feather_px: usize,
) -> Result<Image> {
    original.check_same_shape(stylized, "composite original vs stylized")?;
    if mask.height() != original.height() || mask.width() != original.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            original.height(),
            original.width()
        )));
    }
    let alpha = feather_alpha(mask, feather_px);
    let (h, w, c) = original.shape();
    let mut out = original.clone();
    for y in 0..h {
        for x in 0..w {
            let a = alpha[y * w + x];
            if a == 0.0 {
                continue;
            }
            for ch in 0..c {
                let v = if a == 1.0 {
                    stylized.get(y, x, ch)
                } else {
                    (1.0 - a) * original.get(y, x, ch) + a * stylized.get(y, x, ch)
                };
                out.set(y, x, ch, v);
            }
        }
    }
    Ok(out)
}

/// Area-pools a binary mask onto an `h × w` grid.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Result<SoftMask> {
    let (mh, mw) = (mask.height(), mask.width());
    if h == 0 || w == 0 || h > mh || w > mw || mh % h != 0 || mw % w != 0 {
        return Err(Error::Shape(format!(
            "cannot pool {mh}x{mw} mask onto {h}x{w} grid"
        )));
    }
    let (by, bx) = (mh / h, mw / w);
    let area = (by * bx) as f64;
    let mut data = Vec::with_capacity(h * w);
    for gy in 0..h {
        for gx in 0..w {
            let mut n = 0usize;
            for y in gy * by..(gy + 1) * by {
                for x in gx * bx..(gx + 1) * bx {
                    n += mask.get(y, x) as usize;
                }
            }
            data.push(n as f64 / area);
        }
    }
    SoftMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_images() -> (Image, Image) {
        let a = Image::from_fn(8, 8, 3, |y, x, c| (y + x + c) as f64 / 20.0);
        let b = Image::from_fn(8, 8, 3, |y, x, c| 1.0 - (y * x + c) as f64 / 60.0);
        (a, b)
    }

    #[test]
    fn empty_mask_returns_original() {
        let (a, b) = two_images();
        let out = composite_pseudo_gt(&a, &b, &Mask::empty(8, 8), 0).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn full_mask_returns_stylized() {
        let (a, b) = two_images();
        let out = composite_pseudo_gt(&a, &b, &Mask::full(8, 8), 0).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn single_pixel_mask_changes_one_pixel() {
        let (a, b) = two_images();
        let mask = Mask::from_fn(8, 8, |y, x| y == 2 && x == 2);
        let out = composite_pseudo_gt(&a, &b, &mask, 0).unwrap();
        let mut differing = 0;
        for y in 0..8 {
            for x in 0..8 {
                if out.pixel(y, x) != a.pixel(y, x) {
                    differing += 1;
                }
            }
        }
        assert_eq!(differing, 1);
    }

    #[test]
    fn feather_keeps_background_and_ramps_inside() {
        let (a, b) = two_images();
        let mask = Mask::from_fn(8, 8, |y, x| (1..7).contains(&y) && (1..7).contains(&x));
        let alpha = feather_alpha(&mask, 2);
        assert_eq!(alpha[0], 0.0);
        assert!((alpha[8 + 1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((alpha[2 * 8 + 2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(alpha[3 * 8 + 3], 1.0);
        let out = composite_pseudo_gt(&a, &b, &mask, 2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if !mask.get(y, x) {
                    assert_eq!(out.pixel(y, x), a.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let (a, _) = two_images();
        let c = Image::filled(4, 4, 3, 0.0);
        assert!(composite_pseudo_gt(&a, &c, &Mask::empty(8, 8), 0).is_err());
        assert!(composite_pseudo_gt(&a, &a, &Mask::empty(4, 8), 0).is_err());
    }

    #[test]
    fn downsample_examples() {
        let ones = downsample_mask(&Mask::full(16, 16), 4, 4).unwrap();
        assert!(ones.data.iter().all(|&v| v == 1.0));
        let zeros = downsample_mask(&Mask::empty(16, 16), 4, 4).unwrap();
        assert!(zeros.data.iter().all(|&v| v == 0.0));
        let m = Mask::from_fn(4, 4, |y, x| y < 2 && x >= 2);
        let s = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(s.data, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(downsample_mask(&m, 3, 2).is_err());
        assert!(downsample_mask(&m, 8, 8).is_err());
    }

    proptest! {
        #[test]
        fn downsample_preserves_mass(bits in proptest::collection::vec(any::<bool>(), 256), f in 0usize..3) {
            let mask = Mask::new(16, 16, bits).unwrap();
            let g = [16usize, 8, 4][f];
            let soft = downsample_mask(&mask, g, g).unwrap();
            let block = (16 / g) * (16 / g);
            prop_assert_eq!(soft.sum() * block as f64, mask.count() as f64);
            prop_assert!(soft.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn hard_composite_preserves_background(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let (a, b) = two_images();
            let mask = Mask::new(8, 8, bits).unwrap();
            let out = composite_pseudo_gt(&a, &b, &mask, 0).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let expect = if mask.get(y, x) { b.pixel(y, x) } else { a.pixel(y, x) };
                    prop_assert_eq!(out.pixel(y, x), expect);
                }
            }
        }
    }
}
