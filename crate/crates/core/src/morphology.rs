//! Threshold segmentation and binary morphology with square structuring elements.

use crate::slice::{Mask, RealSlice};

/// Object mask: `intensity > threshold`, then a closing with a
/// `(2r+1)×(2r+1)` square.
pub fn segment_object(slice: &RealSlice, threshold: f64, closing_radius: usize) -> Mask {
    let raw = Mask::from_fn(slice.width(), slice.height(), |x, y| slice.get(x, y) > threshold);
    close(&raw, closing_radius)
}

/// Dilation; pixels outside the image count as unset.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    // Separable: a square element is a row pass followed by a column pass.
    let rows = pass(mask, radius, true, |any, _| any);
    pass(&rows, radius, false, |any, _| any)
}

/// Erosion; pixels outside the image count as set, so the image border is
/// never eroded by itself.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let rows = pass(mask, radius, true, |_, all| all);
    pass(&rows, radius, false, |_, all| all)
}

pub fn close(mask: &Mask, radius: usize) -> Mask {
    erode(&dilate(mask, radius), radius)
}

pub fn open(mask: &Mask, radius: usize) -> Mask {
    dilate(&erode(mask, radius), radius)
}

fn pass(mask: &Mask, radius: usize, horizontal: bool, pick: impl Fn(bool, bool) -> bool) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let r = radius as isize;
    Mask::from_fn(w, h, |x, y| {
        let mut any = false;
        let mut all = true;
        for d in -r..=r {
            let (sx, sy) = if horizontal { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
            if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                continue;
            }
            let v = mask.get(sx as usize, sy as usize);
            any |= v;
            all &= v;
        }
        pick(any, all)
    })
}
