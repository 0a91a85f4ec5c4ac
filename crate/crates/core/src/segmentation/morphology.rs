//! Binary morphology with disk structuring elements.
//!
//! Pixels outside the frame never count: erosion only inspects in-frame
//! neighbours and dilation only spreads from in-frame foreground.

use crate::image::BinaryMask;

/// Half-width of each row of a disk of radius `r`, for row offsets
/// `-r..=r`.
fn disk_rows(r: usize) -> Vec<usize> {
    let r = r as i64;
    (-r..=r)
        .map(|dy| {
            let mut hw = 0i64;
            while (hw + 1) * (hw + 1) + dy * dy <= r * r {
                hw += 1;
            }
            hw as usize
        })
        .collect()
}

/// Offsets `(dx, dy)` of a disk of radius `r`: all integer points with
/// `dx² + dy² ≤ r²`.
pub fn disk_offsets(r: usize) -> Vec<(i64, i64)> {
    let r = r as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Structuring-element radius equivalent to 5 px at 400 px.
pub fn scaled_radius(input_size: usize) -> usize {
    (5.0 * input_size as f64 / 400.0).round() as usize
}

// Row prefix sums make each disk row an O(1) window count.
fn sweep(mask: &BinaryMask, r: usize, erode: bool) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let mut prefix = vec![0u32; (w + 1) * h];
    for y in 0..h {
        for x in 0..w {
            prefix[y * (w + 1) + x + 1] = prefix[y * (w + 1) + x] + mask.get(x, y) as u32;
        }
    }
    let rows = disk_rows(r);
    let ri = r as i64;
    BinaryMask::from_fn(w, h, |x, y| {
        let mut inside = 0u32;
        let mut ones = 0u32;
        for (k, &hw) in rows.iter().enumerate() {
            let yy = y as i64 + k as i64 - ri;
            if yy < 0 || yy >= h as i64 {
                continue;
            }
            let lo = x.saturating_sub(hw);
            let hi = (x + hw + 1).min(w);
            let base = yy as usize * (w + 1);
            ones += prefix[base + hi] - prefix[base + lo];
            inside += (hi - lo) as u32;
        }
        if erode {
            ones == inside
        } else {
            ones > 0
        }
    })
}

pub fn erode(mask: &BinaryMask, r: usize) -> BinaryMask {
    sweep(mask, r, true)
}

pub fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    sweep(mask, r, false)
}

pub fn open(mask: &BinaryMask, r: usize) -> BinaryMask {
    dilate(&erode(mask, r), r)
}

/// Opening with `open_radius` followed by dilation with `dilate_radius`.
pub fn postprocess_mask(mask: &BinaryMask, open_radius: usize, dilate_radius: usize) -> BinaryMask {
    dilate(&open(mask, open_radius), dilate_radius)
}
