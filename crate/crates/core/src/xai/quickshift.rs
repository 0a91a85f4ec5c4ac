use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Intensities in `[0, 1]` are stretched to `[0, 100]` (the lightness range
/// of Lab space) before `ratio` weighs them against pixel coordinates.
pub const INTENSITY_SCALE: f64 = 100.0;

/// Segments smaller than this are merged into their most similar neighbour.
pub const MIN_SEGMENT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major segment ids in `0..count`.
    pub labels: Vec<usize>,
    pub count: usize,
}

impl SuperpixelMap {
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Whether every segment is a single 4-connected region.
    pub fn is_four_connected(&self) -> bool {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; self.labels.len()];
        let mut found = vec![false; self.count];
        for start in 0..self.labels.len() {
            if seen[start] {
                continue;
            }
            let l = self.labels[start];
            if found[l] {
                return false;
            }
            found[l] = true;
            flood(w, h, start, &mut seen, |j| self.labels[j] == l, |_| {});
        }
        true
    }
}

/// Visits the 4-connected region around `start` whose pixels satisfy
/// `inside`, marking them in `seen`.
fn flood(
    w: usize,
    h: usize,
    start: usize,
    seen: &mut [bool],
    inside: impl Fn(usize) -> bool,
    mut visit: impl FnMut(usize),
) {
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        visit(i);
        let (x, y) = (i % w, i / w);
        let mut push = |j: usize| {
            if !seen[j] && inside(j) {
                seen[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
    }
}

/// Quickshift mode seeking on `(ratio·intensity, x, y)` features.
///
/// Density is a Gaussian window of bandwidth `kernel_size` truncated at
/// three bandwidths. Each pixel links to the nearest pixel of higher
/// density (ties: lower row-major index counts as higher) whose feature
/// distance is at most `max_dist`; trees of that forest are split into
/// 4-connected pieces, pieces under [`MIN_SEGMENT`] pixels are merged into
/// the neighbour with the closest mean intensity, and ids are assigned in
/// row-major order of first appearance.
pub fn quickshift(image: &Image, kernel_size: f64, max_dist: f64, ratio: f64) -> Result<SuperpixelMap> {
    segment(image, kernel_size, max_dist, ratio, true)
}

/// The 4-connected quickshift partition before small pieces are merged.
/// Raising `max_dist` only adds links to the forest, so this partition
/// coarsens monotonically; the merge step does not preserve that.
pub fn quickshift_unmerged(image: &Image, kernel_size: f64, max_dist: f64, ratio: f64) -> Result<SuperpixelMap> {
    segment(image, kernel_size, max_dist, ratio, false)
}

fn segment(image: &Image, kernel_size: f64, max_dist: f64, ratio: f64, merge: bool) -> Result<SuperpixelMap> {
    if !(kernel_size > 0.0 && kernel_size.is_finite()) {
        return Err(Error::arg(format!("kernel_size {kernel_size} must be positive")));
    }
    if !(max_dist >= 0.0 && max_dist.is_finite()) {
        return Err(Error::arg(format!("max_dist {max_dist} must be non-negative")));
    }
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::arg(format!("ratio {ratio} must be non-negative")));
    }
    let (w, h) = image.dims();
    let n = w * h;
    if n == 0 {
        return Err(Error::arg("cannot segment an empty image"));
    }
    let feat: Vec<f64> = image.data().iter().map(|&v| ratio * INTENSITY_SCALE * v as f64).collect();

    let win = (3.0 * kernel_size).ceil() as isize;
    let inv = 1.0 / (2.0 * kernel_size * kernel_size);
    let mut density = vec![0.0f64; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y as usize) * w + x as usize;
            let mut d = 0.0;
            for yy in (y - win).max(0)..=(y + win).min(h as isize - 1) {
                for xx in (x - win).max(0)..=(x + win).min(w as isize - 1) {
                    let j = (yy as usize) * w + xx as usize;
                    let df = feat[i] - feat[j];
                    let d2 = ((xx - x) * (xx - x) + (yy - y) * (yy - y)) as f64 + df * df;
                    d += (-d2 * inv).exp();
                }
            }
            density[i] = d;
        }
    }

    let higher = |j: usize, i: usize| density[j] > density[i] || (density[j] == density[i] && j < i);
    let reach = max_dist.floor() as isize;
    let limit = max_dist * max_dist;
    let mut parent: Vec<usize> = (0..n).collect();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y as usize) * w + x as usize;
            let mut best: Option<(f64, usize)> = None;
            for yy in (y - reach).max(0)..=(y + reach).min(h as isize - 1) {
                for xx in (x - reach).max(0)..=(x + reach).min(w as isize - 1) {
                    let j = (yy as usize) * w + xx as usize;
                    if !higher(j, i) {
                        continue;
                    }
                    let df = feat[i] - feat[j];
                    let d2 = ((xx - x) * (xx - x) + (yy - y) * (yy - y)) as f64 + df * df;
                    if d2 <= limit && best.is_none_or(|(bd, bj)| d2 < bd || (d2 == bd && j < bj)) {
                        best = Some((d2, j));
                    }
                }
            }
            if let Some((_, j)) = best {
                parent[i] = j;
            }
        }
    }

    // parents always rank strictly higher, so chains terminate
    let mut root = vec![usize::MAX; n];
    for i in 0..n {
        let mut path = Vec::new();
        let mut k = i;
        while root[k] == usize::MAX && parent[k] != k {
            path.push(k);
            k = parent[k];
        }
        let r = if root[k] == usize::MAX { k } else { root[k] };
        root[k] = r;
        for p in path {
            root[p] = r;
        }
    }

    // split trees into 4-connected components
    let mut comp = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let id = members.len();
        let mut pix = Vec::new();
        let r = root[start];
        flood(w, h, start, &mut seen, |j| root[j] == r, |j| pix.push(j));
        for &p in &pix {
            comp[p] = id;
        }
        members.push(pix);
    }

    if merge {
        merge_small(w, h, image, &mut comp, &mut members);
    }

    let mut remap = vec![usize::MAX; members.len()];
    let mut count = 0;
    let labels = comp
        .iter()
        .map(|&c| {
            if remap[c] == usize::MAX {
                remap[c] = count;
                count += 1;
            }
            remap[c]
        })
        .collect();
    Ok(SuperpixelMap {
        width: w,
        height: h,
        labels,
        count,
    })
}

fn merge_small(w: usize, h: usize, image: &Image, comp: &mut [usize], members: &mut [Vec<usize>]) {
    let data = image.data();
    let mut sums: Vec<f64> = members
        .iter()
        .map(|m| m.iter().map(|&p| data[p] as f64).sum())
        .collect();
    loop {
        let alive = members.iter().filter(|m| !m.is_empty()).count();
        if alive <= 1 {
            return;
        }
        let Some(small) = (0..members.len())
            .filter(|&c| !members[c].is_empty() && members[c].len() < MIN_SEGMENT)
            .min_by_key(|&c| (members[c].len(), c))
        else {
            return;
        };
        let mean = sums[small] / members[small].len() as f64;
        let mut best: Option<(f64, usize)> = None;
        for &p in &members[small] {
            let (x, y) = (p % w, p / w);
            let mut consider = |q: usize| {
                let c = comp[q];
                if c == small {
                    return;
                }
                let d = (sums[c] / members[c].len() as f64 - mean).abs();
                if best.is_none_or(|(bd, bc)| d < bd || (d == bd && c < bc)) {
                    best = Some((d, c));
                }
            };
            if x > 0 {
                consider(p - 1);
            }
            if x + 1 < w {
                consider(p + 1);
            }
            if y > 0 {
                consider(p - w);
            }
            if y + 1 < h {
                consider(p + w);
            }
        }
        let (_, target) = best.expect("a component that is not alone has a neighbour");
        let moved = std::mem::take(&mut members[small]);
        for &p in &moved {
            comp[p] = target;
        }
        sums[target] += sums[small];
        sums[small] = 0.0;
        members[target].extend(moved);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contiguous(m: &SuperpixelMap) -> bool {
        let mut next = 0;
        for &l in &m.labels {
            if l > next {
                return false;
            }
            if l == next {
                next += 1;
            }
        }
        next == m.count
    }

    #[test]
    fn constant_image_is_one_superpixel() {
        let m = quickshift(&Image::from_fn(24, 20, |_, _| 0.4), 4.0, 8.0, 1.0).unwrap();
        assert_eq!(m.count, 1);
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn halves_are_never_joined() {
        let img = Image::from_fn(32, 16, |x, _| if x < 16 { 0.0 } else { 1.0 });
        let m = quickshift(&img, 4.0, 8.0, 1.0).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                for x2 in 0..32 {
                    if (x < 16) != (x2 < 16) {
                        assert_ne!(m.label(x, y), m.label(x2, y));
                    }
                }
            }
        }
    }

    #[test]
    fn bad_kernel_is_argument_error() {
        let img = Image::new(4, 4);
        assert!(matches!(quickshift(&img, 0.0, 8.0, 1.0), Err(Error::Argument(_))));
        assert!(matches!(quickshift(&img, -1.0, 8.0, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn synthetic_radiograph_gets_a_workable_number_of_superpixels() {
        let c = crate::dataio::generate_synthetic_corpus(&crate::dataio::SynthConfig::new(10, 64, true, 0)).unwrap();
        for img in &c.images {
            let m = quickshift(img, 4.0, 8.0, 1.0).unwrap();
            assert!((10..=200).contains(&m.count), "{} superpixels", m.count);
        }
    }

    fn noisy_image() -> impl Strategy<Value = Image> {
        (4usize..14, 4usize..14, any::<u64>()).prop_map(|(w, h, seed)| {
            let mut s = seed | 1;
            let mut img = Image::from_fn(w, h, |x, y| ((x / 3 + y / 3) % 2) as f32 * 0.5);
            for v in img.data_mut() {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                *v += (s % 1000) as f32 / 4000.0;
            }
            img
        })
    }

    proptest! {
        #[test]
        fn labels_partition_into_connected_segments(img in noisy_image(), k in 1.0f64..4.0) {
            let m = quickshift(&img, k, 2.0 * k, 1.0).unwrap();
            prop_assert_eq!(m.labels.len(), img.data().len());
            prop_assert!(contiguous(&m));
            prop_assert!(m.is_four_connected());
            if m.count > 1 {
                prop_assert!(m.sizes().iter().all(|&s| s >= MIN_SEGMENT));
            }
        }

        #[test]
        fn deterministic(img in noisy_image()) {
            prop_assert_eq!(quickshift(&img, 2.0, 4.0, 1.0).unwrap(), quickshift(&img, 2.0, 4.0, 1.0).unwrap());
        }

        #[test]
        fn unmerged_count_non_increasing_in_max_dist(img in noisy_image(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let m_lo = quickshift_unmerged(&img, 2.0, lo, 0.2).unwrap();
            let m_hi = quickshift_unmerged(&img, 2.0, hi, 0.2).unwrap();
            prop_assert!(m_hi.count <= m_lo.count, "{} > {}", m_hi.count, m_lo.count);
            // coarsening: every fine segment sits inside one coarse segment
            let mut owner = vec![usize::MAX; m_lo.count];
            for (&f, &c) in m_lo.labels.iter().zip(&m_hi.labels) {
                prop_assert!(owner[f] == usize::MAX || owner[f] == c);
                owner[f] = c;
            }
            prop_assert!(m_lo.is_four_connected() && m_hi.is_four_connected());
        }
    }
}
