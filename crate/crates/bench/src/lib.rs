//! Fixtures shared by the benchmarks.

use sgxp_core::dataio::{generate_synthetic_corpus, SynthConfig};
use sgxp_core::{BinaryMask, Image};

/// One synthetic radiograph with its lung mask, `size`×`size`.
pub fn radiograph(size: usize) -> (Image, BinaryMask) {
    let mut c = generate_synthetic_corpus(&SynthConfig::new(10, size, true, 1)).expect("valid synth config");
    (c.images.swap_remove(0), c.masks.swap_remove(0))
}

/// `n` radiographs for batched passes.
pub fn radiographs(n: usize, size: usize) -> Vec<Image> {
    generate_synthetic_corpus(&SynthConfig::new(n.max(10), size, true, 2))
        .expect("valid synth config")
        .images
        .into_iter()
        .take(n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_the_requested_size() {
        let (img, mask) = radiograph(32);
        assert_eq!(img.dims(), (32, 32));
        assert_eq!(mask.dims(), (32, 32));
        assert_eq!(radiographs(3, 32).len(), 3);
    }
}
