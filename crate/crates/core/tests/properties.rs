//! Cross-module properties checked through the public API.

use proptest::prelude::*;
use rand::Rng;
use sgxp_core::augmentation::{augment, horizontal_flip, shift_scale_rotate, AugmentationConfig, PairedSample};
use sgxp_core::autodiff::{read_checkpoint, write_checkpoint, Activation, GraphBuilder, LayerSpec, Mode, Network};
use sgxp_core::classification::evaluate;
use sgxp_core::dataio::{
    constrained_split, decode_pfm, encode_pfm, make_generalization_folds, parse_manifest, Label, Manifest, Pgm, Projection,
    SampleRecord, Source, Split, SplitSpec,
};
use sgxp_core::seed::derive_rng;
use sgxp_core::segmentation::{mask_metrics, postprocess_mask};
use sgxp_core::xai::{aggregate, quickshift, quickshift_unmerged, HeatmapMeta, Method};
use sgxp_core::{BinaryMask, Image, Tensor};

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), w * h)
            .prop_map(move |bits| BinaryMask::from_vec(w, h, bits.into_iter().map(u8::from).collect()).unwrap())
    })
}

fn pair_strategy(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        let bits = || proptest::collection::vec(any::<bool>(), w * h);
        (bits(), bits()).prop_map(move |(a, b)| {
            let m = |v: Vec<bool>| BinaryMask::from_vec(w, h, v.into_iter().map(u8::from).collect()).unwrap();
            (m(a), m(b))
        })
    })
}

fn image_strategy(side: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Image> {
    side.prop_flat_map(|s| proptest::collection::vec(0.0f32..=1.0, s * s).prop_map(move |d| Image::from_vec(s, s, d).unwrap()))
}

fn small_arch() -> sgxp_core::autodiff::Architecture {
    let mut b = GraphBuilder::new(&[1, 6, 6]);
    let c = b
        .then("conv", LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1, bias: true }, 0)
        .unwrap();
    let n = b.then("bn", LayerSpec::batch_norm(2), c).unwrap();
    let d = b.then("drop", LayerSpec::Dropout { rate: 0.4 }, n).unwrap();
    let f = b.then("flat", LayerSpec::Flatten, d).unwrap();
    let l = b.then("fc", LayerSpec::Dense { inputs: 72, outputs: 3 }, f).unwrap();
    b.then("softmax", LayerSpec::Activation { kind: Activation::Softmax }, l).unwrap();
    b.finish()
}

fn small_net(seed: u64) -> Network<f64> {
    Network::new(small_arch(), &mut derive_rng(seed, "props")).unwrap()
}

fn batch(seed: u64, n: usize) -> Tensor<f64> {
    let mut rng = derive_rng(seed, "props-input");
    Tensor::from_vec(&[n, 1, 6, 6], (0..n * 36).map(|_| rng.random_range(-1.0..1.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_dominates_jaccard_and_is_symmetric((a, b) in pair_strategy(10)) {
        let m = mask_metrics(&a, &b).unwrap();
        let r = mask_metrics(&b, &a).unwrap();
        prop_assert_eq!(m, r);
        prop_assert!(m.dice >= m.jaccard_index - 1e-15);
        let extreme = m.jaccard_index == 0.0 || m.jaccard_index == 1.0;
        prop_assert_eq!((m.dice - m.jaccard_index).abs() < 1e-15, extreme);
    }

    #[test]
    fn postprocessing_is_idempotent(m in mask_strategy(24), r in 1usize..4) {
        let once = postprocess_mask(&m, r, 0);
        prop_assert_eq!(postprocess_mask(&once, r, 0), once);
    }

    #[test]
    fn confusion_rows_and_trace(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = evaluate(&pred, &truth, &classes).unwrap();
        for (k, row) in r.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == k).count());
        }
        let trace: usize = (0..3).map(|k| r.confusion[k][k]).sum();
        prop_assert_eq!(trace, pred.iter().zip(&truth).filter(|(p, t)| p == t).count());
        let tp: usize = r.per_class.iter().map(|c| c.tp).sum();
        let fn_: usize = r.per_class.iter().map(|c| c.fn_).sum();
        prop_assert!((tp as f64 / (tp + fn_) as f64 - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn augmentation_keeps_masks_binary_aligned_in_range_and_seeded(
        m in mask_strategy(20).prop_filter("square", |m| m.width() == m.height()),
        seed in any::<u64>(),
    ) {
        let image = Image::from_fn(m.width(), m.height(), |x, y| if m.get(x, y) { 0.8 } else { 0.1 });
        let sample = PairedSample::new(image, Some(m.clone())).unwrap();
        let cfg = AugmentationConfig::segmentation().with_probability(1.0);
        let a = augment(&sample, &cfg, &mut derive_rng(seed, "aug")).unwrap();
        let b = augment(&sample, &cfg, &mut derive_rng(seed, "aug")).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.mask.as_ref().unwrap().data().iter().all(|&v| v <= 1));
        prop_assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn geometric_maps_move_image_and_mask_together(
        m in mask_strategy(16).prop_filter("square", |m| m.width() == m.height()),
        quarter in 0u8..4,
        dx in -3i32..=3,
        dy in -3i32..=3,
        flip in any::<bool>(),
    ) {
        // on-grid maps sample the image exactly, so a 0/1 image must equal
        // the nearest-neighbour mask afterwards
        let s = m.width() as f64;
        let sample = PairedSample::new(m.to_image(), Some(m.clone())).unwrap();
        let sample = if flip { horizontal_flip(&sample) } else { sample };
        let out = shift_scale_rotate(&sample, (dx as f64 / s, dy as f64 / s), 1.0, 90.0 * quarter as f64);
        let from_image = BinaryMask::threshold(&out.image, 0.5);
        prop_assert_eq!(&from_image, out.mask.as_ref().unwrap());
    }

    #[test]
    fn pgm_and_pfm_round_trip(m in mask_strategy(12), img in image_strategy(1..=12)) {
        let pgm = Pgm::from_mask(&m).encode();
        prop_assert_eq!(Pgm::parse(&pgm).unwrap().to_mask().unwrap(), m);
        let back = decode_pfm(&encode_pfm(&img)).unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), img.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(encode_pfm(&back), encode_pfm(&img));
    }

    #[test]
    fn aggregate_is_the_pixel_mean(maps in proptest::collection::vec(proptest::collection::vec(0.0f32..=1.0, 16), 1..6)) {
        let images: Vec<Image> = maps.iter().map(|d| Image::from_vec(4, 4, d.clone()).unwrap()).collect();
        let meta = HeatmapMeta { model_id: "m".into(), class: "all".into(), method: Method::Lime, n_images: 0 };
        let h = aggregate(&images, meta).unwrap();
        prop_assert_eq!(h.meta.n_images, images.len());
        for p in 0..16 {
            let mean = maps.iter().map(|d| d[p] as f64).sum::<f64>() / maps.len() as f64;
            prop_assert!((h.values[p] - mean).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&h.values[p]));
        }
    }

    #[test]
    fn quickshift_partitions_and_coarsens(img in image_strategy(6..=14), d in 1.0f64..6.0) {
        let map = quickshift(&img, 2.0, 2.0 * d, 1.0).unwrap();
        prop_assert_eq!(map.labels.len(), img.width() * img.height());
        prop_assert!(map.sizes().iter().all(|&s| s > 0));
        prop_assert!(map.is_four_connected());
        let fine = quickshift_unmerged(&img, 2.0, d, 1.0).unwrap();
        let coarse = quickshift_unmerged(&img, 2.0, 2.0 * d, 1.0).unwrap();
        prop_assert!(coarse.count <= fine.count);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_eval_is_deterministic() {
    let net = small_net(1);
    let x = batch(1, 5);
    let (y, _) = net.forward_eval(&x).unwrap();
    for row in y.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    // eval mode: dropout is the identity and batch norm a fixed affine map
    assert_eq!(net.forward_eval(&x).unwrap().0, y);
    let one = Tensor::from_vec(&[1, 1, 6, 6], x.data()[..36].to_vec());
    let (y1, _) = net.forward_eval(&one).unwrap();
    for (a, b) in y1.data().iter().zip(&y.data()[..3]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn equal_seeds_give_bit_identical_training_passes() {
    let run = || {
        let mut net = small_net(2);
        let x = batch(2, 4);
        let (y, mut tape) = net.forward(&x, Mode::Train, &mut derive_rng(9, "dropout")).unwrap();
        let dy = Tensor::from_vec(y.shape(), y.data().iter().map(|v| v - 0.5).collect());
        let g = tape.backward(&net, &dy).unwrap();
        let flat: Vec<u64> = g.params.iter().flatten().flat_map(|t| t.data().to_vec()).map(f64::to_bits).collect();
        (y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), flat)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    // parameters are stored as f32, the precision models train in
    let net = Network::<f32>::new(small_arch(), &mut derive_rng(3, "props")).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&net, &mut buf).unwrap();
    let back: Network<f32> = read_checkpoint(buf.as_slice()).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(buf, again);
    for (a, b) in net.params().iter().zip(back.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let x = Tensor::from_vec(&[2, 1, 6, 6], batch(3, 2).data().iter().map(|&v| v as f32).collect());
    assert_eq!(net.forward_eval(&x).unwrap().0, back.forward_eval(&x).unwrap().0);
}

fn manifest(rows: &[(Source, Label, usize, usize)]) -> Manifest {
    // (source, label, patients, images per patient)
    let mut records = Vec::new();
    for &(source, label, patients, per) in rows {
        for p in 0..patients {
            let patient = format!("{}-{}-{p}", source.as_str(), label.as_str());
            for _ in 0..per {
                let i = records.len();
                records.push(SampleRecord {
                    id: format!("r{i:04}"),
                    image_path: format!("images/r{i:04}.pgm").into(),
                    patient_id: patient.clone(),
                    source,
                    class_label: label,
                    projection: Projection::Ap,
                    split: None,
                    original_label: None,
                });
            }
        }
    }
    Manifest::new(records).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_keep_patients_whole_and_ignore_row_order(
        n1 in 3usize..15, n2 in 3usize..15, n3 in 2usize..8, per in 1usize..4, seed in any::<u64>(), rot in 0usize..50,
    ) {
        let m = manifest(&[
            (Source::Cohen, Label::Covid19, n1, per),
            (Source::Rsna, Label::Normal, n2, per),
            (Source::Rsna, Label::LungOpacity, n3, 1),
        ]);
        let spec = SplitSpec { seed, ..Default::default() };
        let out = constrained_split(&m, &spec).unwrap();
        let mut by_patient = std::collections::BTreeMap::new();
        for (r, s) in m.records.iter().zip(&out.assignment) {
            let prev = by_patient.insert(r.patient_id.clone(), *s);
            prop_assert!(prev.is_none_or(|p| p == *s));
        }

        let mut shuffled = m.records.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let m2 = Manifest::new(shuffled).unwrap();
        let out2 = constrained_split(&m2, &spec).unwrap();
        let assign = |m: &Manifest, o: &[Split]| {
            m.records.iter().zip(o).map(|(r, s)| (r.id.clone(), *s)).collect::<std::collections::BTreeMap<_, _>>()
        };
        prop_assert_eq!(assign(&m, &out.assignment), assign(&m2, &out2.assignment));
    }

    #[test]
    fn folds_cover_each_covid_record_once(a in 1usize..20, b in 1usize..10, c in 0usize..6, neg in 2usize..30, seed in any::<u64>()) {
        let m = manifest(&[
            (Source::Cohen, Label::Covid19, a, 1),
            (Source::Actualmed, Label::Covid19, b, 1),
            (Source::Figure1, Label::Covid19, c, 1),
            (Source::Rsna, Label::Normal, neg, 1),
            (Source::Eurorad, Label::LungOpacity, 1, 1),
        ]);
        let [f1, f2] = make_generalization_folds(&m, seed).unwrap();
        let mut pos: Vec<usize> = f1.positives.iter().chain(&f2.positives).copied().collect();
        pos.sort_unstable();
        let covid: Vec<usize> = (0..m.len()).filter(|&i| m.records[i].class_label == Label::Covid19).collect();
        prop_assert_eq!(pos, covid);
        let mut all: Vec<usize> = [f1.negatives, f1.positives, f2.negatives, f2.positives].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
    }

    #[test]
    fn manifest_csv_round_trips(n in 1usize..6, per in 1usize..3, split in any::<bool>()) {
        let mut m = manifest(&[(Source::Hamimi, Label::Normal, n, per), (Source::Cohen, Label::Covid19, 1, 1)]);
        if split {
            for (i, r) in m.records.iter_mut().enumerate() {
                r.split = Some([Split::Train, Split::Val, Split::Test][i % 3]);
            }
        }
        let text = m.to_csv().unwrap();
        let back = parse_manifest(text.as_bytes(), std::path::Path::new("m.csv")).unwrap();
        prop_assert_eq!(back.to_csv().unwrap(), text);
        prop_assert_eq!(back.records, m.records);
    }
}
