use swarmseg::eval::dice;
use swarmseg::synthdata::*;

fn mean_dice(samples: &[SegSample]) -> f64 {
    samples.iter().map(|s| dice(&s.label, &s.clean_label).unwrap()).sum::<f64>() / samples.len() as f64
}

#[test]
fn label_skew_is_measurable_on_training_sets() {
    for seed in 0..3 {
        let fed = build_federation_data(&default_centers(), 8, &GeomConfig::default(), seed).unwrap();
        let clean = mean_dice(&fed.centers[0].train);
        let eroded = mean_dice(&fed.centers[2].train);
        let dilated = mean_dice(&fed.centers[3].train);
        assert_eq!(clean, 1.0);
        assert!(eroded < clean, "seed {seed}: {eroded}");
        assert!(dilated < clean, "seed {seed}: {dilated}");
        // Train labels carry the random part on top of the deterministic one.
        assert!(eroded < mean_dice(&fed.centers[2].test));
    }
}

#[test]
fn generic_set_is_clean_and_centers_differ_in_intensity() {
    let fed = build_federation_data(&default_centers(), 6, &GeomConfig::default(), 4).unwrap();
    assert!(fed.generic.iter().all(|s| s.label == s.clean_label));
    assert_eq!(fed.generic.len(), 6);
    // Same anatomy generator, different scanners: per-center image
    // histograms differ even though every image is z-scored.
    let skewness = |v: &[SegSample]| {
        v.iter()
            .map(|s| s.image.iter().map(|x| x * x * x).sum::<f64>() / s.image.len() as f64)
            .sum::<f64>()
            / v.len() as f64
    };
    let per_center: Vec<f64> = fed.centers.iter().map(|c| skewness(&c.train)).collect();
    for i in 0..per_center.len() {
        for j in i + 1..per_center.len() {
            assert!((per_center[i] - per_center[j]).abs() > 1e-3, "{per_center:?}");
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = build_federation_data(&default_centers(), 4, &GeomConfig::default(), 9).unwrap();
    let b = build_federation_data(&default_centers(), 4, &GeomConfig::default(), 9).unwrap();
    let c = build_federation_data(&default_centers(), 4, &GeomConfig::default(), 10).unwrap();
    assert_eq!(a.generic, b.generic);
    assert_eq!(a.centers[3].train, b.centers[3].train);
    assert_ne!(a.generic, c.generic);
}

#[test]
fn dataset_files_round_trip_and_are_reproducible() {
    let fed = build_federation_data(&default_centers(), 4, &GeomConfig::default(), 2).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(d1.path(), &fed).unwrap();
    write_dataset(d2.path(), &fed).unwrap();
    assert_eq!(
        std::fs::read(d1.path().join("manifest.json")).unwrap(),
        std::fs::read(d2.path().join("manifest.json")).unwrap()
    );
    let back = read_dataset(d1.path()).unwrap();
    assert_eq!(back.seed, fed.seed);
    assert_eq!(back.generic, fed.generic);
    for (x, y) in back.centers.iter().zip(&fed.centers) {
        assert_eq!(x.spec, y.spec);
        assert_eq!(x.train, y.train);
        assert_eq!(x.test, y.test);
    }
}

#[test]
fn single_pixel_erodes_to_nothing_on_a_5x5_grid() {
    let mut l = vec![0u8; 25];
    l[12] = 1;
    assert!(erode(&l, 5, 5, StructuringElement::disk(1)).iter().all(|&v| v == 0));
}
