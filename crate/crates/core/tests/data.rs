use nlran::data::{
    center_crop, generate_phantom, generate_phantoms, preprocess, slice_indices, split, Class, Manifest, ManifestRecord,
    PhantomSpec, PreprocessConfig, Split, SplitCounts, Volume,
};
use nlran::{Error, Tensor};
use proptest::prelude::*;

fn records(labels: &[Class]) -> Vec<ManifestRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| ManifestRecord { id: format!("s{}", i), path: format!("s{}.nlt", i), label, mask_path: None, lesion_path: None, split: None })
        .collect()
}

#[test]
fn phantoms_are_balanced_and_reproducible() {
    let spec = PhantomSpec { seed: 9, ..Default::default() };
    let a = generate_phantoms(&spec, 30).unwrap();
    let b = generate_phantoms(&spec, 30).unwrap();
    assert_eq!(a.len(), 30);
    for c in Class::ALL {
        assert_eq!(a.iter().filter(|p| p.volume.label == c).count(), 10);
    }
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.volume, y.volume);
    }
    let other = generate_phantoms(&PhantomSpec { seed: 10, ..Default::default() }, 30).unwrap();
    assert_ne!(a[0].volume.voxels, other[0].volume.voxels);
}

#[test]
fn phantom_lesions_match_class() {
    let spec = PhantomSpec::default();
    for (i, c) in Class::ALL.iter().enumerate() {
        let p = generate_phantom(&spec, i, *c).unwrap();
        p.volume.validate().unwrap();
        let lesion = p.volume.lesion.as_ref().unwrap();
        let voxels: f64 = lesion.data().iter().sum();
        match c {
            Class::Normal => assert_eq!(voxels, 0.0),
            _ => assert!(voxels > 0.0 && !p.lesions.is_empty()),
        }
        assert!(p.volume.voxels.data().iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
    }
}

#[test]
fn preprocess_produces_target_shape_and_keeps_lesion() {
    let cfg = PreprocessConfig::default();
    for p in generate_phantoms(&PhantomSpec::default(), 9).unwrap() {
        let v = preprocess(&p.volume, &cfg).unwrap();
        assert_eq!(v.extents(), [cfg.slices, cfg.crop[0], cfg.crop[1]]);
        assert_eq!(v.lesion.as_ref().unwrap().shape(), v.voxels.shape());
        // voxels outside the lung mask are zero
        let mask = v.mask.as_ref().unwrap();
        assert!(v.voxels.data().iter().zip(mask.data()).all(|(&x, &m)| m == 1.0 || x == 0.0));
    }
}

#[test]
fn undersized_scan_is_a_data_error() {
    let v = Volume::new("tiny", Tensor::zeros(&[4, 10, 10]), Class::Normal).unwrap();
    assert!(matches!(center_crop(&v, [32, 32]), Err(Error::Data(_))));
}

#[test]
fn out_of_range_voxels_are_rejected() {
    assert!(Volume::new("bad", Tensor::full(&[2, 2, 2], 300.0), Class::CP).is_err());
}

#[test]
fn duplicate_ids_are_rejected() {
    let mut r = records(&[Class::CP, Class::NCP]);
    r[1].id = r[0].id.clone();
    assert!(Manifest::new(r, ".").is_err());
}

#[test]
fn manifest_and_volume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = generate_phantom(&PhantomSpec::default(), 0, Class::CP).unwrap();
    let rec = Manifest::write_volume(dir.path(), &p.volume, Some(Split::Val)).unwrap();
    let m = Manifest::new(vec![rec], dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    m.save(&path).unwrap();
    let back = Manifest::load(&path).unwrap();
    assert_eq!(back.records, m.records);
    let v = back.load_volume(&back.records[0]).unwrap();
    assert_eq!(v, p.volume);
}

#[test]
fn missing_volume_file_fails_load() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest::new(records(&[Class::CP]), dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    m.save(&path).unwrap();
    assert!(Manifest::load(&path).is_err());
}

#[test]
fn split_of_4079_scans() {
    let labels: Vec<Class> = (0..4079).map(|i| Class::ALL[i % 3]).collect();
    let m = split(&Manifest::new(records(&labels), ".").unwrap(), [8, 1, 1], 0).unwrap();
    let c = SplitCounts::of(&m);
    assert_eq!((c.train, c.val, c.test), (3263, 408, 408));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_a_partition_and_stratified(n in 3usize..200, seed in any::<u64>()) {
        let labels: Vec<Class> = (0..n).map(|i| Class::ALL[(i * 7) % 3]).collect();
        let m = split(&Manifest::new(records(&labels), ".").unwrap(), [8, 1, 1], seed).unwrap();
        prop_assert_eq!(m.records.len(), n);
        prop_assert!(m.records.iter().all(|r| r.split.is_some()));
        let c = SplitCounts::of(&m);
        prop_assert_eq!(c.train + c.val + c.test, n);
        for class in Class::ALL {
            let total = m.records.iter().filter(|r| r.label == class).count() as f64;
            let train = m.in_split(Split::Train).filter(|r| r.label == class).count() as f64;
            prop_assert!((train - 0.8 * total).abs() <= 2.0);
        }
        let again = split(&Manifest::new(records(&labels), ".").unwrap(), [8, 1, 1], seed).unwrap();
        prop_assert_eq!(again.records, m.records);
    }

    #[test]
    fn slice_indices_are_monotone_and_in_range(source in 1usize..300, target in 1usize..100) {
        let idx = slice_indices(source, target).unwrap();
        prop_assert_eq!(idx.len(), target);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < source));
    }
}
