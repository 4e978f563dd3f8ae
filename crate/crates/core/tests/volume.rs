use std::path::PathBuf;

use proptest::prelude::*;
use vmamba3d::tensor::Tensor;
use vmamba3d::volume::{
    normalize01, read_nifti, resize_to, stratified_split, write_nifti, ClassLabel, Entry, Manifest,
    Split, Volume,
};

fn f32_volume() -> impl Strategy<Value = Volume> {
    (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(-1e6f32..1e6, d * h * w).prop_map(move |v| {
            let data = v.into_iter().map(f64::from).collect();
            Volume::new(Tensor::new([d, h, w], data).unwrap(), [1.5, 1.0, 2.0], "p").unwrap()
        })
    })
}

fn manifest(counts: [usize; 3]) -> Manifest {
    let mut entries = Vec::new();
    for label in ClassLabel::ALL {
        for i in 0..counts[label.index()] {
            entries.push(Entry {
                path: PathBuf::from(format!("/v/{label}/{i}.nii")),
                label,
                split: Split::None,
            });
        }
    }
    Manifest::new(entries).unwrap()
}

proptest! {
    #[test]
    fn nifti_round_trip_is_voxel_exact(v in f32_volume()) {
        let back = read_nifti(&write_nifti(&v).unwrap(), "p").unwrap();
        prop_assert_eq!(back.voxels(), v.voxels());
        prop_assert_eq!(back.spacing_mm(), v.spacing_mm());
    }

    #[test]
    fn normalize_lands_in_unit_interval(v in f32_volume()) {
        let n = normalize01(&v);
        prop_assert!(n.voxels().data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn resize_hits_target_and_keeps_range(v in f32_volume(), t in (1usize..9, 1usize..9, 1usize..9)) {
        let target = [t.0, t.1, t.2];
        let r = resize_to(&v, target).unwrap();
        prop_assert_eq!(r.dims(), target);
        let (lo, hi) = v.voxels().data().iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(r.voxels().data().iter().all(|&x| x >= lo - 1e-6 && x <= hi + 1e-6));
    }

    #[test]
    fn split_is_a_stratified_partition(
        counts in (0usize..40, 0usize..40, 0usize..40),
        fraction in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let m = manifest([counts.0, counts.1, counts.2]);
        let (train, test) = stratified_split(&m, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), m.len());
        let tr = train.class_counts();
        let c = m.class_counts();
        for k in 0..3 {
            prop_assert_eq!(tr[k], (fraction * c[k] as f64 + 1e-9).floor() as usize);
        }
        let mut paths: Vec<_> = train.entries().iter().chain(test.entries()).map(|e| e.path.clone()).collect();
        paths.sort();
        paths.dedup();
        prop_assert_eq!(paths.len(), m.len());
        prop_assert!(train.entries().iter().all(|e| e.split == Split::Train));
        prop_assert!(test.entries().iter().all(|e| e.split == Split::Test));
        let (again, _) = stratified_split(&m, fraction, seed).unwrap();
        prop_assert_eq!(again, train);
    }
}

#[test]
fn reference_split_counts() {
    let (train, test) = stratified_split(&manifest([476, 1116, 702]), 0.8, 0).unwrap();
    assert_eq!(train.class_counts(), [380, 892, 561]);
    assert_eq!(test.class_counts(), [96, 224, 141]);
}

#[test]
fn manifest_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Manifest::new(
        ClassLabel::ALL
            .iter()
            .map(|&label| Entry {
                path: dir.path().join(format!("{label}.nii")),
                label,
                split: Split::Test,
            })
            .collect(),
    )
    .unwrap();
    m.seed = Some(12);
    let path = dir.path().join("m.tsv");
    m.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("AD.nii\tAD\ttest"), "{text}");
    assert_eq!(Manifest::load(&path).unwrap(), m);
}

#[test]
fn relative_entries_are_written_relative_to_the_manifest() {
    let m = Manifest::new(
        ClassLabel::ALL
            .iter()
            .map(|&label| Entry {
                path: PathBuf::from(format!("data/{label}.nii")),
                label,
                split: Split::None,
            })
            .collect(),
    )
    .unwrap();
    let base = std::path::absolute("data").unwrap();
    let text = m.to_tsv(&base).unwrap();
    assert!(text.starts_with("AD.nii\tAD\t"), "{text}");
    let back = Manifest::parse(&text, &base).unwrap();
    assert_eq!(back.entries()[0].path, base.join("AD.nii"));
}
