use std::collections::BTreeSet;
use std::io::Write;

use micronas::data::{generate_synthetic, DataError, DataSource, DatasetSpec, SplitFractions, SyntheticRecipe};
use micronas::tensor::Tensor3;

fn csv_spec(path: &std::path::Path, ts_l: usize, stride: Option<usize>, seed: u64) -> DatasetSpec {
    DatasetSpec {
        source: DataSource::Csv {
            path: path.into(),
            label_column: "label".into(),
            channel_columns: vec!["ax".into(), "flat".into()],
        },
        ts_l,
        window_stride: stride,
        split: SplitFractions::default(),
        seed,
    }
}

fn write_csv(rows: usize) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "time,ax,flat,label").unwrap();
    for i in 0..rows {
        writeln!(f, "{i},{},{},{}", (i as f64 * 0.1).sin(), 3.5, (i / 64) % 2).unwrap();
    }
    f
}

#[test]
fn csv_windows_at_stride() {
    let f = write_csv(256);
    let ds = csv_spec(f.path(), 128, Some(64), 0).build().unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.window_shape().t, 128);
    assert_eq!(ds.window_shape().s, 2);
    let ds = csv_spec(f.path(), 128, None, 0).build().unwrap();
    assert_eq!(ds.len(), 2);
}

#[test]
fn constant_channel_normalizes_to_zero() {
    let f = write_csv(640);
    let ds = csv_spec(f.path(), 32, None, 1).build().unwrap();
    assert_eq!(ds.normalization().std[1], 1e-8);
    for i in 0..ds.len() {
        let (x, _) = ds.sample(i);
        assert!(x.data().iter().skip(1).step_by(2).all(|v| *v == 0.0));
    }
}

#[test]
fn normalization_uses_train_split_only() {
    let f = write_csv(640);
    let ds = csv_spec(f.path(), 32, None, 4).build().unwrap();
    let raw = |w: usize| (w * 32..w * 32 + 32).map(|i| (i as f64 * 0.1).sin());
    let train_mean = ds.train_indices().iter().flat_map(|&w| raw(w)).sum::<f64>() / (ds.train_indices().len() * 32) as f64;
    let all_mean = (0..ds.len()).flat_map(raw).sum::<f64>() / (ds.len() * 32) as f64;
    assert!((ds.normalization().mean[0] - train_mean).abs() < 1e-12);
    assert!((train_mean - all_mean).abs() > 1e-6);
    assert_eq!(ds.normalization().mean[1], 3.5);
    let stripped = ds.without_test();
    assert_eq!(stripped.test_len(), 0);
    assert_eq!(stripped.normalization(), ds.normalization());
}

#[test]
fn splits_are_disjoint_covering_and_seeded() {
    let spec = |seed| DatasetSpec {
        source: DataSource::Synthetic(SyntheticRecipe::new(3, 16, 2, 20, 0)),
        ts_l: 16,
        window_stride: None,
        split: SplitFractions::default(),
        seed,
    };
    let a = spec(9).build().unwrap();
    let b = spec(9).build().unwrap();
    let c = spec(10).build().unwrap();
    assert_eq!(a.train_indices(), b.train_indices());
    assert_eq!(a.val_indices(), b.val_indices());
    assert_ne!(a.train_indices(), c.train_indices());
    let train: BTreeSet<usize> = a.train_indices().iter().copied().collect();
    let val: BTreeSet<usize> = a.val_indices().iter().copied().collect();
    assert_eq!(train.len() + val.len() + a.test_len(), a.len());
    assert!(train.is_disjoint(&val));
    assert_eq!((train.len(), val.len(), a.test_len()), (36, 12, 12));
    assert_eq!(a.test_reads(), 0);
    let _ = a.test();
    assert_eq!(a.test_reads(), 1);
}

#[test]
fn csv_errors_are_reported() {
    let f = write_csv(100);
    assert!(matches!(csv_spec(f.path(), 128, None, 0).build(), Err(DataError::Invalid(_))));
    let mut spec = csv_spec(f.path(), 32, None, 0);
    if let DataSource::Csv { channel_columns, .. } = &mut spec.source {
        channel_columns.push("gyro".into());
    }
    assert!(matches!(spec.build(), Err(DataError::MissingColumn(c)) if c == "gyro"));
    let mut bad = tempfile::NamedTempFile::new().unwrap();
    writeln!(bad, "ax,flat,label\n1,2,0\n1,x,0").unwrap();
    assert!(matches!(csv_spec(bad.path(), 1, None, 0).build(), Err(DataError::BadRow { row: 3, .. })));
    let mut ragged = tempfile::NamedTempFile::new().unwrap();
    writeln!(ragged, "ax,flat,label\n1,2,0\n1,2").unwrap();
    assert!(csv_spec(ragged.path(), 1, None, 0).build().is_err());
}

fn sq_dist(a: &Tensor3, b: &Tensor3) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Accuracy of 1-nearest-neighbor on raw windows, first half as reference.
fn one_nn(recipe: &SyntheticRecipe) -> f64 {
    let (windows, labels) = generate_synthetic(recipe).unwrap();
    let half = windows.len() / 2;
    let correct = (half..windows.len())
        .filter(|&i| {
            let nn = (0..half)
                .min_by(|&a, &b| sq_dist(&windows[i], &windows[a]).total_cmp(&sq_dist(&windows[i], &windows[b])))
                .unwrap();
            labels[nn] == labels[i]
        })
        .count();
    correct as f64 / (windows.len() - half) as f64
}

#[test]
fn noiseless_classes_are_separable() {
    let mut r = SyntheticRecipe::new(4, 32, 6, 40, 2);
    r.noise_std = 0.0;
    assert_eq!(one_nn(&r), 1.0);
}

#[test]
fn heavy_noise_drops_to_near_chance() {
    let mut r = SyntheticRecipe::new(4, 32, 3, 100, 2);
    r.noise_std = 5.0;
    let acc = one_nn(&r);
    assert!(acc < 0.4, "1-NN accuracy {acc} with noise 5x amplitude");
}

#[test]
fn synthetic_data_is_bit_identical_per_seed() {
    let r = SyntheticRecipe::new(4, 32, 3, 10, 11);
    let (a, la) = generate_synthetic(&r).unwrap();
    let (b, lb) = generate_synthetic(&r).unwrap();
    assert_eq!(la, lb);
    assert!(a.iter().zip(&b).all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())));
    let (c, _) = generate_synthetic(&SyntheticRecipe { seed: 12, ..r.clone() }).unwrap();
    assert_ne!(a, c);
    assert_eq!(la.iter().filter(|l| **l == 3).count(), 10);
}
