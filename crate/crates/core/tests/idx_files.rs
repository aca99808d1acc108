use std::fs;
use std::path::Path;

use cyber0::data::{load_mnist_idx, MnistFiles};
use cyber0::error::IdxErrorKind;
use cyber0::Error;

fn write_images(path: &Path, count: u32, rows: u32, cols: u32, pixels: &[u8]) {
    let mut bytes = vec![0, 0, 8, 3];
    for v in [count, rows, cols] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).unwrap();
}

fn write_labels(path: &Path, labels: &[u8]) {
    let mut bytes = vec![0, 0, 8, 1];
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).unwrap();
}

#[test]
fn parses_a_small_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write_images(&img, 3, 2, 2, &[0, 255, 51, 0, 0, 0, 0, 0, 255, 255, 255, 255]);
    write_labels(&lab, &[7, 0, 9]);
    let d = load_mnist_idx(&img, &lab).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.feature_dim(), 4);
    assert_eq!(d.num_classes(), 10);
    assert_eq!(d.labels(), &[7, 0, 9]);
    assert_eq!(d.features(0), vec![0.0, 1.0, 0.2, 0.0]);
    assert_eq!(d.features(1), vec![0.0; 4]);
    assert_eq!(d.features(2), vec![1.0; 4]);
}

fn idx_kind(e: Error) -> IdxErrorKind {
    match e {
        Error::IdxParse { kind, .. } => kind,
        other => panic!("expected an IDX error, got {other:?}"),
    }
}

#[test]
fn rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write_labels(&lab, &[1, 2]);

    // labels where images are expected
    write_labels(&img, &[1, 2]);
    assert!(matches!(idx_kind(load_mnist_idx(&img, &lab).unwrap_err()), IdxErrorKind::BadMagic { .. }));

    write_images(&img, 2, 2, 2, &[0; 7]);
    assert!(matches!(idx_kind(load_mnist_idx(&img, &lab).unwrap_err()), IdxErrorKind::Truncated { .. }));

    fs::write(&img, [0, 0, 8]).unwrap();
    assert!(matches!(idx_kind(load_mnist_idx(&img, &lab).unwrap_err()), IdxErrorKind::Truncated { .. }));

    write_images(&img, 2, 0, 2, &[]);
    assert!(matches!(idx_kind(load_mnist_idx(&img, &lab).unwrap_err()), IdxErrorKind::BadShape(_)));

    write_images(&img, 3, 1, 1, &[0, 0, 0]);
    assert!(matches!(load_mnist_idx(&img, &lab), Err(Error::CountMismatch { images: 3, labels: 2 })));

    write_images(&img, 2, 1, 1, &[0, 0]);
    write_labels(&lab, &[1, 10]);
    assert!(matches!(idx_kind(load_mnist_idx(&img, &lab).unwrap_err()), IdxErrorKind::BadShape(_)));

    assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lab), Err(Error::Io(_))));
}

#[test]
fn directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let files = MnistFiles::in_dir(dir.path());
    assert!(!files.exist());
    write_images(&files.train_images, 2, 1, 2, &[0, 255, 255, 0]);
    write_labels(&files.train_labels, &[3, 4]);
    write_images(&files.test_images, 1, 1, 2, &[255, 255]);
    write_labels(&files.test_labels, &[5]);
    assert!(files.exist());
    let (train, test) = files.load().unwrap();
    assert_eq!((train.len(), test.len()), (2, 1));
    assert_eq!(test.features(0), vec![1.0, 1.0]);
}
