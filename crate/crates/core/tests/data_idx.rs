use std::fs;
use std::io::Write;
use std::path::Path;

use fedshare_core::data::{load_dir, load_idx, read_idx, DataError, DatasetKind, IMAGES_MAGIC, LABELS_MAGIC};
use flate2::write::GzEncoder;
use flate2::Compression;

fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}

fn images(count: u32, side: u32) -> Vec<u8> {
    let body: Vec<u8> = (0..count * side * side).map(|i| (i % 251) as u8).collect();
    idx(IMAGES_MAGIC, &[count, side, side], &body)
}

fn labels(values: &[u8]) -> Vec<u8> {
    idx(LABELS_MAGIC, &[values.len() as u32], values)
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn put(dir: &Path, name: &str, bytes: &[u8]) {
    fs::write(dir.join(name), bytes).unwrap();
}

#[test]
fn reads_plain_and_gzipped_files() {
    let dir = tempfile::tempdir().unwrap();
    put(dir.path(), "img", &images(3, 2));
    put(dir.path(), "img.gz", &gz(&images(3, 2)));
    let (dims, body) = read_idx(&dir.path().join("img"), IMAGES_MAGIC).unwrap();
    assert_eq!(dims, vec![3, 2, 2]);
    assert_eq!(body.len(), 12);
    assert_eq!(read_idx(&dir.path().join("img.gz"), IMAGES_MAGIC).unwrap(), (dims, body));
}

#[test]
fn loads_image_label_pairs() {
    let dir = tempfile::tempdir().unwrap();
    put(dir.path(), "img", &images(3, 2));
    put(dir.path(), "lbl", &labels(&[7, 0, 9]));
    let ds = load_idx(&dir.path().join("img"), &dir.path().join("lbl")).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.features(), 4);
    assert_eq!(ds.labels(), &[7, 0, 9]);
    assert_eq!(ds.pixel_row(1), &[4, 5, 6, 7]);
}

#[test]
fn rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    put(dir.path(), "swapped", &labels(&[1, 2]));
    assert!(matches!(read_idx(&p("swapped"), IMAGES_MAGIC), Err(DataError::BadMagic { found: 0x801, .. })));
    let mut short = images(3, 2);
    short.truncate(short.len() - 1);
    put(dir.path(), "short", &short);
    assert!(matches!(read_idx(&p("short"), IMAGES_MAGIC), Err(DataError::TruncatedFile { .. })));
    put(dir.path(), "img", &images(3, 2));
    put(dir.path(), "two", &labels(&[1, 2]));
    assert!(matches!(load_idx(&p("img"), &p("two")), Err(DataError::DimensionMismatch(_))));
    put(dir.path(), "big", &labels(&[1, 2, 10]));
    assert!(matches!(load_idx(&p("img"), &p("big")), Err(DataError::OutOfRange { label: 10, .. })));
    assert!(matches!(read_idx(&p("absent"), IMAGES_MAGIC), Err(DataError::Io { .. })));
}

#[test]
fn loads_mnist_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    put(dir.path(), "train-images-idx3-ubyte", &images(4, 28));
    put(dir.path(), "train-labels-idx1-ubyte", &labels(&[1, 2, 3, 4]));
    put(dir.path(), "t10k-images-idx3-ubyte.gz", &gz(&images(2, 28)));
    put(dir.path(), "t10k-labels-idx1-ubyte.gz", &gz(&labels(&[5, 6])));
    let ds = load_dir(DatasetKind::Mnist, dir.path()).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.labels(), &[1, 2, 3, 4, 5, 6]);
    assert!(matches!(
        load_dir(DatasetKind::Emnist, dir.path()),
        Err(DataError::DataNotFound { .. })
    ));
}
