//! Checks against the real MNIST files. Skipped (with a note) when they are
//! absent; see `scripts/fetch_mnist.sh`.

use std::path::{Path, PathBuf};

use cecr::config::RunConfig;
use cecr::data::{load_mnist_idx, Dataset};

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CECR_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    if dir.join("train-images-idx3-ubyte").exists() {
        Some(dir)
    } else {
        eprintln!("MNIST not found in {}; skipping", dir.display());
        None
    }
}

fn counts(ds: &Dataset) -> Vec<usize> {
    (0..ds.num_classes()).map(|c| ds.class_members(c).len()).collect()
}

#[test]
fn official_files_have_the_published_layout() {
    let Some(dir) = mnist_dir() else { return };
    let train = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(train.sample_shape(), &[28, 28, 1]);
    assert_eq!(train.sample_len(), 784);
    assert_eq!(train.num_classes(), 10);
    assert_eq!(counts(&train), [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]);
    assert_eq!(&train.labels()[..3], &[5, 0, 4]);
    assert!(train.samples().data().iter().all(|v| (0.0..=1.0).contains(v)));

    let test = load_mnist_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(test.len(), 10_000);
    assert_eq!(counts(&test), [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
    assert_eq!(test.labels()[0], 7);
}

#[test]
fn validation_split_is_the_last_ten_thousand() {
    let Some(dir) = mnist_dir() else { return };
    let text = format!(
        "[model]\nkind = cec\nlayers = 784,10\nclasses = 10\n[data]\nsource = mnist\nmnist_dir = {}\neval = validation\npairs_per_class = 1\n",
        dir.display()
    );
    let cfg = RunConfig::parse(&text, Path::new(".")).unwrap();
    let splits = cfg.data.load(0).unwrap();
    assert_eq!(splits.train.len(), 50_000);
    assert_eq!(splits.eval.len(), 10_000);
    let full = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(splits.eval.samples().row(0), full.samples().row(50_000));
    assert_eq!(splits.train.labels(), &full.labels()[..50_000]);
}
