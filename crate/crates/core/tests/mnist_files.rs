//! Checks against the real MNIST files. Skipped with a notice when the
//! files are not present (see `scripts/fetch_mnist.sh`).

use std::path::PathBuf;

use gcaps::mnist::{read_idx_file, Dataset, Split};
use gcaps::model::{Arch, Model, ModelSpec};
use gcaps::train::evaluate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("GCAPS_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    if dir.join("t10k-labels-idx1-ubyte").is_file() || dir.join("t10k-labels-idx1-ubyte.gz").is_file() {
        Some(dir)
    } else {
        eprintln!("MNIST not found at {}; skipping", dir.display());
        None
    }
}

#[test]
fn real_files_parse_with_expected_extents() {
    let Some(dir) = data_dir() else { return };
    let train = Dataset::load(&dir, Split::Train).unwrap();
    let test = Dataset::load(&dir, Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert_eq!(train.image_shape(), [1, 28, 28]);
    let mut counts = [0usize; 10];
    for &l in test.labels() {
        counts[l as usize] += 1;
    }
    assert!(counts.iter().all(|&c| c > 800), "{counts:?}");
}

#[test]
fn real_files_reserialize_byte_for_byte() {
    let Some(dir) = data_dir() else { return };
    let path = dir.join("t10k-labels-idx1-ubyte");
    if !path.is_file() {
        return;
    }
    let arr = read_idx_file(&path).unwrap();
    assert_eq!(gcaps::mnist::serialize_idx(&arr), std::fs::read(&path).unwrap());
}

#[test]
fn untrained_model_is_near_chance() {
    let Some(dir) = data_dir() else { return };
    let test = Dataset::load(&dir, Split::Test).unwrap().head(200);
    let model = Model::<f32>::new(ModelSpec::preset(Arch::FcGcaps), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = evaluate(&model, &test, 50).unwrap();
    assert!((80.0..=100.0).contains(&err), "untrained error {err}");
}
