#![allow(dead_code)]
pub mod grad;

use std::path::Path;
use std::time::Instant;

use leafscope::dataset::{load_split, scan_dataset, split_dataset, LabeledSet, Manifest, SplitAssignment, SplitTag};
use leafscope::exec;
use leafscope::model::{build_leaf_cnn, fit, FitOutcome, ModelGraph, TrainConfig};
use leafscope::preprocess::{BinaryMask, PreprocessConfig};
use leafscope::synth;

pub const SYNTH_SEED: u64 = 7;
pub const SYNTH_PER_CLASS: usize = 20;
pub const SYNTH_SIZE: usize = 128;

pub struct SyntheticRun {
    pub model: ModelGraph<f32>,
    pub outcome: FitOutcome,
    pub manifest: Manifest,
    pub split: SplitAssignment,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    /// Class-signature region of each test image, aligned with `test`.
    pub test_regions: Vec<BinaryMask>,
    pub train_secs: f64,
}

/// Sample index encoded in a corpus file name `img_NNNN.png`.
fn sample_index(path: &str) -> usize {
    let stem = Path::new(path).file_stem().unwrap().to_str().unwrap();
    stem.trim_start_matches("img_").parse().unwrap()
}

/// Writes the 21-class corpus, splits it, and trains the full CNN on one worker.
pub fn train_synthetic(dir: &Path, epochs: usize, mut on_epoch: impl FnMut(&leafscope::model::EpochRecord)) -> SyntheticRun {
    exec::set_workers(1);
    synth::write_corpus(dir, SYNTH_PER_CLASS, SYNTH_SEED, SYNTH_SIZE).unwrap();
    let manifest = scan_dataset(dir).unwrap();
    let split = split_dataset(&manifest, 42).unwrap();
    let cfg = PreprocessConfig {
        background_removal: false,
        size: SYNTH_SIZE,
        ..PreprocessConfig::default()
    };
    let train = load_split(&manifest, &split, SplitTag::Train, dir, &cfg).unwrap();
    let val = load_split(&manifest, &split, SplitTag::Val, dir, &cfg).unwrap();
    let test = load_split(&manifest, &split, SplitTag::Test, dir, &cfg).unwrap();
    let test_regions = split
        .indices(SplitTag::Test)
        .into_iter()
        .map(|i| {
            let e = &manifest.entries[i];
            synth::sample(e.class_id, sample_index(&e.path), SYNTH_SEED, SYNTH_SIZE).region
        })
        .collect();
    let mut model = build_leaf_cnn(manifest.num_classes(), 42).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-4,
        epochs,
        batch_size: 32,
        seed: 42,
    };
    let start = Instant::now();
    let outcome = fit(&mut model, &train, &val, &tc, &mut on_epoch).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    SyntheticRun {
        model,
        outcome,
        manifest,
        split,
        train,
        val,
        test,
        test_regions,
        train_secs,
    }
}
