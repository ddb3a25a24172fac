//! Full experiment on IDX image files.
//!
//! ```text
//! cargo run --release --example mnist_idx -- train-images-idx3-ubyte t10k-images-idx3-ubyte
//! ```
//!
//! Without arguments a tiny synthetic IDX pair is written first, so the
//! example runs anywhere. Outputs land in a temporary directory.

use std::path::PathBuf;

use mfng::cli::config::ExperimentConfig;
use mfng::cli::data::{write_idx, IdxMatrix};
use mfng::cli::experiment::{run_experiment, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fake_images(n: usize, seed: u64) -> IdxMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let stroke = rng.random_range(0..7);
            (0..49)
                .map(|p| {
                    if p % 7 == stroke {
                        1.0
                    } else {
                        rng.random_range(0..100) as f64 / 255.0
                    }
                })
                .collect()
        })
        .collect();
    IdxMatrix {
        dims: vec![n, 7, 7],
        rows,
    }
}

fn main() -> mfng::Result<()> {
    let work = tempfile::tempdir()?;
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let (train, test, sizes, subset) = match args.as_slice() {
        [train, test] => (train.clone(), test.clone(), "[784, 400, 100]", 1000),
        _ => {
            let train = work.path().join("train.idx");
            let test = work.path().join("test.idx");
            write_idx(&train, &fake_images(200, 1))?;
            write_idx(&test, &fake_images(50, 2))?;
            (train, test, "[49, 16, 8]", 200)
        }
    };

    let config = ExperimentConfig::from_toml_str(&format!(
        r#"
version = 1
[model]
layer_sizes = {sizes}
[data]
kind = "idx"
train_images = {train:?}
test_images = {test:?}
train_subset = {subset}
test_subset = {subset}
[train]
algorithm = "mfng"
learning_rate = 5e-3
batch_size = 25
epochs = 3
[ais]
n_particles = 20
n_betas = 500
"#
    ))?;
    let out = work.path().join("run");
    let summary = run_experiment(
        &config,
        &RunOptions {
            out_dir: Some(out.clone()),
            resume: false,
        },
    )?;
    println!("{} updates", summary.updates);
    print!("{}", std::fs::read_to_string(out.join("metrics.csv"))?);
    print!("{}", std::fs::read_to_string(out.join("timing.csv"))?);
    Ok(())
}
