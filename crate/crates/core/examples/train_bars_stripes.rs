//! Trains a small centered DBM on bars-and-stripes with each algorithm and
//! prints the exact training log-likelihood as it goes.

use mfng::cli::data::{synthetic_dataset, Split, SyntheticKind};
use mfng::eval::exact_loglik;
use mfng::optim::{initial_model, Algorithm, TrainConfig, TrainObserver, Trainer, WeightInit};

struct Progress<'a>(&'a [Vec<f64>]);

impl TrainObserver for Progress<'_> {
    fn on_epoch(&mut self, t: &Trainer) -> mfng::Result<()> {
        if t.state.epoch % 10 == 0 {
            print!(" {:.3}", exact_loglik(&t.model, self.0)?);
        }
        Ok(())
    }
}

fn main() -> mfng::Result<()> {
    let data = synthetic_dataset(SyntheticKind::BarsStripes { rows: 3, cols: 4 }, 64, 0, 0, Split::Train)?.rows;
    for algorithm in Algorithm::ALL {
        let model = initial_model(&[12, 6, 4], &data, WeightInit::Glorot, 0)?;
        print!("{algorithm:<10} {:.3}", exact_loglik(&model, &data)?);
        let config = TrainConfig {
            algorithm,
            batch_size: 16,
            chains: Some(64),
            epochs: 60,
            ..Default::default()
        };
        Trainer::new(model, config)?.run(&data, &mut Progress(&data))?;
        println!();
    }
    Ok(())
}
