//! Trains the desk-scale model on the generated toy dataset with per-epoch
//! checkpoints, resumes a second run from the midpoint, and evaluates both.
//!
//! ```text
//! cargo run --example train_toy -- /tmp/toy_run
//! ```

use std::path::PathBuf;

use cfrg::config::Config;
use cfrg::dataset::scan_layout;
use cfrg::synth::TextureBank;
use cfrg::toy::{generate, ToySpec};
use cfrg::train::{self, checkpoint_path, Trainer};

fn main() -> cfrg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy_run".into()));
    let spec = ToySpec::default();
    let data = dir.join("data");
    generate(&data, &spec)?;

    let mut cfg = Config::desk();
    cfg.dataset.root = data.clone();
    cfg.dataset.categories = vec![spec.category.clone()];
    cfg.synth.texture_root = data.join("textures");
    let index = scan_layout(&data, &spec.category)?;
    let train_set = train::load_split(&index.train(), cfg.dataset.resolution)?;
    let test_set = train::load_split(&index.test(), cfg.dataset.resolution)?;
    let textures = TextureBank::load(&cfg.synth.texture_root, cfg.dataset.resolution)?;

    let untrained = train::build_model(&cfg, &candle_core::Device::Cpu)?;
    let before = train::evaluate_samples(&untrained, &test_set, &cfg, &spec.category)?;

    let ckpts = dir.join("checkpoints");
    let mut trainer = Trainer::new(cfg.clone(), train_set.clone(), textures.clone())?;
    for e in trainer.train(Some(&ckpts))? {
        println!("epoch {:2} lr {:.1e} loss {:.4} corrupted {:.0}%", e.epoch, e.lr, e.mean_total, 100.0 * e.corrupted_fraction);
    }
    let after = train::evaluate_samples(trainer.model(), &test_set, &cfg, &spec.category)?;

    let mid = checkpoint_path(&ckpts, cfg.train.epochs / 2);
    let mut resumed = Trainer::resume(cfg.clone(), train_set, textures, &mid)?;
    resumed.train(None)?;
    let again = train::evaluate_samples(resumed.model(), &test_set, &cfg, &spec.category)?;

    println!("{}", cfrg::metrics::MetricsReport::CSV_HEADER);
    for (name, r) in [("untrained", &before), ("trained", &after), ("resumed", &again)] {
        println!("{name}: {}", r.csv_row());
    }
    Ok(())
}
