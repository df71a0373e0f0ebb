//! Regenerates the files under `assets/`.
//!
//! cargo run --release -p covprop --example make_assets

use std::path::PathBuf;

use covprop::data::{save_dataset, toy_test, toy_train, TOY_RMAX, TOY_SIGMA};
use covprop::network::{build_lenet_small, save_file, Shape3};
use covprop::train::{train_loop, LossConfig, TrainConfig};

fn main() -> covprop::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets");
    std::fs::create_dir_all(&dir)?;
    let train = toy_train();
    save_dataset(&train, dir.join("toy_train.json"))?;
    save_dataset(&toy_test(), dir.join("toy_test.json"))?;

    save_file(&build_lenet_small(Shape3::new(28, 28, 1), 10, 0)?, dir.join("lenet_small_seed0.cvpr"))?;

    let init = build_lenet_small(train.shape(), train.class_count, 0)?;
    let cfg = TrainConfig::new(LossConfig::new(0.0, TOY_SIGMA), TOY_RMAX);
    let (net, metrics) = train_loop(&init, &train, None, &cfg, 0)?;
    let last = metrics.last().expect("at least one epoch");
    println!("toy base: train acc {:.3}, propagated ACR {:.4}", last.clean_acc, last.acr);
    save_file(&net, dir.join("toy_base.cvpr"))?;
    Ok(())
}
