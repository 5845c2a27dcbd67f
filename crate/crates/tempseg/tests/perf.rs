//! Manual timing probes (run with `--ignored --nocapture`).

use std::time::Instant;

use tempseg::datagen::{generate_dataset, SceneConfig};
use tempseg::models::{Architecture, Model, ModelSpec};
use tempseg::training::{TrainConfig, Trainer};

#[test]
#[ignore]
fn time_one_scene_step() {
    let config = SceneConfig { seed: 0, ..Default::default() };
    let data = generate_dataset(&config, 2, "train").unwrap();
    for (arch, bc) in [(Architecture::SsNet, 8), (Architecture::VssNet, 8)] {
        let mut spec = ModelSpec::new(arch, 6);
        spec.base_channels = bc;
        let model = Model::build(&spec, 0).unwrap();
        let mut trainer =
            Trainer::new(model, TrainConfig { epochs: 1, ..Default::default() }).unwrap();
        let t0 = Instant::now();
        trainer.run(&data.scenes, None).unwrap();
        println!(
            "{} bc={} : {:.2}s for 2 scenes (T=30, 64x64)",
            arch.label(),
            bc,
            t0.elapsed().as_secs_f64()
        );
    }
    let mut spec = ModelSpec::new(Architecture::MiniEsp, 6);
    spec.lstm_position = tempseg::models::LstmPosition::L1a;
    let model = Model::build(&spec, 0).unwrap();
    let mut trainer =
        Trainer::new(model, TrainConfig { epochs: 1, ..Default::default() }).unwrap();
    let t0 = Instant::now();
    trainer.run(&data.scenes, None).unwrap();
    println!("MiniEsp L1a : {:.2}s for 2 scenes", t0.elapsed().as_secs_f64());
}
