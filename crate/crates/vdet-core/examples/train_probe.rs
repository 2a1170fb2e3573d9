// Experiment: desk-scale training to mAP on a held-out synthetic split.
use vdet_core::data::synth_dataset;
use vdet_core::model::{build_model, ModelConfig};
use vdet_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let img: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let width: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.003);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);
    let n_train: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(256);
    let n_val: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let augment: bool = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(true);
    let batch: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(16);

    let full = synth_dataset(n_train + n_val, 4, 42, img).unwrap();
    let (train_set, val_set) = full.split_tail(n_val);
    let cfg = ModelConfig {
        num_classes: 4,
        class_names: train_set.class_names.clone(),
        width_mult: width,
        input_size: img,
        ..Default::default()
    };
    let mut model = build_model::<f32>(&cfg, 7).unwrap();
    let tcfg = TrainConfig {
        batch_size: batch,
        lr0: lr,
        eta_min: lr / 100.0,
        epochs,
        patience: epochs, // disabled for the probe
        augment,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(&mut model, &train_set, &val_set, &tcfg, 3).unwrap();
    for e in &out.history.epochs {
        println!(
            "epoch {:3}  loss {:.4}  P {:.3} R {:.3} mAP {:.4}  {:.1}s",
            e.epoch, e.train_loss, e.precision, e.recall, e.map50, e.seconds
        );
    }
    println!(
        "=> img={img} w={width} lr={lr} aug={augment}: best mAP {:.4} at epoch {} | total {:.0}s",
        out.best_map50, out.best_epoch, t0.elapsed().as_secs_f64()
    );
}
