// Experiment: single-image overfit speed for several lr values.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdet_core::data::synth_dataset;
use vdet_core::model::{build_model, ModelConfig};
use vdet_core::train::{adam_step, assign_targets, batch_images, detection_loss, AdamState, TrainConfig};
use vdet_core::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let img: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let width: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);

    let ds = synth_dataset(1, 4, 42, img).unwrap();
    let cfg = ModelConfig {
        num_classes: 4,
        class_names: ds.class_names.clone(),
        width_mult: width,
        input_size: img,
        ..Default::default()
    };
    let mut model = build_model::<f32>(&cfg, 7).unwrap();
    let tcfg = TrainConfig { lr0: lr, ..Default::default() };
    let mut adam = AdamState::new(&model.store);
    let images = batch_images(&ds.samples, tcfg.mean, tcfg.std);
    let anns = vec![ds.samples[0].annotations.clone()];
    let t0 = std::time::Instant::now();
    let mut initial = 0.0;
    let mut last = 0.0;
    let _ = ChaCha8Rng::seed_from_u64(0);
    for step in 0..steps {
        let mut tape = Tape::new();
        let iv = tape.constant(images.clone());
        let (raw, vars) = model.forward_on_tape(&mut tape, iv, true).unwrap();
        let grids: Vec<(usize, usize)> = raw.scales.iter().map(|s| (s.h, s.w)).collect();
        let strides: Vec<usize> = raw.scales.iter().map(|s| s.stride).collect();
        let targets = assign_targets(&anns, &grids, &strides, 1);
        let (total, parts) = detection_loss(&mut tape, &raw, &targets, 4, &tcfg).unwrap();
        if step == 0 { initial = parts.total; }
        last = parts.total;
        tape.backward(total).unwrap();
        let grads: Vec<_> = vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
        adam_step(&mut model.store, &grads, &mut adam, lr, &tcfg).unwrap();
        if step % 20 == 0 || step == steps - 1 {
            println!("step {step:4}  total {:.4}  obj {:.4} cls {:.4} box {:.4}", parts.total, parts.obj, parts.cls, parts.box_);
        }
    }
    println!("img={img} width={width} lr={lr}: initial {initial:.4} -> final {last:.4} (ratio {:.3}) in {:.1}s", last / initial, t0.elapsed().as_secs_f64());
}
