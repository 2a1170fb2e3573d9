// Diagnoses a trained model: loss parts + top detections vs ground truth.
use vdet_core::data::synth_dataset;
use vdet_core::eval::{gts_from_annotations, iou, nms};
use vdet_core::model::{build_model, decode_predictions, ModelConfig};
use vdet_core::train::{batch_images, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let img: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let width: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);

    let full = synth_dataset(256 + 64, 4, 42, img).unwrap();
    let (train_set, val_set) = full.split_tail(64);
    let cfg = ModelConfig {
        num_classes: 4,
        class_names: train_set.class_names.clone(),
        width_mult: width,
        input_size: img,
        ..Default::default()
    };
    let mut model = build_model::<f32>(&cfg, 7).unwrap();
    let tcfg = TrainConfig {
        batch_size: 16, lr0: lr, eta_min: lr / 100.0, epochs, patience: epochs,
        augment: false, ..Default::default()
    };
    let out = train(&mut model, &train_set, &val_set, &tcfg, 3).unwrap();
    println!("best mAP {:.4}", out.best_map50);

    // inspect three val images
    for vi in 0..3 {
        let s = &val_set.samples[vi];
        let images = batch_images(std::slice::from_ref(s), tcfg.mean, tcfg.std);
        let pred = model.predict(&images).unwrap();
        let decoded = decode_predictions(&pred, 0.001);
        let kept = nms(&decoded[0], 0.45);
        println!("— image {vi}: {} gt boxes", s.annotations.len());
        for a in &s.annotations {
            println!("   gt  cls {:?} box ({:.0},{:.0},{:.0},{:.0}) side {:.1}", a.class, a.bbox.left, a.bbox.top, a.bbox.right, a.bbox.bottom, a.bbox.area().sqrt());
        }
        let gts = gts_from_annotations(&s.annotations);
        for d in kept.iter().take(8) {
            let best = gts.iter().map(|g| iou(&d.bbox, &g.bbox)).fold(0.0, f64::max);
            println!("   det cls {} conf {:.3} box ({:.0},{:.0},{:.0},{:.0}) best-iou {:.2}", d.class, d.confidence, d.bbox.left, d.bbox.top, d.bbox.right, d.bbox.bottom, best);
        }
    }
}
