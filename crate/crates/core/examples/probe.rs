use camograft::data::DatasetIndex;
use camograft::metrics::{evaluate_dataset, EMeasureMode, GrayMap};
use camograft::model::Network;
use camograft::synth::{synth_generate, SynthConfig};
use camograft::train::{predict_map, train, TrainConfig};
use std::time::Instant;

fn main() {
    let data_dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::new(8, 64, 7, 0.6).unwrap();
    let t0 = Instant::now();
    let index = synth_generate(&synth, data_dir.path()).unwrap();
    println!("synth: {:?}", t0.elapsed());

    let cfg = TrainConfig {
        main_size: 64,
        epochs: 250,
        batch: 4,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let report = train(&cfg, &index, out.path()).unwrap();
    println!("train {} steps: {:?}", report.steps, t0.elapsed());
    println!("final loss {}", report.final_loss);

    // loss trend: window-50 moving average non-increasing?
    let log = std::fs::read_to_string(&report.loss_log).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let smoothed: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let mut violations = 0;
    let mut max_up: f64 = 0.0;
    for i in 1..smoothed.len() {
        if smoothed[i] > smoothed[i - 1] + 1e-12 {
            violations += 1;
            max_up = max_up.max(smoothed[i] - smoothed[i - 1]);
        }
    }
    println!("smoothed-50 violations: {violations} (max up {max_up:.3e}) first {} last {}", smoothed[0], smoothed[smoothed.len()-1]);

    // train-set evaluation
    let net = Network::new(cfg.network_config().unwrap()).unwrap();
    net.load(&report.checkpoint).unwrap();
    let mut pairs = Vec::new();
    let t0 = Instant::now();
    for (i, entry) in index.entries.iter().enumerate() {
        let image = camograft::data::load_image_tensor(&index.image_path(entry)).unwrap();
        let pred = predict_map(&net, &image).unwrap();
        let (mask, h, w) = camograft::data::load_mask_values(&index.mask_path(entry)).unwrap();
        let gt = GrayMap::new(w, h, mask).unwrap();
        pairs.push((format!("img_{i:04}"), pred, gt));
    }
    let metrics = evaluate_dataset(&pairs, EMeasureMode::Adaptive).unwrap();
    println!("eval: {:?}", t0.elapsed());
    println!("train-set MAE {:.4} S {:.4} E {:.4} wFm {:.4}", metrics.mean_mae, metrics.mean_s, metrics.mean_e, metrics.mean_wfm);
}
