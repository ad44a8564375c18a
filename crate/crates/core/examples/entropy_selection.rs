//! Checkpoint selection on a made-up training history: the lowest
//! target-validation entropy among epochs above the accuracy threshold.

use kneedg::losses::prediction_entropy;
use kneedg::tensor::Tensor;
use kneedg::training::{select_checkpoint, EpochLog};

fn main() {
    let probs = |p: &[f64]| {
        let rows: Vec<f64> = p.iter().flat_map(|&q| [1.0 - q, q]).collect();
        Tensor::new(vec![p.len(), 2], rows).unwrap()
    };
    println!("H(uniform)   {:.6}", prediction_entropy(&probs(&[0.5, 0.5])).unwrap());
    println!("H(confident) {:.6}", prediction_entropy(&probs(&[0.02, 0.97])).unwrap());

    let history = [
        (0.55, 0.69),
        (0.62, 0.61),
        (0.71, 0.52),
        (0.68, 0.31),
        (0.74, 0.44),
        (0.80, 0.47),
    ];
    let logs: Vec<EpochLog> = history
        .iter()
        .enumerate()
        .map(|(e, &(acc, ent))| EpochLog {
            epoch: e,
            train_loss: 0.0,
            source_val_accuracy: acc,
            target_val_entropy: ent,
            checkpoint: e,
        })
        .collect();
    for theta in [0.6, 0.7, 0.78, 0.9] {
        let s = select_checkpoint(&logs, theta).unwrap();
        println!(
            "threshold {theta:.2}: epoch {}{}",
            logs[s.index].epoch,
            if s.fallback { " (fallback to best accuracy)" } else { "" }
        );
    }
}
