//! Supervised contrastive loss on hand-made embeddings, plus a sweep over
//! temperature and contrastive weight on a fixed batch.

use kneedg::losses::{cross_entropy, supcon_loss, ViewBatch};
use kneedg::rng::RngStream;
use kneedg::tensor::{Tape, Tensor};

fn supcon(rows: &[[f64; 2]], labels: &[usize], tau: f64) -> f64 {
    let mut t = Tape::new();
    let z = t.constant(Tensor::new(vec![rows.len(), 2], rows.concat()).unwrap());
    let batch = ViewBatch::new(labels.to_vec(), (0..rows.len()).collect()).unwrap();
    let l = supcon_loss(&mut t, z, &batch, tau).unwrap();
    t.value(l).item()
}

fn main() {
    // two aligned positives and an orthogonal negative
    let rows = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    println!("three rows, tau 1: {:.6}", supcon(&rows, &[0, 0, 1], 1.0));

    println!("\npositive angle vs loss (tau 0.5)");
    for deg in [0, 30, 60, 90, 120, 150, 180] {
        let th = (deg as f64).to_radians();
        let rows = [[1.0, 0.0], [th.cos(), th.sin()], [-1.0, 0.0], [-th.cos(), -th.sin()]];
        println!("  {deg:>3}°  {:.4}", supcon(&rows, &[0, 0, 1, 1], 0.5));
    }

    // random batch: 4 images × 3 views, unit-norm embeddings, two-class logits
    let mut rng = RngStream::new(3, "supcon-example");
    let (labels, ids): (Vec<usize>, Vec<usize>) = (0..12).map(|r| ((r / 3) % 2, r / 3)).unzip();
    let emb: Vec<f64> = (0..12 * 8).map(|_| rng.normal()).collect();
    let logits: Vec<f64> = (0..12 * 2).map(|_| rng.normal()).collect();
    let batch = ViewBatch::new(labels.clone(), ids).unwrap();
    println!("\n  tau \\ lambda    0.0     0.1     0.5     1.0");
    for tau in [0.05, 0.1, 0.5, 1.0] {
        let mut line = format!("  {tau:<12}");
        for lambda in [0.0, 0.1, 0.5, 1.0] {
            let mut t = Tape::new();
            let z = t.constant(Tensor::new(vec![12, 8], emb.clone()).unwrap());
            let z = t.l2_normalize(z).unwrap();
            let y = t.constant(Tensor::new(vec![12, 2], logits.clone()).unwrap());
            let ce = cross_entropy(&mut t, y, &labels).unwrap();
            let sc = supcon_loss(&mut t, z, &batch, tau).unwrap();
            let sc = t.scale(sc, lambda);
            let total = t.add(ce, sc).unwrap();
            line += &format!("{:>8.4}", t.value(total).item());
        }
        println!("{line}");
    }
}
