//! Compare tape gradients against central differences for a small 3D
//! conv → instance norm → relu → pool chain.

use kneedg::rng::RngStream;
use kneedg::tensor::{numeric_gradient, relative_error, ConvGeom, Tape, Tensor};

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn main() {
    let mut rng = RngStream::new(7, "gradient-check");
    let x = randn(&mut rng, &[1, 2, 6, 6, 6]);
    let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
    let b = randn(&mut rng, &[3]);
    let probe = randn(&mut rng, &[1, 3, 3, 3, 3]);

    let loss = |x: &Tensor, w: &Tensor| {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.param(x.clone()), t.param(w.clone()), t.constant(b.clone()));
        let (g, beta) = (t.constant(Tensor::full(&[3], 1.0)), t.constant(Tensor::zeros(&[3])));
        let y = t.conv3d(xv, wv, bv, ConvGeom::new([1; 3], [1; 3])).unwrap();
        let y = t.instance_norm(y, g, beta, 1e-5).unwrap();
        let y = t.relu(y);
        let y = t.max_pool3d(y, [2; 3], [2; 3]).unwrap();
        let p = t.constant(probe.clone());
        let y = t.mul(y, p).unwrap();
        let l = t.sum(y);
        (t, l, xv, wv)
    };

    let (t, l, xv, wv) = loss(&x, &w);
    println!("loss {:.6}", t.value(l).item());
    let grads = t.backward(l).unwrap();
    let dx = numeric_gradient(
        |p| {
            let (t, l, ..) = loss(p, &w);
            t.value(l).item()
        },
        &x,
        1e-6,
    );
    let dw = numeric_gradient(
        |p| {
            let (t, l, ..) = loss(&x, p);
            t.value(l).item()
        },
        &w,
        1e-6,
    );
    println!(
        "input  relative error {:.2e}",
        relative_error(grads.tensor(xv).data(), dx.data())
    );
    println!(
        "weight relative error {:.2e}",
        relative_error(grads.tensor(wv).data(), dw.data())
    );
}
