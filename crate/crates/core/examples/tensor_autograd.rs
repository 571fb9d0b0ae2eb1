//! Builds a small graph on the tape, backpropagates, and compares the
//! analytic gradient of a prototype loss with central differences.

use protoadapt::losses::{proto_loss_lcb, LossConfig};
use protoadapt::tensor::{Tape, Tensor};

fn loss_at(projection: &[f64], prototypes: &Tensor, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::vector(projection));
    let c = tape.constant(prototypes.clone());
    let l = proto_loss_lcb(&mut tape, g, c, 1, cfg).unwrap();
    tape.value(l).item()
}

fn main() {
    let cfg = LossConfig::default();
    let projection = [0.3, -0.2, 0.8, 0.1, -0.5];
    let prototypes = Tensor::new(
        vec![3, 5],
        vec![
            0.1, 0.0, -0.1, 0.2, 0.0, //
            0.4, -0.3, 0.6, 0.0, -0.2, //
            -0.5, 0.2, 0.1, -0.1, 0.3,
        ],
    )
    .unwrap();

    let mut tape = Tape::new();
    let g = tape.param(Tensor::vector(&projection));
    let c = tape.param(prototypes.clone());
    let loss = proto_loss_lcb(&mut tape, g, c, 1, &cfg).unwrap();
    tape.backward(loss).unwrap();
    println!("loss = {:.6}", tape.value(loss).item());

    let analytic = tape.grad(g).unwrap().data().to_vec();
    let h = 1e-6;
    println!("{:>4} {:>12} {:>12}", "i", "analytic", "numeric");
    for i in 0..projection.len() {
        let mut up = projection;
        let mut down = projection;
        up[i] += h;
        down[i] -= h;
        let numeric = (loss_at(&up, &prototypes, &cfg) - loss_at(&down, &prototypes, &cfg)) / (2.0 * h);
        println!("{i:>4} {:>12.8} {numeric:>12.8}", analytic[i]);
    }
    println!("prototype gradient shape {:?}", tape.grad(c).unwrap().shape());
}
