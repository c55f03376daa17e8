//! Reverse-mode gradients through a conv -> BN -> ReLU -> pool -> linear stack.

use ghnq::tensor::{ConvParams, Tape, Tensor};

fn main() -> ghnq::Result<()> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64 * 0.37).sin()));
    let w = tape.leaf(Tensor::from_fn(&[3, 1, 3, 3], |i| 0.1 * (i as f64 - 13.0)), true);
    let gamma = tape.leaf(Tensor::full(&[3], 1.0), true);
    let beta = tape.leaf(Tensor::zeros(&[3]), true);
    let fc = tape.leaf(Tensor::from_fn(&[2, 3], |i| 0.5 - 0.2 * i as f64), true);
    let fb = tape.leaf(Tensor::zeros(&[2]), true);

    let conv = ConvParams {
        stride: 1,
        padding: 1,
        dilation: 1,
        groups: 1,
    };
    let h = tape.conv2d(x, w, None, conv)?;
    let (h, batch_mean, batch_var) = tape.batchnorm2d(h, gamma, beta, 1e-5)?;
    let h = tape.relu(h);
    let h = tape.global_avg_pool(h)?;
    let logits = tape.linear(h, fc, Some(fb))?;
    let loss = tape.softmax_cross_entropy(logits, &[0, 1])?;

    println!("batch mean {:?}\nbatch var  {:?}", batch_mean.data(), batch_var.data());

    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    for (name, v) in [("conv.w", w), ("bn.gamma", gamma), ("bn.beta", beta), ("fc.w", fc)] {
        let g = grads.get(v).expect("leaf gradient");
        println!("d loss / d {name:<8} shape {:?}  |g|max {:.4e}", g.shape(), g.map(f64::abs).max());
    }
    Ok(())
}
