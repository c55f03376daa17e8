//! Per-tensor asymmetric encodings, fake quantization and BN folding.

use ghnq::quant::{bn_fold, compute_encoding, fake_quantize, BnFoldInputs};
use ghnq::tensor::Tensor;

fn main() -> ghnq::Result<()> {
    let t = Tensor::new(vec![6], vec![-1.0, -0.4, 0.0, 0.13, 0.5, 2.0])?;
    for bits in [8, 4, 2] {
        let enc = compute_encoding(&t, bits)?;
        let q = fake_quantize(&t, &enc);
        let codes: Vec<i64> = t.data().iter().map(|&x| enc.quantize(x)).collect();
        println!(
            "{bits} bits: scale {:.5} zero_point {:>3} codes {codes:?}\n        dequantized {:?}",
            enc.scale,
            enc.zero_point,
            q.data()
        );
    }

    // Positive-only data still places 0 on the grid.
    let pos = Tensor::new(vec![3], vec![0.5, 1.0, 1.5])?;
    let enc = compute_encoding(&pos, 4)?;
    println!("\npositive tensor: zero_point {}, 0 -> {}", enc.zero_point, enc.fake(0.0));

    let w = Tensor::from_fn(&[2, 1, 1, 2], |i| 1.0 + i as f64);
    let gamma = Tensor::new(vec![2], vec![2.0, 0.5])?;
    let var = Tensor::new(vec![2], vec![3.0, 0.25])?;
    let folded = bn_fold(&BnFoldInputs {
        w: &w,
        gamma: &gamma,
        batch_var: &var,
        eps: 1e-5,
    })?;
    println!("\nweight {:?}\nfolded {:?}", w.data(), folded.data());
    Ok(())
}
