//! Scratch micro-benchmark for conv primitives.

use ndarray::{Array2, Array4};
use std::time::Instant;

fn main() {
    // representative: enc1.conv 32->32 @32x32, batch 4
    let x = Array4::<f64>::from_elem((4, 32, 32, 32), 0.3);
    let k = vec![0.01f64; 32 * 32 * 9];
    let b = vec![0.0f64; 32];
    let spec_flops = 4.0 * 32.0 * 32.0 * 32.0 * 32.0 * 9.0 * 2.0;

    // pure gemm of the same shape
    let a2 = Array2::<f64>::from_elem((32, 288), 0.5);
    let b2 = Array2::<f64>::from_elem((288, 1024), 0.25);
    let t = Instant::now();
    for _ in 0..400 {
        let _ = a2.dot(&b2);
    }
    let per = t.elapsed().as_secs_f64() / 400.0;
    println!("gemm alone: {:.3} ms ({:.1} GFLOP/s)", per * 1e3, 32.0 * 288.0 * 1024.0 * 2.0 / per / 1e9);

    let spec = stegokey::bench::conv_spec(32, 32, 1);
    let t = Instant::now();
    for _ in 0..100 {
        let _ = stegokey::bench::conv_forward(&x, &k, &b, &spec);
    }
    let per = t.elapsed().as_secs_f64() / 100.0;
    println!("conv fwd:  {:.3} ms ({:.1} GFLOP/s)", per * 1e3, spec_flops / per / 1e9);

    let dy = stegokey::bench::conv_forward(&x, &k, &b, &spec);
    let t = Instant::now();
    for _ in 0..100 {
        let _ = stegokey::bench::conv_backward(&x, &k, &spec, &dy);
    }
    let per = t.elapsed().as_secs_f64() / 100.0;
    println!("conv bwd:  {:.3} ms ({:.1} GFLOP/s)", per * 1e3, 2.0 * spec_flops / per / 1e9);
}
