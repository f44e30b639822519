use std::time::Instant;
use sci_unfold::kernels::{conv3d, conv3d_backward};
use sci_unfold::tensor::Tensor;

fn main() {
    for &(c, h) in &[(16usize, 64usize), (32, 32), (64, 16)] {
        let x = Tensor::<f32>::from_fn(&[c, 8, h, h], |i| (i % 13) as f32 * 0.01);
        let w = Tensor::<f32>::from_fn(&[c, c, 3, 3, 3], |i| (i % 7) as f32 * 0.001);
        let b = Tensor::<f32>::zeros(&[c]);
        let t0 = Instant::now();
        let n = 5;
        let mut y = conv3d(&x, &w, Some(&b), 1);
        for _ in 1..n { y = conv3d(&x, &w, Some(&b), 1); }
        let fwd = t0.elapsed().as_secs_f64() / n as f64;
        let t0 = Instant::now();
        for _ in 0..n { let _ = conv3d_backward(&x, &w, &y, 1, true); }
        let bwd = t0.elapsed().as_secs_f64() / n as f64;
        let flop = 2.0 * (c * c * 27 * 8 * h * h) as f64;
        println!("c={c} h={h}: fwd {:.1} ms ({:.1} GF/s), bwd {:.1} ms ({:.1} GF/s)", fwd*1e3, flop/fwd/1e9, bwd*1e3, 2.0*flop/bwd/1e9);
    }
}
