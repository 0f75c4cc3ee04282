use ndarray::Array2;
use std::time::Instant;

fn bench(label: &str, m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<f32>::from_elem((m, k), 1.01);
    let b = Array2::<f32>::from_elem((k, n), 0.99);
    let mut c = Array2::<f32>::zeros((m, n));
    ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    let t0 = Instant::now();
    for _ in 0..reps {
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{label} {m}x{k}x{n}: {:.3} ms, {:.1} GFLOP/s", dt * 1e3, 2.0 * (m*k*n) as f64 / dt / 1e9);
}

fn main() {
    println!("-- channels-first (current): Y = W x col");
    bench("cf", 16, 18, 8250, 30);
    bench("cf", 16, 144, 8250, 30);
    bench("cf", 32, 288, 2035, 30);
    bench("cf", 64, 576, 486, 60);
    println!("-- channels-last: Y^T = col^T x W^T");
    bench("cl", 8250, 18, 16, 30);
    bench("cl", 8250, 144, 16, 30);
    bench("cl", 2035, 288, 32, 30);
    bench("cl", 486, 576, 64, 60);
    println!("-- dW shapes");
    bench("dw-cf", 16, 8250, 144, 30);
    bench("dw-cl", 144, 8250, 16, 30);
}
