use microsacc::snn::layers::*;
use ndarray::{Array1, Array4};
use std::time::Instant;

fn time<R>(name: &str, reps: usize, mut f: impl FnMut() -> R) {
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!("{name}: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let u = 160;
    // S1C2-like
    let x = Array4::<f32>::from_elem((u, 16, 75, 110), 0.5);
    let w = Array4::<f32>::from_elem((16, 16, 3, 3), 0.01);
    let b = Array1::<f32>::zeros(16);
    let g = Array1::<f32>::ones(16);
    time("conv3 fwd S1C2", 3, || conv3_forward(&x.view(), &w.view(), &b));
    let dy = x.clone();
    time("conv3 bwd S1C2", 3, || conv3_backward(&x.view(), &w.view(), &dy.view(), true));
    time("bn fwd S1C2", 3, || batchnorm_forward_train(&x.view(), &g, &b, 1e-5));
    let bnf = batchnorm_forward_train(&x.view(), &g, &b, 1e-5);
    time("bn bwd S1C2", 3, || batchnorm_backward(&dy.view(), &bnf.xhat.view(), &g, &bnf.var, 1e-5));
    time("avgpool fwd", 3, || avgpool2_forward(&x.view()));

    // S3-like
    let x3 = Array4::<f32>::from_elem((u, 64, 18, 27), 0.5);
    let w3 = Array4::<f32>::from_elem((64, 64, 3, 3), 0.01);
    let b3 = Array1::<f32>::zeros(64);
    time("conv3 fwd S3", 3, || conv3_forward(&x3.view(), &w3.view(), &b3));
    let dy3 = x3.clone();
    time("conv3 bwd S3", 3, || conv3_backward(&x3.view(), &w3.view(), &dy3.view(), true));
}
