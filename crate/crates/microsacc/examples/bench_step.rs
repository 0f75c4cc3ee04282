use microsacc::snn::{train::softmax_cross_entropy, train::flow_mse, Adam, Model, ModelConfig, SpikeMode};
use microsacc::PipelineConfig;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn main() {
    let cfg = PipelineConfig::desk();
    let mc: ModelConfig = cfg.model_config();
    let mut model: Model<f32> = Model::new(mc.clone()).unwrap();
    model.init(1);
    let mut adam = Adam::new(model.params(), 1e-4);
    let batch = 16usize;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let input = Array4::from_shape_fn((batch * mc.t_bins, 2, mc.height, mc.width), |_| {
        if rng.random_bool(0.03) { rng.random_range(1.0..4.0f32) } else { 0.0 }
    });
    let labels: Vec<u8> = (0..batch).map(|i| (i % 7) as u8).collect();
    let flow = Array4::from_shape_fn((batch * (mc.t_bins - 1), 2, mc.height, mc.width), |_| {
        rng.random_range(-0.5..0.5f32)
    });

    for round in 0..2 {
        model.zero_grads();
        let t0 = Instant::now();
        let (out, trace) = model.forward_train(&input, batch, SpikeMode::Hard, true).unwrap();
        let t_fwd = t0.elapsed().as_secs_f64();
        let (_, dlogits) = softmax_cross_entropy(&out.logits, &labels).unwrap();
        let (_, mut dflow) = flow_mse(out.flow.as_ref().unwrap(), &flow).unwrap();
        dflow.mapv_inplace(|v| v * 0.5);
        let t0 = Instant::now();
        model.backward(&trace, &dlogits, Some(&dflow)).unwrap();
        let t_bwd = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        adam.step(model.params_mut(), 1e-3);
        let t_adam = t0.elapsed().as_secs_f64();
        println!("round {round}: fwd {t_fwd:.2}s bwd {t_bwd:.2}s adam {t_adam:.3}s");
    }

    // forward without flow head
    let t0 = Instant::now();
    let _ = model.forward_train(&input, batch, SpikeMode::Hard, false).unwrap();
    println!("fwd no-flow: {:.2}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let _ = model.forward_eval(&input, batch).unwrap();
    println!("fwd eval: {:.2}s", t0.elapsed().as_secs_f64());
}
