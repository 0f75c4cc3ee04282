//! Spiking VGG-style classifier with an optional flow-regression head.
//!
//! The backbone is a sequence of conv stages (Conv3x3 + BatchNorm + LIF
//! blocks, average-pooled between stages) applied to every time bin; the
//! classification head is a spiking fully connected layer followed by a
//! linear readout whose outputs are averaged over time (rate decoding). The
//! flow head, when enabled, reads the final conv block's spikes for each
//! adjacent bin pair and regresses dense flow via two transposed-conv
//! upsampling stages plus bilinear resizing to the input resolution; it is
//! active only during training.

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis, IxDyn, NdFloat};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers;
use super::lif::{LifParams, SpikeMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Vgg11s,
    Vgg13s,
    Vgg16s,
    Vgg16sFlow,
}

impl Preset {
    pub fn flow_head(self) -> bool {
        matches!(self, Preset::Vgg16sFlow)
    }

    /// Scaled-channel stage widths following the VGG block pattern.
    pub fn arch(self) -> ArchSpec {
        let stages: Vec<Vec<usize>> = match self {
            Preset::Vgg11s => vec![
                vec![16],
                vec![32],
                vec![64, 64],
                vec![64, 64],
                vec![64, 64],
            ],
            Preset::Vgg13s => vec![
                vec![16, 16],
                vec![32, 32],
                vec![64, 64],
                vec![64, 64],
                vec![64, 64],
            ],
            Preset::Vgg16s | Preset::Vgg16sFlow => vec![
                vec![16, 16],
                vec![32, 32],
                vec![64, 64, 64],
                vec![64, 64, 64],
                vec![64, 64, 64],
            ],
        };
        ArchSpec {
            stages,
            fc_hidden: 128,
            flow_channels: 32,
            flow_head: self.flow_head(),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Preset::Vgg11s => "vgg11s",
            Preset::Vgg13s => "vgg13s",
            Preset::Vgg16s => "vgg16s",
            Preset::Vgg16sFlow => "vgg16s-flow",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg11s" => Ok(Preset::Vgg11s),
            "vgg13s" => Ok(Preset::Vgg13s),
            "vgg16s" => Ok(Preset::Vgg16s),
            "vgg16s-flow" => Ok(Preset::Vgg16sFlow),
            other => Err(Error::domain(format!("unknown preset '{other}'"))),
        }
    }
}

/// Concrete layer widths; presets map onto this, tests may build custom ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub stages: Vec<Vec<usize>>,
    pub fc_hidden: usize,
    pub flow_channels: usize,
    pub flow_head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Time bins per sample (T).
    pub t_bins: usize,
    /// Input channels (two polarities).
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub lif: LifParams,
    /// Flow-loss weight in the total objective.
    pub lambda: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.t_bins < 1 || self.in_channels < 1 || self.height < 8 || self.width < 8 {
            return Err(Error::domain("input dims too small"));
        }
        if self.class_count != 7 {
            return Err(Error::domain("class count is fixed at 7"));
        }
        if self.lambda < 0.0 {
            return Err(Error::domain("lambda must be >= 0"));
        }
        Ok(())
    }
}

/// A named parameter with its gradient accumulator.
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: NdFloat> Param<F> {
    fn new(name: String, shape: &[usize]) -> Self {
        Param {
            name,
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Clone, Copy)]
struct BlockIdx {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    bn_slot: usize,
    in_ch: usize,
    out_ch: usize,
}

#[derive(Clone, Copy)]
struct FcIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy)]
struct FlowIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub struct Model<F: NdFloat> {
    pub config: ModelConfig,
    pub arch: ArchSpec,
    params: Vec<Param<F>>,
    running_mean: Vec<Array1<F>>,
    running_var: Vec<Array1<F>>,
    blocks: Vec<Vec<BlockIdx>>,
    fc: FcIdx,
    flow: Option<FlowIdx>,
    /// Spatial dims at each stage input, plus the post-final-pool dims.
    stage_dims: Vec<(usize, usize)>,
}

/// Training-pass activations retained for backpropagation through time.
pub struct TrainTrace<F: NdFloat> {
    batch: usize,
    mode: SpikeMode,
    stage_inputs: Vec<Array4<F>>,
    block_xhat: Vec<Array4<F>>,
    block_mean: Vec<Array1<F>>,
    block_var: Vec<Array1<F>>,
    block_v_pre: Vec<Array4<F>>,
    block_spikes: Vec<Array4<F>>,
    pool_out_dims: (usize, usize, usize),
    flat: Array2<F>,
    fc1_v_pre: Array2<F>,
    fc1_spikes: Array2<F>,
    flow: Option<FlowTrace<F>>,
}

struct FlowTrace<F: NdFloat> {
    concat: Array4<F>,
    tanh_out: Array4<F>,
    t2_out: Array4<F>,
}

impl<F: NdFloat> TrainTrace<F> {
    /// Mean firing rate of every spiking layer, in [0, 1]. Spike tensors
    /// carry zero borders, so sums divide by the interior element count.
    pub fn mean_spike_rates(&self) -> Vec<f64> {
        let mut rates: Vec<f64> = self
            .block_spikes
            .iter()
            .map(|a| {
                let (c, u, hp, wp) = a.dim();
                let sum = a.iter().fold(F::zero(), |acc, &v| acc + v);
                sum.to_f64().unwrap_or(0.0) / (c * u * (hp - 2) * (wp - 2)) as f64
            })
            .collect();
        let sum = self.fc1_spikes.iter().fold(F::zero(), |acc, &v| acc + v);
        rates.push(sum.to_f64().unwrap_or(0.0) / self.fc1_spikes.len() as f64);
        rates
    }
}

/// Model outputs: logits per sample, and flow predictions
/// `(B*(T-1), 2, H, W)` when the head ran.
pub struct ForwardOutput<F: NdFloat> {
    pub logits: Array2<F>,
    pub flow: Option<Array4<F>>,
}

impl<F: NdFloat + Send + Sync> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.preset.arch();
        Self::with_arch(config, arch)
    }

    /// Build with an explicit architecture (custom widths for tests and
    /// experiments); presets should use [`Model::new`].
    pub fn with_arch(config: ModelConfig, arch: ArchSpec) -> Result<Self> {
        config.validate()?;
        if arch.stages.is_empty() || arch.stages.iter().any(|s| s.is_empty()) {
            return Err(Error::domain("architecture needs at least one conv block"));
        }

        let mut params: Vec<Param<F>> = Vec::new();
        let mut running_mean = Vec::new();
        let mut running_var = Vec::new();
        let mut blocks: Vec<Vec<BlockIdx>> = Vec::new();
        let mut stage_dims = Vec::new();

        let (mut h, mut w) = (config.height, config.width);
        let mut in_ch = config.in_channels;
        for (si, stage) in arch.stages.iter().enumerate() {
            stage_dims.push((h, w));
            let mut stage_blocks = Vec::new();
            for (bi, &out_ch) in stage.iter().enumerate() {
                let tag = format!("s{si}b{bi}");
                let w_idx = params.len();
                params.push(Param::new(format!("{tag}.conv.weight"), &[out_ch, in_ch, 3, 3]));
                let b_idx = params.len();
                params.push(Param::new(format!("{tag}.conv.bias"), &[out_ch]));
                let g_idx = params.len();
                params.push(Param::new(format!("{tag}.bn.gamma"), &[out_ch]));
                let be_idx = params.len();
                params.push(Param::new(format!("{tag}.bn.beta"), &[out_ch]));
                let bn_slot = running_mean.len();
                running_mean.push(Array1::zeros(out_ch));
                running_var.push(Array1::ones(out_ch));
                stage_blocks.push(BlockIdx {
                    w: w_idx,
                    b: b_idx,
                    gamma: g_idx,
                    beta: be_idx,
                    bn_slot,
                    in_ch,
                    out_ch,
                });
                in_ch = out_ch;
            }
            blocks.push(stage_blocks);
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::domain("input too small for the stage count"));
            }
        }
        stage_dims.push((h, w));

        let feat = in_ch * h * w;
        let fc = FcIdx {
            w1: params.len(),
            b1: params.len() + 1,
            w2: params.len() + 2,
            b2: params.len() + 3,
        };
        params.push(Param::new("fc1.weight".into(), &[arch.fc_hidden, feat]));
        params.push(Param::new("fc1.bias".into(), &[arch.fc_hidden]));
        params.push(Param::new(
            "fc2.weight".into(),
            &[config.class_count, arch.fc_hidden],
        ));
        params.push(Param::new("fc2.bias".into(), &[config.class_count]));

        let flow = arch.flow_head.then(|| {
            let last_ch = *arch
                .stages
                .last()
                .and_then(|s| s.last())
                .expect("nonempty arch");
            let idx = FlowIdx {
                w1: params.len(),
                b1: params.len() + 1,
                w2: params.len() + 2,
                b2: params.len() + 3,
            };
            params.push(Param::new(
                "flow.up1.weight".into(),
                &[2 * last_ch, arch.flow_channels, 4, 4],
            ));
            params.push(Param::new("flow.up1.bias".into(), &[arch.flow_channels]));
            params.push(Param::new(
                "flow.up2.weight".into(),
                &[arch.flow_channels, 2, 4, 4],
            ));
            params.push(Param::new("flow.up2.bias".into(), &[2]));
            idx
        });

        Ok(Model {
            config,
            arch,
            params,
            running_mean,
            running_var,
            blocks,
            fc,
            flow,
            stage_dims,
        })
    }

    /// Deterministic initialization: weights uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero, BN gamma 1, beta 0.
    /// Parameters are drawn in registration order, so two presets sharing a
    /// backbone receive identical backbone draws for the same seed.
    pub fn init(&mut self, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                p.value.fill(F::zero());
            } else if p.name.ends_with(".gamma") {
                p.value.fill(F::one());
            } else {
                let dims = p.value.shape();
                let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in p.value.iter_mut() {
                    *v = F::from(rng.random_range(-bound..bound)).expect("fits");
                }
            }
        }
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn bn_state(&self) -> (&[Array1<F>], &[Array1<F>]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn bn_state_mut(&mut self) -> (&mut Vec<Array1<F>>, &mut Vec<Array1<F>>) {
        (&mut self.running_mean, &mut self.running_var)
    }

    fn p2(&self, idx: usize) -> Array2<F> {
        let shape = self.params[idx].value.shape().to_vec();
        self.params[idx]
            .value
            .view()
            .into_shape_with_order((shape[0], shape[1]))
            .expect("2d param")
            .to_owned()
    }

    fn p4(&self, idx: usize) -> Array4<F> {
        let sh = self.params[idx].value.shape().to_vec();
        self.params[idx]
            .value
            .view()
            .into_shape_with_order((sh[0], sh[1], sh[2], sh[3]))
            .expect("4d param")
            .to_owned()
    }

    fn p1(&self, idx: usize) -> Array1<F> {
        self.params[idx]
            .value
            .view()
            .into_shape_with_order(self.params[idx].value.len())
            .expect("1d param")
            .to_owned()
    }

    fn add_grad(&mut self, idx: usize, g: ArrayD<F>) {
        self.params[idx].grad += &g;
    }

    /// LIF dynamics in the padded layout (C, U, Hp, Wp); only plane
    /// interiors are written, so borders stay exactly zero in both modes.
    fn lif_cop_forward(
        &self,
        current: &Array4<F>,
        batch: usize,
        mode: SpikeMode,
    ) -> (Array4<F>, Array4<F>) {
        let t_bins = self.config.t_bins;
        let lif = &self.config.lif;
        let tau = F::from(lif.tau).expect("fits");
        let v_th = F::from(lif.v_threshold).expect("fits");
        let v_reset = F::from(lif.v_reset).expect("fits");
        let za = F::from(std::f64::consts::FRAC_PI_2 * lif.surrogate_alpha).expect("fits");
        let inv_pi = F::from(std::f64::consts::FRAC_1_PI).expect("fits");
        let half = F::from(0.5).expect("fits");
        let dims = current.dim();
        let (c, u, hp, wp) = dims;
        debug_assert_eq!(u, batch * t_bins);
        let w = wp - 2;
        let mut v_pre = Array4::<F>::zeros(dims);
        let mut spikes = Array4::<F>::zeros(dims);

        v_pre
            .axis_chunks_iter_mut(Axis(1), t_bins)
            .into_par_iter()
            .zip(spikes.axis_chunks_iter_mut(Axis(1), t_bins).into_par_iter())
            .zip(current.axis_chunks_iter(Axis(1), t_bins).into_par_iter())
            .for_each(|((mut vp, mut sp), cur)| {
                let inv_tau = F::one() / tau;
                let mut state = vec![v_reset; c * (hp - 2) * w];
                for t in 0..t_bins {
                    for ci in 0..c {
                        for y in 1..hp - 1 {
                            let st = &mut state[(ci * (hp - 2) + y - 1) * w..][..w];
                            let c_t = cur.slice(s![ci, t, y, 1..wp - 1]);
                            let c_t = c_t.to_slice().expect("contiguous row");
                            let mut vp_t = vp.slice_mut(s![ci, t, y, 1..wp - 1]);
                            let vp_t = vp_t.as_slice_mut().expect("contiguous row");
                            let mut sp_t = sp.slice_mut(s![ci, t, y, 1..wp - 1]);
                            let sp_t = sp_t.as_slice_mut().expect("contiguous row");
                            match mode {
                                SpikeMode::Hard => {
                                    for i in 0..w {
                                        let v = st[i] + (c_t[i] - (st[i] - v_reset)) * inv_tau;
                                        vp_t[i] = v;
                                        let s = if v >= v_th { F::one() } else { F::zero() };
                                        sp_t[i] = s;
                                        st[i] = v * (F::one() - s) + v_reset * s;
                                    }
                                }
                                SpikeMode::Soft => {
                                    for i in 0..w {
                                        let v = st[i] + (c_t[i] - (st[i] - v_reset)) * inv_tau;
                                        vp_t[i] = v;
                                        let s = (za * (v - v_th)).atan() * inv_pi + half;
                                        sp_t[i] = s;
                                        st[i] = v * (F::one() - s) + v_reset * s;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        (v_pre, spikes)
    }

    /// Backpropagation through the LIF recurrence (padded layout, interior
    /// writes only, so the output keeps zero borders).
    fn lif_cop_backward(
        &self,
        v_pre: &Array4<F>,
        spikes: &Array4<F>,
        d_spikes: &Array4<F>,
        batch: usize,
    ) -> Array4<F> {
        let t_bins = self.config.t_bins;
        let lif = &self.config.lif;
        let tau = F::from(lif.tau).expect("fits");
        let v_th = F::from(lif.v_threshold).expect("fits");
        let v_reset = F::from(lif.v_reset).expect("fits");
        let za = F::from(std::f64::consts::FRAC_PI_2 * lif.surrogate_alpha).expect("fits");
        let half_alpha = F::from(lif.surrogate_alpha / 2.0).expect("fits");
        let one = F::one();
        let decay = one - one / tau;
        let dims = v_pre.dim();
        let (c, u, hp, wp) = dims;
        debug_assert_eq!(u, batch * t_bins);
        let w = wp - 2;
        let mut d_current = Array4::<F>::zeros(dims);

        d_current
            .axis_chunks_iter_mut(Axis(1), t_bins)
            .into_par_iter()
            .zip(v_pre.axis_chunks_iter(Axis(1), t_bins).into_par_iter())
            .zip(spikes.axis_chunks_iter(Axis(1), t_bins).into_par_iter())
            .zip(d_spikes.axis_chunks_iter(Axis(1), t_bins).into_par_iter())
            .for_each(|(((mut dc, vp), sp), ds)| {
                let inv_tau = one / tau;
                let mut g_post = vec![F::zero(); c * (hp - 2) * w];
                for t in (0..t_bins).rev() {
                    for ci in 0..c {
                        for y in 1..hp - 1 {
                            let gp = &mut g_post[(ci * (hp - 2) + y - 1) * w..][..w];
                            let vp_t = vp.slice(s![ci, t, y, 1..wp - 1]);
                            let vp_t = vp_t.to_slice().expect("contiguous row");
                            let sp_t = sp.slice(s![ci, t, y, 1..wp - 1]);
                            let sp_t = sp_t.to_slice().expect("contiguous row");
                            let ds_t = ds.slice(s![ci, t, y, 1..wp - 1]);
                            let ds_t = ds_t.to_slice().expect("contiguous row");
                            let mut dc_t = dc.slice_mut(s![ci, t, y, 1..wp - 1]);
                            let dc_t = dc_t.as_slice_mut().expect("contiguous row");
                            for i in 0..w {
                                let z = za * (vp_t[i] - v_th);
                                let surr = half_alpha / (one + z * z);
                                let ds_total = ds_t[i] + gp[i] * (v_reset - vp_t[i]);
                                let dv_pre = ds_total * surr + gp[i] * (one - sp_t[i]);
                                dc_t[i] = dv_pre * inv_tau;
                                gp[i] = dv_pre * decay;
                            }
                        }
                    }
                }
            });
        d_current
    }

    /// FC-path LIF over (U, features): recurrence per sample along T.
    fn lif_vec_forward(&self, current: &Array2<F>, batch: usize, mode: SpikeMode) -> (Array2<F>, Array2<F>) {
        let t_bins = self.config.t_bins;
        let lif = &self.config.lif;
        let tau = F::from(lif.tau).expect("fits");
        let v_th = F::from(lif.v_threshold).expect("fits");
        let v_reset = F::from(lif.v_reset).expect("fits");
        let za = F::from(std::f64::consts::FRAC_PI_2 * lif.surrogate_alpha).expect("fits");
        let inv_pi = F::from(std::f64::consts::FRAC_1_PI).expect("fits");
        let half = F::from(0.5).expect("fits");
        let (u, feat) = current.dim();
        debug_assert_eq!(u, batch * t_bins);
        let inv_tau = F::one() / tau;
        let mut v_pre = Array2::<F>::zeros((u, feat));
        let mut spikes = Array2::<F>::zeros((u, feat));
        v_pre
            .axis_chunks_iter_mut(Axis(0), t_bins)
            .into_par_iter()
            .zip(spikes.axis_chunks_iter_mut(Axis(0), t_bins).into_par_iter())
            .zip(current.axis_chunks_iter(Axis(0), t_bins).into_par_iter())
            .for_each(|((mut vp, mut sp), cur)| {
                let mut state = vec![v_reset; feat];
                for t in 0..t_bins {
                    let c_t = cur.row(t);
                    let c_t = c_t.to_slice().expect("contiguous");
                    let mut vp_t = vp.row_mut(t);
                    let vp_t = vp_t.as_slice_mut().expect("contiguous");
                    let mut sp_t = sp.row_mut(t);
                    let sp_t = sp_t.as_slice_mut().expect("contiguous");
                    for i in 0..feat {
                        let v = state[i] + (c_t[i] - (state[i] - v_reset)) * inv_tau;
                        vp_t[i] = v;
                        let s = match mode {
                            SpikeMode::Hard => {
                                if v >= v_th {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            SpikeMode::Soft => (za * (v - v_th)).atan() * inv_pi + half,
                        };
                        sp_t[i] = s;
                        state[i] = v * (F::one() - s) + v_reset * s;
                    }
                }
            });
        (v_pre, spikes)
    }

    fn lif_vec_backward(
        &self,
        v_pre: &Array2<F>,
        spikes: &Array2<F>,
        d_spikes: &Array2<F>,
        batch: usize,
    ) -> Array2<F> {
        let t_bins = self.config.t_bins;
        let lif = &self.config.lif;
        let tau = F::from(lif.tau).expect("fits");
        let v_th = F::from(lif.v_threshold).expect("fits");
        let v_reset = F::from(lif.v_reset).expect("fits");
        let za = F::from(std::f64::consts::FRAC_PI_2 * lif.surrogate_alpha).expect("fits");
        let half_alpha = F::from(lif.surrogate_alpha / 2.0).expect("fits");
        let one = F::one();
        let decay = one - one / tau;
        let inv_tau = one / tau;
        let (u, feat) = v_pre.dim();
        debug_assert_eq!(u, batch * t_bins);
        let mut d_current = Array2::<F>::zeros((u, feat));
        d_current
            .axis_chunks_iter_mut(Axis(0), t_bins)
            .into_par_iter()
            .zip(v_pre.axis_chunks_iter(Axis(0), t_bins).into_par_iter())
            .zip(spikes.axis_chunks_iter(Axis(0), t_bins).into_par_iter())
            .zip(d_spikes.axis_chunks_iter(Axis(0), t_bins).into_par_iter())
            .for_each(|(((mut dc, vp), sp), ds)| {
                let mut g_post = vec![F::zero(); feat];
                for t in (0..t_bins).rev() {
                    let vp_t = vp.row(t);
                    let vp_t = vp_t.to_slice().expect("contiguous");
                    let sp_t = sp.row(t);
                    let sp_t = sp_t.to_slice().expect("contiguous");
                    let ds_t = ds.row(t);
                    let ds_t = ds_t.to_slice().expect("contiguous");
                    let mut dc_t = dc.row_mut(t);
                    let dc_t = dc_t.as_slice_mut().expect("contiguous");
                    for i in 0..feat {
                        let z = za * (vp_t[i] - v_th);
                        let surr = half_alpha / (one + z * z);
                        let ds_total = ds_t[i] + g_post[i] * (v_reset - vp_t[i]);
                        let dv_pre = ds_total * surr + g_post[i] * (one - sp_t[i]);
                        dc_t[i] = dv_pre * inv_tau;
                        g_post[i] = dv_pre * decay;
                    }
                }
            });
        d_current
    }

    /// Pack a (U, C, H, W) batch into the padded channels-outer layout.
    fn input_to_cop(&self, input: &Array4<F>) -> Array4<F> {
        let (u, c, h, w) = input.dim();
        let mut out = Array4::<F>::zeros((c, u, h + 2, w + 2));
        for ci in 0..c {
            for ui in 0..u {
                for y in 0..h {
                    let src = input.slice(s![ui, ci, y, ..]);
                    let src = src.to_slice().expect("contiguous row");
                    let mut dst = out.slice_mut(s![ci, ui, y + 1, 1..w + 1]);
                    dst.as_slice_mut().expect("contiguous row").copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Flatten interiors into per-unit feature rows, feature order (c, y, x).
    fn gather_features(&self, x: &Array4<F>) -> Array2<F> {
        let (c, u, hp, wp) = x.dim();
        let (h, w) = (hp - 2, wp - 2);
        let mut out = Array2::<F>::zeros((u, c * h * w));
        for ci in 0..c {
            for ui in 0..u {
                for y in 0..h {
                    let src = x.slice(s![ci, ui, y + 1, 1..wp - 1]);
                    let src = src.to_slice().expect("contiguous row");
                    let base = (ci * h + y) * w;
                    let mut dst = out.slice_mut(s![ui, base..base + w]);
                    dst.as_slice_mut().expect("contiguous").copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Transpose of [`Model::gather_features`], producing zero borders.
    fn scatter_features(&self, d_flat: &Array2<F>, c: usize, h: usize, w: usize) -> Array4<F> {
        let u = d_flat.dim().0;
        let mut out = Array4::<F>::zeros((c, u, h + 2, w + 2));
        for ci in 0..c {
            for ui in 0..u {
                for y in 0..h {
                    let base = (ci * h + y) * w;
                    let src = d_flat.slice(s![ui, base..base + w]);
                    let src = src.to_slice().expect("contiguous");
                    let mut dst = out.slice_mut(s![ci, ui, y + 1, 1..w + 1]);
                    dst.as_slice_mut().expect("contiguous row").copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Adjacent-bin channel concatenation of final-block spikes for the flow
    /// head: (V, 2C, h5, w5) in per-unit channels-first layout.
    fn gather_flow_concat(&self, s5: &Array4<F>, batch: usize) -> Array4<F> {
        let t_bins = self.config.t_bins;
        let pairs = t_bins - 1;
        let (c, _, hp, wp) = s5.dim();
        let (h, w) = (hp - 2, wp - 2);
        let mut concat = Array4::<F>::zeros((batch * pairs, 2 * c, h, w));
        for b in 0..batch {
            for t in 0..pairs {
                let v = b * pairs + t;
                for ci in 0..c {
                    concat
                        .slice_mut(s![v, ci, .., ..])
                        .assign(&s5.slice(s![ci, b * t_bins + t, 1..hp - 1, 1..wp - 1]));
                    concat
                        .slice_mut(s![v, c + ci, .., ..])
                        .assign(&s5.slice(s![ci, b * t_bins + t + 1, 1..hp - 1, 1..wp - 1]));
                }
            }
        }
        concat
    }

    /// Scatter the flow head's input gradient back onto the padded spikes.
    fn scatter_flow_concat(&self, d_concat: &Array4<F>, d_s5: &mut Array4<F>, batch: usize) {
        let t_bins = self.config.t_bins;
        let pairs = t_bins - 1;
        let (c, _, hp, wp) = d_s5.dim();
        for b in 0..batch {
            for t in 0..pairs {
                let v = b * pairs + t;
                for ci in 0..c {
                    let mut dst = d_s5.slice_mut(s![ci, b * t_bins + t, 1..hp - 1, 1..wp - 1]);
                    dst += &d_concat.slice(s![v, ci, .., ..]);
                    let mut dst = d_s5.slice_mut(s![ci, b * t_bins + t + 1, 1..hp - 1, 1..wp - 1]);
                    dst += &d_concat.slice(s![v, c + ci, .., ..]);
                }
            }
        }
    }

    /// Training-mode forward pass: batch-statistics BatchNorm (running stats
    /// updated), activations cached for [`Model::backward`], and the flow
    /// head evaluated when present and requested.
    pub fn forward_train(
        &mut self,
        input: &Array4<F>,
        batch: usize,
        mode: SpikeMode,
        compute_flow: bool,
    ) -> Result<(ForwardOutput<F>, TrainTrace<F>)> {
        self.check_input(input, batch)?;
        let t_bins = self.config.t_bins;
        let momentum = F::from(BN_MOMENTUM).expect("fits");
        let one = F::one();

        let mut stage_inputs: Vec<Array4<F>> = Vec::with_capacity(self.blocks.len());
        let mut block_xhat = Vec::new();
        let mut block_mean = Vec::new();
        let mut block_var = Vec::new();
        let mut block_v_pre = Vec::new();
        let mut block_spikes = Vec::new();

        stage_inputs.push(self.input_to_cop(input));
        let mut pool_out: Option<Array4<F>> = None;
        let n_stages = self.blocks.len();
        for stage in 0..n_stages {
            for bi in 0..self.blocks[stage].len() {
                let idx = self.blocks[stage][bi];
                let x: &Array4<F> = if bi == 0 {
                    &stage_inputs[stage]
                } else {
                    block_spikes.last().expect("previous block")
                };
                let wt = self.p4(idx.w);
                let bias = self.p1(idx.b);
                let conv = layers::conv3_cop_forward(x, &wt.view(), Some(&bias));
                let bn = layers::batchnorm_cop_forward_train(
                    &conv,
                    &self.p1(idx.gamma),
                    &self.p1(idx.beta),
                    BN_EPS,
                );
                // running statistics (unbiased variance)
                let dims = conv.dim();
                let n = (dims.1 * (dims.2 - 2) * (dims.3 - 2)) as f64;
                let unbias = F::from(n / (n - 1.0).max(1.0)).expect("fits");
                let slot = idx.bn_slot;
                self.running_mean[slot] = self.running_mean[slot].clone() * (one - momentum)
                    + &(bn.mean.clone() * momentum);
                self.running_var[slot] = self.running_var[slot].clone() * (one - momentum)
                    + &(bn.var.clone() * (momentum * unbias));

                let (v_pre, spikes) = self.lif_cop_forward(&bn.y, batch, mode);
                block_xhat.push(bn.xhat);
                block_mean.push(bn.mean);
                block_var.push(bn.var);
                block_v_pre.push(v_pre);
                block_spikes.push(spikes);
            }
            let pooled = layers::avgpool2_cop_forward(block_spikes.last().expect("blocks"));
            if stage + 1 < n_stages {
                stage_inputs.push(pooled);
            } else {
                pool_out = Some(pooled);
            }
        }

        let pool_out = pool_out.expect("at least one stage");
        let (c5, u, h6p, w6p) = pool_out.dim();
        debug_assert_eq!(u, batch * t_bins);
        let flat = self.gather_features(&pool_out);
        let fc1 = layers::linear_forward(&flat.view(), &self.p2(self.fc.w1).view(), &self.p1(self.fc.b1));
        let (fc1_v_pre, fc1_spikes) = self.lif_vec_forward(&fc1, batch, mode);
        let fc2 = layers::linear_forward(
            &fc1_spikes.view(),
            &self.p2(self.fc.w2).view(),
            &self.p1(self.fc.b2),
        );

        // Rate decoding: mean readout activity across time bins.
        let mut logits = Array2::<F>::zeros((batch, self.config.class_count));
        let t_f = F::from(t_bins as f64).expect("fits");
        for b in 0..batch {
            for t in 0..t_bins {
                let row = fc2.index_axis(Axis(0), b * t_bins + t);
                let mut l = logits.index_axis_mut(Axis(0), b);
                l += &row;
            }
            let mut l = logits.index_axis_mut(Axis(0), b);
            l.mapv_inplace(|v| v / t_f);
        }

        // Flow head on the final conv block's spikes, per adjacent bin pair.
        let mut flow_out = None;
        let mut flow_trace = None;
        if let (Some(fidx), true) = (self.flow, compute_flow) {
            let s5 = block_spikes.last().expect("at least one block");
            let concat = self.gather_flow_concat(s5, batch);
            let t1 = layers::tconv4_forward(&concat.view(), &self.p4(fidx.w1).view(), &self.p1(fidx.b1));
            let tanh_out = t1.mapv(|v| v.tanh());
            let t2 = layers::tconv4_forward(
                &tanh_out.view(),
                &self.p4(fidx.w2).view(),
                &self.p1(fidx.b2),
            );
            let pred =
                layers::bilinear_forward(&t2.view(), self.config.height, self.config.width);
            flow_out = Some(pred);
            flow_trace = Some(FlowTrace {
                concat,
                tanh_out,
                t2_out: t2,
            });
        }

        let trace = TrainTrace {
            batch,
            mode,
            stage_inputs,
            block_xhat,
            block_mean,
            block_var,
            block_v_pre,
            block_spikes,
            pool_out_dims: (c5, h6p - 2, w6p - 2),
            flat,
            fc1_v_pre,
            fc1_spikes,
            flow: flow_trace,
        };
        Ok((
            ForwardOutput {
                logits,
                flow: flow_out,
            },
            trace,
        ))
    }

    /// Accumulate parameter gradients for dL/dlogits and (optionally)
    /// dL/dflow from a cached training pass.
    pub fn backward(
        &mut self,
        trace: &TrainTrace<F>,
        d_logits: &Array2<F>,
        d_flow: Option<&Array4<F>>,
    ) -> Result<()> {
        let batch = trace.batch;
        let t_bins = self.config.t_bins;
        let u = batch * t_bins;
        let t_f = F::from(t_bins as f64).expect("fits");

        // Readout: logits are the time-mean of fc2 rows.
        let mut d_fc2 = Array2::<F>::zeros((u, self.config.class_count));
        for b in 0..batch {
            let g = d_logits.index_axis(Axis(0), b);
            for t in 0..t_bins {
                let mut row = d_fc2.index_axis_mut(Axis(0), b * t_bins + t);
                row.assign(&g);
                row.mapv_inplace(|v| v / t_f);
            }
        }

        let w2 = self.p2(self.fc.w2);
        let (d_fc1_spikes, dw2, db2) =
            layers::linear_backward(&trace.fc1_spikes.view(), &w2.view(), &d_fc2.view());
        self.add_grad(self.fc.w2, dw2.into_dyn());
        self.add_grad(self.fc.b2, db2.into_dyn());

        let d_fc1_out =
            self.lif_vec_backward(&trace.fc1_v_pre, &trace.fc1_spikes, &d_fc1_spikes, batch);
        let w1 = self.p2(self.fc.w1);
        let (d_flat, dw1, db1) =
            layers::linear_backward(&trace.flat.view(), &w1.view(), &d_fc1_out.view());
        self.add_grad(self.fc.w1, dw1.into_dyn());
        self.add_grad(self.fc.b1, db1.into_dyn());

        let (c5, h6, w6) = trace.pool_out_dims;
        let d_pool = self.scatter_features(&d_flat, c5, h6, w6);
        // dims entering the final pool
        let (h5, w5) = {
            let s5 = trace.block_spikes.last().expect("blocks");
            (s5.dim().2 - 2, s5.dim().3 - 2)
        };
        let mut d_spikes_last = layers::avgpool2_cop_backward(&d_pool, h5, w5);

        // Flow-head contribution to the final block's spikes.
        if let (Some(fidx), Some(ft), Some(dp)) = (self.flow, &trace.flow, d_flow) {
            let d_t2 = layers::bilinear_backward(&dp.view(), ft.t2_out.dim().2, ft.t2_out.dim().3);
            let w2f = self.p4(fidx.w2);
            let (d_tanh, dwf2, dbf2) =
                layers::tconv4_backward(&ft.tanh_out.view(), &w2f.view(), &d_t2.view());
            self.add_grad(fidx.w2, dwf2.into_dyn());
            self.add_grad(fidx.b2, dbf2.into_dyn());
            let one = F::one();
            let d_t1 = ndarray::Zip::from(&d_tanh)
                .and(&ft.tanh_out)
                .map_collect(|&g, &y| g * (one - y * y));
            let w1f = self.p4(fidx.w1);
            let (d_concat, dwf1, dbf1) =
                layers::tconv4_backward(&ft.concat.view(), &w1f.view(), &d_t1.view());
            self.add_grad(fidx.w1, dwf1.into_dyn());
            self.add_grad(fidx.b1, dbf1.into_dyn());
            self.scatter_flow_concat(&d_concat, &mut d_spikes_last, batch);
        }

        // Backbone, last stage to first.
        let mut d_spikes = d_spikes_last;
        let mut flat_idx = trace.block_spikes.len();
        for stage in (0..self.blocks.len()).rev() {
            for bi in (0..self.blocks[stage].len()).rev() {
                flat_idx -= 1;
                let idx = self.blocks[stage][bi];
                let d_bn_y = self.lif_cop_backward(
                    &trace.block_v_pre[flat_idx],
                    &trace.block_spikes[flat_idx],
                    &d_spikes,
                    batch,
                );
                let (d_conv, dgamma, dbeta) = layers::batchnorm_cop_backward(
                    &d_bn_y,
                    &trace.block_xhat[flat_idx],
                    &self.p1(idx.gamma),
                    &trace.block_var[flat_idx],
                    BN_EPS,
                );
                self.add_grad(idx.gamma, dgamma.into_dyn());
                self.add_grad(idx.beta, dbeta.into_dyn());

                let conv_input: &Array4<F> = if bi == 0 {
                    &trace.stage_inputs[stage]
                } else {
                    &trace.block_spikes[flat_idx - 1]
                };
                let need_dx = !(stage == 0 && bi == 0);
                let wt = self.p4(idx.w);
                let (dx, dw, db) =
                    layers::conv3_cop_backward(conv_input, &wt.view(), &d_conv, need_dx);
                self.add_grad(idx.w, dw.into_dyn());
                self.add_grad(idx.b, db.into_dyn());

                if let Some(dx) = dx {
                    if bi == 0 {
                        // through the pool that produced this stage's input
                        if stage > 0 {
                            let prev = &trace.block_spikes[flat_idx - 1];
                            d_spikes = layers::avgpool2_cop_backward(
                                &dx,
                                prev.dim().2 - 2,
                                prev.dim().3 - 2,
                            );
                        }
                    } else {
                        d_spikes = dx;
                    }
                }
            }
        }
        Ok(())
    }

    /// Inference: running-stats BatchNorm, hard spikes, logits only.
    pub fn forward_eval(&self, input: &Array4<F>, batch: usize) -> Result<Array2<F>> {
        self.check_input(input, batch)?;
        let t_bins = self.config.t_bins;
        let mut x = self.input_to_cop(input);
        for stage in 0..self.blocks.len() {
            for idx in &self.blocks[stage] {
                let wt = self.p4(idx.w);
                let conv = layers::conv3_cop_forward(&x, &wt.view(), Some(&self.p1(idx.b)));
                let y = layers::batchnorm_cop_forward_eval(
                    &conv,
                    &self.p1(idx.gamma),
                    &self.p1(idx.beta),
                    &self.running_mean[idx.bn_slot],
                    &self.running_var[idx.bn_slot],
                    BN_EPS,
                );
                let (_, spikes) = self.lif_cop_forward(&y, batch, SpikeMode::Hard);
                x = spikes;
            }
            x = layers::avgpool2_cop_forward(&x);
        }
        let flat = self.gather_features(&x);
        let u = flat.dim().0;
        let fc1 = layers::linear_forward(&flat.view(), &self.p2(self.fc.w1).view(), &self.p1(self.fc.b1));
        let (_, fc1_spikes) = self.lif_vec_forward(&fc1, batch, SpikeMode::Hard);
        let fc2 = layers::linear_forward(
            &fc1_spikes.view(),
            &self.p2(self.fc.w2).view(),
            &self.p1(self.fc.b2),
        );
        let mut logits = Array2::<F>::zeros((batch, self.config.class_count));
        let t_f = F::from(t_bins as f64).expect("fits");
        debug_assert_eq!(u, batch * t_bins);
        for b in 0..batch {
            for t in 0..t_bins {
                let row = fc2.index_axis(Axis(0), b * t_bins + t);
                let mut l = logits.index_axis_mut(Axis(0), b);
                l += &row;
            }
            let mut l = logits.index_axis_mut(Axis(0), b);
            l.mapv_inplace(|v| v / t_f);
        }
        Ok(logits)
    }

    fn check_input(&self, input: &Array4<F>, batch: usize) -> Result<()> {
        let (u, c, h, w) = input.dim();
        if u != batch * self.config.t_bins
            || c != self.config.in_channels
            || h != self.config.height
            || w != self.config.width
        {
            return Err(Error::domain(format!(
                "input shape ({u},{c},{h},{w}) does not match config (batch {batch} x T {}, {}, {}, {})",
                self.config.t_bins, self.config.in_channels, self.config.height, self.config.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            preset: Preset::Vgg16sFlow,
            t_bins: 3,
            in_channels: 2,
            height: 8,
            width: 8,
            class_count: 7,
            lif: LifParams::default(),
            lambda: 0.5,
        }
    }

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            stages: vec![vec![4], vec![4]],
            fc_hidden: 8,
            flow_channels: 4,
            flow_head: true,
        }
    }

    #[test]
    fn zero_input_gives_tied_logits_and_zero_flow() {
        let mut model: Model<f32> = Model::with_arch(tiny_config(), tiny_arch()).unwrap();
        model.init(3);
        let input = Array4::<f32>::zeros((2 * 3, 2, 8, 8));
        let (out, _trace) = model
            .forward_train(&input, 2, SpikeMode::Hard, true)
            .unwrap();
        let l0 = out.logits[[0, 0]];
        assert!(out.logits.iter().all(|&v| (v - l0).abs() < 1e-7));
        let flow = out.flow.unwrap();
        assert!(flow.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn logits_shape_and_flow_pair_count() {
        let mut model: Model<f32> = Model::with_arch(tiny_config(), tiny_arch()).unwrap();
        model.init(1);
        let mut input = Array4::<f32>::zeros((2 * 3, 2, 8, 8));
        input[[0, 0, 3, 3]] = 5.0;
        input[[3, 1, 2, 2]] = 4.0;
        let (out, trace) = model
            .forward_train(&input, 2, SpikeMode::Hard, true)
            .unwrap();
        assert_eq!(out.logits.dim(), (2, 7));
        // (T-1) pairs per sample
        assert_eq!(out.flow.as_ref().unwrap().dim(), (2 * 2, 2, 8, 8));
        for r in trace.mean_spike_rates() {
            assert!((0.0..=1.0).contains(&r));
        }
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn flow_head_does_not_change_logits() {
        let mut model: Model<f32> = Model::with_arch(tiny_config(), tiny_arch()).unwrap();
        model.init(7);
        let mut input = Array4::<f32>::zeros((3, 2, 8, 8));
        input[[1, 0, 4, 4]] = 3.0;
        let (with_flow, _) = model
            .forward_train(&input, 1, SpikeMode::Hard, true)
            .unwrap();
        // Re-run without the flow head; BN running stats were touched but
        // training-mode normalization uses batch stats, so logits match.
        let (without_flow, _) = model
            .forward_train(&input, 1, SpikeMode::Hard, false)
            .unwrap();
        assert_eq!(with_flow.logits, without_flow.logits);
        assert!(without_flow.flow.is_none());

        // And the eval path is flow-free by construction.
        let e1 = model.forward_eval(&input, 1).unwrap();
        let e2 = model.forward_eval(&input, 1).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn preset_archs_have_expected_conv_counts() {
        assert_eq!(
            Preset::Vgg11s.arch().stages.iter().map(Vec::len).sum::<usize>(),
            8
        );
        assert_eq!(
            Preset::Vgg13s.arch().stages.iter().map(Vec::len).sum::<usize>(),
            10
        );
        assert_eq!(
            Preset::Vgg16s.arch().stages.iter().map(Vec::len).sum::<usize>(),
            13
        );
        assert!(Preset::Vgg16sFlow.flow_head());
        assert!(!Preset::Vgg16s.flow_head());
    }

    #[test]
    fn shared_backbone_init_matches_across_presets() {
        let cfg_flow = ModelConfig {
            preset: Preset::Vgg16sFlow,
            t_bins: 10,
            in_channels: 2,
            height: 36,
            width: 36,
            class_count: 7,
            lif: LifParams::default(),
            lambda: 0.5,
        };
        let cfg_plain = ModelConfig {
            preset: Preset::Vgg16s,
            lambda: 0.0,
            ..cfg_flow.clone()
        };
        let mut a: Model<f32> = Model::new(cfg_flow).unwrap();
        let mut b: Model<f32> = Model::new(cfg_plain).unwrap();
        a.init(42);
        b.init(42);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            if pa.name.starts_with("flow.") {
                break;
            }
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value, "param {} differs", pa.name);
        }
    }
}
