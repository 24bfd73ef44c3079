//! The enhancement network: a convolutional encoder ladder over `[N,2,T,F]`
//! RI spectrograms, an axial self-attention bottleneck, a mirrored
//! transposed-convolution decoder with cross-attention skip gates, and a
//! learnable synthesis decoder (frame projection plus 1-D transposed
//! convolution) that maps the estimated spectrogram back to time-domain
//! samples.
//!
//! Frequency is halved by every encoder stage while the frame axis is never
//! downsampled; the decoder restores the exact per-stage bin counts, cropping
//! when a transposed stage overshoots.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    mhca_forward, mhsa_forward, AxialProjections, MhcaParams, MhsaParams, QkScale,
};
use crate::dsp::{self, ComplexSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters of the network. The final decoder entry counts complex
/// output channels; each complex channel is realized as two real feature
/// maps, mirroring the 2-channel RI input convention.
#[derive(Debug, Clone, PartialEq)]
pub struct UFormerConfig {
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub leaky_slope: f32,
    pub heads: usize,
    pub span: usize,
    pub use_mhsa: bool,
    pub use_mhca: bool,
    pub fft_size: usize,
    pub hop: usize,
    /// Sign of the value positional term in the window heads: -1 subtracts
    /// the table, +1 adds it.
    pub value_pos_sign: f32,
    pub qk_scale: QkScale,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl Default for UFormerConfig {
    fn default() -> Self {
        UFormerConfig {
            enc_channels: vec![16, 32, 64, 128, 256],
            dec_channels: vec![128, 64, 32, 16, 1],
            kernel: (3, 5),
            stride: (1, 2),
            leaky_slope: 0.2,
            heads: 4,
            span: 7,
            use_mhsa: true,
            use_mhca: true,
            fft_size: 512,
            hop: 256,
            value_pos_sign: -1.0,
            qk_scale: QkScale::One,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl UFormerConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Per-stage frequency extents from the input down to the bottleneck.
    pub fn bins_ladder(&self) -> Vec<usize> {
        let (_, kf) = self.kernel;
        let (_, sf) = self.stride;
        let pf = (kf - 1) / 2;
        let mut ladder = vec![self.bins()];
        for _ in 0..self.enc_channels.len() {
            let f = ladder.last().unwrap();
            ladder.push((f + 2 * pf - kf) / sf + 1);
        }
        ladder
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.len() != 5 || self.dec_channels.len() != 5 {
            return Err(Error::Config(format!(
                "channel ladders must have 5 stages, got {} encoder / {} decoder",
                self.enc_channels.len(),
                self.dec_channels.len()
            )));
        }
        let stages = self.enc_channels.len();
        for j in 0..stages - 1 {
            if self.dec_channels[j] != self.enc_channels[stages - 2 - j] {
                return Err(Error::Config(format!(
                    "decoder stage {j} has {} channels but must mirror encoder stage {} ({})",
                    self.dec_channels[j],
                    stages - 2 - j,
                    self.enc_channels[stages - 2 - j]
                )));
            }
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return Err(Error::Config("kernel extents must be odd".into()));
        }
        if self.stride.0 != 1 {
            return Err(Error::Config("time axis must not be downsampled (stride_t = 1)".into()));
        }
        if self.fft_size % 2 != 0 || self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!(
                "invalid framing: fft_size {} hop {}",
                self.fft_size, self.hop
            )));
        }
        if self.use_mhsa && self.enc_channels[stages - 1] % self.heads != 0 {
            return Err(Error::Config(format!(
                "bottleneck channels {} not divisible into {} heads",
                self.enc_channels[stages - 1],
                self.heads
            )));
        }
        if self.use_mhca {
            for j in 0..stages - 1 {
                if self.dec_channels[j] % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "skip gate {j} channels {} not divisible into {} heads",
                        self.dec_channels[j], self.heads
                    )));
                }
            }
        }
        if self.value_pos_sign != 1.0 && self.value_pos_sign != -1.0 {
            return Err(Error::Config(format!(
                "value_pos_sign must be +1 or -1, got {}",
                self.value_pos_sign
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0,1), got {}",
                self.leaky_slope
            )));
        }
        let ladder = self.bins_ladder();
        if *ladder.last().unwrap() < 1 {
            return Err(Error::Config("frequency ladder collapses to zero bins".into()));
        }
        Ok(())
    }
}

struct Conv2dLayer {
    weight: Tensor,
    bias: Tensor,
}

struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: RefCell<Vec<f32>>,
    running_var: RefCell<Vec<f32>>,
}

impl BatchNorm2d {
    fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
        }
    }

    fn forward(&self, x: &Tensor, training: bool, eps: f32, momentum: f32) -> Tensor {
        let mut mean = self.running_mean.borrow_mut();
        let mut var = self.running_var.borrow_mut();
        x.batch_norm(&self.gamma, &self.beta, &mut mean, &mut var, training, eps, momentum)
    }
}

struct EncStage {
    conv: Conv2dLayer,
    bn: BatchNorm2d,
}

struct DecStage {
    conv: Conv2dLayer,
    bn: Option<BatchNorm2d>,
}

struct SynthesisDecoder {
    /// `[2F, K]` frame projection, initialized to the onesided inverse-DFT.
    proj_weight: Tensor,
    /// `[K]`
    proj_bias: Tensor,
    /// `[K, 1, K]` overlap-add bank, initialized to the normalized synthesis
    /// window on its diagonal.
    kernel: Tensor,
}

pub struct UFormerModel {
    config: UFormerConfig,
    enc: Vec<EncStage>,
    dec: Vec<DecStage>,
    mhsa: Option<MhsaParams>,
    mhca: Vec<MhcaParams>,
    synth: SynthesisDecoder,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(data, shape).with_grad()
}

fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> Tensor {
    let dist = Normal::new(0.0, sigma).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(data, shape).with_grad()
}

fn axial_projections(rng: &mut ChaCha8Rng, c: usize, heads: usize, span: usize) -> AxialProjections {
    let d = c / heads;
    let table = 2 * span - 1;
    AxialProjections {
        wq: uniform_init(rng, &[c, heads * d], c),
        wk: uniform_init(rng, &[c, heads * d], c),
        wv: uniform_init(rng, &[c, heads * d], c),
        wo: uniform_init(rng, &[heads * d, c], heads * d),
        rq: normal_init(rng, &[table, d], 0.02),
        rk: normal_init(rng, &[table, d], 0.02),
        rv: normal_init(rng, &[table, d], 0.02),
    }
}

fn conv1x1(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> (Tensor, Tensor) {
    (
        uniform_init(rng, &[c_out, c_in, 1, 1], c_in),
        Tensor::zeros(&[c_out]).with_grad(),
    )
}

/// Activation buffers cycle every step; without raising the mmap threshold
/// glibc hands them back to the kernel and each step refaults its whole
/// working set, which dominates the run time.
#[cfg(target_os = "linux")]
fn keep_heap_pooled() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}

#[cfg(not(target_os = "linux"))]
fn keep_heap_pooled() {}

impl UFormerModel {
    /// Deterministic build: convolution weights are fan-in-scaled uniform,
    /// positional tables small-normal, and the synthesis decoder starts as
    /// the inverse-STFT synthesis operator.
    pub fn build(config: &UFormerConfig, seed: u64) -> Result<UFormerModel> {
        keep_heap_pooled();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kt, kf) = config.kernel;
        let stages = config.enc_channels.len();

        let mut enc = Vec::with_capacity(stages);
        let mut c_in = 2usize;
        for &c_out in &config.enc_channels {
            let weight = uniform_init(&mut rng, &[c_out, c_in, kt, kf], c_in * kt * kf);
            let bias = Tensor::zeros(&[c_out]).with_grad();
            enc.push(EncStage {
                conv: Conv2dLayer { weight, bias },
                bn: BatchNorm2d::new(c_out),
            });
            c_in = c_out;
        }

        let mut dec = Vec::with_capacity(stages);
        let mut c_in = *config.enc_channels.last().unwrap();
        for (j, &c_next) in config.dec_channels.iter().enumerate() {
            let last = j == stages - 1;
            // The final stage emits RI pairs: one complex channel = 2 real maps.
            let c_out = if last { 2 * c_next } else { c_next };
            let weight = uniform_init(&mut rng, &[c_in, c_out, kt, kf], c_in * kt * kf);
            let bias = Tensor::zeros(&[c_out]).with_grad();
            dec.push(DecStage {
                conv: Conv2dLayer { weight, bias },
                bn: if last { None } else { Some(BatchNorm2d::new(c_out)) },
            });
            // The next stage consumes the skip concatenation.
            c_in = 2 * c_out;
        }

        let bottleneck_c = *config.enc_channels.last().unwrap();
        let mhsa = if config.use_mhsa {
            let time = axial_projections(&mut rng, bottleneck_c, config.heads, config.span);
            let freq = axial_projections(&mut rng, bottleneck_c, config.heads, config.span);
            let (fuse_weight, fuse_bias) = conv1x1(&mut rng, bottleneck_c, bottleneck_c);
            Some(MhsaParams {
                heads: config.heads,
                span: config.span,
                value_pos_sign: config.value_pos_sign,
                qk_scale: config.qk_scale,
                time,
                freq,
                fuse_weight,
                fuse_bias,
            })
        } else {
            None
        };

        let mhca = if config.use_mhca {
            (0..stages - 1)
                .map(|j| {
                    let c = config.dec_channels[j];
                    let (wq, bq) = conv1x1(&mut rng, c, c);
                    let (wk, bk) = conv1x1(&mut rng, c, c);
                    let (wv, bv) = conv1x1(&mut rng, c, c);
                    let (merge_w, merge_b) = conv1x1(&mut rng, c, c);
                    MhcaParams {
                        heads: config.heads,
                        wq,
                        bq,
                        wk,
                        bk,
                        wv,
                        bv,
                        merge_w,
                        merge_b,
                    }
                })
                .collect()
        } else {
            Vec::new()
        };

        let synth = Self::init_synthesis(config);

        Ok(UFormerModel {
            config: config.clone(),
            enc,
            dec,
            mhsa,
            mhca,
            synth,
        })
    }

    /// Frame projection = onesided inverse-DFT (Hermitian doubling folded
    /// in), overlap-add bank = normalized synthesis window on the diagonal,
    /// so the untrained decoder reproduces the reference inverse transform on
    /// interior samples.
    fn init_synthesis(config: &UFormerConfig) -> SynthesisDecoder {
        let k = config.fft_size;
        let hop = config.hop;
        let bins = config.bins();
        let mut proj = vec![0.0f32; 2 * bins * k];
        let two_pi = 2.0 * std::f64::consts::PI;
        for n in 0..k {
            for f in 0..bins {
                let angle = two_pi * (f * n) as f64 / k as f64;
                let weight = if f == 0 || f == k / 2 { 1.0 } else { 2.0 };
                proj[f * k + n] = (weight * angle.cos() / k as f64) as f32;
                if f != 0 && f != k / 2 {
                    proj[(bins + f) * k + n] = (-weight * angle.sin() / k as f64) as f32;
                }
            }
        }
        let window = dsp::hann_window(k);
        let mut env = vec![0.0f64; hop];
        for (m, e) in env.iter_mut().enumerate() {
            let mut j = m;
            while j < k {
                *e += window[j] * window[j];
                j += hop;
            }
        }
        let mut kernel = vec![0.0f32; k * k];
        for i in 0..k {
            kernel[i * k + i] = (window[i] / env[i % hop]) as f32;
        }
        SynthesisDecoder {
            proj_weight: Tensor::new(proj, &[2 * bins, k]).with_grad(),
            proj_bias: Tensor::zeros(&[k]).with_grad(),
            kernel: Tensor::new(kernel, &[k, 1, k]).with_grad(),
        }
    }

    pub fn config(&self) -> &UFormerConfig {
        &self.config
    }

    /// All trainable parameters in registration order with stable names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.conv.weight"), stage.conv.weight.clone()));
            out.push((format!("enc{i}.conv.bias"), stage.conv.bias.clone()));
            out.push((format!("enc{i}.bn.gamma"), stage.bn.gamma.clone()));
            out.push((format!("enc{i}.bn.beta"), stage.bn.beta.clone()));
        }
        for (i, stage) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.conv.weight"), stage.conv.weight.clone()));
            out.push((format!("dec{i}.conv.bias"), stage.conv.bias.clone()));
            if let Some(bn) = &stage.bn {
                out.push((format!("dec{i}.bn.gamma"), bn.gamma.clone()));
                out.push((format!("dec{i}.bn.beta"), bn.beta.clone()));
            }
        }
        if let Some(mhsa) = &self.mhsa {
            out.extend(mhsa.named_params("mhsa"));
        }
        for (i, gate) in self.mhca.iter().enumerate() {
            out.extend(gate.named_params(&format!("mhca{i}")));
        }
        out.push(("synth.proj.weight".into(), self.synth.proj_weight.clone()));
        out.push(("synth.proj.bias".into(), self.synth.proj_bias.clone()));
        out.push(("synth.kernel".into(), self.synth.kernel.clone()));
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, stage) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.bn.running_mean"), stage.bn.running_mean.borrow().clone()));
            out.push((format!("enc{i}.bn.running_var"), stage.bn.running_var.borrow().clone()));
        }
        for (i, stage) in self.dec.iter().enumerate() {
            if let Some(bn) = &stage.bn {
                out.push((format!("dec{i}.bn.running_mean"), bn.running_mean.borrow().clone()));
                out.push((format!("dec{i}.bn.running_var"), bn.running_var.borrow().clone()));
            }
        }
        out
    }

    pub fn set_buffer(&self, name: &str, values: &[f32]) -> Result<()> {
        let assign = |cell: &RefCell<Vec<f32>>| -> Result<()> {
            let mut slot = cell.borrow_mut();
            if slot.len() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "buffer {name} has {} values, expected {}",
                    values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(values);
            Ok(())
        };
        for (i, stage) in self.enc.iter().enumerate() {
            if name == format!("enc{i}.bn.running_mean") {
                return assign(&stage.bn.running_mean);
            }
            if name == format!("enc{i}.bn.running_var") {
                return assign(&stage.bn.running_var);
            }
        }
        for (i, stage) in self.dec.iter().enumerate() {
            if let Some(bn) = &stage.bn {
                if name == format!("dec{i}.bn.running_mean") {
                    return assign(&bn.running_mean);
                }
                if name == format!("dec{i}.bn.running_var") {
                    return assign(&bn.running_var);
                }
            }
        }
        Err(Error::Checkpoint(format!("unknown buffer {name}")))
    }

    pub fn count_params(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Encoder/decoder/synthesis pass over an `[N,2,T,F]` RI spectrogram.
    /// Returns the estimated RI spectrogram (same shape) and the time-domain
    /// estimate `[N, out_len]`.
    pub fn forward(&self, input: &Tensor, out_len: usize, training: bool) -> Result<(Tensor, Tensor)> {
        let shape = input.shape().to_vec();
        if shape.len() != 4 || shape[1] != 2 || shape[3] != self.config.bins() {
            return Err(Error::Model(format!(
                "forward: expected [N,2,T,{}], got {shape:?}",
                self.config.bins()
            )));
        }
        if !input.is_finite() {
            return Err(Error::Model("forward: non-finite input".into()));
        }
        let frames = dsp::frame_count(out_len, self.config.fft_size, self.config.hop);
        if frames != shape[2] {
            return Err(Error::Model(format!(
                "forward: {} frames inconsistent with out_len {out_len} ({frames} expected)",
                shape[2]
            )));
        }
        let ladder = self.config.bins_ladder();
        let stages = self.enc.len();
        let slope = self.config.leaky_slope;

        let mut x = input.clone();
        let mut skips = Vec::with_capacity(stages);
        for (i, stage) in self.enc.iter().enumerate() {
            let pad = ((self.config.kernel.0 - 1) / 2, (self.config.kernel.1 - 1) / 2);
            let y = x.conv2d(&stage.conv.weight, &stage.conv.bias, self.config.stride, pad);
            debug_assert_eq!(y.shape()[3], ladder[i + 1], "encoder stage {i} bins");
            let y = stage.bn.forward(&y, training, self.config.bn_eps, self.config.bn_momentum);
            x = y.leaky_relu(slope);
            skips.push(x.clone());
        }

        if let Some(mhsa) = &self.mhsa {
            x = mhsa_forward(&x, mhsa);
        }

        for (j, stage) in self.dec.iter().enumerate() {
            let pad = ((self.config.kernel.0 - 1) / 2, (self.config.kernel.1 - 1) / 2);
            let mut y = x.conv_transpose2d(&stage.conv.weight, &stage.conv.bias, self.config.stride, pad);
            let target = ladder[stages - 1 - j];
            if y.shape()[3] > target {
                y = y.slice(3, 0, target);
            }
            debug_assert_eq!(y.shape()[3], target, "decoder stage {j} bins");
            if let Some(bn) = &stage.bn {
                let y_bn = bn.forward(&y, training, self.config.bn_eps, self.config.bn_momentum);
                let activated = y_bn.leaky_relu(slope);
                let skip = &skips[stages - 2 - j];
                assert_eq!(
                    &activated.shape()[2..],
                    &skip.shape()[2..],
                    "skip {j}: decoder {:?} and encoder {:?} are misaligned",
                    activated.shape(),
                    skip.shape()
                );
                x = if self.config.use_mhca {
                    mhca_forward(&activated, skip, &self.mhca[j])
                } else {
                    Tensor::concat(&[&activated, skip], 1)
                };
            } else {
                x = y;
            }
        }
        debug_assert_eq!(x.shape(), input.shape(), "RI estimate shape");
        let s_hat = self.synthesize(&x, out_len)?;
        Ok((x, s_hat))
    }

    /// The learnable decoder: per-frame linear projection of the RI vector to
    /// a K-point frame, then strided overlap-add through the kernel bank, the
    /// head pad trimmed off.
    pub fn synthesize(&self, ri: &Tensor, out_len: usize) -> Result<Tensor> {
        let shape = ri.shape().to_vec();
        let bins = self.config.bins();
        if shape.len() != 4 || shape[1] != 2 || shape[3] != bins {
            return Err(Error::Model(format!(
                "synthesize: expected [N,2,T,{bins}], got {shape:?}"
            )));
        }
        let (n, t) = (shape[0], shape[2]);
        let k = self.config.fft_size;
        let total = (t - 1) * self.config.hop + k;
        if k + out_len > total {
            return Err(Error::Model(format!(
                "synthesize: out_len {out_len} exceeds synthesizable length {}",
                total - k
            )));
        }
        let frames = ri.permute(&[0, 2, 1, 3]).reshape(&[n, t, 2 * bins]);
        let projected = frames
            .matmul(&self.synth.proj_weight)
            .add(&self.synth.proj_bias.reshape(&[1, 1, k]));
        let stacked = projected.permute(&[0, 2, 1]);
        let synthesized = stacked.conv_transpose1d(&self.synth.kernel, self.config.hop);
        Ok(synthesized.slice(2, k, out_len).reshape(&[n, out_len]))
    }

    /// Enhances a mono 16 kHz waveform; the output has the input's length.
    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        let spec = dsp::stft(noisy, self.config.fft_size, self.config.hop)?;
        let input = spectrogram_to_tensor(&spec);
        let (_, s_hat) = self.forward(&input, noisy.len(), false)?;
        let data = s_hat.to_vec();
        Ok(Waveform::new(data.iter().map(|&v| v as f64).collect()))
    }
}

/// `[T][F][2]` interleaved RI to a `[1,2,T,F]` channel-major tensor.
pub fn spectrogram_to_tensor(spec: &ComplexSpectrogram) -> Tensor {
    let (t, f) = (spec.frames, spec.bins);
    let mut data = vec![0.0f32; 2 * t * f];
    for ti in 0..t {
        for fi in 0..f {
            data[ti * f + fi] = spec.re(ti, fi) as f32;
            data[t * f + ti * f + fi] = spec.im(ti, fi) as f32;
        }
    }
    Tensor::new(data, &[1, 2, t, f])
}

/// First batch item of a `[N,2,T,F]` tensor as an interleaved spectrogram.
pub fn tensor_to_spectrogram(t: &Tensor) -> ComplexSpectrogram {
    assert!(t.rank() == 4 && t.shape()[1] == 2, "expected [N,2,T,F], got {:?}", t.shape());
    let (frames, bins) = (t.shape()[2], t.shape()[3]);
    let data = t.data();
    let mut spec = ComplexSpectrogram::zeros(frames, bins);
    for ti in 0..frames {
        for fi in 0..bins {
            spec.ri[(ti * bins + fi) * 2] = data[ti * bins + fi] as f64;
            spec.ri[(ti * bins + fi) * 2 + 1] = data[frames * bins + ti * bins + fi] as f64;
        }
    }
    spec
}
