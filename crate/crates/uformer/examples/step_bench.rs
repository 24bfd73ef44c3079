use std::time::Instant;

use uformer::dsp::{self, Waveform};
use uformer::loss::{combined_loss, LossConfig};
use uformer::model::{spectrogram_to_tensor, UFormerConfig, UFormerModel};
use uformer::tensor::Tensor;

fn main() {
    let cfg = UFormerConfig::default();
    let model = UFormerModel::build(&cfg, 1).unwrap();
    let len = 64000usize;
    let clean = Waveform::new((0..len).map(|i| 0.3 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin()).collect());
    let noisy = Waveform::new(clean.samples.iter().enumerate().map(|(i, &v)| v + 0.1 * ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.05).collect());
    let spec = dsp::stft(&noisy, cfg.fft_size, cfg.hop).unwrap();
    let input = spectrogram_to_tensor(&spec);
    let clean_spec = dsp::stft(&clean, cfg.fft_size, cfg.hop).unwrap();
    let target_ri = spectrogram_to_tensor(&clean_spec);
    let target_t = Tensor::new(clean.samples.iter().map(|&v| v as f32).collect(), &[1, len]);
    let lcfg = LossConfig::default();

    let t0 = Instant::now();
    let (ri, s_hat) = model.forward(&input, len, true).unwrap();
    let fwd = t0.elapsed();
    let loss = combined_loss(&s_hat, &target_t, &ri, &target_ri, &lcfg);
    let t1 = Instant::now();
    loss.backward();
    let bwd = t1.elapsed();
    println!("T={} frames; forward {:.2}s backward {:.2}s loss {}", spec.frames, fwd.as_secs_f64(), bwd.as_secs_f64(), loss.item());
}
