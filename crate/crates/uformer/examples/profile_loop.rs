use std::time::Instant;

use uformer::dsp::{self, Waveform};
use uformer::loss::{combined_loss, LossConfig};
use uformer::model::{spectrogram_to_tensor, UFormerConfig, UFormerModel};
use uformer::tensor::Tensor;

fn main() {
    let cfg = UFormerConfig::default();
    let model = UFormerModel::build(&cfg, 1).unwrap();
    let len = 64000usize;
    let clean = Waveform::new((0..len).map(|i| 0.3 * ((i as f64) * 0.1).sin()).collect());
    let spec = dsp::stft(&clean, cfg.fft_size, cfg.hop).unwrap();
    let input = spectrogram_to_tensor(&spec);
    let target_ri = spectrogram_to_tensor(&spec);
    let target_t = Tensor::new(clean.samples.iter().map(|&v| v as f32).collect(), &[1, len]);
    let lcfg = LossConfig::default();
    for i in 0..4 {
        let t0 = Instant::now();
        let (ri, s_hat) = model.forward(&input, len, true).unwrap();
        let fwd = t0.elapsed().as_secs_f64();
        let loss = combined_loss(&s_hat, &target_t, &ri, &target_ri, &lcfg);
        let t1 = Instant::now();
        loss.backward();
        let bwd = t1.elapsed().as_secs_f64();
        for (_, p) in model.named_parameters() {
            p.zero_grad();
        }
        println!("iter {i}: fwd {fwd:.2}s bwd {bwd:.2}s");
    }
}
