use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uformer::dsp::{self, Waveform};
use uformer::model::{UFormerConfig, UFormerModel};
use uformer::train::{make_batch, TrainConfig, Trainer};

fn speechlike(seconds: f64, seed: u64) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0_base: f64 = 110.0 + rng.gen_range(0.0..40.0);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / 16000.0;
            let f0 = f0_base * (1.0 + 0.15 * (2.0 * std::f64::consts::PI * 0.7 * t).sin());
            let syllable = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 3.1 * t).sin();
            let mut s = 0.0;
            for h in 1..=6 {
                let amp = 1.0 / h as f64;
                s += amp * (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin();
            }
            0.15 * syllable * s
        })
        .collect();
    Waveform::new(samples)
}

fn white(seconds: f64, seed: u64) -> Waveform {
    let n = (seconds * 16000.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

fn main() {
    let start = Instant::now();
    let clean = speechlike(4.0, 11);
    let noise = white(4.0, 12);
    let (noisy, _) = dsp::mix_at_snr(&clean, &noise, 0.0).unwrap();
    let base_ssnr = dsp::ssnr_default(&clean, &noisy).unwrap();
    println!("noisy SSNR: {base_ssnr:.2} dB");

    let model = UFormerModel::build(&UFormerConfig::default(), 7).unwrap();
    let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch(&[(clean.clone(), noisy.clone())], 64000, &mut rng, 512, 256).unwrap();

    let mut first = None;
    for step in 1..=500u32 {
        let loss = trainer.step(&batch).unwrap();
        let l0 = *first.get_or_insert(loss);
        if step % 10 == 0 || step <= 3 {
            let mut line = format!(
                "step {step:3}  loss {loss:.6}  ratio {:.3}  t {:.0}s",
                loss / l0,
                start.elapsed().as_secs_f64()
            );
            if step % 50 == 0 {
                let enhanced = trainer.model.enhance(&noisy).unwrap();
                let ssnr = dsp::ssnr_default(&clean, &enhanced).unwrap();
                line.push_str(&format!("  ssnr {ssnr:.2} (gain {:.2})", ssnr - base_ssnr));
            }
            println!("{line}");
        }
        if loss <= 0.1 * l0 && step % 50 == 0 {
            let enhanced = trainer.model.enhance(&noisy).unwrap();
            let gain = dsp::ssnr_default(&clean, &enhanced).unwrap() - base_ssnr;
            if gain >= 5.0 {
                println!("both criteria met at step {step} after {:.0}s", start.elapsed().as_secs_f64());
                return;
            }
        }
    }
    println!("finished 500 steps after {:.0}s", start.elapsed().as_secs_f64());
}
