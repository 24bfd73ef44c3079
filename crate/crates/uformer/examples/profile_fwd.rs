use std::time::Instant;

use uformer::attention::{mhca_forward, mhsa_forward};
use uformer::dsp::{self, Waveform};
use uformer::model::{spectrogram_to_tensor, UFormerConfig, UFormerModel};
use uformer::tensor::Tensor;

fn main() {
    let cfg = UFormerConfig::default();
    let model = UFormerModel::build(&cfg, 1).unwrap();
    let len = 64000usize;
    let x = Waveform::new((0..len).map(|i| 0.3 * ((i as f64) * 0.07).sin()).collect());
    let spec = dsp::stft(&x, cfg.fft_size, cfg.hop).unwrap();
    let input = spectrogram_to_tensor(&spec);

    // Encoder-ish single convs at each scale to isolate conv costs.
    let shapes = [
        (2usize, 16usize, 257usize),
        (16, 32, 129),
        (32, 64, 65),
        (64, 128, 33),
        (128, 256, 17),
    ];
    let t_frames = spec.frames;
    for (ci, co, f) in shapes {
        let xt = Tensor::full(&[1, ci, t_frames, f], 0.1f32);
        let w = Tensor::full(&[co, ci, 3, 5], 0.01f32);
        let b = Tensor::zeros(&[co]);
        let t0 = Instant::now();
        let y = xt.conv2d(&w, &b, (1, 2), (1, 2));
        println!("conv {ci}->{co} F={f}: {:.0}ms out {:?}", t0.elapsed().as_secs_f64() * 1e3, y.shape());
    }
    // One decoder transposed conv.
    let xt = Tensor::full(&[1, 256, t_frames, 9], 0.1f32);
    let w = Tensor::full(&[256, 128, 3, 5], 0.01f32);
    let b = Tensor::zeros(&[128]);
    let t0 = Instant::now();
    let y = xt.conv_transpose2d(&w, &b, (1, 2), (1, 2));
    println!("convT 256->128 F=9: {:.0}ms out {:?}", t0.elapsed().as_secs_f64() * 1e3, y.shape());

    // MHSA at bottleneck.
    let bt = Tensor::full(&[1, 256, t_frames, 9], 0.1f32);
    let mm = UFormerModel::build(&cfg, 2).unwrap();
    let _ = mm;
    let t0 = Instant::now();
    let params = build_mhsa();
    let y = mhsa_forward(&bt, &params);
    println!("mhsa: {:.0}ms out {:?}", t0.elapsed().as_secs_f64() * 1e3, y.shape());

    // MHCA at the widest gate.
    let xd = Tensor::full(&[1, 16, t_frames, 129], 0.1f32);
    let ye = Tensor::full(&[1, 16, t_frames, 129], 0.1f32);
    let gate = build_mhca(16);
    let t0 = Instant::now();
    let y = mhca_forward(&xd, &ye, &gate);
    println!("mhca C=16 F=129: {:.0}ms out {:?}", t0.elapsed().as_secs_f64() * 1e3, y.shape());

    let xd = Tensor::full(&[1, 128, t_frames, 17], 0.1f32);
    let ye = Tensor::full(&[1, 128, t_frames, 17], 0.1f32);
    let gate = build_mhca(128);
    let t0 = Instant::now();
    let y = mhca_forward(&xd, &ye, &gate);
    println!("mhca C=128 F=17: {:.0}ms out {:?}", t0.elapsed().as_secs_f64() * 1e3, y.shape());

    // Synthesis.
    let t0 = Instant::now();
    let s = model.synthesize(&input, len).unwrap();
    println!("synthesize: {:.0}ms out {:?}", t0.elapsed().as_secs_f64() * 1e3, s.shape());

    // Whole forward for reference.
    let t0 = Instant::now();
    let _ = model.forward(&input, len, true).unwrap();
    println!("full forward: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);
}

fn build_mhsa() -> uformer::attention::MhsaParams {
    use uformer::attention::{AxialProjections, MhsaParams, QkScale};
    let c = 256;
    let heads = 4;
    let d = c / heads;
    let span = 7;
    let proj = || AxialProjections {
        wq: Tensor::full(&[c, c], 0.01f32),
        wk: Tensor::full(&[c, c], 0.01f32),
        wv: Tensor::full(&[c, c], 0.01f32),
        wo: Tensor::full(&[c, c], 0.01f32),
        rq: Tensor::full(&[2 * span - 1, d], 0.01f32),
        rk: Tensor::full(&[2 * span - 1, d], 0.01f32),
        rv: Tensor::full(&[2 * span - 1, d], 0.01f32),
    };
    MhsaParams {
        heads,
        span,
        value_pos_sign: -1.0,
        qk_scale: QkScale::One,
        time: proj(),
        freq: proj(),
        fuse_weight: Tensor::full(&[c, c, 1, 1], 0.01f32),
        fuse_bias: Tensor::zeros(&[c]),
    }
}

fn build_mhca(c: usize) -> uformer::attention::MhcaParams {
    use uformer::attention::MhcaParams;
    MhcaParams {
        heads: 4,
        wq: Tensor::full(&[c, c, 1, 1], 0.01f32),
        bq: Tensor::zeros(&[c]),
        wk: Tensor::full(&[c, c, 1, 1], 0.01f32),
        bk: Tensor::zeros(&[c]),
        wv: Tensor::full(&[c, c, 1, 1], 0.01f32),
        bv: Tensor::zeros(&[c]),
        merge_w: Tensor::full(&[c, c, 1, 1], 0.01f32),
        merge_b: Tensor::zeros(&[c]),
    }
}
