//! Verification suites behind `uformer verify`: finite-difference gradient
//! checks and adjointness for every operator, transform round trips, and
//! scalar-loop oracles for the attention blocks.
//!
//! The oracles here are deliberately independent re-implementations (plain
//! nested loops in `f64`) of the formulas the tensor ops compute; they exist
//! only to cross-check the production path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    axial_attention, mhca_attention_mask, mhca_forward, mhca_gate, mhsa_forward, positional_head,
    scaled_dot_attention, AttnAxis, AxialProjections, MhcaParams, MhsaParams, QkScale,
};
use crate::dsp;
use crate::error::{Error, Result};
use crate::loss::{freq_loss, time_loss, FreqNorm, LossFlavor};
use crate::tensor::{dot, grad_check, window_attention, Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Dsp,
    Attention,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "dsp" => Ok(Suite::Dsp),
            "attention" => Ok(Suite::Attention),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite `{other}` (expected gradcheck|dsp|attention|all)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tol
    }
}

#[derive(Debug, Default)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    fn record(&mut self, name: &str, max_err: f64, tol: f64) {
        self.results.push(CheckResult {
            name: name.to_string(),
            max_err,
            tol,
        });
    }

    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{:<44} max err {:>12.3e}  tol {:>8.0e}  {}\n",
                r.name,
                r.max_err,
                r.tol,
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

pub fn run_suite(suite: Suite) -> SuiteReport {
    let mut report = SuiteReport::default();
    match suite {
        Suite::Gradcheck => gradcheck_suite(&mut report),
        Suite::Dsp => dsp_suite(&mut report),
        Suite::Attention => attention_suite(&mut report),
        Suite::All => {
            gradcheck_suite(&mut report);
            dsp_suite(&mut report);
            attention_suite(&mut report);
        }
    }
    report
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t<E: Elem>(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| crate::tensor::el::<E>(r.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new(data, shape)
}

/// Scale-normalized deviation between an implementation and its oracle.
fn field_err(actual: &[f64], oracle: &[f64]) -> f64 {
    let scale = oracle.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
    actual
        .iter()
        .zip(oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / scale
}

// ---------------------------------------------------------------------------
// Gradient checks and adjointness
// ---------------------------------------------------------------------------

const SEEDS: u64 = 5;

fn gradcheck_suite(report: &mut SuiteReport) {
    let eps = 1e-4;

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let a = rand_t::<f64>(&mut r, &[3, 1]).with_grad();
        let b = rand_t::<f64>(&mut r, &[3, 4]).with_grad();
        worst = worst.max(
            grad_check(|t| t[0].mul(&t[1]).add(&t[0]).sub(&t[1]).sum_all(), &[a, b], eps).max_rel_err,
        );
    }
    report.record("gradcheck elementwise (broadcast)", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(10 + seed);
        let a = rand_t::<f64>(&mut r, &[2, 3, 4]).with_grad();
        let b = rand_t::<f64>(&mut r, &[2, 4, 3]).with_grad();
        worst = worst.max(grad_check(|t| t[0].matmul(&t[1]).sum_all(), &[a, b], eps).max_rel_err);
    }
    report.record("gradcheck matmul (batched)", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(20 + seed);
        let x = rand_t::<f64>(&mut r, &[1, 2, 4, 5]).with_grad();
        let w = rand_t::<f64>(&mut r, &[3, 2, 3, 3]).with_grad();
        let b = rand_t::<f64>(&mut r, &[3]).with_grad();
        worst = worst.max(
            grad_check(|t| t[0].conv2d(&t[1], &t[2], (1, 2), (1, 1)).sum_all(), &[x, w, b], eps)
                .max_rel_err,
        );
    }
    report.record("gradcheck conv2d", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(30 + seed);
        let x = rand_t::<f64>(&mut r, &[1, 3, 3, 4]).with_grad();
        let w = rand_t::<f64>(&mut r, &[3, 2, 3, 3]).with_grad();
        let b = rand_t::<f64>(&mut r, &[2]).with_grad();
        worst = worst.max(
            grad_check(
                |t| t[0].conv_transpose2d(&t[1], &t[2], (1, 2), (1, 1)).sum_all(),
                &[x, w, b],
                eps,
            )
            .max_rel_err,
        );
    }
    report.record("gradcheck conv_transpose2d", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(40 + seed);
        let x = rand_t::<f64>(&mut r, &[1, 3, 4]).with_grad();
        let w = rand_t::<f64>(&mut r, &[3, 1, 6]).with_grad();
        worst = worst
            .max(grad_check(|t| t[0].conv_transpose1d(&t[1], 3).sum_all(), &[x, w], eps).max_rel_err);
    }
    report.record("gradcheck conv_transpose1d", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(50 + seed);
        let x = rand_t::<f64>(&mut r, &[2, 2, 3, 3]).with_grad();
        let g = rand_t::<f64>(&mut r, &[2]).with_grad();
        let b = rand_t::<f64>(&mut r, &[2]).with_grad();
        worst = worst.max(
            grad_check(
                |t| {
                    let mut rm = vec![0.0f64; 2];
                    let mut rv = vec![1.0f64; 2];
                    let y = t[0].batch_norm(&t[1], &t[2], &mut rm, &mut rv, true, 1e-5, 0.1);
                    y.mul(&y).sum_all()
                },
                &[x, g, b],
                eps,
            )
            .max_rel_err,
        );
    }
    report.record("gradcheck batch_norm", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(60 + seed);
        let data: Vec<f64> = (0..24)
            .map(|_| {
                let v: f64 = r.gen_range(0.05..1.0);
                if r.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::new(data, &[24]).with_grad();
        worst = worst.max(grad_check(|t| t[0].leaky_relu(0.2).sum_all(), &[x], eps).max_rel_err);
    }
    report.record("gradcheck leaky_relu (off-kink)", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(70 + seed);
        let x = rand_t::<f64>(&mut r, &[3, 4]).with_grad();
        worst = worst.max(grad_check(|t| t[0].sigmoid().sum_all(), &[x], eps).max_rel_err);
    }
    report.record("gradcheck sigmoid", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(80 + seed);
        let x = rand_t::<f64>(&mut r, &[2, 5]).with_grad();
        let w = rand_t::<f64>(&mut r, &[2, 5]);
        worst = worst
            .max(grad_check(|t| t[0].softmax(1).mul(&w).sum_all(), &[x], eps).max_rel_err);
    }
    report.record("gradcheck softmax", worst, 1e-4);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(90 + seed);
        let q = rand_t::<f64>(&mut r, &[2, 5, 3]).with_grad();
        let k = rand_t::<f64>(&mut r, &[2, 5, 3]).with_grad();
        let v = rand_t::<f64>(&mut r, &[2, 5, 4]).with_grad();
        let rq = rand_t::<f64>(&mut r, &[5, 3]).with_grad();
        let rk = rand_t::<f64>(&mut r, &[5, 3]).with_grad();
        let rv = rand_t::<f64>(&mut r, &[5, 4]).with_grad();
        let w = rand_t::<f64>(&mut r, &[2, 5, 4]);
        worst = worst.max(
            grad_check(
                |t| window_attention(&t[0], &t[1], &t[2], &t[3], &t[4], &t[5], 3, -1.0, 1.0)
                    .mul(&w)
                    .sum_all(),
                &[q, k, v, rq, rk, rv],
                eps,
            )
            .max_rel_err,
        );
    }
    report.record("gradcheck window attention", worst, 1e-3);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let (c, heads, span) = (4usize, 2usize, 2usize);
        let p = random_mhsa::<f64>(&mut r, c, heads, span, false, QkScale::One);
        let x = rand_t::<f64>(&mut r, &[1, c, 3, 2]).with_grad();
        let inputs = vec![
            x,
            p.time.wq.clone().with_grad(),
            p.freq.wv.clone().with_grad(),
            p.time.rv.clone().with_grad(),
            p.fuse_weight.clone().with_grad(),
        ];
        worst = worst.max(
            grad_check(
                |t| {
                    let params = MhsaParams {
                        heads,
                        span,
                        value_pos_sign: -1.0,
                        qk_scale: QkScale::One,
                        time: AxialProjections {
                            wq: t[1].clone(),
                            wk: p.time.wk.clone(),
                            wv: p.time.wv.clone(),
                            wo: p.time.wo.clone(),
                            rq: p.time.rq.clone(),
                            rk: p.time.rk.clone(),
                            rv: t[3].clone(),
                        },
                        freq: AxialProjections {
                            wq: p.freq.wq.clone(),
                            wk: p.freq.wk.clone(),
                            wv: t[2].clone(),
                            wo: p.freq.wo.clone(),
                            rq: p.freq.rq.clone(),
                            rk: p.freq.rk.clone(),
                            rv: p.freq.rv.clone(),
                        },
                        fuse_weight: t[4].clone(),
                        fuse_bias: p.fuse_bias.clone(),
                    };
                    let y = mhsa_forward(&t[0], &params);
                    y.mul(&y).mean_all()
                },
                &inputs,
                eps,
            )
            .max_rel_err,
        );
    }
    report.record("gradcheck mhsa block", worst, 1e-3);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(110 + seed);
        let (c, heads) = (4usize, 2usize);
        let p = random_mhca::<f64>(&mut r, c, heads);
        let x = rand_t::<f64>(&mut r, &[1, c, 2, 3]).with_grad();
        let y = rand_t::<f64>(&mut r, &[1, c, 2, 3]).with_grad();
        let inputs = vec![x, y, p.wq.clone().with_grad(), p.merge_w.clone().with_grad()];
        worst = worst.max(
            grad_check(
                |t| {
                    let params = MhcaParams {
                        heads,
                        wq: t[2].clone(),
                        bq: p.bq.clone(),
                        wk: p.wk.clone(),
                        bk: p.bk.clone(),
                        wv: p.wv.clone(),
                        bv: p.bv.clone(),
                        merge_w: t[3].clone(),
                        merge_b: p.merge_b.clone(),
                    };
                    let out = mhca_forward(&t[0], &t[1], &params);
                    out.mul(&out).mean_all()
                },
                &inputs,
                eps,
            )
            .max_rel_err,
        );
    }
    report.record("gradcheck mhca block", worst, 1e-3);

    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(120 + seed);
        let est = rand_t::<f64>(&mut r, &[16]).with_grad();
        let reference = rand_t::<f64>(&mut r, &[16]);
        worst = worst.max(
            grad_check(|t| time_loss(&t[0], &reference, LossFlavor::Mse), &[est.clone()], eps)
                .max_rel_err,
        );
        worst = worst.max(
            grad_check(|t| time_loss(&t[0], &reference, LossFlavor::Mae), &[est], eps).max_rel_err,
        );
        let s_est = rand_t::<f64>(&mut r, &[1, 2, 2, 3]).with_grad();
        let s_ref = rand_t::<f64>(&mut r, &[1, 2, 2, 3]);
        worst = worst.max(
            grad_check(|t| freq_loss(&t[0], &s_ref, FreqNorm::L1), &[s_est.clone()], eps).max_rel_err,
        );
        worst = worst.max(
            grad_check(|t| freq_loss(&t[0], &s_ref, FreqNorm::L2), &[s_est], eps).max_rel_err,
        );
    }
    report.record("gradcheck losses (off-kink)", worst, 1e-3);

    adjointness_checks(report);
}

fn adjointness_checks(report: &mut SuiteReport) {
    // conv2d against conv_transpose2d with a shared kernel, in f32.
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(130 + seed);
        let x = rand_t::<f32>(&mut r, &[1, 3, 6, 7]);
        let w = rand_t::<f32>(&mut r, &[4, 3, 3, 5]);
        let fwd = x.conv2d(&w, &Tensor::zeros(&[4]), (1, 2), (1, 2));
        let y = rand_t::<f32>(&mut r, fwd.shape());
        let back = y.conv_transpose2d(&w, &Tensor::zeros(&[3]), (1, 2), (1, 2));
        let lhs = dot(&fwd.to_vec(), &y.to_vec()) as f64;
        let rhs = dot(&x.to_vec(), &back.to_vec()) as f64;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    report.record("adjoint conv2d / conv_transpose2d", worst, 1e-4);

    // conv_transpose1d forward against its backward map.
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(140 + seed);
        let x = rand_t::<f32>(&mut r, &[1, 3, 5]).with_grad();
        let w = rand_t::<f32>(&mut r, &[3, 1, 8]);
        let fwd = x.conv_transpose1d(&w, 4);
        let y = rand_t::<f32>(&mut r, fwd.shape());
        let lhs = dot(&fwd.to_vec(), &y.to_vec()) as f64;
        x.zero_grad();
        fwd.mul(&y).sum_all().backward();
        let rhs = dot(&x.grad().unwrap(), &x.to_vec()) as f64;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    report.record("adjoint conv_transpose1d / backward", worst, 1e-4);

    // Matmul with a fixed left operand: <A B, C> == <B, A^T C>.
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(150 + seed);
        let a = rand_t::<f32>(&mut r, &[4, 6]);
        let b = rand_t::<f32>(&mut r, &[6, 3]);
        let c = rand_t::<f32>(&mut r, &[4, 3]);
        let lhs = dot(&a.matmul(&b).to_vec(), &c.to_vec()) as f64;
        let rhs = dot(&b.to_vec(), &a.transpose2d().matmul(&c).to_vec()) as f64;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    report.record("adjoint matmul (fixed operand)", worst, 1e-4);
}

// ---------------------------------------------------------------------------
// DSP checks
// ---------------------------------------------------------------------------

fn dsp_suite(report: &mut SuiteReport) {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut r = rng(200 + seed);
        let len = r.gen_range(8000..64000);
        let x = dsp::Waveform::new((0..len).map(|_| r.gen_range(-0.5..0.5)).collect());
        let spec = dsp::stft(&x, 512, 256).expect("stft");
        let back = dsp::istft(&spec, 512, 256, len).expect("istft");
        for (a, b) in x.samples.iter().zip(&back.samples) {
            worst = worst.max((a - b).abs());
        }
    }
    report.record("dsp stft/istft round trip (abs)", worst, 1e-5);

    // Per-frame energy identity between the windowed frame and its spectrum.
    let mut worst = 0.0f64;
    {
        let mut r = rng(220);
        let x = dsp::Waveform::new((0..12000).map(|_| r.gen_range(-0.5..0.5)).collect());
        let spec = dsp::stft(&x, 512, 256).expect("stft");
        let w = dsp::hann_window(512);
        let mut padded = vec![0.0f64; (spec.frames - 1) * 256 + 512];
        padded[512..512 + x.len()].copy_from_slice(&x.samples);
        for t in 0..spec.frames {
            let te: f64 = (0..512).map(|i| (padded[t * 256 + i] * w[i]).powi(2)).sum();
            let mut fe = spec.re(t, 0).powi(2) + spec.re(t, 256).powi(2);
            for f in 1..256 {
                fe += 2.0 * (spec.re(t, f).powi(2) + spec.im(t, f).powi(2));
            }
            fe /= 512.0;
            if te > 1e-9 {
                worst = worst.max((te - fe).abs() / te);
            }
        }
    }
    report.record("dsp Parseval per frame (rel)", worst, 1e-4);

    // Window overlap at 50%: the linear sum is exactly one.
    let w = dsp::hann_window(512);
    let mut worst = 0.0f64;
    for m in 0..256 {
        worst = worst.max((w[m] + w[m + 256] - 1.0).abs());
    }
    report.record("dsp Hann overlap-add unity", worst, 1e-10);

    // Requested versus measured SNR.
    let mut worst = 0.0f64;
    {
        let mut r = rng(230);
        let clean = dsp::Waveform::new((0..16000).map(|_| r.gen_range(-0.4..0.4)).collect());
        let noise = dsp::Waveform::new((0..16000).map(|_| r.gen_range(-0.4..0.4)).collect());
        for snr in [-5.0, 0.0, 5.0, 10.0] {
            let (_, scaled) = dsp::mix_at_snr(&clean, &noise, snr).expect("mix");
            worst = worst.max((dsp::measured_snr_db(&clean, &scaled) - snr).abs());
        }
    }
    report.record("dsp mixer fidelity (dB)", worst, 0.01);

    // Metric identities.
    let mut worst = 0.0f64;
    {
        let mut r = rng(240);
        let x = dsp::Waveform::new((0..8000).map(|_| r.gen_range(-0.4..0.4)).collect());
        worst = worst.max((dsp::ssnr_default(&x, &x).expect("ssnr") - dsp::SSNR_CEIL_DB).abs());
        let zero = dsp::Waveform::new(vec![0.0; 8000]);
        worst = worst.max(dsp::ssnr_default(&x, &zero).expect("ssnr").abs());
    }
    report.record("dsp ssnr identities (dB)", worst, 1e-9);
}

// ---------------------------------------------------------------------------
// Attention oracles
// ---------------------------------------------------------------------------

pub(crate) fn random_mhsa<E: Elem>(
    r: &mut ChaCha8Rng,
    c: usize,
    heads: usize,
    span: usize,
    zero_tables: bool,
    qk_scale: QkScale,
) -> MhsaParams<E> {
    let d = c / heads;
    let table = 2 * span - 1;
    let mut proj = |r: &mut ChaCha8Rng| AxialProjections {
        wq: rand_t::<E>(r, &[c, heads * d]),
        wk: rand_t::<E>(r, &[c, heads * d]),
        wv: rand_t::<E>(r, &[c, heads * d]),
        wo: rand_t::<E>(r, &[heads * d, c]),
        rq: if zero_tables {
            Tensor::zeros(&[table, d])
        } else {
            rand_t::<E>(r, &[table, d])
        },
        rk: if zero_tables {
            Tensor::zeros(&[table, d])
        } else {
            rand_t::<E>(r, &[table, d])
        },
        rv: if zero_tables {
            Tensor::zeros(&[table, d])
        } else {
            rand_t::<E>(r, &[table, d])
        },
    };
    let time = proj(r);
    let freq = proj(r);
    MhsaParams {
        heads,
        span,
        value_pos_sign: crate::tensor::el::<E>(-1.0),
        qk_scale,
        time,
        freq,
        fuse_weight: rand_t::<E>(r, &[c, c, 1, 1]),
        fuse_bias: rand_t::<E>(r, &[c]),
    }
}

pub(crate) fn random_mhca<E: Elem>(r: &mut ChaCha8Rng, c: usize, heads: usize) -> MhcaParams<E> {
    MhcaParams {
        heads,
        wq: rand_t::<E>(r, &[c, c, 1, 1]),
        bq: rand_t::<E>(r, &[c]),
        wk: rand_t::<E>(r, &[c, c, 1, 1]),
        bk: rand_t::<E>(r, &[c]),
        wv: rand_t::<E>(r, &[c, c, 1, 1]),
        bv: rand_t::<E>(r, &[c]),
        merge_w: rand_t::<E>(r, &[c, c, 1, 1]),
        merge_b: rand_t::<E>(r, &[c]),
    }
}

/// Straight-loop positional window head in `f64`.
#[allow(clippy::too_many_arguments)]
fn oracle_window(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rq: &[f64],
    rk: &[f64],
    rv: &[f64],
    l: usize,
    d: usize,
    span: usize,
    sign: f64,
    inv_scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; l * d];
    for p in 0..l {
        let lo = p.saturating_sub(span - 1);
        let hi = (p + span).min(l);
        let mut weights = Vec::new();
        let mut denom = 0.0;
        for c in lo..hi {
            let off = c + span - 1 - p;
            let mut s = 0.0;
            for i in 0..d {
                s += q[p * d + i] * k[c * d + i]
                    + q[p * d + i] * rq[off * d + i]
                    + k[c * d + i] * rk[off * d + i];
            }
            let e = (s * inv_scale).exp();
            weights.push(e);
            denom += e;
        }
        for c in lo..hi {
            let off = c + span - 1 - p;
            let a = weights[c - lo] / denom;
            for i in 0..d {
                out[p * d + i] += a * (v[c * d + i] + sign * rv[off * d + i]);
            }
        }
    }
    out
}

/// Straight-loop axial attention over one `[C,T,F]` grid in `f64`:
/// per-sequence head projections, the positional window, head concatenation,
/// and the output projection.
fn oracle_axial(
    x: &[f64],
    c: usize,
    t: usize,
    f: usize,
    p: &MhsaParams<f64>,
    axis: AttnAxis,
) -> Vec<f64> {
    let heads = p.heads;
    let d = p.time.wq.shape()[1] / heads;
    let proj = match axis {
        AttnAxis::Time => &p.time,
        AttnAxis::Frequency => &p.freq,
    };
    let (rows, len) = match axis {
        AttnAxis::Time => (f, t),
        AttnAxis::Frequency => (t, f),
    };
    let at = |ti: usize, fi: usize, ci: usize| x[(ci * t + ti) * f + fi];
    let wq = proj.wq.to_vec();
    let wk = proj.wk.to_vec();
    let wv = proj.wv.to_vec();
    let wo = proj.wo.to_vec();
    let rq = proj.rq.to_vec();
    let rk = proj.rk.to_vec();
    let rv = proj.rv.to_vec();
    let inv_scale = match p.qk_scale {
        QkScale::One => 1.0,
        QkScale::SqrtDk => 1.0 / (d as f64).sqrt(),
        QkScale::SqrtLen => 1.0 / (len as f64).sqrt(),
    };
    let mut out = vec![0.0; c * t * f];
    for row in 0..rows {
        // Gather the sequence [len, c].
        let mut seq = vec![0.0; len * c];
        for pos in 0..len {
            let (ti, fi) = match axis {
                AttnAxis::Time => (pos, row),
                AttnAxis::Frequency => (row, pos),
            };
            for ci in 0..c {
                seq[pos * c + ci] = at(ti, fi, ci);
            }
        }
        let mut concat = vec![0.0; len * heads * d];
        for h in 0..heads {
            let mut q = vec![0.0; len * d];
            let mut k = vec![0.0; len * d];
            let mut v = vec![0.0; len * d];
            for pos in 0..len {
                for j in 0..d {
                    let col = h * d + j;
                    let mut sq = 0.0;
                    let mut sk = 0.0;
                    let mut sv = 0.0;
                    for ci in 0..c {
                        sq += seq[pos * c + ci] * wq[ci * heads * d + col];
                        sk += seq[pos * c + ci] * wk[ci * heads * d + col];
                        sv += seq[pos * c + ci] * wv[ci * heads * d + col];
                    }
                    q[pos * d + j] = sq;
                    k[pos * d + j] = sk;
                    v[pos * d + j] = sv;
                }
            }
            let h_out = oracle_window(&q, &k, &v, &rq, &rk, &rv, len, d, p.span, -1.0, inv_scale);
            for pos in 0..len {
                for j in 0..d {
                    concat[pos * heads * d + h * d + j] = h_out[pos * d + j];
                }
            }
        }
        for pos in 0..len {
            let (ti, fi) = match axis {
                AttnAxis::Time => (pos, row),
                AttnAxis::Frequency => (row, pos),
            };
            for ci in 0..c {
                let mut s = 0.0;
                for j in 0..heads * d {
                    s += concat[pos * heads * d + j] * wo[j * c + ci];
                }
                out[(ci * t + ti) * f + fi] = s;
            }
        }
    }
    out
}

fn attention_suite(report: &mut SuiteReport) {
    // Production axial attention against the scalar oracle, grids up to 6x6.
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        for (t, f) in [(2usize, 3usize), (4, 4), (6, 6), (6, 3)] {
            let c = 4;
            let heads = 2;
            let span = 1 + (seed as usize % 3);
            let params64 = random_mhsa::<f64>(&mut r, c, heads, span, false, QkScale::One);
            let x64 = rand_t::<f64>(&mut r, &[1, c, t, f]);
            for axis in [AttnAxis::Time, AttnAxis::Frequency] {
                let got = axial_attention(&x64, &params64, axis).to_vec();
                let want = oracle_axial(&x64.to_vec(), c, t, f, &params64, axis);
                worst = worst.max(field_err(&got, &want));
            }
        }
    }
    report.record("attention axial vs scalar oracle", worst, 1e-5);

    // The positional head alone.
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(320 + seed);
        let (l, d, span) = (6usize, 4usize, 3usize);
        let q = rand_t::<f64>(&mut r, &[l, d]);
        let k = rand_t::<f64>(&mut r, &[l, d]);
        let v = rand_t::<f64>(&mut r, &[l, d]);
        let rq = rand_t::<f64>(&mut r, &[2 * span - 1, d]);
        let rk = rand_t::<f64>(&mut r, &[2 * span - 1, d]);
        let rv = rand_t::<f64>(&mut r, &[2 * span - 1, d]);
        let got = positional_head(&q, &k, &v, &rq, &rk, &rv, span, -1.0, 1.0).to_vec();
        let want = oracle_window(
            &q.to_vec(),
            &k.to_vec(),
            &v.to_vec(),
            &rq.to_vec(),
            &rk.to_vec(),
            &rv.to_vec(),
            l,
            d,
            span,
            -1.0,
            1.0,
        );
        worst = worst.max(field_err(&got, &want));
    }
    report.record("attention positional head vs oracle", worst, 1e-5);

    // Generic scaled dot attention against brute force.
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(340 + seed);
        let (l, d) = (5usize, 3usize);
        let q = rand_t::<f64>(&mut r, &[l, d]);
        let k = rand_t::<f64>(&mut r, &[l, d]);
        let v = rand_t::<f64>(&mut r, &[l, d]);
        let got = scaled_dot_attention(&q, &k, &v, l).to_vec();
        let zt = vec![0.0; (2 * l - 1) * d];
        let want = oracle_window(
            &q.to_vec(),
            &k.to_vec(),
            &v.to_vec(),
            &zt,
            &zt,
            &zt,
            l,
            d,
            l,
            -1.0,
            1.0 / (l as f64).sqrt(),
        );
        worst = worst.max(field_err(&got, &want));
    }
    report.record("attention scaled dot vs brute force", worst, 1e-5);

    // Skip-gate mask normalization and gate range.
    let mut worst_mask = 0.0f64;
    let mut gate_ok = true;
    for seed in 0..SEEDS {
        let mut r = rng(360 + seed);
        let (c, heads, t, f) = (4usize, 2usize, 3usize, 5usize);
        let p = random_mhca::<f32>(&mut r, c, heads);
        let x = rand_t::<f32>(&mut r, &[1, c, t, f]);
        let y = rand_t::<f32>(&mut r, &[1, c, t, f]);
        let mask = mhca_attention_mask(&x, &y, &p);
        let md = mask.to_vec();
        for b in 0..heads * t {
            for j in 0..f {
                let col: f32 = (0..f).map(|i| md[(b * f + i) * f + j]).sum();
                worst_mask = worst_mask.max((col as f64 - 1.0).abs());
            }
        }
        let z = mhca_gate(&x, &y, &p);
        gate_ok &= z.to_vec().iter().all(|&v| v > 0.0 && v < 1.0);
    }
    report.record("attention mhca mask column sums", worst_mask, 1e-6);
    report.record(
        "attention mhca gate in (0,1)",
        if gate_ok { 0.0 } else { 1.0 },
        0.5,
    );

    // Axial equivariance under permutations of the untouched axis.
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(380 + seed);
        let (c, t, f) = (4usize, 4usize, 5usize);
        let p = random_mhsa::<f32>(&mut r, c, 2, 2, false, QkScale::One);
        let x = rand_t::<f32>(&mut r, &[1, c, t, f]);

        let mut fperm: Vec<usize> = (0..f).collect();
        use rand::seq::SliceRandom;
        fperm.shuffle(&mut r);
        let permute_f = |src: &Tensor| {
            let d = src.to_vec();
            let mut out = vec![0.0f32; d.len()];
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..f {
                        out[(ci * t + ti) * f + fi] = d[(ci * t + ti) * f + fperm[fi]];
                    }
                }
            }
            Tensor::new(out, &[1, c, t, f])
        };
        let a = permute_f(&axial_attention(&x, &p, AttnAxis::Time)).to_vec();
        let b = axial_attention(&permute_f(&x), &p, AttnAxis::Time).to_vec();
        for (u, w) in a.iter().zip(&b) {
            worst = worst.max((u - w).abs() as f64);
        }

        let mut tperm: Vec<usize> = (0..t).collect();
        tperm.shuffle(&mut r);
        let permute_t = |src: &Tensor| {
            let d = src.to_vec();
            let mut out = vec![0.0f32; d.len()];
            for ci in 0..c {
                for ti in 0..t {
                    for fi in 0..f {
                        out[(ci * t + ti) * f + fi] = d[(ci * t + tperm[ti]) * f + fi];
                    }
                }
            }
            Tensor::new(out, &[1, c, t, f])
        };
        let a = permute_t(&axial_attention(&x, &p, AttnAxis::Frequency)).to_vec();
        let b = axial_attention(&permute_t(&x), &p, AttnAxis::Frequency).to_vec();
        for (u, w) in a.iter().zip(&b) {
            worst = worst.max((u - w).abs() as f64);
        }
    }
    report.record("attention axial equivariance", worst, 1e-6);
}
