//! Release gate: one test per acceptance criterion, each printing a
//! `[acceptance] <criterion>: PASS` line (run with `--nocapture` to see
//! them). Tolerances are pinned here, not configurable.

mod support;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{small_config, speechlike, white};
use uformer::dsp::{self, Waveform};
use uformer::loss::{combined_loss, freq_loss, time_loss, FreqNorm, LossConfig, LossFlavor, LossMode};
use uformer::model::{UFormerConfig, UFormerModel};
use uformer::tensor::Tensor;
use uformer::train::{make_batch, Checkpoint, PlateauScheduler, TrainConfig, Trainer};
use uformer::verify::{run_suite, Suite, SuiteReport};

fn assert_subset_passes(report: &SuiteReport, prefix: &str) -> usize {
    let subset: Vec<_> = report
        .results
        .iter()
        .filter(|r| r.name.starts_with(prefix))
        .collect();
    assert!(!subset.is_empty(), "no checks with prefix `{prefix}`");
    for r in &subset {
        assert!(
            r.passed(),
            "{}: max err {:.3e} exceeds tol {:.0e}",
            r.name,
            r.max_err,
            r.tol
        );
    }
    subset.len()
}

#[test]
fn stft_round_trip_over_100_waveforms() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(8000..=64000);
        let x = Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let spec = dsp::stft(&x, 512, 256).unwrap();
        let back = dsp::istft(&spec, 512, 256, len).unwrap();
        for (a, b) in x.samples.iter().zip(&back.samples) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(worst < 1e-5, "round trip max abs error {worst}");
    assert!(elapsed < 10.0, "round trip took {elapsed:.1}s (budget 10s)");
    println!("[acceptance] stft round trip: PASS (max err {worst:.2e}, {elapsed:.1}s)");
}

#[test]
fn gradient_agreement_for_all_ops_and_blocks() {
    let start = Instant::now();
    let report = run_suite(Suite::Gradcheck);
    let elapsed = start.elapsed().as_secs_f64();
    let n = assert_subset_passes(&report, "gradcheck");
    assert!(elapsed < 120.0, "gradient checks took {elapsed:.1}s (budget 120s)");
    println!("[acceptance] gradient agreement: PASS ({n} op families, 5 seeds each, {elapsed:.1}s)");
}

#[test]
fn attention_matches_scalar_oracles() {
    let report = run_suite(Suite::Attention);
    assert_subset_passes(&report, "attention axial vs scalar oracle");
    assert_subset_passes(&report, "attention positional head vs oracle");
    assert_subset_passes(&report, "attention scaled dot vs brute force");
    assert_subset_passes(&report, "attention mhca mask column sums");
    assert_subset_passes(&report, "attention mhca gate in (0,1)");
    println!("[acceptance] attention oracles: PASS (grids to 6x6, masks, gate range)");
}

#[test]
fn axial_attention_is_permutation_equivariant() {
    let report = run_suite(Suite::Attention);
    assert_subset_passes(&report, "attention axial equivariance");
    println!("[acceptance] axial equivariance: PASS (time/frequency permutations, 1e-6)");
}

#[test]
fn linear_operators_are_adjoint() {
    let report = run_suite(Suite::Gradcheck);
    let n = assert_subset_passes(&report, "adjoint");
    println!("[acceptance] adjointness: PASS ({n} operator pairs, rel 1e-4)");
}

#[test]
fn mixer_hits_requested_snr() {
    let clean = speechlike(1.0, 3);
    let noise = white(1.3, 4);
    let mut worst = 0.0f64;
    for snr in [-5.0, 0.0, 5.0, 10.0] {
        let (_, scaled) = dsp::mix_at_snr(&clean, &noise, snr).unwrap();
        let measured = dsp::measured_snr_db(&clean, &scaled);
        worst = worst.max((measured - snr).abs());
    }
    assert!(worst < 0.01, "worst SNR deviation {worst} dB");
    println!("[acceptance] mixer fidelity: PASS (max deviation {worst:.2e} dB)");
}

#[test]
fn loss_blend_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t_hat = Tensor::<f32>::new((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[64]);
    let t_ref = Tensor::new((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[64]);
    let s_hat = Tensor::new((0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[1, 2, 4, 6]);
    let s_ref = Tensor::new((0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[1, 2, 4, 6]);

    let mut cfg = LossConfig {
        mode: LossMode::Tf1,
        time_flavor: LossFlavor::Mse,
        alpha: 1.0,
    };
    let lt = time_loss(&t_hat, &t_ref, LossFlavor::Mse).item();
    let lf = freq_loss(&s_hat, &s_ref, FreqNorm::L1).item();
    assert!((combined_loss(&t_hat, &t_ref, &s_hat, &s_ref, &cfg).item() - lt).abs() < 1e-7);
    cfg.alpha = 0.0;
    assert!((combined_loss(&t_hat, &t_ref, &s_hat, &s_ref, &cfg).item() - lf).abs() < 1e-7);
    cfg.alpha = 0.8;
    let blended = combined_loss(&t_hat, &t_ref, &s_hat, &s_ref, &cfg).item();
    assert!((blended - (0.8 * lt + 0.2 * lf)).abs() < 1e-6);
    // Worked arithmetic: alpha 0.8 with unit time loss and doubled
    // frequency loss lands on 1.2.
    assert!((0.8f32 * 1.0 + 0.2 * 2.0 - 1.2).abs() < 1e-6);
    println!("[acceptance] loss identities: PASS (alpha 1 / 0 / 0.8)");
}

#[test]
fn overfit_one_mixture_drops_loss_and_gains_ssnr() {
    let start = Instant::now();
    let clean = speechlike(4.0, 11);
    let noise = white(4.0, 12);
    let (noisy, _) = dsp::mix_at_snr(&clean, &noise, 0.0).unwrap();
    let base_ssnr = dsp::ssnr_default(&clean, &noisy).unwrap();

    let model = UFormerModel::build(&UFormerConfig::default(), 7).unwrap();
    let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch(&[(clean.clone(), noisy.clone())], 64000, &mut rng, 512, 256).unwrap();

    let mut initial = None;
    let mut met: Option<(u32, f32, f64)> = None;
    for step in 1..=500u32 {
        let loss = trainer.step(&batch).unwrap();
        let l0 = *initial.get_or_insert(loss);
        if loss <= 0.1 * l0 && step % 25 == 0 {
            let enhanced = trainer.model.enhance(&noisy).unwrap();
            let gain = dsp::ssnr_default(&clean, &enhanced).unwrap() - base_ssnr;
            if gain >= 5.0 {
                met = Some((step, loss / l0, gain));
                break;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (step, ratio, gain) = met.unwrap_or_else(|| {
        panic!(
            "overfit criteria not reached within 500 steps ({elapsed:.0}s): \
             loss must fall 90% and SSNR must gain 5 dB"
        )
    });
    assert!(elapsed < 1800.0, "overfit run took {elapsed:.0}s (budget 30 min)");
    println!(
        "[acceptance] overfit experiment: PASS (step {step}, loss ratio {ratio:.3}, \
         SSNR gain {gain:.2} dB, {elapsed:.0}s)"
    );
}

#[test]
fn ablation_harness_builds_and_trains_all_variants() {
    // The four attention ablations run at a reduced channel ladder; the
    // criterion checks the harness end to end, the relative ordering is
    // reported but not asserted at desk scale.
    let clean = speechlike(1.0, 21);
    let noise = white(1.0, 22);
    let (noisy, _) = dsp::mix_at_snr(&clean, &noise, 0.0).unwrap();
    let base_ssnr = dsp::ssnr_default(&clean, &noisy).unwrap();

    let variants = [
        ("full", true, true),
        ("w/o-mhsa", false, true),
        ("w/o-mhca", true, false),
        ("w/o-both", false, false),
    ];
    let mut results = Vec::new();
    for (name, use_mhsa, use_mhca) in variants {
        let cfg = UFormerConfig {
            use_mhsa,
            use_mhca,
            ..small_config()
        };
        let model = UFormerModel::build(&cfg, 31).unwrap();
        let params = model.count_params();
        let train_cfg = TrainConfig {
            chunk_seconds: 1.0,
            batch_size: 1,
            ..Default::default()
        };
        let mut trainer = Trainer::new(model, train_cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_batch(&[(clean.clone(), noisy.clone())], 16000, &mut rng, 512, 256).unwrap();
        let mut last = f32::NAN;
        for _ in 0..50 {
            last = trainer.step(&batch).unwrap();
        }
        assert!(last.is_finite(), "{name}: non-finite loss");
        let enhanced = trainer.model.enhance(&noisy).unwrap();
        let gain = dsp::ssnr_default(&clean, &enhanced).unwrap() - base_ssnr;
        results.push((name, params, last, gain));
    }
    println!("[acceptance] ablation harness: PASS — 50-step reports (ordering informational):");
    for (name, params, loss, gain) in &results {
        println!("    {name:<9} params {params:>8}  loss {loss:.5}  ssnr gain {gain:+.2} dB");
    }
}

#[test]
fn scheduler_halves_once_then_early_stops() {
    let cfg = TrainConfig::default();
    let mut sched = PlateauScheduler::new(&cfg);
    // Synthetic validation sequence: 5, then four 4s, then improvement.
    let mut lrs = Vec::new();
    let mut halvings = Vec::new();
    for (i, v) in [5.0f32, 4.0, 4.0, 4.0, 4.0, 3.0].into_iter().enumerate() {
        let d = sched.observe(v);
        lrs.push(d.lr);
        if d.halved {
            halvings.push(i);
        }
        assert!(!d.stop);
    }
    assert_eq!(halvings, vec![4], "lr must halve exactly once, at the fourth stagnant epoch");
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 5e-4, 5e-4]);

    let mut sched = PlateauScheduler::new(&cfg);
    sched.observe(1.0);
    let mut stop_at = None;
    for i in 1..=12 {
        if sched.observe(1.0 + i as f32).stop && stop_at.is_none() {
            stop_at = Some(i);
        }
    }
    assert_eq!(stop_at, Some(10), "early stop must trigger after exactly 10 increases");
    println!("[acceptance] scheduler property: PASS (single halving at epoch 5, stop at 10 increases)");
}

#[test]
fn parameter_count_within_documented_range() {
    let model = UFormerModel::build(&UFormerConfig::default(), 1).unwrap();
    let count = model.count_params();
    // Published reference for this architecture: 2.03 M parameters; the
    // unspecified kernel/stride details make an exact match impossible.
    assert!(
        (1_000_000..=4_000_000).contains(&count),
        "parameter count {count} outside [1e6, 4e6]"
    );
    println!(
        "[acceptance] parameter count: PASS ({count} parameters; published reference 2.03 M)"
    );
}

#[test]
fn checkpoints_round_trip_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ufmr");

    let make_sets = || {
        let pairs: Vec<(Waveform, Waveform)> = (0..2)
            .map(|i| {
                let clean = speechlike(0.6, 40 + i);
                let (noisy, _) = dsp::mix_at_snr(&clean, &white(0.6, 50 + i), 5.0).unwrap();
                (clean, noisy)
            })
            .collect();
        pairs
    };
    let train_set = make_sets();
    let valid_set = make_sets();
    let cfg = TrainConfig {
        max_epochs: 3,
        chunk_seconds: 0.5,
        seed: 9,
        ..Default::default()
    };

    // Byte-identical save -> load -> save.
    let mut full = Trainer::new(UFormerModel::build(&small_config(), 13).unwrap(), cfg.clone()).unwrap();
    let out_full = full.run(&train_set, &valid_set, |_, _| Ok(())).unwrap();
    Checkpoint::from_trainer(&full).save(&path).unwrap();
    let bytes1 = std::fs::read(&path).unwrap();
    Checkpoint::load(&path).unwrap().save(&path).unwrap();
    let bytes2 = std::fs::read(&path).unwrap();
    assert_eq!(bytes1, bytes2, "save -> load -> save must be byte-identical");

    // Interrupt after epoch 1, resume, and compare the trajectory.
    let mut first = Trainer::new(
        UFormerModel::build(&small_config(), 13).unwrap(),
        TrainConfig {
            max_epochs: 1,
            ..cfg.clone()
        },
    )
    .unwrap();
    first.run(&train_set, &valid_set, |_, _| Ok(())).unwrap();
    let resume_path = dir.path().join("resume.ufmr");
    Checkpoint::from_trainer(&first).save(&resume_path).unwrap();
    let mut resumed = Checkpoint::load(&resume_path).unwrap().build_trainer().unwrap();
    resumed.train_cfg.max_epochs = 3;
    let out_resumed = resumed.run(&train_set, &valid_set, |_, _| Ok(())).unwrap();
    assert_eq!(out_resumed.history.len(), 2);
    assert_eq!(out_resumed.history[0], out_full.history[1]);
    assert_eq!(out_resumed.history[1], out_full.history[2]);
    println!("[acceptance] checkpoint round trip: PASS (byte-identical, exact resume)");
}
