//! Scratch calibration harness (env-var driven).

use stegokey::backbone::{BackboneConfig, Nonlinearity};
use stegokey::evaluation::{cross_key_matrix, evaluate, purification_gain, EvalOptions};
use stegokey::keyed_weights::KeyRegistry;
use stegokey::synth::synth_dataset;
use stegokey::training::{BatchScheduler, LossWeights, MismatchPolicy, TrainConfig, Trainer};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let width: usize = env("WIDTH", 16);
    let depth: usize = env("DEPTH", 2);
    let side: usize = env("SIDE", 64);
    let k: usize = env("K", 3);
    let alpha: f64 = env("ALPHA", 0.7);
    let steps: u64 = env("STEPS", 40);
    let batch: usize = env("BATCH", 4);
    let lr: f64 = env("LR", 3e-4);
    let n_train: usize = env("IMAGES", 200);
    let n_test: usize = env("TEST_IMAGES", 40);
    let log_every: u64 = env("LOG_EVERY", 25);

    let backbone = BackboneConfig {
        base_width: width,
        depth,
        side,
        nonlinearity: Nonlinearity::LeakyRelu,
        input_slots: 2,
    };
    let registry = KeyRegistry::derive(0xCA11B, k).unwrap();
    let config = TrainConfig {
        k,
        alpha,
        mask_seed: 101,
        keys: registry.iter().map(|p| (p.embed_key, p.recover_key)).collect(),
        learning_rate: lr,
        batch_size: batch,
        steps,
        noise_sigma: [0.0, 0.1],
        mismatch: MismatchPolicy::SampleOne,
        eval_every: 0,
        checkpoint_every: 0,
        seed: 7,
    };
    let mut trainer = Trainer::new(backbone, config, LossWeights::default()).unwrap();
    let train_data = synth_dataset(1, n_train, side);
    let test_data = synth_dataset(2, n_test, side);
    let sched = BatchScheduler::new(trainer.config());

    let t0 = std::time::Instant::now();
    while trainer.current_step() < steps {
        let s = trainer.current_step();
        let b = sched.batch_for_step(&train_data, s).unwrap();
        let r = trainer.train_step(&b).unwrap();
        if s % log_every == 0 || s + 1 == steps {
            println!(
                "step {:5}  emb {:.5}  rec {:.5}  pur {:.5}  mki {:.5}  total {:.5}  {:.0} ms",
                r.step, r.loss_emb, r.loss_rec, r.loss_pur, r.loss_mki, r.total, r.wall_ms
            );
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("== {} steps in {:.1}s = {:.2} s/step", steps, dt, dt / steps as f64);

    let t1 = std::time::Instant::now();
    let report = evaluate(
        trainer.model(),
        trainer.registry(),
        &test_data,
        &EvalOptions { pair_seed: 3, step: None },
    )
    .unwrap();
    println!(
        "imperc  psnr {:.2} ssim {:.4} mae {:.4}",
        report.imperceptibility.psnr, report.imperceptibility.ssim, report.imperceptibility.mae
    );
    println!(
        "recov   psnr {:.2} ssim {:.4} mae {:.4}",
        report.recoverability.psnr, report.recoverability.ssim, report.recoverability.mae
    );
    println!(
        "cross   psnr {:.2} ssim {:.4} mae {:.4}",
        report.cross_decoding.psnr, report.cross_decoding.ssim, report.cross_decoding.mae
    );
    let m = cross_key_matrix(trainer.model(), trainer.registry(), &test_data, 3).unwrap();
    println!("matrix margin {:.2} dB  dominant {}", m.diagonal_margin_db(), m.diagonal_dominant());
    print!("{}", m.psnr_csv());
    let (noisy, pure) = purification_gain(trainer.model(), &test_data, 0.05, 9).unwrap();
    println!("purify: noisy {noisy:.2} dB -> purified {pure:.2} dB (gain {:.2})", pure - noisy);
    println!("eval took {:.1}s", t1.elapsed().as_secs_f64());
}
