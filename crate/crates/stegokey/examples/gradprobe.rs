//! Scratch finite-difference probe of the training gradient.

use stegokey::backbone::{BackboneConfig, ModelState, Nonlinearity};
use stegokey::keyed_weights::{WeightOrigin, WeightSet};
use stegokey::synth::synth_dataset;
use stegokey::training::{
    loss_total, BatchScheduler, KeyBatch, LossWeights, MismatchPolicy, StepBatch, TrainConfig,
    Trainer,
};

fn main() {
    let side = 8;
    let backbone = BackboneConfig {
        base_width: 4,
        depth: 0,
        side,
        nonlinearity: Nonlinearity::Silu,
        input_slots: 2,
    };
    let config = TrainConfig {
        k: 2,
        alpha: 0.7,
        mask_seed: 5,
        keys: vec![(11, 12), (13, 14)],
        learning_rate: 1e-3,
        batch_size: 1,
        steps: 1,
        noise_sigma: [0.02, 0.02],
        mismatch: MismatchPolicy::Exhaustive,
        eval_every: 0,
        checkpoint_every: 0,
        seed: 3,
    };
    let weights = LossWeights::default();
    let trainer = Trainer::new(backbone.clone(), config.clone(), weights).unwrap();
    let data = synth_dataset(9, 8, side);
    let sched = BatchScheduler::new(trainer.config());
    let batch = sched.batch_for_step(&data, 0).unwrap();
    let _ = &batch as &StepBatch;
    let _ = KeyBatch { secrets: vec![], covers: vec![] };

    let (terms, grads) = trainer.loss_and_gradients(&batch, 0).unwrap();
    println!("terms: emb {} rec {} pur {} mki {}", terms.emb, terms.rec, terms.pur, terms.mki);

    let model = trainer.model();
    let manifest = model.backbone().manifest().clone();
    let shared0 = model.shared().tensors().to_vec();
    let biases0 = model.biases().tensors().to_vec();

    let eval_loss = |shared: &Vec<Vec<f64>>, biases: &Vec<Vec<f64>>| -> f64 {
        let bb = stegokey::backbone::Backbone::new(backbone.clone()).unwrap();
        let ws = WeightSet::from_tensors(&manifest, shared.clone(), WeightOrigin::Trained).unwrap();
        let bs = stegokey::backbone::BiasSet::from_tensors(&bb, biases.clone()).unwrap();
        let mask = stegokey::keyed_weights::sample_mask(&manifest, 0.7, 5).unwrap();
        let ms = ModelState::new(bb, ws, bs, mask).unwrap();
        let t = Trainer::from_parts(ms, config.clone(), weights, None, 0).unwrap();
        let terms = t.losses(&batch, 0).unwrap();
        loss_total(&terms, &weights)
    };

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mask = model.mask().clone();
    for t in 0..shared0.len() {
        let bits = mask.tensor_bits(t);
        let stride = (shared0[t].len() / 25).max(1);
        for p in (0..shared0[t].len()).step_by(stride) {
            if bits[p] == 0 {
                continue;
            }
            let mut sp = shared0.clone();
            sp[t][p] += h;
            let lp = eval_loss(&sp, &biases0);
            sp[t][p] -= 2.0 * h;
            let lm = eval_loss(&sp, &biases0);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.kernels[t][p];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            if rel > worst {
                worst = rel;
                println!("t{t} p{p}: fd {fd:.6e} an {an:.6e} rel {rel:.3e}");
            }
            checked += 1;
        }
    }
    for b in 0..biases0.len() {
        for p in 0..biases0[b].len().min(2) {
            let mut bp = biases0.clone();
            bp[b][p] += h;
            let lp = eval_loss(&shared0, &bp);
            bp[b][p] -= 2.0 * h;
            let lm = eval_loss(&shared0, &bp);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.biases[b][p];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            if rel > worst {
                worst = rel;
                println!("bias {b} p{p}: fd {fd:.6e} an {an:.6e} rel {rel:.3e}");
            }
            checked += 1;
        }
    }
    println!("checked {checked} params, worst rel err {worst:.3e}");
}
