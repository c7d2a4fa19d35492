//! Trainability smoke test: Micro/4 memorizes one batch of eight images in 50 steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reluattn::data::normalize;
use reluattn::train::{adamw_step, batch_loss, AdamState, AdamW};
use reluattn::vit::loss_and_grad;
use reluattn::{Activation, Tensor, ViTConfig, ViTParams};

fn overfit(cfg: &ViTConfig) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(
        [8, 28, 28, 1],
        (0..8 * 28 * 28).map(|_| normalize(rng.random::<f32>())).collect(),
    )
    .unwrap();
    let y: Vec<usize> = (0..8).collect();
    let mut params = ViTParams::<f32>::init(cfg, 0).unwrap();
    let mut state = AdamState::new(&params);
    let hyper = AdamW {
        lr: 3e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut losses = Vec::new();
    for step in 1..=50 {
        let (loss, grads) = loss_and_grad(&params, &x, &y, cfg).unwrap();
        losses.push(loss);
        adamw_step(&mut params, &grads, &mut state, &hyper, step).unwrap();
    }
    (batch_loss(&params, &x, &y, cfg).unwrap(), losses)
}

fn check(cfg: ViTConfig) {
    let (last, losses) = overfit(&cfg);
    assert!(last < 0.05, "{}: loss after 50 steps {last}", cfg.attention.label());
    assert!(losses[0] > 1.5, "initial loss {} should be near ln 10", losses[0]);
    let first_half = losses[..25].iter().sum::<f64>() / 25.0;
    let second_half = losses[25..].iter().sum::<f64>() / 25.0;
    assert!(second_half < first_half);
}

#[test]
fn softmax_overfits_eight_images() {
    check(ViTConfig::micro4_mnist());
}

#[test]
fn relu_attention_overfits_eight_images() {
    check(ViTConfig::micro4_mnist().with_phi(Activation::Relu, 1.0));
}
