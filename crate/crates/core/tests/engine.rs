use std::sync::atomic::AtomicBool;

use famcount::adapt::{adapt_and_count, adapt_prepared, adapt_stack_cancellable, predict_no_adapt};
use famcount::annotation::AnnotatedImage;
use famcount::correlation::MatcherConfig;
use famcount::features::BackboneSpec;
use famcount::head::{init_params, DensityHeadParams};
use famcount::losses::{mse_loss_grad, AdaptationConfig};
use famcount::pipeline::CountingPipeline;
use famcount::synth::{make_synthetic_suite, SuiteSize};
use famcount::train::{prepare_examples, train_examples, TrainConfig};

const HEIGHT: u32 = 96;

fn pipeline() -> CountingPipeline {
    CountingPipeline::new(BackboneSpec::Lite { seed: 0 }, MatcherConfig::default(), HEIGHT).unwrap()
}

fn images(n: usize) -> Vec<AnnotatedImage> {
    make_synthetic_suite(21, SuiteSize::train_only(n)).unwrap().images
}

/// Head whose output is small but alive on the synthetic scenes: with
/// non-negative last-layer weights the density is positive wherever any
/// penultimate activation is.
fn live_head() -> DensityHeadParams {
    let mut p = init_params(5, 6);
    for v in p.tensors_mut()[8].iter_mut() {
        *v = 0.01 * v.abs();
    }
    p
}

fn fast_cfg(steps: usize) -> AdaptationConfig {
    AdaptationConfig {
        learning_rate: 1e-4,
        ..AdaptationConfig::default().with_steps(steps)
    }
}

#[test]
fn zero_steps_equals_no_adaptation() {
    let p = pipeline();
    let head = live_head();
    for img in images(2) {
        let (count, density) = predict_no_adapt(&p, &img, &head).unwrap();
        let adapted = adapt_and_count(&p, &img, &head, &AdaptationConfig::default().with_steps(0)).unwrap();
        assert_eq!(adapted.count.to_bits(), count.to_bits());
        assert_eq!(adapted.density, density);
        assert_eq!(adapted.trace.losses.len(), 1);
    }
}

#[test]
fn adaptation_leaves_inputs_untouched_and_is_deterministic() {
    let p = pipeline();
    let head = live_head();
    let head_sum = head.checksum();
    let backbone_sum = p.backbone().checksum();
    let img = &images(1)[0];
    let a = adapt_and_count(&p, img, &head, &fast_cfg(5)).unwrap();
    let b = adapt_and_count(&p, img, &head, &fast_cfg(5)).unwrap();
    assert_eq!(head.checksum(), head_sum);
    assert_eq!(p.backbone().checksum(), backbone_sum);
    assert_eq!(a.count.to_bits(), b.count.to_bits());
    assert_eq!(a.trace.losses, b.trace.losses);
    assert_eq!(a.trace.losses.len(), 6);
    assert_eq!(a.trace.counts.len(), 6);
    assert!(a.trace.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn adaptation_reduces_its_objective() {
    let p = pipeline();
    let prepared = p.prepare(&images(1)[0]).unwrap();
    let pred = adapt_prepared(&prepared, &live_head(), &fast_cfg(10)).unwrap();
    assert!(!pred.trace.diverged);
    assert!(pred.trace.final_loss() < pred.trace.initial_loss(), "{:?}", pred.trace.losses);
}

#[test]
fn a_set_cancel_flag_stops_adaptation() {
    let p = pipeline();
    let prepared = p.prepare(&images(1)[0]).unwrap();
    let head = live_head();
    let cancelled = adapt_stack_cancellable(&prepared.stack, &prepared.boxes, &head, &fast_cfg(50), &AtomicBool::new(true));
    assert!(matches!(cancelled, Err(famcount::Error::Cancelled)));
    let live = adapt_stack_cancellable(&prepared.stack, &prepared.boxes, &head, &fast_cfg(2), &AtomicBool::new(false)).unwrap();
    assert_eq!(live.trace.losses.len(), 3);
}

#[test]
fn image_order_does_not_leak_state() {
    let p = pipeline();
    let head = live_head();
    let imgs = images(3);
    let forward: Vec<f64> = imgs.iter().map(|i| adapt_and_count(&p, i, &head, &fast_cfg(3)).unwrap().count).collect();
    let mut backward: Vec<f64> = imgs.iter().rev().map(|i| adapt_and_count(&p, i, &head, &fast_cfg(3)).unwrap().count).collect();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn exemplar_order_does_not_change_the_count() {
    let p = pipeline();
    let head = live_head();
    let img = images(1).remove(0);
    let mut swapped = img.clone();
    swapped.exemplars.reverse();
    let (a, _) = predict_no_adapt(&p, &img, &head).unwrap();
    let (b, _) = predict_no_adapt(&p, &swapped, &head).unwrap();
    // The exemplar mean is taken in f32, so summation order shows at ~1e-8.
    assert!(a > 0.0);
    assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn zero_head_counts_nothing() {
    let p = pipeline();
    let (count, _) = predict_no_adapt(&p, &images(1)[0], &DensityHeadParams::zeros(6)).unwrap();
    assert_eq!(count, 0.0);
}

#[test]
fn training_loss_gradient_reaches_every_tensor() {
    let p = pipeline();
    let (examples, _) = prepare_examples(&p, &images(1));
    let head = live_head();
    let fwd = head.forward(&examples[0].prepared.stack).unwrap();
    let (_, grad) = mse_loss_grad(&fwd.density, &examples[0].target).unwrap();
    let grads = head.backward(&fwd, &grad);
    for (i, t) in grads.tensors().iter().enumerate() {
        assert!(t.iter().any(|v| *v != 0.0), "tensor {i} has an all-zero gradient");
    }
}

#[test]
fn training_is_deterministic_and_touches_only_the_head() {
    let p = pipeline();
    let (examples, warnings) = prepare_examples(&p, &images(3));
    assert!(warnings.is_empty());
    let backbone_sum = p.backbone().checksum();
    let cfg = TrainConfig {
        resize_height: HEIGHT,
        epochs: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train_examples(&p.fingerprint(), &examples, &[], &cfg, None).unwrap();
    let b = train_examples(&p.fingerprint(), &examples, &[], &cfg, None).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_ne!(a.params.checksum(), init_params(3, 6).checksum());
    assert_eq!(a.iterations, 3);
    assert_eq!(p.backbone().checksum(), backbone_sum);
}

#[test]
fn empty_training_set_is_a_configuration_error() {
    let p = pipeline();
    let cfg = TrainConfig {
        resize_height: HEIGHT,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train_examples(&p.fingerprint(), &[], &[], &cfg, None),
        Err(famcount::Error::Config(_))
    ));
}

#[test]
fn loss_on_a_repeated_image_goes_down() {
    let p = pipeline();
    let (examples, _) = prepare_examples(&p, &images(1));
    let mut drops = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig {
            resize_height: HEIGHT,
            epochs: 50,
            seed,
            patience: None,
            ..TrainConfig::default()
        };
        let out = train_examples(&p.fingerprint(), &examples, &[], &cfg, Some(live_head())).unwrap();
        let first = out.log.first().unwrap().mean_loss;
        let last = out.log.last().unwrap().mean_loss;
        drops.push(first - last);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "{drops:?}");
}

#[test]
fn checkpoints_written_during_training_reload_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline();
    let (examples, _) = prepare_examples(&p, &images(2));
    let cfg = TrainConfig {
        resize_height: HEIGHT,
        epochs: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainConfig::default()
    };
    let out = train_examples(&p.fingerprint(), &examples, &examples[..1], &cfg, None).unwrap();
    let last = famcount::checkpoint::Checkpoint::load(dir.path().join("last.safetensors")).unwrap();
    assert_eq!(last.params.checksum(), out.params.checksum());
    assert_eq!(last.fingerprint, p.fingerprint());
    assert!(dir.path().join("best.safetensors").is_file());
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.contains("\"val_mae\"")));
}
