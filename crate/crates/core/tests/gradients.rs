mod common;

use common::{check_adversarial, check_main, check_pretext};
use ssda_core::data::Task;
use ssda_core::model::FeatureTap;
use ssda_core::nn::Mode;

const TOL: f64 = 1e-4;

#[test]
fn pretext_gradients_eval_mode() {
    for (task, tap, k) in [
        (Task::Classification, FeatureTap::Middle, 4),
        (Task::Classification, FeatureTap::Final, 16),
        (Task::Segmentation, FeatureTap::Middle, 16),
        (Task::Segmentation, FeatureTap::Final, 4),
    ] {
        let r = check_pretext(task, tap, k, Mode::Eval, 1);
        assert!(r.coordinates_checked() > 0);
        assert!(r.passes(TOL), "{task:?} {tap:?} K={k}\n{r}");
    }
}

#[test]
fn pretext_gradients_batch_stats() {
    let r = check_pretext(Task::Classification, FeatureTap::Middle, 4, Mode::BatchStats, 2);
    assert!(r.passes(TOL), "{r}");
}

#[test]
fn main_gradients() {
    for task in [Task::Classification, Task::Segmentation] {
        for mode in [Mode::Eval, Mode::BatchStats] {
            let r = check_main(task, mode, 3);
            assert!(r.passes(TOL), "{task:?} {mode:?}\n{r}");
        }
    }
}

#[test]
fn adversarial_gradients() {
    for task in [Task::Classification, Task::Segmentation] {
        let r = check_adversarial(task, Mode::Eval, 4);
        assert!(r.passes(TOL), "{task:?}\n{r}");
        // every tensor of E, S and D is covered
        assert!(r.tensors.iter().any(|t| t.name.starts_with("discriminator.")));
        assert!(r.tensors.iter().any(|t| t.name.starts_with("main_head.")));
        assert!(r.tensors.iter().all(|t| t.sampled == t.len.min(20) && t.checked + t.on_kink == t.sampled));
    }
}

#[test]
fn adversarial_gradients_batch_stats() {
    let r = check_adversarial(Task::Segmentation, Mode::BatchStats, 5);
    assert!(r.passes(TOL), "{r}");
}

#[test]
fn gradients_hold_across_seeds() {
    for seed in 10..16 {
        for task in [Task::Classification, Task::Segmentation] {
            for (what, r) in [
                ("pretext", check_pretext(task, FeatureTap::Middle, 4, Mode::Eval, seed)),
                ("main", check_main(task, Mode::Eval, seed)),
                ("adversarial", check_adversarial(task, Mode::Eval, seed)),
            ] {
                assert!(r.passes(TOL), "{what} {task:?} seed {seed}\n{r}");
                assert!(r.coordinates_on_kinks() * 20 <= r.coordinates_checked(), "{r}");
            }
        }
    }
}

#[test]
fn checker_catches_a_wrong_gradient() {
    use ssda_core::losses::classification_loss;
    use ssda_core::model::{gradient_check, GradCheckOptions, NetSet};

    let arch = common::small_arch(Task::Classification, 4, FeatureTap::Middle);
    let mut nets = common::nets_with_stats(&arch, 7);
    let x = common::random_tensor(3, 4, 12, 12, 7);
    let labels = [0, 1, 2, 1];
    let r = gradient_check(
        &mut nets,
        NetSet::MAIN_MODEL,
        |n, backward| {
            let logits = n.forward_main(&x, Mode::Eval, backward)?;
            let (l, mut g) = classification_loss(&logits, &labels)?;
            if backward {
                g.scale(1.001);
                n.backward_main(&g, NetSet::MAIN_MODEL)?;
            }
            Ok(l)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!r.passes(TOL), "{r}");
    assert!(r.max_rel_error() > 5e-4 && r.max_rel_error() < 2e-3, "{r}");
}
