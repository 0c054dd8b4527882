//! 64-bit finite-difference validation of every hand-written gradient
//! path: splat rasterizer pullback, denoiser training loss, alignment
//! residual, and adapter fit.

use std::cell::RefCell;
use std::sync::Arc;

use lodslab_core::denoiser::{
    attach_adapter, make_network, Cond, CondSpec, Denoiser, DenoiserKind, LearnableEmbedding,
    NetConfig, Trainable,
};
use lodslab_core::generators::{Generator, SplatConfig};
use lodslab_core::oracle::finite_diff_check;
use lodslab_core::priors::{alignment_loss, vsd_adapter_fit, AlignState};
use lodslab_core::rng::{lane, stream};
use lodslab_core::schedule::NoiseSchedule;
use lodslab_core::{Tape, Tensor};

fn sched() -> Arc<NoiseSchedule> {
    Arc::new(NoiseSchedule::default_linear())
}

fn small_net(seed: u64) -> Denoiser<f64> {
    let mut cfg = NetConfig::new(2, 2);
    cfg.hidden = 8;
    cfg.embed_dim = 4;
    cfg.time_feats = 4;
    make_network::<f64>(cfg, sched(), seed)
}

fn get_param(d: &Denoiser<f64>, i: usize) -> Tensor<f64> {
    let DenoiserKind::Network(net) = d.kind() else {
        unreachable!()
    };
    [
        &net.w1,
        &net.b1,
        &net.w2,
        &net.b2,
        &net.w3,
        &net.b3,
        &net.wout,
        &net.bout,
        &net.cond_table,
    ][i]
    .clone()
}

fn set_param(d: &mut Denoiser<f64>, i: usize, value: Tensor<f64>) {
    let DenoiserKind::Network(net) = d.kind_mut() else {
        unreachable!()
    };
    *[
        &mut net.w1,
        &mut net.b1,
        &mut net.w2,
        &mut net.b2,
        &mut net.w3,
        &mut net.b3,
        &mut net.wout,
        &mut net.bout,
        &mut net.cond_table,
    ][i] = value;
}

#[test]
fn splat_pullback_matches_finite_differences() {
    let cfg = SplatConfig {
        k: 3,
        width: 16,
        height: 16,
        channels: 1,
        background: 0.1,
    };
    let gen = Generator::Splats(cfg);
    let pixels = cfg.width * cfg.height;
    for seed in [1_u64, 2, 3] {
        let theta = gen.init_theta::<f64>(seed);
        let mut rng = stream(seed, &[lane::NOISE]);
        let up = Tensor::<f64>::randn(&[pixels], &mut rng);
        let analytic = gen.pullback(&theta, &up).unwrap();
        let probe = |th: &Tensor<f64>| {
            let img = gen.render(th)?.reshape(&[pixels])?;
            Ok(img
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum::<f64>())
        };
        let err = finite_diff_check(probe, &analytic, &theta, 1e-5).unwrap();
        assert!(err < 1e-3, "seed {seed}: worst relative error {err}");
    }
}

#[test]
fn denoiser_training_loss_matches_finite_differences() {
    let d = small_net(3);
    let sched = Arc::clone(d.schedule());
    let t = 333;
    let mut rng = stream(9, &[lane::DATA]);
    let xs = Tensor::<f64>::randn(&[4, 2], &mut rng);
    let eps = Tensor::<f64>::randn(&[4, 2], &mut rng);
    let z = sched.add_noise(&xs, t, &eps).unwrap();
    let conds = [Cond::Class(0), Cond::Class(1), Cond::Null, Cond::Class(0)];

    let loss_of = |d: &Denoiser<f64>| -> lodslab_core::Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let ev = tape.constant(eps.clone());
        let out = d.forward(&mut tape, zv, t, CondSpec::Rows(&conds), None, Trainable::Frozen)?;
        let loss = tape.mse(out.pred, ev)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients for all nine parameter tensors in one pass.
    let (names, grads) = {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let ev = tape.constant(eps.clone());
        let out = d
            .forward(
                &mut tape,
                zv,
                t,
                CondSpec::Rows(&conds),
                None,
                Trainable::Weights,
            )
            .unwrap();
        let loss = tape.mse(out.pred, ev).unwrap();
        tape.backward(loss).unwrap();
        let names: Vec<String> = out.trainables.iter().map(|(n, _)| n.clone()).collect();
        let grads: Vec<Tensor<f64>> = out
            .trainables
            .iter()
            .map(|(_, v)| tape.grad_or_zero(*v))
            .collect();
        (names, grads)
    };
    assert_eq!(names.len(), 9);

    let cell = RefCell::new(d);
    for i in 0..names.len() {
        let base = get_param(&cell.borrow(), i);
        let probe = |p: &Tensor<f64>| {
            let mut dm = cell.borrow_mut();
            set_param(&mut dm, i, p.clone());
            loss_of(&dm)
        };
        let err = finite_diff_check(probe, &grads[i], &base, 3e-6).unwrap();
        assert!(err < 1e-4, "{}: worst relative error {err}", names[i]);
        set_param(&mut cell.borrow_mut(), i, base);
    }
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let d = small_net(5);
    let mut rng = stream(17, &[lane::DATA]);
    let x = Tensor::<f64>::randn(&[3, 2], &mut rng);
    let eps = Tensor::<f64>::randn(&[3, 2], &mut rng);
    let t = 512;

    let base = LearnableEmbedding::init(&d);
    let (_, grads) = alignment_loss(&d, &x, AlignState::Embedding(&base), t, &eps).unwrap();
    assert_eq!(grads.len(), 1);
    let probe = |alpha: &Tensor<f64>| {
        let emb = LearnableEmbedding {
            alpha: alpha.clone(),
        };
        Ok(alignment_loss(&d, &x, AlignState::Embedding(&emb), t, &eps)?.0)
    };
    let err = finite_diff_check(probe, &grads[0], &base.alpha, 1e-6).unwrap();
    assert!(err < 1e-4, "embedding alignment: worst relative error {err}");
}

#[test]
fn adapter_fit_gradients_match_finite_differences() {
    let d = small_net(7);
    let mut adapter = attach_adapter(&d, 2, 0.5, 41).unwrap();
    // Zero-init `up` blocks the chain rule through `down`; nudge both sides
    // off zero so every adapter entry sees curvature.
    for (li, layer) in adapter.layers.iter_mut().enumerate() {
        let mut rng = stream(43, &[lane::ADAPTER, li as u64]);
        let dshape = layer.down.shape().to_vec();
        let ushape = layer.up.shape().to_vec();
        layer.down = Tensor::<f64>::randn(&dshape, &mut rng).scale(0.3);
        layer.up = Tensor::<f64>::randn(&ushape, &mut rng).scale(0.3);
    }
    let mut rng = stream(19, &[lane::DATA]);
    let x = Tensor::<f64>::randn(&[2, 2], &mut rng);
    let eps = Tensor::<f64>::randn(&[2, 2], &mut rng);
    let t = 250;

    let (_, grads) = vsd_adapter_fit(&d, &adapter, &x, Cond::Class(1), t, &eps).unwrap();
    let n_layers = adapter.layers.len();
    assert_eq!(grads.len(), 2 * n_layers);

    let cell = RefCell::new(adapter);
    for li in 0..n_layers {
        for (slot, gi) in [(0, 2 * li), (1, 2 * li + 1)] {
            let base = {
                let a = cell.borrow();
                let l = &a.layers[li];
                if slot == 0 {
                    l.down.clone()
                } else {
                    l.up.clone()
                }
            };
            let probe = |p: &Tensor<f64>| {
                let mut a = cell.borrow_mut();
                if slot == 0 {
                    a.layers[li].down = p.clone();
                } else {
                    a.layers[li].up = p.clone();
                }
                Ok(vsd_adapter_fit(&d, &*a, &x, Cond::Class(1), t, &eps)?.0)
            };
            let err = finite_diff_check(probe, &grads[gi], &base, 1e-6).unwrap();
            assert!(
                err < 1e-4,
                "layer {li} slot {slot}: worst relative error {err}"
            );
            let mut a = cell.borrow_mut();
            if slot == 0 {
                a.layers[li].down = base;
            } else {
                a.layers[li].up = base;
            }
        }
    }
}
