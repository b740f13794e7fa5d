mod common;

use common::{fused_fd_max_rel, random_instance, rel_err};
use ctrtab::control::ZeroConvKind;
use ctrtab::denoiser::DenoiserParams;
use ctrtab::train::{control_loss_and_grads, denoiser_loss_and_grads, TrainBatch};

fn denoiser_fd(den: &DenoiserParams, batch: &TrainBatch, tensors: std::ops::Range<usize>, h: f64) -> f64 {
    let (_, grads) = denoiser_loss_and_grads(den, batch, None).unwrap();
    let mut worst: f64 = 0.0;
    for ti in tensors {
        for k in 0..grads[ti].len() {
            let mut p = den.clone();
            let mut m = den.clone();
            p.tensors_mut()[ti].data_mut()[k] += h;
            m.tensors_mut()[ti].data_mut()[k] -= h;
            let fd = (denoiser_loss_and_grads(&p, batch, None).unwrap().0
                - denoiser_loss_and_grads(&m, batch, None).unwrap().0)
                / (2.0 * h);
            worst = worst.max(rel_err(grads[ti].data()[k], fd));
        }
    }
    worst
}

#[test]
fn time_mlp_gradients_match_finite_differences() {
    for seed in 0..5 {
        let inst = random_instance(seed, 5, 8, 6, ZeroConvKind::Dense);
        // time1 and time2 weights and biases come first
        let err = denoiser_fd(&inst.den, &inst.batch, 0..4, 1e-5);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    for seed in 0..5 {
        let inst = random_instance(100 + seed, 5, 8, 6, ZeroConvKind::Dense);
        let n = inst.den.tensors().len();
        let err = denoiser_fd(&inst.den, &inst.batch, 0..n, 1e-5);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn fused_gradients_match_finite_differences() {
    for (seed, kind) in [(0, ZeroConvKind::Dense), (1, ZeroConvKind::Elementwise)] {
        let inst = random_instance(200 + seed, 5, 8, 6, kind);
        for last in [true, false] {
            let err = fused_fd_max_rel(&inst, last, 1e-5);
            assert!(err < 1e-4, "{kind:?} last={last}: {err:e}");
        }
    }
}

#[test]
fn frozen_stage_returns_control_gradients_only() {
    let inst = random_instance(7, 4, 6, 5, ZeroConvKind::Dense);
    let (l0, frozen) =
        control_loss_and_grads(&inst.den, &inst.ctrl, &inst.batch, &inst.c_f, true, false, None).unwrap();
    let (l1, joint) = control_loss_and_grads(&inst.den, &inst.ctrl, &inst.batch, &inst.c_f, true, true, None).unwrap();
    assert_eq!(l0, l1);
    assert_eq!(frozen.len(), inst.ctrl.clone().tensors_mut().len());
    assert_eq!(&joint[..frozen.len()], &frozen[..]);
}
