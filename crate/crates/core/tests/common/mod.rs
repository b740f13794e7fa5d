#![allow(dead_code)]

use ctrtab::control::{ControlParams, ZeroConvKind};
use ctrtab::denoiser::DenoiserParams;
use ctrtab::rng::{sample_normal, Rng, Stream};
use ctrtab::train::{control_loss_and_grads, TrainBatch};
use ctrtab::Tensor;

pub struct Instance {
    pub den: DenoiserParams,
    pub ctrl: ControlParams,
    pub batch: TrainBatch,
    pub c_f: Tensor,
}

/// Random denoiser and control with every tensor (zero convs included)
/// filled with N(0, 0.5²) so all paths carry gradient.
pub fn random_instance(seed: u64, d: usize, h: usize, n: usize, kind: ZeroConvKind) -> Instance {
    let mut rng = Rng::new(seed, Stream::Init);
    let mut den = DenoiserParams::init(&mut rng, d, h).unwrap();
    let mut ctrl = ControlParams::attach(&den, kind, 0.1).unwrap();
    for t in den.tensors_mut().into_iter().chain(ctrl.tensors_mut()) {
        let r = sample_normal(&mut rng, t.shape()).scale(0.5);
        *t = r;
    }
    let x0 = sample_normal(&mut rng, &[n, d]);
    let eps = sample_normal(&mut rng, &[n, d]);
    let x_t = sample_normal(&mut rng, &[n, d]);
    let ts = (0..n).map(|_| 1.0 + rng.below(50) as f64).collect();
    let c_f = sample_normal(&mut rng, &[n, d]);
    Instance {
        den,
        ctrl,
        batch: TrainBatch { x0, x_t, eps, ts },
        c_f,
    }
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

/// Max relative error of the joint fused-loss gradient (control tensors
/// then denoiser tensors) against central differences with step `h`.
pub fn fused_fd_max_rel(inst: &Instance, last: bool, h: f64) -> f64 {
    let (_, grads) = control_loss_and_grads(&inst.den, &inst.ctrl, &inst.batch, &inst.c_f, last, true, None).unwrap();
    let loss = |den: &DenoiserParams, ctrl: &ControlParams| {
        control_loss_and_grads(den, ctrl, &inst.batch, &inst.c_f, last, true, None).unwrap().0
    };
    let n_ctrl = inst.ctrl.clone().tensors_mut().len();
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let mut dp = inst.den.clone();
            let mut cp = inst.ctrl.clone();
            let mut dm = inst.den.clone();
            let mut cm = inst.ctrl.clone();
            if ti < n_ctrl {
                cp.tensors_mut()[ti].data_mut()[k] += h;
                cm.tensors_mut()[ti].data_mut()[k] -= h;
            } else {
                dp.tensors_mut()[ti - n_ctrl].data_mut()[k] += h;
                dm.tensors_mut()[ti - n_ctrl].data_mut()[k] -= h;
            }
            let fd = (loss(&dp, &cp) - loss(&dm, &cm)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[k], fd));
        }
    }
    worst
}
