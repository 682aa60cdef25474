mod support;

use osa_detect::tensor::Mode;
use osa_detect::ModalityMask;
use support::cases::composed_net_error;

fn check(mode: Mode, mask: ModalityMask) {
    for seed in 1..=5 {
        let e = composed_net_error(seed, mode, mask);
        assert!(e <= 1e-3, "seed {seed}: {e:.3e}");
    }
}

#[test]
fn composed_forward_train_mode() {
    check(Mode::Train, ModalityMask::all());
}

#[test]
fn composed_forward_eval_mode_all() {
    check(Mode::Eval, ModalityMask::all());
}

#[test]
fn composed_forward_eval_mode_masked() {
    check(Mode::Eval, ModalityMask::airflow_spo2());
}
