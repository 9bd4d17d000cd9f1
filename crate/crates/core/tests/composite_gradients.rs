//! Finite-difference gradient checks of the composite objectives.

mod composite_suite;

#[test]
fn contrastive_losses_wrt_inputs() {
    composite_suite::contrastive_losses_wrt_inputs();
}

#[test]
fn pretraining_loss_wrt_parameters() {
    composite_suite::pretraining_loss_wrt_parameters();
}

#[test]
fn finetuning_loss_wrt_parameters() {
    composite_suite::finetuning_loss_wrt_parameters();
}

#[test]
fn fusion_loss_wrt_parameters() {
    composite_suite::fusion_loss_wrt_parameters();
}
