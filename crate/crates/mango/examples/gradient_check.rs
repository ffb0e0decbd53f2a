//! Gradient audit: reverse-mode gradients of the joint likelihood + task
//! loss, checked coordinate-by-coordinate against central finite
//! differences.
//!
//! Run with `cargo run --release --example gradient_check`.

use mango::data::{generate, joint_loss, joint_loss_tape, DatasetName, DatasetSpec, TaskHead, TaskKind};
use mango::flow::{FlowModel, ModelSpec, ModelVariant};
use mango::rng;
use mango::tape::Tape;

fn main() -> mango::Result<()> {
    let spec = DatasetSpec::new(DatasetName::TwoMoonsPair, 3, 1);
    let data = generate(&spec)?;
    let (batch, label) = &data[0];
    let mut model = FlowModel::build(
        ModelSpec {
            variant: ModelVariant::Mango,
            layout: batch.layout,
            d_model: spec.d_model,
            blocks: 1,
        },
        3,
    )?;
    let mut r = rng::stream(3, "head");
    let head = TaskHead::new(TaskKind::Classification, spec.d_model, 2, &mut r);

    // one reverse sweep gives every parameter gradient at once
    let mut t = Tape::new();
    let loss = joint_loss_tape(&mut t, &model, Some(&head), batch, label, 1.0)?;
    t.backward(loss)?;
    println!("joint loss at init: {:.6}", t.value(loss).item());
    println!("{:<26} {:>14} {:>14} {:>10}", "parameter", "analytic", "finite-diff", "rel err");

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let Some(analytic) = t.grad_of(model.params()[pi]).cloned() else {
            continue;
        };
        // middle coordinate of each tensor
        let coord = analytic.len() / 2;
        let orig = model.params()[pi].value.data()[coord];
        model.params_mut()[pi].value.data_mut()[coord] = orig + step;
        let up = joint_loss(&model, Some(&head), batch, label, 1.0)?;
        model.params_mut()[pi].value.data_mut()[coord] = orig - step;
        let dn = joint_loss(&model, Some(&head), batch, label, 1.0)?;
        model.params_mut()[pi].value.data_mut()[coord] = orig;
        let fd = (up - dn) / (2.0 * step);
        let a = analytic.data()[coord];
        let rel = (a - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
        if pi % 5 == 0 {
            println!("{name:<26} {a:>14.8} {fd:>14.8} {rel:>10.2e}");
        }
        assert!(rel < 1e-3, "{name}: analytic {a} vs finite-diff {fd}");
    }
    println!("\nall parameters within 1e-3 relative; worst {worst:.2e}");
    Ok(())
}
