//! Round-trip invertibility: every layer kind and full models map x -> z -> x
//! back to the input within 1e-6, across sizes and seeds.
//!
//! Run with `cargo run --release --example invertibility`.

use mango::flow::{FlowModel, ModelSpec, ModelVariant, SubLayer};
use mango::oracle::audit_bijection;
use mango::partition::ModalityLayout;
use mango::rng;

fn main() -> mango::Result<()> {
    let mut worst: f64 = 0.0;
    let mut audits = 0usize;
    for seed in 0..5u64 {
        for (half, d) in [(2usize, 2usize), (2, 4), (4, 4), (8, 2)] {
            let layout = ModalityLayout::new(half, half)?;
            let n = layout.n();
            let mut r = rng::stream(seed, "inputs");
            let x = rng::gaussian_tensor(&mut r, &[n, d], 1.0);

            let model = FlowModel::build(
                ModelSpec {
                    variant: ModelVariant::Mango,
                    layout,
                    d_model: d,
                    blocks: 2,
                },
                seed,
            )?;

            // each sub-layer individually
            for layer in model.sub_layers() {
                let rep = audit_bijection(
                    format!("{:>14} n={n} d={d} seed={seed}", layer.kind()),
                    &|v| layer.forward(v, layout),
                    &|v| layer.inverse(v, layout),
                    &x,
                )?;
                worst = worst.max(rep.roundtrip_err);
                audits += 1;
            }

            // the whole two-block stack
            let rep = audit_bijection(
                format!("{:>14} n={n} d={d} seed={seed}", "model L2"),
                &|v| model.forward(v),
                &|v| model.inverse(v),
                &x,
            )?;
            println!(
                "model L2  n={n:2} d={d} seed={seed}: round-trip {:.2e}, log-det {:+.4}",
                rep.roundtrip_err, rep.logdet_analytic
            );
            worst = worst.max(rep.roundtrip_err);
            audits += 1;
        }
    }
    // the SubLayer list is deduplicated per model; confirm the glow mixing
    // layer inverts too
    let layout = ModalityLayout::new(4, 4)?;
    let glow = FlowModel::build(
        ModelSpec {
            variant: ModelVariant::GlowLinear,
            layout,
            d_model: 4,
            blocks: 1,
        },
        0,
    )?;
    let mut r = rng::stream(99, "inputs");
    let x = rng::gaussian_tensor(&mut r, &[8, 4], 1.0);
    for layer in glow.sub_layers() {
        if matches!(layer, SubLayer::Mixing(_)) {
            let rep = audit_bijection(
                "lu mixing",
                &|v| layer.forward(v, layout),
                &|v| layer.inverse(v, layout),
                &x,
            )?;
            println!("lu mixing n= 8 d=4        : round-trip {:.2e}", rep.roundtrip_err);
            worst = worst.max(rep.roundtrip_err);
            audits += 1;
        }
    }

    println!("\n{audits} audits, worst round-trip error {worst:.2e} (tolerance 1e-6)");
    assert!(worst < 1e-6);
    Ok(())
}
