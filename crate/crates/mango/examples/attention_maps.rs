//! Attention inspection: walk a trained flow and print each invertible
//! cross-attention layer's matrix. Rows are the transformed partition's
//! tokens; the strict lower triangle is zero and every row sums to one,
//! which is exactly why the layer inverts in closed form.
//!
//! Run with `cargo run --release --example attention_maps`.

use mango::data::{generate, DatasetName, DatasetSpec};
use mango::flow::{FlowModel, ModelSpec, ModelVariant};
use mango::partition::ModalityLayout;
use mango::rng;
use mango::train::{train, TrainConfig};

fn main() -> mango::Result<()> {
    let data = generate(&DatasetSpec::new(DatasetName::CorrelatedGaussians, 0, 256))?;
    let layout = ModalityLayout::new(4, 4)?;
    let mut model = FlowModel::build(
        ModelSpec {
            variant: ModelVariant::Mango,
            layout,
            d_model: 4,
            blocks: 1,
        },
        rng::sub_seed(0, "init"),
    )?;
    let config = TrainConfig {
        steps: 500,
        batch_size: 8,
        learning_rate: 3e-3,
        weight_task: 0.0,
        seed: 0,
        ..TrainConfig::default()
    };
    train(&mut model, None, &data, &config, |_| {})?;

    // walk the flow on one held-out batch, printing each attention matrix
    let x = &data[200].0.tokens;
    let mut cur = x.clone();
    for (i, sub) in model.sub_layers().iter().enumerate() {
        if let Some(att) = sub.attention_map(&cur, layout)? {
            let a = &att.0;
            println!("layer {i} ({}):", sub.kind());
            for r in 0..a.rows() {
                let row: Vec<String> =
                    (0..a.cols()).map(|c| format!("{:.3}", a.at2(r, c))).collect();
                println!("  [{}]", row.join(" "));
            }
            let diag: f64 = (0..a.rows()).map(|r| a.at2(r, r)).sum::<f64>() / a.rows() as f64;
            println!("  mean diagonal {diag:.3}\n");
        }
        let (y, _) = sub.forward(&cur, layout)?;
        cur = y;
    }
    println!("(the `export-attention` subcommand writes the same matrices as CSV)");
    Ok(())
}
