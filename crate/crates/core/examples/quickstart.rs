//! Trains ProtoKD on a small synthetic corpus with one labelled sample per
//! class and reports test metrics under both prediction rules.
//!
//! `cargo run --release -p protokd-core --example quickstart`

use protokd::augment::AugmentPolicy;
use protokd::data::{generate_synthetic, scarce_split, SplitSpec, SyntheticSpec};
use protokd::encoder::EncoderConfig;
use protokd::eval::{classify_dataset, per_class_metrics};
use protokd::trainer::{train, TrainConfig};

fn main() -> protokd::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: 6,
        intra_class_variance: 0.3,
        image_size: 16,
        ..SyntheticSpec::default()
    })?;
    let split = scarce_split(&ds, &SplitSpec::default())?;
    let encoder = EncoderConfig {
        input_size: 16,
        ..EncoderConfig::default()
    };
    let config = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let out = train(
        &split.train,
        &split.val,
        &encoder,
        &AugmentPolicy::microscopy(),
        &config,
        |r| {
            println!(
                "epoch {:>2}  val macro-F1 {:.3}{}",
                r.epoch,
                r.val_f1,
                if r.best { " *" } else { "" }
            );
        },
    )?;
    for rule in out.model.rules() {
        let preds = classify_dataset(&out.model, &split.test, rule)?.predictions;
        let report = per_class_metrics(&preds, &split.test.labels(), ds.num_classes())?;
        println!(
            "{rule:?} rule: macro precision {:.3} recall {:.3} F1 {:.3} on {} test items",
            report.macro_precision,
            report.macro_recall,
            report.macro_f1,
            split.test.len()
        );
    }
    Ok(())
}
