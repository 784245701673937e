use catequiv::model::{ModelKind, ModelSpec};
use catequiv::synth::make_dataset;
use catequiv::train::{train, TrainConfig};

fn main() {
    let spec = ModelSpec::tiny(ModelKind::CatEquiv);
    let windows = make_dataset(6, 6, spec.t_len, 40);
    let cfg = TrainConfig {
        max_epochs: 200,
        batch_size: 6,
        augment: false,
        seed: 7,
        weight_decay: 0.0,
        lr: 0.01,
        plateau_patience: 12,
        early_stop_patience: 40,
        ..TrainConfig::default()
    };
    let outcome = train(&spec, &windows, &windows, &cfg).unwrap();
    for r in outcome.log.iter().step_by(8) {
        println!(
            "epoch {:3} lr {:.5} loss {:.4} val_acc {:.3} val_f1 {:.3}",
            r.epoch, r.lr, r.train_loss, r.val_accuracy, r.val_macro_f1
        );
    }
    let last = outcome.log.last().unwrap();
    println!("last epoch {} acc {:.3} f1 {:.3}", last.epoch, last.val_accuracy, last.val_macro_f1);
    println!("best epoch {} f1 {:.4} stopped_early {}", outcome.best_epoch, outcome.best_val_macro_f1, outcome.stopped_early);
}
