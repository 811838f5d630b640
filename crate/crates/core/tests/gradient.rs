//! Backpropagation against central finite differences of the loss.

use oscilloprobe::dynamics::{tokenize, Dataset, DatasetKind, Split};
use oscilloprobe::pipeline::dataset_config;
use oscilloprobe::transformer::{batch_gradient, Model, ModelConfig};

fn check(kind: DatasetKind, layers: usize, hidden: usize) {
    let data = Dataset::generate(&dataset_config(kind, 4, Some(if kind.is_sho() { 9 } else { 5 }), Split::Train).unwrap(), 3).unwrap();
    let tok = tokenize(&data);
    let model = Model::init(ModelConfig::new(layers, hidden, tok.token_dim, tok.seq_len, 7)).unwrap();
    let idx = [0, 1, 2, 3];
    let g = batch_gradient(&model, &tok, &idx).unwrap();

    let h = 1e-5;
    let stride = (model.n_params() / 150).max(1);
    let mut worst: f64 = 0.0;
    for i in (0..model.n_params()).step_by(stride) {
        let mut plus = model.clone();
        plus.params[i] += h;
        let mut minus = model.clone();
        minus.params[i] -= h;
        let fd = (batch_gradient(&plus, &tok, &idx).unwrap().loss - batch_gradient(&minus, &tok, &idx).unwrap().loss) / (2.0 * h);
        let err = (fd - g.grad[i]).abs() / (fd.abs() + g.grad[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst < 1e-5, "{kind:?} L{layers} H{hidden}: worst relative error {worst:.2e}");
}

#[test]
fn regression_model_gradient() {
    check(DatasetKind::Linreg, 2, 8);
}

#[test]
fn oscillator_model_gradient() {
    check(DatasetKind::ShoDampedMixed, 1, 4);
    check(DatasetKind::ShoUndamped, 3, 6);
}
