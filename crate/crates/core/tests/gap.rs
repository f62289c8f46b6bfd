//! Irreducible-gap estimates on data with a controlled nuisance level.
//! These runs are long, so each test trains as few models as it can.

use dagr_core::trainer::gap::{estimate_modality_gap, TieMethod};
use dagr_core::trainer::{generate_dataset, Dataset, SyntheticDataConfig, TrainConfig};

fn data(nu: f64, seed: u64) -> Dataset {
    generate_dataset(&SyntheticDataConfig {
        samples_per_class: 50,
        nuisance_std: vec![0.0, nu],
        noise: 0.0,
        seed,
        ..SyntheticDataConfig::default()
    })
    .unwrap()
}

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        hidden: vec![],
        lr: 0.05,
        lambda_intra: 0.0,
        diag_every: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn delta(data: &Dataset, epochs: usize, seed: u64) -> f64 {
    estimate_modality_gap(data, &cfg(epochs, seed), TieMethod::default())
        .unwrap()
        .delta_hat
}

#[test]
fn no_nuisance_means_no_gap() {
    let d = delta(&data(0.0, 0), 8000, 0);
    assert!(d.abs() <= 1e-3, "{d}");
}

#[test]
fn gap_grows_with_nuisance_and_ignores_modality_order() {
    let low = delta(&data(0.25, 0), 4000, 0);
    let high_data = data(1.0, 0);
    let high = delta(&high_data, 4000, 0);
    assert!(low >= 0.0 && high > 2.0 * low, "{low} vs {high}");
    let swapped = delta(&high_data.swapped(0, 1), 4000, 0);
    assert!((swapped - high).abs() <= 0.25 * high, "{high} vs {swapped}");
}
