//! Fixtures shared by the benchmarks.

use stlink_core::data::WindowSample;
use stlink_core::runner::{load_source, model_config_for, prepare, Prepared, RunConfig, Trainer};
use stlink_core::Model;

/// A named model size on synthetic data.
pub struct Fixture {
    pub name: &'static str,
    pub data: Prepared,
    pub model: Model,
    pub lr: f64,
}

impl Fixture {
    pub fn new(name: &'static str, kv: &str) -> Self {
        let mut cfg = RunConfig::default();
        cfg.apply_kv_text(kv).expect("fixture config");
        let data = prepare(load_source(&cfg).expect("synthetic data"), &cfg).expect("splits");
        let mut model = Model::new(model_config_for(&cfg, &data.bundle)).expect("model");
        model.scaler = data.scaler.clone();
        Self { name, data, model, lr: cfg.lr }
    }

    /// The first `n` training windows.
    pub fn batch(&self, n: usize) -> Vec<&WindowSample> {
        self.data.train.iter().take(n).collect()
    }

    pub fn trainer(&self) -> Trainer {
        Trainer::new(self.model.clone(), self.lr, self.data.bundle.null_value())
    }
}

/// Desk-scale and default-width models on eight synthetic nodes.
pub fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture::new("d16", "synth_nodes = 8\nsynth_steps = 600\nd_model = 16\nheads = 1\nn_layers = 2\ntrainable_upper = 2\nd_ff = 32\nlr = 1e-3"),
        Fixture::new("d64", "synth_nodes = 8\nsynth_steps = 600\nlr = 1e-4"),
    ]
}
