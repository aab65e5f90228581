//! Finite-difference check of the hand-written backward pass on a small
//! adapter-bearing model, once per tuning mode.

use adapterfed::adapter::{insert_adapters, AdapterConfig, Stacking};
use adapterfed::model::{build_model, ModelInput, ModelSpec, ModelState, TuningMode};
use adapterfed::nn::{cross_entropy_loss, grad_check, Differentiable, GradCheckOptions};
use adapterfed::rng::SeededRng;
use adapterfed::tensor::Parameter;

struct Probe {
    model: ModelState,
    tokens: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

impl Differentiable for Probe {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.model.parameters_mut().collect()
    }
    fn loss(&mut self) -> f64 {
        let logits = self.model.forward(&self.tokens).expect("forward");
        cross_entropy_loss(&logits, &self.labels).expect("loss").0
    }
    fn loss_and_grads(&mut self) -> f64 {
        self.model
            .loss_and_grads(ModelInput::Tokens(&self.tokens), &self.labels)
            .expect("backward")
    }
}

fn main() -> adapterfed::Result<()> {
    let spec = ModelSpec {
        num_layers: 3,
        hidden: 8,
        heads: 2,
        vocab: 13,
        seqlen: 5,
        num_labels: 3,
        ..ModelSpec::default()
    };
    let base = build_model(&spec, 4)?;
    let mut rng = SeededRng::new(5);
    let tokens: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..spec.seqlen).map(|_| rng.below(spec.vocab)).collect())
        .collect();
    let labels = vec![0, 2, 1];

    let mut adapters = insert_adapters(&base, AdapterConfig::new(2, 16), Stacking::Vertical { step: 8 }, &mut rng)?;
    // Scale up so adapter gradients are well above the step size.
    for p in adapters.parameters_mut().filter(|p| p.name.contains("adapter")) {
        p.value.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    }
    let mut full = base.clone();
    full.set_tuning_mode(TuningMode::Full)?;
    let mut frozen = base.clone();
    frozen.set_tuning_mode(TuningMode::LayerFreeze { frozen: 1 })?;

    for (name, model) in [("adapter(2,16)", adapters), ("full", full), ("layer_freeze(1)", frozen)] {
        let mut probe = Probe {
            model,
            tokens: tokens.clone(),
            labels: labels.clone(),
        };
        let err = grad_check(&mut probe, GradCheckOptions::default());
        println!("{name:>16}: max relative error {err:.2e}");
    }
    Ok(())
}
