//! Bottleneck adapters: configuration, insertion, and the deepen/widen
//! upgrade paths.
//!
//! A layer's adapter is a stack of meta-adapters applied one after another,
//! each computing `h <- h + f(h W_down + b_down) W_up + b_up`. Widening appends
//! a meta-adapter to every adapted layer; deepening adds fresh stacks to the
//! layers just below the adapted range. Existing weights are never touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::nn::{self, Activation};
use crate::rng::SeededRng;
use crate::tensor::{Parameter, Tensor};

/// Standard deviation of freshly inserted adapter weights.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Smallest valid adapter width.
pub const MIN_WIDTH: usize = 8;

/// Tuning depth and bottleneck width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Number of topmost transformer layers carrying adapters.
    pub depth: usize,
    /// Effective bottleneck width at each adapted layer.
    pub width: usize,
}

impl AdapterConfig {
    pub fn new(depth: usize, width: usize) -> Self {
        Self { depth, width }
    }

    pub fn validate(&self, num_layers: usize, stacking: Stacking) -> Result<()> {
        if self.depth > num_layers {
            return Err(Error::Config(format!(
                "adapter depth {} exceeds the model's {} layers",
                self.depth, num_layers
            )));
        }
        if self.depth > 0 {
            if self.width < MIN_WIDTH {
                return Err(Error::Config(format!(
                    "adapter width {} is below the minimum of {MIN_WIDTH}",
                    self.width
                )));
            }
            if let Stacking::Vertical { step } = stacking {
                if step == 0 || self.width % step != 0 {
                    return Err(Error::Config(format!(
                        "adapter width {} is not a multiple of the step width {step}",
                        self.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// 1-indexed layers carrying adapters: `D - d + 1 ..= D`.
    pub fn adapted_layers(&self, num_layers: usize) -> std::ops::RangeInclusive<usize> {
        (num_layers + 1 - self.depth)..=num_layers
    }
}

/// How a width is realized at each adapted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stacking {
    /// A series of meta-adapters, each `step` wide.
    Vertical { step: usize },
    /// One adapter of the full width; cannot be widened.
    Monolithic,
}

impl Stacking {
    /// Widths of the meta-adapters making up one layer's stack.
    pub fn unit_widths(&self, width: usize) -> Vec<usize> {
        match *self {
            Stacking::Vertical { step } => vec![step; width / step],
            Stacking::Monolithic => vec![width],
        }
    }
}

/// Trainable parameters of one adapter of width `m` on hidden size `n`:
/// `2mn + n + m`.
pub fn adapter_param_count(m: usize, n: usize) -> usize {
    2 * m * n + n + m
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaAdapter {
    pub down: Parameter,
    pub down_bias: Parameter,
    pub up: Parameter,
    pub up_bias: Parameter,
}

impl MetaAdapter {
    /// Weights ~ N(0, 0.02), biases zero.
    pub fn fresh(prefix: &str, hidden: usize, width: usize, rng: &mut SeededRng) -> Self {
        let down = rng.normal_vec(hidden * width, 0.0, ADAPTER_INIT_STD);
        let up = rng.normal_vec(width * hidden, 0.0, ADAPTER_INIT_STD);
        Self::from_parts(prefix, hidden, width, down, up)
    }

    pub fn zeros(prefix: &str, hidden: usize, width: usize) -> Self {
        Self::from_parts(
            prefix,
            hidden,
            width,
            vec![0.0; hidden * width],
            vec![0.0; width * hidden],
        )
    }

    fn from_parts(prefix: &str, hidden: usize, width: usize, down: Vec<f64>, up: Vec<f64>) -> Self {
        let p = |name: &str, shape: Vec<usize>, data: Vec<f64>| {
            Parameter::new(
                format!("{prefix}.{name}"),
                Tensor::new(shape, data).expect("shape"),
                true,
            )
        };
        Self {
            down: p("down", vec![hidden, width], down),
            down_bias: p("down_bias", vec![width], vec![0.0; width]),
            up: p("up", vec![width, hidden], up),
            up_bias: p("up_bias", vec![hidden], vec![0.0; hidden]),
        }
    }

    pub fn width(&self) -> usize {
        self.down.value.shape()[1]
    }

    pub fn parameters(&self) -> [&Parameter; 4] {
        [&self.down, &self.down_bias, &self.up, &self.up_bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.down,
            &mut self.down_bias,
            &mut self.up,
            &mut self.up_bias,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct MetaAdapterCache {
    input: Tensor,
    pre: Tensor,
    act: Tensor,
}

/// The meta-adapters attached to one transformer layer, applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterStack {
    pub units: Vec<MetaAdapter>,
}

impl AdapterStack {
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn width(&self) -> usize {
        self.units.iter().map(MetaAdapter::width).sum()
    }

    pub fn forward(&self, h: Tensor, act: Activation) -> Tensor {
        self.units.iter().fold(h, |h, unit| {
            let pre = nn::linear_forward(&h, &unit.down, &unit.down_bias).expect("adapter shape");
            let a = nn::activate(&pre, act);
            let delta = nn::linear_forward(&a, &unit.up, &unit.up_bias).expect("adapter shape");
            nn::add(&h, &delta)
        })
    }

    pub fn forward_train(&self, mut h: Tensor, act: Activation) -> (Tensor, Vec<MetaAdapterCache>) {
        let mut caches = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let pre = nn::linear_forward(&h, &unit.down, &unit.down_bias).expect("adapter shape");
            let a = nn::activate(&pre, act);
            let delta = nn::linear_forward(&a, &unit.up, &unit.up_bias).expect("adapter shape");
            let out = nn::add(&h, &delta);
            caches.push(MetaAdapterCache {
                input: h,
                pre,
                act: a,
            });
            h = out;
        }
        (h, caches)
    }

    /// Backward through the stack; returns the input gradient when requested.
    pub fn backward(
        &mut self,
        caches: &[MetaAdapterCache],
        grad_out: Tensor,
        act: Activation,
        want_input: bool,
    ) -> Option<Tensor> {
        let mut g = grad_out;
        for (i, (unit, cache)) in self.units.iter_mut().zip(caches).enumerate().rev() {
            // The bottom unit only needs an input gradient if the caller does.
            let need_input = want_input || i > 0;
            let d_act = nn::linear_backward(&cache.act, &mut unit.up, &mut unit.up_bias, &g, true)
                .expect("requested");
            let d_pre = nn::activate_backward(&cache.pre, &d_act, act);
            let through =
                nn::linear_backward(&cache.input, &mut unit.down, &mut unit.down_bias, &d_pre, need_input);
            let Some(t) = through else {
                return None;
            };
            nn::add_assign(&mut g, &t);
        }
        want_input.then_some(g)
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.units.iter().flat_map(|u| u.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.units.iter_mut().flat_map(|u| u.parameters_mut())
    }
}

fn unit_prefix(layer: usize, unit: usize) -> String {
    format!("layer{layer}.adapter{unit}")
}

fn fresh_stack(
    layer: usize,
    hidden: usize,
    widths: &[usize],
    rng: &mut SeededRng,
) -> AdapterStack {
    AdapterStack {
        units: widths
            .iter()
            .enumerate()
            .map(|(i, &w)| MetaAdapter::fresh(&unit_prefix(layer, i), hidden, w, rng))
            .collect(),
    }
}

/// Insert adapters for `config` into a model that has none.
///
/// Layers `D-d+1..=D` each receive `width / step` meta-adapters drawn from
/// `rng` in layer order, bottom to top.
pub fn insert_adapters(
    model: &ModelState,
    config: AdapterConfig,
    stacking: Stacking,
    rng: &mut SeededRng,
) -> Result<ModelState> {
    let spec = model.spec();
    config.validate(spec.num_layers, stacking)?;
    if model.adapter_config().depth > 0 {
        return Err(Error::Config(
            "model already carries adapters; use deepen/widen".into(),
        ));
    }
    let mut out = model.clone();
    out.set_stacking(stacking);
    if config.depth > 0 {
        let widths = stacking.unit_widths(config.width);
        for layer in config.adapted_layers(spec.num_layers) {
            *out.adapter_stack_mut(layer) = fresh_stack(layer, spec.hidden, &widths, rng);
        }
    }
    out.set_adapter_config(config);
    out.refresh_trainable();
    Ok(out)
}

/// Give a model without adapters the layout of `config` with all adapter
/// weights zero; used to materialize received payloads.
pub fn insert_zeroed(
    model: &ModelState,
    config: AdapterConfig,
    stacking: Stacking,
) -> Result<ModelState> {
    let spec = model.spec();
    config.validate(spec.num_layers, stacking)?;
    let mut out = model.clone();
    for stack in 1..=spec.num_layers {
        out.adapter_stack_mut(stack).units.clear();
    }
    out.set_stacking(stacking);
    if config.depth > 0 {
        let widths = stacking.unit_widths(config.width);
        for layer in config.adapted_layers(spec.num_layers) {
            out.adapter_stack_mut(layer).units = widths
                .iter()
                .enumerate()
                .map(|(i, &w)| MetaAdapter::zeros(&unit_prefix(layer, i), spec.hidden, w))
                .collect();
        }
    }
    out.set_adapter_config(config);
    out.refresh_trainable();
    Ok(out)
}

/// Add fresh stacks of the current width to the `step` layers just below the
/// adapted range.
pub fn deepen(model: &ModelState, step: usize, rng: &mut SeededRng) -> Result<ModelState> {
    let spec = model.spec();
    let config = model.adapter_config();
    if config.depth + step > spec.num_layers {
        return Err(Error::Config(format!(
            "cannot deepen past the model: depth {} + {step} > {} layers",
            config.depth, spec.num_layers
        )));
    }
    if step == 0 {
        return Ok(model.clone());
    }
    let stacking = model.stacking();
    let next = AdapterConfig::new(config.depth + step, config.width);
    next.validate(spec.num_layers, stacking)?;
    let widths = stacking.unit_widths(config.width);
    let mut out = model.clone();
    let top_new = spec.num_layers - config.depth;
    for layer in (top_new + 1 - step)..=top_new {
        *out.adapter_stack_mut(layer) = fresh_stack(layer, spec.hidden, &widths, rng);
    }
    out.set_adapter_config(next);
    out.refresh_trainable();
    Ok(out)
}

/// Append one meta-adapter of width `step` to every adapted layer.
pub fn widen(model: &ModelState, step: usize, rng: &mut SeededRng) -> Result<ModelState> {
    let spec = model.spec();
    let config = model.adapter_config();
    if config.depth == 0 {
        return Err(Error::Config("cannot widen a model without adapters".into()));
    }
    match model.stacking() {
        Stacking::Monolithic => {
            return Err(Error::Config(
                "monolithic adapters cannot be widened with inheritance".into(),
            ))
        }
        Stacking::Vertical { step: s } if s != step => {
            return Err(Error::Config(format!(
                "widen step {step} differs from the meta-adapter width {s}"
            )))
        }
        Stacking::Vertical { .. } => {}
    }
    let mut out = model.clone();
    for layer in config.adapted_layers(spec.num_layers) {
        let stack = out.adapter_stack_mut(layer);
        let idx = stack.units.len();
        stack
            .units
            .push(MetaAdapter::fresh(&unit_prefix(layer, idx), spec.hidden, step, rng));
    }
    out.set_adapter_config(AdapterConfig::new(config.depth, config.width + step));
    out.refresh_trainable();
    Ok(out)
}

/// Exact number of trainable scalars in `model`, by enumerating its buffers.
pub fn trainable_param_count(model: &ModelState) -> usize {
    model
        .parameters()
        .filter(|p| p.trainable)
        .map(Parameter::len)
        .sum()
}

/// Closed-form trainable count for an adapter-tuned model.
///
/// With monolithic stacking this is `d(2mn + n + m) + n·labels + labels`.
pub fn adapter_trainable_count(
    hidden: usize,
    num_labels: usize,
    config: AdapterConfig,
    stacking: Stacking,
) -> usize {
    let per_layer: usize = if config.depth == 0 {
        0
    } else {
        stacking
            .unit_widths(config.width)
            .iter()
            .map(|&m| adapter_param_count(m, hidden))
            .sum()
    };
    config.depth * per_layer + hidden * num_labels + num_labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    fn tiny() -> ModelState {
        let spec = ModelSpec {
            num_layers: 4,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 11,
            seqlen: 4,
            num_labels: 3,
            ..ModelSpec::default()
        };
        build_model(&spec, 3).unwrap()
    }

    const V8: Stacking = Stacking::Vertical { step: 8 };

    #[test]
    fn unit_scale_count() {
        assert_eq!(adapter_param_count(1, 1), 4);
        assert_eq!(adapter_param_count(32, 768), 49_952);
    }

    #[test]
    fn bert_shape_counts() {
        let m = AdapterConfig::new(12, 32);
        assert_eq!(
            12 * adapter_param_count(32, 768) + 768 * 20,
            614_784
        );
        assert_eq!(
            adapter_trainable_count(768, 20, m, Stacking::Monolithic),
            614_784 + 20
        );
        let distil = AdapterConfig::new(6, 32);
        assert_eq!(
            adapter_trainable_count(768, 20, distil, Stacking::Monolithic),
            315_072 + 20
        );
    }

    #[test]
    fn depth_zero_keeps_model() {
        let base = tiny();
        let mut rng = SeededRng::new(1);
        let m = insert_adapters(&base, AdapterConfig::new(0, 8), V8, &mut rng).unwrap();
        assert_eq!(trainable_param_count(&m), 8 * 3 + 3);
        assert!(m.adapter_stacks().iter().all(AdapterStack::is_empty));
    }

    #[test]
    fn full_depth_minimum_width() {
        let base = tiny();
        let mut rng = SeededRng::new(1);
        let m = insert_adapters(&base, AdapterConfig::new(4, 8), V8, &mut rng).unwrap();
        let units: usize = m.adapter_stacks().iter().map(|s| s.units.len()).sum();
        assert_eq!(units, 4);
        assert_eq!(
            trainable_param_count(&m),
            4 * (2 * 8 * 8 + 8 + 8) + 8 * 3 + 3
        );
    }

    #[test]
    fn insertion_is_seed_deterministic() {
        let base = tiny();
        let a = insert_adapters(&base, AdapterConfig::new(2, 16), V8, &mut SeededRng::new(5)).unwrap();
        let b = insert_adapters(&base, AdapterConfig::new(2, 16), V8, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_beyond_model_is_rejected() {
        let base = tiny();
        let err = insert_adapters(&base, AdapterConfig::new(5, 8), V8, &mut SeededRng::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn deepen_inherits_and_counts() {
        let base = tiny();
        let mut rng = SeededRng::new(2);
        let m = insert_adapters(&base, AdapterConfig::new(2, 16), V8, &mut rng).unwrap();
        let deeper = deepen(&m, 1, &mut rng).unwrap();
        assert_eq!(deeper.adapter_config(), AdapterConfig::new(3, 16));
        assert_eq!(deeper.adapter_stack(3), m.adapter_stack(3));
        assert_eq!(deeper.adapter_stack(4), m.adapter_stack(4));
        assert_eq!(deeper.adapter_stack(2).units.len(), 2);
        assert!(deeper.adapter_stack(1).is_empty());
        assert_eq!(
            trainable_param_count(&deeper) - trainable_param_count(&m),
            (16 / 8) * (2 * 8 * 8 + 8 + 8)
        );
    }

    #[test]
    fn deepen_at_full_depth_fails() {
        let base = tiny();
        let mut rng = SeededRng::new(2);
        let m = insert_adapters(&base, AdapterConfig::new(4, 8), V8, &mut rng).unwrap();
        assert!(matches!(deepen(&m, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn widen_appends_one_unit_per_layer() {
        let base = tiny();
        let mut rng = SeededRng::new(4);
        let m = insert_adapters(&base, AdapterConfig::new(2, 8), V8, &mut rng).unwrap();
        let wider = widen(&m, 8, &mut rng).unwrap();
        assert_eq!(wider.adapter_config(), AdapterConfig::new(2, 16));
        for layer in 3..=4 {
            assert_eq!(wider.adapter_stack(layer).units.len(), 2);
            assert_eq!(wider.adapter_stack(layer).units[0], m.adapter_stack(layer).units[0]);
        }
        assert_eq!(
            trainable_param_count(&wider) - trainable_param_count(&m),
            2 * (2 * 8 * 8 + 8 + 8)
        );
    }

    #[test]
    fn widen_without_adapters_fails() {
        let base = tiny();
        let mut rng = SeededRng::new(4);
        let m = insert_adapters(&base, AdapterConfig::new(0, 8), V8, &mut rng).unwrap();
        assert!(matches!(widen(&m, 8, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn stacked_versus_monolithic_overhead() {
        let base = tiny();
        let n = 8;
        let stacked =
            insert_adapters(&base, AdapterConfig::new(3, 16), V8, &mut SeededRng::new(0)).unwrap();
        let mono = insert_adapters(
            &base,
            AdapterConfig::new(3, 16),
            Stacking::Monolithic,
            &mut SeededRng::new(0),
        )
        .unwrap();
        let by_buffers = |m: &ModelState| -> usize {
            m.adapter_stacks()
                .iter()
                .flat_map(|s| s.parameters())
                .map(Parameter::len)
                .sum::<usize>()
                + n * 3
                + 3
        };
        assert_eq!(trainable_param_count(&stacked), by_buffers(&stacked));
        assert_eq!(trainable_param_count(&mono), by_buffers(&mono));
        // the second 8-wide unit adds one more up-projection bias per layer
        assert_eq!(
            trainable_param_count(&stacked) - trainable_param_count(&mono),
            3 * n
        );
        assert_eq!(
            trainable_param_count(&mono),
            adapter_trainable_count(n, 3, AdapterConfig::new(3, 16), Stacking::Monolithic)
        );
    }
}
