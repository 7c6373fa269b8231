//! Iterative per-layer activation steering along CAV directions.
//!
//! At each layer, while the layer classifier's confidence in the concept is
//! below τ, the activation moves one step δ along the unit CAV; the shifted
//! activation then propagates to the next layer. Each step adds δ·s to the
//! classifier logit (the direction is unit norm), so confidence rises
//! strictly until the threshold is crossed. The pass runs once without
//! steering and once with it; the pair of final-layer activations is what
//! concept extraction consumes.

use crate::cav::CavStack;
use crate::model::bridge::format_float;
use crate::model::{LayerwiseModel, ModelError, ModelInfo};
use crate::numerics::{NumericsError, Vector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SteerError {
    #[error("invalid steer config: {0}")]
    InvalidConfig(String),
    #[error(
        "layer {layer}: confidence {confidence} still below threshold after {max_steps} steps"
    )]
    MaxStepsExceeded {
        layer: u32,
        confidence: f64,
        max_steps: usize,
    },
    #[error("CAV stack was built for {stack:?}, model is {model:?}")]
    StackModelMismatch { stack: ModelInfo, model: ModelInfo },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Steering parameters. Defaults: τ = 0.999, δ = 1, 10,000 steps per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerConfig {
    pub tau: f64,
    pub delta: f64,
    pub max_steps_per_layer: usize,
    /// Record the confidence after every step (debug trace mode).
    #[serde(default)]
    pub record_confidences: bool,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            tau: 0.999,
            delta: 1.0,
            max_steps_per_layer: 10_000,
            record_confidences: false,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<(), SteerError> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(SteerError::InvalidConfig(format!(
                "tau {} must lie in (0.5, 1)",
                self.tau
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(SteerError::InvalidConfig(format!(
                "delta {} must be positive",
                self.delta
            )));
        }
        if self.max_steps_per_layer == 0 {
            return Err(SteerError::InvalidConfig(
                "max_steps_per_layer must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one steer run: final activations of the unsteered and steered
/// passes plus per-layer step counts and post-loop confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerTrace {
    pub prompt: String,
    pub config: SteerConfig,
    pub a_ori_final: Vector,
    pub a_steer_final: Vector,
    pub steps_per_layer: Vec<usize>,
    pub confidences_after: Vec<f64>,
    /// Present when `record_confidences` was set: confidence after each step,
    /// per layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step_confidences: Option<Vec<Vec<f64>>>,
}

impl SteerTrace {
    /// The (unsteered, steered) final-layer activation pair.
    pub fn paired_last_activations(&self) -> (&Vector, &Vector) {
        (&self.a_ori_final, &self.a_steer_final)
    }

    /// Line-oriented text dump: one `layer=<l> steps=<k> conf=<c>` line per
    /// layer, then `a_ori=` and `a_steer=` lines with decimal vectors.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, (steps, conf)) in self
            .steps_per_layer
            .iter()
            .zip(&self.confidences_after)
            .enumerate()
        {
            out.push_str(&format!(
                "layer={} steps={} conf={}\n",
                i + 1,
                steps,
                format_float(*conf)
            ));
        }
        let fmt_vec = |v: &Vector| {
            v.as_slice()
                .iter()
                .map(|&x| format_float(x))
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push_str(&format!("a_ori={}\n", fmt_vec(&self.a_ori_final)));
        out.push_str(&format!("a_steer={}\n", fmt_vec(&self.a_steer_final)));
        out
    }
}

/// See [`SteerTrace::paired_last_activations`].
pub fn paired_last_activations(trace: &SteerTrace) -> (&Vector, &Vector) {
    trace.paired_last_activations()
}

/// Run the unsteered and steered passes for one prompt.
pub fn steer(
    model: &dyn LayerwiseModel,
    stack: &CavStack,
    prompt: &str,
    config: &SteerConfig,
) -> Result<SteerTrace, SteerError> {
    config.validate()?;
    if stack.model_info != *model.info() {
        return Err(SteerError::StackModelMismatch {
            stack: stack.model_info.clone(),
            model: model.info().clone(),
        });
    }
    let n_layers = stack.model_info.n_layers;

    let unsteered = model.forward_all(prompt)?;
    let a_ori_final = unsteered
        .into_iter()
        .next_back()
        .expect("forward_all returns n_layers >= 1 activations");

    let mut activation = model.encode(prompt)?;
    let mut steps_per_layer = Vec::with_capacity(n_layers);
    let mut confidences_after = Vec::with_capacity(n_layers);
    let mut per_step = config.record_confidences.then(Vec::new);

    for layer in 1..=n_layers {
        let cav = stack.cav(layer);
        let mut steps = 0usize;
        let mut layer_confs = Vec::new();
        let mut confidence = cav.confidence(&activation)?;
        while confidence < config.tau {
            if steps >= config.max_steps_per_layer {
                return Err(SteerError::MaxStepsExceeded {
                    layer: layer as u32,
                    confidence,
                    max_steps: config.max_steps_per_layer,
                });
            }
            activation.add_scaled(cav.direction(), config.delta)?;
            steps += 1;
            confidence = cav.confidence(&activation)?;
            if per_step.is_some() {
                layer_confs.push(confidence);
            }
        }
        steps_per_layer.push(steps);
        confidences_after.push(confidence);
        if let Some(all) = per_step.as_mut() {
            all.push(layer_confs);
        }
        if layer < n_layers {
            activation = model.layer_forward(layer, &activation)?;
        }
    }

    Ok(SteerTrace {
        prompt: prompt.to_string(),
        config: *config,
        a_ori_final,
        a_steer_final: activation,
        steps_per_layer,
        confidences_after,
        per_step_confidences: per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cav::{Cav, CavStack};
    use crate::model::toy::ToyLm;
    use crate::model::ModelInfo;
    use crate::rng::SplitMix64;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Stack with an arbitrary CAV per layer, exercising the real toy model.
    fn random_stack(model_info: &ModelInfo, seed: u64, bias: f64) -> CavStack {
        let mut rng = SplitMix64::new(seed);
        let cavs = (1..=model_info.n_layers as u32)
            .map(|layer| {
                let w: Vec<f64> = (0..model_info.hidden_dim)
                    .map(|_| rng.next_normal())
                    .collect();
                Cav::new(layer, &Vector::new(w).unwrap(), bias, 1.0, 1.0).unwrap()
            })
            .collect();
        CavStack::new("test", model_info.clone(), cavs).unwrap()
    }

    #[test]
    fn defaults_match_contract() {
        let cfg = SteerConfig::default();
        assert_eq!(cfg.tau, 0.999);
        assert_eq!(cfg.delta, 1.0);
        assert_eq!(cfg.max_steps_per_layer, 10_000);
    }

    #[test]
    fn config_validation() {
        let bad = SteerConfig {
            tau: 0.4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SteerConfig {
            delta: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SteerConfig {
            max_steps_per_layer: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn already_confident_prompt_takes_no_steps() {
        let model = ToyLm::new(42, 4, 16).unwrap();
        // Huge positive bias: classifier is confident everywhere.
        let stack = random_stack(model.info(), 5, 50.0);
        let trace = steer(&model, &stack, "a calm sentence", &SteerConfig::default()).unwrap();
        assert_eq!(trace.steps_per_layer, vec![0, 0, 0, 0]);
        assert_eq!(trace.a_steer_final, trace.a_ori_final);
        // Trace metadata carries the defaults.
        assert_eq!(trace.config.tau, 0.999);
        assert_eq!(trace.config.delta, 1.0);
    }

    #[test]
    fn unsteered_pass_matches_forward_all_bitwise() {
        let model = ToyLm::new(42, 4, 16).unwrap();
        let stack = random_stack(model.info(), 6, 0.0);
        let trace = steer(&model, &stack, "the prompt", &SteerConfig::default()).unwrap();
        let independent = model.forward_all("the prompt").unwrap();
        assert_eq!(&trace.a_ori_final, independent.last().unwrap());
        // Post-loop confidences meet the threshold.
        assert!(trace
            .confidences_after
            .iter()
            .all(|&c| c >= trace.config.tau));
    }

    #[test]
    fn single_layer_step_count_matches_closed_form() {
        // With one layer each step adds δ·s to the logit, so the count is
        // ceil((logit(τ) − logit₀)/(δ·s)) when positive. Checked against an
        // independent scalar-logit loop as well.
        let mut rng = SplitMix64::new(99);
        for trial in 0..50 {
            let dim = 2 + rng.next_below(6) as usize;
            let model = ToyLm::new(1000 + trial, 1, dim).unwrap();
            let w: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
            let bias = rng.next_normal() * 3.0;
            let cav = Cav::new(1, &Vector::new(w).unwrap(), bias, 1.0, 1.0).unwrap();
            let stack = CavStack::new("t", model.info().clone(), vec![cav.clone()]).unwrap();
            let tau = 0.9 + 0.099 * rng.next_f64();
            let delta = 0.25 + rng.next_f64();
            let cfg = SteerConfig {
                tau,
                delta,
                ..Default::default()
            };
            let prompt = format!("prompt number {trial}");
            let trace = steer(&model, &stack, &prompt, &cfg).unwrap();

            let a0 = model.encode(&prompt).unwrap();
            let logit0 = cav.logit(&a0).unwrap();
            let closed_form = if logit0 >= logit(tau) {
                0
            } else {
                ((logit(tau) - logit0) / (delta * cav.scale())).ceil() as usize
            };
            // Independent scalar oracle: iterate the logit loop directly.
            let mut oracle_logit = logit0;
            let mut oracle_steps = 0;
            while 1.0 / (1.0 + (-oracle_logit).exp()) < tau {
                oracle_logit += delta * cav.scale();
                oracle_steps += 1;
            }
            assert_eq!(trace.steps_per_layer[0], oracle_steps, "trial {trial}");
            assert_eq!(closed_form, oracle_steps, "trial {trial}");
            assert!(trace.confidences_after[0] >= tau);
        }
    }

    #[test]
    fn per_step_confidences_strictly_increase() {
        let model = ToyLm::new(7, 3, 8).unwrap();
        let stack = random_stack(model.info(), 8, -4.0);
        let cfg = SteerConfig {
            record_confidences: true,
            ..Default::default()
        };
        let trace = steer(&model, &stack, "needs steering", &cfg).unwrap();
        let per_step = trace.per_step_confidences.as_ref().unwrap();
        assert_eq!(per_step.len(), 3);
        let mut any_steps = false;
        for layer_confs in per_step {
            for pair in layer_confs.windows(2) {
                assert!(pair[1] > pair[0]);
            }
            any_steps |= !layer_confs.is_empty();
        }
        assert!(any_steps, "test should exercise at least one step");
    }

    #[test]
    fn threshold_monotonicity_on_single_layer() {
        let model = ToyLm::new(11, 1, 8).unwrap();
        let stack = random_stack(model.info(), 12, -2.0);
        let steps_at = |tau: f64| {
            let cfg = SteerConfig {
                tau,
                ..Default::default()
            };
            steer(&model, &stack, "the same prompt", &cfg)
                .unwrap()
                .steps_per_layer[0]
        };
        assert!(steps_at(0.9999) >= steps_at(0.99));
    }

    #[test]
    fn max_steps_produces_diagnostic() {
        let model = ToyLm::new(13, 2, 8).unwrap();
        let stack = random_stack(model.info(), 14, -30.0);
        let cfg = SteerConfig {
            max_steps_per_layer: 3,
            ..Default::default()
        };
        match steer(&model, &stack, "hopeless", &cfg) {
            Err(SteerError::MaxStepsExceeded {
                layer,
                confidence,
                max_steps,
            }) => {
                assert_eq!(layer, 1);
                assert_eq!(max_steps, 3);
                assert!(confidence < 0.999);
            }
            other => panic!("expected max-steps error, got {other:?}"),
        }
    }

    #[test]
    fn stack_mismatch_rejected() {
        let model = ToyLm::new(42, 4, 16).unwrap();
        let other = ToyLm::new(43, 4, 16).unwrap();
        let stack = random_stack(other.info(), 5, 0.0);
        assert!(matches!(
            steer(&model, &stack, "x", &SteerConfig::default()),
            Err(SteerError::StackModelMismatch { .. })
        ));
    }

    #[test]
    fn steering_replay_is_deterministic() {
        let model = ToyLm::new(21, 3, 12).unwrap();
        let stack = random_stack(model.info(), 22, -1.0);
        let a = steer(&model, &stack, "replay me", &SteerConfig::default()).unwrap();
        let b = steer(&model, &stack, "replay me", &SteerConfig::default()).unwrap();
        assert_eq!(a, b);
        let (ori, steered) = paired_last_activations(&a);
        assert_eq!(ori.dim(), 12);
        assert_eq!(steered.dim(), 12);
    }

    #[test]
    fn trace_text_dump_shape() {
        let model = ToyLm::new(21, 2, 4).unwrap();
        let stack = random_stack(model.info(), 22, -1.0);
        let trace = steer(&model, &stack, "dump", &SteerConfig::default()).unwrap();
        let text = trace.render_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("layer=1 steps="));
        assert!(lines[1].starts_with("layer=2 steps="));
        assert!(lines[2].starts_with("a_ori="));
        assert!(lines[3].starts_with("a_steer="));
    }
}
