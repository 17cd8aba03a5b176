//! Central-difference gradient checking in double precision.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{step_losses, AlphaMode, Model, ModelVars, StepInputs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the reverse-mode gradient of the scalar built by `model_fn`
/// against central differences of step `eps`, element by element.
///
/// `model_fn` receives a fresh graph and the parameters registered in it,
/// in the order given, and returns the scalar loss node. The relative
/// error is `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(mut model_fn: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(alloc::format!("gradcheck eps {eps} outside (0, 1e-2]")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = model_fn(&mut g, &vars)?;
        if !g.item(loss).is_finite() {
            return Err(Error::non_finite("gradcheck loss"));
        }
        g.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| g.grad(*v).map_or_else(|| alloc::vec![0.0; p.len()], <[f64]>::to_vec))
            .collect()
    };

    let mut eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = model_fn(&mut g, &vars)?;
        let v = g.item(loss);
        if !v.is_finite() {
            return Err(Error::non_finite("gradcheck loss"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (analytic[pi][ei] - fd).abs() / fd.abs().max(1.0);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Geometry and objective settings for [`check_full_objective`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub backbone: BackboneConfig,
    pub batch: usize,
    pub classes: usize,
    pub d_txt: usize,
    pub lambda: f64,
    pub adaptive: bool,
    pub smoothing: f64,
    pub seed: u64,
    pub eps: f64,
}

impl Default for ObjectiveCheck {
    fn default() -> Self {
        ObjectiveCheck {
            backbone: BackboneConfig {
                image_size: 8,
                patch_size: 2,
                depth: 2,
                width: 8,
                heads: 2,
                mlp_ratio: 2.0,
                channels: 3,
            },
            batch: 4,
            classes: 3,
            d_txt: 16,
            lambda: 0.5,
            adaptive: true,
            smoothing: 0.1,
            seed: 0,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveCheckReport {
    pub report: GradCheckReport,
    /// The weight held fixed while differencing.
    pub alpha: f64,
    pub loss: f64,
}

/// Gradient check of the complete training objective (backbone, both
/// heads, mixed loss) on random inputs. Parameters are redrawn at a scale
/// where every term contributes; the adaptive weight is computed once at
/// the unperturbed point and then held constant, as in training.
pub fn check_full_objective(spec: &ObjectiveCheck) -> Result<ObjectiveCheckReport> {
    let cfg = &spec.backbone;
    let mut model = Model::<f64>::init(cfg, spec.classes, spec.d_txt, spec.seed)?;
    let mut rng = Rng::derived(spec.seed, 0x6772_6164);
    let names: Vec<bool> = model.named().iter().map(|(n, _)| n.ends_with("gamma")).collect();
    for (t, is_gamma) in model.tensors_mut().into_iter().zip(names) {
        for v in t.data_mut() {
            *v = if is_gamma { 1.0 + 0.2 * rng.normal() } else { 0.3 * rng.normal() };
        }
    }
    let images: Vec<Vec<f64>> = (0..spec.batch)
        .map(|_| (0..cfg.image_len()).map(|_| rng.next_f64()).collect())
        .collect();
    let labels: Vec<usize> = (0..spec.batch).map(|_| rng.below(spec.classes)).collect();
    let targets = Tensor::from_fn(&[spec.batch, spec.d_txt], |_| rng.normal());
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();

    let build = |g: &mut Graph<f64>, vars: &[Var], alpha: AlphaMode| {
        let mv = ModelVars::from_flat(vars, cfg.depth)?;
        step_losses(
            g,
            &mv,
            cfg,
            &StepInputs {
                images: &refs,
                labels: &labels,
                targets: Some(&targets),
                lambda: spec.lambda,
                alpha,
                smoothing: spec.smoothing,
                normalize: false,
            },
        )
    };

    let params: Vec<Tensor<f64>> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let mode = if spec.adaptive { AlphaMode::Adaptive } else { AlphaMode::Fixed(1.0) };
    let base = build(&mut g, &vars, mode)?;
    let alpha = base.alpha;
    let loss = g.item(base.loss);
    let report = grad_check(|g, v| Ok(build(g, v, AlphaMode::Fixed(alpha))?.loss), &params, spec.eps)?;
    Ok(ObjectiveCheckReport { report, alpha, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn three_layer_mlp() {
        let mut rng = Rng::new(11);
        let x = random(&[5, 4], &mut rng);
        let params = [
            random(&[4, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        let report = grad_check(
            |g, p| {
                let xin = g.constant(x.clone());
                let h = g.linear(xin, p[0], Some(p[1]))?;
                let h = g.tanh(h);
                let h = g.linear(h, p[2], Some(p[3]))?;
                let h = g.gelu(h);
                let out = g.linear(h, p[4], Some(p[5]))?;
                g.cross_entropy(out, &[0, 1, 2, 1, 0], 0.1)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 24 + 6 + 36 + 6 + 18 + 3);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        let p = [Tensor::scalar(1.0)];
        assert!(grad_check(|_, v| Ok(v[0]), &p, 0.0).is_err());
        assert!(grad_check(|_, v| Ok(v[0]), &p, 0.1).is_err());
        let nan = [Tensor::scalar(f64::NAN)];
        assert!(grad_check(|_, v| Ok(v[0]), &nan, 1e-5).is_err());
    }

    #[test]
    fn full_objective_small() {
        let out = check_full_objective(&ObjectiveCheck::default()).unwrap();
        assert!(out.report.max_rel_error < 1e-4, "{out:?}");
        assert!(out.alpha > 0.0 && out.loss.is_finite());
        assert!(out.report.checked > 1000);
    }
}
