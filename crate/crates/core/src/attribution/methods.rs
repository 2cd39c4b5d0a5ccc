//! Gradient-based attribution: input x gradient, integrated gradients,
//! gradient SHAP, guided backpropagation, Grad-CAM, and guided Grad-CAM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::Volume;
use crate::models::LogitModel;
use crate::tensor::{normal_draw, trilinear_resize3, BackwardMode, Tape, Tensor};

use super::{AttributionError, AttributionMap, Method, Result};

fn class_seed(n_classes: usize, class: usize) -> Result<Tensor> {
    if class >= n_classes {
        return Err(AttributionError::InvalidClass { class, n_classes });
    }
    let mut seed = vec![0.0f32; n_classes];
    seed[class] = 1.0;
    Ok(Tensor::from_vec(seed))
}

/// Gradient of the class logit with respect to the input, in the
/// requested backward mode.
fn input_gradient<M: LogitModel>(
    model: &M,
    x: &Tensor,
    class: usize,
    mode: BackwardMode,
) -> Result<Vec<f32>> {
    let mut tape = Tape::with_mode(mode);
    let xid = tape.leaf(x.clone());
    let logits = model.build_logits(&mut tape, xid)?;
    let seed = class_seed(tape.value(logits).numel(), class)?;
    tape.backward(logits, seed)?;
    Ok(match tape.grad(xid) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    })
}

fn map_from(x: &Volume, values: Vec<f32>, method: Method, class: usize) -> AttributionMap {
    AttributionMap {
        header: x.header.clone(),
        values,
        method,
        target_class: class,
        subject_id: String::new(),
    }
}

/// Elementwise `x * d(logit_class)/dx`.
pub fn input_x_gradient<M: LogitModel>(
    model: &M,
    x: &Volume,
    class: usize,
) -> Result<AttributionMap> {
    let xt = x.to_tensor();
    let grad = input_gradient(model, &xt, class, BackwardMode::Standard)?;
    let values = grad.iter().zip(&x.voxels).map(|(g, v)| g * v).collect();
    Ok(map_from(x, values, Method::InputXGradient, class))
}

/// Right-Riemann path integral of gradients from `baseline` to `x`,
/// scaled by `(x - baseline)`. Satisfies completeness up to the Riemann
/// discretization error.
pub fn integrated_gradients<M: LogitModel>(
    model: &M,
    x: &Volume,
    class: usize,
    baseline: &Volume,
    steps: usize,
) -> Result<AttributionMap> {
    if steps < 2 {
        return Err(AttributionError::InvalidSteps(steps));
    }
    if baseline.header.dims != x.header.dims {
        return Err(AttributionError::ShapeMismatch(format!(
            "baseline {:?} vs input {:?}",
            baseline.header.dims, x.header.dims
        )));
    }
    let n = x.voxels.len();
    let diff: Vec<f32> = x
        .voxels
        .iter()
        .zip(&baseline.voxels)
        .map(|(a, b)| a - b)
        .collect();
    let mut mean_grad = vec![0.0f64; n];
    let shape = x.to_tensor().shape().to_vec();
    for step in 1..=steps {
        let t = step as f32 / steps as f32;
        let point: Vec<f32> = baseline
            .voxels
            .iter()
            .zip(&diff)
            .map(|(b, d)| b + t * d)
            .collect();
        let pt = Tensor::new(shape.clone(), point)?;
        let grad = input_gradient(model, &pt, class, BackwardMode::Standard)?;
        for (acc, g) in mean_grad.iter_mut().zip(&grad) {
            *acc += *g as f64;
        }
    }
    let values: Vec<f32> = mean_grad
        .iter()
        .zip(&diff)
        .map(|(g, d)| ((g / steps as f64) as f32) * d)
        .collect();
    Ok(map_from(x, values, Method::IntegratedGradients, class))
}

/// Expectation over seeded draws of `x .* grad(u * (x + noise))` with
/// `u ~ U(0,1)` and per-voxel Gaussian noise; zero baseline.
pub fn gradient_shap<M: LogitModel>(
    model: &M,
    x: &Volume,
    class: usize,
    n_samples: usize,
    noise_std: f32,
    seed: u64,
) -> Result<AttributionMap> {
    if n_samples == 0 {
        return Err(AttributionError::Invalid(
            "gradient SHAP needs at least one sample".into(),
        ));
    }
    let n = x.voxels.len();
    let shape = x.to_tensor().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean_grad = vec![0.0f64; n];
    for _ in 0..n_samples {
        let u: f32 = rng.gen_range(0.0..1.0);
        let point: Vec<f32> = x
            .voxels
            .iter()
            .map(|v| {
                let eps = if noise_std > 0.0 {
                    noise_std * normal_draw(&mut rng)
                } else {
                    0.0
                };
                u * (v + eps)
            })
            .collect();
        let pt = Tensor::new(shape.clone(), point)?;
        let grad = input_gradient(model, &pt, class, BackwardMode::Standard)?;
        for (acc, g) in mean_grad.iter_mut().zip(&grad) {
            *acc += *g as f64;
        }
    }
    let values: Vec<f32> = mean_grad
        .iter()
        .zip(&x.voxels)
        .map(|(g, v)| ((g / n_samples as f64) as f32) * v)
        .collect();
    Ok(map_from(x, values, Method::GradientShap, class))
}

/// Input gradient under guided masking (negative gradients zeroed at
/// every ReLU in addition to the forward mask).
pub fn guided_backprop<M: LogitModel>(
    model: &M,
    x: &Volume,
    class: usize,
) -> Result<AttributionMap> {
    let xt = x.to_tensor();
    let values = input_gradient(model, &xt, class, BackwardMode::Guided)?;
    Ok(map_from(x, values, Method::GuidedBackprop, class))
}

/// Grad-CAM at a named conv capture point: channel weights are the
/// spatial means of the logit gradient, the weighted activation sum is
/// ReLU-clamped and trilinearly upsampled to input dims.
pub fn grad_cam<M: LogitModel>(
    model: &M,
    x: &Volume,
    class: usize,
    layer: &str,
) -> Result<AttributionMap> {
    let xt = x.to_tensor();
    let mut tape = Tape::new();
    let xid = tape.leaf(xt);
    let logits = model.build_logits(&mut tape, xid)?;
    let seed = class_seed(tape.value(logits).numel(), class)?;
    tape.backward(logits, seed)?;
    let (act, grad) = tape
        .capture(layer)
        .map_err(|_| AttributionError::Invalid(format!("unknown capture layer `{layer}`")))?;
    let shape = act.shape();
    if shape.len() != 4 {
        return Err(AttributionError::ShapeMismatch(format!(
            "capture layer `{layer}` has shape {shape:?}, expected [C, D, H, W]"
        )));
    }
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let spatial = d * h * w;
    let mut cam = vec![0.0f32; spatial];
    for ch in 0..c {
        let gslice = &grad.data()[ch * spatial..(ch + 1) * spatial];
        let weight: f64 = gslice.iter().map(|&g| g as f64).sum::<f64>() / spatial as f64;
        let aslice = &act.data()[ch * spatial..(ch + 1) * spatial];
        for (o, &a) in cam.iter_mut().zip(aslice) {
            *o += weight as f32 * a;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let values = trilinear_resize3(&cam, [d, h, w], x.header.dims);
    Ok(map_from(x, values, Method::GradCam, class))
}

/// Guided Grad-CAM: the upsampled CAM gating the guided-backprop map.
pub fn guided_grad_cam<M: LogitModel>(
    model: &M,
    x: &Volume,
    class: usize,
    layer: &str,
) -> Result<AttributionMap> {
    let cam = grad_cam(model, x, class, layer)?;
    let gbp = guided_backprop(model, x, class)?;
    let values = cam
        .values
        .iter()
        .zip(&gbp.values)
        .map(|(c, g)| c * g)
        .collect();
    Ok(map_from(x, values, Method::GuidedGradCam, class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::VolumeHeader;
    use crate::models::LinearModel;

    fn vec_volume(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(VolumeHeader::isotropic([1, 1, n]), values).unwrap()
    }

    fn linear(w: Vec<f32>) -> LinearModel {
        let d = w.len();
        LinearModel::new(
            Tensor::new(vec![2, d], w.iter().chain(w.iter()).map(|v| *v).collect()).unwrap(),
            Tensor::from_vec(vec![0.0, 0.0]),
        )
    }

    #[test]
    fn input_x_gradient_on_linear_model_is_w_times_x() {
        let w = vec![0.5f32, -1.0, 2.0, 0.25];
        let x = vec_volume(vec![1.0, 2.0, -0.5, 4.0]);
        let map = input_x_gradient(&linear(w.clone()), &x, 0).unwrap();
        for ((m, wi), xi) in map.values.iter().zip(&w).zip(&x.voxels) {
            assert!((m - wi * xi).abs() < 1e-6);
        }
        // Zero input gives the zero map.
        let zero = vec_volume(vec![0.0; 4]);
        let map0 = input_x_gradient(&linear(w), &zero, 0).unwrap();
        assert!(map0.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_input_quadruples_input_x_gradient_on_linear_model() {
        let w = vec![1.0f32, -0.5, 0.75];
        let x = vec_volume(vec![2.0, 1.0, -1.0]);
        let x2 = vec_volume(vec![4.0, 2.0, -2.0]);
        let m1 = input_x_gradient(&linear(w.clone()), &x, 0).unwrap();
        let m2 = input_x_gradient(&linear(w), &x2, 0).unwrap();
        for (a, b) in m1.values.iter().zip(&m2.values) {
            assert!((b - 4.0 * a).abs() < 1e-5);
        }
    }

    #[test]
    fn integrated_gradients_is_exact_for_linear_models() {
        let w = vec![0.3f32, -0.7, 1.1, 0.0];
        let x = vec_volume(vec![1.0, -2.0, 0.5, 3.0]);
        let baseline = vec_volume(vec![0.0; 4]);
        for steps in [2, 7, 64] {
            let map =
                integrated_gradients(&linear(w.clone()), &x, 0, &baseline, steps).unwrap();
            for ((m, wi), xi) in map.values.iter().zip(&w).zip(&x.voxels) {
                assert!((m - wi * xi).abs() < 1e-5, "steps {steps}");
            }
        }
        // x == baseline gives a zero map.
        let map = integrated_gradients(&linear(w), &baseline, 0, &baseline, 8).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integrated_gradients_rejects_single_step() {
        let w = vec![1.0f32, 1.0];
        let x = vec_volume(vec![1.0, 1.0]);
        let b = vec_volume(vec![0.0, 0.0]);
        assert!(matches!(
            integrated_gradients(&linear(w), &x, 0, &b, 1),
            Err(AttributionError::InvalidSteps(1))
        ));
    }

    #[test]
    fn gradient_shap_noise_zero_matches_linear_closed_form_and_is_deterministic() {
        let w = vec![0.8f32, -0.2, 0.4];
        let x = vec_volume(vec![1.5, 2.0, -1.0]);
        let m1 = gradient_shap(&linear(w.clone()), &x, 0, 5, 0.0, 7).unwrap();
        for ((m, wi), xi) in m1.values.iter().zip(&w).zip(&x.voxels) {
            assert!((m - wi * xi).abs() < 1e-5);
        }
        let m2 = gradient_shap(&linear(w), &x, 0, 5, 0.0, 7).unwrap();
        assert_eq!(m1.values, m2.values);
    }

    #[test]
    fn guided_backprop_on_relu_free_model_equals_plain_gradient() {
        let w = vec![0.5f32, -3.0, 1.0];
        let x = vec_volume(vec![1.0, 1.0, 1.0]);
        let map = guided_backprop(&linear(w.clone()), &x, 0).unwrap();
        for (m, wi) in map.values.iter().zip(&w) {
            assert!((m - wi).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_class_is_rejected() {
        let w = vec![1.0f32, 1.0];
        let x = vec_volume(vec![1.0, 1.0]);
        assert!(matches!(
            input_x_gradient(&linear(w), &x, 5),
            Err(AttributionError::InvalidClass { .. })
        ));
    }
}
