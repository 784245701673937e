//! Forward passes.
//!
//! CatEquiv pipeline order: depthwise circular conv on the six axis rows (no
//! bias, no nonlinearity before the axis reduction) → per-sensor ℓ2 across
//! {x,y,z} then ReLU → GroupNorm(groups=2) → parallel sensor-shared dilated
//! circular convs with ReLU → mean over sensors → depthwise box smoothing →
//! GAP over time → concat with the time-averaged log-RMS pair → dropout
//! (train only) → affine head. The log-RMS rows bypass the convolutional
//! stack entirely.
//!
//! Baselines: two same-width convolutions (circular or zero padded) with
//! ReLU, GAP over time, dropout on the pooled descriptor, linear head.

use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec, Params};
use crate::pipeline::{gain_process, Window};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Handles to the two tensors downstream code cares about: the head
/// descriptor `z` (pre-dropout) and the logits.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub descriptor: Var,
    pub logits: Var,
}

/// Parameter leaves on a tape, in the same order as [`Params::named`]. The
/// trainer reads gradients back through this ordering.
#[derive(Debug, Clone)]
pub struct ParamVars {
    ordered: Vec<Var>,
}

impl ParamVars {
    /// Registers every parameter tensor as a trainable leaf.
    pub fn register(tape: &mut Tape, params: &Params) -> ParamVars {
        let ordered = params
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect();
        ParamVars { ordered }
    }

    /// Adopts pre-existing leaves (gradient checking owns its own).
    /// Order must match [`Params::named`].
    pub fn from_ordered(vars: &[Var]) -> ParamVars {
        ParamVars { ordered: vars.to_vec() }
    }

    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }

    fn get(&self, i: usize) -> Var {
        self.ordered[i]
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::InvalidArg(format!("{name}: {e}")))
}

/// Runs one window through the model, registering parameters as fresh leaves.
pub fn forward_window(
    spec: &ModelSpec,
    params: &Params,
    tape: &mut Tape,
    window: &Window,
    train: bool,
    rng: &mut Rng,
) -> Result<ForwardVars> {
    match (spec.kind, params) {
        (ModelKind::CatEquiv, Params::CatEquiv(_))
        | (ModelKind::CircCnn | ModelKind::PlainCnn, Params::Cnn(_)) => {}
        _ => return Err(Error::Checkpoint("parameters do not match the model kind".into())),
    }
    let pv = ParamVars::register(tape, params);
    forward_with_vars(spec, &pv, tape, window, train, rng)
}

/// Runs one window against parameter leaves the caller already placed on the
/// tape (in [`Params::named`] order).
pub fn forward_with_vars(
    spec: &ModelSpec,
    pv: &ParamVars,
    tape: &mut Tape,
    window: &Window,
    train: bool,
    rng: &mut Rng,
) -> Result<ForwardVars> {
    if window.t_len() != spec.t_len {
        return Err(Error::shape(
            "forward input",
            format!("window length {} but model expects {}", window.t_len(), spec.t_len),
        ));
    }
    match spec.kind {
        ModelKind::CatEquiv => forward_catequiv(spec, pv, tape, window, train, rng),
        ModelKind::CircCnn | ModelKind::PlainCnn => forward_baseline(spec, pv, tape, window, train, rng),
    }
}

fn conv_any(
    tape: &mut Tape,
    circular: bool,
    x: Var,
    w: Var,
    groups: usize,
    dilation: usize,
) -> Result<Var> {
    if circular {
        tape.conv1d_circular(x, w, groups, dilation)
    } else {
        tape.conv1d_zeropad(x, w, groups, dilation)
    }
}

fn forward_catequiv(
    spec: &ModelSpec,
    pv: &ParamVars,
    tape: &mut Tape,
    window: &Window,
    train: bool,
    rng: &mut Rng,
) -> Result<ForwardVars> {
    let v = &spec.variant;
    let t_len = spec.t_len;
    let n_branches = spec.branches().len();
    // leaf order: w_ax, w_branch_*, b_branch_*, [gn_gamma, gn_beta], w_head, b_head
    let w_ax = pv.get(0);
    let w_branch = |i: usize| pv.get(1 + i);
    let b_branch = |i: usize| pv.get(1 + n_branches + i);
    let gn_base = 1 + 2 * n_branches;
    let (gn, head_base) = if v.group_norm {
        (Some((pv.get(gn_base), pv.get(gn_base + 1))), gn_base + 2)
    } else {
        (None, gn_base)
    };
    let w_head = pv.get(head_base);
    let b_head = pv.get(head_base + 1);

    // Input: normalized axes plus constant log-RMS rows, or raw axes when
    // the gain-processing ablation is active.
    let (axes, log_rows) = if v.rms_log {
        let pi = stage("gain_process", gain_process(window, spec.epsilon))?;
        let mut log_data = Vec::with_capacity(2 * t_len);
        log_data.extend(std::iter::repeat(pi.log_rms.0).take(t_len));
        log_data.extend(std::iter::repeat(pi.log_rms.1).take(t_len));
        (pi.axes, Some(Tensor::from_vec(&[2, t_len], log_data)?))
    } else {
        (window.axes(), None)
    };

    let x = tape.constant(axes);
    let w_ax_full = if v.tie_axes { tape.tile_channels(w_ax, 6) } else { w_ax };
    let h1 = stage("stage1_conv", conv_any(tape, v.circular, x, w_ax_full, 6, 1))?;

    let reduced = if v.l2_pool {
        stage("axis_l2", tape.l2_over_axes(h1, 2, 3))?
    } else {
        stage("axis_mean", tape.mean_axes(h1, 2, 3))?
    };
    let activated = tape.relu(reduced);

    let normed = match gn {
        Some((gamma, beta)) => stage("group_norm", tape.group_norm(activated, gamma, beta, 2, 1e-5))?,
        None => activated,
    };

    let mut head_parts = Vec::new();
    for (bi, branch) in spec.branches().iter().enumerate() {
        let wt = tape.tile_channels(w_branch(bi), 2);
        let conv = stage("stage2_conv", conv_any(tape, v.circular, normed, wt, 2, branch.dilation))?;
        let bt = tape.tile_channels(b_branch(bi), 2);
        let biased = stage("stage2_bias", tape.add_bias(conv, bt))?;
        let h2 = tape.relu(biased);
        let fused = stage("sensor_mean", tape.mean_sensors(h2, 2))?;
        let smoothed = if v.smoothing {
            if v.circular {
                stage("smoothing", tape.box_filter(fused, spec.catequiv.box_k))?
            } else {
                // zero-padding ablation applies to the box filter too
                let kern = tape.constant(crate::tensor::box_kernel(branch.c2, spec.catequiv.box_k));
                stage("smoothing", tape.conv1d_zeropad(fused, kern, branch.c2, 1))?
            }
        } else {
            fused
        };
        head_parts.push(stage("gap", tape.gap_time(smoothed))?);
    }

    if let Some(rows) = log_rows {
        let lr = tape.constant(rows);
        head_parts.push(stage("gap_log", tape.gap_time(lr))?);
    }

    let descriptor = stage("head_concat", tape.concat(&head_parts))?;
    let dropped = tape.dropout(descriptor, spec.dropout_p, train, rng);
    let logits = stage("head_affine", tape.affine(w_head, dropped, b_head))?;
    Ok(ForwardVars { descriptor, logits })
}

fn forward_baseline(
    spec: &ModelSpec,
    pv: &ParamVars,
    tape: &mut Tape,
    window: &Window,
    train: bool,
    rng: &mut Rng,
) -> Result<ForwardVars> {
    let circular = matches!(spec.kind, ModelKind::CircCnn);
    // leaf order: w1, b1, w2, b2, w_head, b_head
    let (w1, b1, w2, b2, w_head, b_head) =
        (pv.get(0), pv.get(1), pv.get(2), pv.get(3), pv.get(4), pv.get(5));
    let input = if spec.raw_input {
        window.axes()
    } else {
        stage("gain_process", gain_process(window, spec.epsilon))?.assembled
    };
    let x = tape.constant(input);
    let c1 = stage("conv1", conv_any(tape, circular, x, w1, 1, 1))?;
    let c1b = stage("conv1_bias", tape.add_bias(c1, b1))?;
    let h1 = tape.relu(c1b);
    let c2 = stage("conv2", conv_any(tape, circular, h1, w2, 1, 1))?;
    let c2b = stage("conv2_bias", tape.add_bias(c2, b2))?;
    let h2 = tape.relu(c2b);
    let descriptor = stage("gap", tape.gap_time(h2))?;
    let dropped = tape.dropout(descriptor, spec.dropout_p, train, rng);
    let logits = stage("head_affine", tape.affine(w_head, dropped, b_head))?;
    Ok(ForwardVars { descriptor, logits })
}

/// Eval-mode logits for one window.
pub fn predict_logits(spec: &ModelSpec, params: &Params, window: &Window) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut rng = Rng::seed_from_u64(0); // unused in eval mode
    let out = forward_window(spec, params, &mut tape, window, false, &mut rng)?;
    Ok(tape.value(out.logits).data().to_vec())
}

/// Eval-mode head descriptor `z` for one window (pre-dropout, pre-head).
pub fn predict_descriptor(spec: &ModelSpec, params: &Params, window: &Window) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut rng = Rng::seed_from_u64(0);
    let out = forward_window(spec, params, &mut tape, window, false, &mut rng)?;
    Ok(tape.value(out.descriptor).data().to_vec())
}

/// Eval-mode prediction: (logits, argmax class index, 0-based).
pub fn predict(spec: &ModelSpec, params: &Params, window: &Window) -> Result<(Vec<f64>, usize)> {
    let logits = predict_logits(spec, params, window)?;
    let pred = argmax(&logits);
    Ok((logits, pred))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::synth::make_window;
    use crate::tape::{grad_check_params, FD_STEP};

    fn rot_z(theta: f64) -> [[f64; 3]; 3] {
        let (s, c) = theta.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    fn rot_x(theta: f64) -> [[f64; 3]; 3] {
        let (s, c) = theta.sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }

    fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn tiny_window(spec: &ModelSpec, seed: u64) -> Window {
        let mut rng = Rng::seed_from_u64(seed);
        make_window(1 + (seed % 6) as usize, spec.t_len, &mut rng)
    }

    #[test]
    fn zero_params_give_bias_logits() {
        for kind in [ModelKind::CatEquiv, ModelKind::CircCnn, ModelKind::PlainCnn] {
            let spec = ModelSpec::tiny(kind);
            let mut params = Params::zeros(&spec).unwrap();
            let bias = vec![0.5, -1.0, 0.0, 2.0, -0.5, 1.5];
            for (name, t) in params.named_mut() {
                if name == "b_head" {
                    t.data_mut().copy_from_slice(&bias);
                }
            }
            let w = tiny_window(&spec, 3);
            let logits = predict_logits(&spec, &params, &w).unwrap();
            for (got, want) in logits.iter().zip(&bias) {
                assert!((got - want).abs() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn catequiv_is_rotation_invariant_in_eval_mode() {
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let params = init_params(&spec, &mut Rng::seed_from_u64(7)).unwrap();
        let w = tiny_window(&spec, 1);
        let base = predict_logits(&spec, &params, &w).unwrap();
        let r = matmul3(&rot_z(0.7), &rot_x(1.1));
        let rotated = predict_logits(&spec, &params, &w.rotated(&r)).unwrap();
        for (a, b) in base.iter().zip(&rotated) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn catequiv_is_shift_invariant_in_eval_mode() {
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let params = init_params(&spec, &mut Rng::seed_from_u64(8)).unwrap();
        let w = tiny_window(&spec, 2);
        let base = predict_logits(&spec, &params, &w).unwrap();
        for tau in [1i64, 5, 11] {
            let shifted = predict_logits(&spec, &params, &w.shifted(tau)).unwrap();
            for (a, b) in base.iter().zip(&shifted) {
                assert!((a - b).abs() < 1e-9, "tau {tau}");
            }
        }
    }

    #[test]
    fn circcnn_shift_invariant_plaincnn_not() {
        let circ = ModelSpec::tiny(ModelKind::CircCnn);
        let plain = ModelSpec::tiny(ModelKind::PlainCnn);
        let pc = init_params(&circ, &mut Rng::seed_from_u64(9)).unwrap();
        let pp = init_params(&plain, &mut Rng::seed_from_u64(9)).unwrap();
        let w = tiny_window(&circ, 4);
        let tau = 5;
        let c0 = predict_logits(&circ, &pc, &w).unwrap();
        let c1 = predict_logits(&circ, &pc, &w.shifted(tau)).unwrap();
        let max_c: f64 = c0.iter().zip(&c1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_c < 1e-9, "circ deviation {max_c}");
        let p0 = predict_logits(&plain, &pp, &w).unwrap();
        let p1 = predict_logits(&plain, &pp, &w.shifted(tau)).unwrap();
        let max_p: f64 = p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_p > 1e-6, "plain deviation {max_p}");
    }

    #[test]
    fn gain_shift_moves_logits_through_log_coordinates_only() {
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let params = init_params(&spec, &mut Rng::seed_from_u64(10)).unwrap();
        let w = tiny_window(&spec, 5);
        let (la, lg) = (1.9, 0.6);
        let base = predict_logits(&spec, &params, &w).unwrap();
        let scaled = predict_logits(&spec, &params, &w.scaled(la, lg)).unwrap();
        let p = match &params {
            Params::CatEquiv(p) => p,
            _ => unreachable!(),
        };
        let d = spec.head_dim();
        for k in 0..spec.n_classes {
            let expected = p.w_head.data()[k * d + d - 2] * la.ln()
                + p.w_head.data()[k * d + d - 1] * lg.ln();
            let got = scaled[k] - base[k];
            assert!((got - expected).abs() < 1e-9, "class {k}: {got} vs {expected}");
        }
    }

    #[test]
    fn box_filter_commutes_with_sensor_mean() {
        let mut rng = Rng::seed_from_u64(11);
        let h = Tensor::from_fn(&[6, 20], |_| rng.gauss()); // 2 sensors x 3 channels
        let k = 5;
        let mean_of = |x: &Tensor| {
            let mut m = vec![0.0; 3 * 20];
            for c in 0..3 {
                for t in 0..20 {
                    m[c * 20 + t] = 0.5 * (x.at2(c, t) + x.at2(c + 3, t));
                }
            }
            Tensor::from_vec(&[3, 20], m).unwrap()
        };
        let mean_then_box = crate::tensor::box_filter_circular(&mean_of(&h), k).unwrap();
        let box_then_mean = mean_of(&crate::tensor::box_filter_circular(&h, k).unwrap());
        assert!(mean_then_box.max_abs_diff(&box_then_mean) < 1e-12);
    }

    #[test]
    fn full_tiny_model_grad_check() {
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let template = init_params(&spec, &mut Rng::seed_from_u64(12)).unwrap();
        let window = tiny_window(&spec, 6);
        let tensors: Vec<Tensor> = template.named().iter().map(|(_, t)| (*t).clone()).collect();
        let label = window.label - 1;
        let err = grad_check_params(
            |tape, vars| {
                let pv = ParamVars::from_ordered(vars);
                let mut rng = Rng::seed_from_u64(0);
                let out = forward_with_vars(&spec, &pv, tape, &window, false, &mut rng)?;
                tape.weighted_cross_entropy(out.logits, label, 1.3)
            },
            &tensors,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "full model grad check err {err}");
    }

    #[test]
    fn baseline_grad_check() {
        let spec = ModelSpec::tiny(ModelKind::PlainCnn);
        let template = init_params(&spec, &mut Rng::seed_from_u64(13)).unwrap();
        let window = tiny_window(&spec, 7);
        let tensors: Vec<Tensor> = template.named().iter().map(|(_, t)| (*t).clone()).collect();
        let err = grad_check_params(
            |tape, vars| {
                let pv = ParamVars::from_ordered(vars);
                let mut rng = Rng::seed_from_u64(0);
                let out = forward_with_vars(&spec, &pv, tape, &window, false, &mut rng)?;
                tape.weighted_cross_entropy(out.logits, 2, 0.8)
            },
            &tensors,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "baseline grad check err {err}");
    }

    #[test]
    fn mismatched_params_rejected() {
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let wrong = init_params(&ModelSpec::tiny(ModelKind::PlainCnn), &mut Rng::seed_from_u64(1)).unwrap();
        let w = tiny_window(&spec, 8);
        assert!(predict_logits(&spec, &wrong, &w).is_err());
    }
}
