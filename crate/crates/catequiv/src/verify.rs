//! Numerical certification of the architecture's equivariance and invariance
//! guarantees, run against the shipping layers (no re-implementation).
//!
//! The *linearized core* is built from live model weights by keeping only
//! linear operators: Stage-1 and Stage-2 circular convolutions with identity
//! activation and no biases, plus depthwise box smoothing. The ℓ2 reduction,
//! GroupNorm, sensor mean, GAP and the log-RMS bypass are omitted. Channel
//! bookkeeping: the core output stays per sensor *and per axis* — each axis
//! slot carries the concatenation of all branch outputs (`F = Σ_d c2_d`
//! channels), and the feature-side category action is channel-lifted to
//! blocks of `F` (see [`crate::category::apply_morphism_lifted`]).
//!
//! Negative controls (untied axis banks, cross-sensor mixing) are emitted as
//! `negative_control` results whose pass condition is that the violation is
//! *detected*, proving the checks have teeth.

use crate::category::{apply_morphism, apply_morphism_lifted, Morphism, PosetObject};
use crate::error::{Error, Result};
use crate::model::{init_params, predict_descriptor, CatEquivParams, ModelKind, ModelSpec, Params};
use crate::ood::{sample_rotation, Rot3};
use crate::pipeline::{compute_rms, Window};
use crate::rng::Rng;
use crate::synth::make_window;
use crate::tensor::{box_filter_circular, conv1d_circular, group_norm, Tensor};

/// Outcome of one check. For plain checks `pass ⇔ max_abs_deviation ≤
/// tolerance`; for negative controls the sense is flipped: `pass ⇔ deviation
/// > tolerance` (the broken fixture must be caught).
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub negative_control: bool,
    pub pass: bool,
    pub seed: u64,
}

impl CheckResult {
    fn plain(name: &str, trials: usize, dev: Deviation, tol: f64, seed: u64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            trials,
            max_abs_deviation: dev.abs,
            max_rel_deviation: dev.rel,
            tolerance: tol,
            negative_control: false,
            pass: dev.abs <= tol,
            seed,
        }
    }

    fn control(name: &str, trials: usize, dev: Deviation, floor: f64, seed: u64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            trials,
            max_abs_deviation: dev.abs,
            max_rel_deviation: dev.rel,
            tolerance: floor,
            negative_control: true,
            pass: dev.abs > floor,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Deviation {
    abs: f64,
    rel: f64,
}

impl Deviation {
    fn update(&mut self, a: &Tensor, b: &Tensor) {
        let d = a.max_abs_diff(b);
        self.abs = self.abs.max(d);
        self.rel = self.rel.max(d / a.max_abs().max(1.0));
    }

    fn update_scalar(&mut self, got: f64, want: f64) {
        let d = (got - want).abs();
        self.abs = self.abs.max(d);
        self.rel = self.rel.max(d / want.abs().max(1.0));
    }
}

/// The per-axis linearized core: Stage-1 bank, every Stage-2 branch with
/// identity activation, then box smoothing; no biases, no reductions.
/// `[1, T] -> [F, T]` with `F = Σ_d c2_d`.
fn linear_core_axis(spec: &ModelSpec, p: &CatEquivParams, v: &Tensor) -> Result<Tensor> {
    let h1 = conv1d_circular(v, &p.w_ax, 1, 1)?;
    let mut rows: Vec<f64> = Vec::new();
    let t_len = spec.t_len;
    let mut channels = 0;
    for (bi, branch) in spec.branches().iter().enumerate() {
        let h2 = conv1d_circular(&h1, &p.w_branch[bi], 1, branch.dilation)?;
        rows.extend_from_slice(h2.data());
        channels += branch.c2;
    }
    let stacked = Tensor::from_vec(&[channels, t_len], rows)?;
    if spec.variant.smoothing {
        box_filter_circular(&stacked, spec.catequiv.box_k)
    } else {
        Ok(stacked)
    }
}

/// Lifts the per-axis core block-diagonally over the axis slots of `obj`.
fn linear_core(spec: &ModelSpec, p: &CatEquivParams, obj: PosetObject, x: &Tensor) -> Result<Tensor> {
    let (c, t_len) = x.dims2()?;
    if c != obj.channels() {
        return Err(Error::shape("linear_core", format!("{obj:?} carries {} channels, got {c}", obj.channels())));
    }
    let f: usize = spec.branches().iter().map(|b| b.c2).sum();
    let mut out = vec![0.0; c * f * t_len];
    for a in 0..c {
        let row = Tensor::from_vec(&[1, t_len], x.data()[a * t_len..(a + 1) * t_len].to_vec())?;
        let y = linear_core_axis(spec, p, &row)?;
        out[a * f * t_len..(a + 1) * f * t_len].copy_from_slice(y.data());
    }
    Tensor::from_vec(&[c * f, t_len], out)
}

fn catequiv_params<'a>(spec: &ModelSpec, params: &'a Params) -> Result<&'a CatEquivParams> {
    if spec.kind != ModelKind::CatEquiv || !spec.variant.circular || !spec.variant.tie_axes {
        return Err(Error::InvalidArg(
            "verifier checks need a circular, axis-tied CatEquiv instance".into(),
        ));
    }
    match params {
        Params::CatEquiv(p) => Ok(p),
        _ => Err(Error::Checkpoint("parameters do not match the model kind".into())),
    }
}

/// Naturality of the linearized core over every arrow shape of the category:
/// feature-side action after the core equals the core after the data-side
/// action, for random shifts and gains on each of the 23 arrows.
pub fn check_core_naturality(
    spec: &ModelSpec,
    params: &Params,
    trials_per_arrow: usize,
    seed: u64,
) -> Result<CheckResult> {
    let p = catequiv_params(spec, params)?;
    let f: usize = spec.branches().iter().map(|b| b.c2).sum();
    let t_len = spec.t_len;
    let mut rng = Rng::derive(seed, 0xA1);
    let mut dev = Deviation::default();
    let mut trials = 0;
    for (s, t) in PosetObject::arrows() {
        for k in 0..=trials_per_arrow {
            // k = 0 exercises the identity group element on every arrow
            let m = if k == 0 {
                Morphism::new(0, 1.0, 1.0, s, t, t_len)?
            } else {
                Morphism::new(
                    rng.range_inclusive(0, t_len as i64 - 1),
                    rng.uniform_in(0.25, 4.0),
                    rng.uniform_in(0.25, 4.0),
                    s,
                    t,
                    t_len,
                )?
            };
            let x = Tensor::from_fn(&[s.channels(), t_len], |_| rng.gauss());
            let lhs = apply_morphism_lifted(&linear_core(spec, p, s, &x)?, &m, f)?;
            let rhs = linear_core(spec, p, t, &apply_morphism(&x, &m)?)?;
            dev.update(&lhs, &rhs);
            trials += 1;
        }
    }
    Ok(CheckResult::plain("core_naturality", trials, dev, 1e-9, seed))
}

fn zero_pad_block(x: &Tensor, slot: usize, slots: usize) -> Tensor {
    let (c, t_len) = x.dims2().expect("block");
    let mut data = vec![0.0; c * slots * t_len];
    data[slot * c * t_len..(slot + 1) * c * t_len].copy_from_slice(x.data());
    Tensor::from_vec(&[c * slots, t_len], data).expect("zero_pad_block")
}

/// Block-diagonality ⇔ naturality at the sensor injections, in three parts:
/// (a) random block-diagonal maps satisfy the squares, (b) the implemented
/// Stage-2 grouped convolution satisfies them, and (c, negative control) an
/// injected off-diagonal block is detected.
pub fn check_poset_naturality_equivalence(
    spec: &ModelSpec,
    params: &Params,
    seed: u64,
) -> Result<Vec<CheckResult>> {
    let p = catequiv_params(spec, params)?;
    let mut rng = Rng::derive(seed, 0xB2);
    let mut out = Vec::new();

    // (a) random block-diagonal matrices on plain vectors: assemble the full
    // 2r×2n matrix diag(eta_acc, eta_gyr) and compare both square legs
    let (n, r) = (6, 5);
    let mut dev = Deviation::default();
    let mut trials = 0;
    for _ in 0..50 {
        let eta_acc = Tensor::from_fn(&[r, n], |_| rng.gauss());
        let eta_gyr = Tensor::from_fn(&[r, n], |_| rng.gauss());
        let eta_total = assemble_block_diag(&eta_acc, &eta_gyr);
        let x = Tensor::from_fn(&[n], |_| rng.gauss());
        for sensor in 0..2 {
            let eta = if sensor == 0 { &eta_acc } else { &eta_gyr };
            // Y(i_s) eta_s x
            let lhs = pad_vec(&matvec(eta, &x), sensor, 2);
            // eta_total X(i_s) x
            let x_big = Tensor::from_vec(&[2 * n], pad_vec(x.data(), sensor, 2))?;
            let rhs = matvec(&eta_total, &x_big);
            let d = lhs
                .iter()
                .zip(&rhs)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            dev.abs = dev.abs.max(d);
            dev.rel = dev.rel.max(d);
            trials += 1;
        }
    }
    out.push(CheckResult::plain("poset_naturality_blockdiag", trials, dev, 1e-12, seed));

    // (b) the implemented Stage-2 layer: grouped conv is structurally
    // block-diagonal across sensors
    let mut dev = Deviation::default();
    let mut trials = 0;
    let c1 = spec.catequiv.c1;
    for (bi, branch) in spec.branches().iter().enumerate() {
        for _ in 0..5 {
            let x = Tensor::from_fn(&[c1, spec.t_len], |_| rng.gauss());
            for sensor in 0..2 {
                // eta_s: the shared bank on one sensor's channels
                let y_small = conv1d_circular(&x, &p.w_branch[bi], 1, branch.dilation)?;
                let lhs = zero_pad_block(&y_small, sensor, 2);
                // eta_total: the realized grouped conv on the stacked carrier
                let w_full = tile0(&p.w_branch[bi], 2);
                let x_big = zero_pad_block(&x, sensor, 2);
                let rhs = conv1d_circular(&x_big, &w_full, 2, branch.dilation)?;
                dev.update(&lhs, &rhs);
                trials += 1;
            }
        }
    }
    out.push(CheckResult::plain("poset_naturality_stage2", trials, dev, 1e-12, seed));

    // (c) negative control: off-diagonal mixing must break the square. The
    // lower-left block 0.5·I feeds GYR outputs from ACC inputs; on every
    // standard basis vector the square then fails by exactly 0.5.
    let m = 4;
    let eta_d = Tensor::from_fn(&[m, m], |_| rng.gauss());
    let mut eta_total = assemble_block_diag(&eta_d, &eta_d);
    for i in 0..m {
        eta_total.data_mut()[(m + i) * 2 * m + i] = 0.5;
    }
    let mut dev = Deviation::default();
    for basis in 0..m {
        let mut x = vec![0.0; m];
        x[basis] = 1.0;
        let lhs = pad_vec(&matvec(&eta_d, &Tensor::from_vec(&[m], x.clone())?), 0, 2);
        let x_big = Tensor::from_vec(&[2 * m], pad_vec(&x, 0, 2))?;
        let rhs = matvec(&eta_total, &x_big);
        let d = lhs.iter().zip(&rhs).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        dev.abs = dev.abs.max(d);
        dev.rel = dev.rel.max(d);
    }
    out.push(CheckResult::control("poset_naturality_mixing_detected", m, dev, 1e-6, seed));
    Ok(out)
}

/// `diag(a, b)` for two `[r, n]` blocks: a `[2r, 2n]` matrix.
fn assemble_block_diag(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, n) = a.dims2().expect("block a");
    let mut out = Tensor::zeros(&[2 * r, 2 * n]);
    for i in 0..r {
        for j in 0..n {
            out.data_mut()[i * 2 * n + j] = a.data()[i * n + j];
            out.data_mut()[(r + i) * 2 * n + (n + j)] = b.data()[i * n + j];
        }
    }
    out
}

fn matvec(w: &Tensor, x: &Tensor) -> Vec<f64> {
    let (r, c) = w.dims2().expect("matvec");
    (0..r)
        .map(|i| (0..c).map(|j| w.data()[i * c + j] * x.data()[j]).sum())
        .collect()
}

fn pad_vec(x: &[f64], slot: usize, slots: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len() * slots];
    out[slot * x.len()..(slot + 1) * x.len()].copy_from_slice(x);
    out
}

fn tile0(w: &Tensor, copies: usize) -> Tensor {
    let mut shape = w.shape().to_vec();
    shape[0] *= copies;
    let mut data = Vec::with_capacity(w.numel() * copies);
    for _ in 0..copies {
        data.extend_from_slice(w.data());
    }
    Tensor::from_vec(&shape, data).expect("tile0")
}

fn reflect_last_column(r: &Rot3) -> Rot3 {
    let mut out = *r;
    for row in out.iter_mut() {
        row[2] = -row[2];
    }
    out
}

fn verifier_window(spec: &ModelSpec, rng: &mut Rng) -> Window {
    let class = 1 + (rng.below(6) as usize);
    make_window(class, spec.t_len, rng)
}

/// Readout invariance of the eval-mode head descriptor `z`: (i) O(3) —
/// Haar rotations and reflections; (ii) every cyclic shift; (iii) gains move
/// exactly the two log-RMS coordinates, by exactly `log λ`.
pub fn check_readout_invariance(
    spec: &ModelSpec,
    params: &Params,
    trials: usize,
    seed: u64,
) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::derive(seed, 0xC3);
    let d_len = spec.head_dim();
    let mut out = Vec::new();

    // (i) rotations and reflections, plus the identity as a bit-level anchor
    let mut dev = Deviation::default();
    let mut count = 0;
    for _ in 0..trials {
        let w = verifier_window(spec, &mut rng);
        let z0 = predict_descriptor(spec, params, &w)?;
        let ident = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let haar = sample_rotation(&mut rng);
        let rots = [ident, haar, reflect_last_column(&haar)];
        for r in &rots {
            let z1 = predict_descriptor(spec, params, &w.rotated(r))?;
            for (a, b) in z0.iter().zip(&z1) {
                dev.update_scalar(*b, *a);
            }
            count += 1;
        }
    }
    out.push(CheckResult::plain("readout_invariance_rotation", count, dev, 1e-9, seed));

    // (ii) exhaustive cyclic shifts
    let mut dev = Deviation::default();
    let mut count = 0;
    let shift_windows = trials.min(3).max(1);
    for _ in 0..shift_windows {
        let w = verifier_window(spec, &mut rng);
        let z0 = predict_descriptor(spec, params, &w)?;
        let taus: Vec<i64> = (0..spec.t_len as i64).collect();
        let devs = crate::par::try_map_indexed(&taus, |_, &tau| {
            let z1 = predict_descriptor(spec, params, &w.shifted(tau))?;
            Ok(z0
                .iter()
                .zip(&z1)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        })?;
        for d in devs {
            dev.abs = dev.abs.max(d);
            dev.rel = dev.rel.max(d);
        }
        count += taus.len();
    }
    out.push(CheckResult::plain("readout_invariance_shift", count, dev, 1e-9, seed));

    // (iii) gain affinity on the log-RMS coordinates; λ = (e, 1) shifts
    // coordinate D-2 by exactly one
    let mut dev = Deviation::default();
    let mut count = 0;
    for k in 0..trials {
        let w = verifier_window(spec, &mut rng);
        let z0 = predict_descriptor(spec, params, &w)?;
        let (la, lg) = if k == 0 {
            (std::f64::consts::E, 1.0)
        } else {
            (rng.uniform_in(0.25, 4.0), rng.uniform_in(0.25, 4.0))
        };
        let z1 = predict_descriptor(spec, params, &w.scaled(la, lg))?;
        for i in 0..d_len {
            let want = match i {
                i if i == d_len - 2 => z0[i] + la.ln(),
                i if i == d_len - 1 => z0[i] + lg.ln(),
                _ => z0[i],
            };
            dev.update_scalar(z1[i], want);
        }
        count += 1;
    }
    out.push(CheckResult::plain("readout_gain_affine", count, dev, 1e-9, seed));
    Ok(out)
}

/// GroupNorm commutes with cyclic time shifts (per-sample, per-group stats).
pub fn check_gn_shift_commutation(spec: &ModelSpec, trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::derive(seed, 0xD4);
    let c = 2 * spec.catequiv.c1;
    let t_len = spec.t_len;
    let mut dev = Deviation::default();
    let mut count = 0;
    for _ in 0..trials {
        let x = Tensor::from_fn(&[c, t_len], |_| 2.0 * rng.gauss() + 0.3);
        let gamma = Tensor::from_fn(&[c], |_| 0.5 + rng.uniform());
        let beta = Tensor::from_fn(&[c], |_| rng.gauss());
        let mut taus = vec![0i64, 1, t_len as i64 - 1];
        for _ in 0..5 {
            taus.push(rng.range_inclusive(0, t_len as i64 - 1));
        }
        let base = group_norm(&x, &gamma, &beta, 2, 1e-5)?;
        for tau in taus {
            let a = group_norm(&x.shift_time(tau), &gamma, &beta, 2, 1e-5)?;
            let b = base.shift_time(tau);
            dev.update(&a, &b);
            count += 1;
        }
        // constant-in-time input: GN output constant, trivially commutes
        let flat = Tensor::from_fn(&[c, t_len], |i| (i / t_len) as f64 * 0.1);
        let gn_flat = group_norm(&flat, &gamma, &beta, 2, 1e-5)?;
        dev.update(&gn_flat, &gn_flat.shift_time(3));
        count += 1;
    }
    Ok(CheckResult::plain("gn_shift_commutation", count, dev, 1e-12, seed))
}

/// The normalization floor identity: the computed deviation of normalized
/// streams under a gain equals the closed form
/// `|λ/max(ε, λ√R) - 1/max(ε, √R)| · ‖x‖₂`, including floor-active regimes.
pub fn check_norm_floor_equality(spec: &ModelSpec, trials: usize, seed: u64) -> Result<CheckResult> {
    let eps = spec.epsilon;
    let mut rng = Rng::derive(seed, 0xE5);
    let t_len = spec.t_len;
    let mut dev = Deviation::default();
    let mut count = 0;
    // target RMS levels around the floor plus healthy signals
    let levels = [eps * 0.5, eps * 0.9, eps, eps * 2.0, 1e-3, 1.0];
    let lambdas = [0.25, 0.5, 1.0, 2.0, 4.0];
    for _ in 0..trials {
        let raw = Tensor::from_fn(&[3, t_len], |_| rng.gauss());
        let rms = compute_rms(&raw, eps)?.energy.sqrt();
        for &level in &levels {
            let scale = level / rms;
            let x = Tensor::from_vec(&[3, t_len], raw.data().iter().map(|v| v * scale).collect())?;
            let sqrt_r = compute_rms(&x, eps)?.energy.sqrt();
            let norm_x = x.norm2();
            for &lam in &lambdas {
                // computed left side
                let nx = normalize(&x, eps)?;
                let xs = Tensor::from_vec(&[3, t_len], x.data().iter().map(|v| lam * v).collect())?;
                let nxs = normalize(&xs, eps)?;
                let lhs = {
                    let mut s = 0.0;
                    for (a, b) in nxs.data().iter().zip(nx.data()) {
                        s += (a - b) * (a - b);
                    }
                    s.sqrt()
                };
                // closed form right side
                let rhs = (lam / eps.max(lam * sqrt_r) - 1.0 / eps.max(sqrt_r)).abs() * norm_x;
                dev.update_scalar(lhs, rhs);
                if lam == 1.0 {
                    // identity gain: both sides vanish exactly
                    dev.update_scalar(lhs, 0.0);
                }
                count += 1;
            }
        }
    }
    Ok(CheckResult::plain("norm_floor_equality", count, dev, 1e-10, seed))
}

fn normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let rho = compute_rms(x, eps)?.rho;
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| v / rho).collect())
}

/// Negative control: independent per-axis Stage-1 banks must break the O(3)
/// invariance of the readout by a detectable margin.
pub fn check_untied_axes_detected(spec: &ModelSpec, seed: u64) -> Result<CheckResult> {
    let mut untied_spec = spec.clone();
    untied_spec.variant.tie_axes = false;
    let params = init_params(&untied_spec, &mut Rng::derive(seed, 0xF6))?;
    let mut rng = Rng::derive(seed, 0xF7);
    let mut dev = Deviation::default();
    let mut count = 0;
    for _ in 0..3 {
        let w = verifier_window(&untied_spec, &mut rng);
        let z0 = predict_descriptor(&untied_spec, &params, &w)?;
        for _ in 0..2 {
            let r = sample_rotation(&mut rng);
            let z1 = predict_descriptor(&untied_spec, &params, &w.rotated(&r))?;
            for (a, b) in z0.iter().zip(&z1) {
                dev.update_scalar(*b, *a);
            }
            count += 1;
        }
    }
    Ok(CheckResult::control("untied_axes_breaks_rotation_invariance", count, dev, 1e-3, seed))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct VerifySummary {
    pub seed: u64,
    pub all_pass: bool,
    pub results: Vec<CheckResult>,
}

/// Runs every check with the given seed against fresh random parameters of
/// the full-size architecture. Needs no dataset.
pub fn run_all(seed: u64) -> Result<VerifySummary> {
    let spec = ModelSpec::new(ModelKind::CatEquiv);
    let params = init_params(&spec, &mut Rng::derive(seed, 0x90))?;
    run_all_with(&spec, &params, seed)
}

/// Runs every check against the given instance.
pub fn run_all_with(spec: &ModelSpec, params: &Params, seed: u64) -> Result<VerifySummary> {
    let mut results = Vec::new();
    results.push(check_core_naturality(spec, params, 2, seed)?);
    results.extend(check_poset_naturality_equivalence(spec, params, seed)?);
    results.extend(check_readout_invariance(spec, params, 5, seed)?);
    results.push(check_gn_shift_commutation(spec, 20, seed)?);
    results.push(check_norm_floor_equality(spec, 4, seed)?);
    results.push(check_untied_axes_detected(spec, seed)?);
    let all_pass = results.iter().all(|r| r.pass);
    Ok(VerifySummary { seed, all_pass, results })
}

/// Plain-text table for stdout.
pub fn render_table(summary: &VerifySummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("verifier seed {}\n", summary.seed));
    out.push_str(&format!(
        "{:<44} {:>7} {:>13} {:>10} {:>6}\n",
        "check", "trials", "max|dev|", "tol", "pass"
    ));
    for r in &summary.results {
        let name = if r.negative_control {
            format!("{} (control)", r.name)
        } else {
            r.name.clone()
        };
        out.push_str(&format!(
            "{:<44} {:>7} {:>13.3e} {:>10.1e} {:>6}\n",
            name,
            r.trials,
            r.max_abs_deviation,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        ));
    }
    out.push_str(if summary.all_pass { "all checks passed\n" } else { "CHECKS FAILED\n" });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_instance(seed: u64) -> (ModelSpec, Params) {
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let params = init_params(&spec, &mut Rng::seed_from_u64(seed)).unwrap();
        (spec, params)
    }

    #[test]
    fn tiny_instance_passes_all_checks() {
        let (spec, params) = tiny_instance(5);
        let summary = run_all_with(&spec, &params, 123).unwrap();
        for r in &summary.results {
            assert!(r.pass, "{} failed: dev {:.3e} tol {:.1e}", r.name, r.max_abs_deviation, r.tolerance);
        }
        assert!(summary.all_pass);
    }

    #[test]
    fn zero_params_pass_all_checks() {
        let spec = ModelSpec::tiny(ModelKind::CatEquiv);
        let params = Params::zeros(&spec).unwrap();
        let summary = run_all_with(&spec, &params, 7).unwrap();
        for r in &summary.results {
            assert!(r.pass, "{} failed with zero params", r.name);
        }
    }

    #[test]
    fn core_naturality_identity_morphism_is_bit_exact() {
        let (spec, params) = tiny_instance(9);
        let p = match &params {
            Params::CatEquiv(p) => p,
            _ => unreachable!(),
        };
        let mut rng = Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[1, spec.t_len], |_| rng.gauss());
        let m = Morphism::identity(PosetObject::AccX, spec.t_len);
        let f: usize = spec.branches().iter().map(|b| b.c2).sum();
        let lhs =
            apply_morphism_lifted(&linear_core(&spec, p, PosetObject::AccX, &x).unwrap(), &m, f)
                .unwrap();
        let rhs = linear_core(&spec, p, PosetObject::AccX, &apply_morphism(&x, &m).unwrap()).unwrap();
        assert_eq!(lhs.data(), rhs.data());
    }

    #[test]
    fn negative_controls_detect_violations() {
        let (spec, params) = tiny_instance(13);
        let controls = check_untied_axes_detected(&spec, 3).unwrap();
        assert!(controls.negative_control);
        assert!(controls.pass, "untied banks must break rotation invariance, dev {}", controls.max_abs_deviation);
        assert!(controls.max_abs_deviation > 1e-3);

        let poset = check_poset_naturality_equivalence(&spec, &params, 3).unwrap();
        let mixing = poset.iter().find(|r| r.name.contains("mixing")).unwrap();
        assert!(mixing.pass);
        // 0.5-scaled identity off-block violates by at least 0.5 on a basis vector
        assert!(mixing.max_abs_deviation >= 0.5 - 1e-12);
    }

    #[test]
    fn verifier_rejects_unsupported_variants() {
        let mut spec = ModelSpec::tiny(ModelKind::CatEquiv);
        spec.variant.circular = false;
        let params = init_params(&spec, &mut Rng::seed_from_u64(1)).unwrap();
        assert!(check_core_naturality(&spec, &params, 1, 0).is_err());
    }

    #[test]
    fn summary_serializes_and_renders() {
        let (spec, params) = tiny_instance(17);
        let summary = run_all_with(&spec, &params, 99).unwrap();
        let json = serde_json::to_string(&summary).unwrap();
        assert!(json.contains("core_naturality"));
        let table = render_table(&summary);
        assert!(table.contains("all checks passed"));
        assert!(table.contains("(control)"));
    }
}
