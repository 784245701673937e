//! Model architectures: the category-equivariant network and the two CNN
//! baselines, with explicit parameter tying.
//!
//! Tying is by construction: one stored kernel bank per stage, materialized
//! into the realized depthwise/grouped weight with [`Tape::tile_channels`]
//! so gradients sum back over the copies. The axis bank is shared by all six
//! axis channels, each Stage-2 branch bank by both sensors.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    forward_window, forward_with_vars, predict, predict_descriptor, predict_logits, ForwardVars,
    ParamVars,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CatEquiv,
    CircCnn,
    PlainCnn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "catequiv" => Ok(ModelKind::CatEquiv),
            "circcnn" => Ok(ModelKind::CircCnn),
            "plaincnn" => Ok(ModelKind::PlainCnn),
            other => Err(Error::InvalidArg(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CatEquiv => "catequiv",
            ModelKind::CircCnn => "circcnn",
            ModelKind::PlainCnn => "plaincnn",
        }
    }
}

/// Architecture switches; the full model has everything on. Each ablation
/// turns exactly one off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VariantSwitches {
    /// Circular padding in every temporal operator (false: zero padding).
    pub circular: bool,
    /// RMS normalization + log-RMS side channels (false: raw 6-channel input).
    pub rms_log: bool,
    /// One axis bank shared by all six axis channels (false: independent banks).
    pub tie_axes: bool,
    /// ℓ2 reduction over axes (false: plain mean over axes).
    pub l2_pool: bool,
    /// Three dilated branches (false: one undilated branch of the same width).
    pub multi_scale: bool,
    pub group_norm: bool,
    /// Depthwise temporal box smoothing before GAP.
    pub smoothing: bool,
}

impl Default for VariantSwitches {
    fn default() -> Self {
        VariantSwitches {
            circular: true,
            rms_log: true,
            tie_axes: true,
            l2_pool: true,
            multi_scale: true,
            group_norm: true,
            smoothing: true,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CatEquivHyper {
    /// Stage-1 channels per axis.
    pub c1: usize,
    /// Stage-2 branch widths.
    pub c2: [usize; 3],
    pub kappa1: usize,
    pub kappa2: [usize; 3],
    pub dilations: [usize; 3],
    /// Box smoothing length.
    pub box_k: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BaselineHyper {
    /// Channel width of both conv layers. 64 keeps the two-layer baselines
    /// within ±25% of the CatEquiv parameter count.
    pub width: usize,
    pub kappa: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub t_len: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    /// RMS floor of the input pipeline.
    pub epsilon: f64,
    /// Baselines read the 8-channel gain-processed input by default; this
    /// switches them to the raw 6 channels.
    pub raw_input: bool,
    pub catequiv: CatEquivHyper,
    pub baseline: BaselineHyper,
    pub variant: VariantSwitches,
}

/// One resolved Stage-2 branch.
#[derive(Debug, Clone, Copy)]
pub struct Branch {
    pub c2: usize,
    pub kappa: usize,
    pub dilation: usize,
}

impl ModelSpec {
    /// Paper-scale configuration.
    pub fn new(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            t_len: 128,
            n_classes: 6,
            dropout_p: 0.15,
            epsilon: crate::pipeline::DEFAULT_EPSILON,
            raw_input: false,
            catequiv: CatEquivHyper {
                c1: 32,
                c2: [64, 32, 32],
                kappa1: 9,
                kappa2: [9, 11, 15],
                dilations: [1, 2, 3],
                box_k: 5,
            },
            baseline: BaselineHyper { width: 64, kappa: 9 },
            variant: VariantSwitches::default(),
        }
    }

    /// Small configuration for gradient checks and fast tests.
    pub fn tiny(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            t_len: 16,
            n_classes: 6,
            dropout_p: 0.15,
            epsilon: crate::pipeline::DEFAULT_EPSILON,
            raw_input: false,
            catequiv: CatEquivHyper {
                c1: 2,
                c2: [2, 2, 2],
                kappa1: 3,
                kappa2: [3, 3, 3],
                dilations: [1, 2, 3],
                box_k: 3,
            },
            baseline: BaselineHyper { width: 4, kappa: 3 },
            variant: VariantSwitches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if self.t_len == 0 || self.n_classes == 0 {
            return Err(Error::InvalidArg("t_len and n_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArg(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArg("epsilon must be positive".into()));
        }
        let mut kernels: Vec<(usize, usize)> = vec![(self.catequiv.kappa1, 1), (self.catequiv.box_k, 1)];
        for b in self.branches() {
            kernels.push((b.kappa, b.dilation));
        }
        kernels.push((self.baseline.kappa, 1));
        for (k, d) in kernels {
            if !odd(k) {
                return Err(Error::InvalidArg(format!("kernel length {k} must be odd")));
            }
            if d == 0 || d * (k - 1) >= self.t_len {
                return Err(Error::InvalidArg(format!(
                    "dilation {d} with kernel {k} exceeds window length {}",
                    self.t_len
                )));
            }
        }
        Ok(())
    }

    /// Stage-2 branches after applying the multi-scale switch: the
    /// single-scale ablation folds all channels into one undilated branch so
    /// the head width is unchanged.
    pub fn branches(&self) -> Vec<Branch> {
        let h = &self.catequiv;
        if self.variant.multi_scale {
            (0..3)
                .map(|d| Branch { c2: h.c2[d], kappa: h.kappa2[d], dilation: h.dilations[d] })
                .collect()
        } else {
            vec![Branch { c2: h.c2.iter().sum(), kappa: h.kappa2[0], dilation: 1 }]
        }
    }

    /// Channels entering the first convolution.
    pub fn conv_input_channels(&self) -> usize {
        match self.kind {
            ModelKind::CatEquiv => 6,
            _ => {
                if self.raw_input {
                    6
                } else {
                    8
                }
            }
        }
    }

    /// Head descriptor width.
    pub fn head_dim(&self) -> usize {
        match self.kind {
            ModelKind::CatEquiv => {
                let conv: usize = self.branches().iter().map(|b| b.c2).sum();
                conv + if self.variant.rms_log { 2 } else { 0 }
            }
            _ => self.baseline.width,
        }
    }

    /// Closed-form parameter count; tied banks are counted once.
    ///
    /// CatEquiv: `c1·κ1` for the shared axis bank (`6·c1·κ1` untied), plus
    /// `Σ_d (c2_d·c1·κ2_d + c2_d)` for the sensor-shared branches, `4·c1` for
    /// GroupNorm affine, and `K·D + K` for the head. Baselines:
    /// `w·c_in·κ + w + w²·κ + w + K·w + K`.
    pub fn param_count(&self) -> usize {
        let k = self.n_classes;
        let d = self.head_dim();
        match self.kind {
            ModelKind::CatEquiv => {
                let h = &self.catequiv;
                let ax = if self.variant.tie_axes { h.c1 * h.kappa1 } else { 6 * h.c1 * h.kappa1 };
                let stage2: usize =
                    self.branches().iter().map(|b| b.c2 * h.c1 * b.kappa + b.c2).sum();
                let gn = if self.variant.group_norm { 4 * h.c1 } else { 0 };
                ax + stage2 + gn + k * d + k
            }
            _ => {
                let w = self.baseline.width;
                let cin = self.conv_input_channels();
                let kp = self.baseline.kappa;
                w * cin * kp + w + w * w * kp + w + k * w + k
            }
        }
    }
}

/// Parameters of the category-equivariant model. Banks are stored once;
/// the realized weights are materialized per forward pass.
#[derive(Debug, Clone)]
pub struct CatEquivParams {
    /// `[c1, 1, κ1]` shared across axes, or `[6·c1, 1, κ1]` untied.
    pub w_ax: Tensor,
    /// Per branch: `[c2, c1, κ2]`, shared across sensors.
    pub w_branch: Vec<Tensor>,
    /// Per branch: `[c2]`, shared across sensors.
    pub b_branch: Vec<Tensor>,
    /// GroupNorm gain and shift over the `2·c1` sensor-stacked channels.
    pub gn: Option<(Tensor, Tensor)>,
    /// `[K, D]`.
    pub w_head: Tensor,
    /// `[K]`.
    pub b_head: Tensor,
}

/// Parameters of the two-layer CNN baselines.
#[derive(Debug, Clone)]
pub struct CnnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w_head: Tensor,
    pub b_head: Tensor,
}

#[derive(Debug, Clone)]
pub enum Params {
    CatEquiv(CatEquivParams),
    Cnn(CnnParams),
}

impl Params {
    /// Named views in a fixed order; the optimizer, checkpoints and gradient
    /// accumulation all rely on this ordering being stable.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            Params::CatEquiv(p) => {
                let mut out = vec![("w_ax".to_string(), &p.w_ax)];
                for (i, w) in p.w_branch.iter().enumerate() {
                    out.push((format!("w_branch_{i}"), w));
                }
                for (i, b) in p.b_branch.iter().enumerate() {
                    out.push((format!("b_branch_{i}"), b));
                }
                if let Some((g, b)) = &p.gn {
                    out.push(("gn_gamma".to_string(), g));
                    out.push(("gn_beta".to_string(), b));
                }
                out.push(("w_head".to_string(), &p.w_head));
                out.push(("b_head".to_string(), &p.b_head));
                out
            }
            Params::Cnn(p) => vec![
                ("w1".to_string(), &p.w1),
                ("b1".to_string(), &p.b1),
                ("w2".to_string(), &p.w2),
                ("b2".to_string(), &p.b2),
                ("w_head".to_string(), &p.w_head),
                ("b_head".to_string(), &p.b_head),
            ],
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Params::CatEquiv(p) => {
                let mut out = vec![("w_ax".to_string(), &mut p.w_ax)];
                for (i, w) in p.w_branch.iter_mut().enumerate() {
                    out.push((format!("w_branch_{i}"), w));
                }
                for (i, b) in p.b_branch.iter_mut().enumerate() {
                    out.push((format!("b_branch_{i}"), b));
                }
                if let Some((g, b)) = &mut p.gn {
                    out.push(("gn_gamma".to_string(), g));
                    out.push(("gn_beta".to_string(), b));
                }
                out.push(("w_head".to_string(), &mut p.w_head));
                out.push(("b_head".to_string(), &mut p.b_head));
                out
            }
            Params::Cnn(p) => vec![
                ("w1".to_string(), &mut p.w1),
                ("b1".to_string(), &mut p.b1),
                ("w2".to_string(), &mut p.w2),
                ("b2".to_string(), &mut p.b2),
                ("w_head".to_string(), &mut p.w_head),
                ("b_head".to_string(), &mut p.b_head),
            ],
        }
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All-zero parameters of the right shapes (degenerate but valid; with
    /// zero weights the logits equal the head bias).
    pub fn zeros(spec: &ModelSpec) -> Result<Params> {
        let mut p = init_params(spec, &mut Rng::seed_from_u64(0))?;
        for (_, t) in p.named_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }
}

fn gauss_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.gauss())
}

/// Fresh parameters for `spec`. Conv banks use fan-in scaled Gaussians, the
/// GroupNorm affine starts at identity, biases at zero.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> Result<Params> {
    spec.validate()?;
    let k = spec.n_classes;
    let d = spec.head_dim();
    match spec.kind {
        ModelKind::CatEquiv => {
            let h = &spec.catequiv;
            let ax_rows = if spec.variant.tie_axes { h.c1 } else { 6 * h.c1 };
            let w_ax = gauss_tensor(&[ax_rows, 1, h.kappa1], (1.0 / h.kappa1 as f64).sqrt(), rng);
            let mut w_branch = Vec::new();
            let mut b_branch = Vec::new();
            for b in spec.branches() {
                let fan_in = (h.c1 * b.kappa) as f64;
                w_branch.push(gauss_tensor(&[b.c2, h.c1, b.kappa], (2.0 / fan_in).sqrt(), rng));
                b_branch.push(Tensor::zeros(&[b.c2]));
            }
            let gn = if spec.variant.group_norm {
                Some((Tensor::filled(&[2 * h.c1], 1.0), Tensor::zeros(&[2 * h.c1])))
            } else {
                None
            };
            let w_head = gauss_tensor(&[k, d], (1.0 / d as f64).sqrt(), rng);
            let b_head = Tensor::zeros(&[k]);
            Ok(Params::CatEquiv(CatEquivParams { w_ax, w_branch, b_branch, gn, w_head, b_head }))
        }
        _ => {
            let w = spec.baseline.width;
            let cin = spec.conv_input_channels();
            let kp = spec.baseline.kappa;
            Ok(Params::Cnn(CnnParams {
                w1: gauss_tensor(&[w, cin, kp], (2.0 / (cin * kp) as f64).sqrt(), rng),
                b1: Tensor::zeros(&[w]),
                w2: gauss_tensor(&[w, w, kp], (2.0 / (w * kp) as f64).sqrt(), rng),
                b2: Tensor::zeros(&[w]),
                w_head: gauss_tensor(&[k, w], (1.0 / w as f64).sqrt(), rng),
                b_head: Tensor::zeros(&[k]),
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage1_bank_has_288_weights() {
        let spec = ModelSpec::new(ModelKind::CatEquiv);
        // tied axis bank: c1 * kappa1
        assert_eq!(spec.catequiv.c1 * spec.catequiv.kappa1, 288);
        if let Params::CatEquiv(p) = init_params(&spec, &mut Rng::seed_from_u64(1)).unwrap() {
            assert_eq!(p.w_ax.numel(), 288);
        } else {
            panic!("wrong params kind");
        }
    }

    #[test]
    fn stage2_first_branch_weight_count() {
        let spec = ModelSpec::new(ModelKind::CatEquiv);
        let b = spec.branches()[0];
        assert_eq!(b.c2 * spec.catequiv.c1 * b.kappa, 18432);
    }

    #[test]
    fn head_dims_and_counts() {
        let spec = ModelSpec::new(ModelKind::CatEquiv);
        assert_eq!(spec.head_dim(), 130); // 64 + 32 + 32 + 2
        assert_eq!(spec.n_classes * spec.head_dim(), 780);
        let p = init_params(&spec, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(p.numel(), spec.param_count());
    }

    #[test]
    fn closed_form_matches_allocation_across_variants() {
        let mut rng = Rng::seed_from_u64(3);
        for kind in [ModelKind::CatEquiv, ModelKind::CircCnn, ModelKind::PlainCnn] {
            let spec = ModelSpec::new(kind);
            let p = init_params(&spec, &mut rng).unwrap();
            assert_eq!(p.numel(), spec.param_count(), "{kind:?}");
        }
        for flip in 0..5 {
            let mut spec = ModelSpec::tiny(ModelKind::CatEquiv);
            match flip {
                0 => spec.variant.tie_axes = false,
                1 => spec.variant.group_norm = false,
                2 => spec.variant.multi_scale = false,
                3 => spec.variant.rms_log = false,
                _ => spec.variant.l2_pool = false,
            }
            let p = init_params(&spec, &mut rng).unwrap();
            assert_eq!(p.numel(), spec.param_count(), "variant flip {flip}");
        }
    }

    #[test]
    fn baseline_capacity_is_comparable() {
        let ce = ModelSpec::new(ModelKind::CatEquiv).param_count() as f64;
        for kind in [ModelKind::CircCnn, ModelKind::PlainCnn] {
            let bl = ModelSpec::new(kind).param_count() as f64;
            let ratio = bl / ce;
            assert!((0.75..=1.25).contains(&ratio), "{kind:?} ratio {ratio}");
        }
    }

    #[test]
    fn validate_catches_bad_kernels() {
        let mut spec = ModelSpec::tiny(ModelKind::CatEquiv);
        spec.catequiv.kappa1 = 4;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::tiny(ModelKind::CatEquiv);
        spec.catequiv.dilations = [1, 2, 9];
        assert!(spec.validate().is_err());
    }
}
