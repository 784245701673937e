//! The symmetry category acting on signal tensors: cyclic time shifts,
//! per-sensor positive gains, and the sensor-hierarchy poset
//! `axis ≺ sensor ≺ TOTAL`, together with its action on data.
//!
//! A [`Morphism`] bundles `(tau, lambda, arrow)`; [`apply_morphism`] realizes
//! it on a tensor as *inject ∘ scale ∘ shift*, and scaling/shifting/injection
//! all commute, so either composition order gives identical bits.
//!
//! The `*_lifted` variants act on feature carriers where each axis slot holds
//! `m` channels instead of one; the verifier uses them as the feature-side
//! action when checking naturality of the linear core (`m = 1` recovers the
//! data action).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Objects of the sensor-hierarchy poset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PosetObject {
    AccX,
    AccY,
    AccZ,
    GyrX,
    GyrY,
    GyrZ,
    Acc,
    Gyr,
    Total,
}

use PosetObject::*;

impl PosetObject {
    pub const ALL: [PosetObject; 9] = [AccX, AccY, AccZ, GyrX, GyrY, GyrZ, Acc, Gyr, Total];

    /// Channel count of the carrier at this object (axis 1, sensor 3, TOTAL 6).
    pub fn channels(self) -> usize {
        match self {
            AccX | AccY | AccZ | GyrX | GyrY | GyrZ => 1,
            Acc | Gyr => 3,
            Total => 6,
        }
    }

    /// Partial order generated by `axis ≺ sensor ≺ TOTAL` within each sensor.
    pub fn leq(self, other: PosetObject) -> bool {
        if self == other || other == Total {
            return true;
        }
        matches!(
            (self, other),
            (AccX | AccY | AccZ, Acc) | (GyrX | GyrY | GyrZ, Gyr)
        )
    }

    fn is_axis(self) -> bool {
        self.channels() == 1
    }

    /// Axis index 0..3 within its sensor, for axis objects.
    fn axis_index(self) -> usize {
        match self {
            AccX | GyrX => 0,
            AccY | GyrY => 1,
            AccZ | GyrZ => 2,
            _ => unreachable!("axis_index on non-axis object"),
        }
    }

    /// Which sensor's gain applies: 0 = ACC, 1 = GYR; `None` for TOTAL.
    fn sensor_slot(self) -> Option<usize> {
        match self {
            AccX | AccY | AccZ | Acc => Some(0),
            GyrX | GyrY | GyrZ | Gyr => Some(1),
            Total => None,
        }
    }

    /// Every arrow of the poset: 9 identities, 6 axis→sensor, 2 sensor→TOTAL
    /// and 6 axis→TOTAL composites.
    pub fn arrows() -> Vec<(PosetObject, PosetObject)> {
        let mut out = Vec::new();
        for s in Self::ALL {
            for t in Self::ALL {
                if s.leq(t) {
                    out.push((s, t));
                }
            }
        }
        out
    }
}

/// A morphism of the product category: a cyclic shift, per-sensor gains, and
/// a poset arrow. `tau` is stored reduced modulo the window length.
#[derive(Debug, Clone, PartialEq)]
pub struct Morphism {
    pub tau: i64,
    pub lambda_acc: f64,
    pub lambda_gyr: f64,
    pub source: PosetObject,
    pub target: PosetObject,
    pub t_len: usize,
}

impl Morphism {
    pub fn new(
        tau: i64,
        lambda_acc: f64,
        lambda_gyr: f64,
        source: PosetObject,
        target: PosetObject,
        t_len: usize,
    ) -> Result<Morphism> {
        if lambda_acc <= 0.0 || lambda_gyr <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "gains must be positive, got ({lambda_acc}, {lambda_gyr})"
            )));
        }
        if !source.leq(target) {
            return Err(Error::InvalidArg(format!("{source:?} is not below {target:?} in the poset")));
        }
        if t_len == 0 {
            return Err(Error::InvalidArg("window length must be positive".into()));
        }
        Ok(Morphism {
            tau: tau.rem_euclid(t_len as i64),
            lambda_acc,
            lambda_gyr,
            source,
            target,
            t_len,
        })
    }

    pub fn identity(obj: PosetObject, t_len: usize) -> Morphism {
        Morphism { tau: 0, lambda_acc: 1.0, lambda_gyr: 1.0, source: obj, target: obj, t_len }
    }

    /// `self ∘ earlier`: apply `earlier` first. Shifts add mod T, gains
    /// multiply, arrows compose along the poset.
    pub fn compose(&self, earlier: &Morphism) -> Result<Morphism> {
        if earlier.target != self.source {
            return Err(Error::InvalidArg(format!(
                "cannot compose: earlier targets {:?}, later sources {:?}",
                earlier.target, self.source
            )));
        }
        if earlier.t_len != self.t_len {
            return Err(Error::InvalidArg("composition across different window lengths".into()));
        }
        Morphism::new(
            self.tau + earlier.tau,
            self.lambda_acc * earlier.lambda_acc,
            self.lambda_gyr * earlier.lambda_gyr,
            earlier.source,
            self.target,
            self.t_len,
        )
    }

    pub fn is_identity_arrow(&self) -> bool {
        self.source == self.target
    }
}

/// The time–gain action on the carrier of `obj`: scale the channels belonging
/// to each sensor by its gain, then shift cyclically by `tau`
/// (`y[c][t] = λ_sensor(c) · x[c][(t - tau) mod T]`).
pub fn apply_time_gain(x: &Tensor, obj: PosetObject, tau: i64, lambda: (f64, f64)) -> Result<Tensor> {
    apply_time_gain_lifted(x, obj, tau, lambda, 1)
}

/// Same action on a carrier with `m` feature channels per axis slot.
pub fn apply_time_gain_lifted(
    x: &Tensor,
    obj: PosetObject,
    tau: i64,
    lambda: (f64, f64),
    m: usize,
) -> Result<Tensor> {
    if lambda.0 <= 0.0 || lambda.1 <= 0.0 {
        return Err(Error::InvalidArg(format!("gains must be positive, got {lambda:?}")));
    }
    let (c, t_len) = x.dims2()?;
    let want = obj.channels() * m;
    if c != want {
        return Err(Error::shape(
            "apply_time_gain",
            format!("{obj:?} with multiplicity {m} carries {want} channels, got {c}"),
        ));
    }
    let shifted = x.shift_time(tau);
    let mut out = shifted.data().to_vec();
    match obj.sensor_slot() {
        Some(0) => {
            for v in &mut out {
                *v *= lambda.0;
            }
        }
        Some(_) => {
            for v in &mut out {
                *v *= lambda.1;
            }
        }
        None => {
            // TOTAL: first half of the channels is the ACC block
            let half = c / 2 * t_len;
            for v in &mut out[..half] {
                *v *= lambda.0;
            }
            for v in &mut out[half..] {
                *v *= lambda.1;
            }
        }
    }
    Tensor::from_vec(&[c, t_len], out)
}

/// Canonical injection along a poset arrow: zero-padded placement of the
/// source carrier into its channel block of the target carrier.
pub fn inject(x: &Tensor, source: PosetObject, target: PosetObject) -> Result<Tensor> {
    inject_lifted(x, source, target, 1)
}

/// Channel-lifted injection: each axis slot is a block of `m` channels.
pub fn inject_lifted(x: &Tensor, source: PosetObject, target: PosetObject, m: usize) -> Result<Tensor> {
    if !source.leq(target) {
        return Err(Error::InvalidArg(format!("no arrow {source:?} -> {target:?} in the poset")));
    }
    let (c, t_len) = x.dims2()?;
    if c != source.channels() * m {
        return Err(Error::shape(
            "inject",
            format!("{source:?} with multiplicity {m} carries {} channels, got {c}", source.channels() * m),
        ));
    }
    if source == target {
        return Ok(x.clone());
    }
    let out_c = target.channels() * m;
    let mut data = vec![0.0; out_c * t_len];
    // row offset of the source block inside the target carrier
    let row_offset = if source.is_axis() {
        let within = source.axis_index() * m;
        match target {
            Acc | Gyr => within,
            Total => source.sensor_slot().unwrap() * 3 * m + within,
            _ => unreachable!(),
        }
    } else {
        // sensor -> TOTAL
        source.sensor_slot().unwrap() * 3 * m
    };
    data[row_offset * t_len..row_offset * t_len + c * t_len].copy_from_slice(x.data());
    Tensor::from_vec(&[out_c, t_len], data)
}

/// The full action of a morphism: `inject ∘ (scale ∘ shift)`. Scaling acts on
/// channels and shifting on time, so this equals `(scale ∘ shift) ∘ inject`
/// bit for bit; the verifier asserts both orders agree.
pub fn apply_morphism(x: &Tensor, mor: &Morphism) -> Result<Tensor> {
    apply_morphism_lifted(x, mor, 1)
}

pub fn apply_morphism_lifted(x: &Tensor, mor: &Morphism, m: usize) -> Result<Tensor> {
    let lam = (mor.lambda_acc, mor.lambda_gyr);
    let scaled = apply_time_gain_lifted(x, mor.source, mor.tau, lam, m)?;
    inject_lifted(&scaled, mor.source, mor.target, m)
}
