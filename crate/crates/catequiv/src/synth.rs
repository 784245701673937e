//! Synthetic inertial windows for tests, demos and dataset-free checks.
//!
//! Classes are separable two ways: robustly, by frequency content (survives
//! any shift, rotation or gain), and spuriously, by phase, absolute amplitude
//! and a fixed per-class axis orientation (all destroyed by the composite
//! perturbation). Models that latch onto the spurious cues look fine on clean
//! data and fall apart out of distribution, which is exactly the contrast the
//! evaluation harness is supposed to expose.

use crate::pipeline::Window;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-class axis orientations (unit-ish, intentionally distinct).
const ACC_DIRS: [[f64; 3]; 6] = [
    [1.0, 0.1, 0.0],
    [0.1, 1.0, 0.0],
    [0.0, 0.1, 1.0],
    [0.7, 0.7, 0.0],
    [0.0, 0.7, 0.7],
    [0.7, 0.0, 0.7],
];

const GYR_DIRS: [[f64; 3]; 6] = [
    [0.0, 0.5, 1.0],
    [1.0, 0.0, 0.5],
    [0.5, 1.0, 0.0],
    [1.0, 0.5, 0.5],
    [0.5, 0.5, 1.0],
    [0.5, 1.0, 0.5],
];

/// One synthetic window of class `class` (1-based, up to 6).
pub fn make_window(class: usize, t_len: usize, rng: &mut Rng) -> Window {
    assert!((1..=6).contains(&class));
    let c = class - 1;
    // robust cues: fundamental frequency and harmonic mix
    let f0 = 2.0 + 2.0 * c as f64;
    let harmonic = 0.25 + 0.1 * c as f64;
    // spurious cues: amplitude, orientation, phase
    let amp_acc = 0.8 + 0.35 * c as f64;
    let amp_gyr = 1.6 - 0.18 * c as f64;
    let phase = 0.0;
    let noise = 0.05;

    let mut data = vec![0.0; 6 * t_len];
    for t in 0..t_len {
        let arg = 2.0 * std::f64::consts::PI * f0 * t as f64 / t_len as f64 + phase;
        let s = arg.sin() + harmonic * (2.0 * arg + 0.7).sin();
        let g = (arg + 0.4).cos() + harmonic * (3.0 * arg).cos();
        for a in 0..3 {
            data[a * t_len + t] = amp_acc * ACC_DIRS[c][a] * s + noise * rng.gauss();
            data[(3 + a) * t_len + t] = amp_gyr * GYR_DIRS[c][a] * g + noise * rng.gauss();
        }
    }
    Window::new(Tensor::from_vec(&[2, 3, t_len], data).unwrap(), class, 0).unwrap()
}

/// `n_per_class` windows for each of `n_classes` classes, deterministic in
/// the seed.
pub fn make_dataset(n_classes: usize, n_per_class: usize, t_len: usize, seed: u64) -> Vec<Window> {
    assert!(n_classes <= 6);
    let mut out = Vec::with_capacity(n_classes * n_per_class);
    for class in 1..=n_classes {
        for i in 0..n_per_class {
            let mut rng = Rng::derive(seed, (class * 10_000 + i) as u64);
            out.push(make_window(class, t_len, &mut rng));
        }
    }
    out
}
