//! Central finite-difference verification of every parameterized operation.
//!
//! Each check builds a scalar-valued graph on a fresh tape, takes the
//! analytic gradient from one backward pass, and compares it element by
//! element against `(f(x+h) - f(x-h)) / 2h` with `h = 1e-4`. The error
//! measure is `|a - n| / max(|a|, |n|, 1)`, i.e. relative with an absolute
//! floor of 1 for near-zero gradients; the pass tolerance is `1e-4`.
//!
//! Finite differences are invalid when a sampled input lands within O(h)
//! of a non-differentiable kink (ReLU, max-pool ties), so [`run_all`]
//! retries a failing suite with derived seeds: a genuine gradient defect
//! fails every attempt, a kink sample passes on retry.

use crate::backbone::{self, BoundVars};
use crate::fcos::{self, HeadConfig, LevelShape};
use crate::fpn;
use crate::geometry::BoxXYXY;
use crate::params::ParamStore;
use crate::rng;
use crate::sagmask::{self, MaskConfig};
use crate::tape::{RegLossTarget, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Outcome of one finite-difference suite.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of scalar gradient entries compared.
    pub elements: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.max_rel_err.is_finite()
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<24} max_rel_err {:9.3e} (tol {:.1e}, {} elements)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.elements
        )
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences, for every element of every input whose index is in
/// `check`.
pub fn check_scalar(
    name: &str,
    inputs: &[Tensor],
    check: &[usize],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> CheckReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let r = build(&mut t, &vs);
        t.value(r).item()
    };

    let mut max_rel = 0.0f64;
    let mut elements = 0usize;
    for &i in check {
        let analytic = grads.get(vars[i]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.map(|g| g.data()[j]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            elements += 1;
        }
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        tolerance: FD_TOL,
        elements,
    }
}

/// Pair store keys (sorted) with positional vars starting at `offset`.
fn bound_from(keys: &[String], vars: &[Var], offset: usize) -> BoundVars {
    keys.iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), vars[offset + i]))
        .collect()
}

fn store_inputs(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    let keys: Vec<String> = store.keys().map(str::to_string).collect();
    let tensors = keys.iter().map(|k| store.get(k).clone()).collect();
    (keys, tensors)
}

pub fn check_ese(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, "gc.ese");
    let x = rng::uniform_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
    let w = rng::uniform_tensor(&mut r, &[3, 3], -1.0, 1.0);
    let b = rng::uniform_tensor(&mut r, &[3], -0.5, 0.5);
    check_scalar("ese_gate", &[x, w, b], &[0, 1, 2], &|tape, vars| {
        let y = backbone::ese_gate_t(tape, vars[0], vars[1], vars[2]);
        tape.sum_all(y)
    })
}

pub fn check_osa(seed: u64) -> CheckReport {
    let mut store = ParamStore::new();
    let mut reg_store = ParamStore::new();
    backbone::register_params(
        &mut reg_store,
        &backbone::BackboneConfig {
            in_channels: 3,
            stem_width: 3,
            widths: [3, 3, 3],
            osa_convs: 2,
        },
        seed,
    );
    // Only stage0 keys, renamed under a short prefix.
    for (k, t) in reg_store.iter() {
        if let Some(rest) = k.strip_prefix("backbone.stage0.") {
            store.insert(&format!("blk.{rest}"), t.clone());
        }
    }
    let (keys, mut tensors) = store_inputs(&store);
    let mut r = rng::stream(seed, "gc.osa");
    let x = rng::uniform_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
    tensors.insert(0, x);
    let check: Vec<usize> = (0..tensors.len()).collect();
    check_scalar("osa_block", &tensors, &check, &move |tape, vars| {
        let bound = bound_from(&keys, vars, 1);
        let y = backbone::osa_block_t(tape, vars[0], &bound, "blk", 2);
        tape.sum_all(y)
    })
}

pub fn check_backbone_stem(seed: u64) -> CheckReport {
    let cfg = backbone::BackboneConfig {
        in_channels: 3,
        stem_width: 2,
        widths: [2, 3, 4],
        osa_convs: 1,
    };
    let mut store = ParamStore::new();
    backbone::register_params(&mut store, &cfg, seed);
    let (keys, mut tensors) = store_inputs(&store);
    let mut r = rng::stream(seed, "gc.stem");
    let image = rng::uniform_tensor(&mut r, &[3, 32, 32], 0.0, 1.0);
    tensors.insert(0, image);
    // Check only the stem parameters: the four tensors named stem.*.
    let check: Vec<usize> = keys
        .iter()
        .enumerate()
        .filter(|(_, k)| k.contains(".stem."))
        .map(|(i, _)| i + 1)
        .collect();
    check_scalar("backbone_stem", &tensors, &check, &move |tape, vars| {
        let bound = bound_from(&keys, vars, 1);
        let [_, _, c5] = backbone::backbone_forward_t(tape, vars[0], &bound, &cfg);
        tape.sum_all(c5)
    })
}

pub fn check_fpn(seed: u64) -> CheckReport {
    let cfg = fpn::FpnConfig { width: 3, levels: 2 };
    let mut store = ParamStore::new();
    fpn::register_params(&mut store, &cfg, &[2, 3, 4], seed);
    let (keys, mut tensors) = store_inputs(&store);
    let mut r = rng::stream(seed, "gc.fpn");
    let c3 = rng::uniform_tensor(&mut r, &[2, 4, 4], -1.0, 1.0);
    let c4 = rng::uniform_tensor(&mut r, &[3, 2, 2], -1.0, 1.0);
    let c5 = rng::uniform_tensor(&mut r, &[4, 1, 1], -1.0, 1.0);
    tensors.splice(0..0, [c3, c4, c5]);
    let check: Vec<usize> = (0..tensors.len()).collect();
    check_scalar("fpn", &tensors, &check, &move |tape, vars| {
        let bound = bound_from(&keys, vars, 3);
        let levels = fpn::fpn_forward_t(tape, [vars[0], vars[1], vars[2]], &bound, &cfg);
        let sums: Vec<(Var, f64)> = levels
            .into_iter()
            .map(|l| (tape.sum_all(l), 1.0))
            .collect();
        tape.sum_weighted(&sums)
    })
}

pub fn check_head_and_losses(seed: u64) -> CheckReport {
    let head_cfg = HeadConfig {
        classes: 2,
        tower_convs: 2,
        ..HeadConfig::default()
    };
    let width = 4usize;
    let mut store = ParamStore::new();
    fcos::register_params(&mut store, &head_cfg, width, seed);
    let (keys, mut tensors) = store_inputs(&store);
    let mut r = rng::stream(seed, "gc.head");
    let p3 = rng::uniform_tensor(&mut r, &[width, 4, 4], -1.0, 1.0);
    tensors.insert(0, p3);
    let shapes = vec![LevelShape { level: 3, h: 4, w: 4, stride: 8 }];
    let gt = vec![
        (0usize, BoxXYXY::new(3.0, 5.0, 26.0, 27.0).unwrap()),
        (1usize, BoxXYXY::new(14.0, 2.0, 31.0, 18.0).unwrap()),
    ];
    let targets = fcos::assign_targets(&shapes, &gt, &[(0.0, f64::INFINITY)]);
    assert!(targets.num_pos > 0);
    let check: Vec<usize> = (0..tensors.len()).collect();
    check_scalar("head_and_losses", &tensors, &check, &move |tape, vars| {
        let bound = bound_from(&keys, vars, 1);
        let outputs = fcos::head_forward_t(tape, &[vars[0]], &bound, &head_cfg);
        let losses = fcos::detection_losses_t(tape, &outputs, &targets, &head_cfg);
        tape.sum_weighted(&[(losses.cls, 1.0), (losses.reg, 1.0), (losses.ctr, 1.0)])
    })
}

pub fn check_focal_loss(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, "gc.focal");
    let logits = rng::uniform_tensor(&mut r, &[2, 3, 3], -2.0, 2.0);
    let targets = vec![-1, 0, 1, -1, 0, -1, 1, -1, -1];
    check_scalar("focal_loss", &[logits], &[0], &move |tape, vars| {
        tape.focal_loss_sum(vars[0], targets.clone(), 0.25, 2.0)
    })
}

pub fn check_iou_loss(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, "gc.iou");
    let raw = rng::uniform_tensor(&mut r, &[4, 2, 2], -0.7, 0.7);
    let targets = vec![
        RegLossTarget { loc: 0, target: [3.0, 7.0, 11.0, 5.0], weight: 0.8 },
        RegLossTarget { loc: 3, target: [10.0, 4.0, 6.0, 12.0], weight: 0.45 },
    ];
    check_scalar("iou_reg_loss", &[raw], &[0], &move |tape, vars| {
        tape.iou_loss_sum(vars[0], targets.clone(), 8.0)
    })
}

pub fn check_centerness_loss(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, "gc.ctr");
    let logits = rng::uniform_tensor(&mut r, &[1, 3, 3], -2.0, 2.0);
    let targets = vec![(0usize, 0.25), (4, 0.9), (7, 0.5)];
    check_scalar("centerness_loss", &[logits], &[0], &move |tape, vars| {
        tape.bce_sum(vars[0], targets.clone())
    })
}

pub fn check_mask_bce(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, "gc.maskbce");
    let logits = rng::uniform_tensor(&mut r, &[2, 4, 4], -2.0, 2.0);
    let target: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    check_scalar("mask_bce", &[logits], &[0], &move |tape, vars| {
        tape.mask_bce_mean(vars[0], 1, target.clone())
    })
}

pub fn check_mask_head(seed: u64) -> CheckReport {
    let cfg = MaskConfig {
        roi_size: 4,
        tower_convs: 2,
        tower_width: 3,
        classes: 2,
        ..MaskConfig::default()
    };
    let mut store = ParamStore::new();
    sagmask::register_params(&mut store, &cfg, 2, seed);
    let (keys, mut tensors) = store_inputs(&store);
    let mut r = rng::stream(seed, "gc.maskhead");
    let roi = rng::uniform_tensor(&mut r, &[2, 4, 4], -1.0, 1.0);
    tensors.insert(0, roi);
    let target: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let check: Vec<usize> = (0..tensors.len()).collect();
    check_scalar("mask_head", &tensors, &check, &move |tape, vars| {
        let bound = bound_from(&keys, vars, 1);
        let logits = sagmask::mask_head_forward_t(tape, vars[0], &bound, &cfg);
        tape.mask_bce_mean(logits, 0, target.clone())
    })
}

pub fn check_roi_bilinear(seed: u64) -> CheckReport {
    let mut r = rng::stream(seed, "gc.roi");
    let plane = rng::uniform_tensor(&mut r, &[2, 4, 4], -1.0, 1.0);
    let b = BoxXYXY::new(5.0, 3.0, 27.0, 22.0).unwrap();
    let samples = sagmask::roi_samples(&b, 3, 8, 4, 4);
    check_scalar("roi_bilinear", &[plane], &[0], &move |tape, vars| {
        let roi = tape.roi_bilinear(vars[0], samples.clone());
        tape.sum_all(roi)
    })
}

/// Run one suite, retrying with derived seeds when a sampled input sits
/// on a kink (see module docs).
fn with_retry(f: fn(u64) -> CheckReport, seed: u64) -> CheckReport {
    let mut last = f(seed);
    for attempt in 1..3u64 {
        if last.passed() {
            break;
        }
        last = f(seed.wrapping_add(attempt.wrapping_mul(0x9E3779B97F4A7C15)));
    }
    last
}

/// All finite-difference suites in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    let suites: Vec<fn(u64) -> CheckReport> = vec![
        check_ese,
        check_osa,
        check_backbone_stem,
        check_fpn,
        check_head_and_losses,
        check_focal_loss,
        check_iou_loss,
        check_centerness_loss,
        check_mask_bce,
        check_mask_head,
        check_roi_bilinear,
    ];
    suites.into_iter().map(|f| with_retry(f, seed)).collect()
}
