//! Feature extractor: a compact VoVNet-style network built from one-shot
//! aggregation (OSA) blocks with identity residual links and a single-FC
//! "effective squeeze-excitation" (eSE) channel gate.
//!
//! Layout: a two-conv stride-2 stem (stride 4), then three stages, each a
//! 2x2 max-pool followed by one OSA block, emitting C3/C4/C5 at strides
//! 8/16/32.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{FeatureVolume, Tensor};

/// Vars for every parameter bound onto a tape, keyed like the [`ParamStore`].
pub type BoundVars = BTreeMap<String, Var>;

/// Bind every parameter in `store` as a leaf on `tape`.
pub fn bind_all(tape: &mut Tape, store: &ParamStore) -> BoundVars {
    store
        .iter()
        .map(|(k, t)| (k.to_string(), tape.leaf(t.clone())))
        .collect()
}

pub fn var(vars: &BoundVars, key: &str) -> Var {
    *vars
        .get(key)
        .unwrap_or_else(|| panic!("unbound parameter {key:?}"))
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    /// Output channel widths of the three stages (C3, C4, C5).
    pub widths: [usize; 3],
    /// 3x3 convolutions per OSA block.
    pub osa_convs: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_width: 16,
            widths: [16, 32, 64],
            osa_convs: 2,
        }
    }
}

impl BackboneConfig {
    /// Input channel count of stage `i` (0-based).
    fn stage_in(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_width
        } else {
            self.widths[i - 1]
        }
    }
}

/// Register all backbone parameters under `backbone.*`.
pub fn register_params(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) {
    register_conv(
        store,
        "backbone.stem.conv0",
        cfg.stem_width,
        cfg.in_channels,
        3,
        seed,
    );
    register_conv(
        store,
        "backbone.stem.conv1",
        cfg.stem_width,
        cfg.stem_width,
        3,
        seed,
    );
    for (i, &width) in cfg.widths.iter().enumerate() {
        register_osa(
            store,
            &format!("backbone.stage{i}"),
            cfg.stage_in(i),
            width,
            cfg.osa_convs,
            seed,
        );
    }
}

pub(crate) fn register_conv(
    store: &mut ParamStore,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    seed: u64,
) {
    store.register(
        &format!("{prefix}.weight"),
        &[out_c, in_c, k, k],
        Init::HeNormal { fan_in: in_c * k * k },
        seed,
    );
    store.register(&format!("{prefix}.bias"), &[out_c], Init::Zero, seed);
}

fn register_osa(
    store: &mut ParamStore,
    prefix: &str,
    in_c: usize,
    width: usize,
    n_convs: usize,
    seed: u64,
) {
    let mut c = in_c;
    for j in 0..n_convs {
        register_conv(store, &format!("{prefix}.conv{j}"), width, c, 3, seed);
        c = width;
    }
    let concat_c = in_c + n_convs * width;
    register_conv(store, &format!("{prefix}.agg"), width, concat_c, 1, seed);
    store.register(
        &format!("{prefix}.ese.weight"),
        &[width, width],
        Init::HeNormal { fan_in: width },
        seed,
    );
    store.register(&format!("{prefix}.ese.bias"), &[width], Init::Zero, seed);
}

/// eSE channel gate on the tape: sigmoid(W * gap(x) + b) scales each channel.
pub fn ese_gate_t(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let pooled = tape.global_avg_pool(x);
    let z = tape.linear(pooled, w, b);
    let gate = tape.sigmoid(z);
    tape.channel_gate(x, gate)
}

/// OSA block on the tape: a chain of 3x3 convs, one-shot concat of the
/// input and every intermediate, a 1x1 aggregation conv, the eSE gate, and
/// an identity residual when channel counts allow it.
pub fn osa_block_t(
    tape: &mut Tape,
    x: Var,
    vars: &BoundVars,
    prefix: &str,
    n_convs: usize,
) -> Var {
    let mut features = vec![x];
    let mut cur = x;
    for j in 0..n_convs {
        let w = var(vars, &format!("{prefix}.conv{j}.weight"));
        let b = var(vars, &format!("{prefix}.conv{j}.bias"));
        let y = tape.conv2d(cur, w, b, 1, 1);
        cur = tape.relu(y);
        features.push(cur);
    }
    let cat = tape.concat_c(&features);
    let agg_w = var(vars, &format!("{prefix}.agg.weight"));
    let agg_b = var(vars, &format!("{prefix}.agg.bias"));
    let agg = tape.conv2d(cat, agg_w, agg_b, 1, 0);
    let gated = ese_gate_t(
        tape,
        agg,
        var(vars, &format!("{prefix}.ese.weight")),
        var(vars, &format!("{prefix}.ese.bias")),
    );
    let in_channels = tape.value(x).shape()[0];
    let out_channels = tape.value(gated).shape()[0];
    if in_channels == out_channels {
        tape.add(gated, x)
    } else {
        gated
    }
}

/// Full backbone on the tape. `image: [in_channels, H, W]` with H, W
/// divisible by 32. Returns `[C3, C4, C5]` at strides 8/16/32.
pub fn backbone_forward_t(
    tape: &mut Tape,
    image: Var,
    vars: &BoundVars,
    cfg: &BackboneConfig,
) -> [Var; 3] {
    let w0 = var(vars, "backbone.stem.conv0.weight");
    let b0 = var(vars, "backbone.stem.conv0.bias");
    let y = tape.conv2d(image, w0, b0, 2, 1);
    let y = tape.relu(y);
    let w1 = var(vars, "backbone.stem.conv1.weight");
    let b1 = var(vars, "backbone.stem.conv1.bias");
    let y = tape.conv2d(y, w1, b1, 2, 1);
    let mut cur = tape.relu(y);

    let mut outs = Vec::with_capacity(3);
    for i in 0..3 {
        let pooled = tape.max_pool2(cur);
        cur = osa_block_t(
            tape,
            pooled,
            vars,
            &format!("backbone.stage{i}"),
            cfg.osa_convs,
        );
        outs.push(cur);
    }
    [outs[0], outs[1], outs[2]]
}

/// Stand-alone eSE gate over a feature volume.
pub fn ese_gate(x: &FeatureVolume, w: &Tensor, b: &Tensor) -> Result<FeatureVolume> {
    let c = x.channels();
    if w.shape() != [c, c] {
        return Err(Error::Shape(format!(
            "eSE weight shape {:?} does not match {c} channels",
            w.shape()
        )));
    }
    if b.numel() != c {
        return Err(Error::Shape(format!(
            "eSE bias length {} does not match {c} channels",
            b.numel()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let wv = tape.leaf(w.clone());
    let bv = tape.leaf(b.clone());
    let out = ese_gate_t(&mut tape, xv, wv, bv);
    FeatureVolume::new(tape.value(out).clone(), x.stride())
}

/// Stand-alone OSA block over a feature volume, reading parameters from
/// `store` under `prefix` (see [`register_params`] for the key scheme).
pub fn osa_block(
    x: &FeatureVolume,
    store: &ParamStore,
    prefix: &str,
    n_convs: usize,
) -> Result<FeatureVolume> {
    let mut tape = Tape::new();
    let vars = bind_all(&mut tape, store);
    let xv = tape.leaf(x.tensor().clone());
    let out = osa_block_t(&mut tape, xv, &vars, prefix, n_convs);
    FeatureVolume::new(tape.value(out).clone(), x.stride())
}

/// Backbone outputs at strides 8, 16 and 32.
pub struct BackboneOutputs {
    pub c3: FeatureVolume,
    pub c4: FeatureVolume,
    pub c5: FeatureVolume,
}

/// Stand-alone backbone forward over an image volume (stride 1,
/// `in_channels x H x W`, H and W divisible by 32).
pub fn backbone_forward(
    image: &FeatureVolume,
    store: &ParamStore,
    cfg: &BackboneConfig,
) -> Result<BackboneOutputs> {
    if image.height() % 32 != 0 || image.width() % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image sides must be divisible by 32, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    if image.channels() != cfg.in_channels {
        return Err(Error::Shape(format!(
            "expected {} input channels, got {}",
            cfg.in_channels,
            image.channels()
        )));
    }
    let mut tape = Tape::new();
    let vars = bind_all(&mut tape, store);
    let img = tape.leaf(image.tensor().clone());
    let [c3, c4, c5] = backbone_forward_t(&mut tape, img, &vars, cfg);
    Ok(BackboneOutputs {
        c3: FeatureVolume::new(tape.value(c3).clone(), 8)?,
        c4: FeatureVolume::new(tape.value(c4).clone(), 16)?,
        c5: FeatureVolume::new(tape.value(c5).clone(), 32)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ese_zero_params_halves_input() {
        let x = FeatureVolume::new(Tensor::filled(&[2, 3, 3], 2.0), 8).unwrap();
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        let out = ese_gate(&x, &w, &b).unwrap();
        for v in out.tensor().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ese_zero_input_gives_zero() {
        let mut r = rng::stream(3, "ese_zero");
        let x = FeatureVolume::new(Tensor::zeros(&[3, 2, 2]), 8).unwrap();
        let w = rng::uniform_tensor(&mut r, &[3, 3], -1.0, 1.0);
        let b = rng::uniform_tensor(&mut r, &[3], -1.0, 1.0);
        let out = ese_gate(&x, &w, &b).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ese_rejects_shape_mismatch() {
        let x = FeatureVolume::new(Tensor::zeros(&[3, 2, 2]), 8).unwrap();
        assert!(ese_gate(&x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn ese_matches_per_channel_loop_oracle() {
        let mut r = rng::stream(17, "ese_oracle");
        for _ in 0..50 {
            let x = rng::uniform_tensor(&mut r, &[4, 3, 5], -2.0, 2.0);
            let w = rng::uniform_tensor(&mut r, &[4, 4], -1.0, 1.0);
            let b = rng::uniform_tensor(&mut r, &[4], -1.0, 1.0);
            let xv = FeatureVolume::new(x.clone(), 8).unwrap();
            let out = ese_gate(&xv, &w, &b).unwrap();

            // Scalar oracle: gap, affine, sigmoid, scale, all explicit loops.
            let plane = 15;
            let mut gap = [0.0f64; 4];
            for c in 0..4 {
                for i in 0..plane {
                    gap[c] += x.data()[c * plane + i];
                }
                gap[c] /= plane as f64;
            }
            for c in 0..4 {
                let mut z = b.data()[c];
                for j in 0..4 {
                    z += w.data()[c * 4 + j] * gap[j];
                }
                let g = 1.0 / (1.0 + (-z).exp());
                for i in 0..plane {
                    let want = g * x.data()[c * plane + i];
                    let got = out.tensor().data()[c * plane + i];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ese_never_increases_magnitude() {
        let mut r = rng::stream(19, "ese_bound");
        let x = rng::uniform_tensor(&mut r, &[3, 4, 4], -3.0, 3.0);
        let w = rng::uniform_tensor(&mut r, &[3, 3], -2.0, 2.0);
        let b = rng::uniform_tensor(&mut r, &[3], -2.0, 2.0);
        let xv = FeatureVolume::new(x.clone(), 8).unwrap();
        let out = ese_gate(&xv, &w, &b).unwrap();
        for (o, i) in out.tensor().data().iter().zip(x.data()) {
            assert!(o.abs() <= i.abs() + 1e-15);
        }
    }

    fn zeroed_osa_store(in_c: usize, width: usize, n_convs: usize) -> ParamStore {
        let mut store = ParamStore::new();
        register_osa(&mut store, "blk", in_c, width, n_convs, 0);
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        store
    }

    #[test]
    fn osa_dead_block_is_identity_when_channels_match() {
        let store = zeroed_osa_store(4, 4, 2);
        let mut r = rng::stream(5, "osa_identity");
        let x = rng::uniform_tensor(&mut r, &[4, 3, 3], -1.0, 1.0);
        let xv = FeatureVolume::new(x.clone(), 8).unwrap();
        let out = osa_block(&xv, &store, "blk", 2).unwrap();
        assert_eq!(out.tensor(), &x);
    }

    #[test]
    fn osa_output_shape_contract() {
        let mut store = ParamStore::new();
        register_osa(&mut store, "blk", 3, 7, 2, 9);
        let x = FeatureVolume::new(Tensor::zeros(&[3, 5, 6]), 8).unwrap();
        let out = osa_block(&x, &store, "blk", 2).unwrap();
        assert_eq!(out.tensor().shape(), &[7, 5, 6]);
        assert_eq!(out.stride(), 8);
    }

    #[test]
    fn osa_matches_nested_loop_oracle() {
        let mut store = ParamStore::new();
        register_osa(&mut store, "blk", 2, 3, 2, 21);
        let mut r = rng::stream(22, "osa_oracle");
        let x = rng::uniform_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
        let xv = FeatureVolume::new(x.clone(), 8).unwrap();
        let got = osa_block(&xv, &store, "blk", 2).unwrap();

        // Fully explicit re-computation with nested loops.
        let conv = |x: &Tensor, w: &Tensor, b: &Tensor, k: usize, pad: usize| -> Tensor {
            let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = w.shape()[0];
            let mut out = Tensor::zeros(&[cout, h, wd]);
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.at3(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        let i = out.idx3(co, y, xx);
                        out.data_mut()[i] = acc;
                    }
                }
            }
            out
        };
        let relu = |t: &Tensor| t.map(|v| v.max(0.0));

        let y1 = relu(&conv(&x, store.get("blk.conv0.weight"), store.get("blk.conv0.bias"), 3, 1));
        let y2 = relu(&conv(&y1, store.get("blk.conv1.weight"), store.get("blk.conv1.bias"), 3, 1));
        let mut cat_data = x.data().to_vec();
        cat_data.extend_from_slice(y1.data());
        cat_data.extend_from_slice(y2.data());
        let cat = Tensor::from_vec(&[8, 3, 3], cat_data);
        let agg = conv(&cat, store.get("blk.agg.weight"), store.get("blk.agg.bias"), 1, 0);
        // eSE by loops.
        let plane = 9;
        let mut gap = vec![0.0; 3];
        for c in 0..3 {
            gap[c] = agg.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        let ew = store.get("blk.ese.weight");
        let eb = store.get("blk.ese.bias");
        let mut want = agg.clone();
        for c in 0..3 {
            let mut z = eb.data()[c];
            for j in 0..3 {
                z += ew.data()[c * 3 + j] * gap[j];
            }
            let g = 1.0 / (1.0 + (-z).exp());
            for i in 0..plane {
                want.data_mut()[c * plane + i] *= g;
            }
        }
        // in 2 != out 3: no residual.
        for (a, e) in got.tensor().data().iter().zip(want.data()) {
            let rel = (a - e).abs() / e.abs().max(1.0);
            assert!(rel < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn backbone_shapes_and_strides() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, 7);
        let image = FeatureVolume::new(Tensor::zeros(&[3, 64, 64]), 1).unwrap();
        let out = backbone_forward(&image, &store, &cfg).unwrap();
        assert_eq!(out.c3.tensor().shape(), &[16, 8, 8]);
        assert_eq!(out.c4.tensor().shape(), &[32, 4, 4]);
        assert_eq!(out.c5.tensor().shape(), &[64, 2, 2]);
        assert_eq!(
            (out.c3.stride(), out.c4.stride(), out.c5.stride()),
            (8, 16, 32)
        );
    }

    #[test]
    fn backbone_rejects_bad_sizes() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, 7);
        let image = FeatureVolume::new(Tensor::zeros(&[3, 48, 64]), 1).unwrap();
        assert!(backbone_forward(&image, &store, &cfg).is_err());
    }

    #[test]
    fn backbone_is_deterministic() {
        let cfg = BackboneConfig::default();
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        register_params(&mut s1, &cfg, 42);
        register_params(&mut s2, &cfg, 42);
        let mut r = rng::stream(42, "backbone_det");
        let image =
            FeatureVolume::new(rng::uniform_tensor(&mut r, &[3, 32, 32], 0.0, 1.0), 1).unwrap();
        let a = backbone_forward(&image, &s1, &cfg).unwrap();
        let b = backbone_forward(&image, &s2, &cfg).unwrap();
        assert_eq!(a.c5.tensor(), b.c5.tensor());
        assert!(a.c3.tensor().is_finite());
    }
}
