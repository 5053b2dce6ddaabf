//! Feature pyramid: lateral 1x1 projections of C3-C5 to a common width,
//! nearest-neighbor top-down merging, 3x3 output convs, and optional
//! stride-2 extensions P6/P7.

use crate::backbone::{bind_all, register_conv, var, BackboneOutputs, BoundVars};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::FeatureVolume;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FpnConfig {
    /// Common channel width of every pyramid level.
    pub width: usize,
    /// Number of emitted levels, starting at P3 (2..=5).
    pub levels: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        FpnConfig { width: 32, levels: 2 }
    }
}

impl FpnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.levels) {
            return Err(Error::Config(format!(
                "fpn levels must be in 2..=5, got {}",
                self.levels
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("fpn width must be >= 1".into()));
        }
        Ok(())
    }

    /// Pyramid level numbers (3, 4, ...).
    pub fn level_numbers(&self) -> Vec<usize> {
        (3..3 + self.levels).collect()
    }
}

/// Stride of pyramid level `l` (P3 -> 8, doubling per level).
pub fn level_stride(level: usize) -> usize {
    8 << (level - 3)
}

/// The multi-scale feature stack consumed by the detection head and the
/// mask branch. Level `i` holds P(3+i).
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<FeatureVolume>,
}

impl Pyramid {
    pub fn first_level(&self) -> usize {
        3
    }

    pub fn level(&self, number: usize) -> &FeatureVolume {
        &self.levels[number - 3]
    }
}

pub fn register_params(store: &mut ParamStore, cfg: &FpnConfig, backbone_widths: &[usize; 3], seed: u64) {
    for (i, &c) in backbone_widths.iter().enumerate() {
        register_conv(store, &format!("fpn.lateral{}", i + 3), cfg.width, c, 1, seed);
        register_conv(store, &format!("fpn.output{}", i + 3), cfg.width, cfg.width, 3, seed);
    }
    if cfg.levels >= 4 {
        register_conv(store, "fpn.p6", cfg.width, cfg.width, 3, seed);
    }
    if cfg.levels >= 5 {
        register_conv(store, "fpn.p7", cfg.width, cfg.width, 3, seed);
    }
}

fn conv(tape: &mut Tape, x: Var, vars: &BoundVars, prefix: &str, stride: usize, pad: usize) -> Var {
    let w = var(vars, &format!("{prefix}.weight"));
    let b = var(vars, &format!("{prefix}.bias"));
    tape.conv2d(x, w, b, stride, pad)
}

/// Pyramid construction on the tape. Returns one Var per emitted level.
pub fn fpn_forward_t(
    tape: &mut Tape,
    c345: [Var; 3],
    vars: &BoundVars,
    cfg: &FpnConfig,
) -> Vec<Var> {
    let l5 = conv(tape, c345[2], vars, "fpn.lateral5", 1, 0);
    let up5 = tape.upsample_nearest2(l5);
    let l4_lat = conv(tape, c345[1], vars, "fpn.lateral4", 1, 0);
    let l4 = tape.add(l4_lat, up5);
    let up4 = tape.upsample_nearest2(l4);
    let l3_lat = conv(tape, c345[0], vars, "fpn.lateral3", 1, 0);
    let l3 = tape.add(l3_lat, up4);

    let p3 = conv(tape, l3, vars, "fpn.output3", 1, 1);
    let p4 = conv(tape, l4, vars, "fpn.output4", 1, 1);
    let p5 = conv(tape, l5, vars, "fpn.output5", 1, 1);

    let mut levels = vec![p3, p4, p5];
    if cfg.levels >= 4 {
        let p6 = conv(tape, p5, vars, "fpn.p6", 2, 1);
        levels.push(p6);
        if cfg.levels >= 5 {
            let p7 = conv(tape, levels[3], vars, "fpn.p7", 2, 1);
            levels.push(p7);
        }
    }
    levels.truncate(cfg.levels);
    levels
}

/// Stand-alone pyramid construction from backbone outputs.
pub fn fpn_forward(
    outputs: &BackboneOutputs,
    store: &ParamStore,
    cfg: &FpnConfig,
) -> Result<Pyramid> {
    cfg.validate()?;
    for (fv, name) in [(&outputs.c3, "lateral3"), (&outputs.c4, "lateral4"), (&outputs.c5, "lateral5")] {
        let key = format!("fpn.{name}.weight");
        let w = store
            .try_get(&key)
            .ok_or_else(|| Error::Shape(format!("missing parameter {key:?}")))?;
        if w.shape()[1] != fv.channels() {
            return Err(Error::Shape(format!(
                "{key} expects {} input channels, feature has {}",
                w.shape()[1],
                fv.channels()
            )));
        }
    }
    let mut tape = Tape::new();
    let vars = bind_all(&mut tape, store);
    let c3 = tape.leaf(outputs.c3.tensor().clone());
    let c4 = tape.leaf(outputs.c4.tensor().clone());
    let c5 = tape.leaf(outputs.c5.tensor().clone());
    let level_vars = fpn_forward_t(&mut tape, [c3, c4, c5], &vars, cfg);
    let mut levels = Vec::with_capacity(level_vars.len());
    for (i, v) in level_vars.iter().enumerate() {
        levels.push(FeatureVolume::new(
            tape.value(*v).clone(),
            level_stride(3 + i),
        )?);
    }
    Ok(Pyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone;
    use crate::rng;
    use crate::tensor::Tensor;

    fn outputs(c3: Tensor, c4: Tensor, c5: Tensor) -> BackboneOutputs {
        BackboneOutputs {
            c3: FeatureVolume::new(c3, 8).unwrap(),
            c4: FeatureVolume::new(c4, 16).unwrap(),
            c5: FeatureVolume::new(c5, 32).unwrap(),
        }
    }

    #[test]
    fn shapes_follow_ceil_halving() {
        let cfg = FpnConfig { width: 8, levels: 5 };
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, &[16, 32, 64], 3);
        let out = outputs(
            Tensor::zeros(&[16, 8, 8]),
            Tensor::zeros(&[32, 4, 4]),
            Tensor::zeros(&[64, 2, 2]),
        );
        let pyr = fpn_forward(&out, &store, &cfg).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|l| l.tensor().shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![8, 8, 8],
                vec![8, 4, 4],
                vec![8, 2, 2],
                vec![8, 1, 1],
                vec![8, 1, 1]
            ]
        );
        let strides: Vec<_> = pyr.levels.iter().map(|l| l.stride()).collect();
        assert_eq!(strides, vec![8, 16, 32, 64, 128]);
    }

    #[test]
    fn zero_params_propagate_zero() {
        let cfg = FpnConfig { width: 4, levels: 3 };
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, &[4, 4, 4], 3);
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut r = rng::stream(4, "fpn_zero");
        let out = outputs(
            rng::uniform_tensor(&mut r, &[4, 4, 4], -1.0, 1.0),
            rng::uniform_tensor(&mut r, &[4, 2, 2], -1.0, 1.0),
            rng::uniform_tensor(&mut r, &[4, 1, 1], -1.0, 1.0),
        );
        let pyr = fpn_forward(&out, &store, &cfg).unwrap();
        for level in &pyr.levels {
            assert!(level.tensor().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_bias_fpn_is_linear() {
        let cfg = FpnConfig { width: 4, levels: 3 };
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, &[3, 5, 6], 11);
        // Biases are zero-initialized already.
        let mut r = rng::stream(12, "fpn_linear");
        let c3 = rng::uniform_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
        let c4 = rng::uniform_tensor(&mut r, &[5, 2, 2], -1.0, 1.0);
        let c5 = rng::uniform_tensor(&mut r, &[6, 1, 1], -1.0, 1.0);
        let alpha = 2.5;
        let base = fpn_forward(&outputs(c3.clone(), c4.clone(), c5.clone()), &store, &cfg).unwrap();
        let scaled = fpn_forward(
            &outputs(
                c3.map(|v| v * alpha),
                c4.map(|v| v * alpha),
                c5.map(|v| v * alpha),
            ),
            &store,
            &cfg,
        )
        .unwrap();
        for (a, b) in base.levels.iter().zip(&scaled.levels) {
            for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
                assert!((x * alpha - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_width_mismatch() {
        let cfg = FpnConfig { width: 4, levels: 2 };
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, &[4, 4, 4], 3);
        let out = outputs(
            Tensor::zeros(&[5, 4, 4]),
            Tensor::zeros(&[4, 2, 2]),
            Tensor::zeros(&[4, 1, 1]),
        );
        assert!(fpn_forward(&out, &store, &cfg).is_err());
    }

    #[test]
    fn works_on_real_backbone_output() {
        let bcfg = backbone::BackboneConfig::default();
        let fcfg = FpnConfig::default();
        let mut store = ParamStore::new();
        backbone::register_params(&mut store, &bcfg, 5);
        register_params(&mut store, &fcfg, &bcfg.widths, 5);
        let mut r = rng::stream(5, "fpn_e2e");
        let image =
            FeatureVolume::new(rng::uniform_tensor(&mut r, &[3, 64, 64], 0.0, 1.0), 1).unwrap();
        let outs = backbone::backbone_forward(&image, &store, &bcfg).unwrap();
        let pyr = fpn_forward(&outs, &store, &fcfg).unwrap();
        assert_eq!(pyr.levels.len(), 2);
        assert_eq!(pyr.levels[0].tensor().shape(), &[32, 8, 8]);
        assert_eq!(pyr.levels[1].tensor().shape(), &[32, 4, 4]);
    }
}
