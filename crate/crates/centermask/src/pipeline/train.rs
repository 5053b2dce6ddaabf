//! SGD-with-momentum training over the combined detection and mask loss.
//!
//! Deterministic by construction: records are visited round-robin
//! (`index = (iteration * batch + j) % n`), the data loader is
//! single-threaded, and all arithmetic is sequential `f64`. The loss log
//! is an append-only CSV stream (`iter,cls,reg,ctr,mask,total`), one row
//! per iteration; checkpoints are whole-file atomic.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngExt;

use crate::data::{multi_scale_resize, DatasetRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::Config;

/// Abort with a diagnostic naming the first non-finite loss component.
fn check_finite_losses(comps: &[f64; 4], total: f64, iteration: usize) -> Result<()> {
    const NAMES: [&str; 4] = ["cls", "reg", "ctr", "mask"];
    for (value, name) in comps.iter().zip(NAMES) {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name,
                iteration,
            });
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "total",
            iteration,
        });
    }
    Ok(())
}

pub struct TrainReport {
    pub iterations: usize,
    /// Batch-mean components of the last iteration: cls, reg, ctr, mask,
    /// total.
    pub final_losses: [f64; 5],
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Train a fresh model on `records`, writing the checkpoint and the loss
/// log. Returns the trained model and a summary.
pub fn train(
    config: &Config,
    records: &[DatasetRecord],
    checkpoint_path: &Path,
    log_path: &Path,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let tc = &config.train;

    let mut velocity: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
        .collect();

    if let Some(dir) = log_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_file = std::fs::File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    writeln!(log, "iter,cls,reg,ctr,mask,total").map_err(|e| Error::io(log_path, e))?;

    let mut aug_rng = config
        .augment
        .as_ref()
        .map(|a| crate::rng::stream(a.seed, "augment"));

    let mut final_losses = [0.0f64; 5];
    for iter in 0..tc.iterations {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);

        let mut comps = [0.0f64; 4];
        let mut loss_vars = Vec::with_capacity(tc.batch_size);
        for j in 0..tc.batch_size {
            let record = &records[(iter * tc.batch_size + j) % records.len()];
            let augmented;
            let record = match (&config.augment, aug_rng.as_mut()) {
                (Some(aug), Some(rng)) => {
                    augmented = multi_scale_resize(record, aug, rng.random::<f64>())?;
                    &augmented
                }
                _ => record,
            };
            let losses =
                model.training_losses_with(&mut tape, &vars, record, tc.mask_match_iou, tc.mask_rois)?;
            comps[0] += tape.value(losses.cls).item();
            comps[1] += tape.value(losses.reg).item();
            comps[2] += tape.value(losses.ctr).item();
            comps[3] += tape.value(losses.mask).item();
            loss_vars.push(losses);
        }
        let inv_b = 1.0 / tc.batch_size as f64;
        for c in &mut comps {
            *c *= inv_b;
        }
        let w = tc.loss_weights;
        let weighted: Vec<(crate::tape::Var, f64)> = loss_vars
            .iter()
            .flat_map(|l| {
                [
                    (l.cls, w.cls * inv_b),
                    (l.reg, w.reg * inv_b),
                    (l.ctr, w.ctr * inv_b),
                    (l.mask, w.mask * inv_b),
                ]
            })
            .collect();
        let total_var = tape.sum_weighted(&weighted);
        let total = tape.value(total_var).item();

        check_finite_losses(&comps, total, iter)?;

        writeln!(
            log,
            "{iter},{:.6},{:.6},{:.6},{:.6},{:.6}",
            comps[0], comps[1], comps[2], comps[3], total
        )
        .map_err(|e| Error::io(log_path, e))?;

        let grads = tape.backward(total_var);
        for (key, param) in model.params.iter_mut() {
            let v = velocity.get_mut(key).expect("velocity buffer");
            let g = grads.get(vars[key]);
            for i in 0..param.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]) + tc.weight_decay * param.data()[i];
                let vi = tc.momentum * v.data()[i] + gi;
                v.data_mut()[i] = vi;
                param.data_mut()[i] -= tc.learning_rate * vi;
            }
        }

        final_losses = [comps[0], comps[1], comps[2], comps[3], total];
        if tc.checkpoint_interval > 0 && (iter + 1) % tc.checkpoint_interval == 0 {
            log.flush().map_err(|e| Error::io(log_path, e))?;
            model.save(checkpoint_path)?;
        }
    }
    log.flush().map_err(|e| Error::io(log_path, e))?;
    model.save(checkpoint_path)?;

    let report = TrainReport {
        iterations: tc.iterations,
        final_losses,
        checkpoint_path: checkpoint_path.to_path_buf(),
        log_path: log_path.to_path_buf(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn tiny_config(iterations: usize, lr: f64) -> Config {
        let mut cfg = Config::default();
        cfg.seed = 13;
        cfg.model.backbone.stem_width = 4;
        cfg.model.backbone.widths = [4, 6, 8];
        cfg.model.fpn.width = 4;
        cfg.model.mask.tower_width = 4;
        cfg.model.mask.roi_size = 7;
        cfg.train.iterations = iterations;
        cfg.train.learning_rate = lr;
        cfg
    }

    #[test]
    fn nan_abort_names_first_bad_component() {
        let err = check_finite_losses(&[0.1, f64::NAN, f64::NAN, 0.0], 0.3, 17).unwrap_err();
        match err {
            Error::NonFiniteLoss { component, iteration } => {
                assert_eq!(component, "reg");
                assert_eq!(iteration, 17);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(check_finite_losses(&[0.0; 4], 0.0, 0).is_ok());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = {
            let mut c = tiny_config(3, 1e-12);
            // Effectively zero: also zero out decay so nothing moves.
            c.train.learning_rate = f64::MIN_POSITIVE;
            c.train.weight_decay = 0.0;
            c
        };
        let records = synth_generate(13, 2, (64, 64)).unwrap();
        let reference = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let (model, _) = train(
            &cfg,
            &records,
            &dir.path().join("m.ckpt"),
            &dir.path().join("loss.csv"),
        )
        .unwrap();
        for (key, t) in reference.params.iter() {
            let diff = model
                .params
                .get(key)
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff < 1e-12, "{key} moved by {diff}");
        }
    }

    #[test]
    fn same_seed_produces_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(5, 0.01);
        let records = synth_generate(21, 2, (64, 64)).unwrap();
        train(&cfg, &records, &dir.path().join("a.ckpt"), &dir.path().join("a.csv")).unwrap();
        train(&cfg, &records, &dir.path().join("b.ckpt"), &dir.path().join("b.csv")).unwrap();
        let a = std::fs::read(dir.path().join("a.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b.csv")).unwrap();
        assert_eq!(a, b);
        let ca = std::fs::read(dir.path().join("a.ckpt")).unwrap();
        let cb = std::fs::read(dir.path().join("b.ckpt")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn log_has_one_row_per_iteration_with_stable_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(4, 0.01);
        let records = synth_generate(22, 1, (64, 64)).unwrap();
        train(&cfg, &records, &dir.path().join("m.ckpt"), &dir.path().join("l.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("l.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,cls,reg,ctr,mask,total");
        assert_eq!(lines.len(), 5);
        for (i, line) in lines[1..].iter().enumerate() {
            assert!(line.starts_with(&format!("{i},")));
            assert_eq!(line.split(',').count(), 6);
        }
    }
}
