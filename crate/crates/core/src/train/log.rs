use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::TrainError;
use crate::losses::LossTerms;

/// One optimisation step. Discriminator fields are present in `gan` mode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub terms: LossTerms,
    pub d_loss: Option<f64>,
    /// Mean discriminator output on real and on generated pairs.
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` when the validation split is empty.
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

/// Everything a run logs. Wall-clock times are kept apart from the loss
/// records so that two runs with equal seeds produce identical logs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Milliseconds per step, parallel to `steps`.
    pub step_millis: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub(crate) fn push_step(&mut self, record: StepRecord, millis: f64) -> Result<(), TrainError> {
        let last = self.steps.last().map_or(0, |r| r.step);
        debug_assert!(record.step == last + 1, "steps are numbered consecutively");
        let t = &record.terms;
        let values = [
            ("content", Some(t.content)),
            ("perceptual", Some(t.perceptual)),
            ("global", Some(t.global)),
            ("adversarial", t.adversarial),
            ("total", Some(t.total)),
            ("d_loss", record.d_loss),
        ];
        for (name, v) in values {
            if let Some(v) = v.filter(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    step: record.step,
                    what: format!("{name} = {v}"),
                });
            }
        }
        self.steps.push(record);
        self.step_millis.push(millis);
        Ok(())
    }

    /// Per-step CSV: `step,epoch,content,perceptual,global,adversarial,total,d_loss,d_real,d_fake`.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,content,perceptual,global,adversarial,total,d_loss,d_real,d_fake\n");
        for r in &self.steps {
            let t = &r.terms;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                t.content,
                t.perceptual,
                t.global,
                opt(t.adversarial),
                t.total,
                opt(r.d_loss),
                opt(r.d_real),
                opt(r.d_fake)
            );
        }
        out
    }

    /// Per-epoch CSV: `epoch,val_psnr,val_ssim`.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,val_psnr,val_ssim\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{}", r.epoch, opt(r.val_psnr), opt(r.val_ssim));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("step,millis\n");
        for (r, ms) in self.steps.iter().zip(&self.step_millis) {
            let _ = writeln!(out, "{},{ms:.3}", r.step);
        }
        out
    }

    /// Writes `train_log.csv`, `epochs.csv` and `timing.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
        let mut written = Vec::new();
        for (name, text) in [
            ("train_log.csv", self.steps_csv()),
            ("epochs.csv", self.epochs_csv()),
            ("timing.csv", self.timing_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| TrainError::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// Global-similarity term of each step, in order.
    pub fn global_series(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.terms.global).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, total: f64) -> StepRecord {
        StepRecord {
            step,
            epoch: 1,
            terms: LossTerms {
                total,
                ..LossTerms::default()
            },
            d_loss: None,
            d_real: None,
            d_fake: None,
        }
    }

    #[test]
    fn non_finite_values_abort_with_the_step() {
        let mut log = TrainLog::default();
        log.push_step(record(1, 0.5), 1.0).unwrap();
        let err = log.push_step(record(2, f64::NAN), 1.0).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 2, .. }));
        assert_eq!(log.steps.len(), 1);
    }

    #[test]
    fn csv_excludes_timing() {
        let mut log = TrainLog::default();
        log.push_step(record(1, 0.5), 12.0).unwrap();
        let mut other = TrainLog::default();
        other.push_step(record(1, 0.5), 99.0).unwrap();
        assert_eq!(log.steps_csv(), other.steps_csv());
        assert_ne!(log.timing_csv(), other.timing_csv());
        assert_eq!(log.steps_csv().lines().count(), 2);
    }
}
