//! Evasion, targeting, detection and clean-performance metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{Perturbation, Provenance};
use crate::data::ImageBatch;
use crate::detector::{combined_flag, infer_and_detect, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::latency::LatencyReport;
use crate::model::SmallCnn;

/// Fraction of predictions that differ from the true labels.
pub fn uer_from_predictions(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape("uer", &[predicted.len()], &[labels.len()]));
    }
    let wrong = predicted.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Fraction of predictions equal to `target`.
pub fn tsr_from_predictions(predicted: &[usize], target: usize) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::invalid("success rate of an empty set"));
    }
    Ok(predicted.iter().filter(|&&p| p == target).count() as f64 / predicted.len() as f64)
}

/// Universal evasion rate of `perturbation` on `data`. Patches draw one
/// placement per image from `seed`.
pub fn uer(model: &SmallCnn, perturbation: &Perturbation, data: &ImageBatch, seed: u64) -> Result<f64> {
    let perturbed = perturbation.apply(data.images(), seed)?;
    uer_from_predictions(&model.predict_labels(&perturbed)?, data.labels())
}

/// Targeted success rate of `perturbation` on `data`.
pub fn tsr(model: &SmallCnn, perturbation: &Perturbation, data: &ImageBatch, target: usize, seed: u64) -> Result<f64> {
    if target >= data.num_classes() {
        return Err(Error::invalid(format!("target class {target} out of range")));
    }
    let perturbed = perturbation.apply(data.images(), seed)?;
    tsr_from_predictions(&model.predict_labels(&perturbed)?, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fpr,tpr\n");
        for (fpr, tpr) in &self.points {
            out.push_str(&format!("{fpr},{tpr}\n"));
        }
        crate::binfmt::write_file(path, out.as_bytes())
    }
}

/// ROC of `positive` (perturbed) against `negative` (clean) scores, sweeping
/// the threshold over every distinct score. Tied scores move both rates at
/// once, so the trapezoid area counts ties as one half.
pub fn roc_curve(positive: &[f64], negative: &[f64]) -> Result<RocCurve> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::invalid("ROC needs non-empty positive and negative score sets"));
    }
    if positive.iter().chain(negative).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "roc_curve" });
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (positive.len() as u128, negative.len() as u128);
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - prev_fp) * (tp + prev_tp);
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(RocCurve {
        points,
        auc: twice_area as f64 / (2 * p * n) as f64,
    })
}

pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    Ok(roc_curve(positive, negative)?.auc)
}

/// Attack success and clean performance under a detector, with full-set
/// denominators. Counts are kept so other conventions can be recovered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrCp {
    pub asr: f64,
    pub cp: f64,
    /// Perturbed inputs that were neither flagged nor classified correctly.
    pub evaded: usize,
    pub unflagged_perturbed: usize,
    pub perturbed_total: usize,
    /// Clean inputs that were neither flagged nor misclassified.
    pub kept: usize,
    pub unflagged_clean: usize,
    pub clean_total: usize,
}

pub struct Outcomes<'a> {
    pub predicted: &'a [usize],
    pub labels: &'a [usize],
    pub flags: &'a [bool],
}

impl Outcomes<'_> {
    fn check(&self, what: &str) -> Result<()> {
        if self.predicted.len() != self.labels.len() || self.flags.len() != self.labels.len() || self.labels.is_empty()
        {
            return Err(Error::invalid(format!(
                "{what} set: {} predictions, {} labels, {} flags",
                self.predicted.len(),
                self.labels.len(),
                self.flags.len()
            )));
        }
        Ok(())
    }
}

pub fn asr_cp(perturbed: &Outcomes<'_>, clean: &Outcomes<'_>) -> Result<AsrCp> {
    perturbed.check("perturbed")?;
    clean.check("clean")?;
    let count = |o: &Outcomes<'_>, want_correct: bool| {
        (0..o.labels.len())
            .filter(|&i| !o.flags[i] && ((o.predicted[i] == o.labels[i]) == want_correct))
            .count()
    };
    let unflagged = |o: &Outcomes<'_>| o.flags.iter().filter(|&&f| !f).count();
    let evaded = count(perturbed, false);
    let kept = count(clean, true);
    Ok(AsrCp {
        asr: evaded as f64 / perturbed.labels.len() as f64,
        cp: kept as f64 / clean.labels.len() as f64,
        evaded,
        unflagged_perturbed: unflagged(perturbed),
        perturbed_total: perturbed.labels.len(),
        kept,
        unflagged_clean: unflagged(clean),
        clean_total: clean.labels.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub label: String,
    pub config: DetectorConfig,
    pub auc: f64,
    pub clean_flag_rate: f64,
    pub perturbed_flag_rate: f64,
    pub outcome: AsrCp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedEval {
    pub members: Vec<String>,
    pub clean_flag_rate: f64,
    pub perturbed_flag_rate: f64,
    pub outcome: AsrCp,
    /// Perturbed inputs flagged by each member, in member order.
    pub fired_by_member: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attack: Provenance,
    /// Epsilon for masks, area fraction for patches.
    pub budget: f32,
    pub samples: usize,
    pub clean_accuracy: f64,
    pub uer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tsr: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub detectors: Vec<DetectorEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined: Option<CombinedEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::binfmt::write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Full evaluation of one perturbation: clean and perturbed passes (each
/// computing predictions and detector statistics together), UER, TSR for
/// targeted attacks, and per-detector plus combined ROC and ASR/CP.
pub fn evaluate(
    model: &SmallCnn,
    perturbation: &Perturbation,
    data: &ImageBatch,
    detectors: &[Detector],
    seed: u64,
) -> Result<(EvalReport, Vec<RocCurve>)> {
    let (clean_pred, clean_det) = infer_and_detect(model, data.images(), detectors)?;
    let perturbed = perturbation.apply(data.images(), seed)?;
    let (pert_pred, pert_det) = infer_and_detect(model, &perturbed, detectors)?;
    let labels = data.labels();
    let correct = clean_pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    let clean_accuracy = correct as f64 / labels.len().max(1) as f64;
    let uer = uer_from_predictions(&pert_pred, labels)?;
    let tsr = match perturbation.provenance().config.target {
        Some(t) => Some(tsr_from_predictions(&pert_pred, t)?),
        None => None,
    };

    let mut rocs = Vec::with_capacity(detectors.len());
    let mut evals = Vec::with_capacity(detectors.len());
    for (c, p) in clean_det.iter().zip(&pert_det) {
        let roc = roc_curve(&p.scores, &c.scores)?;
        let outcome = asr_cp(
            &Outcomes {
                predicted: &pert_pred,
                labels,
                flags: &p.flags,
            },
            &Outcomes {
                predicted: &clean_pred,
                labels,
                flags: &c.flags,
            },
        )?;
        evals.push(DetectorEval {
            label: c.config.label(),
            config: c.config.clone(),
            auc: roc.auc,
            clean_flag_rate: c.flag_rate(),
            perturbed_flag_rate: p.flag_rate(),
            outcome,
        });
        rocs.push(roc);
    }

    let combined = if detectors.len() >= 2 {
        let cc = combined_flag(&clean_det.iter().collect::<Vec<_>>())?;
        let pc = combined_flag(&pert_det.iter().collect::<Vec<_>>())?;
        let outcome = asr_cp(
            &Outcomes {
                predicted: &pert_pred,
                labels,
                flags: &pc.flags,
            },
            &Outcomes {
                predicted: &clean_pred,
                labels,
                flags: &cc.flags,
            },
        )?;
        Some(CombinedEval {
            members: evals.iter().map(|e| e.label.clone()).collect(),
            clean_flag_rate: cc.flag_rate(),
            perturbed_flag_rate: pc.flag_rate(),
            outcome,
            fired_by_member: (0..detectors.len())
                .map(|m| pc.fired.iter().filter(|f| f.contains(&m)).count())
                .collect(),
        })
    } else {
        None
    };

    Ok((
        EvalReport {
            attack: perturbation.provenance().clone(),
            budget: perturbation.budget(),
            samples: data.len(),
            clean_accuracy,
            uer,
            tsr,
            detectors: evals,
            combined,
            latency: None,
        },
        rocs,
    ))
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: String,
    pub budget: f32,
    pub uer: f64,
    pub auc: Option<f64>,
}

pub fn write_sweep_csv(rows: &[SweepRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "attack,budget,uer,auc")?;
    for r in rows {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.attack, r.budget, r.uer, auc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uer_counts_already_wrong_inputs() {
        // two fooled, one already wrong, one still correct
        let labels = [0, 1, 2, 3];
        let predicted = [1, 0, 0, 3];
        assert_eq!(uer_from_predictions(&predicted, &labels).unwrap(), 0.75);
        assert_eq!(tsr_from_predictions(&[2, 2, 1, 2], 2).unwrap(), 0.75);
        assert_eq!(tsr_from_predictions(&[4; 4], 4).unwrap(), 1.0);
    }

    #[test]
    fn auc_by_hand() {
        assert_eq!(auc(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        let a = auc(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((a - 7.0 / 9.0).abs() < 1e-15);
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn roc_endpoints_and_monotone() {
        let roc = roc_curve(&[0.3, 0.9, 0.5, 0.5], &[0.1, 0.5, 0.2]).unwrap();
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
        for w in roc.points.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn asr_cp_by_hand() {
        let labels = [0, 1, 2, 3];
        let pert = [1, 1, 0, 0];
        let clean = [0, 1, 2, 0];
        let none = [false; 4];
        let r = asr_cp(
            &Outcomes {
                predicted: &pert,
                labels: &labels,
                flags: &none,
            },
            &Outcomes {
                predicted: &clean,
                labels: &labels,
                flags: &none,
            },
        )
        .unwrap();
        assert_eq!((r.asr, r.cp), (0.75, 0.75));

        let mixed = [true, false, false, true];
        let r = asr_cp(
            &Outcomes {
                predicted: &pert,
                labels: &labels,
                flags: &mixed,
            },
            &Outcomes {
                predicted: &clean,
                labels: &labels,
                flags: &mixed,
            },
        )
        .unwrap();
        assert_eq!((r.evaded, r.kept), (1, 2));
        assert_eq!((r.asr, r.cp), (0.25, 0.5));

        let all = [true; 4];
        let r = asr_cp(
            &Outcomes {
                predicted: &pert,
                labels: &labels,
                flags: &all,
            },
            &Outcomes {
                predicted: &clean,
                labels: &labels,
                flags: &all,
            },
        )
        .unwrap();
        assert_eq!(r.asr, 0.0);
    }

    #[test]
    fn sweep_csv_shape() {
        let rows = vec![
            SweepRow {
                attack: "sgd_uap".into(),
                budget: 0.5,
                uer: 0.25,
                auc: Some(0.75),
            },
            SweepRow {
                attack: "perlin".into(),
                budget: 0.5,
                uer: 0.125,
                auc: None,
            },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "attack,budget,uer,auc\nsgd_uap,0.5,0.25,0.75\nperlin,0.5,0.125,\n"
        );
    }
}
