//! Evaluation metrics.

use serde::Serialize;

use crate::error::Result;
use crate::model::{infer, GemTransModel, Inference, Task, VideoSample};
use crate::proto::argmax;
use crate::supervision::{in_mask_fraction, target_mass, temporal_targets, video_union, TemporalMode};

/// Binary detection collapses healthy (class 0) against every other class.
pub const DETECTION_RULE: &str = "detection = healthy (class 0) vs {mild, moderate, severe}";

pub fn mae(pred: &[f64], label: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(label).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64
}

/// `1 − SS_res / SS_tot`. With constant labels the ratio is undefined; the
/// result is then 1 for a perfect fit and 0 otherwise.
pub fn r2(pred: &[f64], label: &[f64]) -> f64 {
    let n = label.len() as f64;
    if label.is_empty() {
        return 0.0;
    }
    let mean = label.iter().sum::<f64>() / n;
    let ss_tot: f64 = label.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(label).map(|(p, y)| (p - y).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// MAE of predicting the label mean for every sample.
pub fn mean_predictor_mae(label: &[f64]) -> f64 {
    if label.is_empty() {
        return 0.0;
    }
    let mean = label.iter().sum::<f64>() / label.len() as f64;
    label.iter().map(|y| (y - mean).abs()).sum::<f64>() / label.len() as f64
}

pub fn accuracy(pred: &[usize], label: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(label).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

pub fn detection_accuracy(pred: &[usize], label: &[usize]) -> f64 {
    let collapse = |v: &[usize]| v.iter().map(|&c| usize::from(c > 0)).collect::<Vec<_>>();
    accuracy(&collapse(pred), &collapse(label))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub task: Task,
    pub samples: usize,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    /// MAE of the constant label-mean predictor on the same samples.
    pub baseline_mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub detection_accuracy: Option<f64>,
    pub detection_rule: Option<&'static str>,
    /// Mean share of spatial attention inside the ED ∪ ES mask.
    pub in_mask_fraction: Option<f64>,
    /// Mean temporal attention mass on the ED and ES frames.
    pub ed_es_mass: Option<f64>,
}

/// Attention statistics over supervised videos: (in-mask fraction, ED/ES mass).
pub fn attention_stats(
    samples: &[&VideoSample],
    inf: &Inference,
    patch_size: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let (mut frac, mut nf, mut mass, mut nm) = (0.0, 0usize, 0.0, 0usize);
    for (s, rec) in samples.iter().zip(&inf.attention) {
        let Some(sup) = &s.supervision else { continue };
        for (k, v) in sup.iter().enumerate() {
            let union = video_union(v, s.h, s.w, patch_size)?;
            for frame in &rec.spatial[k] {
                frac += in_mask_fraction(frame, &union);
                nf += 1;
            }
            let targets = temporal_targets(v.ed_index, v.es_index, s.t, TemporalMode::Frames)?;
            mass += target_mass(&rec.temporal[k], &targets);
            nm += 1;
        }
    }
    let avg = |x: f64, n: usize| (n > 0).then(|| x / n as f64);
    Ok((avg(frac, nf), avg(mass, nm)))
}

pub fn report_from(samples: &[&VideoSample], inf: &Inference, task: Task, patch_size: usize) -> Result<MetricsReport> {
    let (in_mask, ed_es) = attention_stats(samples, inf, patch_size)?;
    let mut r = MetricsReport {
        task,
        samples: samples.len(),
        mae: None,
        r2: None,
        baseline_mae: None,
        accuracy: None,
        detection_accuracy: None,
        detection_rule: None,
        in_mask_fraction: in_mask,
        ed_es_mass: ed_es,
    };
    match task {
        Task::Ef => {
            let pred: Vec<f64> = inf.predictions.iter().map(|p| p[0]).collect();
            let label: Vec<f64> = samples.iter().map(|s| s.ef_label.unwrap_or(0.0) as f64).collect();
            r.mae = Some(mae(&pred, &label));
            r.r2 = Some(r2(&pred, &label));
            r.baseline_mae = Some(mean_predictor_mae(&label));
        }
        Task::As => {
            let pred: Vec<usize> = inf.predictions.iter().map(|p| argmax(p)).collect();
            let label: Vec<usize> = samples.iter().map(|s| s.as_label.unwrap_or(0)).collect();
            r.accuracy = Some(accuracy(&pred, &label));
            r.detection_accuracy = Some(detection_accuracy(&pred, &label));
            r.detection_rule = Some(DETECTION_RULE);
        }
    }
    Ok(r)
}

pub fn evaluate(
    model: &GemTransModel<f32>,
    samples: &[&VideoSample],
    task: Task,
    batch: usize,
) -> Result<MetricsReport> {
    let inf = infer(model, samples, task, batch)?;
    report_from(samples, &inf, task, model.config.patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0.1, 0.5, 0.9];
        assert_eq!(mae(&y, &y), 0.0);
        assert_eq!(r2(&y, &y), 1.0);
        assert_eq!(accuracy(&[0, 3, 2], &[0, 3, 2]), 1.0);
        assert_eq!(detection_accuracy(&[0, 3, 2], &[0, 3, 2]), 1.0);
    }

    #[test]
    fn constant_mean_predictor() {
        let y = [0.2, 0.4];
        let p = [0.3, 0.3];
        assert!((mae(&p, &y) - 0.1).abs() < 1e-12);
        assert!(r2(&p, &y).abs() < 1e-12);
        assert!((mean_predictor_mae(&y) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn binary_collapse() {
        // predictions [mild, healthy], labels [severe, healthy]
        assert_eq!(accuracy(&[1, 0], &[3, 0]), 0.5);
        assert_eq!(detection_accuracy(&[1, 0], &[3, 0]), 1.0);
    }

    #[test]
    fn r2_never_exceeds_one() {
        assert!(r2(&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0]) < 0.0);
        assert_eq!(r2(&[0.5, 0.5], &[0.5, 0.5]), 1.0);
        assert_eq!(r2(&[0.4, 0.5], &[0.5, 0.5]), 0.0);
    }
}
