//! Metrics, held-out evaluation and feature export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, Dataset, Domain, Label, Task, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::Networks;
use crate::nn::{argmax_channels, Mode, Real};

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidInput("confusion matrix must be square".into()));
        }
        Ok(Self { num_classes: c, counts: rows.concat() })
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::InvalidInput("empty confusion matrix".into()))
        } else {
            Ok(())
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.check_nonempty()?;
        let trace: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes that appear
    /// neither in the ground truth nor in the predictions.
    pub fn per_class_iou(&self) -> Result<Vec<Option<f64>>> {
        self.check_nonempty()?;
        Ok((0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.num_classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.num_classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect())
    }

    /// Mean IoU over the classes that occur in the ground truth. A class
    /// that is only ever predicted lowers the IoU of the classes it steals
    /// from but gets no term of its own.
    pub fn miou(&self) -> Result<f64> {
        let ious = self.per_class_iou()?;
        let present: Vec<f64> = (0..self.num_classes)
            .filter(|&c| (0..self.num_classes).any(|p| self.get(c, p) > 0))
            .map(|c| ious[c].expect("class present in ground truth"))
            .collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub domain: Domain,
    pub task: Task,
    /// Images for classification, supervised pixels for segmentation.
    pub units: u64,
    pub accuracy: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl MetricsRecord {
    /// Name of the headline metric for the task.
    pub fn metric_name(&self) -> &'static str {
        match self.task {
            Task::Classification => "accuracy",
            Task::Segmentation => "miou",
        }
    }

    /// Headline metric in percentage points: accuracy for classification,
    /// mIoU for segmentation.
    pub fn headline(&self) -> f64 {
        100.0
            * match self.task {
                Task::Classification => self.accuracy,
                Task::Segmentation => self.miou,
            }
    }

    fn from_confusion(domain: Domain, task: Task, confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            domain,
            task,
            units: confusion.total(),
            accuracy: confusion.accuracy()?,
            miou: confusion.miou()?,
            per_class_iou: confusion.per_class_iou()?,
            confusion,
        })
    }
}

/// Argmax predictions of the main model in eval mode: one class per image
/// for classification, one per pixel (image-major, row-major) for
/// segmentation.
pub fn predict<T: Real>(nets: &mut Networks<T>, images: &[&crate::data::Image]) -> Result<Vec<usize>> {
    let x = images_to_tensor::<T>(images)?;
    let logits = nets.forward_main(&x, Mode::Eval, false)?;
    Ok(argmax_channels(&logits))
}

/// Evaluates the main model on every domain present in `data`, in the order
/// source, target.
pub fn evaluate<T: Real>(nets: &mut Networks<T>, data: &Dataset, batch_size: usize) -> Result<Vec<MetricsRecord>> {
    if data.task != nets.arch.task {
        return Err(Error::InvalidInput(format!(
            "dataset task {} does not match model task {}",
            data.task.as_str(),
            nets.arch.task.as_str()
        )));
    }
    if data.num_classes != nets.arch.num_classes {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, model {}",
            data.num_classes, nets.arch.num_classes
        )));
    }
    let batch_size = batch_size.max(1);
    let mut out = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        let samples: Vec<_> = data.samples.iter().filter(|s| s.domain == domain).collect();
        if samples.is_empty() {
            continue;
        }
        let mut cm = ConfusionMatrix::new(data.num_classes);
        for chunk in samples.chunks(batch_size) {
            let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            let preds = predict(nets, &images)?;
            match data.task {
                Task::Classification => {
                    for (s, &p) in chunk.iter().zip(&preds) {
                        match s.eval_label() {
                            Label::Class(c) => cm.add(*c, p),
                            Label::Map(_) => return Err(Error::InvalidInput("label map in classification data".into())),
                        }
                    }
                }
                Task::Segmentation => {
                    let per_image = preds.len() / chunk.len();
                    for (s, p) in chunk.iter().zip(preds.chunks(per_image)) {
                        let Label::Map(m) = s.eval_label() else {
                            return Err(Error::InvalidInput("class label in segmentation data".into()));
                        };
                        for (&t, &p) in m.data.iter().zip(p) {
                            if t != IGNORE_LABEL {
                                cm.add(t as usize, p);
                            }
                        }
                    }
                }
            }
        }
        out.push(MetricsRecord::from_confusion(domain, data.task, cm)?);
    }
    Ok(out)
}

/// Class column of the embedding table: the class for classification, the
/// most frequent foreground class of the label map for segmentation (0 if
/// there is none).
fn embedding_label(label: &Label) -> usize {
    match label {
        Label::Class(c) => *c,
        Label::Map(m) => {
            let mut hist = [0usize; 256];
            for &v in &m.data {
                hist[v as usize] += 1;
            }
            (1..IGNORE_LABEL as usize)
                .filter(|&c| hist[c] > 0)
                .max_by_key(|&c| (hist[c], std::cmp::Reverse(c)))
                .unwrap_or(0)
        }
    }
}

/// Globally pooled tap features, one row per image.
pub fn embeddings<T: Real>(nets: &mut Networks<T>, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = images_to_tensor::<T>(&images)?;
        let f = nets.tap_features(&x, Mode::Eval, false)?;
        let spatial = f.spatial() as f64;
        for n in 0..f.batch {
            rows.push(
                (0..f.channels)
                    .map(|c| {
                        let s = f.spatial();
                        f.channel(c)[n * s..(n + 1) * s].iter().map(|v| v.as_f64()).sum::<f64>() / spatial
                    })
                    .collect(),
            );
        }
    }
    Ok(rows)
}

/// Writes `f0,...,f{D-1},label,domain` rows for every image of `datasets`.
/// Returns the number of rows written.
pub fn export_embeddings<T: Real>(
    nets: &mut Networks<T>,
    datasets: &[&Dataset],
    out: &Path,
    batch_size: usize,
) -> Result<usize> {
    let dim = nets.arch.tap_channels();
    let mut text = String::new();
    for d in 0..dim {
        let _ = write!(text, "f{d},");
    }
    text.push_str("label,domain\n");
    let mut n = 0;
    for data in datasets {
        let rows = embeddings(nets, data, batch_size)?;
        for (row, s) in rows.iter().zip(&data.samples) {
            for v in row {
                let _ = write!(text, "{v},");
            }
            let _ = writeln!(text, "{},{}", embedding_label(s.eval_label()), s.domain.as_str());
            n += 1;
        }
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, text)?;
    Ok(n)
}

/// Saves an argmax map as an 8-bit grayscale PNG holding raw class ids.
pub fn save_prediction_png(pred: &[usize], height: usize, width: usize, path: &Path) -> Result<()> {
    if pred.len() != height * width {
        return Err(Error::Shape(format!("{} predictions for a {height}x{width} map", pred.len())));
    }
    let bytes: Vec<u8> = pred.iter().map(|&c| c.min(255) as u8).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn perfect_predictor() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(cm.accuracy().unwrap(), 1.0);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert!(cm.per_class_iou().unwrap().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn absent_class_is_excluded() {
        let cm = ConfusionMatrix::from_counts(&[vec![2, 2], vec![0, 0]]).unwrap();
        let ious = cm.per_class_iou().unwrap();
        assert_eq!(ious[0], Some(0.5));
        // class 1 is predicted twice but never true
        assert_eq!(ious[1], Some(0.0));
        assert_eq!(cm.miou().unwrap(), 0.5);
        let cm = ConfusionMatrix::from_counts(&[vec![2, 0], vec![0, 0]]).unwrap();
        assert_eq!(cm.per_class_iou().unwrap()[1], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(ConfusionMatrix::new(3).accuracy().is_err());
        assert!(ConfusionMatrix::new(3).miou().is_err());
    }

    #[test]
    fn random_predictions_approach_chance() {
        let mut rng = crate::seed::rng_for(11, &[]);
        let mut cm = ConfusionMatrix::new(5);
        for _ in 0..50_000 {
            cm.add(rng.gen_range(0..5), rng.gen_range(0..5));
        }
        assert!((cm.accuracy().unwrap() - 0.2).abs() < 0.01);
        assert_eq!(cm.total(), 50_000);
    }

    #[test]
    fn segmentation_label_for_embeddings() {
        let m = crate::data::LabelMap { height: 1, width: 6, data: vec![0, 0, 0, 2, 2, 1] };
        assert_eq!(embedding_label(&Label::Map(m)), 2);
        let m = crate::data::LabelMap { height: 1, width: 2, data: vec![0, IGNORE_LABEL] };
        assert_eq!(embedding_label(&Label::Map(m)), 0);
    }
}
