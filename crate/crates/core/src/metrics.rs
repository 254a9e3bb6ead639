//! Confusion matrices, mIoU, and the directional and field-of-view protocols.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::IGNORE_LABEL;
use crate::data::{images_to_tensor, Image, LabelMap};
use crate::error::{Error, Result};
use crate::geometry::fov_band;
use crate::model::Model;

/// `counts[g * k + p]` pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds a row-major `width`-wide label map pair. Out-of-range labels
    /// fail with the (row, col) of the first offending pixel.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], width: usize) -> Result<()> {
        if pred.len() != gt.len() || width == 0 || gt.len() % width != 0 {
            return Err(Error::shape("accumulate", &[pred.len()], &[gt.len()]));
        }
        let k = self.num_classes;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            for label in [g, p] {
                if label as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        label,
                        row: i / width,
                        col: i % width,
                        classes: k,
                    });
                }
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn from_labels(pred: &[u8], gt: &[u8], width: usize, num_classes: usize) -> Result<Self> {
        let mut m = Self::new(num_classes);
        m.accumulate(pred, gt, width)?;
        Ok(m)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid(
                "merge",
                format!("{} vs {} classes", self.num_classes, other.num_classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }

    /// Per-class IoU, `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let diag = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a non-empty union; `None` when there are none.
    pub fn miou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// `(per-class IoU, mean IoU)`.
pub fn miou(conf: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if conf.num_classes < 2 {
        return Err(Error::invalid("miou", "needs at least two classes"));
    }
    Ok((conf.iou(), conf.miou()))
}

/// Column ranges of `n` equal bands; band 0 is centered on the image
/// center and later bands proceed to the right, wrapping around. The last
/// band absorbs any remainder.
pub fn direction_bands(width: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > width {
        return Err(Error::invalid("directional_miou", format!("cannot split {width} columns into {n} bands")));
    }
    let band = width / n;
    let start = (width / 2 + width - band / 2) % width;
    Ok((0..n)
        .map(|k| {
            let len = if k + 1 == n { width - band * (n - 1) } else { band };
            (0..len).map(|j| (start + k * band + j) % width).collect()
        })
        .collect())
}

/// One confusion matrix per direction band over a set of ERP label maps.
pub fn directional_confusion(
    preds: &[&LabelMap],
    gts: &[&LabelMap],
    n_dirs: usize,
    num_classes: usize,
) -> Result<Vec<ConfusionMatrix>> {
    if preds.len() != gts.len() {
        return Err(Error::shape("directional_miou", &[preds.len()], &[gts.len()]));
    }
    let mut confs = vec![ConfusionMatrix::new(num_classes); n_dirs];
    let Some(first) = gts.first() else { return Ok(confs) };
    let w = first.width;
    let bands = direction_bands(w, n_dirs)?;
    for (p, g) in preds.iter().zip(gts) {
        if (p.width, p.height) != (g.width, g.height) || g.width != w {
            return Err(Error::shape("directional_miou", &[g.height, w], &[p.height, p.width]));
        }
        for (band, conf) in bands.iter().zip(confs.iter_mut()) {
            let mut bp = Vec::with_capacity(band.len() * g.height);
            let mut bg = Vec::with_capacity(band.len() * g.height);
            for y in 0..g.height {
                for &x in band {
                    bp.push(p.data[y * w + x]);
                    bg.push(g.data[y * w + x]);
                }
            }
            conf.accumulate(&bp, &bg, band.len())?;
        }
    }
    Ok(confs)
}

/// Per-direction mIoU, `None` for bands where it is undefined.
pub fn directional_miou(preds: &[&LabelMap], gts: &[&LabelMap], n_dirs: usize, num_classes: usize) -> Result<Vec<Option<f64>>> {
    Ok(directional_confusion(preds, gts, n_dirs, num_classes)?
        .iter()
        .map(ConfusionMatrix::miou)
        .collect())
}

/// Predicted label maps for a list of images, evaluated `batch` at a time.
pub fn predict(model: &Model, images: &[&Image], batch: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = images_to_tensor(chunk)?;
        let (_, labels) = model.segment(&x)?;
        let per = chunk[0].width * chunk[0].height;
        for (i, img) in chunk.iter().enumerate() {
            out.push(LabelMap {
                width: img.width,
                height: img.height,
                data: labels[i * per..(i + 1) * per].to_vec(),
            });
        }
    }
    Ok(out)
}

pub const EVAL_BATCH: usize = 4;

/// Confusion matrix of `model` over image/label pairs.
pub fn evaluate(model: &Model, samples: &[(&Image, &LabelMap)]) -> Result<ConfusionMatrix> {
    let images: Vec<&Image> = samples.iter().map(|s| s.0).collect();
    let preds = predict(model, &images, EVAL_BATCH)?;
    let mut conf = ConfusionMatrix::new(model.cfg.num_classes);
    for (p, (_, gt)) in preds.iter().zip(samples) {
        conf.accumulate(&p.data, &gt.data, gt.width)?;
    }
    Ok(conf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FovRow {
    pub fov_deg: f64,
    pub miou: Option<f64>,
    pub iou: Vec<Option<f64>>,
}

/// Evaluates centered crops of each 360 degree panorama at every FoV.
pub fn fov_sweep(model: &Model, samples: &[(&Image, &LabelMap)], fovs: &[f64]) -> Result<Vec<FovRow>> {
    fovs.iter()
        .map(|&fov| {
            let crops: Vec<(Image, LabelMap)> = samples
                .iter()
                .map(|(img, lbl)| {
                    let (start, len) = fov_band(img.width, 360.0, fov)?;
                    Ok((img.crop_columns(start, len), lbl.crop_columns(start, len)))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<(&Image, &LabelMap)> = crops.iter().map(|(i, l)| (i, l)).collect();
            let conf = evaluate(model, &refs)?;
            Ok(FovRow {
                fov_deg: fov,
                miou: conf.miou(),
                iou: conf.iou(),
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

/// CSV with columns `fov_deg,miou,iou_<class>...`.
pub fn write_fov_csv(out: &mut impl Write, rows: &[FovRow], classes: &[String]) -> std::io::Result<()> {
    let header: Vec<String> = ["fov_deg".to_string(), "miou".to_string()]
        .into_iter()
        .chain(classes.iter().map(|c| format!("iou_{c}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let cells: Vec<String> = std::iter::once(format!("{}", r.fov_deg))
            .chain(std::iter::once(fmt_opt(r.miou)))
            .chain(r.iou.iter().map(|v| fmt_opt(*v)))
            .collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// CSV with columns `direction,center_deg,miou`.
pub fn write_direction_csv(out: &mut impl Write, scores: &[Option<f64>]) -> std::io::Result<()> {
    writeln!(out, "direction,center_deg,miou")?;
    let n = scores.len();
    for (k, s) in scores.iter().enumerate() {
        writeln!(out, "{k},{},{}", k as f64 * 360.0 / n as f64, fmt_opt(*s))?;
    }
    Ok(())
}
