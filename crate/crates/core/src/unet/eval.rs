//! Per-tissue and pooled IoU / MAE / MSE.

use std::fmt::Write as _;

use crate::dosimetry::TissueClass;
use crate::error::{Error, Result};
use crate::loss::soft_iou;
use crate::nn::{Mode, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    /// Mean of the per-sample soft IoU.
    pub iou: f64,
    /// Mean over all voxels.
    pub mae: f64,
    pub mse: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Accum {
    iou: f64,
    abs: f64,
    sq: f64,
    voxels: usize,
    samples: usize,
}

impl Accum {
    fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        self.iou += soft_iou(pred, target)?;
        for (p, t) in pred.data().iter().zip(target.data()) {
            self.abs += (p - t).abs();
            self.sq += (p - t) * (p - t);
        }
        self.voxels += pred.len();
        self.samples += 1;
        Ok(())
    }

    fn finish(&self) -> Option<Metrics> {
        (self.samples > 0).then(|| Metrics {
            iou: self.iou / self.samples as f64,
            mae: self.abs / self.voxels as f64,
            mse: self.sq / self.voxels as f64,
            samples: self.samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// One row per organ class (always present) plus any other class seen.
    pub classes: Vec<(TissueClass, Option<Metrics>)>,
    /// Metrics over the pooled set.
    pub total: Metrics,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = format!("{:<8} {:>10} {:>12} {:>12} {:>6}\n", "class", "IoU", "MAE", "MSE", "n");
        let mut row = |name: &str, m: Option<&Metrics>| {
            let _ = match m {
                Some(m) => writeln!(s, "{name:<8} {:>10.4} {:>12.4e} {:>12.4e} {:>6}", m.iou, m.mae, m.mse, m.samples),
                None => writeln!(s, "{name:<8} {:>10} {:>12} {:>12} {:>6}", "-", "-", "-", 0),
            };
        };
        for (c, m) in &self.classes {
            row(c.name(), m.as_ref());
        }
        row("total", Some(&self.total));
        s
    }
}

/// Scores predictions against targets, grouped by class.
pub fn evaluate_predictions(preds: &[Tensor], targets: &[Tensor], classes: &[TissueClass]) -> Result<EvalReport> {
    if preds.len() != targets.len() || preds.len() != classes.len() {
        return Err(Error::shape("predictions, targets and labels differ in length"));
    }
    if preds.is_empty() {
        return Err(Error::arg("nothing to evaluate"));
    }
    let mut per = [Accum::default(); TissueClass::ALL.len()];
    let mut total = Accum::default();
    for ((p, t), &c) in preds.iter().zip(targets).zip(classes) {
        p.same_shape(t, "evaluation pair")?;
        per[c as usize].add(p, t)?;
        total.add(p, t)?;
    }
    let rows = TissueClass::ALL
        .iter()
        .filter(|c| TissueClass::ORGANS.contains(c) || per[**c as usize].samples > 0)
        .map(|&c| (c, per[c as usize].finish()))
        .collect();
    Ok(EvalReport {
        classes: rows,
        total: total.finish().expect("non-empty"),
    })
}

/// Runs `net` in inference mode over `(input, target, class)` triples.
pub fn predict_all(net: &mut Network, inputs: &[&Tensor], batch_size: usize) -> Result<Vec<Tensor>> {
    let mode = net.mode();
    net.set_mode(Mode::Infer);
    let mut out = Vec::with_capacity(inputs.len());
    let result = (|| {
        for chunk in inputs.chunks(batch_size.max(1)) {
            let x = Tensor::stack(&chunk.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
            let y = net.predict(&x)?;
            out.extend((0..chunk.len()).map(|i| y.outer(i)));
        }
        Ok(())
    })();
    net.set_mode(mode);
    result.map(|_| out)
}

pub fn evaluate(net: &mut Network, samples: &[(Tensor, Tensor, TissueClass)], batch_size: usize) -> Result<EvalReport> {
    let inputs: Vec<&Tensor> = samples.iter().map(|s| &s.0).collect();
    let preds = predict_all(net, &inputs, batch_size)?;
    let targets: Vec<Tensor> = samples.iter().map(|s| s.1.clone()).collect();
    let classes: Vec<TissueClass> = samples.iter().map(|s| s.2).collect();
    evaluate_predictions(&preds, &targets, &classes)
}
