use serde::Serialize;

use crate::data::SliceRecord;
use crate::error::{invalid, shape_err, Result};
use crate::metrics::dice::dice_per_sample;
use crate::model::Predictor;
use crate::nn::{sigmoid, upsample_bilinear};
use crate::tensor::Tensor4;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseDice {
    pub patient_id: String,
    pub slice_index: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_dice: f64,
    pub threshold: f64,
    pub cases: Vec<CaseDice>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("patient_id,slice_index,dice\n");
        for c in &self.cases {
            s.push_str(&format!("{},{},{}\n", c.patient_id, c.slice_index, c.dice));
        }
        s
    }
}

/// Turns final-map logits into a binary mask at `(h, w)`: sigmoid, bilinear
/// upsampling of the probabilities, then `p > threshold`.
pub fn binarize(logits: &Tensor4<f32>, h: usize, w: usize, threshold: f64) -> Result<Tensor4<f32>> {
    if logits.shape().c != 1 {
        return Err(shape_err!(
            "binary evaluation needs one output channel, got {}",
            logits.shape().c
        ));
    }
    let prob = upsample_bilinear(&logits.map(sigmoid), h, w)?;
    let t = threshold as f32;
    Ok(prob.map(|p| if p > t { 1.0 } else { 0.0 }))
}

/// Mean Dice over `slices`, in slice order.
pub fn evaluate(predictor: &mut dyn Predictor, slices: &[SliceRecord], threshold: f64) -> Result<EvalReport> {
    if slices.is_empty() {
        return Err(invalid!("nothing to evaluate: the test split is empty"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid!("threshold must lie in (0, 1), got {threshold}"));
    }
    let mut cases = Vec::with_capacity(slices.len());
    let mut start = 0;
    while start < slices.len() {
        let shape = slices[start].image.shape();
        let mut end = start + 1;
        while end < slices.len() && end - start < EVAL_BATCH && slices[end].image.shape() == shape {
            end += 1;
        }
        let idx: Vec<usize> = (start..end).collect();
        let (images, masks) = crate::data::make_batch(slices, &idx)?;
        let logits = predictor.predict(&images)?;
        let pred = binarize(&logits, shape.h, shape.w, threshold)?;
        for (i, d) in dice_per_sample(&pred, &masks)?.into_iter().enumerate() {
            let s = &slices[start + i];
            cases.push(CaseDice {
                patient_id: s.patient_id.clone(),
                slice_index: s.slice_index,
                dice: d,
            });
        }
        start = end;
    }
    let mean_dice = cases.iter().map(|c| c.dice).sum::<f64>() / cases.len() as f64;
    Ok(EvalReport {
        mean_dice,
        threshold,
        cases,
    })
}
