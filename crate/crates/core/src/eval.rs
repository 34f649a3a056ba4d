//! Inference and dataset evaluation.

use std::fmt::Write as _;

use crate::autodiff::Graph;
use crate::data::{crop, CropMode, Dataset, DepthSample};
use crate::error::{Error, Result};
use crate::loss::{compute_metrics, DepthPair, MetricsReport};
use crate::net::DepthNet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Depth in meters, `1×H×W`, for a `3×H×W` image of the model's extents.
pub fn predict(net: &DepthNet, params: &ParamStore, rgb: &Tensor) -> Result<Tensor> {
    let m = net.config();
    if rgb.shape() != [3, m.input_h, m.input_w] {
        return Err(Error::config(format!(
            "model.input_h/input_w: image is {:?}, model expects [3, {}, {}]",
            rgb.shape(),
            m.input_h,
            m.input_w
        )));
    }
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g)?;
    let x = g.constant(rgb.clone())?;
    let out = net.forward(&mut g, &p, x)?;
    Ok(g.value(out.depth).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub ids: Vec<String>,
    pub per_image: Vec<MetricsReport>,
    /// Unweighted mean over images.
    pub mean: MetricsReport,
}

impl EvalOutcome {
    /// `id,<metric columns>` per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", MetricsReport::csv_header());
        for (id, r) in self.ids.iter().zip(&self.per_image) {
            let _ = writeln!(s, "{id},{}", r.csv_row());
        }
        let _ = writeln!(s, "mean,{}", self.mean.csv_row());
        s
    }
}

/// Metrics for one sample. The KITTI window is cut before inference, so the
/// model sees 1216×352 inputs; the interior window is cut from prediction
/// and ground truth afterwards.
pub fn evaluate_sample(
    net: &DepthNet,
    params: &ParamStore,
    s: &DepthSample,
    mode: CropMode,
    cap: (f64, f64),
) -> Result<MetricsReport> {
    let (input, pred) = match mode {
        CropMode::KittiBottomCenter => {
            let c = crop(s, mode)?;
            let p = predict(net, params, &c.rgb)?;
            (c, p)
        }
        CropMode::EigenCenter => {
            let p = predict(net, params, &s.rgb)?;
            let both = DepthSample::new(s.rgb.clone(), p, s.mask.clone())?;
            (crop(s, mode)?, crop(&both, mode)?.depth)
        }
        CropMode::None => (s.clone(), predict(net, params, &s.rgb)?),
    };
    compute_metrics(&DepthPair { pred, gt: input.depth, mask: input.mask, cap })
}

pub fn evaluate(
    net: &DepthNet,
    params: &ParamStore,
    data: &Dataset,
    mode: CropMode,
    cap: (f64, f64),
) -> Result<EvalOutcome> {
    let per_image = data
        .samples
        .iter()
        .map(|s| evaluate_sample(net, params, s, mode, cap))
        .collect::<Result<Vec<_>>>()?;
    let mean = MetricsReport::mean(&per_image).ok_or_else(|| Error::config("eval: empty dataset".to_string()))?;
    Ok(EvalOutcome { ids: data.ids.clone(), per_image, mean })
}
