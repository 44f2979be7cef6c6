//! Reconstructed images and their quality against the objective's targets.

use ndarray::Array2;

use crate::engine::Evaluation;
use crate::error::{HoloError, Result};
use crate::metrics::{psnr_from_mse, ssim};
use crate::supervision::{Measure, Objective};

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `plane<j>` for image planes, `plane<j>_view<vy>_<vx>` for light-field views.
    pub label: String,
    /// Scaled amplitude clipped to `[0, 1]`.
    pub image: Array2<f64>,
    pub target: Array2<f64>,
    /// PSNR over the pixels the data term weights.
    pub psnr: f64,
    pub ssim: f64,
}

fn weighted_psnr(img: &[f64], target: &[f64], weight: &[f64]) -> f64 {
    let wsum: f64 = weight.iter().sum();
    if wsum <= 0.0 {
        return f64::NAN;
    }
    let mse = img
        .iter()
        .zip(target)
        .zip(weight)
        .map(|((a, t), c)| c * (a - t) * (a - t))
        .sum::<f64>()
        / wsum;
    psnr_from_mse(mse)
}

/// One reconstruction per data plane, or per view for STFT-measured planes.
pub fn reconstructions(objective: &Objective, ev: &Evaluation) -> Result<Vec<Reconstruction>> {
    let shape = objective.grid.shape();
    let s = ev.scale;
    let mut out = Vec::new();
    for (j, (plane, amp)) in objective.planes.iter().zip(&ev.amplitudes).enumerate() {
        let (Some(d), Some(a)) = (&plane.data, amp) else {
            continue;
        };
        let scaled: Vec<f64> = a.iter().map(|v| (s * v).clamp(0.0, 1.0)).collect();
        match &d.measure {
            Measure::Identity => {
                let image = Array2::from_shape_vec(shape, scaled.clone()).map_err(|e| HoloError::dim(e.to_string()))?;
                let target =
                    Array2::from_shape_vec(shape, d.target.clone()).map_err(|e| HoloError::dim(e.to_string()))?;
                out.push(Reconstruction {
                    label: format!("plane{j}"),
                    psnr: weighted_psnr(&scaled, &d.target, &d.weight),
                    ssim: ssim(&image, &target)?,
                    image,
                    target,
                });
            }
            Measure::Stft(layout, _) => {
                let (py, px, w) = (layout.patches_y, layout.patches_x, layout.w);
                let at = |v: &[f64], p: usize, k: usize| v[p * w * w + k];
                for k in 0..w * w {
                    let gather = |v: &[f64]| -> Vec<f64> { (0..py * px).map(|p| at(v, p, k)).collect() };
                    let (img, tgt, wt) = (gather(&scaled), gather(&d.target), gather(&d.weight));
                    let image = Array2::from_shape_vec((py, px), img.clone()).expect("view shape");
                    let target = Array2::from_shape_vec((py, px), tgt.clone()).expect("view shape");
                    out.push(Reconstruction {
                        label: format!("plane{j}_view{}_{}", k / w, k % w),
                        psnr: weighted_psnr(&img, &tgt, &wt),
                        ssim: ssim(&image, &target)?,
                        image,
                        target,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(HoloError::Empty("objective has no data terms".into()));
    }
    Ok(out)
}

/// Mean PSNR and SSIM over reconstructions.
pub fn mean_quality(recs: &[Reconstruction]) -> (f64, f64) {
    let n = recs.len() as f64;
    (
        recs.iter().map(|r| r.psnr).sum::<f64>() / n,
        recs.iter().map(|r| r.ssim).sum::<f64>() / n,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Engine, ScaleChoice};
    use crate::field::GridSpec;
    use crate::metrics::psnr;
    use crate::propagation::CalibratedModel;
    use crate::supervision::StftSpec;
    use ndarray::Array4;

    #[test]
    fn image_plane_psnr_matches_plain_psnr() {
        let g = GridSpec::new(16, 16, 10.8e-6, 520e-9).unwrap();
        let target = crate::synthetic::image("rings", (16, 16)).unwrap();
        let obj = Objective::amp2d(g, &target, 0.05).unwrap();
        let model = CalibratedModel::nominal(g, vec![0.05], 16).unwrap();
        let phases = vec![Array2::from_shape_fn((16, 16), |(i, j)| ((i * j) % 5) as f64)];
        let ev = Engine::new(&obj, &model).unwrap().evaluate(&phases, ScaleChoice::ClosedForm, false).unwrap();
        let recs = reconstructions(&obj, &ev).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, "plane0");
        assert!((recs[0].psnr - psnr(&recs[0].image, &target).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn light_field_gives_one_reconstruction_per_view() {
        let g = GridSpec::new(16, 16, 10.8e-6, 520e-9).unwrap();
        let stft = StftSpec {
            window_size: 4,
            hop: 4,
            ..Default::default()
        };
        let data = Array4::from_elem((4, 4, 4, 4), 0.5);
        let obj = Objective::light_field(g, &data, 0.05, &stft).unwrap();
        let model = CalibratedModel::nominal(g, vec![0.05], 16).unwrap();
        let phases = vec![Array2::zeros((16, 16))];
        let ev = Engine::new(&obj, &model).unwrap().evaluate(&phases, ScaleChoice::ClosedForm, false).unwrap();
        let recs = reconstructions(&obj, &ev).unwrap();
        assert_eq!(recs.len(), 16);
        assert_eq!(recs[5].label, "plane0_view1_1");
        assert_eq!(recs[5].image.dim(), (4, 4));
    }
}
