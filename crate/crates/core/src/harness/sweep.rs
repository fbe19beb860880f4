use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{eval_masks, ground_truth, predict, score};
use crate::body_model::BodyModel;
use crate::data_pipeline::MotionSample;
use crate::error::{Error, Result};
use crate::lifting_net::LiftingNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub target_ratio: f64,
    pub measured_ratio: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub accel: f64,
}

/// Evaluates every model at every configured occlusion ratio. All models
/// see identical masks at a given ratio.
pub fn sweep(
    models: &[(&str, &LiftingNet)],
    body: &BodyModel,
    samples: &[MotionSample],
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepRow>> {
    let truth = ground_truth(body, samples)?;
    let mut rows = Vec::new();
    for &ratio in &cfg.eval.sweep_ratios {
        let masks = eval_masks(samples, &cfg.synth.occlusion, ratio, cfg.seed);
        for (name, net) in models {
            let preds = predict(net, body, samples, &masks, cfg.eval.batch_size)?;
            let r = score(&preds, &truth, &masks)?;
            rows.push(SweepRow {
                model: name.to_string(),
                target_ratio: ratio,
                measured_ratio: r.occlusion_ratio,
                mpjpe: r.mpjpe,
                pa_mpjpe: r.pa_mpjpe,
                pve: r.pve,
                accel: r.accel,
            });
        }
    }
    Ok(rows)
}

/// MPJPE by ratio for one model, in sweep order.
pub fn curve(rows: &[SweepRow], model: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.model == model)
        .map(|r| (r.target_ratio, r.mpjpe))
        .collect()
}

/// Number of consecutive pairs where the error decreases as the ratio grows.
pub fn inversions(curve: &[(f64, f64)]) -> usize {
    curve.windows(2).filter(|w| w[1].1 < w[0].1).count()
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("model,target_ratio,measured_ratio,mpjpe_mm,pa_mpjpe_mm,pve_mm,accel_mm_per_frame2\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.2},{:.4},{:.3},{:.3},{:.3},{:.3}",
            r.model, r.target_ratio, r.measured_ratio, r.mpjpe, r.pa_mpjpe, r.pve, r.accel
        );
    }
    s
}

/// Line plot of MPJPE against occlusion ratio, one line per model.
pub fn plot_svg(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let max_x = rows.iter().map(|r| r.target_ratio).fold(0.0, f64::max).max(0.1);
    let max_y = rows.iter().map(|r| r.mpjpe).fold(0.0, f64::max).max(1.0) * 1.1;

    let root = SVGBackend::new(path.as_ref(), (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("MPJPE vs. occlusion ratio", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..max_x, 0.0..max_y)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("occlusion ratio")
        .y_desc("MPJPE (mm)")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, m) in models.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts = curve(rows, m);
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(*m)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}
