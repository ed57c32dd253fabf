use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;
use tempo_fields::spectra::{energy_spectrum_frame, truncation_curve, SpectrumReport, TruncationPoint};
use tempo_fields::store::read_dataset;
use tempo_fields::FieldTrajectory;

use super::{emit, OutArgs};
use crate::error::{CliError, ErrorKind, Result};
use crate::plot::{spectrum_svg, truncation_svg};

/// Shell at which the cumulative energy fraction is reported.
const REPORT_SHELL: usize = 8;

#[derive(Debug, Args, Serialize)]
pub struct SpectraArgs {
    /// Predicted fields (dataset file); repeat to compare several.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Legend label per `--pred`, in order.
    #[arg(long)]
    pub label: Vec<String>,
    /// Reference fields (dataset file).
    #[arg(long)]
    pub truth: PathBuf,
    /// Fields averaged into the truncation curve, evenly spaced.
    #[arg(long, default_value_t = 32)]
    pub truncation_fields: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

fn read(path: &PathBuf) -> Result<Vec<FieldTrajectory>> {
    if !path.is_file() {
        return Err(CliError::new(ErrorKind::MissingFile, format!("{}: dataset file not found", path.display())));
    }
    Ok(read_dataset(path)?)
}

/// Mean spectrum over the first `n_traj` trajectories and `n_frames` frames.
fn mean_spectrum(trajs: &[FieldTrajectory], n_traj: usize, n_frames: usize) -> SpectrumReport {
    let reports: Vec<SpectrumReport> = trajs[..n_traj]
        .iter()
        .flat_map(|t| (0..n_frames).map(move |i| energy_spectrum_frame(&t.frame_f64(i).view())))
        .collect();
    SpectrumReport::mean(&reports).expect("at least one frame")
}

/// Truncation curve averaged over up to `max_fields` single-channel fields.
pub fn mean_truncation(trajs: &[FieldTrajectory], n_traj: usize, n_frames: usize, max_fields: usize) -> Vec<TruncationPoint> {
    let channels = trajs[0].frame_shape().0;
    let all: Vec<(usize, usize, usize)> =
        (0..n_traj).flat_map(|t| (0..n_frames).flat_map(move |f| (0..channels).map(move |c| (t, f, c)))).collect();
    let take = max_fields.clamp(1, all.len());
    let picks: Vec<_> = (0..take).map(|i| all[i * all.len() / take]).collect();
    let mut acc: Vec<TruncationPoint> = Vec::new();
    for &(t, f, c) in &picks {
        let curve = truncation_curve(&trajs[t].field(f, c).view());
        if acc.is_empty() {
            acc = curve.iter().map(|p| TruncationPoint { recon_mse: 0.0, spectral_mse: 0.0, energy_fraction: 0.0, ..*p }).collect();
        }
        for (a, p) in acc.iter_mut().zip(&curve) {
            a.recon_mse += p.recon_mse / picks.len() as f64;
            a.spectral_mse += p.spectral_mse / picks.len() as f64;
            a.energy_fraction += p.energy_fraction / picks.len() as f64;
        }
    }
    acc
}

pub fn run(a: SpectraArgs) -> Result<()> {
    if !a.label.is_empty() && a.label.len() != a.pred.len() {
        return Err(CliError::usage(format!("{} labels for {} --pred files", a.label.len(), a.pred.len())));
    }
    let truth = read(&a.truth)?;
    let preds = a.pred.iter().map(read).collect::<Result<Vec<_>>>()?;
    let shape = truth[0].frame_shape();
    if let Some((i, _)) = preds.iter().enumerate().find(|(_, p)| p[0].frame_shape() != shape) {
        return Err(CliError::new(ErrorKind::Data, format!("{} frames differ in shape from the truth", a.pred[i].display())));
    }
    let n_traj = preds.iter().map(|p| p.len()).chain([truth.len()]).min().expect("non-empty");
    let frames_of = |ts: &[FieldTrajectory]| ts[..n_traj].iter().map(|t| t.n_frames()).min().expect("non-empty");
    let n_frames = preds.iter().map(|p| frames_of(p)).chain([frames_of(&truth)]).min().expect("non-empty");

    let run = a.out.create(&a)?;
    let t_spec = mean_spectrum(&truth, n_traj, n_frames);
    let labels: Vec<String> =
        if a.label.is_empty() { (0..a.pred.len()).map(|i| format!("pred{i}")).collect() } else { a.label.clone() };
    let p_specs: Vec<(String, Vec<f64>)> =
        labels.iter().zip(&preds).map(|(l, p)| (l.clone(), mean_spectrum(p, n_traj, n_frames).energy)).collect();
    let truncation = mean_truncation(&truth, n_traj, n_frames, a.truncation_fields);

    let mut csv = String::from("k,truth");
    for (l, _) in &p_specs {
        csv.push_str(&format!(",{l}"));
    }
    csv.push('\n');
    for k in 0..t_spec.energy.len() {
        csv.push_str(&format!("{k},{:.9e}", t_spec.energy[k]));
        for (_, e) in &p_specs {
            csv.push_str(&format!(",{:.9e}", e[k]));
        }
        csv.push('\n');
    }
    run.write_text("spectra.csv", &csv)?;
    spectrum_svg(&run.file("spectrum.svg"), &t_spec.energy, &p_specs)?;
    truncation_svg(&run.file("truncation.svg"), &truncation)?;

    let relative_error: Vec<(String, f64)> = p_specs
        .iter()
        .map(|(l, e)| {
            let num: f64 = e.iter().zip(&t_spec.energy).map(|(p, t)| (p - t).powi(2)).sum();
            let den: f64 = t_spec.energy.iter().map(|t| t * t).sum();
            (l.clone(), (num / den).sqrt())
        })
        .collect();
    let report = json!({
        "trajectories": n_traj,
        "frames": n_frames,
        "truth": t_spec,
        "preds": p_specs.iter().map(|(l, e)| json!({ "label": l, "energy": e })).collect::<Vec<_>>(),
        "spectrum_rel_error": relative_error.iter().map(|(l, v)| json!({ "label": l, "value": v })).collect::<Vec<_>>(),
        "truth_fraction_at_8": t_spec.fraction_at(REPORT_SHELL),
        "truncation": truncation,
    });
    run.write_json("spectra.json", &report)?;
    emit(json!({ "run_dir": run.path, "truth_fraction_at_8": t_spec.fraction_at(REPORT_SHELL), "spectrum_rel_error": report["spectrum_rel_error"] }));
    Ok(())
}
