use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};
use partsplit::analysis::{concept_threshold, orthogonality_residual, part_assignment, part_sparsity};
use partsplit::editing::{edit_features, mask_part};
use partsplit::factorization::{fit, loss};
use partsplit::io::{
    load_model, load_truth, read_array, read_batch, read_batch_with_dims, read_matrix, save_model, save_truth,
    write_array, write_batch, write_mask, EditRecord,
};
use partsplit::metrics::{mse_map, roir as roir_metric};
use partsplit::refinement::{refine_parts, RefineConfig};
use partsplit::synthetic::{plant, recovery_score, PlantDims};
use partsplit::{ActivationBatch, EditSpec, FactorModel, ImageBatch, RoiMask};

use crate::{config, BatchInput, CliError, DecomposeArgs, EditArgs, InspectArgs, RefineArgs, RoirArgs, SaliencyArgs, SynthArgs};

type Result<T = ()> = std::result::Result<T, CliError>;

fn load_batch(input: &BatchInput) -> Result<ActivationBatch> {
    Ok(match (input.height, input.width) {
        (Some(h), Some(w)) => read_batch_with_dims(&input.input, h, w)?,
        _ => read_batch(&input.input)?,
    })
}

fn create_dir(dir: &Path) -> Result {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result {
    fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<FactorModel> {
    Ok(load_model(path)?.0)
}

fn check_model_fits(model: &FactorModel, batch: &ActivationBatch) -> Result {
    if model.channels() != batch.channels() || model.spatial_dims() != (batch.height(), batch.width()) {
        let (h, w) = model.spatial_dims();
        return Err(CliError::data(format!(
            "model expects C={} on a {h}x{w} grid, batch has C={} on {}x{}",
            model.channels(),
            batch.channels(),
            batch.height(),
            batch.width()
        )));
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result {
    let dims = PlantDims {
        samples: args.samples,
        channels: args.channels,
        height: args.height,
        width: args.width,
    };
    let (batch, truth) = plant(dims, (args.rank_appearance, args.rank_parts), args.noise, args.seed)?;
    create_dir(&args.out)?;
    write_batch(&batch, args.out.join("acts.npy"))?;
    save_truth(&truth, args.out.join("truth"))?;
    println!(
        "wrote {} samples (C={}, {}x{}) to {}",
        batch.len(),
        batch.channels(),
        batch.height(),
        batch.width(),
        args.out.display()
    );
    Ok(())
}

pub fn decompose(args: &DecomposeArgs) -> Result {
    let cfg = config::resolve(&args.overrides, args.config.as_deref())?;
    let batch = load_batch(&args.batch)?;
    cfg.validate(&batch)?;
    let model = fit(&batch, &cfg)?;

    create_dir(&args.out)?;
    save_model(&model, Some(&cfg), &args.out)?;
    let stats = model.stats();
    let mut trace = String::from("iteration,loss\n");
    for r in &stats.loss_trace {
        writeln!(trace, "{},{}", r.iteration, r.loss).unwrap();
    }
    write_text(&args.out.join("loss_trace.csv"), &trace)?;
    println!("iterations: {}", stats.iterations);
    println!("converged: {}", stats.converged);
    println!("final_loss: {:e}", stats.final_loss);
    println!("relative_error: {:e}", (stats.final_loss / batch.squared_norm()).sqrt());
    Ok(())
}

pub fn refine(args: &RefineArgs) -> Result {
    let model = load(&args.model)?;
    let batch = load_batch(&args.batch)?;
    check_model_fits(&model, &batch)?;
    let indices: Vec<usize> = if args.samples.is_empty() {
        (0..batch.len()).collect()
    } else {
        args.samples.clone()
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= batch.len()) {
        return Err(CliError::usage(format!("sample {bad} out of range (N = {})", batch.len())));
    }
    let cfg = RefineConfig {
        iterations: args.iterations,
        learning_rate: args.learning_rate,
        step_rule: args.step_rule,
    };

    let (s, rs) = model.parts().dim();
    let mut stacked = Array3::zeros((indices.len(), s, rs));
    let mut csv = String::from("sample,iterations,initial_loss,final_loss\n");
    for (slot, &i) in indices.iter().enumerate() {
        let sample = batch.sample(i).expect("index checked");
        let r = refine_parts(sample, model.appearance(), model.parts(), &cfg)?;
        stacked.index_axis_mut(Axis(0), slot).assign(&r.parts);
        writeln!(csv, "{i},{},{},{}", r.iterations_run, r.initial_loss, r.final_loss).unwrap();
    }
    create_dir(&args.out)?;
    write_array(stacked.view().into_dyn(), args.out.join("refined_parts.npy"))?;
    write_text(&args.out.join("refine.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn saliency(args: &SaliencyArgs) -> Result {
    let model = load(&args.model)?;
    let batch = load_batch(&args.batch)?;
    check_model_fits(&model, &batch)?;
    let (mu, maps, masks) = concept_threshold(&batch, model.appearance(), args.concept)?;

    let (n, h, w) = (batch.len(), batch.height(), batch.width());
    let mut values = Array3::zeros((n, h, w));
    let mut bits = Array3::from_elem((n, h, w), false);
    for (i, (map, mask)) in maps.iter().zip(&masks).enumerate() {
        let v = if args.normalize { map.normalized() } else { map.values.clone() };
        let folded = v.into_shape_with_order((h, w)).expect("map length is H*W");
        values.index_axis_mut(Axis(0), i).assign(&folded);
        bits.index_axis_mut(Axis(0), i).assign(&mask.folded());
    }
    create_dir(&args.out)?;
    write_array(values.view().into_dyn(), args.out.join("saliency.npy"))?;
    write_mask(bits.view().into_dyn(), args.out.join("masks.npy"))?;
    let covered = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
    println!("threshold: {mu}");
    println!("coverage: {covered}");
    Ok(())
}

/// Reads a part footprint stored as a length-S vector or an H x W map.
fn read_part(path: &Path, s: usize) -> Result<Array1<f64>> {
    let a: ArrayD<f64> = read_array(path)?;
    let shape = a.shape().to_vec();
    let v = match a.ndim() {
        1 => a.into_dimensionality::<Ix1>().expect("ndim checked"),
        2 => {
            let m = a.into_dimensionality::<Ix2>().expect("ndim checked");
            partsplit::tensor::flatten_spatial(m.view())
        }
        _ => return Err(CliError::data(format!("{}: part must be 1-D or 2-D, got {shape:?}", path.display()))),
    };
    if v.len() != s {
        return Err(CliError::data(format!(
            "{}: part has {} entries, model has S = {s}",
            path.display(),
            v.len()
        )));
    }
    Ok(v)
}

pub fn edit(args: &EditArgs) -> Result {
    let model = load(&args.model)?;
    let batch = load_batch(&args.batch)?;
    check_model_fits(&model, &batch)?;
    let s = model.spatial();

    let (appearance_index, alpha, part_index, part_file, norm) = match &args.record {
        Some(path) => {
            let rec = EditRecord::read(path)?;
            (rec.appearance_index, rec.alpha, rec.part_index, rec.part_path, rec.norm)
        }
        None => (
            args.appearance.expect("required by clap"),
            args.alpha.expect("required by clap"),
            args.part_index,
            args.part_file.clone(),
            args.norm,
        ),
    };
    let mut part = match (part_index, part_file) {
        (Some(k), None) => {
            if k >= model.ranks().1 {
                return Err(CliError::usage(format!("part index {k} out of range (R_S = {})", model.ranks().1)));
            }
            model.parts().column(k).to_owned()
        }
        (None, Some(path)) => read_part(&path, s)?,
        _ => return Err(CliError::usage("give exactly one of --part-index and --part-file")),
    };
    if let Some(mask_path) = &args.mask {
        let m = read_matrix(mask_path)?;
        if m.dim() != model.spatial_dims() {
            return Err(CliError::data(format!(
                "{}: mask is {:?}, grid is {:?}",
                mask_path.display(),
                m.dim(),
                model.spatial_dims()
            )));
        }
        part = mask_part(part.view(), partsplit::tensor::flatten_spatial(m.view()).view())?;
    }
    if appearance_index >= model.ranks().0 {
        return Err(CliError::usage(format!(
            "appearance index {appearance_index} out of range (R_C = {})",
            model.ranks().0
        )));
    }
    let spec = EditSpec::new(appearance_index, part, alpha)?.with_norm(norm);
    let edited = batch
        .samples()
        .iter()
        .map(|z| edit_features(z, model.appearance(), &spec))
        .collect::<partsplit::Result<Vec<_>>>()?;
    let edited = ActivationBatch::new(edited)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_batch(&edited, &args.out)?;
    println!("edited {} samples: appearance {appearance_index}, alpha {alpha}", edited.len());
    Ok(())
}

/// Loads `N x H x W x C` images, or an `N x C x S` batch with a sidecar.
fn load_images(path: &Path) -> Result<ImageBatch> {
    let raw = read_array(path)?;
    let data: Array4<f64> = match raw.ndim() {
        4 => raw.into_dimensionality::<Ix4>().expect("ndim checked"),
        3 => {
            let batch = read_batch(path)?;
            let (h, w, c) = (batch.height(), batch.width(), batch.channels());
            let mut out = Array4::zeros((batch.len(), h, w, c));
            for (mut slot, z) in out.outer_iter_mut().zip(batch.samples()) {
                slot.assign(&z.to_raw());
            }
            out
        }
        _ => {
            return Err(CliError::data(format!(
                "{}: expected N x H x W x C or N x C x S, got {:?}",
                path.display(),
                raw.shape()
            )))
        }
    };
    Ok(ImageBatch::new(data)?)
}

pub fn roir(args: &RoirArgs) -> Result {
    let original = load_images(&args.original)?;
    let edited = load_images(&args.edited)?;
    let mask = RoiMask::new(read_matrix(&args.mask)?)?;
    let report = roir_metric(&mask, &original, &edited)?;
    if let Some(path) = &args.mse_out {
        write_array(mse_map(&original, &edited)?.view().into_dyn(), path)?;
    }
    println!("index,ratio");
    for (i, r) in &report.per_sample {
        println!("{i},{r}");
    }
    for i in &report.excluded {
        println!("{i},excluded");
    }
    println!("mean ± std: {} ± {}", report.mean, report.std);
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> Result {
    let model = load(&args.model)?;
    let (h, w) = model.spatial_dims();
    let (rc, rs) = model.ranks();
    println!("channels: {}", model.channels());
    println!("grid: {h}x{w}");
    println!("ranks: {rc} {rs}");
    println!("nonneg: {}", model.nonneg());
    println!("orthogonality_residual: {:e}", orthogonality_residual(model.appearance()));
    let sparsity = part_sparsity(model.parts());
    let joined: Vec<String> = sparsity.iter().map(|v| format!("{v:.6}")).collect();
    println!("part_sparsity: {}", joined.join(" "));
    println!("mean_part_sparsity: {:.6}", sparsity.iter().sum::<f64>() / sparsity.len() as f64);
    println!("part_assignment:");
    let labels = part_assignment(model.parts());
    for row in labels.chunks(w) {
        let line: Vec<String> = row.iter().map(|k| k.to_string()).collect();
        println!("  {}", line.join(" "));
    }
    if let Some(path) = &args.input {
        let batch = read_batch(path)?;
        check_model_fits(&model, &batch)?;
        let l = loss(&batch, model.appearance(), model.parts())?;
        println!("relative_error: {:e}", (l / batch.squared_norm()).sqrt());
    }
    if let Some(dir) = &args.truth {
        let truth = load_truth(dir)?;
        let score = recovery_score(&model, &truth)?;
        let ious: Vec<String> = score.part_iou.iter().map(|v| format!("{v:.6}")).collect();
        println!("appearance_angle: {:e}", score.appearance_angle);
        println!("part_iou: {}", ious.join(" "));
        println!("mean_part_iou: {:.6}", score.mean_part_iou());
    }
    Ok(())
}
