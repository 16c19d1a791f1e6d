use std::path::{Path, PathBuf};

use ctn_core::fusion::{Ctn, CtnConfig, FusionMode};
use ctn_core::metrics::{evaluate, CohortMean, CohortReport, EvalOptions};
use ctn_core::params::ParamStore;
use ctn_core::train::{fit, load_checkpoint, load_model, predict_mask, Dataset, EpochRecord, TrainState};
use ctn_core::volio::{
    generate_phantom, read_label, read_volume, write_label, write_volume, LabelMask, Manifest, ManifestEntry,
    PhantomSpec, Split, Volume,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".hdr.json").trim_end_matches(".raw").to_string()
}

/// Writes `count` phantoms and a manifest with train/val/test rows in that order.
pub fn gen_data(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let out = cfg.prepare_output()?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let [train, val, _] = cfg.data.split_counts();
    let mut entries = Vec::with_capacity(cfg.data.count);
    for i in 0..cfg.data.count {
        let spec = PhantomSpec {
            seed: cfg.phantom.seed.wrapping_add(i as u64),
            ..cfg.phantom.clone()
        };
        let (volume, label) = generate_phantom(&spec)?;
        let stem = format!("case_{i:03}");
        write_volume(&volume, Some(&label), &images.join(&stem))?;
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            image: PathBuf::from(format!("images/{stem}.hdr.json")),
            label: PathBuf::from(format!("images/{stem}.label.hdr.json")),
            split,
        });
    }
    let manifest = Manifest {
        entries,
        root: out.clone(),
    };
    manifest.write(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Trains from the manifest, continuing from `<output_dir>/last` when `resume` is set.
pub fn train(cfg: &RunConfig, resume: bool, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainState, CliError> {
    let out = cfg.prepare_output()?;
    let manifest = Manifest::read(cfg.manifest()?)?;
    let data = Dataset::from_manifest(&manifest, cfg.model.input_size, cfg.train.val_fraction)?;
    let state = if resume {
        let (saved, state) = load_checkpoint(&out.join("last"))?;
        if saved.model != cfg.model {
            return Err(CliError::Config("the model section differs from the checkpoint being resumed".into()));
        }
        Some(state)
    } else {
        None
    };
    Ok(fit(&cfg.model, &cfg.train, &data, Some(&out), state, on_epoch)?.state)
}

/// Network structure for `model_cfg` with `params` checked against it.
fn bind_model(model_cfg: &CtnConfig, params: &ParamStore) -> Result<Ctn, CliError> {
    let mut fresh = ParamStore::new();
    let model = Ctn::new(model_cfg, &mut fresh, 0)?;
    if !fresh.same_layout(params) {
        return Err(CliError::Config("checkpoint parameters do not match its configuration".into()));
    }
    Ok(model)
}

fn eval_entries(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<ManifestEntry>, CliError> {
    let split = cfg.eval.split.unwrap_or(Split::Test);
    let entries: Vec<ManifestEntry> = manifest.split(split).into_iter().cloned().collect();
    if entries.is_empty() {
        return Err(ctn_core::Error::Dataset(format!("the {split} split is empty")).into());
    }
    Ok(entries)
}

/// Scores one set of parameters on `entries` at the original resolution.
fn score_model(
    model: &Ctn,
    params: &ParamStore,
    manifest: &Manifest,
    entries: &[ManifestEntry],
    opts: &EvalOptions,
) -> Result<CohortReport, CliError> {
    let mut report = CohortReport::default();
    for e in entries {
        let image = manifest.resolve(&e.image);
        let (volume, _) = read_volume(&image)?;
        let gt = read_label(&manifest.resolve(&e.label))?;
        let pred = predict_mask(model, params, &volume)?;
        report.push(file_stem(&image), evaluate(&pred, &gt, opts)?);
    }
    Ok(report)
}

/// Per-volume and mean metrics, written as `metrics.csv` and `metrics.json`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<CohortReport, CliError> {
    let out = cfg.prepare_output()?;
    let manifest = Manifest::read(cfg.manifest()?)?;
    let entries = eval_entries(cfg, &manifest)?;
    let opts = EvalOptions {
        skeleton_scope: cfg.eval.skeleton_scope,
    };
    let report = match &cfg.eval.predictions_dir {
        Some(dir) => {
            let mut cases = Vec::with_capacity(entries.len());
            for e in &entries {
                let gt_path = manifest.resolve(&e.label);
                let name = gt_path.file_name().ok_or_else(|| CliError::Config("label path has no file name".into()))?;
                let pred = read_label(&dir.join(name))?;
                cases.push((file_stem(&manifest.resolve(&e.image)), pred, read_label(&gt_path)?));
            }
            CohortReport::evaluate_all(&cases, &opts)?
        }
        None => {
            let (model_cfg, params) = load_model(cfg.checkpoint()?)?;
            let model = bind_model(&model_cfg, &params)?;
            score_model(&model, &params, &manifest, &entries, &opts)?
        }
    };
    report.write(&out, "metrics")?;
    Ok(report)
}

/// Writes `<output_dir>/<id>.label.{hdr.json,raw}` for each input volume.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let out = cfg.prepare_output()?;
    let (model_cfg, params) = load_model(cfg.checkpoint()?)?;
    let model = bind_model(&model_cfg, &params)?;
    let inputs: Vec<PathBuf> = if cfg.predict.inputs.is_empty() {
        let manifest = Manifest::read(cfg.manifest()?)?;
        eval_entries(cfg, &manifest)?
            .iter()
            .map(|e| manifest.resolve(&e.image))
            .collect()
    } else {
        cfg.predict.inputs.clone()
    };
    let mut written = Vec::with_capacity(inputs.len());
    for input in inputs {
        let (volume, _): (Volume, Option<LabelMask>) = read_volume(&input)?;
        let mask = predict_mask(&model, &params, &volume)?;
        let path = out.join(format!("{}.label", file_stem(&input)));
        write_label(&mask, volume.origin, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// One ablation row: the configuration and its mean test metrics.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub mode: FusionMode,
    /// Whether each of the four U-Net stages receives Swin features.
    pub stages: [bool; 4],
    pub mean: CohortMean,
}

#[derive(Serialize)]
struct AblationCsv<'a> {
    name: &'a str,
    mode: FusionMode,
    f11: u8,
    f22: u8,
    f33: u8,
    f44: u8,
    dice: f64,
    dice_a: f64,
    dice_c: f64,
    assd_mm: String,
    sp: f64,
    sr: f64,
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for r in rows {
        let m = &r.mean;
        w.serialize(AblationCsv {
            name: &r.name,
            mode: r.mode,
            f11: r.stages[0].into(),
            f22: r.stages[1].into(),
            f33: r.stages[2].into(),
            f44: r.stages[3].into(),
            dice: m.dice,
            dice_a: m.dice_a,
            dice_c: m.dice_c,
            assd_mm: m.assd_mm.map(|v| v.to_string()).unwrap_or_default(),
            sp: m.sp,
            sr: m.sr,
        })
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn stage_name(stages: &[usize]) -> String {
    if stages.is_empty() {
        "baseline".to_string()
    } else {
        format!("stages_{}", stages.iter().map(usize::to_string).collect::<Vec<_>>().join(""))
    }
}

/// Trains and scores the stage grid, then the fusion-mode pair with every stage
/// fused. Writes `ablation_stages.csv` and `ablation_fusion.csv`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<(Vec<AblationRow>, Vec<AblationRow>), CliError> {
    let out = cfg.prepare_output()?;
    let manifest = Manifest::read(cfg.manifest()?)?;
    let data = Dataset::from_manifest(&manifest, cfg.model.input_size, cfg.train.val_fraction)?;
    let entries = eval_entries(cfg, &manifest)?;
    let opts = EvalOptions {
        skeleton_scope: cfg.eval.skeleton_scope,
    };
    let mut run = |name: String, model_cfg: CtnConfig| -> Result<AblationRow, CliError> {
        let dir = out.join("ablate").join(&name);
        let state = fit(&model_cfg, &cfg.train, &data, Some(&dir), None, &mut |r| on_epoch(&name, r))?.state;
        let model = bind_model(&model_cfg, &state.params)?;
        let report = score_model(&model, &state.params, &manifest, &entries, &opts)?;
        report.write(&dir, "metrics")?;
        Ok(AblationRow {
            name,
            mode: model_cfg.fusion.mode,
            stages: std::array::from_fn(|i| model_cfg.fusion.is_enabled(i + 1)),
            mean: report.mean(),
        })
    };
    let mut stage_rows = Vec::new();
    for stages in &cfg.ablate.stage_grid {
        let mut m = cfg.model.clone();
        m.fusion.enabled_stages = stages.clone();
        stage_rows.push(run(stage_name(stages), m)?);
    }
    let mut mode_rows = Vec::new();
    for &mode in &cfg.ablate.modes {
        let mut m = cfg.model.clone();
        m.fusion.mode = mode;
        m.fusion.enabled_stages = vec![1, 2, 3, 4];
        let name = match mode {
            FusionMode::Add => "fusion_add",
            FusionMode::Concat => "fusion_concat",
        };
        mode_rows.push(run(name.to_string(), m)?);
    }
    write_ablation(&out.join("ablation_stages.csv"), &stage_rows)?;
    write_ablation(&out.join("ablation_fusion.csv"), &mode_rows)?;
    Ok((stage_rows, mode_rows))
}
