use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nf_core::eval::{export_error_map, mst_orient, pca_normals, EvalReport, ReportMeta};
use nf_core::gvo::{refine_field, train_gvo as fit_patch_network, GvoNetwork};
use nf_core::ngl::{extract_gradients, train_ngl, NormalField};
use nf_core::nn::{load_checkpoint, save_checkpoint, Mlp};
use nf_core::pointcloud::{
    corrupt, load_cloud, load_normals, normalize_cloud, save_cloud, save_normals, synth_shape, write_ply, CloudFormat,
    PlyEncoding, PlyWriteOptions, ShapeKind,
};
use nf_core::PointCloud;

use crate::config::{RunConfig, StageChoice};
use crate::{Baseline, CliError, EstimateArgs, EvalArgs, FileFormat, SynthArgs, TrainArgs};

/// Seeds of independent steps within one command.
const CORRUPT_STREAM: u64 = 0x5eed_0001;
const CORPUS_STREAM: u64 = 0x5eed_0002;
const REFINE_STREAM: u64 = 0x5eed_0003;

struct Layout {
    checkpoints: PathBuf,
    normals: PathBuf,
    reports: PathBuf,
    logs: PathBuf,
}

impl Layout {
    fn create(root: &Path) -> Result<Layout, CliError> {
        let l = Layout {
            checkpoints: root.join("checkpoints"),
            normals: root.join("normals"),
            reports: root.join("reports"),
            logs: root.join("logs"),
        };
        for d in [&l.checkpoints, &l.normals, &l.reports, &l.logs] {
            create_dir(d)?;
        }
        Ok(l)
    }
}

fn create_dir(d: &Path) -> Result<(), CliError> {
    fs::create_dir_all(d).map_err(|source| CliError::Io {
        path: d.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".into())
}

fn require_input(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.input
        .as_deref()
        .ok_or_else(|| CliError::Usage("an input cloud is required (--input)".into()))
}

fn read_cloud(path: &Path) -> Result<PointCloud, CliError> {
    Ok(load_cloud(path, CloudFormat::from_path(path)?)?)
}

pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    create_dir(&cfg.output_dir)?;
    let clean = synth_shape(args.kind, args.n, cfg.seed)?;
    let cloud = corrupt(&clean, args.noise, args.density, cfg.seed ^ CORRUPT_STREAM)?;
    let name = args.name.clone().unwrap_or_else(|| args.kind.name().to_string());
    let (ext, format) = match args.format {
        FileFormat::Xyz => ("xyz", CloudFormat::Xyz),
        FileFormat::Ply => ("ply", CloudFormat::Ply),
    };
    let path = cfg.output_dir.join(format!("{name}.{ext}"));
    save_cloud(&cloud, &path, format)?;
    info!("wrote {} points to {}", cloud.len(), path.display());
    Ok(())
}

/// Fits the field on the normalized cloud and returns the network and its
/// gradient normals, which are unchanged by the normalization.
fn fit_field(cfg: &RunConfig, cloud: &PointCloud, layout: &Layout, name: &str) -> Result<(Mlp, NormalField), CliError> {
    let unit = normalize_cloud(cloud)?;
    let (net, log) = train_ngl(&unit, &cfg.ngl, cfg.seed)?;
    write_text(&layout.logs.join(format!("{name}.ngl_loss.csv")), &log.to_csv())?;
    let (field, patched) = extract_gradients(&net, &unit)?;
    if !patched.is_empty() {
        info!("{} points took neighbor-averaged vectors", patched.len());
    }
    Ok((net, field))
}

/// Writes a report against the cloud's own normals, when it has them.
fn report_if_labeled(
    cloud: &PointCloud,
    field: &NormalField,
    layout: &Layout,
    name: &str,
    stage: &str,
) -> Result<(), CliError> {
    if let Some(gt) = cloud.gt_normals() {
        let meta = ReportMeta {
            shape: name.to_string(),
            noise: 0.0,
            stage: stage.to_string(),
        };
        let report = EvalReport::new(&field.vectors, gt, meta)?;
        write_text(&layout.reports.join(format!("{name}.{stage}.txt")), &report.to_text())?;
        info!(
            "{stage}: oriented rmse {:.3}, agreement {:.4}",
            report.rmse_oriented, report.agreement
        );
    }
    Ok(())
}

pub fn fit_ngl(cfg: &RunConfig) -> Result<(), CliError> {
    let input = require_input(cfg)?;
    let cloud = read_cloud(input)?;
    let layout = Layout::create(&cfg.output_dir)?;
    let name = stem(input);
    write_text(&layout.logs.join("fit-ngl.config"), &cfg.to_string())?;
    let (net, field) = fit_field(cfg, &cloud, &layout, &name)?;
    save_checkpoint(&net, &layout.checkpoints.join(format!("{name}.ngl.ckpt")))?;
    save_normals(&layout.normals.join(format!("{name}.coarse.normals")), &field.vectors)?;
    report_if_labeled(&cloud, &field, &layout, &name, "coarse")
}

pub fn train_gvo(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let layout = Layout::create(&cfg.output_dir)?;
    write_text(&layout.logs.join("train-gvo.config"), &cfg.to_string())?;
    let corpus: Vec<PointCloud> = if args.inputs.is_empty() {
        ShapeKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| synth_shape(k, args.corpus_size, cfg.seed ^ CORPUS_STREAM.wrapping_add(i as u64)))
            .collect::<Result<_, _>>()?
    } else {
        args.inputs.iter().map(|p| read_cloud(p)).collect::<Result<_, _>>()?
    };
    let (net, log) = fit_patch_network(&corpus, &cfg.gvo, cfg.seed)?;
    save_checkpoint(&net, &layout.checkpoints.join("gvo.ckpt"))?;
    write_text(&layout.logs.join("gvo_loss.csv"), &log.to_csv())?;
    let totals = log.totals();
    let mut summary = format!("shapes = {}\nepochs = {}\n", corpus.len(), totals.len());
    if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
        summary.push_str(&format!(
            "first_loss = {first}\nlast_loss = {last}\nratio = {}\n",
            last / first
        ));
    }
    write_text(&layout.reports.join("gvo_train.txt"), &summary)
}

pub fn estimate(cfg: &RunConfig, args: &EstimateArgs) -> Result<(), CliError> {
    let input = require_input(cfg)?;
    if cfg.stage == StageChoice::Refined && cfg.gvo_checkpoint.is_none() {
        return Err(CliError::Usage(
            "the refined stage needs --gvo-checkpoint (or use --stage coarse)".into(),
        ));
    }
    let cloud = read_cloud(input)?;
    let layout = Layout::create(&cfg.output_dir)?;
    let name = stem(input);
    write_text(&layout.logs.join("estimate.config"), &cfg.to_string())?;
    let coarse = match &cfg.ngl_checkpoint {
        Some(path) => {
            let net: Mlp = load_checkpoint(path)?;
            extract_gradients(&net, &normalize_cloud(&cloud)?)?.0
        }
        None => {
            let (net, field) = fit_field(cfg, &cloud, &layout, &name)?;
            save_checkpoint(&net, &layout.checkpoints.join(format!("{name}.ngl.ckpt")))?;
            field
        }
    };
    save_normals(&layout.normals.join(format!("{name}.coarse.normals")), &coarse.vectors)?;
    report_if_labeled(&cloud, &coarse, &layout, &name, "coarse")?;
    let result = match (cfg.stage, &cfg.gvo_checkpoint) {
        (StageChoice::Refined, Some(path)) => {
            let net: GvoNetwork = load_checkpoint(path)?;
            let refined = refine_field(&net, &cloud, &coarse, &cfg.gvo, cfg.seed ^ REFINE_STREAM)?;
            save_normals(
                &layout.normals.join(format!("{name}.refined.normals")),
                &refined.vectors,
            )?;
            report_if_labeled(&cloud, &refined, &layout, &name, "refined")?;
            refined
        }
        _ => coarse,
    };
    if args.ply {
        let path = layout.normals.join(format!("{name}.{}.ply", cfg.stage));
        write_ply(
            &path,
            cloud.points(),
            &PlyWriteOptions {
                encoding: PlyEncoding::Ascii,
                normals: Some(&result.vectors),
                colors: None,
                comments: vec![format!("stage {}", cfg.stage)],
            },
        )?;
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let input = require_input(cfg)?;
    let cloud = read_cloud(input)?;
    let layout = Layout::create(&cfg.output_dir)?;
    let reference: Vec<_> = match &args.reference {
        Some(p) => load_normals(p)?,
        None => cloud
            .gt_normals()
            .ok_or_else(|| {
                CliError::Usage("no reference normals: the input has none and --reference is missing".into())
            })?
            .to_vec(),
    };
    let (estimates, default_label) = match (args.baseline, &args.normals) {
        (Some(Baseline::PcaMst), _) => {
            let pca = pca_normals(&cloud, cfg.pca_k)?;
            let oriented = mst_orient(&cloud, &pca, cfg.mst_k)?;
            save_normals(
                &layout.normals.join(format!("{}.baseline.normals", stem(input))),
                &oriented.vectors,
            )?;
            (oriented.vectors, "pca+mst".to_string())
        }
        (None, Some(p)) => (load_normals(p)?, stem(p)),
        (None, None) => return Err(CliError::Usage("give --normals or --baseline".into())),
    };
    let label = args.label.clone().unwrap_or(default_label);
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| format!("{}.{}", stem(input), label));
    let meta = ReportMeta {
        shape: args.shape.clone().unwrap_or_else(|| stem(input)),
        noise: args.noise,
        stage: label,
    };
    let report = EvalReport::new(&estimates, &reference, meta)?;
    write_text(&layout.reports.join(format!("{name}.report.txt")), &report.to_text())?;
    write_text(&layout.reports.join(format!("{name}.pgp.csv")), &report.pgp_csv())?;
    if args.error_map {
        export_error_map(
            &cloud,
            &report.oriented,
            &layout.reports.join(format!("{name}.errors.ply")),
        )?;
    }
    info!(
        "oriented rmse {:.3}, unoriented rmse {:.3}",
        report.rmse_oriented, report.rmse_unoriented
    );
    Ok(())
}
