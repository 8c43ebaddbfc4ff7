use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use atlasforge::fusion::{
    consensus_roi, majority_vote, mrf_regularize, staple_multilabel, steps_fuse, vote_prior,
    FusionMode,
};
use atlasforge::grid::{AtlasPair, CardiacPhase, LabelMap};
use atlasforge::io::{load_image, load_labels, save_image, save_labels};
use atlasforge::manifest::{write_json, AtlasManifest, CaseManifest};
use atlasforge::metrics::{CaseMetrics, MetricReport, SliceMetrics, Volumes, MYOCARDIAL_DENSITY};
use atlasforge::phantom::{make_cohort, write_cohort, CohortParams, PhantomSpec, Variability};
use atlasforge::pipeline::{segment_case, CaseReport, PipelineConfig};
use atlasforge::registration::{block_match_register, ffd_register, Model};
use atlasforge::transform::{
    resample_intensity, resample_labels, to_field, BSplineFFD, Geometry, Transform,
};
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, FuseMethod, Global, Overrides, RegisterModel};

/// Contents of a `--config` file. Every field is optional; flags win.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub atlases: Option<PathBuf>,
    pub cases: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub verbose: u8,
}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    atlasforge::Error::InvalidArgument(msg.into()).into()
}

pub fn load_run_config(global: &Global) -> Result<RunConfig> {
    let Some(path) = &global.config else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| atlasforge::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let rc: RunConfig = serde_json::from_str(&text).map_err(|source| atlasforge::Error::Json {
        path: path.clone(),
        source,
    })?;
    // relative paths in the config are relative to the config file
    let base = path.parent().unwrap_or(Path::new("."));
    let fix = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };
    Ok(RunConfig {
        atlases: rc.atlases.as_ref().map(fix),
        cases: rc.cases.iter().map(fix).collect(),
        out: rc.out.as_ref().map(fix),
        ..rc
    })
}

#[cfg(feature = "parallel")]
pub fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| config_error(e.to_string()))?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if n > 1 {
        log::info!("built without the parallel feature; --jobs {n} runs sequentially");
    }
    f()
}

fn pipeline_config(rc: &RunConfig, o: &Overrides) -> Result<PipelineConfig> {
    let mut c = rc.pipeline.clone();
    if let Some(m) = o.phase2_model {
        c.phase2_model = m.into();
    }
    if let Some(f) = o.top_fraction {
        c.fusion.top_fraction = f;
    }
    if let Some(n) = o.local_n {
        c.fusion.local_n = Some(n);
    }
    if let Some(b) = o.mrf_beta {
        c.fusion.mrf_beta = b;
    }
    c.validate()?;
    Ok(c)
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(atlasforge::Error::Io {
            path: p.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        }
        .into());
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        atlasforge::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        atlasforge::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Where `segment` writes slice `k` of `phase` for a case.
pub fn prediction_path(root: &Path, case_id: &str, phase: CardiacPhase, k: usize) -> PathBuf {
    root.join(case_id)
        .join(format!("{}_slice{k}.hdr", phase.name().to_lowercase()))
}

pub fn run(cli: &Cli, rc: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::Segment {
            atlases,
            cases,
            out,
            overrides,
        } => {
            let config = pipeline_config(rc, overrides)?;
            let atlases = atlases
                .clone()
                .or_else(|| rc.atlases.clone())
                .ok_or_else(|| config_error("--atlases is required"))?;
            let cases = if cases.is_empty() {
                rc.cases.clone()
            } else {
                cases.clone()
            };
            if cases.is_empty() {
                return Err(config_error("at least one --case is required"));
            }
            let out = out
                .clone()
                .or_else(|| rc.out.clone())
                .ok_or_else(|| config_error("--out is required"))?;
            segment(&atlases, &cases, &out, &config)
        }
        Command::Register {
            fixed,
            moving,
            moving_labels,
            model,
            out,
        } => register(
            fixed,
            moving,
            moving_labels.as_deref(),
            *model,
            out,
            &rc.pipeline,
        ),
        Command::Fuse {
            labels,
            method,
            target,
            images,
            out,
            overrides,
        } => {
            let config = pipeline_config(rc, overrides)?;
            fuse(labels, *method, target.as_deref(), images, out, &config)
        }
        Command::Evaluate { cases, pred, out } => evaluate(cases, pred, out),
        Command::Phantom {
            n,
            cases,
            slices,
            warp_max,
            small,
            out,
        } => {
            let seed = cli.global.seed.or(rc.seed).unwrap_or(0);
            phantom(*n, *cases, *slices, *warp_max, *small, seed, out)
        }
        Command::Validate {
            paths,
            atlases,
            cases,
        } => {
            let mut all: Vec<PathBuf> = paths.clone();
            all.extend(atlases.iter().cloned());
            all.extend(cases.iter().cloned());
            if all.is_empty() {
                return Err(config_error("nothing to validate"));
            }
            for p in &all {
                let kind = validate(p).with_context(|| format!("validating {}", p.display()))?;
                println!("ok {} ({kind})", p.display());
            }
            Ok(())
        }
    }
}

fn segment(
    atlas_path: &Path,
    cases: &[PathBuf],
    out: &Path,
    config: &PipelineConfig,
) -> Result<()> {
    require_file(atlas_path)?;
    let manifest = AtlasManifest::read(atlas_path)?;
    let ed = manifest.load_phase(atlas_path, CardiacPhase::ED)?;
    let es = manifest.load_phase(atlas_path, CardiacPhase::ES)?;
    create_dir(out)?;
    write_json(config, out.join("config.json"))?;
    for case_path in cases {
        require_file(case_path)?;
        let case = CaseManifest::read(case_path)?.load(case_path)?;
        log::info!("segmenting case {}", case.case_id);
        let result = segment_case(&case, ed.as_ref(), es.as_ref(), config)?;
        for (&phase, maps) in &result.labels {
            for (k, m) in maps.iter().enumerate() {
                save_labels(m, prediction_path(out, &case.case_id, phase, k))?;
            }
        }
        let dir = out.join(&case.case_id);
        write_json(&result.report, dir.join("report.json"))?;
        write_json(&result.timing, dir.join("timings.json"))?;
        let degraded = result
            .report
            .slices
            .iter()
            .filter(|s| s.diagnostics.error.is_some())
            .count();
        if degraded > 0 {
            log::warn!(
                "case {}: {degraded} slice(s) fell back to background",
                case.case_id
            );
        }
    }
    Ok(())
}

fn register(
    fixed: &Path,
    moving: &Path,
    moving_labels: Option<&Path>,
    model: RegisterModel,
    out: &Path,
    config: &PipelineConfig,
) -> Result<()> {
    let reference = load_image(fixed)?;
    let floating = load_image(moving)?;
    let g = Geometry::of(&reference);
    let global_model = if model == RegisterModel::Rigid {
        Model::Rigid
    } else {
        Model::Affine
    };
    let t = block_match_register(&reference, &floating, global_model, &config.block, None)?;
    create_dir(out)?;
    write_text(&out.join("transform.txt"), &t.to_text())?;
    let field = if model == RegisterModel::Ffd {
        let res = ffd_register(&reference, &floating, &to_field(&t, g), &config.ffd, None)?;
        res.ffd.save(out.join("ffd.txt"))?;
        res.field
    } else {
        to_field(&t, g)
    };
    save_image(
        &resample_intensity(&floating, &field),
        out.join("warped.hdr"),
    )?;
    if let Some(p) = moving_labels {
        save_labels(
            &resample_labels(&load_labels(p)?, &field),
            out.join("warped_labels.hdr"),
        )?;
    }
    Ok(())
}

fn fuse(
    label_paths: &[PathBuf],
    method: FuseMethod,
    target: Option<&Path>,
    images: &[PathBuf],
    out: &Path,
    config: &PipelineConfig,
) -> Result<()> {
    let stack = label_paths
        .iter()
        .map(load_labels)
        .collect::<atlasforge::Result<Vec<LabelMap>>>()?;
    let fused = match method {
        FuseMethod::Majority => majority_vote(&stack)?,
        FuseMethod::Staple => {
            let roi = consensus_roi(&stack)?;
            let prior = vote_prior(&stack, None)?;
            let st = staple_multilabel(&stack, &roi, &prior, &config.fusion)?;
            mrf_regularize(
                &st.posterior,
                config.fusion.mrf_beta,
                config.fusion.mrf_iters,
            )
            .argmax()
        }
        FuseMethod::StepsGlobal | FuseMethod::StepsLocal => {
            let target = target.ok_or_else(|| config_error("STEPS fusion needs --target"))?;
            if images.len() != stack.len() {
                return Err(config_error(format!(
                    "{} --images for {} --labels",
                    images.len(),
                    stack.len()
                )));
            }
            let target = load_image(target)?;
            let warped = images
                .iter()
                .zip(stack)
                .zip(label_paths)
                .map(|((img, labels), lp)| {
                    let id = lp
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    AtlasPair::new(id, load_image(img)?, labels)
                })
                .collect::<atlasforge::Result<Vec<_>>>()?;
            let mode = if method == FuseMethod::StepsGlobal {
                FusionMode::GlobalTop
            } else {
                FusionMode::LocalN
            };
            let outcome = steps_fuse(&target, &warped, &config.fusion, mode)?;
            write_text(&out.with_extension("fusion.txt"), &outcome.report.to_text())?;
            outcome.labels
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_labels(&fused, out)?;
    Ok(())
}

fn stack(v: &[(CardiacPhase, Vec<LabelMap>)], phase: CardiacPhase) -> Option<&[LabelMap]> {
    v.iter()
        .find(|(p, _)| *p == phase)
        .map(|(_, m)| m.as_slice())
}

fn evaluate(case_paths: &[PathBuf], pred: &Path, out: &Path) -> Result<()> {
    let mut slices = Vec::new();
    let mut cases = Vec::new();
    for path in case_paths {
        require_file(path)?;
        let case = CaseManifest::read(path)?.load(path)?;
        let mut predicted: Vec<(CardiacPhase, Vec<LabelMap>)> = Vec::new();
        let mut truths: Vec<(CardiacPhase, Option<Vec<LabelMap>>)> = Vec::new();
        for (&phase, list) in &case.phases {
            let mut maps = Vec::new();
            for (k, s) in list.iter().enumerate() {
                let p = prediction_path(pred, &case.case_id, phase, k);
                let m = load_labels(&p)?;
                s.image.require_geometry(&m, "prediction")?;
                if let Some(t) = &s.truth {
                    slices.extend(SliceMetrics::compute(&case.case_id, phase, k, &m, t)?);
                }
                maps.push(m);
            }
            truths.push((phase, list.iter().map(|s| s.truth.clone()).collect()));
            predicted.push((phase, maps));
        }
        let estimated = Volumes::from_stacks(
            stack(&predicted, CardiacPhase::ED),
            stack(&predicted, CardiacPhase::ES),
            case.slice_thickness,
            MYOCARDIAL_DENSITY,
        )?;
        let truth_maps: Option<Vec<(CardiacPhase, Vec<LabelMap>)>> =
            truths.into_iter().map(|(p, t)| t.map(|t| (p, t))).collect();
        let truth = match truth_maps {
            Some(t) => Some(Volumes::from_stacks(
                stack(&t, CardiacPhase::ED),
                stack(&t, CardiacPhase::ES),
                case.slice_thickness,
                MYOCARDIAL_DENSITY,
            )?),
            None => None,
        };
        cases.push(CaseMetrics {
            case: case.case_id.clone(),
            estimated,
            truth,
        });
    }
    let report = MetricReport::new(slices, cases);
    create_dir(out)?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_json(&report, out.join("metrics.json"))?;
    for s in &report.summary {
        println!("{} {:.4} ({:.4}) n={}", s.metric, s.mean, s.std, s.n);
    }
    Ok(())
}

fn phantom(
    n: usize,
    cases: usize,
    slices: usize,
    warp_max: Option<f64>,
    small: bool,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let base = if small {
        PhantomSpec::small()
    } else {
        PhantomSpec::default()
    };
    let mut variability = if small {
        Variability {
            center_jitter: 3.0,
            radius_jitter: 0.1,
            warp_max: 3.0,
            warp_spacing: 16.0,
            ..Default::default()
        }
    } else {
        Variability::default()
    };
    if let Some(w) = warp_max {
        variability.warp_max = w;
    }
    let params = CohortParams {
        atlases: n,
        cases,
        slices,
        variability,
        seed,
        ..Default::default()
    };
    let cohort = make_cohort(&base, &params)?;
    let files = write_cohort(&cohort, out)?;
    println!("{}", files.atlas_manifest.display());
    for c in &files.case_manifests {
        println!("{}", c.display());
    }
    Ok(())
}

/// Loads `path` as whichever artifact it is and returns its kind.
fn validate(path: &Path) -> Result<&'static str> {
    require_file(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "hdr" => {
            load_image(path)?;
            Ok("raster")
        }
        "txt" => {
            let text = fs::read_to_string(path).map_err(|e| atlasforge::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            if Transform::from_text(&text).is_ok() {
                return Ok("transform");
            }
            if BSplineFFD::load(path).is_ok() {
                return Ok("ffd lattice");
            }
            if text.starts_with("mode ") {
                return Ok("fusion report");
            }
            bail!(atlasforge::Error::UnsupportedFormat(format!(
                "{} is not a transform or lattice",
                path.display()
            )))
        }
        "ffd" => {
            BSplineFFD::load(path)?;
            Ok("ffd lattice")
        }
        "csv" => {
            let text = fs::read_to_string(path).map_err(|e| atlasforge::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            if !text.starts_with("case,phase,slice,structure,dice,hausdorff_mm") {
                bail!(atlasforge::Error::UnsupportedFormat(
                    "unknown csv header".into()
                ));
            }
            Ok("metrics csv")
        }
        "json" => validate_json(path),
        _ => Err(anyhow!(atlasforge::Error::UnsupportedFormat(format!(
            "unknown artifact {}",
            path.display()
        )))),
    }
}

fn validate_json(path: &Path) -> Result<&'static str> {
    let text = fs::read_to_string(path).map_err(|e| atlasforge::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let json_err = |source| atlasforge::Error::Json {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let has = |k: &str| value.get(k).is_some();
    if has("atlases") && value["atlases"].is_array() {
        let m = AtlasManifest::read(path)?;
        for phase in CardiacPhase::ALL {
            m.load_phase(path, phase)?;
        }
        return Ok("atlas manifest");
    }
    if has("case_id") && has("phases") {
        CaseManifest::read(path)?.load(path)?;
        return Ok("case manifest");
    }
    if has("case_id") && has("volumes") {
        serde_json::from_value::<CaseReport>(value).map_err(json_err)?;
        return Ok("case report");
    }
    if has("slices") && has("summary") {
        serde_json::from_value::<MetricReport>(value).map_err(json_err)?;
        return Ok("metric report");
    }
    if has("total_ms") {
        return Ok("timings");
    }
    if has("pipeline") || has("jobs") || has("cases") {
        let rc: RunConfig = serde_json::from_value(value).map_err(json_err)?;
        rc.pipeline.validate()?;
        return Ok("run config");
    }
    let c: PipelineConfig = serde_json::from_value(value).map_err(json_err)?;
    c.validate()?;
    Ok("pipeline config")
}
