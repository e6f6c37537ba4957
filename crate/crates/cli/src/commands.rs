use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context};
use ctxforest_core::cascade::{feature_frequency, infer_cascade, train_cascade};
use ctxforest_core::dataset::Manifest;
use ctxforest_core::eval::{ablation, cross_validate, dsc, write_gnuplot, EvalReport, EvalRow};
use ctxforest_core::graphcut::{alpha_expansion, argmax_labels};
use ctxforest_core::labels::{Palette, CARTILAGE_LABELS, NUM_CLASSES};
use ctxforest_core::phantom::generate_dataset;
use ctxforest_core::volume::{load_label_volume, load_volume, save_label_volume, save_volume};
use ctxforest_core::{Band, CascadeModel, Error, ProbabilityMaps};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{EvalArgs, InspectArgs, PhantomArgs, PredictArgs, RefineArgs, TrainArgs, UsageError};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(())
}

fn parse_dims(s: &str) -> anyhow::Result<[usize; 3]> {
    let parts: Vec<&str> = s.split([',', 'x']).map(str::trim).collect();
    let nums = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| UsageError(format!("--dims `{s}`: expected N or X,Y,Z")))?;
    match nums.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(UsageError(format!("--dims `{s}`: expected N or X,Y,Z")).into()),
    }
}

/// `target` expressed relative to directory `base`, falling back to the
/// absolute path when the two share no prefix.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let (Ok(t), Ok(b)) = (target.canonicalize(), base.canonicalize()) else {
        return target.to_path_buf();
    };
    let tc: Vec<Component> = t.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    if common == 0 {
        return t;
    }
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    out
}

fn csv_write<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

fn csv_read<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => Error::Csv(format!("{}: {other:?}", path.display())),
    })?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    Ok(rows)
}

pub fn phantom(mut cfg: RunConfig, a: &PhantomArgs) -> anyhow::Result<()> {
    if a.subjects == 0 {
        return Err(UsageError("--subjects must be at least 1".into()).into());
    }
    if a.volumes_per_subject == 0 {
        return Err(UsageError("--volumes-per-subject must be at least 1".into()).into());
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.phantom.seed = seed;
    }
    if let Some(d) = &a.dims {
        let dims = parse_dims(d)?;
        if dims.iter().any(|&n| n < 2) {
            return Err(UsageError("--dims must be at least 2 along every axis".into()).into());
        }
        cfg.phantom = cfg.phantom.resized(dims);
    }
    create_dir(&a.out)?;
    cfg.record(&a.out.join("resolved_config.toml"))?;
    let m = generate_dataset(&cfg.phantom, a.subjects, a.volumes_per_subject, &a.out)?;
    println!(
        "wrote {} volumes of {} subjects to {}",
        m.len(),
        a.subjects,
        a.out.display()
    );
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.passes {
        cfg.cascade.num_passes = p;
    }
    if let Some(t) = a.trees {
        cfg.forest.num_trees = t;
    }
    if let Some(d) = a.depth {
        cfg.forest.max_depth = d;
    }
    if a.no_landmarks {
        cfg.features.landmark_features = false;
    }
    cfg.pipeline().validate()?;
    let manifest = Manifest::load(&a.manifest)?;
    let volumes = manifest
        .load_all()?
        .into_iter()
        .map(|v| v.into_training())
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    cfg.record(&config_path_for(&a.out))?;
    let model = train_cascade(&volumes, &cfg.cascade, &cfg.features, &cfg.forest, cfg.seed)?;
    model.save(&a.out)?;
    println!(
        "trained {}-pass cascade on {} volumes -> {}",
        model.num_passes(),
        volumes.len(),
        a.out.display()
    );
    Ok(())
}

fn config_path_for(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    artifact.with_file_name(name)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    subject_id: String,
    volume_id: String,
    volume_path: PathBuf,
    prob_femoral_path: PathBuf,
    prob_tibial_path: PathBuf,
    prob_patellar_path: PathBuf,
    band_path: PathBuf,
}

fn band_palette() -> Palette {
    Palette::new([(0, "outside".to_string()), (1, "band".to_string())])
}

pub fn predict(cfg: RunConfig, a: &PredictArgs) -> anyhow::Result<()> {
    let model = CascadeModel::load(&a.model)?;
    let manifest = Manifest::load(&a.manifest)?;
    create_dir(&a.out)?;
    cfg.record(&a.out.join("resolved_config.toml"))?;
    let mut rows = Vec::new();
    for entry in manifest.entries() {
        let v = manifest.load_entry(entry)?;
        let (maps, band) = infer_cascade(&model, &v.intensity, &v.bone_mask, &v.landmarks)
            .with_context(|| format!("predicting {}", v.id))?;
        let names = ["femoral", "tibial", "patellar"];
        let mut paths = Vec::new();
        for (c, name) in names.iter().enumerate() {
            let file = PathBuf::from(format!("{}_prob_{name}.mhd", v.id));
            save_volume(maps.map(c), a.out.join(&file))?;
            paths.push(file);
        }
        let g = *band.geometry();
        let mut mask = vec![0u8; g.len()];
        for &i in band.voxels() {
            mask[i] = 1;
        }
        let band_file = PathBuf::from(format!("{}_band.mhd", v.id));
        save_label_volume(
            &ctxforest_core::LabelVolume::new(g, mask, band_palette())?,
            a.out.join(&band_file),
        )?;
        rows.push(PredictionRow {
            subject_id: v.subject.clone(),
            volume_id: v.id.clone(),
            volume_path: relative_to(&manifest.resolve(&entry.volume_path), &a.out),
            prob_femoral_path: paths[0].clone(),
            prob_tibial_path: paths[1].clone(),
            prob_patellar_path: paths[2].clone(),
            band_path: band_file,
        });
        log::info!("predicted {} ({} band voxels)", v.id, band.len());
    }
    csv_write(&a.out.join("predictions.csv"), &rows)?;
    println!(
        "wrote probability maps for {} volumes to {}",
        rows.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    subject_id: String,
    volume_id: String,
    labels_path: PathBuf,
}

pub fn refine(mut cfg: RunConfig, a: &RefineArgs) -> anyhow::Result<()> {
    if let Some(l) = a.lambda {
        cfg.energy.lambda = l;
    }
    if let Some(s) = a.sigma {
        cfg.energy.sigma = s;
    }
    if let Some(p) = a.p_floor {
        cfg.energy.p_floor = p;
    }
    cfg.energy.validate()?;
    let rows: Vec<PredictionRow> = csv_read(&a.predictions)?;
    let root = a.predictions.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    create_dir(&a.out)?;
    cfg.record(&a.out.join("resolved_config.toml"))?;
    let mut out_rows = Vec::new();
    for row in &rows {
        let intensity = load_volume(resolve(&row.volume_path))?;
        let maps = ProbabilityMaps::new([
            load_volume(resolve(&row.prob_femoral_path))?,
            load_volume(resolve(&row.prob_tibial_path))?,
            load_volume(resolve(&row.prob_patellar_path))?,
        ])?;
        let band_mask = load_label_volume(resolve(&row.band_path))?;
        let band = Band::from_linear(
            *band_mask.geometry(),
            (0..band_mask.labels().len())
                .filter(|&i| band_mask.at(i) != 0)
                .collect(),
        )?;
        let init = argmax_labels(&maps, &band)?;
        let r = alpha_expansion(&maps, &intensity, &band, &init, &cfg.energy)
            .with_context(|| format!("refining {}", row.volume_id))?;
        if !r.is_monotone() {
            bail!("energy increased during refinement of {}", row.volume_id);
        }
        let labels_file = PathBuf::from(format!("{}_labels.mhd", row.volume_id));
        save_label_volume(&r.labels, a.out.join(&labels_file))?;
        r.save_audit(a.out.join(format!("{}_energy.log", row.volume_id)))?;
        log::info!(
            "refined {}: energy {:.4} -> {:.4} in {} moves",
            row.volume_id,
            r.initial_energy,
            r.final_energy(),
            r.steps.len()
        );
        out_rows.push(LabelRow {
            subject_id: row.subject_id.clone(),
            volume_id: row.volume_id.clone(),
            labels_path: labels_file,
        });
    }
    csv_write(&a.out.join("labels.csv"), &out_rows)?;
    println!("refined {} volumes into {}", out_rows.len(), a.out.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn text_path_for(csv: &Path) -> PathBuf {
    csv.with_extension("txt")
}

pub fn eval(mut cfg: RunConfig, a: &EvalArgs) -> anyhow::Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.labels.is_none() && a.cv.is_none() && !a.ablation {
        return Err(UsageError("eval needs --labels, --cv K or --ablation".into()).into());
    }
    let manifest = Manifest::load(&a.manifest)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    cfg.record(&config_path_for(&a.out))?;
    if let Some(labels) = &a.labels {
        let report = eval_labels(&cfg, &manifest, labels)?;
        return finish_report(&report, a);
    }
    let volumes = manifest
        .load_all()?
        .into_iter()
        .map(|v| v.into_training())
        .collect::<Result<Vec<_>, _>>()?;
    let k = a.cv.unwrap_or(3);
    let pipeline = cfg.pipeline();
    if a.ablation {
        let report = ablation(&volumes, &pipeline, k, cfg.seed)?;
        let f = std::fs::File::create(&a.out).map_err(|e| io_err(&a.out, e))?;
        report.write_csv(f)?;
        let text = report.to_text();
        print!("{text}");
        write_text(&text_path_for(&a.out), &text)?;
        if let Some(dir) = &a.emit_gnuplot {
            create_dir(dir)?;
            let reports: Vec<&EvalReport> = report.variants.iter().map(|(_, r)| r).collect();
            write_gnuplot(&reports, dir, "ablation")?;
        }
        return Ok(());
    }
    let report = cross_validate(&volumes, &pipeline, k, cfg.seed)?;
    finish_report(&report, a)
}

fn finish_report(report: &EvalReport, a: &EvalArgs) -> anyhow::Result<()> {
    report.save_csv(&a.out)?;
    let text = report.to_text();
    print!("{text}");
    write_text(&text_path_for(&a.out), &text)?;
    if let Some(dir) = &a.emit_gnuplot {
        create_dir(dir)?;
        write_gnuplot(&[report], dir, "dsc")?;
    }
    Ok(())
}

fn eval_labels(cfg: &RunConfig, manifest: &Manifest, labels: &Path) -> anyhow::Result<EvalReport> {
    let rows: Vec<LabelRow> = csv_read(labels)?;
    let root = labels.parent().map(Path::to_path_buf).unwrap_or_default();
    let hash = ctxforest_core::eval::config_hash(&cfg.pipeline());
    let palette = Palette::cartilage();
    let by_id: BTreeMap<String, &ctxforest_core::dataset::ManifestEntry> =
        manifest.entries().iter().map(|e| (e.volume_id(), e)).collect();
    let mut out = Vec::new();
    for row in rows {
        let entry = by_id
            .get(&row.volume_id)
            .ok_or_else(|| Error::InvalidArgument(format!("volume {} is not in the manifest", row.volume_id)))?;
        let gt_path = entry
            .gt_path
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("volume {} has no ground truth", row.volume_id)))?;
        let gt = load_label_volume(manifest.resolve(gt_path))?;
        let path = if row.labels_path.is_absolute() {
            row.labels_path.clone()
        } else {
            root.join(&row.labels_path)
        };
        let pred = load_label_volume(&path)?;
        if let Some(&l) = pred.labels().iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("{} contains label {l}", path.display())).into());
        }
        for &c in &CARTILAGE_LABELS {
            out.push(EvalRow {
                fold: 0,
                subject: row.subject_id.clone(),
                volume: row.volume_id.clone(),
                class: palette.name(c).unwrap_or_default().to_string(),
                dsc: dsc(&pred, &gt, c)?,
                config_hash: hash.clone(),
            });
        }
    }
    Ok(EvalReport {
        name: "refined labels".into(),
        config_hash: hash,
        fold_hash: "-".into(),
        rows: out,
    })
}

pub fn inspect(a: &InspectArgs) -> anyhow::Result<()> {
    let model = CascadeModel::load(&a.model)?;
    let freq = feature_frequency(&model);
    println!("passes: {}", model.num_passes());
    if let Some(s) = model.training_spacing() {
        println!("training spacing: {} x {} x {} mm", s[0], s[1], s[2]);
    }
    for (forest, freq) in model.passes().iter().zip(&freq) {
        let internal: usize = forest.trees().iter().map(|t| t.num_internal()).sum();
        println!();
        println!(
            "pass {}: {} trees, {} split nodes",
            forest.pass(),
            forest.trees().len(),
            internal
        );
        let mut depths: BTreeMap<usize, usize> = BTreeMap::new();
        for t in forest.trees() {
            *depths.entry(t.depth()).or_default() += 1;
        }
        let hist: Vec<String> = depths.iter().map(|(d, n)| format!("{d}:{n}")).collect();
        println!("  depth histogram (depth:trees): {}", hist.join(" "));
        println!("  feature frequency:");
        for (kind, n) in freq {
            let share = if internal > 0 {
                100.0 * *n as f64 / internal as f64
            } else {
                0.0
            };
            println!("    {:<14} {:>7} {:>6.1}%", kind.name(), n, share);
        }
        let prob: usize = freq
            .iter()
            .filter(|(k, _)| k.needs_probabilities())
            .map(|(_, n)| n)
            .sum();
        println!("  probability-feature splits: {prob}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_forms() {
        assert_eq!(parse_dims("64").unwrap(), [64; 3]);
        assert_eq!(parse_dims("32,16,8").unwrap(), [32, 16, 8]);
        assert_eq!(parse_dims("8x8x4").unwrap(), [8, 8, 4]);
        assert!(parse_dims("1,2").is_err());
        assert!(parse_dims("a").is_err());
    }

    #[test]
    fn relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("data");
        let b = dir.path().join("out/pred");
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        std::fs::write(a.join("x.mhd"), "").unwrap();
        assert_eq!(relative_to(&a.join("x.mhd"), &b), PathBuf::from("../../data/x.mhd"));
    }
}
