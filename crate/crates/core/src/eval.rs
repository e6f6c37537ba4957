//! Dice scores, subject-grouped cross-validation and ablations.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{infer_prepared, prepare_volume, train_cascade, CascadeModel, PreparedVolume, TrainingVolume};
use crate::config::PipelineConfig;
use crate::distance::Band;
use crate::features::FeatureConfig;
use crate::graphcut::{alpha_expansion, argmax_labels};
use crate::labels::{Palette, CARTILAGE_LABELS, NUM_CLASSES};
use crate::rng::{derive_seed, substream};
use crate::volume::LabelVolume;
use crate::{Error, Result};

/// `2|A∩B| / (|A|+|B|)` over voxels labelled `class`; 1 when both are empty.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    pred.geometry()
        .ensure_same(gt.geometry(), "prediction vs ground truth")?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (ip, ig) = (p == class, g == class);
        a += usize::from(ip);
        b += usize::from(ig);
        both += usize::from(ip && ig);
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// Fraction of band voxels whose label differs from the majority label of
/// their 3×3×3 neighbourhood (clipped at the grid border). A voxel whose
/// own label ties for the majority counts as agreeing.
pub fn label_noise_fraction(labels: &LabelVolume, band: &Band) -> Result<f64> {
    let g = *labels.geometry();
    g.ensure_same(band.geometry(), "band vs labels")?;
    if band.is_empty() {
        return Ok(0.0);
    }
    let [nx, ny, nz] = g.dims;
    let mut noisy = 0usize;
    for v in band.voxel_indices() {
        let mut counts = [0u32; 256];
        for z in v.z.saturating_sub(1)..(v.z + 2).min(nz) {
            for y in v.y.saturating_sub(1)..(v.y + 2).min(ny) {
                for x in v.x.saturating_sub(1)..(v.x + 2).min(nx) {
                    counts[usize::from(labels.get(crate::VoxelIndex::new(x, y, z)))] += 1;
                }
            }
        }
        let max = counts.iter().copied().max().unwrap_or(0);
        if counts[usize::from(labels.get(v))] < max {
            noisy += 1;
        }
    }
    Ok(noisy as f64 / band.len() as f64)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Short stable hash of a serialisable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    hex_digest(&serde_json::to_vec(value).expect("config serialises"))
}

/// Subjects partitioned into folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    folds: Vec<Vec<String>>,
}

impl FoldPlan {
    /// Shuffles the distinct `subjects` with `seed` and deals them into `k`
    /// near-equal folds, larger folds first.
    pub fn new(subjects: &[String], k: usize, seed: u64) -> Result<Self> {
        let mut unique: Vec<String> = subjects.to_vec();
        unique.sort();
        unique.dedup();
        if k < 2 || unique.len() < k {
            return Err(Error::InsufficientSubjects {
                subjects: unique.len(),
                folds: k,
            });
        }
        unique.shuffle(&mut substream(seed, "folds", 0));
        let (base, extra) = (unique.len() / k, unique.len() % k);
        let mut it = unique.into_iter();
        let folds = (0..k)
            .map(|f| it.by_ref().take(base + usize::from(f < extra)).collect())
            .collect();
        Ok(FoldPlan { folds })
    }

    pub fn folds(&self) -> &[Vec<String>] {
        &self.folds
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|s| s == subject))
    }

    pub fn hash(&self) -> String {
        config_hash(&self.folds)
    }
}

/// One Dice score of one class on one held-out volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub fold: usize,
    pub subject: String,
    pub volume: String,
    pub class: String,
    pub dsc: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        let n = values.len();
        if n == 0 {
            return Stats {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stats { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub config_hash: String,
    pub fold_hash: String,
    pub rows: Vec<EvalRow>,
}

fn class_names() -> Vec<String> {
    let palette = Palette::cartilage();
    CARTILAGE_LABELS
        .iter()
        .map(|&l| palette.name(l).expect("cartilage palette").to_string())
        .collect()
}

impl EvalReport {
    fn values(&self, class: &str, fold: Option<usize>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.class == class && fold.is_none_or(|f| r.fold == f))
            .map(|r| r.dsc)
            .collect()
    }

    pub fn class_stats(&self, class: &str) -> Stats {
        Stats::of(&self.values(class, None))
    }

    pub fn fold_stats(&self, class: &str, fold: usize) -> Stats {
        Stats::of(&self.values(class, Some(fold)))
    }

    /// Mean DSC of each cartilage class (femoral, tibial, patellar).
    pub fn class_means(&self) -> [f64; 3] {
        let names = class_names();
        [0, 1, 2].map(|c| self.class_stats(&names[c]).mean)
    }

    /// Mean over all cartilage rows.
    pub fn overall_mean(&self) -> f64 {
        Stats::of(&self.rows.iter().map(|r| r.dsc).collect::<Vec<_>>()).mean
    }

    fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.rows.iter().map(|r| r.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    /// Per-fold and overall mean ± std for each class.
    pub fn to_text(&self) -> String {
        let names = class_names();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} (config {}, folds {})",
            self.name, self.config_hash, self.fold_hash
        );
        let _ = writeln!(s, "{:<8} {:<20} {:>8} {:>8} {:>4}", "fold", "class", "mean", "std", "n");
        for fold in self.folds() {
            for c in &names {
                let st = self.fold_stats(c, fold);
                let _ = writeln!(s, "{:<8} {:<20} {:>8.4} {:>8.4} {:>4}", fold, c, st.mean, st.std, st.n);
            }
        }
        for c in &names {
            let st = self.class_stats(c);
            let _ = writeln!(s, "{:<8} {:<20} {:>8.4} {:>8.4} {:>4}", "all", c, st.mean, st.std, st.n);
        }
        s
    }
}

/// One column of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub passes: usize,
    pub landmarks: bool,
    pub graph_cut: bool,
}

impl Variant {
    pub fn name(&self) -> String {
        let mut s = format!("{}-pass", self.passes);
        s.push_str(if self.landmarks { " LM" } else { " no-LM" });
        if self.graph_cut {
            s.push_str(" + GC");
        }
        s
    }

    /// The six configurations compared in the ablation.
    pub fn ablation_set() -> [Variant; 6] {
        let v = |passes, landmarks, graph_cut| Variant {
            passes,
            landmarks,
            graph_cut,
        };
        [
            v(1, false, false),
            v(2, false, false),
            v(1, true, false),
            v(2, true, false),
            v(3, true, false),
            v(2, true, true),
        ]
    }

    fn config(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        cfg.cascade.num_passes = self.passes;
        cfg.features.landmark_features = self.landmarks;
        cfg
    }
}

/// Variants evaluated on one shared set of folds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub plan: FoldPlan,
    pub variants: Vec<(Variant, EvalReport)>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&EvalReport> {
        self.variants.iter().find(|(w, _)| *w == v).map(|(_, r)| r)
    }

    pub fn to_text(&self) -> String {
        let names = class_names();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>10} {:>10} {:>10}",
            "variant", names[0], names[1], names[2], "mean"
        );
        for (v, r) in &self.variants {
            let m = r.class_means();
            let _ = writeln!(
                s,
                "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                v.name(),
                m[0],
                m[1],
                m[2],
                r.overall_mean()
            );
        }
        s
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            variant: String,
            #[serde(flatten)]
            row: &'a EvalRow,
        }
        let mut w = csv::Writer::from_writer(out);
        for (v, r) in &self.variants {
            for row in &r.rows {
                w.serialize(Row { variant: v.name(), row })
                    .map_err(|e| Error::Csv(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))
    }
}

/// Writes `<stem>.dat` and a gnuplot script `<stem>.gp` drawing the mean
/// DSC per class of every report as grouped bars.
pub fn write_gnuplot(reports: &[&EvalReport], dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    let names = class_names();
    let mut dat = String::from("# report femoral tibial patellar\n");
    for r in reports {
        let m = r.class_means();
        let _ = writeln!(dat, "\"{}\" {:.6} {:.6} {:.6}", r.name, m[0], m[1], m[2]);
    }
    let mut gp = String::new();
    let _ = writeln!(gp, "set terminal pngcairo size 900,500");
    let _ = writeln!(gp, "set output '{stem}.png'");
    let _ = writeln!(gp, "set style data histograms\nset style fill solid 0.8 border -1");
    let _ = writeln!(gp, "set yrange [0:1]\nset ylabel 'mean DSC'\nset key outside");
    let _ = writeln!(
        gp,
        "plot '{stem}.dat' using 2:xtic(1) title '{}', '' using 3 title '{}', '' using 4 title '{}'",
        names[0], names[1], names[2]
    );
    for (name, text) in [(format!("{stem}.dat"), dat), (format!("{stem}.gp"), gp)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn held_out_rows(fold: usize, tv: &TrainingVolume, pred: &LabelVolume, hash: &str) -> Result<Vec<EvalRow>> {
    if let Some(&l) = pred.labels().iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!(
            "prediction for {} contains label {l}",
            tv.id
        )));
    }
    let names = class_names();
    CARTILAGE_LABELS
        .iter()
        .zip(&names)
        .map(|(&c, name)| {
            Ok(EvalRow {
                fold,
                subject: tv.subject.clone(),
                volume: tv.id.clone(),
                class: name.clone(),
                dsc: dsc(pred, &tv.gt, c)?,
                config_hash: hash.to_string(),
            })
        })
        .collect()
}

/// Final labeling of a prepared volume after `passes` passes of `model`.
fn predict_labels(
    model: &CascadeModel,
    prepared: &PreparedVolume,
    passes: usize,
    graph_cut: bool,
    cfg: &PipelineConfig,
) -> Result<LabelVolume> {
    let model = model.truncated(passes)?;
    let maps = infer_prepared(&model, prepared)?.pop().expect("nonempty");
    let init = argmax_labels(&maps, &prepared.band)?;
    if !graph_cut {
        return Ok(init);
    }
    let r = alpha_expansion(&maps, prepared.context.intensity(), &prepared.band, &init, &cfg.energy)?;
    assert!(r.is_monotone(), "alpha-expansion increased the energy");
    Ok(r.labels)
}

fn run_variants(
    volumes: &[TrainingVolume],
    plan: &FoldPlan,
    base: &PipelineConfig,
    variants: &[Variant],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    for v in variants {
        if v.passes == 0 {
            return Err(Error::InvalidArgument("variants need at least one pass".into()));
        }
    }
    let fold_hash = plan.hash();
    let hashes: Vec<String> = variants
        .iter()
        .map(|v| config_hash(&(v.config(base), plan.k(), seed)))
        .collect();
    // Variants that differ only in pass count or refinement share a model
    // (prefix truncation) unless cross-prediction makes prefixes differ.
    let mut groups: Vec<(bool, usize, Vec<usize>)> = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        let key_passes = if base.cascade.cross_context {
            Some(v.passes)
        } else {
            None
        };
        match groups
            .iter_mut()
            .find(|(lm, p, _)| *lm == v.landmarks && key_passes.is_none_or(|kp| kp == *p))
        {
            Some(g) => {
                g.1 = g.1.max(v.passes);
                g.2.push(i);
            }
            None => groups.push((v.landmarks, v.passes, vec![i])),
        }
    }

    let fold_rows = (0..plan.k())
        .into_par_iter()
        .map(|fold| -> Result<Vec<Vec<EvalRow>>> {
            let (test, train): (Vec<&TrainingVolume>, Vec<&TrainingVolume>) =
                volumes.iter().partition(|v| plan.fold_of(&v.subject) == Some(fold));
            let train: Vec<TrainingVolume> = train.into_iter().cloned().collect();
            let fold_seed = derive_seed(seed, "fold", fold as u64);
            let mut rows: Vec<Vec<EvalRow>> = vec![Vec::new(); variants.len()];
            for (landmarks, passes, members) in &groups {
                let features = FeatureConfig {
                    landmark_features: *landmarks,
                    ..base.features.clone()
                };
                let cascade = crate::cascade::CascadeConfig {
                    num_passes: *passes,
                    ..base.cascade.clone()
                };
                log::info!("fold {fold}: training {passes}-pass cascade (landmarks {landmarks})");
                let model = train_cascade(&train, &cascade, &features, &base.forest, fold_seed)?;
                for tv in &test {
                    let prepared = prepare_volume(&tv.intensity, &tv.bone_mask, &tv.landmarks, &features)?;
                    if prepared.band.is_empty() {
                        return Err(Error::EmptyBand(tv.id.clone()));
                    }
                    for &i in members {
                        let v = variants[i];
                        let pred = predict_labels(&model, &prepared, v.passes, v.graph_cut, base)?;
                        rows[i].extend(held_out_rows(fold, tv, &pred, &hashes[i])?);
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, v)| EvalReport {
            name: v.name(),
            config_hash: hashes[i].clone(),
            fold_hash: fold_hash.clone(),
            rows: fold_rows.iter().flat_map(|f| f[i].iter().cloned()).collect(),
        })
        .collect())
}

fn check_grouping(volumes: &[TrainingVolume], plan: &FoldPlan) -> Result<()> {
    for v in volumes {
        if plan.fold_of(&v.subject).is_none() {
            return Err(Error::InvalidArgument(format!("subject {} is in no fold", v.subject)));
        }
    }
    Ok(())
}

fn subjects_of(volumes: &[TrainingVolume]) -> Vec<String> {
    volumes.iter().map(|v| v.subject.clone()).collect()
}

/// Grouped k-fold cross-validation of the configured cascade followed by
/// graph-cut refinement.
pub fn cross_validate(volumes: &[TrainingVolume], cfg: &PipelineConfig, k: usize, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    let plan = FoldPlan::new(&subjects_of(volumes), k, seed)?;
    check_grouping(volumes, &plan)?;
    let v = Variant {
        passes: cfg.cascade.num_passes,
        landmarks: cfg.features.landmark_features,
        graph_cut: true,
    };
    Ok(run_variants(volumes, &plan, cfg, &[v], seed)?.remove(0))
}

/// Runs the six ablation variants on one fold plan.
pub fn ablation(volumes: &[TrainingVolume], cfg: &PipelineConfig, k: usize, seed: u64) -> Result<AblationReport> {
    cfg.validate()?;
    let plan = FoldPlan::new(&subjects_of(volumes), k, seed)?;
    check_grouping(volumes, &plan)?;
    let variants = Variant::ablation_set();
    let reports = run_variants(volumes, &plan, cfg, &variants, seed)?;
    let hash = plan.hash();
    assert!(
        reports.iter().all(|r| r.fold_hash == hash),
        "ablation variants saw different folds"
    );
    Ok(AblationReport {
        plan,
        variants: variants.into_iter().zip(reports).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn lv(labels: Vec<u8>) -> LabelVolume {
        let g = Geometry::unit([labels.len(), 1, 1]).unwrap();
        LabelVolume::new(g, labels, Palette::cartilage()).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = lv(vec![1, 1, 0, 0]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&a, &lv(vec![0, 0, 1, 1]), 1).unwrap(), 0.0);
        assert_eq!(dsc(&a, &lv(vec![0, 1, 1, 0]), 1).unwrap(), 0.5);
        assert_eq!(dsc(&a, &a, 3).unwrap(), 1.0);
        assert_eq!(dsc(&a, &lv(vec![0, 0, 0, 0]), 1).unwrap(), 0.0);
    }

    #[test]
    fn folds_group_and_balance() {
        let subjects: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let plan = FoldPlan::new(&subjects, 3, 5).unwrap();
        let sizes: Vec<usize> = plan.folds().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let mut all: Vec<String> = plan.folds().concat();
        all.sort();
        let mut expected = subjects.clone();
        expected.sort();
        assert_eq!(all, expected);
        assert_eq!(plan, FoldPlan::new(&subjects, 3, 5).unwrap());
        assert!(matches!(
            FoldPlan::new(&subjects[..2], 3, 0),
            Err(Error::InsufficientSubjects { subjects: 2, folds: 3 })
        ));
    }

    #[test]
    fn six_variants() {
        let set = Variant::ablation_set();
        assert_eq!(set.len(), 6);
        assert_eq!(set.iter().filter(|v| v.graph_cut).count(), 1);
    }

    #[test]
    fn noise_fraction() {
        let g = Geometry::unit([3, 3, 3]).unwrap();
        let mut labels = vec![0u8; 27];
        labels[13] = 1;
        let l = LabelVolume::new(g, labels, Palette::cartilage()).unwrap();
        let band = Band::full(g);
        assert!((label_noise_fraction(&l, &band).unwrap() - 1.0 / 27.0).abs() < 1e-12);
    }
}
