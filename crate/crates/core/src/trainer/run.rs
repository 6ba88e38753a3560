//! Dataset generation, training runs, evaluation and the ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LOSS_CSV_HEADER;
use crate::metrics::{evaluate_split, MetricsReport, VolumePredictor};
use crate::params::ParamSet;
use crate::segnet::{predict, NetworkConfig};
use crate::synthdata::{load_case, make_split, read_manifest, write_dataset, Case, DatasetManifest, Volume, MANIFEST_FILE};
use crate::tensor::Tensor;

use super::config::{AblationCell, TrainConfig};
use super::state::{train_step, TrainState};

pub const LOSS_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.bck";
pub const CONFIG_FILE: &str = "config.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_CSV_HEADER: &str = "cell,ssp,bci,cr,k,direction,mode,seeds,dice,jaccard,hd95,asd,status";

pub fn checkpoint_name(t: usize) -> String {
    format!("checkpoint_{t:06}.bck")
}

/// The split and generator the config describes.
pub fn expected_manifest(cfg: &TrainConfig) -> Result<DatasetManifest> {
    let d = &cfg.data;
    let mut m = make_split(d.n_cases, d.labeled_ratio, d.n_test, d.seed).map_err(|e| Error::Config(e.to_string()))?;
    m.generator_params = d.generator.clone();
    Ok(m)
}

fn is_dataset_file(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name == MANIFEST_FILE || (name.starts_with("case_") && name.ends_with(".bv"))
}

/// Writes the configured dataset. A non-empty target directory is refused
/// unless `force`, in which case earlier dataset files are removed first.
pub fn gen_data(cfg: &TrainConfig, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    let manifest = expected_manifest(cfg)?;
    let dir = &cfg.data.dir;
    if dir.exists() {
        let entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        if !entries.is_empty() && !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
        for p in entries.iter().filter(|p| is_dataset_file(p)) {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    write_dataset(dir, &manifest)?;
    log::info!(
        "wrote {} cases ({} labeled, {} unlabeled, {} test) to {}",
        manifest.all_ids().len(),
        manifest.labeled_ids.len(),
        manifest.unlabeled_ids.len(),
        manifest.test_ids.len(),
        dir.display()
    );
    Ok(manifest)
}

/// Reads the dataset manifest and checks it matches the config.
pub fn checked_manifest(cfg: &TrainConfig) -> Result<DatasetManifest> {
    let found = read_manifest(&cfg.data.dir)?;
    if found != expected_manifest(cfg)? {
        return Err(Error::Config(format!(
            "dataset manifest in {} does not match the data block of the config",
            cfg.data.dir.display()
        )));
    }
    Ok(found)
}

fn load_cases(dir: &Path, ids: &[usize]) -> Result<Vec<Case>> {
    ids.iter().map(|&id| load_case(dir, id)).collect()
}

/// Keeps the header and rows with `iter ≤ upto` of an existing loss log.
fn truncated_log(path: &Path, upto: usize) -> Result<Vec<String>> {
    let mut lines = vec![LOSS_CSV_HEADER.to_string()];
    if !path.exists() {
        return Ok(lines);
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(f).lines().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let iter: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed row in {}: {line:?}", path.display())))?;
        if iter <= upto {
            lines.push(line);
        }
    }
    Ok(lines)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
}

/// Trains for `cfg.t_max` steps into `out`, optionally continuing from a
/// checkpoint. Writes `config.json`, `loss.csv` (one row per step), periodic
/// `checkpoint_NNNNNN.bck` files and `final.bck`.
pub fn train(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = checked_manifest(cfg)?;
    let labeled = load_cases(&cfg.data.dir, &manifest.labeled_ids)?;
    let unlabeled = load_cases(&cfg.data.dir, &manifest.unlabeled_ids)?;
    let mut state = match resume {
        Some(path) => {
            let s = TrainState::load(path)?;
            s.check_compatible(cfg)?;
            if s.iteration > cfg.t_max {
                return Err(Error::Config(format!("checkpoint is at step {} beyond t_max {}", s.iteration, cfg.t_max)));
            }
            s
        }
        None => TrainState::init(cfg)?,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = out.join(LOSS_FILE);
    let kept = if resume.is_some() { truncated_log(&log_path, state.iteration)? } else { vec![LOSS_CSV_HEADER.to_string()] };
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    for line in &kept {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }

    let start = state.iteration;
    for t in start + 1..=cfg.t_max {
        let b = match train_step(&mut state, cfg, &labeled, &unlabeled) {
            Ok(b) => b,
            Err(e) => {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                log::error!("training aborted at step {t}: {e}");
                return Err(e);
            }
        };
        writeln!(log, "{}", b.csv_row(t)).map_err(|e| Error::io(&log_path, e))?;
        if t % 50 == 0 || t == cfg.t_max {
            log::info!("step {t}/{}: total {:.4} (sup {:.4}, cons {:.4}, unsup {:.4})", cfg.t_max, b.total, b.l_sup, b.l_cons, b.l_unsup);
        }
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.save(&out.join(checkpoint_name(t)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    state.save(&final_checkpoint)?;
    Ok(TrainOutcome { state, final_checkpoint })
}

/// Interaction-free full-volume predictor over trained parameters.
pub struct NetPredictor {
    pub params: ParamSet,
    pub network: NetworkConfig,
}

impl VolumePredictor for NetPredictor {
    fn predict_volume(&self, volume: &Volume) -> Result<Tensor> {
        predict(&self.params, &self.network, &volume.to_tensor())
    }
}

impl NetPredictor {
    pub fn from_checkpoint(path: &Path, network: NetworkConfig) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
        }
        Ok(NetPredictor { params: TrainState::load(path)?.params, network })
    }
}

/// Scores `checkpoint` on the test split of the configured dataset.
pub fn evaluate(cfg: &TrainConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let manifest = checked_manifest(cfg)?;
    let model = NetPredictor::from_checkpoint(checkpoint, cfg.network.clone())?;
    evaluate_split(&model, &cfg.data.dir, &manifest, cfg.eval.threshold)
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub config: TrainConfig,
    pub seeds: usize,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub status: String,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v}"));
        let c = &self.config;
        let lower = |s: String| s.trim_matches('"').to_string();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            c.toggles.ssp,
            c.toggles.bci,
            c.toggles.cr,
            c.router.k,
            lower(serde_json::to_string(&c.bci.direction).expect("enum serializes")),
            lower(serde_json::to_string(&c.router.mode).expect("enum serializes")),
            self.seeds,
            opt(self.dice),
            opt(self.jaccard),
            opt(self.hd95),
            opt(self.asd),
            self.status
        )
    }
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell_label(i: usize, cell: &AblationCell) -> String {
    let name: String = cell
        .name
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' })
        .collect();
    if name.is_empty() {
        format!("cell{i}")
    } else {
        name
    }
}

/// Trains and evaluates every ablation cell with seeds `seed, seed + 1, …`,
/// writing per-run outputs under `out/<cell>/seed_<s>` and the mean table
/// to `out/ablation.csv`. Cells selecting more channels than exist are
/// reported as skipped.
pub fn ablate(cfg: &TrainConfig, out: &Path, n_seeds: usize) -> Result<Vec<AblationRow>> {
    if cfg.ablation.cells.is_empty() {
        return Err(Error::Config("ablation.cells is empty".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("--seeds must be ≥ 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(cfg.ablation.cells.len());
    for (i, cell) in cfg.ablation.cells.iter().enumerate() {
        let label = cell_label(i, cell);
        let cell_cfg = cfg.with_cell(cell);
        let c = cell_cfg.network.bottleneck_channels;
        let mut row = AblationRow {
            cell: label.clone(),
            config: cell_cfg.clone(),
            seeds: n_seeds,
            dice: None,
            jaccard: None,
            hd95: None,
            asd: None,
            status: "ok".into(),
        };
        if cell_cfg.router.k > c {
            log::warn!("skipping cell {label}: K = {} exceeds C = {c}", cell_cfg.router.k);
            row.status = format!("skipped (K={} > C={c})", cell_cfg.router.k);
            row.seeds = 0;
            rows.push(row);
            continue;
        }
        cell_cfg.validate()?;
        let mut reports = Vec::with_capacity(n_seeds);
        for s in 0..n_seeds {
            let mut run_cfg = cell_cfg.clone();
            run_cfg.seed = cfg.seed + s as u64;
            let dir = out.join(&label).join(format!("seed_{}", run_cfg.seed));
            log::info!("ablation cell {label}, seed {}", run_cfg.seed);
            let outcome = train(&run_cfg, &dir, None)?;
            let report = evaluate(&run_cfg, &outcome.final_checkpoint)?;
            report.write(&dir)?;
            reports.push(report);
        }
        let pick = |f: fn(&MetricsReport) -> Option<f64>| mean_of(&reports.iter().map(f).collect::<Vec<_>>());
        row.dice = pick(|r| Some(r.mean.dice));
        row.jaccard = pick(|r| Some(r.mean.jaccard));
        row.hd95 = pick(|r| r.mean.hd95);
        row.asd = pick(|r| r.mean.asd);
        rows.push(row);
    }
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv_row());
    }
    let path = out.join(ABLATION_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_header_and_early_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(LOSS_FILE);
        fs::write(&p, format!("{LOSS_CSV_HEADER}\n1,a\n2,b\n3,c\n")).unwrap();
        assert_eq!(truncated_log(&p, 2).unwrap(), [LOSS_CSV_HEADER, "1,a", "2,b"]);
        assert_eq!(truncated_log(&dir.path().join("none"), 2).unwrap(), [LOSS_CSV_HEADER]);
    }

    #[test]
    fn cell_labels_are_path_safe() {
        let cell = AblationCell { name: "k=4 / cr".into(), ..Default::default() };
        assert_eq!(cell_label(0, &cell), "k_4___cr");
        assert_eq!(cell_label(3, &AblationCell::default()), "cell3");
    }
}
