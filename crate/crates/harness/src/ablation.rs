//! Module ablation (three on/off switches) and the neighbor-count sweep.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline::{evaluate, pretrain_pose, train, EvalDomain, PoseReport};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub table: &'static str,
    pub name: String,
    pub enable_uda: bool,
    pub enable_pose: bool,
    pub enable_sgf: bool,
    pub k: usize,
    /// Published in-domain MAE (degrees, EyeDiap) for this row, for reference.
    pub published_mae: f64,
}

impl Variant {
    fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.enable_uda = self.enable_uda;
        cfg.model.enable_pose = self.enable_pose;
        cfg.model.enable_sgf = self.enable_sgf;
        cfg.model.sgf.k = self.k;
        cfg
    }

    /// Identifies variants that train identically.
    fn key(&self) -> (bool, bool, bool, usize) {
        (self.enable_uda, self.enable_pose, self.enable_sgf, if self.enable_sgf { self.k } else { 0 })
    }
}

/// The eight module combinations, Baseline first and Full Model last.
pub fn module_variants(k: usize) -> Vec<Variant> {
    let rows = [
        ("Baseline", false, false, false, 5.54),
        ("w/ UDA", true, false, false, 5.42),
        ("w/ Pose", false, true, false, 5.35),
        ("w/ SGF", false, false, true, 5.47),
        ("w/ UDA+Pose", true, true, false, 5.20),
        ("w/ Pose+SGF", false, true, true, 5.23),
        ("w/ UDA+SGF", true, false, true, 5.17),
        ("Full Model", true, true, true, 5.02),
    ];
    rows.iter()
        .map(|&(name, u, p, s, published)| Variant { table: "modules", name: name.into(), enable_uda: u, enable_pose: p, enable_sgf: s, k, published_mae: published })
        .collect()
}

/// Full model with `k = d_p` (every pose node is a neighbor), 3, 2 and 1.
pub fn k_sweep(d_p: usize) -> Vec<Variant> {
    [("w/o subgraph", d_p, 5.55), ("top-3", 3, 5.22), ("top-2", 2, 5.13), ("top-1", 1, 5.02)]
        .iter()
        .map(|&(name, k, published)| Variant { table: "k-sweep", name: name.into(), enable_uda: true, enable_pose: true, enable_sgf: true, k, published_mae: published })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub param_count: usize,
    /// Per seed, in seed order.
    pub in_domain: Vec<f64>,
    pub cross_domain: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl AblationRow {
    pub fn in_domain_mean(&self) -> f64 {
        mean(&self.in_domain)
    }

    pub fn cross_domain_mean(&self) -> f64 {
        mean(&self.cross_domain)
    }
}

/// Pretrained pose encoders keyed by run seed.
pub type PoseCache = BTreeMap<u64, PoseReport>;

/// Pose encoder for `cfg.seed`, pretrained on first use.
pub fn cached_pose<'a>(cfg: &RunConfig, poses: &'a mut PoseCache, mut progress: impl FnMut(&str)) -> Result<&'a PoseReport> {
    Ok(match poses.entry(cfg.seed) {
        Entry::Occupied(e) => e.into_mut(),
        Entry::Vacant(e) => {
            let report = pretrain_pose(cfg)?;
            progress(&format!("seed {}: pose encoder held-out error {:.3} px", cfg.seed, report.heldout_px));
            e.insert(report)
        }
    })
}

/// Trains and evaluates each variant on every seed. The pose encoder is
/// pretrained once per seed and shared by the variants that use it;
/// variants with identical settings are trained once.
pub fn run_ablation(base: &RunConfig, seeds: &[u64], variants: &[Variant], progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    run_ablation_with(base, seeds, variants, &mut PoseCache::new(), progress)
}

/// [`run_ablation`] with a caller-owned pose cache. Every entry must come
/// from the same pose settings as `base`.
pub fn run_ablation_with(
    base: &RunConfig,
    seeds: &[u64],
    variants: &[Variant],
    poses: &mut PoseCache,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let eval_n = base.train.eval_samples.max(1);
    let mut done: BTreeMap<(bool, bool, bool, usize), AblationRow> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in variants {
        if let Some(prev) = done.get(&v.key()) {
            rows.push(AblationRow { variant: v.clone(), ..prev.clone() });
            continue;
        }
        let mut row = AblationRow { variant: v.clone(), param_count: 0, in_domain: Vec::new(), cross_domain: Vec::new() };
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let pose = if cfg.model.enable_pose { Some(&cached_pose(&cfg, poses, &mut progress)?.params) } else { None };
            let trained = train(&cfg, pose, None)?;
            let in_mae = evaluate(&trained.params, &cfg, EvalDomain::Target, eval_n, seed)?.mae;
            let cross_mae = evaluate(&trained.params, &cfg, EvalDomain::Shifted, eval_n, seed)?.mae;
            progress(&format!("{} (k={}) seed {seed}: in-domain {in_mae:.3}, cross-domain {cross_mae:.3}", v.name, v.k));
            row.param_count = trained.params.param_count();
            row.in_domain.push(in_mae);
            row.cross_domain.push(cross_mae);
        }
        done.insert(v.key(), row.clone());
        rows.push(row);
    }
    Ok(rows)
}

/// `table,variant,k,param_count,mae_in_domain,mae_cross_domain`, means over seeds.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["table", "variant", "k", "param_count", "mae_in_domain", "mae_cross_domain"])?;
    for r in rows {
        w.write_record([
            r.variant.table.to_string(),
            r.variant.name.clone(),
            r.variant.k.to_string(),
            r.param_count.to_string(),
            r.in_domain_mean().to_string(),
            r.cross_domain_mean().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width table with the published in-domain numbers alongside.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<9} {:<14} {:>3} {:>9} {:>10} {:>10} {:>10}", "table", "variant", "k", "params", "in-domain", "cross", "published").unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<9} {:<14} {:>3} {:>9} {:>10.3} {:>10.3} {:>10.2}",
            r.variant.table,
            r.variant.name,
            r.variant.k,
            r.param_count,
            r.in_domain_mean(),
            r.cross_domain_mean(),
            r.variant.published_mae
        )
        .unwrap();
    }
    s
}
