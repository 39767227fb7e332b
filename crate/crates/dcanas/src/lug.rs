//! Lookup graph (LUG): the calibrated mapping between the device constraint
//! `K_d` (evaluation-phase cost) and the tighter search constraint `K_d'`.
//!
//! Built by running searches over a grid of `K_d'` values and measuring the
//! evaluation cost of each derived architecture; queried by inverse
//! piecewise-linear interpolation over an isotonic fit of the measurements.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::cost::CostMetric;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::search::{run_search, ConstraintSpec, SearchRunConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LugPoint {
    pub kd_prime: f64,
    pub kd_measured: f64,
    pub seed_count: u32,
    /// Set when this point's raw median broke monotonicity.
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct LookupGraph {
    pub metric: CostMetric,
    pub dataset_id: String,
    pub config_hash: String,
    points: Vec<LugPoint>,
    /// Isotonic (non-decreasing) fit of `kd_measured` along the grid.
    iso: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LookupResult {
    pub kd_prime: f64,
    /// The query fell outside the calibrated range and was clamped.
    pub extrapolated: bool,
}

/// Pool-adjacent-violators fit, non-decreasing, unit weights.
pub fn isotonic_non_decreasing(ys: &[f64]) -> Vec<f64> {
    let mut level: Vec<f64> = Vec::with_capacity(ys.len());
    let mut weight: Vec<f64> = Vec::with_capacity(ys.len());
    for &y in ys {
        level.push(y);
        weight.push(1.0);
        while level.len() >= 2 && level[level.len() - 2] > level[level.len() - 1] {
            let (l1, w1) = (level.pop().unwrap(), weight.pop().unwrap());
            let (l0, w0) = (level.pop().unwrap(), weight.pop().unwrap());
            let w = w0 + w1;
            level.push((l0 * w0 + l1 * w1) / w);
            weight.push(w);
        }
    }
    let mut out = Vec::with_capacity(ys.len());
    for (l, w) in level.iter().zip(&weight) {
        for _ in 0..(*w as usize) {
            out.push(*l);
        }
    }
    out
}

impl LookupGraph {
    pub fn new(
        metric: CostMetric,
        dataset_id: String,
        config_hash: String,
        points: Vec<LugPoint>,
    ) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config(format!(
                "a lookup graph needs at least 2 calibration points, got {}",
                points.len()
            )));
        }
        for pair in points.windows(2) {
            if pair[1].kd_prime <= pair[0].kd_prime {
                return Err(Error::config("kd_prime values must be strictly increasing"));
            }
        }
        let iso = isotonic_non_decreasing(&points.iter().map(|p| p.kd_measured).collect::<Vec<_>>());
        Ok(LookupGraph { metric, dataset_id, config_hash, points, iso })
    }

    pub fn points(&self) -> &[LugPoint] {
        &self.points
    }

    pub fn isotonic_curve(&self) -> &[f64] {
        &self.iso
    }

    /// Inverse interpolation: the `K_d'` whose calibrated measured cost
    /// reaches `K_d`. Flat isotonic segments resolve to their smallest
    /// `K_d'`, and the boundary clamp keeps out-of-range queries
    /// conservative.
    pub fn lookup(&self, kd: f64) -> Result<LookupResult> {
        if kd <= 0.0 {
            return Err(Error::config("device constraint must be positive"));
        }
        let xs: Vec<f64> = self.points.iter().map(|p| p.kd_prime).collect();
        let ys = &self.iso;
        if kd < ys[0] {
            return Ok(LookupResult { kd_prime: xs[0], extrapolated: true });
        }
        if kd > *ys.last().unwrap() {
            return Ok(LookupResult { kd_prime: *xs.last().unwrap(), extrapolated: true });
        }
        for i in 0..ys.len() - 1 {
            if kd >= ys[i] && kd <= ys[i + 1] {
                let kd_prime = if ys[i + 1] == ys[i] || kd == ys[i] {
                    xs[i]
                } else {
                    xs[i] + (kd - ys[i]) / (ys[i + 1] - ys[i]) * (xs[i + 1] - xs[i])
                };
                return Ok(LookupResult { kd_prime, extrapolated: false });
            }
        }
        // kd equals the last node exactly.
        Ok(LookupResult { kd_prime: *xs.last().unwrap(), extrapolated: false })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{},{},{}", self.metric.name(), self.dataset_id, self.config_hash);
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                p.kd_prime,
                p.kd_measured,
                p.seed_count,
                if p.flagged { 1 } else { 0 }
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, detail: String| Error::Parse {
            path: "lug".to_string(),
            location: format!("line {}", line + 1),
            detail,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty file".into()))?;
        let mut head = header.split(',');
        let metric = head
            .next()
            .and_then(CostMetric::from_name)
            .ok_or_else(|| parse_err(0, format!("bad metric in header `{header}`")))?;
        let dataset_id = head
            .next()
            .ok_or_else(|| parse_err(0, "missing dataset id".into()))?
            .to_string();
        let config_hash = head
            .next()
            .ok_or_else(|| parse_err(0, "missing config hash".into()))?
            .to_string();
        let mut points = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(parse_err(no, format!("expected 4 fields, got {}", fields.len())));
            }
            let kd_prime: f64 = fields[0]
                .parse()
                .map_err(|_| parse_err(no, format!("bad kd_prime `{}`", fields[0])))?;
            let kd_measured: f64 = fields[1]
                .parse()
                .map_err(|_| parse_err(no, format!("bad kd_measured `{}`", fields[1])))?;
            let seed_count: u32 = fields[2]
                .parse()
                .map_err(|_| parse_err(no, format!("bad seed_count `{}`", fields[2])))?;
            let flagged = match fields[3] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(no, format!("bad flag `{other}`"))),
            };
            points.push(LugPoint { kd_prime, kd_measured, seed_count, flagged });
        }
        LookupGraph::new(metric, dataset_id, config_hash, points)
    }
}

/// Canonical fingerprint of everything that shapes a calibration run; any
/// hyperparameter change changes the hash.
pub fn config_fingerprint(cfg: &SearchRunConfig, grid: &[f64], repeats: usize, dataset_id: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "epochs={};batch={};w_lr={};w_mom={};w_wd={};clip={};a_lr={};a_betas={:?};a_wd={};l_lr={};l_epoch={};vf={};seed={};flags={};sup={:?};tgt={:?};metric={};grid={:?};repeats={repeats};data={dataset_id}",
        cfg.epochs,
        cfg.batch_size,
        cfg.w_lr,
        cfg.w_momentum,
        cfg.w_weight_decay,
        cfg.grad_clip,
        cfg.alpha_lr,
        cfg.alpha_betas,
        cfg.alpha_weight_decay,
        cfg.lambda_lr,
        cfg.lambda_per_epoch,
        cfg.val_fraction,
        cfg.seed,
        cfg.flags.label(),
        cfg.supernet,
        cfg.target,
        cfg.metric.name(),
        grid,
    );
    let _ = write!(
        s,
        ";ops={}",
        cfg.op_set
            .kinds()
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join("+")
    );
    let mut hasher = Sha256::new();
    hasher.update(s.as_bytes());
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Worker cap: the smaller of the requested parallelism and the
/// `DCANAS_THREADS` environment variable (when set).
pub fn effective_parallelism(requested: usize) -> usize {
    let cap = std::env::var("DCANAS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(usize::MAX);
    requested.max(1).min(cap)
}

#[derive(Clone, Debug)]
pub struct LugBuildConfig {
    /// Strictly increasing `K_d'` grid (≥ 2 points).
    pub grid: Vec<f64>,
    /// Searches per grid point; the measured `K_d` is their median.
    pub repeats: usize,
    pub parallelism: usize,
    pub base: SearchRunConfig,
}

struct PointOutcome {
    costs: Vec<f64>,
    failures: usize,
}

/// Run the calibration searches (optionally in parallel) and assemble the
/// lookup graph. Failed searches drop their repeat; a point fails when every
/// repeat fails, and the build fails with fewer than two surviving points.
pub fn build_lug(build: &LugBuildConfig, dataset: &Dataset) -> Result<LookupGraph> {
    if build.grid.len() < 2 {
        return Err(Error::config(format!(
            "LUG grid needs at least 2 points to interpolate, got {}",
            build.grid.len()
        )));
    }
    for pair in build.grid.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::config("LUG grid must be strictly increasing"));
        }
    }
    if build.grid[0] <= 0.0 {
        return Err(Error::config("LUG grid values must be positive"));
    }
    let repeats = build.repeats.max(1);
    let jobs: Vec<(usize, usize)> = (0..build.grid.len())
        .flat_map(|p| (0..repeats).map(move |r| (p, r)))
        .collect();
    let workers = effective_parallelism(build.parallelism).min(jobs.len());

    let run_one = |point: usize, repeat: usize| -> Result<u64> {
        let kd_prime = build.grid[point];
        let mut cfg = build.base.clone();
        cfg.seed = build
            .base
            .seed
            .wrapping_add(point as u64 * 7919)
            .wrapping_add(repeat as u64);
        let spec = ConstraintSpec::direct(cfg.metric, kd_prime, kd_prime)?.normalized();
        let res = run_search(cfg, Some(spec), dataset)?;
        Ok(res.derived_cost)
    };

    let mut results: Vec<Option<Result<u64>>> = Vec::new();
    results.resize_with(jobs.len(), || None);
    if workers <= 1 {
        for (slot, &(p, r)) in jobs.iter().enumerate() {
            results[slot] = Some(run_one(p, r));
        }
    } else {
        let slots: Vec<std::sync::Mutex<Option<Result<u64>>>> =
            jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for w in 0..workers {
                let jobs = &jobs;
                let slots = &slots;
                let run_one = &run_one;
                scope.spawn(move || {
                    let mut i = w;
                    while i < jobs.len() {
                        let (p, r) = jobs[i];
                        *slots[i].lock().unwrap() = Some(run_one(p, r));
                        i += workers;
                    }
                });
            }
        });
        for (slot, cell) in slots.into_iter().enumerate() {
            results[slot] = cell.into_inner().unwrap();
        }
    }

    let mut outcomes: Vec<PointOutcome> = (0..build.grid.len())
        .map(|_| PointOutcome { costs: Vec::new(), failures: 0 })
        .collect();
    for (slot, &(p, _)) in jobs.iter().enumerate() {
        match results[slot].take().expect("every job ran") {
            Ok(cost) => outcomes[p].costs.push(cost as f64),
            Err(err) => {
                eprintln!("lug: search for grid point {} failed: {err}", build.grid[p]);
                outcomes[p].failures += 1;
            }
        }
    }

    let mut points = Vec::new();
    let mut running_max = f64::NEG_INFINITY;
    for (p, outcome) in outcomes.iter().enumerate() {
        if outcome.costs.is_empty() {
            continue; // point failed entirely
        }
        let mut costs = outcome.costs.clone();
        costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if costs.len() % 2 == 1 {
            costs[costs.len() / 2]
        } else {
            (costs[costs.len() / 2 - 1] + costs[costs.len() / 2]) / 2.0
        };
        let flagged = median < running_max;
        running_max = running_max.max(median);
        points.push(LugPoint {
            kd_prime: build.grid[p],
            kd_measured: median,
            seed_count: costs.len() as u32,
            flagged,
        });
    }
    if points.len() < 2 {
        return Err(Error::config(format!(
            "LUG build: only {} grid points succeeded, need at least 2",
            points.len()
        )));
    }
    let hash = config_fingerprint(&build.base, &build.grid, repeats, &dataset.name);
    LookupGraph::new(build.base.metric, dataset.name.clone(), hash, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::TargetNetConfig;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::search::FeatureFlags;
    use crate::space::SupernetConfig;

    fn two_point_graph() -> LookupGraph {
        LookupGraph::new(
            CostMetric::Params,
            "toy".into(),
            "deadbeef".into(),
            vec![
                LugPoint { kd_prime: 10.0, kd_measured: 14.0, seed_count: 3, flagged: false },
                LugPoint { kd_prime: 20.0, kd_measured: 26.0, seed_count: 3, flagged: false },
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_point_is_rejected() {
        let err = LookupGraph::new(
            CostMetric::Params,
            "toy".into(),
            "x".into(),
            vec![LugPoint { kd_prime: 10.0, kd_measured: 14.0, seed_count: 1, flagged: false }],
        );
        assert!(err.is_err());
    }

    #[test]
    fn lookup_nodes_midpoints_and_clamps() {
        let g = two_point_graph();
        // Exact node.
        assert_eq!(g.lookup(14.0).unwrap(), LookupResult { kd_prime: 10.0, extrapolated: false });
        // Linear midpoint: kd=20 lies halfway in measured space.
        let mid = g.lookup(20.0).unwrap();
        assert!(!mid.extrapolated);
        assert!((mid.kd_prime - 15.0).abs() < 1e-12);
        // Below range clamps to the smallest grid point with a warning flag.
        let low = g.lookup(5.0).unwrap();
        assert_eq!(low.kd_prime, 10.0);
        assert!(low.extrapolated);
        let high = g.lookup(100.0).unwrap();
        assert_eq!(high.kd_prime, 20.0);
        assert!(high.extrapolated);
    }

    #[test]
    fn isotonic_pav_known_case() {
        assert_eq!(isotonic_non_decreasing(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_non_decreasing(&[5.0, 4.0, 3.0]), vec![4.0, 4.0, 4.0]);
        let ys = [1.0, 2.0, 3.0];
        assert_eq!(isotonic_non_decreasing(&ys), ys.to_vec());
    }

    #[test]
    fn flat_segments_resolve_to_smallest_kd_prime() {
        let g = LookupGraph::new(
            CostMetric::Params,
            "toy".into(),
            "x".into(),
            vec![
                LugPoint { kd_prime: 10.0, kd_measured: 20.0, seed_count: 1, flagged: false },
                LugPoint { kd_prime: 15.0, kd_measured: 18.0, seed_count: 1, flagged: true },
                LugPoint { kd_prime: 30.0, kd_measured: 40.0, seed_count: 1, flagged: false },
            ],
        )
        .unwrap();
        // Isotonic fit pools the first two to 19,19.
        assert_eq!(g.isotonic_curve(), &[19.0, 19.0, 40.0]);
        let r = g.lookup(19.0).unwrap();
        assert_eq!(r.kd_prime, 10.0, "conservative end of the flat segment");
    }

    #[test]
    fn text_round_trip_is_byte_exact() {
        let g = two_point_graph();
        let text = g.to_text();
        let back = LookupGraph::from_text(&text).unwrap();
        assert_eq!(text, back.to_text());
        assert_eq!(back.lookup(20.0).unwrap(), g.lookup(20.0).unwrap());
        assert_eq!(back.points(), g.points());
    }

    #[test]
    fn malformed_lines_name_their_location() {
        let text = "params,toy,hash\n10,14,3,0\nbad line\n";
        let err = LookupGraph::from_text(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn fingerprint_changes_with_any_hyperparameter() {
        let base = SearchRunConfig::desk(2);
        let grid = [100.0, 200.0];
        let a = config_fingerprint(&base, &grid, 3, "toy");
        let mut changed = base.clone();
        changed.alpha_lr *= 2.0;
        assert_ne!(a, config_fingerprint(&changed, &grid, 3, "toy"));
        let mut changed = base.clone();
        changed.flags = FeatureFlags::all_off();
        assert_ne!(a, config_fingerprint(&changed, &grid, 3, "toy"));
        assert_ne!(a, config_fingerprint(&base, &[100.0, 300.0], 3, "toy"));
        assert_ne!(a, config_fingerprint(&base, &grid, 2, "toy"));
        assert_ne!(a, config_fingerprint(&base, &grid, 3, "other"));
    }

    #[test]
    fn effective_parallelism_respects_env_cap() {
        // No env set in tests by default: requested value passes through.
        std::env::remove_var("DCANAS_THREADS");
        assert_eq!(effective_parallelism(4), 4);
        std::env::set_var("DCANAS_THREADS", "2");
        assert_eq!(effective_parallelism(4), 2);
        std::env::remove_var("DCANAS_THREADS");
    }

    #[test]
    fn tiny_build_produces_a_queryable_graph() {
        let ds = make_synthetic(SyntheticKind::Blobs, 96, 2, 0.0, 3).unwrap();
        let base = SearchRunConfig {
            epochs: 1,
            batch_size: 12,
            track_val_accuracy: false,
            supernet: SupernetConfig { cells: 4, channels: 4, nodes: 4, classes: 2, ..Default::default() },
            target: TargetNetConfig { layers: 3, channels: 4, ..TargetNetConfig::desk(2) },
            ..SearchRunConfig::desk(2)
        };
        let build = LugBuildConfig {
            grid: vec![800.0, 2500.0],
            repeats: 1,
            parallelism: 2,
            base,
        };
        let g = build_lug(&build, &ds).unwrap();
        assert_eq!(g.points().len(), 2);
        assert!(g.points().iter().all(|p| p.seed_count == 1));
        let text = g.to_text();
        let back = LookupGraph::from_text(&text).unwrap();
        assert_eq!(text, back.to_text());
        assert!(g.lookup(g.points()[0].kd_measured).unwrap().kd_prime > 0.0);
    }

    #[test]
    fn bad_grids_are_rejected() {
        let ds = make_synthetic(SyntheticKind::Blobs, 60, 2, 0.0, 3).unwrap();
        let base = SearchRunConfig::desk(2);
        for grid in [vec![500.0], vec![500.0, 500.0], vec![-1.0, 500.0]] {
            let build = LugBuildConfig { grid, repeats: 1, parallelism: 1, base: base.clone() };
            assert!(build_lug(&build, &ds).is_err());
        }
    }
}
