//! Flat `[section]` + `key=value` configuration files, merged with CLI
//! overrides into one resolved settings object. The resolved form has a
//! canonical text dump which is embedded in run manifests and hashed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::cost::{CostMetric, TargetNetConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::search::SearchRunConfig;
use crate::space::{OpSet, SupernetConfig};

/// Everything a run needs, resolvable from defaults + file + flags.
#[derive(Clone, Debug)]
pub struct Settings {
    pub search: SearchRunConfig,
    pub eval: EvalConfig,
    pub dataset: String,
    pub val_fraction: f64,
    pub take: Option<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            search: SearchRunConfig::desk(2),
            eval: EvalConfig {
                epochs: 12,
                batch_size: 64,
                dropout: 0.0,
                ..EvalConfig::desk(2)
            },
            dataset: "spiral".to_string(),
            val_fraction: 0.5,
            take: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!("[{section}] {key}: cannot parse `{value}`"))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("[{section}] {key}: expected a bool, got `{value}`"))),
    }
}

impl Settings {
    /// Apply one `key=value` under a section header.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let s = section;
        match (section, key) {
            ("search", "epochs") => self.search.epochs = parse_num(s, key, value)?,
            ("search", "warmup_epochs") => self.search.warmup_epochs = parse_num(s, key, value)?,
            ("search", "batch") => self.search.batch_size = parse_num(s, key, value)?,
            ("search", "w_lr") => self.search.w_lr = parse_num(s, key, value)?,
            ("search", "w_momentum") => self.search.w_momentum = parse_num(s, key, value)?,
            ("search", "w_weight_decay") => self.search.w_weight_decay = parse_num(s, key, value)?,
            ("search", "grad_clip") => self.search.grad_clip = parse_num(s, key, value)?,
            ("search", "alpha_lr") => self.search.alpha_lr = parse_num(s, key, value)?,
            ("search", "alpha_weight_decay") => {
                self.search.alpha_weight_decay = parse_num(s, key, value)?
            }
            ("search", "lambda_lr") => self.search.lambda_lr = parse_num(s, key, value)?,
            ("search", "lambda_per_epoch") => {
                self.search.lambda_per_epoch = parse_bool(s, key, value)?
            }
            ("search", "early_stop_patience") => {
                self.search.early_stop_patience = parse_num(s, key, value)?
            }
            ("search", "track_val_accuracy") => {
                self.search.track_val_accuracy = parse_bool(s, key, value)?
            }
            ("search", "op_set") => {
                self.search.op_set = match value {
                    "desk" => OpSet::desk(),
                    "darts" => OpSet::default_darts(),
                    other => {
                        return Err(Error::config(format!(
                            "[search] op_set: `{other}` (expected `desk` or `darts`)"
                        )))
                    }
                }
            }
            ("supernet", "cells") => self.search.supernet.cells = parse_num(s, key, value)?,
            ("supernet", "channels") => self.search.supernet.channels = parse_num(s, key, value)?,
            ("supernet", "nodes") => self.search.supernet.nodes = parse_num(s, key, value)?,
            ("supernet", "bottleneck_ratio") => {
                self.search.supernet.bottleneck_ratio = parse_num(s, key, value)?
            }
            ("target", "layers") => self.search.target.layers = parse_num(s, key, value)?,
            ("target", "channels") => self.search.target.channels = parse_num(s, key, value)?,
            ("eval", "epochs") => self.eval.epochs = parse_num(s, key, value)?,
            ("eval", "batch") => self.eval.batch_size = parse_num(s, key, value)?,
            ("eval", "lr") => self.eval.lr = parse_num(s, key, value)?,
            ("eval", "momentum") => self.eval.momentum = parse_num(s, key, value)?,
            ("eval", "weight_decay") => self.eval.weight_decay = parse_num(s, key, value)?,
            ("eval", "grad_clip") => self.eval.grad_clip = parse_num(s, key, value)?,
            ("eval", "dropout") => self.eval.dropout = parse_num(s, key, value)?,
            ("eval", "cutout") => {
                let v: usize = parse_num(s, key, value)?;
                self.eval.cutout = (v > 0).then_some(v);
            }
            ("data", "dataset") => self.dataset = value.to_string(),
            ("data", "val_fraction") => self.val_fraction = parse_num(s, key, value)?,
            ("data", "take") => {
                let v: usize = parse_num(s, key, value)?;
                self.take = (v > 0).then_some(v);
            }
            _ => {
                return Err(Error::config(format!("unknown config key [{section}] {key}")));
            }
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                location: format!("line {}", no + 1),
                detail: format!("expected key=value, got `{line}`"),
            })?;
            self.apply(&section, key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                location: format!("line {}", no + 1),
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Canonical flat dump; this exact text is hashed for provenance.
    pub fn canonical(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        let sc = &self.search;
        put("search.epochs", sc.epochs.to_string());
        put("search.warmup_epochs", sc.warmup_epochs.to_string());
        put("search.batch", sc.batch_size.to_string());
        put("search.w_lr", sc.w_lr.to_string());
        put("search.w_momentum", sc.w_momentum.to_string());
        put("search.w_weight_decay", sc.w_weight_decay.to_string());
        put("search.grad_clip", sc.grad_clip.to_string());
        put("search.alpha_lr", sc.alpha_lr.to_string());
        put("search.alpha_betas", format!("{},{}", sc.alpha_betas.0, sc.alpha_betas.1));
        put("search.alpha_weight_decay", sc.alpha_weight_decay.to_string());
        put("search.lambda_lr", sc.lambda_lr.to_string());
        put("search.lambda_per_epoch", sc.lambda_per_epoch.to_string());
        put("search.val_fraction", self.val_fraction.to_string());
        put("search.seed", sc.seed.to_string());
        put("search.flags", sc.flags.label());
        put(
            "search.op_set",
            sc.op_set.kinds().iter().map(|k| k.name()).collect::<Vec<_>>().join("+"),
        );
        put("search.early_stop_patience", sc.early_stop_patience.to_string());
        put("search.metric", sc.metric.name().to_string());
        put("supernet.cells", sc.supernet.cells.to_string());
        put("supernet.channels", sc.supernet.channels.to_string());
        put("supernet.nodes", sc.supernet.nodes.to_string());
        put("supernet.bottleneck_ratio", sc.supernet.bottleneck_ratio.to_string());
        put("target.layers", sc.target.layers.to_string());
        put("target.channels", sc.target.channels.to_string());
        let ec = &self.eval;
        put("eval.epochs", ec.epochs.to_string());
        put("eval.batch", ec.batch_size.to_string());
        put("eval.lr", ec.lr.to_string());
        put("eval.momentum", ec.momentum.to_string());
        put("eval.weight_decay", ec.weight_decay.to_string());
        put("eval.grad_clip", ec.grad_clip.to_string());
        put("eval.cutout", ec.cutout.map_or(0, |c| c).to_string());
        put("eval.dropout", ec.dropout.to_string());
        put("data.dataset", self.dataset.clone());
        put("data.take", self.take.map_or(0, |t| t).to_string());
        map
    }

    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.canonical() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Propagate dataset shape into the nested network configs.
    pub fn bind_dataset(&mut self, ds: &crate::data::Dataset) {
        let sup = SupernetConfig {
            input_channels: ds.channels,
            input_hw: (ds.height, ds.width),
            classes: ds.classes,
            ..self.search.supernet.clone()
        };
        self.search.supernet = sup;
        let tgt = TargetNetConfig {
            input_channels: ds.channels,
            input_hw: (ds.height, ds.width),
            classes: ds.classes,
            ..self.search.target.clone()
        };
        self.search.target = tgt.clone();
        self.eval.target = tgt;
        self.search.val_fraction = self.val_fraction;
    }
}

/// `2K`/`1.5M` parameter counts, `3MF`/`2GF` MAC counts, or bare numbers.
pub fn parse_constraint(text: &str, metric: CostMetric) -> Result<f64> {
    let t = text.trim();
    let usage = || {
        Error::config(format!(
            "bad constraint `{t}`: expected <number>[K|M] for params or <number>[MF|GF] for flops"
        ))
    };
    let (digits, unit): (&str, &str) = match t.find(|c: char| c.is_ascii_alphabetic()) {
        Some(pos) => (&t[..pos], &t[pos..]),
        None => (t, ""),
    };
    let value: f64 = digits.parse().map_err(|_| usage())?;
    if value <= 0.0 {
        return Err(usage());
    }
    let scale = match (metric, unit) {
        (_, "") => 1.0,
        (CostMetric::Params, "K") => 1e3,
        (CostMetric::Params, "M") => 1e6,
        (CostMetric::Flops, "MF") => 1e6,
        (CostMetric::Flops, "GF") => 1e9,
        _ => return Err(usage()),
    };
    Ok(value * scale)
}

/// Grid syntax: `lo:hi:n` (geometric spacing) or an explicit comma list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let t = text.trim();
    if t.contains(':') {
        let parts: Vec<&str> = t.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!("bad grid `{t}`: expected lo:hi:n")));
        }
        let lo: f64 = parts[0]
            .parse()
            .map_err(|_| Error::config(format!("bad grid lo `{}`", parts[0])))?;
        let hi: f64 = parts[1]
            .parse()
            .map_err(|_| Error::config(format!("bad grid hi `{}`", parts[1])))?;
        let n: usize = parts[2]
            .parse()
            .map_err(|_| Error::config(format!("bad grid count `{}`", parts[2])))?;
        if n < 2 {
            return Err(Error::config(format!(
                "grid `{t}` has {n} point(s); interpolation needs at least 2"
            )));
        }
        if lo <= 0.0 || hi <= lo {
            return Err(Error::config(format!("grid `{t}` must satisfy 0 < lo < hi")));
        }
        let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
        Ok((0..n).map(|i| lo * ratio.powi(i as i32)).collect())
    } else {
        let vals: Result<Vec<f64>> = t
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad grid value `{v}`")))
            })
            .collect();
        let vals = vals?;
        if vals.len() < 2 {
            return Err(Error::config(format!(
                "grid `{t}` has {} point(s); interpolation needs at least 2",
                vals.len()
            )));
        }
        Ok(vals)
    }
}

/// Dataset descriptors: `spiral[:k=v,...]`, `moons[:...]`, `blobs[:...]`,
/// `mnist:<dir>`, `cifar10:<dir>`.
pub fn load_dataset(spec: &str, take: Option<usize>) -> Result<crate::data::Dataset> {
    use crate::data::{load_cifar_binary, load_idx, make_synthetic, merge_train_test, SyntheticKind};
    let (head, rest) = match spec.split_once(':') {
        Some((h, r)) => (h, Some(r)),
        None => (spec, None),
    };
    if let Some(kind) = SyntheticKind::from_name(head) {
        let mut n = 700usize;
        let mut classes = 2usize;
        let mut noise = 0.08f64;
        let mut seed = 7u64;
        if let Some(args) = rest {
            for kv in args.split(',') {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("bad dataset option `{kv}`")))?;
                match k {
                    "n" => n = parse_num("data", "n", v)?,
                    "classes" => classes = parse_num("data", "classes", v)?,
                    "noise" => noise = parse_num("data", "noise", v)?,
                    "seed" => seed = parse_num("data", "seed", v)?,
                    _ => return Err(Error::config(format!("unknown dataset option `{k}`"))),
                }
            }
        }
        return make_synthetic(kind, n, classes, noise, seed);
    }
    match head {
        "mnist" => {
            let dir = Path::new(rest.ok_or_else(|| Error::config("mnist:<dir> needs a directory"))?);
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test_images = dir.join("t10k-images-idx3-ubyte");
            if test_images.exists() {
                let test = load_idx(&test_images, &dir.join("t10k-labels-idx1-ubyte"))?;
                merge_train_test(train, test)
            } else {
                Ok(train)
            }
        }
        "cifar10" => {
            let dir = Path::new(rest.ok_or_else(|| Error::config("cifar10:<dir> needs a directory"))?);
            let train_paths: Vec<_> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            let train = load_cifar_binary(&train_paths, take)?;
            let test_path = dir.join("test_batch.bin");
            if test_path.exists() {
                let test = load_cifar_binary(&[test_path], take)?;
                merge_train_test(train, test)
            } else {
                Ok(train)
            }
        }
        other => Err(Error::config(format!("unknown dataset `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_units() {
        assert_eq!(parse_constraint("2K", CostMetric::Params).unwrap(), 2000.0);
        assert_eq!(parse_constraint("1.5M", CostMetric::Params).unwrap(), 1_500_000.0);
        assert_eq!(parse_constraint("750", CostMetric::Params).unwrap(), 750.0);
        assert_eq!(parse_constraint("3MF", CostMetric::Flops).unwrap(), 3e6);
        assert_eq!(parse_constraint("2GF", CostMetric::Flops).unwrap(), 2e9);
        assert!(parse_constraint("2X", CostMetric::Params).is_err());
        assert!(parse_constraint("2K", CostMetric::Flops).is_err());
        assert!(parse_constraint("-5K", CostMetric::Params).is_err());
    }

    #[test]
    fn grid_syntax() {
        let g = parse_grid("500:4000:4").unwrap();
        assert_eq!(g.len(), 4);
        assert!((g[0] - 500.0).abs() < 1e-9);
        assert!((g[3] - 4000.0).abs() < 1e-6);
        // geometric spacing: constant ratio
        let r0 = g[1] / g[0];
        let r1 = g[2] / g[1];
        assert!((r0 - r1).abs() < 1e-9);
        assert_eq!(parse_grid("100,200,400").unwrap(), vec![100.0, 200.0, 400.0]);
        assert!(parse_grid("500:500:1").is_err());
        assert!(parse_grid("500").is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\n[search]\nepochs=7\nbatch=16\n[target]\nlayers=5\n[data]\ndataset=blobs:n=80\n",
        )
        .unwrap();
        let mut s = Settings::default();
        s.load_file(&path).unwrap();
        assert_eq!(s.search.epochs, 7);
        assert_eq!(s.search.batch_size, 16);
        assert_eq!(s.search.target.layers, 5);
        assert_eq!(s.dataset, "blobs:n=80");
        let canon = s.canonical_text();
        assert!(canon.contains("search.epochs=7"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "[search]\nnot_a_key=1\n").unwrap();
        let mut s = Settings::default();
        let err = s.load_file(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn synthetic_dataset_descriptor() {
        let ds = load_dataset("blobs:n=60,classes=3,seed=1", None).unwrap();
        assert_eq!(ds.classes, 3);
        assert_eq!(ds.len(), 60);
        assert!(load_dataset("nosuch", None).is_err());
        assert!(load_dataset("spiral:bad", None).is_err());
    }
}
