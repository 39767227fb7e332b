//! Discrete architectures: derivation from α, canonical text serialization,
//! and validation.

use crate::error::{Error, Result};
use crate::space::alpha::AlphaSnapshot;
use crate::space::cell::{validate_nodes, CellKind, INPUT_NODES};
use crate::space::opset::{OpKind, OpSet};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenotypeEdge {
    pub target: usize,
    pub source: usize,
    pub op: String,
}

/// A derived architecture: per cell kind, two selected incoming edges per
/// intermediate node, each carrying one operation. All intermediate nodes
/// are concatenated to form the cell output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub nodes: usize,
    pub normal: Vec<GenotypeEdge>,
    pub reduction: Vec<GenotypeEdge>,
}

/// Per intermediate node (j = 2..N in order), the selected (source, op index)
/// pairs. This is what derived cells consume directly.
pub type CellArch = Vec<Vec<(usize, usize)>>;

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Rank the incoming edges of every intermediate node and keep the top two.
///
/// Edge score = max softmax weight over non-zero ops; the edge's op is the
/// argmax over non-zero ops. Ties break toward the lower source index and
/// the earlier op in the set order.
pub fn derive_cell_arch(rows: &[Vec<f64>], nodes: usize, op_set: &OpSet) -> Result<CellArch> {
    validate_nodes(nodes)?;
    let zero = op_set.zero_index();
    if op_set.len() == 1 && zero.is_some() {
        return Err(Error::config("cannot derive a cell from a zero-only op set"));
    }
    let mut arch = Vec::with_capacity(nodes - INPUT_NODES);
    let mut row_idx = 0usize;
    for j in INPUT_NODES..nodes {
        // (score, source, op index) per incoming edge, in source order.
        let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(j);
        for i in 0..j {
            let weights = softmax_row(&rows[row_idx]);
            row_idx += 1;
            let mut best_op = None;
            let mut best_w = f64::NEG_INFINITY;
            for (o, &w) in weights.iter().enumerate() {
                if Some(o) == zero {
                    continue;
                }
                if w > best_w {
                    best_w = w;
                    best_op = Some(o);
                }
            }
            let op = best_op.expect("op set has a non-zero op");
            scored.push((best_w, i, op));
        }
        // Stable by construction: sources are pushed in ascending order, so a
        // stable sort on descending score leaves ties in source order.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let picks: Vec<(usize, usize)> = scored.iter().take(2).map(|&(_, i, o)| (i, o)).collect();
        arch.push(picks);
    }
    Ok(arch)
}

fn arch_to_edges(arch: &CellArch, op_set: &OpSet) -> Vec<GenotypeEdge> {
    let mut out = Vec::new();
    for (node_off, picks) in arch.iter().enumerate() {
        let target = node_off + INPUT_NODES;
        let mut picks = picks.clone();
        picks.sort_by_key(|&(src, _)| src);
        for (source, op_idx) in picks {
            out.push(GenotypeEdge {
                target,
                source,
                op: op_set.kinds()[op_idx].name().to_string(),
            });
        }
    }
    out
}

/// Alg-style final derivation: top-weighted ops per node for both cell kinds.
pub fn derive_genotype(alpha: &AlphaSnapshot, op_set: &OpSet) -> Result<Genotype> {
    let normal = derive_cell_arch(&alpha.normal, alpha.nodes, op_set)?;
    let reduction = derive_cell_arch(&alpha.reduction, alpha.nodes, op_set)?;
    Ok(Genotype {
        nodes: alpha.nodes,
        normal: arch_to_edges(&normal, op_set),
        reduction: arch_to_edges(&reduction, op_set),
    })
}

impl Genotype {
    /// Structural checks: two in-edges per intermediate node, sources before
    /// targets, no zero op, every op known.
    pub fn validate(&self) -> Result<()> {
        validate_nodes(self.nodes)?;
        for (kind, edges) in [("normal", &self.normal), ("reduction", &self.reduction)] {
            let mut per_node = vec![0usize; self.nodes];
            for e in edges.iter() {
                if e.target < INPUT_NODES || e.target >= self.nodes {
                    return Err(Error::config(format!(
                        "{kind}: target {} out of range for {} nodes",
                        e.target, self.nodes
                    )));
                }
                if e.source >= e.target {
                    return Err(Error::config(format!(
                        "{kind}: edge source {} must precede target {}",
                        e.source, e.target
                    )));
                }
                let op = OpKind::from_name(&e.op).ok_or_else(|| Error::UnknownOp(e.op.clone()))?;
                if op == OpKind::Zero {
                    return Err(Error::config(format!(
                        "{kind}: zero op is not allowed in a derived architecture"
                    )));
                }
                per_node[e.target] += 1;
            }
            for j in INPUT_NODES..self.nodes {
                if per_node[j] != 2 {
                    return Err(Error::config(format!(
                        "{kind}: node {j} has {} selected edges, expected 2",
                        per_node[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Selected (source, op index) pairs per intermediate node, resolved
    /// against `op_set` order.
    pub fn cell_arch(&self, kind: CellKind, op_set: &OpSet) -> Result<CellArch> {
        let edges = match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        };
        let mut arch: CellArch = vec![Vec::new(); self.nodes - INPUT_NODES];
        for e in edges {
            let op_idx = op_set
                .index_of(&e.op)
                .ok_or_else(|| Error::UnknownOp(e.op.clone()))?;
            arch[e.target - INPUT_NODES].push((e.source, op_idx));
        }
        Ok(arch)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("version 1\n");
        s.push_str(&format!("cells {}\n", self.nodes));
        for (name, edges) in [("normal", &self.normal), ("reduction", &self.reduction)] {
            s.push_str(name);
            s.push_str(":\n");
            for e in edges {
                s.push_str(&format!("{} {} {}\n", e.target, e.source, e.op));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Genotype> {
        let parse_err = |line_no: usize, detail: String| Error::Parse {
            path: "genotype".to_string(),
            location: format!("line {}", line_no + 1),
            detail,
        };
        let lines: Vec<&str> = text.lines().collect();
        let mut idx = 0usize;
        let expect = |want: &str, idx: &mut usize| -> Result<String> {
            let line = lines
                .get(*idx)
                .ok_or_else(|| parse_err(*idx, format!("expected `{want}`, found end of file")))?;
            let rest = line
                .strip_prefix(want)
                .ok_or_else(|| parse_err(*idx, format!("expected `{want}`, found `{line}`")))?;
            *idx += 1;
            Ok(rest.trim().to_string())
        };
        let version = expect("version", &mut idx)?;
        if version != "1" {
            return Err(parse_err(0, format!("unknown version `{version}`")));
        }
        let nodes: usize = expect("cells", &mut idx)?
            .parse()
            .map_err(|_| parse_err(1, "cells must be an integer".to_string()))?;
        let mut sections: Vec<(String, Vec<GenotypeEdge>)> = Vec::new();
        while idx < lines.len() {
            let line = lines[idx].trim();
            idx += 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_suffix(':') {
                sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (_, edges) = sections
                .last_mut()
                .ok_or_else(|| parse_err(idx - 1, "edge before any cell header".to_string()))?;
            let mut parts = line.split_whitespace();
            let target: usize = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err(idx - 1, format!("bad edge line `{line}`")))?;
            let source: usize = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err(idx - 1, format!("bad edge line `{line}`")))?;
            let op = parts
                .next()
                .ok_or_else(|| parse_err(idx - 1, format!("missing op name in `{line}`")))?
                .to_string();
            if parts.next().is_some() {
                return Err(parse_err(idx - 1, format!("trailing tokens in `{line}`")));
            }
            if OpKind::from_name(&op).is_none() {
                return Err(parse_err(idx - 1, format!("unknown op `{op}`")));
            }
            edges.push(GenotypeEdge { target, source, op });
        }
        let mut normal = None;
        let mut reduction = None;
        for (name, edges) in sections {
            match name.as_str() {
                "normal" => normal = Some(edges),
                "reduction" => reduction = Some(edges),
                other => {
                    return Err(Error::Parse {
                        path: "genotype".to_string(),
                        location: "section header".to_string(),
                        detail: format!("unknown cell kind `{other}`"),
                    })
                }
            }
        }
        let g = Genotype {
            nodes,
            normal: normal.ok_or_else(|| Error::config("genotype missing `normal:` section"))?,
            reduction: reduction
                .ok_or_else(|| Error::config("genotype missing `reduction:` section"))?,
        };
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_opset() -> OpSet {
        OpSet::new(vec![OpKind::Zero, OpKind::SkipConnect, OpKind::SepConv3x3]).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, edges: usize, ops: usize) -> Vec<Vec<f64>> {
        (0..edges)
            .map(|_| (0..ops).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    /// Independent ranking: fully enumerate and sort explicitly.
    fn brute_force(rows: &[Vec<f64>], nodes: usize, op_set: &OpSet) -> CellArch {
        let zero = op_set.zero_index();
        let mut arch = Vec::new();
        let mut r = 0usize;
        for j in INPUT_NODES..nodes {
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new(); // (src, op, weight)
            for i in 0..j {
                let w = softmax_row(&rows[r]);
                r += 1;
                let mut best: Option<(usize, f64)> = None;
                for o in 0..op_set.len() {
                    if Some(o) == zero {
                        continue;
                    }
                    match best {
                        Some((_, bw)) if w[o] <= bw => {}
                        _ => {
                            if best.map_or(true, |(_, bw)| w[o] > bw) {
                                best = Some((o, w[o]));
                            }
                        }
                    }
                }
                let (op, weight) = best.unwrap();
                candidates.push((i, op, weight));
            }
            candidates.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap()
                    .then_with(|| a.0.cmp(&b.0))
            });
            arch.push(candidates.into_iter().take(2).map(|(i, o, _)| (i, o)).collect());
        }
        arch
    }

    #[test]
    fn peaked_alpha_selects_the_peaked_assignment() {
        // Offset +20 on a hand-chosen op per edge forces that op.
        let op_set = toy_opset();
        let nodes = 4;
        let edges = crate::space::cell::num_edges(nodes);
        let mut rows = vec![vec![0.0f64; op_set.len()]; edges];
        // edges in (target, source) order: (0,2),(1,2),(0,3),(1,3),(2,3)
        let choices = [1usize, 2, 2, 1, 2];
        for (row, &op) in rows.iter_mut().zip(&choices) {
            row[op] += 20.0;
        }
        // Make edge scores distinct so the top-2 pick is unambiguous.
        rows[0][1] += 1.0;
        rows[1][2] += 0.5;
        rows[2][2] += 1.0;
        rows[3][1] += 0.5;
        let arch = derive_cell_arch(&rows, nodes, &op_set).unwrap();
        assert_eq!(arch[0], vec![(0, 1), (1, 2)]);
        assert_eq!(arch[1], vec![(0, 2), (1, 1)]);
    }

    #[test]
    fn matches_brute_force_on_random_tables() {
        let op_set = toy_opset();
        let nodes = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let rows = random_rows(&mut rng, crate::space::cell::num_edges(nodes), op_set.len());
            let fast = derive_cell_arch(&rows, nodes, &op_set).unwrap();
            let slow = brute_force(&rows, nodes, &op_set);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn all_equal_alpha_uses_documented_tie_break() {
        let op_set = toy_opset();
        let nodes = 4;
        let rows = vec![vec![0.0f64; op_set.len()]; crate::space::cell::num_edges(nodes)];
        let arch = derive_cell_arch(&rows, nodes, &op_set).unwrap();
        // Lowest sources win rank ties; first non-zero op wins op ties.
        assert_eq!(arch[0], vec![(0, 1), (1, 1)]);
        assert_eq!(arch[1], vec![(0, 1), (1, 1)]);
    }

    #[test]
    fn shift_invariance_of_derivation() {
        let op_set = toy_opset();
        let nodes = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let rows = random_rows(&mut rng, crate::space::cell::num_edges(nodes), op_set.len());
            let shifted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|v| v + 3.75).collect())
                .collect();
            assert_eq!(
                derive_cell_arch(&rows, nodes, &op_set).unwrap(),
                derive_cell_arch(&shifted, nodes, &op_set).unwrap()
            );
        }
    }

    #[test]
    fn round_trip_random_genotypes() {
        let op_set = OpSet::default_darts();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let alpha = AlphaSnapshot {
                nodes: 4,
                num_ops: op_set.len(),
                normal: random_rows(&mut rng, 5, op_set.len()),
                reduction: random_rows(&mut rng, 5, op_set.len()),
            };
            let g = derive_genotype(&alpha, &op_set).unwrap();
            g.validate().unwrap();
            let text = g.to_text();
            let back = Genotype::from_text(&text).unwrap();
            assert_eq!(g, back);
            assert_eq!(text, back.to_text());
        }
    }

    #[test]
    fn malformed_entry_names_the_line() {
        let text = "version 1\ncells 4\nnormal:\n2 0 sep_conv_3x3\nnot an edge\n";
        let err = Genotype::from_text(text).unwrap_err().to_string();
        assert!(err.contains("line 5"), "{err}");
    }

    #[test]
    fn unknown_op_is_rejected() {
        let text = "version 1\ncells 4\nnormal:\n2 0 conv_7x7_mystery\n";
        let err = Genotype::from_text(text).unwrap_err().to_string();
        assert!(err.contains("conv_7x7_mystery"), "{err}");
    }

    #[test]
    fn zero_op_edges_are_rejected_by_validate() {
        let g = Genotype {
            nodes: 3,
            normal: vec![
                GenotypeEdge { target: 2, source: 0, op: "zero".into() },
                GenotypeEdge { target: 2, source: 1, op: "skip_connect".into() },
            ],
            reduction: vec![
                GenotypeEdge { target: 2, source: 0, op: "skip_connect".into() },
                GenotypeEdge { target: 2, source: 1, op: "skip_connect".into() },
            ],
        };
        assert!(g.validate().is_err());
    }
}
