//! Structural decisions from estimator scores: which inputs the nonlinear
//! function depends on, the support of its Hessian, and the resulting
//! additive decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAU_REL: f64 = 0.05;

/// Per-input order scores and the retain decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderScores {
    pub scores: Vec<f64>,
    pub retained: Vec<bool>,
    pub tau_rel: f64,
}

impl OrderScores {
    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.retained.len()).filter(|&j| self.retained[j]).collect()
    }

    pub fn dropped_indices(&self) -> Vec<usize> {
        (0..self.retained.len()).filter(|&j| !self.retained[j]).collect()
    }
}

fn check_tau(tau_rel: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau_rel) {
        return Err(Error::Config(format!("tau_rel must be in [0, 1), got {tau_rel}")));
    }
    Ok(())
}

/// Retains input `j` iff `scores[j] > tau_rel * max(scores)`.
pub fn decide_order(scores: &[f64], tau_rel: f64) -> Result<OrderScores> {
    check_tau(tau_rel)?;
    if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Config(format!("order scores must be finite and nonnegative, got {s}")));
    }
    let max = scores.iter().fold(0.0f64, |m, s| m.max(*s));
    if max <= 0.0 {
        return Err(Error::Degenerate("all order scores are zero; no input is retained".into()));
    }
    Ok(OrderScores {
        scores: scores.to_vec(),
        retained: scores.iter().map(|s| *s > tau_rel * max).collect(),
        tau_rel,
    })
}

/// Symmetric support of the Hessian over the retained inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSupport {
    /// Input indices, ascending; rows and columns follow this order.
    pub inputs: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub support: Vec<Vec<bool>>,
    pub tau_rel: f64,
}

impl HessianSupport {
    /// Edges `(i, j)` with `i <= j`, as input indices.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let m = self.inputs.len();
        let mut out = Vec::new();
        for a in 0..m {
            for b in a..m {
                if self.support[a][b] {
                    out.push((self.inputs[a], self.inputs[b]));
                }
            }
        }
        out
    }

    pub fn n_off_diagonal_edges(&self) -> usize {
        self.edges().iter().filter(|(a, b)| a != b).count()
    }
}

/// Builds the support from upper-triangle scores `(j, l, score)` with
/// `j <= l`; a missing pair counts as zero.
pub fn build_support(inputs: &[usize], upper: &[(usize, usize, f64)], tau_rel: f64) -> Result<HessianSupport> {
    check_tau(tau_rel)?;
    let mut inputs = inputs.to_vec();
    inputs.sort_unstable();
    inputs.dedup();
    let m = inputs.len();
    let pos = |j: usize| inputs.iter().position(|&i| i == j);
    let mut scores = vec![vec![0.0; m]; m];
    for &(j, l, s) in upper {
        let (Some(a), Some(b)) = (pos(j), pos(l)) else {
            return Err(Error::Config(format!("score pair ({j}, {l}) refers to an input that is not retained")));
        };
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::Config(format!("scheduling score ({j}, {l}) must be finite and nonnegative, got {s}")));
        }
        scores[a][b] = s;
        scores[b][a] = s;
    }
    let max = scores.iter().flatten().fold(0.0f64, |acc, s| acc.max(*s));
    let support = scores
        .iter()
        .map(|row| row.iter().map(|s| max > 0.0 && *s > tau_rel * max).collect())
        .collect();
    Ok(HessianSupport {
        inputs,
        scores,
        support,
        tau_rel,
    })
}

/// Additive decomposition read off the Hessian support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub retained: Vec<usize>,
    /// Connected components, each ascending, ordered by smallest member.
    pub groups: Vec<Vec<usize>>,
    /// Inputs with an all-zero Hessian row: their coefficient is constant.
    pub linear_terms: Vec<usize>,
    #[serde(rename = "M")]
    pub m: usize,
    pub decomposition: String,
}

fn subscript(n: usize) -> String {
    const DIGITS: [char; 10] = ['₀', '₁', '₂', '₃', '₄', '₅', '₆', '₇', '₈', '₉'];
    n.to_string().chars().map(|c| DIGITS[c.to_digit(10).unwrap() as usize]).collect()
}

/// Scheduling variable name of input index `j` (zero-based), e.g. `p₁`.
pub fn input_name(j: usize) -> String {
    format!("p{}", subscript(j + 1))
}

/// Renders e.g. `f₁(p₁,p₂) + f₂(p₃) + θ·p₅`.
pub fn decomposition_string(groups: &[Vec<usize>], linear_terms: &[usize]) -> String {
    let mut terms = Vec::new();
    let mut f = 0;
    for g in groups {
        if g.len() == 1 && linear_terms.contains(&g[0]) {
            continue;
        }
        f += 1;
        let args: Vec<String> = g.iter().map(|&j| input_name(j)).collect();
        terms.push(format!("f{}({})", subscript(f), args.join(",")));
    }
    for (i, &j) in linear_terms.iter().enumerate() {
        if linear_terms.len() == 1 {
            terms.push(format!("θ·{}", input_name(j)));
        } else {
            terms.push(format!("θ{}·{}", subscript(i + 1), input_name(j)));
        }
    }
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ")
    }
}

/// Connected components of the support graph.
pub fn detect_groups(support: &HessianSupport) -> StructureReport {
    let m = support.inputs.len();
    let mut label: Vec<Option<usize>> = vec![None; m];
    let mut groups = Vec::new();
    for start in 0..m {
        if label[start].is_some() {
            continue;
        }
        let id = groups.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        label[start] = Some(id);
        while let Some(a) = stack.pop() {
            members.push(a);
            for b in 0..m {
                if b != a && label[b].is_none() && (support.support[a][b] || support.support[b][a]) {
                    label[b] = Some(id);
                    stack.push(b);
                }
            }
        }
        members.sort_unstable();
        groups.push(members.into_iter().map(|a| support.inputs[a]).collect::<Vec<_>>());
    }
    let linear_terms: Vec<usize> = groups
        .iter()
        .filter(|g| g.len() == 1)
        .map(|g| g[0])
        .filter(|&j| {
            let a = support.inputs.iter().position(|&i| i == j).unwrap();
            !support.support[a][a]
        })
        .collect();
    let decomposition = decomposition_string(&groups, &linear_terms);
    StructureReport {
        retained: support.inputs.clone(),
        m: groups.len(),
        groups,
        linear_terms,
        decomposition,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_keeps_large_and_drops_small() {
        let o = decide_order(&[3.0, 2.0, 4.0, 0.001, 0.2, 0.001], 0.01).unwrap();
        assert_eq!(o.retained_indices(), vec![0, 1, 2, 4]);
        assert_eq!(o.dropped_indices(), vec![3, 5]);
    }

    #[test]
    fn order_single_dominant_and_all_equal() {
        assert_eq!(decide_order(&[0.0, 5.0, 0.0], 0.05).unwrap().retained_indices(), vec![1]);
        assert_eq!(decide_order(&[1.0; 4], 0.05).unwrap().retained_indices(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn order_all_zero_is_degenerate() {
        assert!(matches!(decide_order(&[0.0; 3], 0.05), Err(Error::Degenerate(_))));
    }

    fn vdp_support() -> HessianSupport {
        let upper = [
            (0, 0, 1.0),
            (0, 1, 0.8),
            (0, 2, 0.001),
            (0, 4, 0.002),
            (1, 1, 0.3),
            (1, 2, 0.001),
            (1, 4, 0.0),
            (2, 2, 0.6),
            (2, 4, 0.001),
            (4, 4, 0.002),
        ];
        build_support(&[0, 1, 2, 4], &upper, 0.05).unwrap()
    }

    #[test]
    fn example_structure() {
        let s = vdp_support();
        assert_eq!(s.edges(), vec![(0, 0), (0, 1), (1, 1), (2, 2)]);
        let r = detect_groups(&s);
        assert_eq!(r.groups, vec![vec![0, 1], vec![2], vec![4]]);
        assert_eq!(r.linear_terms, vec![4]);
        assert_eq!(r.m, 3);
        assert_eq!(r.decomposition, "f₁(p₁,p₂) + f₂(p₃) + θ·p₅");
    }

    #[test]
    fn empty_and_full_support() {
        let r = detect_groups(&build_support(&[0, 1, 2], &[], 0.05).unwrap());
        assert_eq!(r.m, 3);
        assert_eq!(r.linear_terms, vec![0, 1, 2]);
        assert_eq!(r.decomposition, "θ₁·p₁ + θ₂·p₂ + θ₃·p₃");
        let all: Vec<_> = (0..3).flat_map(|j| (j..3).map(move |l| (j, l, 1.0))).collect();
        let r = detect_groups(&build_support(&[0, 1, 2], &all, 0.05).unwrap());
        assert_eq!(r.m, 1);
        assert_eq!(r.decomposition, "f₁(p₁,p₂,p₃)");
    }

    #[test]
    fn json_uses_capital_m() {
        let v = serde_json::to_value(detect_groups(&vdp_support())).unwrap();
        assert_eq!(v["M"], 3);
    }

    #[test]
    fn unknown_pair_is_rejected() {
        assert!(build_support(&[0, 1], &[(0, 3, 1.0)], 0.05).is_err());
    }
}
