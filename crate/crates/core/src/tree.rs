//! Binary decision-tree classifier over one state space.
//!
//! CART-style growth: Gini impurity, candidate thresholds at midpoints
//! between consecutive distinct values, greedy splitting until no split
//! leaves both children with at least `min_leaf_size` samples and a positive
//! impurity decrease. There is no depth limit and no pruning; the leaf-size
//! floor is the only granularity control.
//!
//! Split comparison is exact: the weighted child impurity is compared as a
//! rational number, so ties are real ties and are broken by manifest order
//! and then by threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TrainingSet;
use crate::model::{sha256_hex, ParamLookup, StateSpace};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Node {
    /// Samples with `value <= threshold` go left, the rest go right.
    #[serde(rename_all = "camelCase")]
    Split {
        parameter_id: String,
        threshold: f64,
        left: NodeId,
        right: NodeId,
    },
    #[serde(rename_all = "camelCase")]
    Leaf {
        label_counts: BTreeMap<String, usize>,
        predicted_label: String,
    },
}

/// A fitted tree stored as a flat node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionTree {
    pub space: StateSpace,
    pub min_leaf_size: usize,
    pub training_sample_count: usize,
    /// Quality labels in configured order.
    pub labels: Vec<String>,
    /// Candidate split parameters in manifest order.
    pub parameters: Vec<String>,
    pub nodes: Vec<Node>,
}

/// A chosen split of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub param_index: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// `1 - sum((n_k / n)^2)`.
pub fn gini(counts: &[usize]) -> Result<f64> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::EmptyNode);
    }
    let n = n as f64;
    Ok(1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>())
}

/// `sum(S_c / n_c)` over the two children as the fraction `num / den`,
/// where `S_c` is the sum of squared label counts. Larger is purer.
#[derive(Debug, Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn of_children(sl: u128, nl: u128, sr: u128, nr: u128) -> Self {
        Purity {
            num: sl * nr + sr * nl,
            den: nl * nr,
        }
    }

    fn greater_than(&self, other: &Purity) -> bool {
        self.num * other.den > other.num * self.den
    }

    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Columns of feature values, one `Vec` per parameter, plus label indices.
pub struct FeatureMatrix<'a> {
    pub columns: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub n_labels: usize,
}

/// Exhaustive search for the split with the largest weighted Gini decrease
/// over the samples in `indices`, subject to both children holding at least
/// `min_leaf_size` samples. `None` when no legal split decreases impurity.
pub fn best_split(data: &FeatureMatrix<'_>, indices: &[usize], min_leaf_size: usize) -> Option<Split> {
    let n = indices.len();
    let min_leaf = min_leaf_size.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let mut parent = vec![0u128; data.n_labels];
    for &i in indices {
        parent[data.labels[i]] += 1;
    }
    let parent_s: u128 = parent.iter().map(|c| c * c).sum();
    let parent_purity = Purity {
        num: parent_s,
        den: n as u128,
    };

    let mut best: Option<(Purity, Split)> = None;
    let mut order = indices.to_vec();
    for (j, column) in data.columns.iter().enumerate() {
        order.sort_by(|&a, &b| column[a].total_cmp(&column[b]));
        let mut left = vec![0u128; data.n_labels];
        let mut right = parent.clone();
        let (mut sl, mut sr) = (0u128, parent_s);
        for pos in 0..n - 1 {
            let k = data.labels[order[pos]];
            sl += 2 * left[k] + 1;
            sr -= 2 * right[k] - 1;
            left[k] += 1;
            right[k] -= 1;
            let nl = pos + 1;
            let nr = n - nl;
            if nl < min_leaf {
                continue;
            }
            if nr < min_leaf {
                break;
            }
            let (a, b) = (column[order[pos]], column[order[pos + 1]]);
            if a == b {
                continue;
            }
            let purity = Purity::of_children(sl, nl as u128, sr, nr as u128);
            if !purity.greater_than(&parent_purity) {
                continue;
            }
            if best.as_ref().is_none_or(|(p, _)| purity.greater_than(p)) {
                let decrease = (purity.value() - parent_purity.value()) / n as f64;
                best = Some((
                    purity,
                    Split {
                        param_index: j,
                        threshold: midpoint(a, b),
                        impurity_decrease: decrease,
                    },
                ));
            }
        }
    }
    best.map(|(_, s)| s)
}

/// A threshold `t` with `a <= t < b`, as close to the midpoint as floats allow.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= a && m < b {
        m
    } else {
        a
    }
}

/// Grows a tree on raw columns. `label_names[k]` names label index `k`.
pub fn fit_matrix(
    data: &FeatureMatrix<'_>,
    parameters: Vec<String>,
    label_names: Vec<String>,
    space: StateSpace,
    min_leaf_size: usize,
) -> Result<DecisionTree> {
    if min_leaf_size == 0 {
        return Err(Error::Config("minLeafSize must be >= 1".into()));
    }
    let n = data.labels.len();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut stack: Vec<(NodeId, Vec<usize>)> = vec![(0, (0..n).collect())];
    while let Some((slot, indices)) = stack.pop() {
        match best_split(data, &indices, min_leaf_size) {
            Some(split) => {
                let column = &data.columns[split.param_index];
                let (l, r): (Vec<usize>, Vec<usize>) =
                    indices.iter().partition(|&&i| column[i] <= split.threshold);
                let left = nodes.len();
                let right = left + 1;
                nodes.push(None);
                nodes.push(None);
                nodes[slot] = Some(Node::Split {
                    parameter_id: parameters[split.param_index].clone(),
                    threshold: split.threshold,
                    left,
                    right,
                });
                stack.push((right, r));
                stack.push((left, l));
            }
            None => {
                let mut counts = vec![0usize; label_names.len()];
                for &i in &indices {
                    counts[data.labels[i]] += 1;
                }
                // First maximum wins, so ties follow label order.
                let predicted = counts
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &c)| if c > counts[best] { k } else { best });
                nodes[slot] = Some(Node::Leaf {
                    label_counts: label_names
                        .iter()
                        .zip(&counts)
                        .filter(|(_, &c)| c > 0)
                        .map(|(l, &c)| (l.clone(), c))
                        .collect(),
                    predicted_label: label_names[predicted].clone(),
                });
            }
        }
    }
    Ok(DecisionTree {
        space,
        min_leaf_size,
        training_sample_count: n,
        labels: label_names,
        parameters,
        nodes: nodes.into_iter().map(|n| n.expect("every slot filled")).collect(),
    })
}

/// Fits the classifier `F: V -> Q_L` for one state space of a training set.
pub fn fit_tree(training_set: &TrainingSet, space: StateSpace, min_leaf_size: usize) -> Result<DecisionTree> {
    if training_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let parameters: Vec<String> = training_set
        .manifest
        .space_params(space)
        .into_iter()
        .map(|p| p.id.clone())
        .collect();
    let qc = &training_set.quality_config;
    let mut columns = vec![Vec::with_capacity(training_set.len()); parameters.len()];
    let mut labels = Vec::with_capacity(training_set.len());
    for sample in &training_set.samples {
        let view = sample.snapshot.view(space);
        for (col, id) in columns.iter_mut().zip(&parameters) {
            let v = view
                .value(id)
                .ok_or_else(|| Error::MissingParameter(id.clone()))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(id.clone()));
            }
            col.push(v);
        }
        labels.push(
            qc.label_index(&sample.label)
                .ok_or_else(|| Error::Config(format!("label not in Q_L: {}", sample.label)))?,
        );
    }
    let data = FeatureMatrix {
        columns: &columns,
        labels: &labels,
        n_labels: qc.labels.len(),
    };
    fit_matrix(&data, parameters, qc.labels.clone(), space, min_leaf_size)
}

impl DecisionTree {
    /// Routes an observation to its leaf: `value <= threshold` goes left.
    pub fn predict_leaf(&self, obs: &impl ParamLookup) -> Result<(NodeId, &str)> {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf {
                    predicted_label, ..
                } => return Ok((id, predicted_label)),
                Node::Split {
                    parameter_id,
                    threshold,
                    left,
                    right,
                } => {
                    let v = obs
                        .value(parameter_id)
                        .ok_or_else(|| Error::MissingParameter(parameter_id.clone()))?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite(parameter_id.clone()));
                    }
                    id = if v <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, Node::Leaf { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_ids().len()
    }

    pub fn depth(&self) -> usize {
        let mut max = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((id, d)) = stack.pop() {
            max = max.max(d);
            if let Node::Split { left, right, .. } = &self.nodes[id] {
                stack.push((*left, d + 1));
                stack.push((*right, d + 1));
            }
        }
        max
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("tree serializes");
        sha256_hex(&[&json])
    }

    /// Indented text rendering of the decision rules.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "{} tree: {} leaves, depth {}, minLeafSize {}, {} samples\n",
            self.space.tag(),
            self.leaf_count(),
            self.depth(),
            self.min_leaf_size,
            self.training_sample_count
        );
        let mut stack = vec![(0usize, 0usize, String::new())];
        while let Some((id, depth, prefix)) = stack.pop() {
            let indent = "  ".repeat(depth);
            match &self.nodes[id] {
                Node::Leaf {
                    label_counts,
                    predicted_label,
                } => {
                    let counts: Vec<String> =
                        label_counts.iter().map(|(l, c)| format!("{l}={c}")).collect();
                    let _ = writeln!(
                        out,
                        "{indent}{prefix}leaf {id}: {predicted_label} [{}]",
                        counts.join(", ")
                    );
                }
                Node::Split {
                    parameter_id,
                    threshold,
                    left,
                    right,
                } => {
                    let _ = writeln!(out, "{indent}{prefix}split on {parameter_id}");
                    stack.push((*right, depth + 1, format!("{parameter_id} > {threshold}: ")));
                    stack.push((*left, depth + 1, format!("{parameter_id} <= {threshold}: ")));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(xs: &[f64], ys: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        (vec![xs.to_vec()], ys.to_vec())
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[2, 2]).unwrap(), 0.5);
        assert_eq!(gini(&[4]).unwrap(), 0.0);
        assert_eq!(gini(&[3, 1]).unwrap(), 0.375);
        assert!(matches!(gini(&[0, 0]), Err(Error::EmptyNode)));
    }

    #[test]
    fn best_split_separates_two_clusters() {
        let (cols, ys) = one_d(&[1.0, 2.0, 9.0, 10.0], &[0, 0, 1, 1]);
        let data = FeatureMatrix {
            columns: &cols,
            labels: &ys,
            n_labels: 2,
        };
        let s = best_split(&data, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(s.param_index, 0);
        assert_eq!(s.threshold, 5.5);
        assert_eq!(s.impurity_decrease, 0.5);
        assert!(best_split(&data, &[0, 1, 2, 3], 3).is_none());
    }

    #[test]
    fn pure_input_has_no_split() {
        let (cols, ys) = one_d(&[1.0, 2.0, 9.0, 10.0], &[1, 1, 1, 1]);
        let data = FeatureMatrix {
            columns: &cols,
            labels: &ys,
            n_labels: 2,
        };
        assert!(best_split(&data, &[0, 1, 2, 3], 1).is_none());
    }

    #[test]
    fn ties_prefer_earlier_parameter_then_smaller_threshold() {
        // Both columns separate the labels identically.
        let cols = vec![vec![1.0, 2.0, 3.0, 4.0], vec![10.0, 20.0, 30.0, 40.0]];
        let ys = vec![0, 0, 1, 1];
        let data = FeatureMatrix {
            columns: &cols,
            labels: &ys,
            n_labels: 2,
        };
        let s = best_split(&data, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!((s.param_index, s.threshold), (0, 2.5));

        // Symmetric labels: thresholds 1.5 and 3.5 tie exactly.
        let cols = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let ys = vec![0, 1, 1, 0];
        let data = FeatureMatrix {
            columns: &cols,
            labels: &ys,
            n_labels: 2,
        };
        let s = best_split(&data, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(s.threshold, 1.5);
    }

    #[test]
    fn duplicate_values_are_never_split_apart() {
        let cols = vec![vec![1.0, 1.0, 1.0, 2.0]];
        let ys = vec![0, 1, 0, 1];
        let data = FeatureMatrix {
            columns: &cols,
            labels: &ys,
            n_labels: 2,
        };
        let s = best_split(&data, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(s.threshold, 1.5);
    }

    fn fit(cols: &[Vec<f64>], ys: &[usize], min_leaf: usize) -> DecisionTree {
        let data = FeatureMatrix {
            columns: cols,
            labels: ys,
            n_labels: 2,
        };
        let params = (0..cols.len()).map(|i| format!("p{i}")).collect();
        fit_matrix(&data, params, vec!["N".into(), "T".into()], StateSpace::Status, min_leaf)
            .unwrap()
    }

    #[test]
    fn pure_dataset_is_single_leaf() {
        let t = fit(&[vec![1.0, 2.0, 3.0]], &[1, 1, 1], 1);
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.depth(), 0);
        let obs: BTreeMap<String, f64> = BTreeMap::new();
        assert_eq!(t.predict_leaf(&obs).unwrap(), (0, "T"));
    }

    #[test]
    fn separable_data_gives_a_stump() {
        let t = fit(&[vec![1.0, 2.0, 9.0, 10.0]], &[0, 0, 1, 1], 1);
        assert_eq!(t.depth(), 1);
        match &t.nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 5.5),
            other => panic!("expected split, got {other:?}"),
        }
        let at = |v: f64| -> BTreeMap<String, f64> { [("p0".to_string(), v)].into_iter().collect() };
        assert_eq!(t.predict_leaf(&at(5.5)).unwrap().1, "N");
        assert_eq!(t.predict_leaf(&at(5.6)).unwrap().1, "T");
        assert!(matches!(
            t.predict_leaf(&BTreeMap::new()),
            Err(Error::MissingParameter(_))
        ));
    }

    #[test]
    fn min_leaf_equal_to_sample_count_gives_single_leaf() {
        let t = fit(&[vec![1.0, 2.0, 9.0, 10.0]], &[0, 0, 1, 1], 4);
        assert_eq!(t.leaf_count(), 1);
    }

    #[test]
    fn leaf_ties_follow_label_order() {
        let t = fit(&[vec![1.0, 1.0]], &[1, 0], 1);
        assert_eq!(t.leaf_count(), 1);
        match &t.nodes[0] {
            Node::Leaf {
                predicted_label, ..
            } => assert_eq!(predicted_label, "N"),
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_min_leaf_and_empty_input_are_rejected() {
        let data = FeatureMatrix {
            columns: &[vec![]],
            labels: &[],
            n_labels: 2,
        };
        assert!(matches!(
            fit_matrix(&data, vec!["p".into()], vec!["a".into(), "b".into()], StateSpace::Status, 1),
            Err(Error::EmptyTrainingSet)
        ));
        assert!(fit_matrix(&data, vec!["p".into()], vec![], StateSpace::Status, 0).is_err());
    }

    #[test]
    fn dump_lists_rules() {
        let t = fit(&[vec![1.0, 2.0, 9.0, 10.0]], &[0, 0, 1, 1], 1);
        let text = t.dump();
        assert!(text.contains("p0 <= 5.5: leaf 1: N [N=2]"), "{text}");
        assert!(text.contains("p0 > 5.5: leaf 2: T [T=2]"), "{text}");
    }
}
