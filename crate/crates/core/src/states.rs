//! Machine states: decision rules read off a fitted tree, folded into
//! hyperrectangles and scored against the training set.
//!
//! Every leaf becomes a state, not only target-quality leaves. Popularity is
//! the number of training samples inside the state and goodness the fraction
//! of those whose run reached the target label. Scores come from re-scanning
//! the training set rather than from leaf counts, and the scan doubles as a
//! check that the states partition the samples.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TrainingSet;
use crate::model::{Interval, Manifest, State, StateSpace};
use crate::tree::{DecisionTree, Node, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<=")]
    Le,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Gt => ">",
            Op::Le => "<=",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Condition {
    pub parameter_id: String,
    pub op: Op,
    pub value: f64,
}

/// The conditions on one root-to-leaf path, in path order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionRule {
    pub conditions: Vec<Condition>,
    pub leaf_id: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoredStateSet {
    pub space: StateSpace,
    pub states: Vec<State>,
    pub source_tree_fingerprint: String,
    pub target_label: String,
}

/// One rule per leaf, ordered by leaf id.
pub fn extract_rules(tree: &DecisionTree) -> Vec<DecisionRule> {
    let mut rules = Vec::new();
    let mut stack: Vec<(NodeId, Vec<Condition>)> = vec![(0, Vec::new())];
    while let Some((id, path)) = stack.pop() {
        match &tree.nodes[id] {
            Node::Leaf { .. } => rules.push(DecisionRule {
                conditions: path,
                leaf_id: id,
            }),
            Node::Split {
                parameter_id,
                threshold,
                left,
                right,
            } => {
                let mut l = path.clone();
                l.push(Condition {
                    parameter_id: parameter_id.clone(),
                    op: Op::Le,
                    value: *threshold,
                });
                let mut r = path;
                r.push(Condition {
                    parameter_id: parameter_id.clone(),
                    op: Op::Gt,
                    value: *threshold,
                });
                stack.push((*right, r));
                stack.push((*left, l));
            }
        }
    }
    rules.sort_by_key(|r| r.leaf_id);
    rules
}

pub fn state_id(space: StateSpace, leaf_id: NodeId) -> String {
    format!("{}-{leaf_id}", space.tag())
}

/// Folds each rule into per-parameter intervals over every parameter of the
/// space; parameters no condition touches stay `(-inf, +inf]`. Returned
/// states are unscored.
pub fn rules_to_states(rules: &[DecisionRule], manifest: &Manifest, space: StateSpace) -> Result<Vec<State>> {
    let params = manifest.space_params(space);
    rules
        .iter()
        .map(|rule| {
            let mut bounds: BTreeMap<String, (f64, f64)> = params
                .iter()
                .map(|p| (p.id.clone(), (f64::NEG_INFINITY, f64::INFINITY)))
                .collect();
            for c in &rule.conditions {
                let b = bounds
                    .get_mut(&c.parameter_id)
                    .ok_or_else(|| Error::UnknownParameter(c.parameter_id.clone()))?;
                match c.op {
                    Op::Gt => b.0 = b.0.max(c.value),
                    Op::Le => b.1 = b.1.min(c.value),
                }
            }
            let intervals = bounds
                .into_iter()
                .map(|(id, (lo, hi))| Interval::new(lo, hi).map(|iv| (id, iv)))
                .collect::<Result<_>>()?;
            Ok(State {
                id: state_id(space, rule.leaf_id),
                space,
                intervals,
                popularity: 0,
                goodness: 0.0,
            })
        })
        .collect()
}

/// Index of the single state matching each sample of the space's view.
/// Errors when a sample matches no state or more than one.
pub fn assign_samples(states: &[State], training_set: &TrainingSet, space: StateSpace) -> Result<Vec<usize>> {
    training_set
        .samples
        .par_iter()
        .map(|sample| {
            let view = sample.snapshot.view(space);
            let mut found = None;
            for (i, st) in states.iter().enumerate() {
                if st.matches(&view)? {
                    if found.is_some() {
                        return Err(Error::OverlappingStates(sample.t.millis()));
                    }
                    found = Some(i);
                }
            }
            found.ok_or(Error::UnmatchedSample(sample.t.millis()))
        })
        .collect()
}

/// Popularity `pi` and goodness `gamma` of every state over the training set.
pub fn score_states(
    states: Vec<State>,
    training_set: &TrainingSet,
    space: StateSpace,
    target_label: &str,
    source_tree_fingerprint: String,
) -> Result<ScoredStateSet> {
    let assignment = assign_samples(&states, training_set, space)?;
    let mut hits = vec![(0u64, 0u64); states.len()];
    for (sample, &i) in training_set.samples.iter().zip(&assignment) {
        hits[i].0 += 1;
        if sample.label == target_label {
            hits[i].1 += 1;
        }
    }
    let states = states
        .into_iter()
        .zip(hits)
        .map(|(mut st, (pop, good))| {
            st.popularity = pop;
            st.goodness = if pop > 0 { good as f64 / pop as f64 } else { 0.0 };
            st
        })
        .collect();
    Ok(ScoredStateSet {
        space,
        states,
        source_tree_fingerprint,
        target_label: target_label.to_string(),
    })
}

/// Tree -> rules -> states -> scores for one space.
pub fn states_from_tree(tree: &DecisionTree, training_set: &TrainingSet) -> Result<ScoredStateSet> {
    let rules = extract_rules(tree);
    let states = rules_to_states(&rules, &training_set.manifest, tree.space)?;
    score_states(
        states,
        training_set,
        tree.space,
        &training_set.quality_config.target_label,
        tree.fingerprint(),
    )
}

/// Writes a table with one row per state and one `low-high` column per
/// parameter that any state bounds. Unbounded sides are filled from the
/// parameter's observed range when known.
pub fn export_states_csv(states: &[State], manifest: &Manifest, out: impl Write) -> Result<()> {
    let columns: Vec<&crate::model::ParameterDef> = manifest
        .params()
        .iter()
        .filter(|p| {
            states
                .iter()
                .any(|s| s.intervals.get(&p.id).is_some_and(|iv| !iv.is_unbounded()))
        })
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["state".to_string()];
    header.extend(columns.iter().map(|p| p.name.clone()));
    header.push("popularity".into());
    header.push("goodness".into());
    w.write_record(&header)?;
    for s in states {
        let mut row = vec![s.id.clone()];
        for p in &columns {
            let iv = s.intervals.get(&p.id).copied().unwrap_or(Interval::UNBOUNDED);
            row.push(render_range(&iv, p.observed_min, p.observed_max));
        }
        row.push(s.popularity.to_string());
        row.push(s.goodness.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn render_range(iv: &Interval, min: Option<f64>, max: Option<f64>) -> String {
    let lo = if iv.low().is_finite() {
        iv.low().to_string()
    } else {
        min.map_or("-inf".to_string(), |m| m.to_string())
    };
    let hi = if iv.high().is_finite() {
        iv.high().to_string()
    } else {
        max.map_or("inf".to_string(), |m| m.to_string())
    };
    format!("{lo}-{hi}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::TrainingSample;
    use crate::model::{
        Aggregation, MachineStatus, ParameterDef, ProcessSnapshot, QualityConfig, TimeWindow,
        Timestamp,
    };

    fn manifest() -> Manifest {
        Manifest::new(vec![
            ParameterDef::sensor("p1").with_name("Temperature 3"),
            ParameterDef::sensor("p2").with_name("Density"),
            ParameterDef::setting("h1"),
        ])
        .unwrap()
    }

    fn rule(conds: &[(&str, Op, f64)]) -> DecisionRule {
        DecisionRule {
            conditions: conds
                .iter()
                .map(|(p, op, v)| Condition {
                    parameter_id: p.to_string(),
                    op: *op,
                    value: *v,
                })
                .collect(),
            leaf_id: 7,
        }
    }

    #[test]
    fn conditions_fold_into_intervals() {
        let m = manifest();
        let s = &rules_to_states(&[rule(&[("p1", Op::Gt, 10.0), ("p1", Op::Le, 20.0)])], &m, StateSpace::Status)
            .unwrap()[0];
        assert_eq!(s.intervals["p1"], Interval::new(10.0, 20.0).unwrap());
        assert_eq!(s.intervals["p2"], Interval::UNBOUNDED);
        assert_eq!(s.intervals.len(), 3);
        assert_eq!(s.id, "status-7");

        let s = &rules_to_states(&[rule(&[("p1", Op::Le, 10.0), ("p1", Op::Le, 4.0)])], &m, StateSpace::Status)
            .unwrap()[0];
        assert_eq!(s.intervals["p1"], Interval::at_most(4.0).unwrap());
    }

    #[test]
    fn table_ii_shaped_state() {
        let m = manifest();
        let s = &rules_to_states(&[rule(&[("p1", Op::Gt, 63.90), ("p1", Op::Le, 74.34)])], &m, StateSpace::Status)
            .unwrap()[0];
        let bounded: Vec<&String> = s.bounded_params().map(|(id, _)| id).collect();
        assert_eq!(bounded, vec!["p1"]);
        let obs: crate::model::Values = [("p1".to_string(), 70.0), ("p2".to_string(), 1.0)]
            .into_iter()
            .collect();
        assert!(s.matches(&obs).unwrap());
    }

    #[test]
    fn contradictory_rule_is_an_internal_error() {
        let m = manifest();
        let r = rules_to_states(&[rule(&[("p1", Op::Gt, 10.0), ("p1", Op::Le, 4.0)])], &m, StateSpace::Status);
        assert!(matches!(r, Err(Error::EmptyInterval { .. })));
    }

    #[test]
    fn settings_space_covers_settings_only() {
        let m = manifest();
        let s = &rules_to_states(&[rule(&[])], &m, StateSpace::NewSettings).unwrap()[0];
        assert_eq!(s.intervals.keys().collect::<Vec<_>>(), vec!["h1"]);
        assert_eq!(s.id, "settings-7");
    }

    fn training(values: &[(f64, &str)]) -> TrainingSet {
        let samples = values
            .iter()
            .enumerate()
            .map(|(i, (v, l))| TrainingSample {
                t: Timestamp(i as i64),
                snapshot: ProcessSnapshot {
                    status: MachineStatus {
                        sensors: [("p1".to_string(), *v), ("p2".to_string(), 0.0)]
                            .into_iter()
                            .collect(),
                        settings: [("h1".to_string(), 0.0)].into_iter().collect(),
                    },
                    new_settings: [("h1".to_string(), 0.0)].into_iter().collect(),
                },
                run_batch_id: format!("r{i}"),
                label: l.to_string(),
            })
            .collect();
        TrainingSet {
            samples,
            manifest: manifest(),
            quality_config: QualityConfig {
                labels: vec!["N".into(), "T".into()],
                target_label: "T".into(),
                bands: vec![],
                aggregation: Aggregation::Mean,
                in_band_threshold: 0.5,
            },
            window: TimeWindow::new(Timestamp(0), Timestamp(100)),
            per_run_label: BTreeMap::new(),
            runs: vec![],
        }
    }

    fn split_states() -> Vec<State> {
        let m = manifest();
        let mut a = rule(&[("p1", Op::Le, 10.0)]);
        a.leaf_id = 1;
        let mut b = rule(&[("p1", Op::Gt, 10.0), ("p1", Op::Le, 20.0)]);
        b.leaf_id = 3;
        let mut c = rule(&[("p1", Op::Gt, 20.0)]);
        c.leaf_id = 4;
        rules_to_states(&[a, b, c], &m, StateSpace::Status).unwrap()
    }

    #[test]
    fn scores_follow_hand_counts() {
        let ts = training(&[
            (1.0, "T"),
            (2.0, "T"),
            (3.0, "T"),
            (11.0, "N"),
            (12.0, "N"),
            (21.0, "T"),
            (22.0, "N"),
            (23.0, "N"),
            (24.0, "N"),
        ]);
        let set = score_states(split_states(), &ts, StateSpace::Status, "T", String::new()).unwrap();
        let got: Vec<(u64, f64)> = set.states.iter().map(|s| (s.popularity, s.goodness)).collect();
        assert_eq!(got, vec![(3, 1.0), (2, 0.0), (4, 0.25)]);
        assert_eq!(got.iter().map(|g| g.0).sum::<u64>(), 9);
    }

    #[test]
    fn unmatched_sample_is_an_error() {
        let m = manifest();
        let states =
            rules_to_states(&[rule(&[("p1", Op::Le, 10.0)])], &m, StateSpace::Status).unwrap();
        let ts = training(&[(1.0, "T"), (50.0, "N")]);
        assert!(matches!(
            score_states(states, &ts, StateSpace::Status, "T", String::new()),
            Err(Error::UnmatchedSample(1))
        ));
    }

    #[test]
    fn rules_from_trees() {
        let tree = DecisionTree {
            space: StateSpace::Status,
            min_leaf_size: 1,
            training_sample_count: 4,
            labels: vec!["N".into(), "T".into()],
            parameters: vec!["p1".into()],
            nodes: vec![
                Node::Split {
                    parameter_id: "p1".into(),
                    threshold: 5.5,
                    left: 1,
                    right: 2,
                },
                Node::Leaf {
                    label_counts: BTreeMap::new(),
                    predicted_label: "N".into(),
                },
                Node::Leaf {
                    label_counts: BTreeMap::new(),
                    predicted_label: "T".into(),
                },
            ],
        };
        let rules = extract_rules(&tree);
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].conditions[0].op, Op::Le);
        assert_eq!(rules[0].conditions[0].value, 5.5);
        assert_eq!(rules[1].conditions[0].op, Op::Gt);

        let single = DecisionTree {
            nodes: vec![tree.nodes[1].clone()],
            ..tree
        };
        let rules = extract_rules(&single);
        assert_eq!(rules.len(), 1);
        assert!(rules[0].conditions.is_empty());
    }

    #[test]
    fn nested_conditions_on_one_parameter_are_kept() {
        let tree = DecisionTree {
            space: StateSpace::Status,
            min_leaf_size: 1,
            training_sample_count: 3,
            labels: vec!["N".into()],
            parameters: vec!["p1".into()],
            nodes: vec![
                Node::Split {
                    parameter_id: "p1".into(),
                    threshold: 10.0,
                    left: 1,
                    right: 2,
                },
                Node::Split {
                    parameter_id: "p1".into(),
                    threshold: 4.0,
                    left: 3,
                    right: 4,
                },
                Node::Leaf {
                    label_counts: BTreeMap::new(),
                    predicted_label: "N".into(),
                },
                Node::Leaf {
                    label_counts: BTreeMap::new(),
                    predicted_label: "N".into(),
                },
                Node::Leaf {
                    label_counts: BTreeMap::new(),
                    predicted_label: "N".into(),
                },
            ],
        };
        let rules = extract_rules(&tree);
        let r3 = rules.iter().find(|r| r.leaf_id == 3).unwrap();
        assert_eq!(r3.conditions.len(), 2);
        let states = rules_to_states(&rules, &manifest(), StateSpace::Status).unwrap();
        let s3 = states.iter().find(|s| s.id == "status-3").unwrap();
        assert_eq!(s3.intervals["p1"], Interval::at_most(4.0).unwrap());
    }

    #[test]
    fn export_renders_table_ii_columns() {
        let mut m = manifest();
        for p in m.params_mut() {
            p.observe(0.5);
            p.observe(86.42);
        }
        let mut states = split_states();
        states[0].goodness = 1.0;
        states[0].popularity = 3;
        let mut buf = Vec::new();
        export_states_csv(&states, &m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "state,Temperature 3,popularity,goodness");
        assert_eq!(lines[1], "status-1,0.5-10,3,1");
        assert_eq!(lines[2], "status-3,10-20,0,0");
    }
}
