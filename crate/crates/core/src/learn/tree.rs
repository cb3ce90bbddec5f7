use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ensemble::training_deviance;
use super::{LearnError, ModelArtifact, ModelConfig, ModelKind, Params, TrainingMeta};
use crate::cohort::OutcomeLabel;
use crate::preprocess::{ColumnKind, ColumnSource, FeatureMatrix, FeatureSchema};
use crate::scalar::{argmax, Scalar};

const K: usize = OutcomeLabel::COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node<F> {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: F,
        left: usize,
        right: usize,
    },
    /// Class histogram for classification trees, a single fitted value for
    /// regression trees.
    Leaf { values: Vec<F> },
}

/// Binary tree stored in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<F> {
    pub nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tree<F> {
    pub fn leaf_values(&self, x: ArrayView1<'_, F>) -> &[F] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { values } => return values,
            }
        }
    }

    /// Normalized class histogram of the leaf reached by `x`.
    pub fn leaf_distribution(&self, x: ArrayView1<'_, F>, out: &mut [F; K]) {
        let h = self.leaf_values(x);
        let total: F = h.iter().copied().sum();
        for (o, &c) in out.iter_mut().zip(h) {
            *o = c / total;
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk<F>(nodes: &[Node<F>], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub min_gain: f64,
    /// Candidate features drawn per split; `None` uses every feature.
    pub max_features: Option<usize>,
}

fn gini(counts: &[usize; K], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn midpoint<F: Scalar>(a: F, b: F) -> F {
    let m = a + (b - a) / F::lit(2.0);
    if m < b {
        m
    } else {
        a
    }
}

fn sorted_by<F: Scalar>(x: ArrayView2<'_, F>, rows: &[usize], j: usize) -> Vec<usize> {
    let mut order = rows.to_vec();
    order.sort_by(|&a, &b| x[[a, j]].partial_cmp(&x[[b, j]]).expect("finite features"));
    order
}

struct Split<F> {
    feature: usize,
    threshold: F,
    gain: f64,
}

struct ClassGrower<'a, F, R> {
    x: ArrayView2<'a, F>,
    y: &'a [usize],
    params: GrowParams,
    rng: Option<&'a mut R>,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar, R: Rng> ClassGrower<'_, F, R> {
    fn candidates(&mut self) -> Vec<usize> {
        let d = self.x.ncols();
        match (self.params.max_features, self.rng.as_deref_mut()) {
            (Some(m), Some(rng)) if m < d => {
                let mut f = rand::seq::index::sample(rng, d, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        }
    }

    fn best_split(&self, rows: &[usize], features: &[usize], counts: &[usize; K]) -> Option<Split<F>> {
        let n = rows.len();
        let parent = gini(counts, n);
        let min_leaf = self.params.min_leaf;
        let mut best: Option<Split<F>> = None;
        for &j in features {
            let order = sorted_by(self.x, rows, j);
            let mut left = [0usize; K];
            for i in 0..n - 1 {
                left[self.y[order[i]]] += 1;
                let (a, b) = (self.x[[order[i], j]], self.x[[order[i + 1], j]]);
                let n_left = i + 1;
                if !(a < b) || n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let mut right = *counts;
                for c in 0..K {
                    right[c] -= left[c];
                }
                let gain = parent
                    - (n_left as f64 / n as f64) * gini(&left, n_left)
                    - ((n - n_left) as f64 / n as f64) * gini(&right, n - n_left);
                if best.as_ref().is_none_or(|s| gain > s.gain) {
                    best = Some(Split {
                        feature: j,
                        threshold: midpoint(a, b),
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { values: Vec::new() });
        let mut counts = [0usize; K];
        for &r in &rows {
            counts[self.y[r]] += 1;
        }
        let n = rows.len();
        if depth < self.params.max_depth && n >= 2 * self.params.min_leaf && n >= 2 && gini(&counts, n) > 0.0 {
            let features = self.candidates();
            if let Some(split) = self.best_split(&rows, &features, &counts) {
                if split.gain >= self.params.min_gain {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| self.x[[i, split.feature]] <= split.threshold);
                    let left = self.grow(l, depth + 1);
                    let right = self.grow(r, depth + 1);
                    self.nodes[id] = Node::Split {
                        feature: split.feature,
                        threshold: split.threshold,
                        left,
                        right,
                    };
                    return id;
                }
            }
        }
        self.nodes[id] = Node::Leaf {
            values: counts.iter().map(|&c| F::from_count(c)).collect(),
        };
        id
    }
}

/// CART with Gini impurity over the given rows (duplicates allowed, as in
/// a bootstrap sample).
pub(crate) fn grow_classification<F: Scalar, R: Rng>(
    x: ArrayView2<'_, F>,
    y: &[usize],
    rows: Vec<usize>,
    params: GrowParams,
    rng: Option<&mut R>,
) -> Tree<F> {
    let mut g = ClassGrower {
        x,
        y,
        params,
        rng,
        nodes: Vec::new(),
    };
    g.grow(rows, 0);
    Tree { nodes: g.nodes }
}

/// Least-squares regression tree on `target`; leaf values come from
/// `leaf_value` applied to the rows of each leaf.
pub(crate) fn grow_regression<F: Scalar>(
    x: ArrayView2<'_, F>,
    target: &[F],
    max_depth: usize,
    min_leaf: usize,
    leaf_value: &dyn Fn(&[usize]) -> F,
) -> Tree<F> {
    fn grow<F: Scalar>(
        x: ArrayView2<'_, F>,
        target: &[F],
        rows: Vec<usize>,
        depth: usize,
        max_depth: usize,
        min_leaf: usize,
        leaf_value: &dyn Fn(&[usize]) -> F,
        nodes: &mut Vec<Node<F>>,
    ) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf { values: Vec::new() });
        let n = rows.len();
        let total: F = rows.iter().map(|&r| target[r]).sum();
        let total_ss: F = rows.iter().map(|&r| target[r] * target[r]).sum();
        let base = total * total / F::from_count(n.max(1));
        let mut best: Option<(usize, F, F)> = None;
        if depth < max_depth && n >= 2 * min_leaf && n >= 2 {
            for j in 0..x.ncols() {
                let order = sorted_by(x, &rows, j);
                let mut left = F::zero();
                for i in 0..n - 1 {
                    left += target[order[i]];
                    let (a, b) = (x[[order[i], j]], x[[order[i + 1], j]]);
                    let n_left = i + 1;
                    if !(a < b) || n_left < min_leaf || n - n_left < min_leaf {
                        continue;
                    }
                    let right = total - left;
                    let gain = left * left / F::from_count(n_left)
                        + right * right / F::from_count(n - n_left)
                        - base;
                    if best.is_none_or(|(_, _, g)| gain > g) {
                        best = Some((j, midpoint(a, b), gain));
                    }
                }
            }
        }
        let floor = F::epsilon() * F::lit(64.0) * total_ss;
        match best {
            Some((feature, threshold, gain)) if gain > floor => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| x[[i, feature]] <= threshold);
                let left = grow(x, target, l, depth + 1, max_depth, min_leaf, leaf_value, nodes);
                let right = grow(x, target, r, depth + 1, max_depth, min_leaf, leaf_value, nodes);
                nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            _ => {
                nodes[id] = Node::Leaf {
                    values: vec![leaf_value(&rows)],
                };
            }
        }
        id
    }
    let mut nodes = Vec::new();
    grow(
        x,
        target,
        (0..x.nrows()).collect(),
        0,
        max_depth,
        min_leaf,
        leaf_value,
        &mut nodes,
    );
    Tree { nodes }
}

/// Single CART classification tree.
pub fn fit_tree<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<ModelArtifact<F>, LearnError> {
    let started = Instant::now();
    config.validate()?;
    let n = matrix.nrows();
    if matrix.labels.len() != n {
        return Err(LearnError::InsufficientData(
            "label vector does not match the row count".into(),
        ));
    }
    if n == 0 || n < 2 * config.min_samples_leaf {
        return Err(LearnError::InsufficientData(format!(
            "{n} rows for min_samples_leaf {}",
            config.min_samples_leaf
        )));
    }
    let y = matrix.label_indices();
    let tree = grow_classification::<F, rand_chacha::ChaCha8Rng>(
        matrix.x.view(),
        &y,
        (0..n).collect(),
        GrowParams {
            max_depth: config.max_depth,
            min_leaf: config.min_samples_leaf,
            min_gain: config.min_gain,
            max_features: None,
        },
        None,
    );
    let objective = training_deviance(matrix, |row, p| tree.leaf_distribution(row, p));
    let meta = TrainingMeta {
        iterations: tree.nodes.len(),
        objective,
        seconds: None,
        flags: Vec::new(),
        effective_lambda: 0.0,
        training_mae: None,
        n_train: n,
    };
    Ok(ModelArtifact::assemble(
        ModelKind::Tree,
        matrix,
        Params::Tree { tree },
        meta,
        config,
        started,
    ))
}

/// Flowchart renderings of a fitted tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeExport {
    /// Indented text, two spaces per level, left (≤) branch first.
    pub text: String,
    pub dot: String,
}

fn histogram_text<F: Scalar>(h: &[F]) -> String {
    OutcomeLabel::ALL
        .iter()
        .zip(h)
        .map(|(l, c)| format!("{}={}", l.token(), c))
        .collect::<Vec<_>>()
        .join(" ")
}

fn raw_threshold<F: Scalar>(schema: &FeatureSchema, feature: usize, threshold: F) -> Option<f64> {
    let c = schema.columns.get(feature)?;
    match (c.source, c.kind) {
        (ColumnSource::Raw, _) | (_, ColumnKind::OneHot { .. }) | (_, ColumnKind::MissingIndicator) => None,
        _ => Some(threshold.as_f64() * c.sd + c.mean),
    }
}

pub fn export_tree<F: Scalar>(artifact: &ModelArtifact<F>) -> Result<TreeExport, LearnError> {
    let Params::Tree { tree } = &artifact.params else {
        return Err(LearnError::WrongKind {
            expected: "tree".into(),
            found: artifact.kind.token().into(),
        });
    };
    let names = artifact.schema.column_names();
    let mut text = String::new();
    let mut dot = String::from("digraph tree {\n  node [shape=box, fontname=\"Helvetica\"];\n");
    fn walk<F: Scalar>(
        tree: &Tree<F>,
        i: usize,
        depth: usize,
        names: &[String],
        schema: &FeatureSchema,
        text: &mut String,
        dot: &mut String,
    ) {
        let indent = "  ".repeat(depth);
        match &tree.nodes[i] {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let name = &names[*feature];
                let _ = write!(text, "{indent}{name} ≤ {threshold}");
                match raw_threshold(schema, *feature, *threshold) {
                    Some(raw) => {
                        let _ = writeln!(text, " (raw {raw:.4})");
                        let _ = writeln!(dot, "  n{i} [label=\"{name} ≤ {threshold}\\n(raw {raw:.4})\"];");
                    }
                    None => {
                        text.push('\n');
                        let _ = writeln!(dot, "  n{i} [label=\"{name} ≤ {threshold}\"];");
                    }
                }
                let _ = writeln!(dot, "  n{i} -> n{left} [label=\"yes\"];");
                let _ = writeln!(dot, "  n{i} -> n{right} [label=\"no\"];");
                walk(tree, *left, depth + 1, names, schema, text, dot);
                walk(tree, *right, depth + 1, names, schema, text, dot);
            }
            Node::Leaf { values } => {
                let majority = OutcomeLabel::ALL[argmax(values)];
                let hist = histogram_text(values);
                let _ = writeln!(text, "{indent}leaf {} | {hist}", majority.token());
                let _ = writeln!(
                    dot,
                    "  n{i} [label=\"{}\\n{}\", style=rounded];",
                    majority.token(),
                    hist.replace(' ', "\\n")
                );
            }
        }
    }
    walk(tree, 0, 0, &names, &artifact.schema, &mut text, &mut dot);
    dot.push_str("}\n");
    Ok(TreeExport { text, dot })
}

/// Rebuilds the node list from the indented text export.
pub fn parse_tree_text<F: Scalar>(text: &str, names: &[String]) -> Result<Tree<F>, LearnError> {
    let lines: Vec<(usize, usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, l)| {
            let body = l.trim_start_matches(' ');
            (no + 1, (l.len() - body.len()) / 2, body)
        })
        .collect();
    let err = |line: usize, reason: &str| LearnError::TreeParse {
        line,
        reason: reason.to_string(),
    };
    fn number<F: Scalar>(s: &str) -> Option<F> {
        s.parse::<F>().ok()
    }
    fn node<F: Scalar>(
        lines: &[(usize, usize, &str)],
        pos: &mut usize,
        depth: usize,
        names: &[String],
        nodes: &mut Vec<Node<F>>,
        err: &dyn Fn(usize, &str) -> LearnError,
    ) -> Result<usize, LearnError> {
        let &(no, d, body) = lines.get(*pos).ok_or_else(|| err(0, "unexpected end of input"))?;
        if d != depth {
            return Err(err(no, "unexpected indentation"));
        }
        *pos += 1;
        let id = nodes.len();
        if let Some(rest) = body.strip_prefix("leaf ") {
            let (_, hist) = rest.split_once(" | ").ok_or_else(|| err(no, "leaf without histogram"))?;
            let mut values = Vec::with_capacity(K);
            for (label, item) in OutcomeLabel::ALL.iter().zip(hist.split(' ')) {
                let (token, count) = item.split_once('=').ok_or_else(|| err(no, "bad histogram entry"))?;
                if token != label.token() {
                    return Err(err(no, "histogram labels out of order"));
                }
                values.push(number(count).ok_or_else(|| err(no, "bad count"))?);
            }
            if values.len() != K {
                return Err(err(no, "histogram must list six classes"));
            }
            nodes.push(Node::Leaf { values });
            return Ok(id);
        }
        let body = body.split(" (raw ").next().unwrap_or(body);
        let (name, threshold) = body.split_once(" ≤ ").ok_or_else(|| err(no, "expected `name ≤ threshold`"))?;
        let feature = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| err(no, "unknown feature"))?;
        let threshold = number(threshold).ok_or_else(|| err(no, "bad threshold"))?;
        nodes.push(Node::Leaf { values: Vec::new() });
        let left = node(lines, pos, depth + 1, names, nodes, err)?;
        let right = node(lines, pos, depth + 1, names, nodes, err)?;
        nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        Ok(id)
    }
    let mut nodes = Vec::new();
    let mut pos = 0;
    node(&lines, &mut pos, 0, names, &mut nodes, &err)?;
    if pos != lines.len() {
        return Err(err(lines[pos].0, "trailing lines after the tree"));
    }
    Ok(Tree { nodes })
}
