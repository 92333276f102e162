//! Permutation-set design and the self-supervised permutation-prediction
//! task: sensor-column bijections, the positional-deviation score used to
//! select them, permuted-window construction, and the classification head.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DenseArray, NodeId, ParamNode, Tape};
use crate::error::{Error, Result};
use crate::flow::FlowModel;

/// A bijection on sensor columns. `mapping[k]` is the source column placed
/// at position `k` (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &v in &mapping {
            if v >= n || seen[v] {
                return Err(Error::Contract(format!(
                    "mapping {mapping:?} is not a bijection on 0..{n}"
                )));
            }
            seen[v] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (k, &src) in self.mapping.iter().enumerate() {
            inv[src] = k;
        }
        Self { mapping: inv }
    }

    /// Positional deviation from the identity: `sum_k |k - mapping[k]|`.
    fn deviation(&self) -> u64 {
        self.mapping
            .iter()
            .enumerate()
            .map(|(k, &v)| (k as i64 - v as i64).unsigned_abs())
            .sum()
    }

    /// Positional distance to another permutation: `sum_k |a_k - b_k|`.
    fn distance(&self, other: &Permutation) -> u64 {
        self.mapping
            .iter()
            .zip(&other.mapping)
            .map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs())
            .sum()
    }
}

/// Permutation-set score: the sum over ordered pairs of distinct
/// permutations of their positional distance, plus each permutation's
/// deviation from the identity. Integer-valued; larger means the set is
/// both internally spread out and far from the true column order.
pub fn score_set(perms: &[Permutation]) -> f64 {
    let mut total: u64 = 0;
    for (i, a) in perms.iter().enumerate() {
        for (j, b) in perms.iter().enumerate() {
            if i != j {
                total += a.distance(b);
            }
        }
        total += a.deviation();
    }
    total as f64
}

/// An ordered list of `P` distinct permutations; list order is the class
/// index order used by the self-supervised head.
#[derive(Debug, Clone)]
pub struct PermutationSet {
    perms: Vec<Permutation>,
    n: usize,
    score: f64,
    seed: u64,
    pool_factor: usize,
}

pub const PERMSET_FORMAT: &str = "permset v1";

impl PermutationSet {
    /// Sample `pool_factor * p` distinct random permutations (seeded
    /// Fisher-Yates), then greedily keep the `p` that maximize the marginal
    /// score gain.
    pub fn generate(n: usize, p: usize, pool_factor: usize, seed: u64) -> Result<Self> {
        if p < 2 {
            return Err(Error::Contract(format!("need at least 2 permutations, got {p}")));
        }
        if pool_factor < 2 {
            return Err(Error::Contract(format!("pool_factor must be >= 2, got {pool_factor}")));
        }
        let total = factorial_capped(n);
        if (p as u128) > total {
            return Err(Error::Infeasible(format!(
                "{p} distinct permutations of {n} columns requested, only {total} exist"
            )));
        }
        let target = ((pool_factor * p) as u128).min(total) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = sample_distinct(n, target, &mut rng)?;
        let perms = greedy_select(&pool, p);
        let score = score_set(&perms);
        Ok(Self {
            perms,
            n,
            score,
            seed,
            pool_factor,
        })
    }

    pub fn from_permutations(perms: Vec<Permutation>, seed: u64, pool_factor: usize) -> Result<Self> {
        if perms.len() < 2 {
            return Err(Error::Contract("a permutation set needs P >= 2".into()));
        }
        let n = perms[0].len();
        if perms.iter().any(|p| p.len() != n) {
            return Err(Error::Contract("permutations of differing lengths".into()));
        }
        let distinct: HashSet<_> = perms.iter().collect();
        if distinct.len() != perms.len() {
            return Err(Error::Contract("duplicate permutations in set".into()));
        }
        let score = score_set(&perms);
        Ok(Self {
            perms,
            n,
            score,
            seed,
            pool_factor,
        })
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.n
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perms(&self) -> &[Permutation] {
        &self.perms
    }

    pub fn get(&self, class: usize) -> &Permutation {
        &self.perms[class]
    }

    /// Versioned text format: header lines, then one comma-separated
    /// mapping per line. Byte-identical for identical inputs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let mut out = String::new();
        out.push_str(PERMSET_FORMAT);
        out.push('\n');
        out.push_str(&format!("n={}\n", self.n));
        out.push_str(&format!("p={}\n", self.perms.len()));
        out.push_str(&format!("pool_factor={}\n", self.pool_factor));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("score={}\n", self.score as u64));
        for perm in &self.perms {
            let line: Vec<String> = perm.mapping().iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let fname = path.display().to_string();
        let mut lines = reader.lines().enumerate();
        let mut header = std::collections::HashMap::new();

        let (_, first) = lines.next().ok_or_else(|| Error::Parse {
            file: fname.clone(),
            line: 1,
            message: "empty file".into(),
        })?;
        if first? != PERMSET_FORMAT {
            return Err(Error::Parse {
                file: fname,
                line: 1,
                message: format!("expected header '{PERMSET_FORMAT}'"),
            });
        }
        let mut perms = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if !line.contains(',') {
                if let Some((key, value)) = line.split_once('=') {
                    header.insert(key.to_string(), value.to_string());
                    continue;
                }
            }
            let mapping: Result<Vec<usize>> = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<usize>().map_err(|e| Error::Parse {
                        file: fname.clone(),
                        line: lineno,
                        message: format!("bad index '{tok}': {e}"),
                    })
                })
                .collect();
            perms.push(Permutation::new(mapping?)?);
        }
        let get_num = |key: &str| -> Result<u64> {
            header
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    file: fname.clone(),
                    line: 0,
                    message: format!("missing or invalid header field '{key}'"),
                })
        };
        let n = get_num("n")? as usize;
        let p = get_num("p")? as usize;
        let pool_factor = get_num("pool_factor")? as usize;
        let seed = get_num("seed")?;
        if perms.len() != p || perms.iter().any(|perm| perm.len() != n) {
            return Err(Error::Parse {
                file: fname,
                line: 0,
                message: "header does not match permutation lines".into(),
            });
        }
        Self::from_permutations(perms, seed, pool_factor)
    }
}

/// n! capped so large `n` never overflows; anything above the cap is
/// effectively infinite for feasibility checks.
fn factorial_capped(n: usize) -> u128 {
    let mut acc: u128 = 1;
    for k in 2..=n as u128 {
        acc = acc.saturating_mul(k);
        if acc > u128::MAX / 64 {
            return u128::MAX;
        }
    }
    acc
}

/// Draw `count` distinct random permutations of `0..n`.
fn sample_distinct(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Permutation>> {
    let total = factorial_capped(n);
    // When the request covers most of the group, enumerate and shuffle
    // instead of rejection-sampling into near-certain collisions.
    if (count as u128) * 2 >= total {
        let mut all = enumerate_all(n);
        all.shuffle(rng);
        all.truncate(count);
        return Ok(all.into_iter().map(|m| Permutation { mapping: m }).collect());
    }

    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts: usize = 0;
    let cap = count.saturating_mul(200).max(10_000);
    while out.len() < count {
        attempts += 1;
        if attempts > cap {
            return Err(Error::Pool(format!(
                "could not draw {count} distinct permutations of {n} columns after {attempts} attempts"
            )));
        }
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        if seen.insert(mapping.clone()) {
            out.push(Permutation { mapping });
        }
    }
    Ok(out)
}

fn enumerate_all(n: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm, deterministic order.
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = vec![items.clone()];
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            out.push(items.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Greedy subset selection maximizing the marginal score gain. Adding a
/// candidate `q` to selection `S` raises the score by
/// `2 * sum_{s in S} dist(q, s) + deviation(q)`; ties break on pool order.
fn greedy_select(pool: &[Permutation], p: usize) -> Vec<Permutation> {
    let mut selected: Vec<usize> = Vec::with_capacity(p);
    let mut in_set = vec![false; pool.len()];
    let mut cum_dist: Vec<u64> = vec![0; pool.len()];
    let devs: Vec<u64> = pool.iter().map(|q| q.deviation()).collect();

    for _ in 0..p {
        let mut best: Option<(u64, usize)> = None;
        for (idx, _) in pool.iter().enumerate() {
            if in_set[idx] {
                continue;
            }
            let gain = 2 * cum_dist[idx] + devs[idx];
            if best.map(|(g, _)| gain > g).unwrap_or(true) {
                best = Some((gain, idx));
            }
        }
        let (_, chosen) = best.expect("pool larger than selection");
        in_set[chosen] = true;
        selected.push(chosen);
        for (idx, q) in pool.iter().enumerate() {
            if !in_set[idx] {
                cum_dist[idx] += q.distance(&pool[chosen]);
            }
        }
    }
    selected.into_iter().map(|i| pool[i].clone()).collect()
}

/// Permute the columns of a `window_len x n` window and flatten time-major:
/// output column `k` holds source column `mapping[k]` for every row.
pub fn apply_permutation(window: &DenseArray, perm: &Permutation) -> Result<DenseArray> {
    let shape = window.shape();
    if shape.len() != 2 || shape[1] != perm.len() {
        return Err(Error::dims("apply_permutation", shape, &[shape[0], perm.len()]));
    }
    let (rows, n) = (shape[0], shape[1]);
    let mut out = vec![0.0; rows * n];
    permute_flat(window.data(), n, perm, &mut out);
    Ok(DenseArray::vector(out))
}

/// Column-permute a flattened time-major window in one pass.
pub(crate) fn permute_flat(window: &[f64], n: usize, perm: &Permutation, out: &mut [f64]) {
    debug_assert_eq!(window.len(), out.len());
    let rows = window.len() / n;
    for t in 0..rows {
        let src = &window[t * n..(t + 1) * n];
        let dst = &mut out[t * n..(t + 1) * n];
        for (k, &source_col) in perm.mapping().iter().enumerate() {
            dst[k] = src[source_col];
        }
    }
}

/// Single fully-connected layer from the flow's latent (dimension `d`) to
/// `P` class logits.
#[derive(Debug, Clone)]
pub struct SelfSupHead {
    dense_w: ParamNode,
    dense_b: ParamNode,
    in_dim: usize,
    classes: usize,
}

impl SelfSupHead {
    pub fn new(in_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            dense_w: ParamNode::new(
                "head.w",
                DenseArray::matrix(in_dim, classes, w).expect("head shape"),
            ),
            dense_b: ParamNode::new("head.b", DenseArray::vector(vec![0.0; classes])),
            in_dim,
            classes,
        }
    }

    /// All-zero head; produces uniform logits for any input.
    pub fn zeroed(in_dim: usize, classes: usize) -> Self {
        Self {
            dense_w: ParamNode::new("head.w", DenseArray::zeros(vec![in_dim, classes])),
            dense_b: ParamNode::new("head.b", DenseArray::vector(vec![0.0; classes])),
            in_dim,
            classes,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> Vec<&ParamNode> {
        vec![&self.dense_w, &self.dense_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        vec![&mut self.dense_w, &mut self.dense_b]
    }

    pub fn logits(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let w = tape.param(&self.dense_w);
        let b = tape.param(&self.dense_b);
        let zw = tape.matmul(z, w)?;
        tape.add_row(zw, b)
    }
}

/// Mean cross entropy of predicting each window's permutation class from
/// the flow's latent: `mean_i CE(head(flow(x_i)), label_i)`. `windows` is a
/// `[batch, d]` node of already-permuted, already-scaled windows.
pub fn selfsup_loss(
    tape: &mut Tape,
    flow: &FlowModel,
    head: &SelfSupHead,
    windows: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let batch = tape.value(windows).rows();
    if batch == 0 || labels.len() != batch {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= head.classes()) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {} permutations",
            head.classes()
        )));
    }
    let (z, _) = flow.forward_latent(tape, windows)?;
    let logits = head.logits(tape, z)?;
    let per_row = tape.softmax_cross_entropy_rows(logits, labels)?;
    Ok(tape.mean_all(per_row))
}

/// Classification accuracy of the head over a permuted batch (no gradients).
pub fn selfsup_accuracy(
    flow: &FlowModel,
    head: &SelfSupHead,
    windows: &DenseArray,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(windows.clone());
    let (z, _) = flow.forward_latent(&mut tape, x)?;
    let logits = head.logits(&mut tape, z)?;
    let v = tape.value(logits);
    let (m, p) = (v.rows(), v.cols());
    let mut hits = 0usize;
    for i in 0..m {
        let row = v.row(i);
        let mut arg = 0usize;
        for j in 1..p {
            if row[j] > row[arg] {
                arg = j;
            }
        }
        if arg == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / m as f64)
}
