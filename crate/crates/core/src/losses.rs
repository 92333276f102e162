//! Loss assembly: negative log-likelihood on nominal windows, a pluggable
//! physics penalty evaluated on model-generated samples, and the combined
//! multi-task objective.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::diffcore::{DenseArray, NodeId, Tape};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::selfsup::{selfsup_loss, SelfSupHead};

/// A set of linear sensor relations `A x_t = b` expected to hold at every
/// timestamp of nominal telemetry.
#[derive(Debug, Clone)]
pub struct LinearRelations {
    pub sensor_names: Vec<String>,
    /// `[n_relations, n_sensors]` coefficient matrix.
    pub coefficients: DenseArray,
    /// Offsets, one per relation.
    pub offsets: Vec<f64>,
}

pub const RELATIONS_FORMAT: &str = "relations v1";

impl LinearRelations {
    pub fn new(sensor_names: Vec<String>, coefficients: DenseArray, offsets: Vec<f64>) -> Result<Self> {
        if coefficients.shape().len() != 2 || coefficients.shape()[1] != sensor_names.len() {
            return Err(Error::dims(
                "relation coefficients",
                coefficients.shape(),
                &[offsets.len(), sensor_names.len()],
            ));
        }
        if coefficients.shape()[0] != offsets.len() {
            return Err(Error::dims(
                "relation offsets",
                coefficients.shape(),
                &[offsets.len()],
            ));
        }
        Ok(Self {
            sensor_names,
            coefficients,
            offsets,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_names.len()
    }

    pub fn n_relations(&self) -> usize {
        self.offsets.len()
    }

    /// Text format: header, sensor-name line, then one relation per line as
    /// comma-separated coefficients followed by the offset.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(RELATIONS_FORMAT);
        out.push('\n');
        out.push_str(&format!("sensors={}\n", self.sensor_names.join(",")));
        let n = self.n_sensors();
        for (r, &offset) in self.offsets.iter().enumerate() {
            let coeffs: Vec<String> = self.coefficients.data()[r * n..(r + 1) * n]
                .iter()
                .map(|v| v.to_string())
                .collect();
            out.push_str(&coeffs.join(","));
            out.push_str(&format!(",{offset}\n"));
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fname = path.display().to_string();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            file: fname.clone(),
            line,
            message,
        };
        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file".into()))?;
        if first? != RELATIONS_FORMAT {
            return Err(parse_err(1, format!("expected header '{RELATIONS_FORMAT}'")));
        }
        let (_, names_line) = lines
            .next()
            .ok_or_else(|| parse_err(2, "missing sensors line".into()))?;
        let names_line = names_line?;
        let names: Vec<String> = names_line
            .strip_prefix("sensors=")
            .ok_or_else(|| parse_err(2, "expected 'sensors=' line".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let n = names.len();
        let mut coeffs = Vec::new();
        let mut offsets = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(idx + 1, format!("bad number '{tok}': {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != n + 1 {
                return Err(parse_err(
                    idx + 1,
                    format!("expected {} coefficients plus offset, got {}", n, vals.len()),
                ));
            }
            coeffs.extend_from_slice(&vals[..n]);
            offsets.push(vals[n]);
        }
        let rows = offsets.len();
        Self::new(names, DenseArray::matrix(rows, n, coeffs)?, offsets)
    }
}

/// Mean squared relation residual over model-generated windows: samples are
/// unflattened to `rows x n` and the penalty is the mean over samples and
/// timestamps of `||A x_t - b||^2`. Zero exactly when every relation holds.
#[derive(Debug, Clone)]
pub struct PhysicsPenalty {
    relations: LinearRelations,
}

impl PhysicsPenalty {
    pub fn new(relations: LinearRelations) -> Self {
        Self { relations }
    }

    pub fn relations(&self) -> &LinearRelations {
        &self.relations
    }

    /// Rewrite raw-unit relations for min-max-scaled inputs. With
    /// `x_raw = min + span * x_scaled`, `A x_raw - b` becomes
    /// `(A * diag(span)) x_scaled - (b - A min)`.
    pub fn rescaled(&self, mins: &[f64], maxs: &[f64]) -> Result<Self> {
        let n = self.relations.n_sensors();
        if mins.len() != n || maxs.len() != n {
            return Err(Error::dims("penalty rescale", &[n], &[mins.len()]));
        }
        let q = self.relations.n_relations();
        let mut coeffs = self.relations.coefficients.data().to_vec();
        let mut offsets = self.relations.offsets.clone();
        for r in 0..q {
            let mut a_dot_min = 0.0;
            for j in 0..n {
                a_dot_min += coeffs[r * n + j] * mins[j];
                coeffs[r * n + j] *= maxs[j] - mins[j];
            }
            offsets[r] -= a_dot_min;
        }
        Ok(Self {
            relations: LinearRelations::new(
                self.relations.sensor_names.clone(),
                DenseArray::matrix(q, n, coeffs)?,
                offsets,
            )?,
        })
    }

    /// Tape node of the penalty over `samples [k, d]` with `d = rows * n`.
    pub fn eval(&self, tape: &mut Tape, samples: NodeId) -> Result<NodeId> {
        let n = self.relations.n_sensors();
        let q = self.relations.n_relations();
        let shape = tape.value(samples).shape().to_vec();
        let (k, d) = (shape[0], shape[1]);
        if d % n != 0 {
            return Err(Error::dims("penalty sample width", &shape, &[n]));
        }
        let rows = d / n;
        let flat = tape.reshape(samples, vec![k * rows, n])?;
        // residual = x A^T - b, row per timestamp
        let mut at = vec![0.0; n * q];
        for r in 0..q {
            for j in 0..n {
                at[j * q + r] = self.relations.coefficients.data()[r * n + j];
            }
        }
        let at_node = tape.constant(DenseArray::matrix(n, q, at)?);
        let neg_b = tape.constant(DenseArray::vector(
            self.relations.offsets.iter().map(|&b| -b).collect(),
        ));
        let proj = tape.matmul(flat, at_node)?;
        let residual = tape.add_row(proj, neg_b)?;
        let sq = tape.mul(residual, residual)?;
        let total = tape.sum_all(sq);
        Ok(tape.scale(total, 1.0 / (k * rows) as f64))
    }

    /// Plain value of the penalty (no gradients).
    pub fn value(&self, samples: &DenseArray) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(samples.clone());
        let node = self.eval(&mut tape, s)?;
        tape.value(node).item()
    }
}

/// Reference penalty evaluation on an explicit relation system: the mean
/// over samples and timestamps of the squared residual `||A x_t - b||^2`.
pub fn reference_penalty(samples: &DenseArray, a: &DenseArray, b: &[f64]) -> Result<f64> {
    let names = (0..a.shape()[1]).map(|i| format!("s{i}")).collect();
    let penalty = PhysicsPenalty::new(LinearRelations::new(names, a.clone(), b.to_vec())?);
    penalty.value(samples)
}

/// Weights and sampling control for the loss terms.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the physics penalty inside the main loss.
    pub physics_weight: f64,
    /// Weight of the self-supervised term inside the multi-task loss.
    pub selfsup_weight: f64,
    /// How many base-distribution draws feed the penalty each step.
    pub penalty_samples: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            physics_weight: 1.0,
            selfsup_weight: 1.0,
            penalty_samples: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.physics_weight.is_finite() || self.physics_weight < 0.0 {
            return Err(Error::Config(format!(
                "physics_weight must be finite and >= 0, got {}",
                self.physics_weight
            )));
        }
        if !self.selfsup_weight.is_finite() || self.selfsup_weight < 0.0 {
            return Err(Error::Config(format!(
                "selfsup_weight must be finite and >= 0, got {}",
                self.selfsup_weight
            )));
        }
        Ok(())
    }
}

/// Main training loss on a nominal batch: `mean(-log_prob)` plus
/// `physics_weight` times the penalty on samples generated by the inverse
/// flow of `base_draws`. The penalty rides the generated samples so its
/// gradient reaches the flow parameters.
///
/// `base_draws` must be provided whenever `physics_weight > 0` and a
/// penalty is present; passing the draws explicitly keeps the loss a pure
/// function of its inputs.
pub fn main_loss(
    tape: &mut Tape,
    flow: &FlowModel,
    nominal: NodeId,
    penalty: Option<&PhysicsPenalty>,
    base_draws: Option<&DenseArray>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if tape.value(nominal).rows() == 0 || tape.value(nominal).is_empty() {
        return Err(Error::Contract("main loss needs a non-empty nominal batch".into()));
    }
    let lp = flow.log_prob(tape, nominal)?;
    let mean_lp = tape.mean_all(lp);
    let nll = tape.neg(mean_lp);

    let (Some(penalty), true) = (penalty, cfg.physics_weight > 0.0) else {
        return Ok(nll);
    };
    let draws = base_draws.ok_or_else(|| {
        Error::Contract("physics penalty requires base draws for sample generation".into())
    })?;
    let z = tape.constant(draws.clone());
    let generated = flow.inverse(tape, z)?;
    let pen = penalty.eval(tape, generated)?;
    let weighted = tape.scale(pen, cfg.physics_weight);
    tape.add(nll, weighted)
}

/// Multi-task loss: `main_loss + selfsup_weight * selfsup_loss`. The
/// nominal batch feeds the likelihood term only; the permuted batch (which
/// may mix nominal and fault windows) feeds the classification term.
#[allow(clippy::too_many_arguments)]
pub fn multitask_loss(
    tape: &mut Tape,
    flow: &FlowModel,
    head: &SelfSupHead,
    nominal: NodeId,
    permuted: NodeId,
    labels: &[usize],
    penalty: Option<&PhysicsPenalty>,
    base_draws: Option<&DenseArray>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let main = main_loss(tape, flow, nominal, penalty, base_draws, cfg)?;
    if cfg.selfsup_weight == 0.0 {
        return Ok(main);
    }
    let ss = selfsup_loss(tape, flow, head, permuted, labels)?;
    let weighted = tape.scale(ss, cfg.selfsup_weight);
    tape.add(main, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{standard_normal_matrix, FlowModel, LN_2PI};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_flow(dim: usize) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        FlowModel::new(dim, 4, 8, &mut rng).unwrap()
    }

    fn one_relation() -> PhysicsPenalty {
        // x_0 - x_1 = 0
        let a = DenseArray::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        PhysicsPenalty::new(
            LinearRelations::new(vec!["a".into(), "b".into()], a, vec![0.0]).unwrap(),
        )
    }

    #[test]
    fn zero_weight_is_pure_nll() {
        let flow = identity_flow(2);
        let cfg = LossConfig {
            physics_weight: 0.0,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let batch = tape.constant(DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let loss = main_loss(&mut tape, &flow, batch, Some(&one_relation()), None, &cfg).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - LN_2PI).abs() < 1e-12, "{v}");
    }

    #[test]
    fn empty_batch_rejected() {
        let flow = identity_flow(2);
        let mut tape = Tape::new();
        let batch = tape.constant(DenseArray::zeros(vec![0, 2]));
        assert!(matches!(
            main_loss(&mut tape, &flow, batch, None, None, &LossConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reference_penalty_examples() {
        // zero coefficients -> zero penalty
        let a0 = DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let sample = DenseArray::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(reference_penalty(&sample, &a0, &[0.0]).unwrap(), 0.0);

        // x0 - x1 = 0 satisfied
        let a = DenseArray::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let ok = DenseArray::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(reference_penalty(&ok, &a, &[0.0]).unwrap(), 0.0);

        // x0 - x1 = 0 violated by (1, 3): squared residual 4
        assert_eq!(reference_penalty(&sample, &a, &[0.0]).unwrap(), 4.0);
    }

    #[test]
    fn satisfied_relations_contribute_nothing() {
        let flow = identity_flow(2);
        let cfg = LossConfig {
            physics_weight: 1.0,
            penalty_samples: 8,
            ..Default::default()
        };
        // Relation 0*x0 + 0*x1 = 0 holds for any generated sample.
        let a = DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let trivial = PhysicsPenalty::new(
            LinearRelations::new(vec!["a".into(), "b".into()], a, vec![0.0]).unwrap(),
        );
        let draws = standard_normal_matrix(8, 2, 5);

        let mut tape = Tape::new();
        let batch = tape.constant(DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let with = main_loss(&mut tape, &flow, batch, Some(&trivial), Some(&draws), &cfg).unwrap();

        let cfg_off = LossConfig {
            physics_weight: 0.0,
            ..cfg
        };
        let mut tape2 = Tape::new();
        let batch2 = tape2.constant(DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let without = main_loss(&mut tape2, &flow, batch2, Some(&trivial), None, &cfg_off).unwrap();
        assert_eq!(
            tape.value(with).item().unwrap(),
            tape2.value(without).item().unwrap()
        );
    }

    #[test]
    fn penalty_is_batch_order_invariant() {
        let pen = one_relation();
        let fwd = DenseArray::matrix(3, 2, vec![1.0, 2.0, 0.5, 0.5, -1.0, 4.0]).unwrap();
        let rev = DenseArray::matrix(3, 2, vec![-1.0, 4.0, 0.5, 0.5, 1.0, 2.0]).unwrap();
        let a = pen.value(&fwd).unwrap();
        let b = pen.value(&rev).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn penalty_unflattens_windows() {
        // 1 sample of 2 timestamps x 2 sensors; relation x0 - x1 = 0.
        let pen = one_relation();
        let sample = DenseArray::matrix(1, 4, vec![1.0, 1.0, 1.0, 3.0]).unwrap();
        // residuals: 0 and -2 -> mean of squares over 2 rows = 2
        assert_eq!(pen.value(&sample).unwrap(), 2.0);
    }

    #[test]
    fn rescaled_penalty_matches_raw_space() {
        let pen = one_relation();
        let mins = [1.0, -2.0];
        let maxs = [3.0, 2.0];
        let scaled_pen = pen.rescaled(&mins, &maxs).unwrap();
        // pick scaled values, map to raw, compare residuals
        let scaled = DenseArray::matrix(1, 2, vec![0.25, 0.75]).unwrap();
        let raw = DenseArray::matrix(
            1,
            2,
            vec![
                mins[0] + (maxs[0] - mins[0]) * 0.25,
                mins[1] + (maxs[1] - mins[1]) * 0.75,
            ],
        )
        .unwrap();
        let a = scaled_pen.value(&scaled).unwrap();
        let b = pen.value(&raw).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn multitask_reduces_to_main_when_lambda_zero() {
        let flow = identity_flow(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = crate::selfsup::SelfSupHead::new(4, 5, &mut rng);
        let cfg = LossConfig {
            physics_weight: 0.0,
            selfsup_weight: 0.0,
            ..Default::default()
        };
        let nominal = standard_normal_matrix(3, 4, 1);
        let permuted = standard_normal_matrix(3, 4, 2);

        let mut tape = Tape::new();
        let nb = tape.constant(nominal.clone());
        let pb = tape.constant(permuted);
        let combined =
            multitask_loss(&mut tape, &flow, &head, nb, pb, &[0, 1, 2], None, None, &cfg).unwrap();

        let mut tape2 = Tape::new();
        let nb2 = tape2.constant(nominal);
        let main = main_loss(&mut tape2, &flow, nb2, None, None, &cfg).unwrap();
        assert_eq!(
            tape.value(combined).item().unwrap(),
            tape2.value(main).item().unwrap()
        );
    }

    #[test]
    fn multitask_with_zero_head_adds_ln_p() {
        let flow = identity_flow(4);
        let head = crate::selfsup::SelfSupHead::zeroed(4, 11);
        let cfg = LossConfig {
            physics_weight: 0.0,
            selfsup_weight: 1.0,
            ..Default::default()
        };
        let nominal = standard_normal_matrix(3, 4, 1);
        let permuted = standard_normal_matrix(3, 4, 2);

        let mut tape = Tape::new();
        let nb = tape.constant(nominal.clone());
        let pb = tape.constant(permuted);
        let combined =
            multitask_loss(&mut tape, &flow, &head, nb, pb, &[0, 1, 2], None, None, &cfg).unwrap();

        let mut tape2 = Tape::new();
        let nb2 = tape2.constant(nominal);
        let main = main_loss(&mut tape2, &flow, nb2, None, None, &cfg).unwrap();
        let expected = tape2.value(main).item().unwrap() + (11f64).ln();
        assert!((tape.value(combined).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn multitask_is_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut flow = identity_flow(4);
        for p in flow.params_mut() {
            for v in p.value.data_mut() {
                use rand::Rng;
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let head = crate::selfsup::SelfSupHead::new(4, 5, &mut rng);
        let nominal = standard_normal_matrix(3, 4, 1);
        let permuted = standard_normal_matrix(3, 4, 2);
        let labels = [0usize, 4, 2];

        let eval = |lambda: f64| -> f64 {
            let cfg = LossConfig {
                physics_weight: 0.0,
                selfsup_weight: lambda,
                ..Default::default()
            };
            let mut tape = Tape::new();
            let nb = tape.constant(nominal.clone());
            let pb = tape.constant(permuted.clone());
            let loss =
                multitask_loss(&mut tape, &flow, &head, nb, pb, &labels, None, None, &cfg).unwrap();
            tape.value(loss).item().unwrap()
        };
        let l0 = eval(0.0);
        let l1 = eval(1.0);
        let l2 = eval(2.0);
        assert!((l2 - l0 - 2.0 * (l1 - l0)).abs() < 1e-9, "not linear in lambda");
    }

    #[test]
    fn combined_gradient_is_sum_of_component_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut flow = identity_flow(4);
        for p in flow.params_mut() {
            for v in p.value.data_mut() {
                use rand::Rng;
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let head = crate::selfsup::SelfSupHead::new(4, 3, &mut rng);
        let nominal = standard_normal_matrix(3, 4, 1);
        let permuted = standard_normal_matrix(3, 4, 2);
        let labels = [0usize, 2, 1];
        let cfg = LossConfig {
            physics_weight: 0.0,
            selfsup_weight: 1.0,
            ..Default::default()
        };

        let mut tape = Tape::new();
        let nb = tape.constant(nominal.clone());
        let pb = tape.constant(permuted.clone());
        let combined =
            multitask_loss(&mut tape, &flow, &head, nb, pb, &labels, None, None, &cfg).unwrap();
        let g_combined = tape.backward(combined).unwrap();

        let mut tape_m = Tape::new();
        let nb2 = tape_m.constant(nominal);
        let main = main_loss(&mut tape_m, &flow, nb2, None, None, &cfg).unwrap();
        let g_main = tape_m.backward(main).unwrap();

        let mut tape_s = Tape::new();
        let pb2 = tape_s.constant(permuted);
        let ss = selfsup_loss(&mut tape_s, &flow, &head, pb2, &labels).unwrap();
        let g_ss = tape_s.backward(ss).unwrap();

        for p in flow.params() {
            let gc = g_combined.get(p.name()).unwrap();
            let gm = g_main.get(p.name()).unwrap();
            let gs = g_ss.get(p.name()).unwrap();
            for ((&c, &m), &s) in gc.data().iter().zip(gm.data()).zip(gs.data()) {
                assert!(
                    (c - (m + s)).abs() < 1e-9,
                    "gradient mismatch on {}",
                    p.name()
                );
            }
        }
    }
}
