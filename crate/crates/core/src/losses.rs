//! Training objectives: prototype matching, temperature-scaled
//! self-distillation and the prototype-contrastive discriminative loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Distance used inside the prototype softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

/// One prototype per class; row `i` of `prototypes` belongs to `class_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    pub prototypes: Tensor<T>,
    pub class_ids: Vec<usize>,
}

impl<T: Real> PrototypeSet<T> {
    pub fn new(prototypes: Tensor<T>, class_ids: Vec<usize>) -> Result<Self> {
        let (c, _) = prototypes.dims2("prototypes")?;
        if class_ids.len() != c {
            return Err(Error::shape(
                "prototypes",
                format!("{c} rows but {} class ids", class_ids.len()),
            ));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != c {
            return Err(Error::InvalidArgument(
                "duplicate class id in prototype set".into(),
            ));
        }
        Ok(PrototypeSet {
            prototypes,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }
}

/// Per-class mean embedding inside a graph; classes are `0..n_classes`.
pub fn prototypes_var<T: Real>(
    g: &mut Graph<T>,
    support_embeddings: Var,
    support_labels: &[usize],
    n_classes: usize,
) -> Result<Var> {
    g.segment_mean(support_embeddings, support_labels, n_classes)
        .map_err(|e| match e {
            Error::Degenerate { detail, .. } => Error::degenerate(
                "compute_prototypes",
                format!("class without support samples ({detail})"),
            ),
            other => other,
        })
}

/// Mean support embedding of every class `0..n_classes`.
pub fn compute_prototypes<T: Real>(
    support_embeddings: &Tensor<T>,
    support_labels: &[usize],
    n_classes: usize,
) -> Result<PrototypeSet<T>> {
    let mut g = Graph::new();
    let e = g.constant(support_embeddings.clone());
    let p = prototypes_var(&mut g, e, support_labels, n_classes)?;
    PrototypeSet::new(g.value(p).clone(), (0..n_classes).collect())
}

/// `-phi(query, prototype)` for every pair: `[Q, C]`.
pub fn class_scores<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    prototypes: Var,
    distance: Distance,
) -> Result<Var> {
    let d2 = g.pairwise_sq_euclidean(queries, prototypes)?;
    let d = match distance {
        Distance::SquaredEuclidean => d2,
        Distance::Euclidean => g.sqrt(d2)?,
    };
    g.neg(d)
}

/// Log of the prototype softmax over negated distances.
pub fn teacher_log_probs<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    prototypes: Var,
    distance: Distance,
) -> Result<Var> {
    let s = class_scores(g, queries, prototypes, distance)?;
    g.log_softmax(s)
}

pub fn teacher_probs_var<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    prototypes: Var,
    distance: Distance,
) -> Result<Var> {
    let lp = teacher_log_probs(g, queries, prototypes, distance)?;
    g.exp(lp)
}

/// Class distribution of each query under the prototype softmax: `[Q, C]`.
pub fn teacher_probs<T: Real>(
    query_embeddings: &Tensor<T>,
    protos: &PrototypeSet<T>,
    distance: Distance,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let q = g.constant(query_embeddings.clone());
    let p = g.constant(protos.prototypes.clone());
    let out = teacher_probs_var(&mut g, q, p, distance)?;
    Ok(g.value(out).clone())
}

fn check_labels(op: &'static str, labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            op,
            format!("{} labels for {rows} queries", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {bad} outside the {classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-probability of each query's true class.
pub fn matching_loss<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    prototypes: Var,
    labels: &[usize],
    distance: Distance,
) -> Result<Var> {
    let (q, _) = g.value(queries).dims2("matching_loss")?;
    let (c, _) = g.value(prototypes).dims2("matching_loss")?;
    check_labels("matching_loss", labels, q, c)?;
    let lp = teacher_log_probs(g, queries, prototypes, distance)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked)?;
    g.neg(m)
}

/// Tolerance on teacher row sums.
const DISTRIBUTION_TOL: f64 = 1e-4;

/// `softmax(ln(q) / tau)`, computed in f64.
pub fn soften<T: Real>(teacher: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let (_, c) = teacher.dims2("soften")?;
    let mut out = Vec::with_capacity(teacher.numel());
    for row in teacher.data().chunks(c) {
        let logs: Vec<f64> = row.iter().map(|&p| p.as_f64().ln() / tau).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| T::lit(e / z)));
    }
    Tensor::new(teacher.shape(), out)
}

/// `tau^2 * mean_i KL(soften(teacher_i, tau) || softmax(logits_i / tau))`.
///
/// The teacher is a constant: no gradient reaches whatever produced it.
pub fn distill_loss<T: Real>(
    g: &mut Graph<T>,
    teacher: &Tensor<T>,
    student_logits: Var,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "distill_loss: tau must be positive, got {tau}"
        )));
    }
    let (q, c) = teacher.dims2("distill_loss")?;
    if g.value(student_logits).shape() != [q, c] {
        return Err(Error::shape(
            "distill_loss",
            format!(
                "teacher [{q}, {c}] vs student {:?}",
                g.value(student_logits).shape()
            ),
        ));
    }
    for (i, row) in teacher.data().chunks(c).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        // Negated so NaN entries are rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let negative = row.iter().any(|&v| !(v >= T::zero()));
        if (sum - 1.0).abs() > DISTRIBUTION_TOL || negative {
            return Err(Error::InvalidArgument(format!(
                "distill_loss: teacher row {i} is not a distribution (sum {sum})"
            )));
        }
    }
    let target = soften(teacher, tau)?;
    let neg_entropy: f64 = target
        .data()
        .iter()
        .map(|v| v.as_f64())
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum();
    let scaled = g.scale(student_logits, T::lit(1.0 / tau))?;
    let log_student = g.log_softmax(scaled)?;
    let t = g.constant(target);
    let cross = g.mul(t, log_student)?;
    let cross = g.sum(cross)?;
    let factor = tau * tau / q as f64;
    let kl = g.scale(cross, T::lit(-factor))?;
    g.add_scalar(kl, T::lit(factor * neg_entropy))
}

/// Contrastive loss between unit-normalised queries and prototypes. The
/// positive pair is excluded from the denominator, so values can be negative.
pub fn discriminative_loss<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    prototypes: Var,
    labels: &[usize],
) -> Result<Var> {
    let (q, d) = g.value(queries).dims2("discriminative_loss")?;
    let (c, d2) = g.value(prototypes).dims2("discriminative_loss")?;
    if d != d2 {
        return Err(Error::shape(
            "discriminative_loss",
            format!("feature dims {d} vs {d2}"),
        ));
    }
    if c < 2 {
        return Err(Error::degenerate(
            "discriminative_loss",
            "needs at least two classes",
        ));
    }
    check_labels("discriminative_loss", labels, q, c)?;
    let fq = g.l2_normalize(queries)?;
    let fp = g.l2_normalize(prototypes)?;
    let fpt = g.transpose(fp)?;
    let sims = g.matmul(fq, fpt)?;
    let positive = g.pick(sims, labels)?;
    let mut negatives = vec![true; q * c];
    for (i, &l) in labels.iter().enumerate() {
        negatives[i * c + l] = false;
    }
    let lse = g.masked_logsumexp(sims, &negatives)?;
    let per_query = g.sub(lse, positive)?;
    g.mean(per_query)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub distill: f64,
    pub discriminative: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            distill: 1.0,
            discriminative: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.distill < 0.0
            || self.discriminative < 0.0
            || !self.distill.is_finite()
            || !self.discriminative.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `w_s * distill + w_d * discriminative`.
pub fn combined_phase2_loss<T: Real>(
    g: &mut Graph<T>,
    distill: Var,
    discriminative: Var,
    weights: LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let a = g.scale(distill, T::lit(weights.distill))?;
    let b = g.scale(discriminative, T::lit(weights.discriminative))?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn prototypes_are_class_means() {
        let e = t(&[3, 2], &[0.0, 0.0, 5.0, 5.0, 2.0, 4.0]);
        let p = compute_prototypes(&e, &[0, 1, 0], 2).unwrap();
        assert_eq!(p.prototypes.data(), &[1.0, 2.0, 5.0, 5.0]);
        assert_eq!(p.class_ids, vec![0, 1]);

        let same = t(&[2, 2], &[0.3, -0.7, 0.3, -0.7]);
        let p = compute_prototypes(&same, &[0, 0], 1).unwrap();
        assert_eq!(p.prototypes.data(), &[0.3, -0.7]);
    }

    #[test]
    fn missing_class_is_an_error() {
        let e = t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]);
        assert!(compute_prototypes(&e, &[0, 0], 2).is_err());
    }

    #[test]
    fn teacher_probs_cases() {
        // Equidistant query.
        let protos =
            PrototypeSet::new(t(&[3, 2], &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0]), vec![0, 1, 2]).unwrap();
        let q = t(&[1, 2], &[0.0, 0.0]);
        let p = teacher_probs(&q, &protos, Distance::SquaredEuclidean).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // Query on prototype 1, the others far away.
        let protos = PrototypeSet::new(t(&[2, 1], &[0.0, 100.0]), vec![0, 1]).unwrap();
        let p = teacher_probs(&t(&[1, 1], &[0.0]), &protos, Distance::SquaredEuclidean).unwrap();
        assert!(p.data()[0] > 1.0 - 1e-12);
        // Squared distances (0, 1).
        let protos = PrototypeSet::new(t(&[2, 1], &[0.0, 1.0]), vec![0, 1]).unwrap();
        let p = teacher_probs(&t(&[1, 1], &[0.0]), &protos, Distance::SquaredEuclidean).unwrap();
        let e = (-1.0f64).exp();
        assert!((p.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p.data()[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn teacher_probs_dim_mismatch() {
        let protos = PrototypeSet::new(t(&[2, 2], &[0.0; 4]), vec![0, 1]).unwrap();
        assert!(
            teacher_probs(&t(&[1, 3], &[0.0; 3]), &protos, Distance::SquaredEuclidean).is_err()
        );
    }

    fn matching(q: &[f64], d: usize, protos: &[f64], labels: &[usize]) -> f64 {
        let mut g = Graph::new();
        let qv = g.constant(t(&[q.len() / d, d], q));
        let pv = g.constant(t(&[protos.len() / d, d], protos));
        let l = matching_loss(&mut g, qv, pv, labels, Distance::SquaredEuclidean).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn matching_loss_cases() {
        // On its prototype, others at squared distance 100.
        let l = matching(&[0.0], 1, &[0.0, 10.0, -10.0], &[0]);
        assert!((0.0..=1e-6).contains(&l));
        // All distances equal: ln C.
        let l = matching(
            &[0.0, 0.0],
            2,
            &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
            &[2],
        );
        assert!((l - 4f64.ln()).abs() < 1e-12);
        // Squared distances (0, 1), true class first.
        let l = matching(&[0.0], 1, &[0.0, 1.0], &[0]);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn matching_loss_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1], &[0.0]));
        let p = g.constant(t(&[2, 1], &[0.0, 1.0]));
        assert!(matching_loss(&mut g, q, p, &[2], Distance::SquaredEuclidean).is_err());
    }

    fn distill(teacher: &[f64], logits: &[f64], c: usize, tau: f64) -> Result<f64> {
        let mut g = Graph::new();
        let z = g.constant(t(&[logits.len() / c, c], logits));
        let l = distill_loss(&mut g, &t(&[teacher.len() / c, c], teacher), z, tau)?;
        g.value(l).item()
    }

    #[test]
    fn distill_loss_cases() {
        let l = distill(&[0.75, 0.25], &[0.0, 0.0], 2, 1.0).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.1308).abs() < 1e-4);

        // Student equal to the softened teacher: logits = ln(q), any tau.
        let q = [0.6, 0.3, 0.1];
        let logits: Vec<f64> = q.iter().map(|v: &f64| v.ln()).collect();
        for tau in [1.0, 2.0, 5.0] {
            assert!(distill(&q, &logits, 3, tau).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn distill_loss_errors() {
        assert!(distill(&[0.5, 0.6], &[0.0, 0.0], 2, 1.0).is_err());
        assert!(distill(&[0.5, 0.5], &[0.0, 0.0], 2, 0.0).is_err());
        assert!(distill(&[0.5, 0.5], &[0.0, 0.0], 2, -1.0).is_err());
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1, 3], &[0.0; 3]));
        assert!(distill_loss(&mut g, &t(&[1, 2], &[0.5, 0.5]), z, 1.0).is_err());
    }

    fn disc(q: &[f64], protos: &[f64], d: usize, labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let qv = g.constant(t(&[q.len() / d, d], q));
        let pv = g.constant(t(&[protos.len() / d, d], protos));
        let l = discriminative_loss(&mut g, qv, pv, labels)?;
        g.value(l).item()
    }

    #[test]
    fn discriminative_loss_cases() {
        let l = disc(&[2.0, 0.0], &[1.0, 0.0, 0.0, 3.0], 2, &[0]).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
        // Equal similarity to every prototype: ln(C - 1).
        let l = disc(
            &[0.0, 0.0, 1.0],
            &[1.0, 0.0, 1.0, -1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, -1.0, 1.0],
            3,
            &[1],
        )
        .unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminative_loss_errors() {
        assert!(disc(&[1.0, 0.0], &[1.0, 0.0], 2, &[0]).is_err());
        assert!(disc(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 2, &[0]).is_err());
        assert!(disc(&[1.0, 0.0], &[0.0, 0.0, 0.0, 1.0], 2, &[0]).is_err());
    }

    #[test]
    fn combined_weights() {
        let mut g = Graph::<f64>::new();
        let ls = g.constant(Tensor::scalar(0.2));
        let ld = g.constant(Tensor::scalar(-0.5));
        let w = |s, d| LossWeights {
            distill: s,
            discriminative: d,
        };
        let a = combined_phase2_loss(&mut g, ls, ld, w(1.0, 0.0)).unwrap();
        assert_eq!(g.value(a).item().unwrap(), 0.2);
        let b = combined_phase2_loss(&mut g, ls, ld, w(0.0, 1.0)).unwrap();
        assert_eq!(g.value(b).item().unwrap(), -0.5);
        let c = combined_phase2_loss(&mut g, ls, ld, w(1.0, 1.0)).unwrap();
        assert!((g.value(c).item().unwrap() + 0.3).abs() < 1e-15);
        assert!(combined_phase2_loss(&mut g, ls, ld, w(-1.0, 1.0)).is_err());
    }
}
