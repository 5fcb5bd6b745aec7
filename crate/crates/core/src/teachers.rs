//! Teacher strategies supplying soft targets (and, for prior copies,
//! internal embeddings) to the student: a frozen snapshot of the student
//! itself, or a soft-voting ensemble of independently trained models.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{stack_internals, tempered_softmax_batch, InternalEmbedding};
use crate::scalar::Scalar;
use crate::vit::{ImageBatch, TinyViT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// A frozen copy of the student taken before adaptation.
    PriorCopy,
    /// Soft-voting ensemble: pseudo-probabilities are averaged across
    /// members after per-member tempered softmax.
    Ensemble,
}

impl TeacherKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TeacherKind::PriorCopy => "prior_copy",
            TeacherKind::Ensemble => "ensemble",
        }
    }
}

/// Frozen teacher. Members are immutable after construction; the recorded
/// checksum lets callers re-assert the freeze after an adaptation run.
pub struct TeacherHandle<F: Scalar> {
    kind: TeacherKind,
    members: Vec<TinyViT<F>>,
    frozen_checksum: String,
}

impl<F: Scalar> TeacherHandle<F> {
    /// Deep-copy the student as a frozen single-member teacher.
    pub fn prior_copy(student: &TinyViT<F>) -> Self {
        let members = vec![student.clone()];
        let frozen_checksum = combined_checksum(&members);
        Self {
            kind: TeacherKind::PriorCopy,
            members,
            frozen_checksum,
        }
    }

    /// Build a soft-voting ensemble from at least two frozen members that
    /// share the class count and input geometry.
    pub fn ensemble(members: Vec<TinyViT<F>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let first = members[0].config();
        for m in &members[1..] {
            let c = m.config();
            if c.num_classes != first.num_classes
                || c.image_size != first.image_size
            {
                return Err(Error::Config(format!(
                    "ensemble member mismatch: {}x{} classes/image vs {}x{}",
                    c.num_classes, c.image_size, first.num_classes, first.image_size
                )));
            }
        }
        let frozen_checksum = combined_checksum(&members);
        Ok(Self {
            kind: TeacherKind::Ensemble,
            members,
            frozen_checksum,
        })
    }

    pub fn kind(&self) -> TeacherKind {
        self.kind
    }

    pub fn members(&self) -> &[TinyViT<F>] {
        &self.members
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].config().num_classes
    }

    pub fn image_size(&self) -> usize {
        self.members[0].config().image_size
    }

    /// Parameter checksum across all members.
    pub fn checksum(&self) -> String {
        combined_checksum(&self.members)
    }

    /// True when no member parameter changed since construction.
    pub fn is_frozen(&self) -> bool {
        self.checksum() == self.frozen_checksum
    }

    /// Soft-voting targets: arithmetic mean over members of each member's
    /// tempered softmax. Requires an ensemble teacher.
    pub fn ensemble_soft_probs(&self, batch: &ImageBatch<F>, t: F) -> Result<Array2<F>> {
        if self.kind != TeacherKind::Ensemble {
            return Err(Error::Config(
                "ensemble_soft_probs requires an ensemble teacher".into(),
            ));
        }
        self.mean_member_probs(batch, t)
    }

    /// Soft targets for a batch plus, when requested, the teacher's stacked
    /// internal embedding. Internals are only defined for a prior copy; the
    /// ensemble has no single internal representation.
    pub fn targets(
        &self,
        batch: &ImageBatch<F>,
        t: F,
        want_internals: bool,
    ) -> Result<(Array2<F>, Option<InternalEmbedding<F>>)> {
        if want_internals && self.kind == TeacherKind::Ensemble {
            return Err(Error::Unsupported(
                "internal embeddings are not defined for an ensemble teacher".into(),
            ));
        }
        let probs = self.mean_member_probs(batch, t)?;
        let internals = if want_internals {
            Some(self.internal_embedding()?)
        } else {
            None
        };
        Ok((probs, internals))
    }

    /// Stacked internal embedding of the (single) member.
    pub fn internal_embedding(&self) -> Result<InternalEmbedding<F>> {
        if self.kind == TeacherKind::Ensemble {
            return Err(Error::Unsupported(
                "internal embeddings are not defined for an ensemble teacher".into(),
            ));
        }
        stack_internals(&self.members[0].extract_internal_parameters())
    }

    fn mean_member_probs(&self, batch: &ImageBatch<F>, t: F) -> Result<Array2<F>> {
        let mut acc: Option<Array2<F>> = None;
        for member in &self.members {
            let logits = member.logits(&batch.pixels)?;
            let probs = tempered_softmax_batch(logits.view(), t)?;
            acc = Some(match acc {
                None => probs,
                Some(a) => a + probs,
            });
        }
        let n = F::cast(self.members.len() as f64);
        Ok(acc.expect("at least one member").mapv(|v| v / n))
    }
}

fn combined_checksum<F: Scalar>(members: &[TinyViT<F>]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for m in members {
        hasher.update(m.checksum().as_bytes());
    }
    let out = hasher.finalize();
    let mut s = String::with_capacity(out.len() * 2);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{ViTConfig, IMAGE_CHANNELS};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(seed: u64) -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            hidden_size: 8,
            intermediate_size: 16,
            num_layers: 2,
            num_heads: 2,
            num_classes: 4,
            seed,
        }
    }

    fn batch(n: usize, seed: u64) -> ImageBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels =
            Array4::from_shape_fn((n, IMAGE_CHANNELS, 16, 16), |_| rng.gen_range(0.0..1.0));
        ImageBatch::new(pixels, vec![0; n]).unwrap()
    }

    #[test]
    fn prior_copy_matches_student_logits() {
        let student = TinyViT::<f64>::init(&cfg(1)).unwrap();
        let teacher = TeacherHandle::prior_copy(&student);
        let b = batch(3, 9);
        let s_logits = student.logits(&b.pixels).unwrap();
        let t_logits = teacher.members()[0].logits(&b.pixels).unwrap();
        assert_eq!(s_logits, t_logits);
        assert!(teacher.is_frozen());
    }

    #[test]
    fn snapshot_of_snapshot_is_identical() {
        let student = TinyViT::<f64>::init(&cfg(1)).unwrap();
        let t1 = TeacherHandle::prior_copy(&student);
        let t2 = TeacherHandle::prior_copy(&t1.members()[0]);
        assert_eq!(t1.checksum(), t2.checksum());
    }

    #[test]
    fn ensemble_needs_two_members_and_shared_classes() {
        let a = TinyViT::<f64>::init(&cfg(1)).unwrap();
        assert!(matches!(
            TeacherHandle::ensemble(vec![a.clone()]),
            Err(Error::Config(_))
        ));
        let mut other = cfg(2);
        other.num_classes = 5;
        let b = TinyViT::<f64>::init(&other).unwrap();
        assert!(matches!(
            TeacherHandle::ensemble(vec![a, b]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ensemble_probs_average_members() {
        let a = TinyViT::<f64>::init(&cfg(1)).unwrap();
        let b = TinyViT::<f64>::init(&cfg(2)).unwrap();
        let batch = batch(4, 3);
        let t = 2.0;
        let pa = tempered_softmax_batch(a.logits(&batch.pixels).unwrap().view(), t).unwrap();
        let pb = tempered_softmax_batch(b.logits(&batch.pixels).unwrap().view(), t).unwrap();
        let expected = (&pa + &pb) / 2.0;
        let ens = TeacherHandle::ensemble(vec![a, b]).unwrap();
        let got = ens.ensemble_soft_probs(&batch, t).unwrap();
        for (x, y) in got.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in got.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_members_reduce_to_single_member() {
        let a = TinyViT::<f64>::init(&cfg(1)).unwrap();
        let batch = batch(2, 5);
        let single = tempered_softmax_batch(a.logits(&batch.pixels).unwrap().view(), 2.0).unwrap();
        let ens = TeacherHandle::ensemble(vec![a.clone(), a]).unwrap();
        let got = ens.ensemble_soft_probs(&batch, 2.0).unwrap();
        for (x, y) in got.iter().zip(single.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn internals_from_ensemble_are_unsupported() {
        let a = TinyViT::<f64>::init(&cfg(1)).unwrap();
        let b = TinyViT::<f64>::init(&cfg(2)).unwrap();
        let ens = TeacherHandle::ensemble(vec![a, b]).unwrap();
        let batch = batch(1, 1);
        assert!(matches!(
            ens.targets(&batch, 2.0, true),
            Err(Error::Unsupported(_))
        ));
        assert!(ens.targets(&batch, 2.0, false).is_ok());
    }

    #[test]
    fn prior_copy_internals_match_student_stack() {
        let student = TinyViT::<f64>::init(&cfg(1)).unwrap();
        let teacher = TeacherHandle::prior_copy(&student);
        let batch = batch(1, 1);
        let (_, internals) = teacher.targets(&batch, 2.0, true).unwrap();
        let expected = stack_internals(&student.extract_internal_parameters()).unwrap();
        assert_eq!(internals.unwrap().view(), expected.view());
    }

    #[test]
    fn targets_are_deterministic() {
        let student = TinyViT::<f64>::init(&cfg(1)).unwrap();
        let teacher = TeacherHandle::prior_copy(&student);
        let b = batch(3, 7);
        let (p1, _) = teacher.targets(&b, 2.0, false).unwrap();
        let (p2, _) = teacher.targets(&b, 2.0, false).unwrap();
        assert_eq!(p1, p2);
    }
}
