//! Support membership, Hamming distance to the support and projection sets.
//!
//! A mask never matches a clean token, so a masked position costs one unit
//! of distance against every support string.

use serde::{Deserialize, Serialize};

use crate::domain::{ExplicitDistribution, Mechanism, Token, TokenSeq, MASK};
use crate::error::{invalid, LabError, Result};

/// Nearest in-support strings of a query and their total probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub distance: usize,
    pub mass: f64,
    pub witness_count: u64,
}

/// Change in distance to the support caused by a single-token edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EditClass {
    pub delta_d: i8,
}

impl EditClass {
    pub fn is_improving(self) -> bool {
        self.delta_d < 0
    }
}

/// Anything that can answer support queries about `[K]^H`.
pub trait SupportOracle {
    fn vocab(&self) -> usize;
    fn seq_len(&self) -> usize;
    /// Membership of a clean sequence.
    fn contains_clean(&self, seq: &[Token]) -> bool;
    /// `d(seq, D)`; masks allowed.
    fn distance(&self, seq: &[Token]) -> Result<usize>;
    fn projection(&self, seq: &[Token]) -> Result<ProjectionResult>;
}

fn check_shape(oracle: &(impl SupportOracle + ?Sized), seq: &[Token]) -> Result<()> {
    if seq.len() != oracle.seq_len() {
        return invalid(format!(
            "sequence has length {}, expected {}",
            seq.len(),
            oracle.seq_len()
        ));
    }
    if let Some(&t) = seq.iter().find(|&&t| t as usize > oracle.vocab()) {
        return invalid(format!(
            "token {t} outside vocabulary 1..={}",
            oracle.vocab()
        ));
    }
    Ok(())
}

pub fn is_in_support(seq: &TokenSeq, oracle: &(impl SupportOracle + ?Sized)) -> Result<bool> {
    check_shape(oracle, seq)?;
    if !seq.is_clean() {
        return invalid("membership is defined for clean sequences only");
    }
    Ok(oracle.contains_clean(seq))
}

pub fn distance_to_support(
    seq: &TokenSeq,
    oracle: &(impl SupportOracle + ?Sized),
) -> Result<usize> {
    check_shape(oracle, seq)?;
    oracle.distance(seq)
}

pub fn projection(
    seq: &TokenSeq,
    oracle: &(impl SupportOracle + ?Sized),
) -> Result<ProjectionResult> {
    check_shape(oracle, seq)?;
    oracle.projection(seq)
}

/// `Δd = d(seq^{h -> y}, D) - d(seq, D)`.
///
/// Under absorbing corruption only unmasking edits are admissible.
pub fn classify_edit(
    seq: &TokenSeq,
    h: usize,
    y: Token,
    oracle: &(impl SupportOracle + ?Sized),
    mechanism: Mechanism,
) -> Result<EditClass> {
    check_shape(oracle, seq)?;
    if h >= seq.len() {
        return invalid(format!("position {h} out of range"));
    }
    if y == seq[h] {
        return invalid("edit must change the token");
    }
    if y == MASK || y as usize > oracle.vocab() {
        return invalid(format!("edit target {y} is not a clean token"));
    }
    if mechanism == Mechanism::Absorbing && seq[h] != MASK {
        return invalid("absorbing edits must unmask a masked position");
    }
    let before = oracle.distance(seq)? as i64;
    let after = oracle.distance(&seq.with_edit(h, y))? as i64;
    Ok(EditClass {
        delta_d: (after - before) as i8,
    })
}

pub(crate) fn hamming(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

impl SupportOracle for ExplicitDistribution {
    fn vocab(&self) -> usize {
        ExplicitDistribution::vocab(self)
    }

    fn seq_len(&self) -> usize {
        self.len()
    }

    fn contains_clean(&self, seq: &[Token]) -> bool {
        self.contains(&TokenSeq::from(seq))
    }

    fn distance(&self, seq: &[Token]) -> Result<usize> {
        self.support()
            .iter()
            .map(|z| hamming(seq, z))
            .min()
            .ok_or_else(|| LabError::InvalidState("empty support".into()))
    }

    fn projection(&self, seq: &[Token]) -> Result<ProjectionResult> {
        let distance = SupportOracle::distance(self, seq)?;
        let (mut mass, mut witness_count) = (0.0, 0);
        for (z, p) in self.iter() {
            if hamming(seq, z) == distance {
                mass += p;
                witness_count += 1;
            }
        }
        Ok(ProjectionResult {
            distance,
            mass,
            witness_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_dist() -> ExplicitDistribution {
        ExplicitDistribution::new(
            2,
            2,
            vec![TokenSeq::new(vec![1, 1]), TokenSeq::new(vec![2, 2])],
            vec![0.75, 0.25],
        )
        .unwrap()
    }

    fn seq(v: &[Token]) -> TokenSeq {
        TokenSeq::from(v)
    }

    #[test]
    fn projection_examples() {
        let d = pair_dist();
        let p = projection(&seq(&[1, 2]), &d).unwrap();
        assert_eq!((p.distance, p.witness_count), (1, 2));
        assert!((p.mass - 1.0).abs() < 1e-15);
        let p = projection(&seq(&[1, 1]), &d).unwrap();
        assert_eq!((p.distance, p.mass, p.witness_count), (0, 0.75, 1));
        let p = projection(&seq(&[2, 1]), &d).unwrap();
        assert_eq!(p.distance, 1);
        assert!((p.mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn edit_classes() {
        let d = pair_dist();
        let c = classify_edit(&seq(&[1, 2]), 1, 1, &d, Mechanism::Uniform).unwrap();
        assert_eq!(c.delta_d, -1);
        let c = classify_edit(&seq(&[1, 1]), 1, 2, &d, Mechanism::Uniform).unwrap();
        assert_eq!(c.delta_d, 1);
        assert!(classify_edit(&seq(&[1, 1]), 1, 1, &d, Mechanism::Uniform).is_err());
        assert!(classify_edit(&seq(&[1, 1]), 1, 2, &d, Mechanism::Absorbing).is_err());
        let c = classify_edit(&seq(&[MASK, 2]), 0, 1, &d, Mechanism::Absorbing).unwrap();
        assert_eq!(c.delta_d, 0);
    }

    #[test]
    fn masks_count_as_mismatches() {
        let d = pair_dist();
        assert_eq!(distance_to_support(&seq(&[MASK, MASK]), &d).unwrap(), 2);
        assert_eq!(distance_to_support(&seq(&[MASK, 1]), &d).unwrap(), 1);
        assert!(is_in_support(&seq(&[MASK, 1]), &d).is_err());
    }
}
