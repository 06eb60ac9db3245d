//! A data source that is either the walk language or an explicit table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ExplicitDistribution, Token, TokenSeq};
use crate::error::Result;
use crate::language::LanguageSpec;
use crate::support::{ProjectionResult, SupportOracle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Instance {
    Walk(LanguageSpec),
    Explicit(ExplicitDistribution),
}

impl Instance {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSeq {
        match self {
            Instance::Walk(l) => l.sample_sequence(rng),
            Instance::Explicit(d) => d.draw(rng),
        }
    }

    pub fn prob(&self, seq: &TokenSeq) -> f64 {
        match self {
            Instance::Walk(l) => l.prob(seq),
            Instance::Explicit(d) => d.prob_of(seq),
        }
    }

    pub fn as_walk(&self) -> Option<&LanguageSpec> {
        match self {
            Instance::Walk(l) => Some(l),
            Instance::Explicit(_) => None,
        }
    }

    pub fn as_explicit(&self) -> Option<&ExplicitDistribution> {
        match self {
            Instance::Walk(_) => None,
            Instance::Explicit(d) => Some(d),
        }
    }
}

impl SupportOracle for Instance {
    fn vocab(&self) -> usize {
        match self {
            Instance::Walk(l) => l.vocab(),
            Instance::Explicit(d) => d.vocab(),
        }
    }

    fn seq_len(&self) -> usize {
        match self {
            Instance::Walk(l) => l.len(),
            Instance::Explicit(d) => d.len(),
        }
    }

    fn contains_clean(&self, seq: &[Token]) -> bool {
        match self {
            Instance::Walk(l) => l.contains_clean(seq),
            Instance::Explicit(d) => d.contains_clean(seq),
        }
    }

    fn distance(&self, seq: &[Token]) -> Result<usize> {
        match self {
            Instance::Walk(l) => l.distance(seq),
            Instance::Explicit(d) => d.distance(seq),
        }
    }

    fn projection(&self, seq: &[Token]) -> Result<ProjectionResult> {
        match self {
            Instance::Walk(l) => l.projection(seq),
            Instance::Explicit(d) => d.projection(seq),
        }
    }
}

impl From<LanguageSpec> for Instance {
    fn from(l: LanguageSpec) -> Self {
        Instance::Walk(l)
    }
}

impl From<ExplicitDistribution> for Instance {
    fn from(d: ExplicitDistribution) -> Self {
        Instance::Explicit(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tagged_json() {
        let i = Instance::Walk(LanguageSpec::new(4, 3).unwrap());
        let s = serde_json::to_string(&i).unwrap();
        assert!(s.starts_with(r#"{"type":"walk","K":4"#), "{s}");
        assert_eq!(serde_json::from_str::<Instance>(&s).unwrap(), i);
        let d = ExplicitDistribution::new(2, 1, vec![TokenSeq::new(vec![1])], vec![1.0]).unwrap();
        let s = serde_json::to_string(&Instance::Explicit(d.clone())).unwrap();
        assert_eq!(
            serde_json::from_str::<Instance>(&s).unwrap(),
            Instance::Explicit(d)
        );
    }
}
