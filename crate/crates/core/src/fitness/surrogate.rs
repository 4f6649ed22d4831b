use crate::structmodel::{totals, ArchTemplate, StructureVector};

use super::{Evaluator, FitnessError};

/// `exp(-|s - target|^2 / sharpness^2) * (1 - penalty * params(s) / params(baseline))`.
pub fn surrogate_fitness(
    s: &StructureVector,
    target: &StructureVector,
    sharpness: f64,
    penalty: f64,
    t: &ArchTemplate,
) -> Result<f64, FitnessError> {
    SurrogateEvaluator::new(t.clone(), target.clone(), sharpness, penalty)?.score(s)
}

/// Deterministic stand-in for trained accuracy with a planted optimum.
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    template: ArchTemplate,
    target: StructureVector,
    sharpness: f64,
    penalty: f64,
    baseline_params: f64,
}

impl SurrogateEvaluator {
    pub fn new(
        template: ArchTemplate,
        target: StructureVector,
        sharpness: f64,
        penalty: f64,
    ) -> Result<Self, FitnessError> {
        if !(sharpness > 0.0) || !(0.0..1.0).contains(&penalty) {
            return Err(FitnessError::InvalidSpec(format!(
                "surrogate needs sharpness > 0 and penalty in [0, 1), got {sharpness} and {penalty}"
            )));
        }
        template.validate(&target)?;
        let baseline_params = totals(&template, &template.baseline())?.params as f64;
        Ok(Self {
            template,
            target,
            sharpness,
            penalty,
            baseline_params,
        })
    }

    pub fn target(&self) -> &StructureVector {
        &self.target
    }

    pub fn score(&self, s: &StructureVector) -> Result<f64, FitnessError> {
        let dist2: f64 = s
            .channels
            .iter()
            .zip(&self.target.channels)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let gauss = (-dist2 / (self.sharpness * self.sharpness)).exp();
        let size = if self.penalty == 0.0 {
            self.template.validate(s)?;
            1.0
        } else {
            1.0 - self.penalty * totals(&self.template, s)?.params as f64 / self.baseline_params
        };
        Ok(gauss * size)
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&mut self, s: &StructureVector, _seed: u64) -> Result<f64, FitnessError> {
        self.score(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structmodel::build_template;

    #[test]
    fn planted_optimum_scores_one() {
        let t = build_template("toynet-3").unwrap();
        let target = StructureVector::new("toynet-3", vec![4, 9, 2]);
        assert_eq!(surrogate_fitness(&target, &target, 3.0, 0.0, &t).unwrap(), 1.0);
    }

    #[test]
    fn one_sharpness_away_is_exp_minus_one() {
        let t = build_template("toynet-3").unwrap();
        let target = StructureVector::new("toynet-3", vec![4, 9, 2]);
        // distance 5 = sqrt(3^2 + 4^2)
        let s = StructureVector::new("toynet-3", vec![7, 13, 2]);
        let f = surrogate_fitness(&s, &target, 5.0, 0.0, &t).unwrap();
        assert!((f - (-1.0f64).exp()).abs() < 1e-15);
        assert!((f - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn decreases_away_from_target() {
        let t = build_template("toynet-2").unwrap();
        let target = StructureVector::new("toynet-2", vec![8, 8]);
        let mut last = f64::INFINITY;
        for c in 8..=16 {
            let f = surrogate_fitness(&StructureVector::new("toynet-2", vec![c, 8]), &target, 4.0, 0.0, &t).unwrap();
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn penalty_prefers_smaller_networks() {
        let t = build_template("toynet-2").unwrap();
        let target = t.baseline();
        let f = surrogate_fitness(&target, &target, 4.0, 0.5, &t).unwrap();
        assert!((f - 0.5).abs() < 1e-15);
        assert!(f > 0.0 && f <= 1.0);
    }

    #[test]
    fn rejects_foreign_vectors() {
        let t = build_template("toynet-2").unwrap();
        let target = t.baseline();
        assert!(surrogate_fitness(&StructureVector::new("toynet-2", vec![1]), &target, 1.0, 0.0, &t).is_err());
        assert!(surrogate_fitness(&target, &target, 0.0, 0.0, &t).is_err());
    }
}
