//! Synthetic language × ability regression tasks.
//!
//! A "language" is an 8×8 orthogonal rotation applied to the input (the
//! reference language uses the identity); an "ability" is a fixed target
//! function of the rotated input. The general corpus of a language is a
//! scaled coordinate sum, so language training drifts a model toward that
//! language's frame without teaching any ability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::model::{ToyModel, INPUT_DIM};

/// Amplitude of the general-corpus target; scales how strongly language
/// drift perturbs predictions.
pub const GENERAL_SCALE: f64 = 2.0;

/// Output level shared by all corpora. The general target sits at the
/// same mean as the square-sum ability so that ability training adjusts
/// shape rather than output scale.
pub const GENERAL_OFFSET: f64 = 1.4;

/// Target function of a task, evaluated on the rotated input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Ability target: index 0 is the coordinate-square sum, index 1 the
    /// coordinate maximum.
    Ability(usize),
    /// General-corpus target: a scaled coordinate sum.
    General,
}

impl Target {
    fn value(self, z: &[f64; INPUT_DIM]) -> f64 {
        match self {
            Target::Ability(0) => z.iter().map(|v| v * v).sum(),
            Target::Ability(1) => z.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Target::Ability(i) => panic!("ability index {i} out of range"),
            Target::General => GENERAL_OFFSET + GENERAL_SCALE * z.iter().sum::<f64>(),
        }
    }
}

/// One sampling rule: inputs are standard normal, targets are the task
/// function of the rotated input.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub language: usize,
    pub target: Target,
    rotation: Vec<f64>,
}

impl ToyTask {
    pub fn rotation(&self) -> &[f64] {
        &self.rotation
    }

    fn rotate(&self, x: &[f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        let mut z = [0.0f64; INPUT_DIM];
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &self.rotation[r * INPUT_DIM..(r + 1) * INPUT_DIM];
            *zr = row.iter().zip(x.iter()).map(|(q, v)| q * v).sum();
        }
        z
    }

    pub fn sample_one(&self, rng: &mut ChaCha8Rng) -> ([f64; INPUT_DIM], f64) {
        let mut x = [0.0f64; INPUT_DIM];
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let y = self.target.value(&self.rotate(&x));
        (x, y)
    }

    pub fn target_of(&self, x: &[f64; INPUT_DIM]) -> f64 {
        self.target.value(&self.rotate(&x))
    }
}

/// All rotations and task handles for one experiment.
#[derive(Debug, Clone)]
pub struct TaskSet {
    rotations: Vec<Vec<f64>>,
    n_abilities: usize,
}

impl TaskSet {
    /// Generate rotations for `n_languages` languages (language 0 is the
    /// unrotated reference) and validate the ability count.
    pub fn generate(seed: u64, n_languages: usize, n_abilities: usize) -> Result<TaskSet> {
        if n_languages < 1 {
            return Err(Error::InvalidParameter(
                "at least one language is required".to_string(),
            ));
        }
        if !(1..=2).contains(&n_abilities) {
            return Err(Error::InvalidParameter(format!(
                "n_abilities must be 1 or 2, got {n_abilities}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a51_c0de);
        let mut rotations = Vec::with_capacity(n_languages);
        rotations.push(identity());
        for _ in 1..n_languages {
            rotations.push(random_orthogonal(&mut rng));
        }
        Ok(TaskSet {
            rotations,
            n_abilities,
        })
    }

    pub fn n_languages(&self) -> usize {
        self.rotations.len()
    }

    pub fn n_abilities(&self) -> usize {
        self.n_abilities
    }

    pub fn ability_task(&self, ability: usize, language: usize) -> ToyTask {
        assert!(ability < self.n_abilities, "ability index out of range");
        ToyTask {
            language,
            target: Target::Ability(ability),
            rotation: self.rotations[language].clone(),
        }
    }

    pub fn general_task(&self, language: usize) -> ToyTask {
        ToyTask {
            language,
            target: Target::General,
            rotation: self.rotations[language].clone(),
        }
    }
}

/// All (language, ability) task pairs for a seed, languages outermost.
pub fn gen_tasks(seed: u64, n_languages: usize, n_abilities: usize) -> Result<Vec<ToyTask>> {
    let set = TaskSet::generate(seed, n_languages, n_abilities)?;
    let mut tasks = Vec::with_capacity(n_languages * n_abilities);
    for language in 0..n_languages {
        for ability in 0..n_abilities {
            tasks.push(set.ability_task(ability, language));
        }
    }
    Ok(tasks)
}

fn identity() -> Vec<f64> {
    let mut q = vec![0.0f64; INPUT_DIM * INPUT_DIM];
    for i in 0..INPUT_DIM {
        q[i * INPUT_DIM + i] = 1.0;
    }
    q
}

/// Gram-Schmidt orthogonalization of a seeded Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<[f64; INPUT_DIM]> = Vec::with_capacity(INPUT_DIM);
    while rows.len() < INPUT_DIM {
        let mut v = [0.0f64; INPUT_DIM];
        for x in v.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for row in &rows {
            let proj: f64 = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            for (x, r) in v.iter_mut().zip(row.iter()) {
                *x -= proj * r;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, retry
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        rows.push(v);
    }
    rows.concat()
}

/// Weighted mixture of tasks used as a training corpus.
#[derive(Debug, Clone)]
pub struct Mixture {
    components: Vec<(ToyTask, f64)>,
}

impl Mixture {
    pub fn new(components: Vec<(ToyTask, f64)>) -> Result<Mixture> {
        if components.is_empty() {
            return Err(Error::InvalidParameter(
                "mixture needs at least one component".to_string(),
            ));
        }
        let total: f64 = components.iter().map(|(_, w)| w).sum();
        if !(total.is_finite() && total > 0.0) || components.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::InvalidParameter(
                "mixture weights must be non-negative with a positive sum".to_string(),
            ));
        }
        let components = components
            .into_iter()
            .map(|(t, w)| (t, w / total))
            .collect();
        Ok(Mixture { components })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> ([f64; INPUT_DIM], f64) {
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        for (task, weight) in &self.components {
            cumulative += weight;
            if draw < cumulative {
                return task.sample_one(rng);
            }
        }
        self.components.last().unwrap().0.sample_one(rng)
    }
}

/// Mean squared error of a model on a task over a fixed seeded
/// evaluation set.
pub fn evaluate(model: &ToyModel, task: &ToyTask, n_samples: usize, seed: u64) -> Result<f64> {
    evaluate_with(|x| model.predict(x), task, n_samples, seed)
}

/// Same as [`evaluate`] for an arbitrary predictor.
pub fn evaluate_with(
    predict: impl Fn(&[f64; INPUT_DIM]) -> f64,
    task: &ToyTask,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter(
            "n_samples must be positive".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for _ in 0..n_samples {
        let (x, y) = task.sample_one(&mut rng);
        let err = predict(&x) - y;
        total += err * err;
    }
    Ok(total / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_language_is_unrotated() {
        let set = TaskSet::generate(123, 3, 2).unwrap();
        let task = set.ability_task(0, 0);
        assert_eq!(task.rotation(), identity().as_slice());
    }

    #[test]
    fn same_seed_gives_identical_rotations() {
        let a = TaskSet::generate(9, 4, 2).unwrap();
        let b = TaskSet::generate(9, 4, 2).unwrap();
        for l in 0..4 {
            assert_eq!(
                a.ability_task(0, l).rotation(),
                b.ability_task(0, l).rotation()
            );
        }
    }

    #[test]
    fn rotations_are_orthogonal_for_100_seeds() {
        for seed in 0..100 {
            let set = TaskSet::generate(seed, 2, 1).unwrap();
            let q = set.ability_task(0, 1).rotation().to_vec();
            // QᵀQ deviation from the identity.
            for i in 0..INPUT_DIM {
                for j in 0..INPUT_DIM {
                    let mut dot = 0.0f64;
                    for r in 0..INPUT_DIM {
                        dot += q[r * INPUT_DIM + i] * q[r * INPUT_DIM + j];
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (dot - expect).abs() < 1e-5,
                        "seed {seed}: QᵀQ[{i}][{j}] = {dot}"
                    );
                }
            }
        }
    }

    #[test]
    fn sum_of_squares_is_rotation_invariant() {
        let set = TaskSet::generate(5, 3, 2).unwrap();
        let rotated = set.ability_task(0, 2);
        let reference = set.ability_task(0, 0);
        let x = [0.3, -1.2, 0.8, 0.0, 2.2, -0.5, 1.1, -0.9];
        assert!((rotated.target_of(&x) - reference.target_of(&x)).abs() < 1e-9);
    }

    #[test]
    fn max_coordinate_depends_on_language() {
        let set = TaskSet::generate(5, 2, 2).unwrap();
        let rotated = set.ability_task(1, 1);
        let reference = set.ability_task(1, 0);
        let x = [0.3, -1.2, 0.8, 0.0, 2.2, -0.5, 1.1, -0.9];
        assert!((rotated.target_of(&x) - reference.target_of(&x)).abs() > 1e-6);
    }

    #[test]
    fn gen_tasks_covers_every_pair() {
        let tasks = gen_tasks(1, 3, 2).unwrap();
        assert_eq!(tasks.len(), 6);
        assert!(tasks
            .iter()
            .any(|t| t.language == 2 && t.target == Target::Ability(1)));
    }

    #[test]
    fn oracle_predictor_has_zero_mse() {
        let set = TaskSet::generate(77, 2, 2).unwrap();
        let task = set.ability_task(0, 1);
        let oracle = set.ability_task(0, 1);
        let mse = evaluate_with(|x| oracle.target_of(x), &task, 1000, 5).unwrap();
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn constant_zero_model_on_sum_of_squares_matches_chi_square_moments() {
        // E[(Σ x_j²)²] for x ~ N(0, I₈) is E[(χ²₈)²] = 8² + 2·8 = 80.
        let set = TaskSet::generate(31, 1, 1).unwrap();
        let task = set.ability_task(0, 0);
        let mse = evaluate(&ToyModel::zeros(), &task, 100_000, 99).unwrap();
        assert!(
            (mse - 80.0).abs() < 0.05 * 80.0,
            "mse {mse} not within 5% of 80"
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let set = TaskSet::generate(3, 2, 1).unwrap();
        let task = set.ability_task(0, 1);
        let model = ToyModel::init(12);
        let a = evaluate(&model, &task, 500, 7).unwrap();
        let b = evaluate(&model, &task, 500, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        let set = TaskSet::generate(1, 1, 1).unwrap();
        assert!(Mixture::new(vec![]).is_err());
        assert!(Mixture::new(vec![(set.ability_task(0, 0), -1.0)]).is_err());
        assert!(Mixture::new(vec![(set.ability_task(0, 0), 0.0)]).is_err());
    }
}
