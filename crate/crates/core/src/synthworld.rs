//! Synthetic compositional concept world: attribute primitives, concept
//! prototypes composed from sparse primitive mixtures, noisy region
//! features, and the heterogeneous sequential-task benchmark built from
//! them.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, normalize};
use crate::textmodel::tokenizer::{tokenize, TokenSeq};
use crate::util::{b64vec, derive_rng, fnv1a64};

/// Which concept set a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Common,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Unit-norm attribute vectors the concept prototypes are composed from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBasis {
    primitives: Vec<f64>,
    k: usize,
    d_v: usize,
    pub seed: u64,
}

impl AttributeBasis {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.primitives[j * self.d_v..(j + 1) * self.d_v]
    }
}

/// A named concept: its frozen visual prototype and its token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub name: String,
    #[serde(with = "b64vec")]
    pub prototype: Vec<f64>,
    pub tokens: TokenSeq,
    pub pool: Pool,
    pub task_index: Option<usize>,
}

/// One frozen region feature with its ground-truth concept label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualSample {
    #[serde(with = "b64vec")]
    pub feature: Vec<f64>,
    pub label: String,
    pub split: Split,
}

/// One injection stage: its concepts and their train/test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    pub concepts: Vec<ConceptRecord>,
    pub train: Vec<VisualSample>,
    pub test: Vec<VisualSample>,
}

/// Generation parameters echoed into the serialized benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub schedule: Vec<usize>,
    pub common_size: usize,
    pub per_concept_train: usize,
    pub per_concept_test: usize,
    pub sigma: f64,
    pub k_primitives: usize,
    pub s_sparsity: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            schedule: vec![25, 6, 4, 28, 8, 25, 18],
            common_size: 100,
            per_concept_train: 20,
            per_concept_test: 20,
            sigma: 0.25,
            k_primitives: 32,
            s_sparsity: 3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("schedule must list at least one task".to_string()));
        }
        if let Some(i) = self.schedule.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("schedule[{i}] must be at least 1")));
        }
        if self.common_size == 0 {
            return Err(Error::Config("common_size must be at least 1".to_string()));
        }
        if self.per_concept_train == 0 || self.per_concept_test == 0 {
            return Err(Error::Config(
                "per_concept_train and per_concept_test must be at least 1".to_string(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if self.k_primitives < 2 {
            return Err(Error::Config(format!(
                "k_primitives must be at least 2, got {}",
                self.k_primitives
            )));
        }
        if self.s_sparsity == 0 || self.s_sparsity > self.k_primitives {
            return Err(Error::Config(format!(
                "s_sparsity must lie in 1..={}, got {}",
                self.k_primitives, self.s_sparsity
            )));
        }
        Ok(())
    }

    pub fn total_novel(&self) -> usize {
        self.schedule.iter().sum()
    }
}

/// The full frozen benchmark. Serializes to one JSON document with
/// bit-exact feature round-trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub config: WorldConfig,
    pub d_v: usize,
    pub seed: u64,
    pub common_seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub common_pool: Vec<ConceptRecord>,
    pub common_test: Vec<VisualSample>,
}

pub fn build_attribute_basis(seed: u64, k: usize, d_v: usize) -> Result<AttributeBasis> {
    if k < 2 {
        return Err(Error::Config(format!("primitive count must be at least 2, got {k}")));
    }
    if d_v < 2 {
        return Err(Error::Config(format!("feature dimension must be at least 2, got {d_v}")));
    }
    let mut rng = derive_rng(seed, "attribute-basis");
    let mut primitives = Vec::with_capacity(k * d_v);
    for _ in 0..k {
        let raw: Vec<f64> = (0..d_v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        primitives.extend_from_slice(&normalize(&raw)?);
    }
    Ok(AttributeBasis {
        primitives,
        k,
        d_v,
        seed,
    })
}

/// Normalized weighted sum of the given (index, weight) primitive pairs.
pub(crate) fn compose_prototype(basis: &AttributeBasis, parts: &[(usize, f64)]) -> Result<Vec<f64>> {
    let mut proto = vec![0.0; basis.d_v];
    for &(j, w) in parts {
        if j >= basis.k {
            return Err(Error::Structural(format!(
                "primitive index {j} out of range for {} primitives",
                basis.k
            )));
        }
        let row = basis.row(j);
        for (p, &r) in proto.iter_mut().zip(row) {
            *p += w * r;
        }
    }
    normalize(&proto)
}

/// Compose one concept: s distinct primitives with positive weights drawn
/// from the concept's own seeded stream, plus its token sequence.
#[allow(clippy::too_many_arguments)]
pub fn make_concept(
    name: &str,
    basis: &AttributeBasis,
    s: usize,
    v_tok: usize,
    max_tokens: usize,
    seed: u64,
    pool: Pool,
    task_index: Option<usize>,
) -> Result<ConceptRecord> {
    if s == 0 || s > basis.k {
        return Err(Error::Config(format!(
            "sparsity must lie in 1..={}, got {s}",
            basis.k
        )));
    }
    let mut rng = derive_rng(seed, &format!("concept:{name}"));
    let mut indices: Vec<usize> = rand::seq::index::sample(&mut rng, basis.k, s).into_vec();
    indices.sort_unstable();
    // weights bounded away from zero so every chosen primitive contributes
    let parts: Vec<(usize, f64)> = indices
        .into_iter()
        .map(|j| (j, rng.random_range(0.5..1.0)))
        .collect();
    Ok(ConceptRecord {
        name: name.to_string(),
        prototype: compose_prototype(basis, &parts)?,
        tokens: tokenize(name, v_tok, max_tokens)?,
        pool,
        task_index,
    })
}

/// Draw n noisy region features around the concept prototype. Noise is
/// gaussian with per-component scale sigma/sqrt(D_v), so the expected
/// cosine to the prototype is ~1/sqrt(1 + sigma^2*(1-1/D_v)) independent of
/// dimension; sigma = 0 returns the prototype itself.
pub fn sample_region_features(
    concept: &ConceptRecord,
    n: usize,
    sigma: f64,
    split: Split,
    seed: u64,
) -> Result<Vec<VisualSample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".to_string()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let split_tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut rng = derive_rng(seed, &format!("samples:{}:{split_tag}", concept.name));
    let d = concept.prototype.len();
    let scale = sigma / (d as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let feature = if sigma == 0.0 {
            concept.prototype.clone()
        } else {
            let noisy: Vec<f64> = concept
                .prototype
                .iter()
                .map(|&p| p + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            normalize(&noisy)?
        };
        out.push(VisualSample {
            feature,
            label: concept.name.clone(),
            split,
        });
    }
    Ok(out)
}

/// Generate the full benchmark. The common pool draws from `common_seed`
/// so it can be varied independently of the task concepts; by default both
/// seeds are equal.
pub fn generate_benchmark(
    config: &WorldConfig,
    d_v: usize,
    v_tok: usize,
    max_tokens: usize,
    seed: u64,
    common_seed: u64,
) -> Result<Benchmark> {
    config.validate()?;
    let basis = build_attribute_basis(seed, config.k_primitives, d_v)?;

    let mut tasks = Vec::with_capacity(config.schedule.len());
    for (t, &size) in config.schedule.iter().enumerate() {
        let task_index = t + 1;
        let mut concepts = Vec::with_capacity(size);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..size {
            let name = format!("task{task_index}_concept{i}");
            let c = make_concept(
                &name,
                &basis,
                config.s_sparsity,
                v_tok,
                max_tokens,
                seed,
                Pool::Novel,
                Some(task_index),
            )?;
            train.extend(sample_region_features(
                &c,
                config.per_concept_train,
                config.sigma,
                Split::Train,
                seed,
            )?);
            test.extend(sample_region_features(
                &c,
                config.per_concept_test,
                config.sigma,
                Split::Test,
                seed,
            )?);
            concepts.push(c);
        }
        tasks.push(TaskSpec {
            task_index,
            concepts,
            train,
            test,
        });
    }

    let mut common_pool = Vec::with_capacity(config.common_size);
    let mut common_test = Vec::new();
    for i in 0..config.common_size {
        let name = format!("common{i}");
        let c = make_concept(
            &name,
            &basis,
            config.s_sparsity,
            v_tok,
            max_tokens,
            common_seed,
            Pool::Common,
            None,
        )?;
        common_test.extend(sample_region_features(
            &c,
            config.per_concept_test,
            config.sigma,
            Split::Test,
            common_seed,
        )?);
        common_pool.push(c);
    }

    let benchmark = Benchmark {
        config: config.clone(),
        d_v,
        seed,
        common_seed,
        tasks,
        common_pool,
        common_test,
    };
    benchmark.validate()?;
    Ok(benchmark)
}

impl Benchmark {
    /// Structural re-check of every invariant: disjoint concept names, unit
    /// norms, label membership, sample finiteness, schedule agreement.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.tasks.len() != self.config.schedule.len() {
            return Err(Error::Structural(format!(
                "benchmark has {} tasks but schedule lists {}",
                self.tasks.len(),
                self.config.schedule.len()
            )));
        }
        let mut names: HashSet<&str> = HashSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.task_index != t + 1 {
                return Err(Error::Structural(format!(
                    "task at position {t} carries index {}",
                    task.task_index
                )));
            }
            if task.concepts.len() != self.config.schedule[t] {
                return Err(Error::Structural(format!(
                    "task {} has {} concepts, schedule says {}",
                    task.task_index,
                    task.concepts.len(),
                    self.config.schedule[t]
                )));
            }
            let mut task_names: HashSet<&str> = HashSet::new();
            for c in &task.concepts {
                check_concept(c, self.d_v)?;
                if c.pool != Pool::Novel || c.task_index != Some(task.task_index) {
                    return Err(Error::Structural(format!(
                        "concept '{}' carries wrong pool or task index",
                        c.name
                    )));
                }
                if !names.insert(&c.name) {
                    return Err(Error::Structural(format!("duplicate concept name '{}'", c.name)));
                }
                task_names.insert(&c.name);
            }
            for (what, samples, expect) in [
                ("train", &task.train, task.concepts.len() * self.config.per_concept_train),
                ("test", &task.test, task.concepts.len() * self.config.per_concept_test),
            ] {
                if samples.len() != expect {
                    return Err(Error::Structural(format!(
                        "task {} has {} {what} samples, expected {expect}",
                        task.task_index,
                        samples.len()
                    )));
                }
                for s in samples.iter() {
                    check_sample(s, self.d_v)?;
                    if !task_names.contains(s.label.as_str()) {
                        return Err(Error::Structural(format!(
                            "sample labeled '{}' does not belong to task {}",
                            s.label, task.task_index
                        )));
                    }
                }
            }
        }
        let mut common_names: HashSet<&str> = HashSet::new();
        for c in &self.common_pool {
            check_concept(c, self.d_v)?;
            if c.pool != Pool::Common || c.task_index.is_some() {
                return Err(Error::Structural(format!(
                    "common concept '{}' carries wrong pool or task index",
                    c.name
                )));
            }
            if !names.insert(&c.name) {
                return Err(Error::Structural(format!("duplicate concept name '{}'", c.name)));
            }
            common_names.insert(&c.name);
        }
        if self.common_pool.len() != self.config.common_size {
            return Err(Error::Structural(format!(
                "common pool has {} concepts, config says {}",
                self.common_pool.len(),
                self.config.common_size
            )));
        }
        let expect = self.config.common_size * self.config.per_concept_test;
        if self.common_test.len() != expect {
            return Err(Error::Structural(format!(
                "common pool has {} test samples, expected {expect}",
                self.common_test.len()
            )));
        }
        for s in &self.common_test {
            check_sample(s, self.d_v)?;
            if !common_names.contains(s.label.as_str()) {
                return Err(Error::Structural(format!(
                    "common test sample labeled '{}' is not a common concept",
                    s.label
                )));
            }
        }
        // Distinct concepts must stay distinguishable on the text side, or
        // classification over them is decided by name tie-breaks alone.
        let mut token_owners: BTreeMap<&[u32], &str> = BTreeMap::new();
        for c in self.concepts() {
            if let Some(prev) = token_owners.insert(&c.tokens.ids, &c.name) {
                return Err(Error::Config(format!(
                    "concepts '{prev}' and '{}' tokenize to the same sequence; \
                     raise v_tok or max_tokens",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// Every concept in the benchmark: novel tasks in order, then common.
    pub fn concepts(&self) -> impl Iterator<Item = &ConceptRecord> {
        self.tasks
            .iter()
            .flat_map(|t| t.concepts.iter())
            .chain(self.common_pool.iter())
    }

    /// FNV-1a-64 of the canonical JSON serialization; binds checkpoints and
    /// reports to the exact benchmark they were produced from.
    pub fn checksum(&self) -> Result<u64> {
        let bytes = serde_json::to_vec(self)
            .map_err(|e| Error::Structural(format!("benchmark serialization failed: {e}")))?;
        Ok(fnv1a64(&bytes))
    }

    pub fn task(&self, task_index: usize) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_index == task_index)
            .ok_or_else(|| Error::Protocol(format!("benchmark has no task {task_index}")))
    }

    pub fn total_novel_concepts(&self) -> usize {
        self.tasks.iter().map(|t| t.concepts.len()).sum()
    }
}

fn check_concept(c: &ConceptRecord, d_v: usize) -> Result<()> {
    if c.prototype.len() != d_v {
        return Err(Error::Structural(format!(
            "concept '{}' prototype has {} dims, expected {d_v}",
            c.name,
            c.prototype.len()
        )));
    }
    if c.prototype.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("concept '{}' prototype is not finite", c.name)));
    }
    let norm = dot(&c.prototype, &c.prototype).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Structural(format!(
            "concept '{}' prototype norm {norm} is not unit",
            c.name
        )));
    }
    if c.tokens.is_all_pad() {
        return Err(Error::Structural(format!("concept '{}' has an all-pad token sequence", c.name)));
    }
    Ok(())
}

fn check_sample(s: &VisualSample, d_v: usize) -> Result<()> {
    if s.feature.len() != d_v {
        return Err(Error::Structural(format!(
            "sample labeled '{}' has {} dims, expected {d_v}",
            s.label,
            s.feature.len()
        )));
    }
    if s.feature.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("sample labeled '{}' is not finite", s.label)));
    }
    let norm = dot(&s.feature, &s.feature).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Structural(format!(
            "sample labeled '{}' has norm {norm}, expected unit",
            s.label
        )));
    }
    Ok(())
}

/// On-disk envelope for a benchmark: the build version rides along for
/// provenance but stays outside the benchmark identity ([`Benchmark::checksum`]
/// covers only the inner document, so the world remains a pure function of
/// its seeds).
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkFile {
    version: String,
    benchmark: Benchmark,
}

/// Serialize a benchmark to a JSON file.
pub fn save_benchmark(benchmark: &Benchmark, path: &std::path::Path) -> Result<()> {
    let file = BenchmarkFile {
        version: crate::util::BUILD_VERSION.to_string(),
        benchmark: benchmark.clone(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Structural(format!("benchmark serialization failed: {e}")))?;
    std::fs::write(path, json + "\n")
        .map_err(|e| Error::io_context(format!("cannot write '{}'", path.display()), e))
}

/// Read a benchmark back from a JSON file. Validation is left to the
/// consumer (every run entry point validates before use).
pub fn load_benchmark(path: &std::path::Path) -> Result<Benchmark> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io_context(format!("cannot read '{}'", path.display()), e))?;
    let file: BenchmarkFile = serde_json::from_str(&text).map_err(|e| {
        Error::Integrity(format!(
            "'{}' is not a benchmark file: {e}",
            path.display()
        ))
    })?;
    Ok(file.benchmark)
}
