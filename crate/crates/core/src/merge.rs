//! Linear (model soup) and spherical linear interpolation merges over whole
//! checkpoints, applied tensor by tensor.
//!
//! All arithmetic runs on the f32 working representation with f64
//! accumulators; results are narrowed back to the first input's storage dtype.
//!
//! Lambda convention for two inputs: `t` (or a scalar `lambda` in a recipe) is
//! the weight of the LAST-listed input and `1 - t` the weight of the first.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_store::{
    self, validate_compatibility, CheckpointError, CompatReport, DTypePolicy, Tensor, TensorMap, WriteOptions,
};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("inputs are not merge-compatible: {0}")]
    IncompatibleInputs(CompatReport),
    #[error("invalid merge weights: {0}")]
    InvalidWeights(String),
    #[error("invalid slerp options: {0}")]
    InvalidOptions(String),
    #[error("slerp merges exactly two inputs, got {0}")]
    SlerpArity(usize),
    #[error(
        "tensor {name:?}: vectors are antipodal (cos = {cos:.6}); set antipodal_policy = \"flip_sign\" to merge anyway"
    )]
    AntipodalTensors { name: String, cos: f64 },
    #[error("tensor {name:?}: length mismatch ({left} vs {right})")]
    LengthMismatch { name: String, left: usize, right: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Linear,
    Slerp,
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMethod::Linear => "linear",
            MergeMethod::Slerp => "slerp",
        })
    }
}

/// Per-input merge coefficients: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaWeights(Vec<f64>);

impl LambdaWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self, MergeError> {
        if lambdas.len() < 2 {
            return Err(MergeError::InvalidWeights(format!(
                "need at least two weights, got {}",
                lambdas.len()
            )));
        }
        if let Some(bad) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(MergeError::InvalidWeights(format!(
                "weight {bad} is negative or non-finite"
            )));
        }
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MergeError::InvalidWeights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(lambdas))
    }

    /// `[1 - t, t]`: `t` weights the second (last) input.
    pub fn pair(t: f64) -> Result<Self, MergeError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(MergeError::InvalidWeights(format!("t = {t} outside [0, 1]")));
        }
        Self::new(vec![1.0 - t, t])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntipodalPolicy {
    #[default]
    Error,
    FlipSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleScope {
    #[default]
    PerTensor,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlerpOptions {
    pub parallel_epsilon: f64,
    pub antipodal_policy: AntipodalPolicy,
    pub angle_scope: AngleScope,
}

impl Default for SlerpOptions {
    fn default() -> Self {
        Self {
            parallel_epsilon: 1e-8,
            antipodal_policy: AntipodalPolicy::Error,
            angle_scope: AngleScope::PerTensor,
        }
    }
}

impl SlerpOptions {
    pub fn validate(&self) -> Result<(), MergeError> {
        if !(self.parallel_epsilon > 0.0 && self.parallel_epsilon < 1.0) {
            return Err(MergeError::InvalidOptions(format!(
                "parallel_epsilon = {} must lie in (0, 1)",
                self.parallel_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    LinearParallel,
    LinearZeroNorm,
    SignFlipped,
}

/// Angle and fallback taken for one interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlerpStep {
    /// Radians, in `[0, pi]`.
    pub omega: f64,
    pub fallback: Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlerpRecord {
    pub name: String,
    pub omega: f64,
    pub fallback: Fallback,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SlerpDiagnostics {
    pub records: Vec<SlerpRecord>,
}

impl SlerpDiagnostics {
    pub fn max_omega(&self) -> f64 {
        self.records.iter().map(|r| r.omega).fold(0.0, f64::max)
    }
}

/// `c0 * u + c1 * v` with zero coefficients skipped, so endpoint merges
/// reproduce the selected input bit for bit.
fn combine(c0: f64, u: &[f32], c1: f64, v: &[f32]) -> Vec<f32> {
    match (c0 == 0.0, c1 == 0.0) {
        (_, true) => u.iter().map(|&a| (c0 * a as f64) as f32).collect(),
        (true, false) => v.iter().map(|&b| (c1 * b as f64) as f32).collect(),
        _ => u
            .iter()
            .zip(v)
            .map(|(&a, &b)| (c0 * a as f64 + c1 * b as f64) as f32)
            .collect(),
    }
}

struct Geometry {
    dot: f64,
    norm_u: f64,
    norm_v: f64,
}

fn geometry<'a>(pairs: impl Iterator<Item = (&'a [f32], &'a [f32])>) -> Geometry {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (u, v) in pairs {
        for (&a, &b) in u.iter().zip(v) {
            let (a, b) = (a as f64, b as f64);
            dot += a * b;
            nu += a * a;
            nv += b * b;
        }
    }
    Geometry {
        dot,
        norm_u: nu.sqrt(),
        norm_v: nv.sqrt(),
    }
}

/// Interpolation coefficients `(c_u, c_v, step)` for weight `t` on `v`.
/// `sign` is -1 when `v` must be negated before combining.
struct Plan {
    c_u: f64,
    c_v: f64,
    sign: f64,
    step: SlerpStep,
}

fn plan(g: &Geometry, t: f64, opts: &SlerpOptions, name: &str) -> Result<Plan, MergeError> {
    let linear = |fallback, omega, sign| Plan {
        c_u: 1.0 - t,
        c_v: t,
        sign,
        step: SlerpStep { omega, fallback },
    };
    if g.norm_u == 0.0 || g.norm_v == 0.0 {
        return Ok(linear(Fallback::LinearZeroNorm, 0.0, 1.0));
    }
    let mut cos = (g.dot / (g.norm_u * g.norm_v)).clamp(-1.0, 1.0);
    let mut sign = 1.0;
    let mut flipped = false;
    if cos <= -1.0 + opts.parallel_epsilon {
        if t == 0.0 || t == 1.0 {
            // endpoints stay well defined for opposite vectors
            return Ok(linear(Fallback::None, cos.acos(), 1.0));
        }
        match opts.antipodal_policy {
            AntipodalPolicy::Error => {
                return Err(MergeError::AntipodalTensors {
                    name: name.to_string(),
                    cos,
                })
            }
            AntipodalPolicy::FlipSign => {
                cos = -cos;
                sign = -1.0;
                flipped = true;
            }
        }
    }
    let omega = cos.acos();
    if 1.0 - cos < opts.parallel_epsilon {
        let fallback = if flipped {
            Fallback::SignFlipped
        } else {
            Fallback::LinearParallel
        };
        return Ok(linear(fallback, omega, sign));
    }
    let sin_omega = omega.sin();
    Ok(Plan {
        c_u: ((1.0 - t) * omega).sin() / sin_omega,
        c_v: (t * omega).sin() / sin_omega,
        sign,
        step: SlerpStep {
            omega,
            fallback: if flipped { Fallback::SignFlipped } else { Fallback::None },
        },
    })
}

fn apply(plan: &Plan, u: &[f32], v: &[f32]) -> Vec<f32> {
    if plan.sign < 0.0 {
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        combine(plan.c_u, u, plan.c_v, &neg)
    } else {
        combine(plan.c_u, u, plan.c_v, v)
    }
}

fn check_t(t: f64) -> Result<(), MergeError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MergeError::InvalidWeights(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// Spherical interpolation between two flat vectors; `t` is the weight of `v`.
pub fn slerp_vector(u: &[f32], v: &[f32], t: f64, opts: &SlerpOptions) -> Result<(Vec<f32>, SlerpStep), MergeError> {
    opts.validate()?;
    check_t(t)?;
    if u.len() != v.len() {
        return Err(MergeError::LengthMismatch {
            name: String::new(),
            left: u.len(),
            right: v.len(),
        });
    }
    let g = geometry(std::iter::once((u, v)));
    let p = plan(&g, t, opts, "")?;
    Ok((apply(&p, u, v), p.step))
}

fn ensure_compatible(inputs: &[&TensorMap]) -> Result<(), MergeError> {
    let first = inputs[0];
    for other in &inputs[1..] {
        let report = validate_compatibility(first, other);
        if !report.is_compatible() {
            return Err(MergeError::IncompatibleInputs(report));
        }
    }
    Ok(())
}

fn provenance(out: &mut TensorMap, method: MergeMethod, lambdas: &[f64]) {
    let meta = out.metadata_mut();
    meta.insert("merge.method".into(), method.to_string());
    meta.insert(
        "merge.lambdas".into(),
        serde_json::to_string(lambdas).expect("f64 list serializes"),
    );
}

/// Model soup: `out = sum_i lambda_i * input_i`, element by element.
pub fn linear_merge(inputs: &[&TensorMap], weights: &LambdaWeights) -> Result<TensorMap, MergeError> {
    if inputs.len() != weights.len() {
        return Err(MergeError::InvalidWeights(format!(
            "{} inputs but {} weights",
            inputs.len(),
            weights.len()
        )));
    }
    ensure_compatible(inputs)?;
    let lambdas = weights.as_slice();
    let names: Vec<&str> = inputs[0].names().collect();
    let merged: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|&name| {
            let first = inputs[0].get(name).expect("compatible");
            let mut acc = vec![-0.0f64; first.numel()];
            for (input, &lambda) in inputs.iter().zip(lambdas) {
                if lambda == 0.0 {
                    continue;
                }
                for (slot, x) in acc.iter_mut().zip(input.get(name).expect("compatible").to_f32()) {
                    *slot += lambda * x as f64;
                }
            }
            let values: Vec<f32> = acc.into_iter().map(|x| x as f32).collect();
            let tensor = Tensor::from_f32_as(first.dtype(), first.shape().to_vec(), &values)?;
            Ok((name.to_string(), tensor))
        })
        .collect::<Result<_, CheckpointError>>()?;

    let mut out = TensorMap::new();
    *out.metadata_mut() = inputs[0].metadata().clone();
    for (name, t) in merged {
        out.insert(name, t);
    }
    provenance(&mut out, MergeMethod::Linear, lambdas);
    Ok(out)
}

/// SLerp between two checkpoints; `t` weights `b`.
pub fn slerp_merge(
    a: &TensorMap,
    b: &TensorMap,
    t: f64,
    opts: &SlerpOptions,
) -> Result<(TensorMap, SlerpDiagnostics), MergeError> {
    opts.validate()?;
    check_t(t)?;
    ensure_compatible(&[a, b])?;

    let names: Vec<&str> = a.names().collect();
    let decoded: Vec<(Vec<f32>, Vec<f32>)> = names
        .par_iter()
        .map(|&n| (a.get(n).unwrap().to_f32(), b.get(n).unwrap().to_f32()))
        .collect();

    let global = match opts.angle_scope {
        AngleScope::PerTensor => None,
        AngleScope::Global => {
            let g = geometry(decoded.iter().map(|(u, v)| (u.as_slice(), v.as_slice())));
            Some(plan(&g, t, opts, "<global>")?)
        }
    };

    let results: Vec<(Tensor, SlerpRecord)> = names
        .par_iter()
        .zip(decoded.par_iter())
        .map(|(&name, (u, v))| {
            let local;
            let p = match &global {
                Some(p) => p,
                None => {
                    local = plan(&geometry(std::iter::once((u.as_slice(), v.as_slice()))), t, opts, name)?;
                    &local
                }
            };
            let values = apply(p, u, v);
            let src = a.get(name).unwrap();
            let tensor = Tensor::from_f32_as(src.dtype(), src.shape().to_vec(), &values)?;
            Ok((
                tensor,
                SlerpRecord {
                    name: name.to_string(),
                    omega: p.step.omega,
                    fallback: p.step.fallback,
                },
            ))
        })
        .collect::<Result<_, MergeError>>()?;

    let mut out = TensorMap::new();
    *out.metadata_mut() = a.metadata().clone();
    let mut diagnostics = SlerpDiagnostics::default();
    for (name, (tensor, record)) in names.iter().zip(results) {
        out.insert(*name, tensor);
        diagnostics.records.push(record);
    }
    provenance(&mut out, MergeMethod::Slerp, &[1.0 - t, t]);
    out.metadata_mut().insert(
        "merge.slerp.angle_scope".into(),
        match opts.angle_scope {
            AngleScope::PerTensor => "per_tensor",
            AngleScope::Global => "global",
        }
        .into(),
    );
    Ok((out, diagnostics))
}

/// Declarative merge job, read from a JSON recipe file.
///
/// ```json
/// {
///   "inputs": ["math.safetensors", "instruct.safetensors"],
///   "method": "slerp",
///   "lambda": 0.4,
///   "slerp": {"parallel_epsilon": 1e-8, "antipodal_policy": "error", "angle_scope": "per_tensor"},
///   "output": "merged.safetensors",
///   "dtype_policy": "preserve"
/// }
/// ```
///
/// `lambda` is the weight of the LAST input (two inputs only); `lambdas`
/// lists one weight per input instead. Relative paths resolve against the
/// recipe file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub inputs: Vec<PathBuf>,
    pub method: MergeMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub slerp: SlerpOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dtype_policy: RecipeDTypePolicy,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeDTypePolicy {
    #[default]
    Preserve,
    ForceF32,
}

impl From<RecipeDTypePolicy> for DTypePolicy {
    fn from(p: RecipeDTypePolicy) -> Self {
        match p {
            RecipeDTypePolicy::Preserve => DTypePolicy::Preserve,
            RecipeDTypePolicy::ForceF32 => DTypePolicy::ForceF32,
        }
    }
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("cannot read recipe {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse recipe {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid recipe: {0}")]
    Invalid(String),
    #[error(transparent)]
    Merge(#[from] MergeError),
}

impl MergeRecipe {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RecipeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RecipeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut recipe: MergeRecipe = serde_json::from_str(&text).map_err(|source| RecipeError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(base) = path.parent() {
            for input in &mut recipe.inputs {
                if input.is_relative() {
                    *input = base.join(&*input);
                }
            }
            if let Some(out) = &mut recipe.output {
                if out.is_relative() {
                    *out = base.join(&*out);
                }
            }
        }
        Ok(recipe)
    }

    /// Resolved per-input weights.
    pub fn weights(&self) -> Result<LambdaWeights, RecipeError> {
        match (&self.lambda, &self.lambdas) {
            (Some(_), Some(_)) => Err(RecipeError::Invalid(
                "give either `lambda` or `lambdas`, not both".into(),
            )),
            (None, None) => Err(RecipeError::Invalid("missing `lambda` or `lambdas`".into())),
            (Some(t), None) => {
                if self.inputs.len() != 2 {
                    return Err(RecipeError::Invalid(format!(
                        "scalar `lambda` needs exactly two inputs, got {}",
                        self.inputs.len()
                    )));
                }
                Ok(LambdaWeights::pair(*t)?)
            }
            (None, Some(ls)) => {
                if ls.len() != self.inputs.len() {
                    return Err(RecipeError::Invalid(format!(
                        "{} inputs but {} lambdas",
                        self.inputs.len(),
                        ls.len()
                    )));
                }
                Ok(LambdaWeights::new(ls.clone())?)
            }
        }
    }

    pub fn with_lambda(&self, t: f64) -> Self {
        Self {
            lambda: Some(t),
            lambdas: None,
            ..self.clone()
        }
    }

    pub fn write_options(&self) -> WriteOptions {
        WriteOptions {
            dtype_policy: self.dtype_policy.into(),
            strict: self.strict,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub merged: TensorMap,
    pub diagnostics: Option<SlerpDiagnostics>,
}

/// Merges already-loaded inputs according to `recipe`'s method and weights.
pub fn merge_maps(recipe: &MergeRecipe, inputs: &[&TensorMap]) -> Result<MergeOutcome, RecipeError> {
    let weights = recipe.weights()?;
    if inputs.len() != weights.len() {
        return Err(RecipeError::Invalid(format!(
            "{} loaded inputs but {} weights",
            inputs.len(),
            weights.len()
        )));
    }
    match recipe.method {
        MergeMethod::Linear => Ok(MergeOutcome {
            merged: linear_merge(inputs, &weights)?,
            diagnostics: None,
        }),
        MergeMethod::Slerp => {
            if inputs.len() != 2 {
                return Err(MergeError::SlerpArity(inputs.len()).into());
            }
            let (merged, diag) = slerp_merge(inputs[0], inputs[1], weights.as_slice()[1], &recipe.slerp)?;
            Ok(MergeOutcome {
                merged,
                diagnostics: Some(diag),
            })
        }
    }
}

/// Loads the recipe inputs and merges them; nothing is written.
pub fn run_recipe(recipe: &MergeRecipe) -> Result<MergeOutcome, RecipeError> {
    let maps = recipe
        .inputs
        .iter()
        .map(tensor_store::read_checkpoint)
        .collect::<Result<Vec<_>, _>>()
        .map_err(MergeError::from)?;
    let refs: Vec<&TensorMap> = maps.iter().collect();
    merge_maps(recipe, &refs)
}
