//! Where operators and nested families come from: files, generators or built-ins.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use haarfactor::dyadic::{random_tree_family, tree_size, DyadicInterval, NestedFamily};
use haarfactor::operators::{parse_operator, random_operator, HaarOperator, OperatorKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builtin {
    Identity,
    Zero,
    /// Constant multiplier 1/2.
    Half,
    /// Multiplier with 1 on even levels and 0 on odd levels.
    EvenOdd,
}

pub fn builtin_operator(b: Builtin, depth: u32) -> HaarOperator {
    match b {
        Builtin::Identity => HaarOperator::identity(depth),
        Builtin::Zero => HaarOperator::zero(depth),
        Builtin::Half => HaarOperator::multiplier(depth, &vec![0.5; tree_size(depth)]),
        Builtin::EvenOdd => {
            let d: Vec<f64> = DyadicInterval::all_upto(depth)
                .map(|i| if i.level() % 2 == 0 { 1.0 } else { 0.0 })
                .collect();
            HaarOperator::multiplier(depth, &d)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum OperatorSource {
    File { path: PathBuf },
    Generated { generator: OperatorKind, depth: u32, seed: u64 },
    Builtin { name: Builtin, depth: u32 },
}

impl OperatorSource {
    pub fn load(&self) -> Result<HaarOperator> {
        match self {
            OperatorSource::File { path } => load_operator(path),
            OperatorSource::Generated { generator, depth, seed } => {
                Ok(random_operator(*depth, *generator, *seed))
            }
            OperatorSource::Builtin { name, depth } => Ok(builtin_operator(*name, *depth)),
        }
    }

    /// Same source with a different seed, for batch runs over generated operators.
    pub fn reseeded(&self, seed: u64) -> OperatorSource {
        match self {
            OperatorSource::Generated { generator, depth, .. } => {
                OperatorSource::Generated { generator: *generator, depth: *depth, seed }
            }
            other => other.clone(),
        }
    }
}

/// Reads a bare operator (JSON or binary) or the `result` of an output envelope.
pub fn load_operator(path: &Path) -> Result<HaarOperator> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match parse_operator(&bytes) {
        Ok(t) => Ok(t),
        Err(first) => {
            let v: Value = serde_json::from_slice(&bytes)
                .with_context(|| format!("{}: {first}", path.display()))?;
            let inner = v.get("result").cloned().context("no operator and no `result` field")?;
            serde_json::from_value(inner).with_context(|| format!("{}: bad operator", path.display()))
        }
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct OperatorArgs {
    /// Operator file (JSON rows, binary, or an output envelope of `randop`).
    #[arg(long, value_name = "FILE", conflicts_with_all = ["generate", "builtin"])]
    pub operator: Option<PathBuf>,
    /// Generator: multiplier, projection_like or diag_dominant:DELTA:NOISE (seeded by --seed).
    #[arg(long, value_name = "KIND", conflicts_with = "builtin")]
    pub generate: Option<OperatorKind>,
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
    /// Depth of generated or built-in operators.
    #[arg(long)]
    pub depth: Option<u32>,
}

impl OperatorArgs {
    pub fn given(&self) -> bool {
        self.operator.is_some() || self.generate.is_some() || self.builtin.is_some()
    }

    pub fn source(&self, seed: u64) -> Result<OperatorSource> {
        let depth = || self.depth.context("--depth is required with --generate or --builtin");
        if let Some(p) = &self.operator {
            return Ok(OperatorSource::File { path: p.clone() });
        }
        if let Some(g) = self.generate {
            return Ok(OperatorSource::Generated { generator: g, depth: check_depth(depth()?)?, seed });
        }
        if let Some(b) = self.builtin {
            return Ok(OperatorSource::Builtin { name: b, depth: check_depth(depth()?)? });
        }
        bail!("give one of --operator, --generate or --builtin")
    }
}

fn check_depth(d: u32) -> Result<u32> {
    if d > 12 {
        bail!("depth {d} is above the supported 12");
    }
    Ok(d)
}

#[derive(Deserialize)]
struct IntervalFamilyFile {
    resolution: u32,
    /// Orders of the member intervals.
    intervals: Vec<u64>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct FamilyArgs {
    /// Nested family file: `{"resolution", "sets"}` of leaf sets or `{"resolution", "intervals"}` of orders.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["full_tree", "random_tree"])]
    pub family: Option<PathBuf>,
    /// All dyadic intervals down to this depth.
    #[arg(long, value_name = "DEPTH", conflicts_with = "random_tree")]
    pub full_tree: Option<u32>,
    /// `[0,1)` plus each finer interval down to this depth with probability --keep.
    #[arg(long, value_name = "DEPTH")]
    pub random_tree: Option<u32>,
    #[arg(long, default_value_t = 0.6)]
    pub keep: f64,
}

impl FamilyArgs {
    pub fn load(&self, seed: u64) -> Result<NestedFamily> {
        if let Some(p) = &self.family {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            if let Ok(f) = serde_json::from_slice::<NestedFamily>(&bytes) {
                return Ok(f);
            }
            let f: IntervalFamilyFile =
                serde_json::from_slice(&bytes).with_context(|| format!("{}: bad family", p.display()))?;
            let ivs = f
                .intervals
                .iter()
                .map(|&o| DyadicInterval::from_order(o))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(NestedFamily::from_intervals(&ivs, f.resolution)?);
        }
        if let Some(d) = self.full_tree {
            let d = check_depth(d)?;
            let ivs: Vec<_> = DyadicInterval::all_upto(d).collect();
            return Ok(NestedFamily::from_intervals(&ivs, d)?);
        }
        if let Some(d) = self.random_tree {
            let d = check_depth(d)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return Ok(random_tree_family(d, self.keep, &mut rng));
        }
        bail!("give one of --family, --full-tree or --random-tree")
    }
}
