//! Run configuration files.
//!
//! ```toml
//! experiment = "construct"
//! mode = "exact"
//!
//! [system]
//! kind = "odometer"
//! n = 1
//!
//! [observable]
//! constant = "2"
//!
//! [sequence]
//! a = ["1/8", "1/16", "1/32"]
//! M = [4, 16, 64]
//! delta_rule = "a/100"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::SystemSpec;
use crate::observables::{BaseObservable, Cylinder, CylinderFunction, Mode, StepFunction, DEFAULT_CONFIDENCE};
use crate::scalar::{parse_rational, Rational};
use crate::slowdown::{DeltaRule, SlowSequence, DEFAULT_N_MAX, DEFAULT_SEPARATION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Construct,
    Verify,
    Lemma3,
    Defect,
    Remark2,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Construct => "construct",
            Experiment::Verify => "verify",
            Experiment::Lemma3 => "lemma3",
            Experiment::Defect => "defect",
            Experiment::Remark2 => "remark2",
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub kind: String,
    pub n: Option<usize>,
    pub alpha: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceBlock {
    pub cylinder: Vec<String>,
    pub value: String,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableBlock {
    pub constant: Option<String>,
    pub pieces: Option<Vec<PieceBlock>>,
    pub steps: Option<Vec<String>>,
    /// `f(x) = sum_{j <= binary} d_j 2^-j` over the first stream.
    pub binary: Option<u32>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceBlock {
    pub a: Vec<String>,
    #[serde(rename = "M")]
    pub m: Vec<u64>,
    pub eps: Option<String>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub tail: Option<String>,
    pub delta_rule: Option<String>,
    #[serde(rename = "N_max")]
    pub n_max: Option<u64>,
    pub max_refinement_bits: Option<u32>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Remark2Block {
    #[serde(rename = "N1")]
    pub n1: u64,
    pub a1: String,
    #[serde(rename = "R")]
    pub stretch: u64,
    #[serde(rename = "C")]
    pub separation: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma3Block {
    pub min_level: u32,
    pub max_level: u32,
    /// `own` puts the refinement digit just above the levels, `disjoint`
    /// puts it above every digit the observable reads.
    pub placement: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectCase {
    pub n: usize,
    pub h: u64,
    #[serde(rename = "N")]
    pub window: u64,
    pub a: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectBlock {
    pub cases: Vec<DefectCase>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub experiment: Option<Experiment>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub samples: Option<u64>,
    pub confidence: Option<f64>,
    pub system: SystemBlock,
    pub observable: Option<ObservableBlock>,
    pub sequence: Option<SequenceBlock>,
    pub remark2: Option<Remark2Block>,
    pub lemma3: Option<Lemma3Block>,
    pub defect: Option<DefectBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSettings {
    pub sequence: SlowSequence,
    pub floors: Vec<u64>,
    pub eps: Option<Rational>,
    pub delta_rule: DeltaRule,
    pub n_max: u64,
    pub max_refinement_bits: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Remark2Settings {
    pub n1: u64,
    pub a1: Rational,
    pub stretch: u64,
    pub separation: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma3Settings {
    pub min_level: u32,
    pub max_level: u32,
    pub own_digits: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectSettings {
    pub n: usize,
    pub h: u64,
    pub window: u64,
    pub a: Rational,
}

/// Validated configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: Mode,
    pub samples: u64,
    pub confidence: f64,
    pub spec: SystemSpec,
    pub observable: BaseObservable<Rational>,
    pub torus_observable: Option<BaseObservable<f64>>,
    pub sequence: Option<SequenceSettings>,
    pub remark2: Option<Remark2Settings>,
    pub lemma3: Option<Lemma3Settings>,
    pub defect: Vec<DefectSettings>,
    /// Hex SHA-256 of the configuration text.
    pub hash: String,
}

/// Command-line and environment overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub samples: Option<u64>,
}

fn rational(key: &str, s: &str) -> Result<Rational> {
    parse_rational(s).ok_or_else(|| Error::config(key, format!("`{s}` is not a rational (use \"p/q\")")))
}

/// Header of the table that encloses byte `offset`.
fn table_at(text: &str, offset: usize) -> Option<String> {
    let offset = offset.min(text.len());
    let line_end = text[offset..].find('\n').map(|i| offset + i).unwrap_or(text.len());
    text[..line_end]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

fn key_on_line(text: &str, offset: usize) -> Option<String> {
    let offset = offset.min(text.len());
    let line_start = text[..offset].rfind('\n').map(|i| i + 1).unwrap_or(0);
    let line = text[line_start..].lines().next()?;
    let (key, _) = line.split_once('=')?;
    Some(key.trim().to_string())
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            let start = e.span().map(|s| s.start).unwrap_or(0);
            let name = if msg.starts_with("unknown field") || msg.starts_with("missing field") {
                msg.split('`').nth(1).map(str::to_string)
            } else {
                key_on_line(text, start)
            };
            let key = match (table_at(text, start), name) {
                (Some(t), Some(n)) if n != t => format!("{t}.{n}"),
                (Some(t), _) => t,
                (None, Some(n)) => n,
                (None, None) => "config".to_string(),
            };
            Error::Config { key, msg }
        })?;
        let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
        Self::from_raw(raw, overrides, hash)
    }

    fn from_raw(raw: RawConfig, ov: &Overrides, hash: String) -> Result<Self> {
        let experiment = ov.experiment.or(raw.experiment).unwrap_or(Experiment::Construct);
        let seed = ov.seed.or(raw.seed).or(raw.system.seed).unwrap_or(0);
        let samples = ov.samples.or(raw.samples).unwrap_or(100_000);
        let confidence = raw.confidence.unwrap_or(DEFAULT_CONFIDENCE);
        if !(0.0..1.0).contains(&confidence) || confidence <= 0.0 {
            return Err(Error::config("confidence", "must lie in (0, 1)"));
        }
        let spec = match raw.system.kind.as_str() {
            "odometer" => {
                let n = raw.system.n.ok_or_else(|| Error::config("system.n", "missing"))?;
                if n == 0 || n > crate::window::MAX_DIM {
                    return Err(Error::config("system.n", format!("must lie in 1..={}", crate::window::MAX_DIM)));
                }
                if raw.system.alpha.is_some() {
                    return Err(Error::config("system.alpha", "only valid for the torus"));
                }
                SystemSpec::odometer(n)?
            }
            "torus" => {
                let alpha = raw.system.alpha.clone().ok_or_else(|| Error::config("system.alpha", "missing"))?;
                if let Some(n) = raw.system.n {
                    if n != alpha.len() {
                        return Err(Error::config("system.n", "must equal the number of frequencies"));
                    }
                }
                SystemSpec::torus(alpha).map_err(|e| Error::config("system.alpha", e.to_string()))?
            }
            other => return Err(Error::config("system.kind", format!("unknown kind `{other}`"))),
        }
        .with_seed(seed);
        let mode_name = ov.mode.clone().or(raw.mode.clone()).unwrap_or_else(|| "exact".into());
        let mode = match mode_name.as_str() {
            "exact" => {
                if !spec.is_odometer() {
                    return Err(Error::config("mode", "exact mode needs the odometer"));
                }
                Mode::Exact
            }
            "mc" => {
                if samples == 0 {
                    return Err(Error::config("samples", "must be positive"));
                }
                Mode::MonteCarlo { samples, confidence, seed }
            }
            other => return Err(Error::config("mode", format!("unknown mode `{other}`"))),
        };

        let sequence = raw.sequence.as_ref().map(parse_sequence).transpose()?;
        let obs = raw.observable.clone().unwrap_or_default();
        let (observable, torus_observable) = parse_observable(&obs, &spec)?;

        let remark2 = raw
            .remark2
            .as_ref()
            .map(|r| -> Result<Remark2Settings> {
                if r.n1 == 0 || r.stretch == 0 {
                    return Err(Error::config("remark2", "N1 and R must be positive"));
                }
                Ok(Remark2Settings {
                    n1: r.n1,
                    a1: rational("remark2.a1", &r.a1)?,
                    stretch: r.stretch,
                    separation: r.separation.unwrap_or(DEFAULT_SEPARATION),
                })
            })
            .transpose()?;
        let lemma3 = raw
            .lemma3
            .as_ref()
            .map(|l| -> Result<Lemma3Settings> {
                if l.min_level == 0 || l.min_level > l.max_level || l.max_level > 40 {
                    return Err(Error::config("lemma3", "need 1 <= min_level <= max_level <= 40"));
                }
                let own_digits = match l.placement.as_str() {
                    "own" => true,
                    "disjoint" => false,
                    other => return Err(Error::config("lemma3.placement", format!("unknown placement `{other}`"))),
                };
                Ok(Lemma3Settings { min_level: l.min_level, max_level: l.max_level, own_digits })
            })
            .transpose()?;
        let defect = raw
            .defect
            .as_ref()
            .map(|d| {
                d.cases
                    .iter()
                    .map(|c| {
                        Ok(DefectSettings {
                            n: c.n,
                            h: c.h,
                            window: c.window,
                            a: rational("defect.cases.a", &c.a)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();

        let missing = |key: &str| Err(Error::config(key, format!("required by the {} experiment", experiment.name())));
        match experiment {
            Experiment::Construct | Experiment::Verify if sequence.is_none() && spec.is_odometer() => {
                return missing("sequence")
            }
            Experiment::Remark2 if remark2.is_none() => return missing("remark2"),
            Experiment::Lemma3 if lemma3.is_none() => return missing("lemma3"),
            Experiment::Defect if defect.is_empty() => return missing("defect"),
            _ => {}
        }
        if matches!(experiment, Experiment::Construct) && !spec.is_odometer() {
            return Err(Error::config("system.kind", "the construction runs on the odometer"));
        }

        Ok(RunConfig {
            experiment,
            out: ov.out.clone().or(raw.out).unwrap_or_else(|| PathBuf::from("out")),
            seed,
            mode,
            samples,
            confidence,
            spec,
            observable,
            torus_observable,
            sequence,
            remark2,
            lemma3,
            defect,
            hash,
        })
    }
}

fn parse_sequence(s: &SequenceBlock) -> Result<SequenceSettings> {
    let mut a = s
        .a
        .iter()
        .map(|v| rational("sequence.a", v))
        .collect::<Result<Vec<_>>>()?;
    let mut floors = s.m.clone();
    if floors.len() != a.len() {
        return Err(Error::config("sequence.M", format!("{} floors for {} terms", floors.len(), a.len())));
    }
    if let Some(k) = s.k {
        if k == 0 || k > a.len() {
            return Err(Error::config("sequence.K", format!("must lie in 1..={}", a.len())));
        }
        a.truncate(k);
        floors.truncate(k);
    }
    let tail = s.tail.as_deref().map(|t| rational("sequence.tail", t)).transpose()?.unwrap_or_default();
    let sequence = SlowSequence::with_tail(a, tail).map_err(|e| Error::config("sequence", e.to_string()))?;
    let eps = s.eps.as_deref().map(|e| rational("sequence.eps", e)).transpose()?;
    if eps.as_ref().is_some_and(|e| *e <= Rational::default()) {
        return Err(Error::config("sequence.eps", "must be positive"));
    }
    let delta_rule = match &s.delta_rule {
        Some(r) => DeltaRule::parse(r).map_err(|e| Error::config("sequence.delta_rule", e.to_string()))?,
        None => DeltaRule::default(),
    };
    Ok(SequenceSettings {
        sequence,
        floors,
        eps,
        delta_rule,
        n_max: s.n_max.unwrap_or(DEFAULT_N_MAX),
        max_refinement_bits: s.max_refinement_bits.unwrap_or(crate::towers::DEFAULT_REFINEMENT_BITS),
    })
}

type Observables = (BaseObservable<Rational>, Option<BaseObservable<f64>>);

fn parse_observable(o: &ObservableBlock, spec: &SystemSpec) -> Result<Observables> {
    let given = [o.constant.is_some(), o.pieces.is_some(), o.steps.is_some(), o.binary.is_some()]
        .iter()
        .filter(|b| **b)
        .count();
    if given > 1 {
        return Err(Error::config("observable", "give exactly one of constant, pieces, steps, binary"));
    }
    if let Some(steps) = &o.steps {
        if spec.is_odometer() {
            return Err(Error::config("observable.steps", "step functions live on the torus"));
        }
        let vals = steps
            .iter()
            .map(|v| rational("observable.steps", v))
            .collect::<Result<Vec<_>>>()?;
        if vals.iter().any(|v| *v < Rational::default()) {
            return Err(Error::config("observable.steps", "values must be nonnegative"));
        }
        let exact = BaseObservable::Step(StepFunction::new(vals.clone())?);
        let float = BaseObservable::Step(StepFunction::new(vals.iter().map(crate::scalar::rational_to_f64).collect())?);
        return Ok((exact, Some(float)));
    }
    if !spec.is_odometer() {
        return Err(Error::config("observable.steps", "torus runs need a step function"));
    }
    if let Some(d) = o.binary {
        if d == 0 || d as usize * spec.n > 24 {
            return Err(Error::config("observable.binary", "need 1 <= binary and n * binary <= 24"));
        }
        let f = CylinderFunction::from_table(spec.n, d, binary_table(spec.n, d))?;
        return Ok((BaseObservable::Cylinder(f), None));
    }
    if let Some(pieces) = &o.pieces {
        let parsed = pieces
            .iter()
            .map(|p| {
                let v = rational("observable.pieces.value", &p.value)?;
                if v < Rational::default() {
                    return Err(Error::config("observable.pieces.value", "values must be nonnegative"));
                }
                let c = Cylinder::new(p.cylinder.clone())
                    .map_err(|e| Error::config("observable.pieces.cylinder", e.to_string()))?;
                Ok((c, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let f = CylinderFunction::from_pieces(spec.n, &parsed)
            .map_err(|e| Error::config("observable.pieces", e.to_string()))?;
        return Ok((BaseObservable::Cylinder(f), None));
    }
    let c = match &o.constant {
        Some(c) => rational("observable.constant", c)?,
        None => crate::scalar::rat(2, 1),
    };
    if c < Rational::default() {
        return Err(Error::config("observable.constant", "must be nonnegative"));
    }
    Ok((BaseObservable::Cylinder(CylinderFunction::constant(spec.n, c)), None))
}

/// Table of `sum_{j <= depth} d_j 2^-j` read from the first stream.
pub fn binary_table(n: usize, depth: u32) -> Vec<Rational> {
    let mask = (1u64 << depth) - 1;
    (0..1u64 << (n as u32 * depth))
        .map(|idx| {
            let x = idx & mask;
            let rev = (0..depth).fold(0u64, |acc, j| acc | ((x >> j) & 1) << (depth - 1 - j));
            Rational::new(rev.into(), (1u64 << depth).into())
        })
        .collect()
}
