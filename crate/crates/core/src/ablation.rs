//! Named configuration toggles, the ablation tables as presets, and a
//! runner that trains every variant over common seeds.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::block::{BlockKind, FfnKind};
use crate::data::{generate, SyntheticSpec};
use crate::error::{Error, Result};
use crate::init::InitScales;
use crate::mixing::MixStrategy;
use crate::model::ModelConfig;
use crate::moe::{Alpha, ExpertPool, MoeConfig};
use crate::norm::NormPlacement;
use crate::parallel::DeviceExecutor;
use crate::train::{train, TrainConfig};

/// One named change to a model configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum Toggle {
    NoGlobalToken,
    NoMixing,
    NoResidual,
    /// Interval residuals and auxiliary heads off.
    NoInterval,
    Ffn(FfnKind),
    SharedWeights,
    /// Sparse MoE at `1:ratio`.
    Moe(usize),
    Dense,
    NoSharedExpert,
    Alpha(Alpha),
    Init(InitScales),
    InitGain(f64),
    Pool(ExpertPool),
    Norm(NormPlacement),
    Strategy(MixStrategy),
    Heads(usize),
    Block(BlockKind),
}

fn unknown(s: &str) -> Error {
    Error::UnknownToggle(s.into())
}

fn number<T: FromStr>(s: &str, whole: &str) -> Result<T> {
    s.trim().parse().map_err(|_| unknown(whole))
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let flag = match t {
            "no-global-token" => Some(Toggle::NoGlobalToken),
            "no-mixing" => Some(Toggle::NoMixing),
            "no-residual" => Some(Toggle::NoResidual),
            "no-interval" => Some(Toggle::NoInterval),
            "shared-weights" => Some(Toggle::SharedWeights),
            "dense" => Some(Toggle::Dense),
            "no-shared-expert" => Some(Toggle::NoSharedExpert),
            _ => None,
        };
        if let Some(f) = flag {
            return Ok(f);
        }
        let (key, value) = t.split_once('=').ok_or_else(|| unknown(s))?;
        Ok(match key.trim() {
            "ffn" => Toggle::Ffn(match value.trim() {
                "swiglu" => FfnKind::SwiGlu,
                "relu" => FfnKind::Relu,
                _ => return Err(unknown(s)),
            }),
            "moe" => {
                let ratio = value.trim().strip_prefix("1:").ok_or_else(|| unknown(s))?;
                let ratio: usize = number(ratio, s)?;
                MoeConfig::sparsity(ratio).map_err(|_| unknown(s))?;
                Toggle::Moe(ratio)
            }
            "alpha" => Toggle::Alpha(match value.trim() {
                "auto" => Alpha::Auto,
                v => Alpha::Fixed(number(v, s)?),
            }),
            "init" => {
                let v: Vec<f64> = value.split(',').map(|x| number(x, s)).collect::<Result<_>>()?;
                match v[..] {
                    [up, gate, down] => Toggle::Init(InitScales::new(up, gate, down)),
                    _ => return Err(unknown(s)),
                }
            }
            "init-gain" => Toggle::InitGain(number(value, s)?),
            "pool" => Toggle::Pool(match value.trim() {
                "per-token" => ExpertPool::PerToken,
                "global" => ExpertPool::Global,
                _ => return Err(unknown(s)),
            }),
            "norm" => Toggle::Norm(match value.trim() {
                "pre" => NormPlacement::Pre,
                "post" => NormPlacement::Post,
                "sandwich" => NormPlacement::Sandwich,
                _ => return Err(unknown(s)),
            }),
            "strategy" => Toggle::Strategy(match value.trim() {
                "vertical" => MixStrategy::Vertical,
                "diagonal" => MixStrategy::Diagonal,
                "random" => MixStrategy::Random,
                "half-tokens" => MixStrategy::HalfTokens,
                _ => return Err(unknown(s)),
            }),
            "heads" => Toggle::Heads(number(value, s)?),
            "block" => Toggle::Block(match value.trim() {
                "tokenmixer-large" => BlockKind::TokenMixerLarge,
                "rank-mixer" => BlockKind::RankMixer,
                _ => return Err(unknown(s)),
            }),
            _ => return Err(unknown(s)),
        })
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Toggle::NoGlobalToken => f.write_str("no-global-token"),
            Toggle::NoMixing => f.write_str("no-mixing"),
            Toggle::NoResidual => f.write_str("no-residual"),
            Toggle::NoInterval => f.write_str("no-interval"),
            Toggle::Ffn(FfnKind::SwiGlu) => f.write_str("ffn=swiglu"),
            Toggle::Ffn(FfnKind::Relu) => f.write_str("ffn=relu"),
            Toggle::SharedWeights => f.write_str("shared-weights"),
            Toggle::Moe(r) => write!(f, "moe=1:{r}"),
            Toggle::Dense => f.write_str("dense"),
            Toggle::NoSharedExpert => f.write_str("no-shared-expert"),
            Toggle::Alpha(Alpha::Auto) => f.write_str("alpha=auto"),
            Toggle::Alpha(Alpha::Fixed(a)) => write!(f, "alpha={a}"),
            Toggle::Init(s) => write!(f, "init={},{},{}", s.up, s.gate, s.down),
            Toggle::InitGain(g) => write!(f, "init-gain={g}"),
            Toggle::Pool(ExpertPool::PerToken) => f.write_str("pool=per-token"),
            Toggle::Pool(ExpertPool::Global) => f.write_str("pool=global"),
            Toggle::Norm(n) => f.write_str(match n {
                NormPlacement::Pre => "norm=pre",
                NormPlacement::Post => "norm=post",
                NormPlacement::Sandwich => "norm=sandwich",
            }),
            Toggle::Strategy(s) => f.write_str(match s {
                MixStrategy::Vertical => "strategy=vertical",
                MixStrategy::Diagonal => "strategy=diagonal",
                MixStrategy::Random => "strategy=random",
                MixStrategy::HalfTokens => "strategy=half-tokens",
            }),
            Toggle::Heads(h) => write!(f, "heads={h}"),
            Toggle::Block(BlockKind::TokenMixerLarge) => f.write_str("block=tokenmixer-large"),
            Toggle::Block(BlockKind::RankMixer) => f.write_str("block=rank-mixer"),
        }
    }
}

fn moe_mut<'a>(cfg: &'a mut ModelConfig, toggle: &Toggle) -> Result<&'a mut MoeConfig> {
    cfg.moe
        .as_mut()
        .ok_or_else(|| Error::Config(format!("toggle `{toggle}` needs an MoE configuration")))
}

impl Toggle {
    pub fn apply(&self, cfg: &mut ModelConfig) -> Result<()> {
        match *self {
            Toggle::NoGlobalToken => cfg.global_token = false,
            Toggle::NoMixing => cfg.mixing = false,
            Toggle::NoResidual => cfg.residual = false,
            Toggle::NoInterval => {
                cfg.interval = 0;
                cfg.aux_layers = Some(Vec::new());
            }
            Toggle::Ffn(kind) => cfg.ffn = kind,
            Toggle::SharedWeights => cfg.shared_weights = true,
            Toggle::Moe(ratio) => cfg.moe = Some(MoeConfig::sparsity(ratio)?),
            Toggle::Dense => cfg.moe = None,
            Toggle::NoSharedExpert => moe_mut(cfg, self)?.shared = false,
            Toggle::Alpha(a) => moe_mut(cfg, self)?.alpha = a,
            Toggle::Init(s) => cfg.init = s,
            Toggle::InitGain(g) => moe_mut(cfg, self)?.init_gain = g,
            Toggle::Pool(p) => moe_mut(cfg, self)?.pool = p,
            Toggle::Norm(n) => cfg.norm = n,
            Toggle::Strategy(s) => cfg.strategy = s,
            Toggle::Heads(h) => cfg.heads = h,
            Toggle::Block(b) => cfg.block = b,
        }
        Ok(())
    }
}

/// Parse toggles and apply them in order to a copy of `base`.
pub fn configure(base: &ModelConfig, toggles: &[String]) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    for t in toggles {
        t.parse::<Toggle>()?.apply(&mut cfg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A named list of toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub toggles: Vec<String>,
}

impl Variant {
    pub fn new(name: &str, toggles: &[&str]) -> Self {
        Variant {
            name: name.into(),
            toggles: toggles.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// A reference configuration and rows compared against it.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub name: &'static str,
    pub title: &'static str,
    pub base: Variant,
    pub rows: Vec<Variant>,
    /// Whether rows apply on top of the base toggles or on the bare config.
    pub rows_extend_base: bool,
}

impl AblationTable {
    /// Rows with their full toggle lists.
    pub fn matrix(&self) -> Vec<Variant> {
        let inherited: &[String] = if self.rows_extend_base { &self.base.toggles } else { &[] };
        self.rows
            .iter()
            .map(|r| Variant {
                name: r.name.clone(),
                toggles: inherited.iter().chain(&r.toggles).cloned().collect(),
            })
            .collect()
    }

    /// Every preset name of the table, base first, as `table/row`.
    pub fn preset_names(&self) -> Vec<String> {
        core::iter::once(&self.base)
            .chain(&self.rows)
            .map(|v| format!("{}/{}", self.name, v.name))
            .collect()
    }
}

fn table(name: &'static str, title: &'static str, base: Variant, rows: Vec<Variant>) -> AblationTable {
    AblationTable {
        name,
        title,
        base,
        rows,
        rows_extend_base: true,
    }
}

/// Every ablation table the harness ships.
pub fn tables() -> Vec<AblationTable> {
    let v = Variant::new;
    let mut sparsity = vec![];
    for a in ["1", "2", "3", "4"] {
        sparsity.push(Variant {
            name: format!("1:2-alpha-{a}"),
            toggles: vec!["moe=1:2".into(), format!("alpha={a}")],
        });
    }
    for a in ["1", "2", "4", "6", "8"] {
        sparsity.push(Variant {
            name: format!("1:4-alpha-{a}"),
            toggles: vec!["moe=1:4".into(), format!("alpha={a}")],
        });
    }
    let init_rows = InitScales::presets()[1..]
        .iter()
        .map(|(name, s)| Variant {
            name: (*name).into(),
            toggles: vec![Toggle::Init(*s).to_string()],
        })
        .collect();
    vec![
        AblationTable {
            rows_extend_base: false,
            ..table(
                "rankmixer-comparison",
                "Residual design against the RankMixer block",
                v("group-transformer", &["no-mixing"]),
                vec![
                    v("rankmixer-no-sr-otr", &["block=rank-mixer", "heads=4", "no-residual", "no-interval"]),
                    v("rankmixer-no-otr", &["block=rank-mixer", "heads=4", "no-interval"]),
                    v("rankmixer", &["block=rank-mixer", "no-interval"]),
                    v("tokenmixer-large", &[]),
                ],
            )
        },
        table(
            "components",
            "Block components",
            v("base", &[]),
            vec![
                v("no-global-token", &["no-global-token"]),
                v("no-mixing", &["no-mixing"]),
                v("no-residual", &["no-residual"]),
                v("no-interval-aux", &["no-interval"]),
                v("shared-swiglu", &["shared-weights"]),
                v("per-token-ffn", &["ffn=relu"]),
            ],
        ),
        table(
            "moe-components",
            "Sparse per-token MoE components",
            v("sp-moe", &["moe=1:2"]),
            vec![
                v("no-shared-expert", &["no-shared-expert"]),
                v("no-gate-scaling", &["alpha=1"]),
                v("no-small-init", &["init=1,1,1"]),
                v("sparse-moe", &["pool=global"]),
            ],
        ),
        table(
            "norm",
            "Normalization placement",
            v("pre-norm", &[]),
            vec![v("post-norm", &["norm=post"]), v("sandwich-norm", &["norm=sandwich"])],
        ),
        table(
            "mixing-strategy",
            "Mixing strategy",
            v("vertical", &[]),
            vec![
                v("diagonal", &["strategy=diagonal"]),
                v("random", &["strategy=random"]),
                v("half-tokens", &["strategy=half-tokens"]),
            ],
        ),
        table("sparsity-alpha", "Sparsity and gate value scaling", v("dense", &[]), sparsity),
        table("small-init", "Initialization scales [up, gate, down]", v("base", &["init=1,1,1"]), init_rows),
        table(
            "increase-variance",
            "Gate value scaling against a larger expert init",
            v("gate-scaling", &["moe=1:2"]),
            vec![v("increase-variance", &["alpha=1", "init-gain=2"])],
        ),
    ]
}

/// Look up a preset by `table/row` and return its full toggle list.
pub fn preset(name: &str) -> Result<Variant> {
    let (t, row) = name.split_once('/').ok_or_else(|| Error::Config(format!("preset `{name}`: expected table/row")))?;
    let table = tables()
        .into_iter()
        .find(|x| x.name == t)
        .ok_or_else(|| Error::Config(format!("no ablation table `{t}`")))?;
    if table.base.name == row {
        return Ok(table.base);
    }
    table
        .matrix()
        .into_iter()
        .find(|v| v.name == row)
        .ok_or_else(|| Error::Config(format!("no row `{row}` in table `{t}`")))
}

/// Result of one training run inside an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Finished { auc: f64, logloss: f64, fingerprint: String },
    /// Training produced a non-finite loss.
    Diverged { step: usize },
}

impl Outcome {
    pub fn auc(&self) -> Option<f64> {
        match self {
            Outcome::Finished { auc, .. } => Some(*auc),
            Outcome::Diverged { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub toggles: Vec<String>,
    /// One outcome per seed.
    pub runs: Vec<Outcome>,
    /// AUC minus the base AUC per seed; `None` if either run diverged.
    pub delta_auc: Vec<Option<f64>>,
}

impl VariantResult {
    /// Mean over seeds where both runs finished.
    pub fn mean_delta(&self) -> Option<f64> {
        let d: Vec<f64> = self.delta_auc.iter().flatten().copied().collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub base: VariantResult,
    pub variants: Vec<VariantResult>,
}

/// Train `base` and every variant with the same seeds. Seed `s` offsets the
/// data, model and shuffling seeds together, so all variants of one seed see
/// identical data. Runs are dispatched through `exec` and assembled in a
/// fixed order.
pub fn run_ablation(
    model: &ModelConfig,
    data: &SyntheticSpec,
    tc: &TrainConfig,
    base: &Variant,
    matrix: &[Variant],
    seeds: &[u64],
    exec: &impl DeviceExecutor,
) -> Result<AblationReport> {
    let all: Vec<&Variant> = core::iter::once(base).chain(matrix).collect();
    let configs: Vec<ModelConfig> = all.iter().map(|v| configure(model, &v.toggles)).collect::<Result<_>>()?;
    let datasets = seeds
        .iter()
        .map(|&s| {
            generate(&SyntheticSpec {
                seed: data.seed.wrapping_add(s),
                ..data.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs = all.len() * seeds.len();
    let outcomes = exec.run(jobs, |j| {
        let (v, si) = (j / seeds.len(), j % seeds.len());
        let s = seeds[si];
        let cfg = ModelConfig {
            seed: configs[v].seed.wrapping_add(s),
            ..configs[v].clone()
        };
        let tc = TrainConfig {
            seed: tc.seed.wrapping_add(s),
            ..tc.clone()
        };
        match train::<f32>(&all[v].name, &cfg, &datasets[si], &tc) {
            Ok(t) => Ok(Outcome::Finished {
                auc: t.report.final_auc,
                logloss: t.report.final_logloss,
                fingerprint: t.report.fingerprint,
            }),
            Err(Error::Diverged { step, .. }) => Ok(Outcome::Diverged { step }),
            Err(e) => Err(e),
        }
    })?;
    let mut chunks = outcomes.chunks(seeds.len());
    let base_runs = chunks.next().unwrap_or(&[]).to_vec();
    let result = |v: &Variant, runs: &[Outcome]| VariantResult {
        name: v.name.clone(),
        toggles: v.toggles.clone(),
        runs: runs.to_vec(),
        delta_auc: runs
            .iter()
            .zip(&base_runs)
            .map(|(r, b)| Some(r.auc()? - b.auc()?))
            .collect(),
    };
    let base_result = result(base, &base_runs);
    let variants = matrix.iter().zip(chunks).map(|(v, runs)| result(v, runs)).collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        base: base_result,
        variants,
    })
}

/// Run one shipped table.
pub fn run_table(
    table: &AblationTable,
    model: &ModelConfig,
    data: &SyntheticSpec,
    tc: &TrainConfig,
    seeds: &[u64],
    exec: &impl DeviceExecutor,
) -> Result<AblationReport> {
    run_ablation(model, data, tc, &table.base, &table.matrix(), seeds, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::Sequential;

    #[test]
    fn toggles_round_trip_through_text() {
        for t in tables() {
            for v in t.matrix().iter().chain([&t.base]) {
                for s in &v.toggles {
                    let parsed: Toggle = s.parse().unwrap();
                    assert_eq!(parsed.to_string().parse::<Toggle>().unwrap(), parsed);
                }
            }
        }
    }

    #[test]
    fn unknown_toggles_are_rejected() {
        for s in ["no-such-thing", "moe=1:3", "norm=middle", "init=1,2", "alpha=x", "heads=-1"] {
            assert_eq!(s.parse::<Toggle>(), Err(Error::UnknownToggle(s.into())), "{s}");
        }
    }

    #[test]
    fn every_preset_configures() {
        let base = ModelConfig::default();
        let mut names = Vec::new();
        for t in tables() {
            for n in t.preset_names() {
                let v = preset(&n).unwrap();
                configure(&base, &v.toggles).unwrap();
                names.push(n);
            }
        }
        let unique: alloc::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn moe_toggles_need_moe() {
        let err = configure(&ModelConfig::default(), &["alpha=2".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_matrix_reports_only_the_base() {
        let data = SyntheticSpec {
            groups: 3,
            train_examples: 128,
            eval_examples: 128,
            pairs: 2,
            ..SyntheticSpec::default()
        };
        let model = ModelConfig {
            dim: 8,
            heads: 4,
            layers: 2,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            batch: 64,
            ..TrainConfig::default()
        };
        let r = run_ablation(&model, &data, &tc, &Variant::new("base", &[]), &[], &[0, 1], &Sequential).unwrap();
        assert!(r.variants.is_empty());
        assert_eq!(r.base.runs.len(), 2);
        assert_eq!(r.base.delta_auc, [Some(0.0), Some(0.0)]);
    }
}
