//! The declarative run configuration. Every command resolves the file given
//! with `--config` (or the defaults), applies its flags on top, and writes
//! the resolved document next to its outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use memdistill_core::bptt::{InnerOptConfig, MomentumMode};
use memdistill_core::continual::{ClConfig, StreamKind};
use memdistill_core::data::AugmentPolicy;
use memdistill_core::distill::{DistillConfig, OuterOptConfig};
use memdistill_core::eval::{AblationGrid, EvalProtocol};
use memdistill_core::memory::{plan_budget_floats, plan_classical, BudgetPlan, Parameterization};
use memdistill_core::models::{ModelKind, ModelSpec};

use crate::datasets::DatasetConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// `None` keeps the kind's default.
    pub hidden: Option<usize>,
    pub depth: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            hidden: None,
            depth: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_shape: [usize; 3], num_classes: usize) -> ModelSpec {
        let base = match self.kind {
            ModelKind::Linear => ModelSpec::linear(input_shape, num_classes),
            ModelKind::Mlp => ModelSpec::mlp(input_shape, num_classes),
            ModelKind::Convnet => ModelSpec::convnet(input_shape, num_classes),
        };
        let base = match self.hidden {
            Some(h) => base.with_hidden(h),
            None => base,
        };
        match self.depth {
            Some(d) => base.with_depth(d),
            None => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Budget in images per class.
    pub ipc: usize,
    /// Candidate basis counts; more than one triggers validation selection.
    pub bases: Vec<usize>,
    /// Overrides the number of addressing matrices the budget allows.
    pub addr_count: Option<usize>,
    pub downsample: usize,
    pub parameterization: Parameterization,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            ipc: 1,
            bases: vec![4],
            addr_count: None,
            downsample: 1,
            parameterization: Parameterization::Addressed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub modes: Vec<MomentumMode>,
    pub steps: Vec<usize>,
    pub downsample: Vec<usize>,
    pub parameterizations: Vec<Parameterization>,
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modes: vec![MomentumMode::None, MomentumMode::ForwardOnly, MomentumMode::Full],
            steps: vec![1, 10],
            downsample: vec![1],
            parameterizations: vec![Parameterization::Addressed],
            seeds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    pub stream: StreamKind,
    pub tasks: usize,
    pub per_task: usize,
    /// Buffer capacity in images.
    pub capacity_samples: usize,
    pub num_bases: usize,
    pub steps_per_minibatch: usize,
    pub final_iterations: usize,
    pub online_lr: f64,
    pub online_momentum: f64,
    pub baseline: bool,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        ContinualConfig {
            stream: StreamKind::Permutations,
            tasks: 5,
            per_task: 1000,
            capacity_samples: 200,
            num_bases: 20,
            steps_per_minibatch: 1,
            final_iterations: 100,
            online_lr: 0.01,
            online_momentum: 0.9,
            baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub inner: InnerOptConfig,
    pub outer: OuterOptConfig,
    pub augment: bool,
    pub seed: u64,
    pub eval: EvalProtocol,
    pub ablation: AblationConfig,
    pub continual: ContinualConfig,
    /// Write a checkpoint every this many outer iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            memory: MemoryConfig::default(),
            inner: InnerOptConfig::default(),
            outer: OuterOptConfig::default(),
            augment: false,
            seed: 0,
            eval: EvalProtocol::default(),
            ablation: AblationConfig::default(),
            continual: ContinualConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(Error::io(path))
    }

    pub fn budget_floats(&self, num_classes: usize, image_shape: [usize; 3]) -> u64 {
        (self.memory.ipc * num_classes * image_shape.iter().product::<usize>()) as u64
    }

    /// The plan for `k` bases, honouring an explicit addressing count.
    pub fn plan(&self, num_classes: usize, image_shape: [usize; 3], k: usize) -> Result<BudgetPlan> {
        let budget = self.budget_floats(num_classes, image_shape);
        let s = self.memory.downsample;
        match self.memory.parameterization {
            Parameterization::Classical => Ok(plan_classical(budget, num_classes, image_shape, s)?),
            Parameterization::Addressed => {
                let mut plan = plan_budget_floats(budget, image_shape, num_classes, k, s)?;
                if let Some(r) = self.memory.addr_count {
                    let per = (num_classes * k) as u64;
                    let total = plan.base_floats + r as u64 * per;
                    if r == 0 || total > budget {
                        return Err(Error::Other(format!(
                            "--addr-count {} needs {} floats, the budget is {}",
                            r, total, budget
                        )));
                    }
                    plan.r = r;
                    plan.addressing_floats = r as u64 * per;
                    plan.total_floats = total;
                }
                Ok(plan)
            }
        }
    }

    pub fn distill_config(&self, num_classes: usize, image_shape: [usize; 3], k: usize) -> Result<DistillConfig> {
        let cfg = DistillConfig {
            model: self.model.spec(image_shape, num_classes),
            inner: self.inner.clone(),
            outer: self.outer.clone(),
            plan: self.plan(num_classes, image_shape, k)?,
            parameterization: self.memory.parameterization,
            augment: self.augment.then(AugmentPolicy::default),
            seed: self.seed,
        };
        cfg.validate(num_classes)?;
        Ok(cfg)
    }

    pub fn ablation_grid(&self, num_classes: usize, image_shape: [usize; 3]) -> AblationGrid {
        AblationGrid {
            modes: self.ablation.modes.clone(),
            steps: self.ablation.steps.clone(),
            downsample: self.ablation.downsample.clone(),
            parameterizations: self.ablation.parameterizations.clone(),
            budget_floats: self.budget_floats(num_classes, image_shape),
            distill_seeds: (0..self.ablation.seeds as u64).map(|i| self.seed + i).collect(),
        }
    }

    pub fn cl_config(&self, num_classes: usize, image_shape: [usize; 3]) -> Result<ClConfig> {
        let c = &self.continual;
        let d: usize = image_shape.iter().product();
        let share = (c.capacity_samples * d / c.tasks.max(1)) as u64;
        let plan = plan_budget_floats(share, image_shape, num_classes, c.num_bases, self.memory.downsample)?;
        Ok(ClConfig {
            distill: DistillConfig {
                model: self.model.spec(image_shape, num_classes),
                inner: self.inner.clone(),
                outer: self.outer.clone(),
                plan,
                parameterization: Parameterization::Addressed,
                augment: None,
                seed: self.seed,
            },
            num_bases: c.num_bases,
            steps_per_minibatch: c.steps_per_minibatch,
            final_iterations: c.final_iterations,
            eval: self.eval.clone(),
        })
    }
}
