//! The complete codec network, its structure state and checkpoint format.
//!
//! A checkpoint is one safetensors file. Tensor names follow the module
//! paths (`g_a.layer0.weight`, `context.merge1.bias`, …) and the header
//! metadata carries two JSON documents: `config` ([`ModelConfig`]) and
//! `state` ([`ModelState`]).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Init, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::control::{BudgetTable, ControlBranch, LEVELS};
use crate::entropy::{ContextModel, FactorizedPrior};
use crate::error::{invalid, Error, Result};
use crate::structure::intra::{groups_for, TopologyGenerator};
use crate::structure::{EdgeId, InterEdgeSpec, StructureSample};
use crate::transforms::{transform_macs, SlimmableTransform, TransformRole};

/// Side length at which per-pixel edge costs are evaluated.
pub const REFERENCE_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub merge_widths: Vec<usize>,
    pub latent_channels: usize,
    pub stages: usize,
    pub context_kernel: usize,
    pub normalize_main: bool,
    pub normalize_hyper: bool,
    pub generator_noise: usize,
    pub generator_hidden: usize,
    pub control_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 12, 16, 24, 32],
            merge_widths: vec![16, 24, 32, 48, 64],
            latent_channels: 32,
            stages: 4,
            context_kernel: 5,
            normalize_main: true,
            normalize_hyper: false,
            generator_noise: 16,
            generator_hidden: 64,
            control_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.merge_widths.len() {
            return Err(Error::Config(format!(
                "{} transform widths but {} merge widths",
                self.widths.len(),
                self.merge_widths.len()
            )));
        }
        if self.latent_channels == 0 || self.latent_channels > 256 {
            return Err(Error::Config(format!("latent channels {} out of range", self.latent_channels)));
        }
        if !(1..=16).contains(&self.stages) {
            return Err(Error::PartiteCount(self.stages));
        }
        Ok(())
    }

    /// Channel groups of the intra-node topology.
    pub fn groups(&self) -> usize {
        let mut counts = vec![self.latent_channels, 2 * self.latent_channels];
        counts.extend(&self.merge_widths);
        groups_for(self.stages, &counts)
    }
}

/// Exponential moving averages of the rate-distortion loss at the two
/// extreme structures, per task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdExtremes {
    pub at_min: Option<f64>,
    pub at_max: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelState {
    pub quality: usize,
    pub stage: u8,
    /// Updates over all stages.
    pub step: usize,
    /// Updates since the current stage began.
    pub stage_step: usize,
    /// Edge indices of the stored levels, `LEVELS × 5`, level 0 the most complex.
    pub levels: Option<Vec<Vec<usize>>>,
    pub tile: Option<Vec<u8>>,
    pub rd_extremes: [RdExtremes; 2],
}

/// All learned parameters of the codec.
pub struct Model {
    config: ModelConfig,
    device: Device,
    varmap: VarMap,
    pub analysis: SlimmableTransform,
    pub hyper_analysis: SlimmableTransform,
    pub hyper_synthesis: SlimmableTransform,
    pub synthesis: SlimmableTransform,
    pub prior: FactorizedPrior,
    pub context: ContextModel,
    pub generator: TopologyGenerator,
    control: ControlBranch,
    level_logits: Tensor,
    pub state: ModelState,
}

impl Model {
    pub fn new(config: ModelConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);
        let m = config.latent_channels;
        let n = config.widths.len();
        let analysis = SlimmableTransform::new(vb.pp("g_a"), TransformRole::Analysis, &config.widths, m, config.normalize_main)?;
        let hyper_analysis =
            SlimmableTransform::new(vb.pp("h_a"), TransformRole::HyperAnalysis, &config.widths, m, config.normalize_hyper)?;
        let hyper_synthesis =
            SlimmableTransform::new(vb.pp("h_s"), TransformRole::HyperSynthesis, &config.widths, m, config.normalize_hyper)?;
        let synthesis = SlimmableTransform::new(vb.pp("g_s"), TransformRole::Synthesis, &config.widths, m, config.normalize_main)?;
        let prior = FactorizedPrior::new(vb.pp("prior"), m)?;
        let context = ContextModel::new(vb.pp("context"), m, config.context_kernel, &config.merge_widths)?;
        let generator =
            TopologyGenerator::new(vb.pp("generator"), config.generator_noise, config.generator_hidden, config.groups(), config.stages)?;
        let control = ControlBranch::new(vb.pp("control"), config.control_hidden, n)?;
        let level_logits = vb.get_with_hints((LEVELS, EdgeId::ALL.len(), n), "levels.logits", Init::Const(0.0))?;
        Ok(Self {
            config,
            device: device.clone(),
            varmap,
            analysis,
            hyper_analysis,
            hyper_synthesis,
            synthesis,
            prior,
            context,
            generator,
            control,
            level_logits,
            state: ModelState::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn control(&self) -> &ControlBranch {
        &self.control
    }

    /// Per-level edge logits `[LEVELS, 5, N]`.
    pub fn level_logits(&self) -> &Tensor {
        &self.level_logits
    }

    pub fn num_variants(&self) -> usize {
        self.config.widths.len()
    }

    pub fn stages(&self) -> usize {
        self.config.stages
    }

    pub fn groups(&self) -> usize {
        self.config.groups()
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn transform(&self, edge: EdgeId) -> Option<&SlimmableTransform> {
        match edge {
            EdgeId::Analysis => Some(&self.analysis),
            EdgeId::HyperAnalysis => Some(&self.hyper_analysis),
            EdgeId::HyperSynthesis => Some(&self.hyper_synthesis),
            EdgeId::Synthesis => Some(&self.synthesis),
            EdgeId::Merge => None,
        }
    }

    /// MACs of edge `edge` at variant `index` for an `h × w` image.
    pub fn edge_macs(&self, edge: EdgeId, index: usize, h: usize, w: usize) -> Result<u64> {
        if index >= self.num_variants() {
            return Err(invalid(format!("variant {index} of {edge} outside 0..{}", self.num_variants())));
        }
        let (h16, w16) = (h.div_ceil(16), w.div_ceil(16));
        match edge {
            EdgeId::Analysis => transform_macs(&self.analysis, index, h, w),
            EdgeId::HyperAnalysis => transform_macs(&self.hyper_analysis, index, h16, w16),
            EdgeId::HyperSynthesis => transform_macs(&self.hyper_synthesis, index, h16.div_ceil(4), w16.div_ceil(4)),
            EdgeId::Synthesis => transform_macs(&self.synthesis, index, h16, w16),
            EdgeId::Merge => self.context.merge_macs(index, h16, w16),
        }
    }

    /// Masked context convolution MACs, the same for every structure.
    pub fn context_macs(&self, h: usize, w: usize) -> u64 {
        self.context.context_macs(h.div_ceil(16), w.div_ceil(16))
    }

    /// Per-pixel variant costs of every edge at the reference size.
    pub fn edge_specs(&self) -> Result<Vec<InterEdgeSpec>> {
        let px = (REFERENCE_SIZE * REFERENCE_SIZE) as f64;
        EdgeId::ALL
            .into_iter()
            .map(|e| {
                let costs = (0..self.num_variants())
                    .map(|i| Ok(self.edge_macs(e, i, REFERENCE_SIZE, REFERENCE_SIZE)? as f64 / px))
                    .collect::<Result<Vec<_>>>()?;
                InterEdgeSpec::new(e, costs)
            })
            .collect()
    }

    /// Per-pixel cost shared by all structures.
    pub fn fixed_cost(&self) -> f64 {
        self.context_macs(REFERENCE_SIZE, REFERENCE_SIZE) as f64 / (REFERENCE_SIZE * REFERENCE_SIZE) as f64
    }

    /// MACs per pixel of a full structure.
    pub fn cost(&self, inter: &BTreeMap<EdgeId, usize>) -> Result<f64> {
        Ok(crate::control::structure_cost(inter, &self.edge_specs()?, self.fixed_cost()))
    }

    pub fn cost_range(&self) -> Result<(f64, f64)> {
        let specs = self.edge_specs()?;
        let lo = self.fixed_cost() + specs.iter().map(|s| s.variant_costs()[0]).sum::<f64>();
        let hi = self.fixed_cost() + specs.iter().map(|s| *s.variant_costs().last().unwrap()).sum::<f64>();
        Ok((lo, hi))
    }

    pub fn budgets(&self) -> Result<BudgetTable> {
        let (lo, hi) = self.cost_range()?;
        BudgetTable::geometric(lo, hi)
    }

    /// Stored topology tile, or the generator's zero-noise mode before one is stored.
    pub fn topology_tile(&self) -> Result<Vec<u8>> {
        match &self.state.tile {
            Some(t) => Ok(t.clone()),
            None => self.generator.argmax_tile(),
        }
    }

    pub fn uniform_structure(&self, index: usize) -> Result<StructureSample> {
        Ok(StructureSample::uniform(index, self.stages(), self.topology_tile()?))
    }

    /// The stored structure of complexity level `level`.
    pub fn non_adaptive_structure(&self, level: usize) -> Result<StructureSample> {
        if level >= LEVELS {
            return Err(invalid(format!("level {level} outside 0..{LEVELS}")));
        }
        let inter = match &self.state.levels {
            Some(levels) => EdgeId::ALL.into_iter().zip(levels[level].iter().copied()).collect(),
            None => {
                let n = self.num_variants();
                let idx = ((LEVELS - 1 - level) * (n - 1) + (LEVELS - 1) / 2) / (LEVELS - 1);
                EdgeId::ALL.into_iter().map(|e| (e, idx)).collect()
            }
        };
        Ok(StructureSample::new(inter, self.stages(), self.topology_tile()?))
    }

    /// Variables whose names start with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<candle_core::Var> {
        let data = self.varmap.data().lock().unwrap();
        let mut named: Vec<(&String, &candle_core::Var)> =
            data.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Copies every parameter of `other` whose name and shape match one of
    /// this model's; returns how many were copied.
    pub fn transplant_from(&self, other: &Model) -> Result<usize> {
        let src = other.varmap.data().lock().unwrap();
        let dst = self.varmap.data().lock().unwrap();
        let mut copied = 0;
        for (name, var) in dst.iter() {
            if let Some(s) = src.get(name) {
                if s.as_tensor().dims() == var.as_tensor().dims() {
                    var.set(&s.as_tensor().to_device(&self.device)?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let data = self.varmap.data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let mut buffers = Vec::with_capacity(names.len());
        for name in &names {
            let t = data[*name].as_tensor().to_dtype(DType::F32)?.flatten_all()?;
            let v: Vec<f32> = t.to_vec1()?;
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            buffers.push((name.to_string(), data[*name].as_tensor().dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(n, shape, bytes)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("config".to_string(), serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?);
        meta.insert("state".to_string(), serde_json::to_string(&self.state).map_err(|e| Error::Checkpoint(e.to_string()))?);
        let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.as_ref().with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}` metadata")));
        let config: ModelConfig = serde_json::from_str(field("config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let state: ModelState = serde_json::from_str(field("state")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, device)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        {
            let data = model.varmap.data().lock().unwrap();
            for (name, var) in data.iter() {
                let t = tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                if t.dims() != var.as_tensor().dims() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.dims(),
                        var.as_tensor().dims()
                    )));
                }
                var.set(&t.to_dtype(var.dtype())?)?;
            }
        }
        model.state = state;
        Ok(model)
    }
}

/// Path of the quality-`q` model inside a model bundle directory.
pub fn bundle_path(dir: impl AsRef<Path>, quality: usize) -> std::path::PathBuf {
    dir.as_ref().join(format!("q{quality}.safetensors"))
}

/// Loads a model from a file, or from a bundle directory by quality.
pub fn load_for_quality(path: impl AsRef<Path>, quality: usize, device: &Device) -> Result<Model> {
    let p = path.as_ref();
    if p.is_dir() {
        let file = bundle_path(p, quality);
        if !file.exists() {
            return Err(Error::Checkpoint(format!("bundle {} has no quality-{quality} model", p.display())));
        }
        Model::load(file, device)
    } else {
        Model::load(p, device)
    }
}
