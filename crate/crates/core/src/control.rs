//! Controller nodes (device budget, task, quality) and the branch that maps
//! them, optionally together with the image, to a network structure.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use candle_nn::{Init, VarBuilder};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::nn::conv2d;
use crate::structure::inter::gumbel;
use crate::structure::{EdgeId, InterEdgeSpec, StructureSample};

/// Number of stored complexity levels and budget entries.
pub const LEVELS: usize = 8;
/// Complexity weights, one per level, ascending.
pub const LAMBDA_C: [f64; LEVELS] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
/// Distortion weights per task and quality: `255²·MSE` for the PSNR task
/// and `1 − MS-SSIM` for the MS-SSIM task.
pub const LAMBDA_D: [[f64; 4]; 2] = [[0.0018, 0.0035, 0.0067, 0.0130], [2.40, 4.58, 8.73, 16.64]];
pub const QUALITIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Psnr,
    MsSsim,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Psnr, Task::MsSsim];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Task::ALL.get(i).copied().ok_or_else(|| invalid(format!("task index {i} outside 0..2")))
    }

    pub fn lambda_d(self, quality: usize) -> Result<f64> {
        LAMBDA_D[self.index()]
            .get(quality)
            .copied()
            .ok_or_else(|| invalid(format!("quality {quality} outside 0..{QUALITIES}")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Psnr => "psnr",
            Task::MsSsim => "msssim",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" | "mse" | "0" => Ok(Task::Psnr),
            "msssim" | "ms-ssim" | "1" => Ok(Task::MsSsim),
            other => Err(invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// `Φ_C` budget level, `Φ_T` task, `Φ_D` quality and the data-adaptive flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ControllerState {
    pub budget_level: usize,
    pub task: Task,
    pub quality: usize,
    pub data_adaptive: bool,
}

impl ControllerState {
    pub fn new(budget_level: usize, task: Task, quality: usize, data_adaptive: bool) -> Result<Self> {
        let s = Self { budget_level, task, quality, data_adaptive };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_level >= LEVELS {
            return Err(invalid(format!("budget level {} outside 0..{LEVELS}", self.budget_level)));
        }
        if self.quality >= QUALITIES {
            return Err(invalid(format!("quality {} outside 0..{QUALITIES}", self.quality)));
        }
        Ok(())
    }

    pub fn lambda_d(&self) -> f64 {
        LAMBDA_D[self.task.index()][self.quality]
    }
}

/// MAC-per-pixel budgets, level 0 the largest, spaced geometrically.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetTable {
    budgets: [f64; LEVELS],
}

impl BudgetTable {
    pub fn geometric(c_min: f64, c_max: f64) -> Result<Self> {
        if !(c_min > 0.0 && c_max > c_min) {
            return Err(Error::DegenerateRange(c_min));
        }
        let mut budgets = [0.0; LEVELS];
        for (i, b) in budgets.iter_mut().enumerate() {
            *b = c_max * (c_min / c_max).powf(i as f64 / (LEVELS - 1) as f64);
        }
        budgets[0] = c_max;
        budgets[LEVELS - 1] = c_min;
        Ok(Self { budgets })
    }

    pub fn budget(&self, level: usize) -> Result<f64> {
        self.budgets
            .get(level)
            .copied()
            .ok_or_else(|| invalid(format!("budget level {level} outside 0..{LEVELS}")))
    }

    pub fn budgets(&self) -> &[f64; LEVELS] {
        &self.budgets
    }
}

/// Total cost of `inter` under per-edge `specs` plus a structure-independent part.
pub fn structure_cost(inter: &BTreeMap<EdgeId, usize>, specs: &[InterEdgeSpec], fixed: f64) -> f64 {
    fixed
        + specs
            .iter()
            .map(|s| s.variant_costs()[inter.get(&s.edge()).copied().unwrap_or(0)])
            .sum::<f64>()
}

/// Decrements the widest choices until `structure_cost ≤ budget`.
///
/// Among edges at the largest index the one whose decrement saves the most
/// is narrowed first; ties go to the earlier edge. Returns the projected
/// choices and whether any change was needed.
pub fn project_to_budget(
    inter: &BTreeMap<EdgeId, usize>,
    specs: &[InterEdgeSpec],
    fixed: f64,
    budget: f64,
) -> Result<(BTreeMap<EdgeId, usize>, bool)> {
    let minimum = fixed + specs.iter().map(|s| s.variant_costs()[0]).sum::<f64>();
    if budget < minimum {
        return Err(Error::BudgetInfeasible { budget, minimum });
    }
    let mut out = inter.clone();
    for s in specs {
        let v = out.entry(s.edge()).or_insert(0);
        *v = (*v).min(s.num_variants() - 1);
    }
    let mut changed = false;
    while structure_cost(&out, specs, fixed) > budget {
        let top = specs.iter().map(|s| out[&s.edge()]).max().unwrap_or(0);
        let pick = specs
            .iter()
            .filter(|s| out[&s.edge()] == top && top > 0)
            .map(|s| {
                let i = out[&s.edge()];
                (s.edge(), s.variant_costs()[i] - s.variant_costs()[i - 1])
            })
            .fold(None, |best: Option<(EdgeId, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        match pick {
            Some((edge, _)) => {
                *out.get_mut(&edge).unwrap() -= 1;
                changed = true;
            }
            None => return Err(Error::BudgetInfeasible { budget, minimum }),
        }
    }
    Ok((out, changed))
}

const EMBED: usize = 16;
const CONTENT: [usize; 4] = [16, 16, 32, 64];

/// Content encoder, controller embeddings and MLP emitting per-edge logits.
#[derive(Clone, Debug)]
pub struct ControlBranch {
    convs: Vec<(Tensor, Tensor)>,
    budget_embedding: Tensor,
    task_embedding: Tensor,
    layers: Vec<(Tensor, Tensor)>,
    num_variants: usize,
}

fn linear(vb: &VarBuilder, name: &str, out: usize, input: usize) -> Result<(Tensor, Tensor)> {
    let s = (1.0 / input as f64).sqrt();
    Ok((
        vb.get_with_hints((out, input), &format!("{name}.weight"), Init::Uniform { lo: -s, up: s })?,
        vb.get_with_hints(out, &format!("{name}.bias"), Init::Const(0.0))?,
    ))
}

fn apply_linear(x: &Tensor, (w, b): &(Tensor, Tensor)) -> Result<Tensor> {
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

impl ControlBranch {
    pub fn new(vb: VarBuilder, hidden: usize, num_variants: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in CONTENT.iter().enumerate() {
            let fan = (cin * 9) as f64;
            let w = vb.get_with_hints((c, cin, 3, 3), &format!("content{i}.weight"), Init::Randn { mean: 0.0, stdev: (2.0 / fan).sqrt() })?;
            let b = vb.get_with_hints(c, &format!("content{i}.bias"), Init::Const(0.0))?;
            convs.push((w, b));
            cin = c;
        }
        let budget_embedding = vb.get_with_hints((LEVELS, EMBED), "budget_embedding", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        let task_embedding = vb.get_with_hints((2, EMBED), "task_embedding", Init::Randn { mean: 0.0, stdev: 1.0 })?;
        let out = EdgeId::ALL.len() * num_variants;
        let layers = vec![
            linear(&vb, "merge", hidden, CONTENT[3] + 2 * EMBED)?,
            linear(&vb, "mlp0", hidden, hidden)?,
            linear(&vb, "mlp1", out, hidden)?,
        ];
        Ok(Self { convs, budget_embedding, task_embedding, layers, num_variants })
    }

    /// Global-average-pooled content features `[B, 64]`.
    pub fn content(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (w, b) in &self.convs {
            h = conv2d(&h, w, Some(b), 2)?.relu()?;
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Edge logits `[B, 5, N]`; `B = 1` without an image.
    pub fn logits(&self, x: Option<&Tensor>, budget_level: usize, task: Task) -> Result<Tensor> {
        let b = x.map_or(Ok(1), |x| x.dim(0))?;
        self.logits_batch(x, &vec![budget_level; b], &vec![task; b])
    }

    /// Edge logits `[B, 5, N]` with one budget level and task per row.
    pub fn logits_batch(&self, x: Option<&Tensor>, levels: &[usize], tasks: &[Task]) -> Result<Tensor> {
        let b = levels.len();
        if tasks.len() != b {
            return Err(Error::Shape(format!("{b} levels for {} tasks", tasks.len())));
        }
        if let Some(&bad) = levels.iter().find(|&&l| l >= LEVELS) {
            return Err(invalid(format!("budget level {bad} outside 0..{LEVELS}")));
        }
        let dev = self.budget_embedding.device();
        let content = match x {
            Some(x) => {
                if x.dim(0)? != b {
                    return Err(Error::Shape(format!("{} images for {b} controller rows", x.dim(0)?)));
                }
                self.content(x)?
            }
            None => Tensor::zeros((b, CONTENT[3]), DType::F32, dev)?,
        };
        let li = Tensor::from_vec(levels.iter().map(|&l| l as u32).collect::<Vec<_>>(), b, dev)?;
        let ti = Tensor::from_vec(tasks.iter().map(|t| t.index() as u32).collect::<Vec<_>>(), b, dev)?;
        let be = self.budget_embedding.index_select(&li, 0)?;
        let te = self.task_embedding.index_select(&ti, 0)?;
        let mut h = Tensor::cat(&[&content, &be, &te], 1)?;
        h = apply_linear(&h, &self.layers[0])?.relu()?;
        h = apply_linear(&h, &self.layers[1])?.relu()?;
        h = apply_linear(&h, &self.layers[2])?;
        Ok(h.reshape((b, EdgeId::ALL.len(), self.num_variants))?)
    }
}

/// A proposed structure and whether projection had to narrow it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    pub structure: StructureSample,
    pub projected: bool,
}

/// Samples one structure from the control branch and projects it onto the
/// budget of `controller.budget_level`. The image is used iff the controller
/// is data-adaptive.
pub fn propose_structure<R: Rng + ?Sized>(
    model: &Model,
    controller: &ControllerState,
    x: Option<&Tensor>,
    rng: &mut R,
) -> Result<Proposal> {
    controller.validate()?;
    let x = match (controller.data_adaptive, x) {
        (true, Some(x)) => Some(x),
        (true, None) => return Err(invalid("data-adaptive control needs the input image")),
        (false, _) => None,
    };
    let logits: Vec<Vec<Vec<f32>>> = model.control().logits(x, controller.budget_level, controller.task)?.to_vec3()?;
    let mut inter = BTreeMap::new();
    for (e, row) in EdgeId::ALL.into_iter().zip(&logits[0]) {
        let pick = row
            .iter()
            .map(|&l| l as f64 + gumbel(rng))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
            .0;
        inter.insert(e, pick);
    }
    let specs = model.edge_specs()?;
    let budget = model.budgets()?.budget(controller.budget_level)?;
    let (inter, projected) = project_to_budget(&inter, &specs, model.fixed_cost(), budget)?;
    Ok(Proposal { structure: StructureSample::new(inter, model.stages(), model.topology_tile()?), projected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<InterEdgeSpec> {
        vec![
            InterEdgeSpec::new(EdgeId::Analysis, vec![10.0, 20.0, 40.0]).unwrap(),
            InterEdgeSpec::new(EdgeId::Synthesis, vec![5.0, 30.0, 35.0]).unwrap(),
        ]
    }

    fn all(i: usize) -> BTreeMap<EdgeId, usize> {
        [(EdgeId::Analysis, i), (EdgeId::Synthesis, i)].into_iter().collect()
    }

    #[test]
    fn unconstrained_budget_keeps_widest() {
        let (out, changed) = project_to_budget(&all(2), &specs(), 1.0, 76.0).unwrap();
        assert_eq!(out, all(2));
        assert!(!changed);
    }

    #[test]
    fn minimum_budget_forces_minimum() {
        let (out, _) = project_to_budget(&all(2), &specs(), 1.0, 16.0).unwrap();
        assert_eq!(out, all(0));
        assert!(matches!(project_to_budget(&all(2), &specs(), 1.0, 15.9), Err(Error::BudgetInfeasible { .. })));
    }

    #[test]
    fn projection_narrows_largest_saving_first() {
        let (out, changed) = project_to_budget(&all(2), &specs(), 0.0, 60.0).unwrap();
        assert!(changed);
        assert_eq!(out[&EdgeId::Analysis], 1);
        assert_eq!(out[&EdgeId::Synthesis], 2);
        assert!(structure_cost(&out, &specs(), 0.0) <= 60.0);
    }

    #[test]
    fn budget_table_endpoints() {
        let t = BudgetTable::geometric(100.0, 1600.0).unwrap();
        assert_eq!(t.budget(0).unwrap(), 1600.0);
        assert_eq!(t.budget(7).unwrap(), 100.0);
        assert!(t.budgets().windows(2).all(|w| w[0] > w[1]));
        assert!(t.budget(8).is_err());
    }

    #[test]
    fn lambda_tables() {
        assert_eq!(Task::Psnr.lambda_d(0).unwrap(), 0.0018);
        assert_eq!(Task::MsSsim.lambda_d(3).unwrap(), 16.64);
        assert!(Task::Psnr.lambda_d(4).is_err());
        assert_eq!("msssim".parse::<Task>().unwrap(), Task::MsSsim);
        assert!(ControllerState::new(8, Task::Psnr, 0, false).is_err());
    }
}
