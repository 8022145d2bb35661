use candle_core::{DType, Device, IndexOp, Tensor};
use candle_nn::{Init, VarBuilder};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::structure::inter::gumbel;

/// Largest partite count a tile may carry (indices are packed as nibbles).
pub const MAX_PARTITES: usize = 16;

/// Per-node topological indices of one latent tensor.
///
/// Node `(c, h, w)` is the set of latent channels `i` with `i % groups == c`
/// at spatial position `(h, w)`. Nodes with equal index decode in parallel;
/// lower indices decode first. Fields produced by the generator are
/// 2×2-periodic and described by their tile; a field built with
/// [`TopologyField::from_indices`] may be arbitrary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyField {
    stages: usize,
    groups: usize,
    height: usize,
    width: usize,
    indices: Vec<u32>,
}

impl TopologyField {
    /// Expands a `groups × 2 × 2` tile (row-major) over `height × width`.
    pub fn from_tile(stages: usize, tile: &[u8], height: usize, width: usize) -> Result<Self> {
        if !(1..=MAX_PARTITES).contains(&stages) {
            return Err(Error::PartiteCount(stages));
        }
        if tile.is_empty() || tile.len() % 4 != 0 {
            return Err(Error::Shape(format!("tile length {} is not a multiple of 4", tile.len())));
        }
        if let Some(v) = tile.iter().find(|&&v| v as usize >= stages) {
            return Err(invalid(format!("tile index {v} outside 0..{stages}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("empty topology field".into()));
        }
        let groups = tile.len() / 4;
        let mut indices = Vec::with_capacity(groups * height * width);
        for c in 0..groups {
            for h in 0..height {
                for w in 0..width {
                    indices.push(tile[c * 4 + (h % 2) * 2 + (w % 2)] as u32);
                }
            }
        }
        Ok(Self { stages, groups, height, width, indices })
    }

    /// Builds a free-form field, e.g. a raster order with `H·W` partites.
    pub fn from_indices(stages: usize, groups: usize, height: usize, width: usize, indices: Vec<u32>) -> Result<Self> {
        if stages == 0 {
            return Err(Error::PartiteCount(stages));
        }
        if groups == 0 || height == 0 || width == 0 || indices.len() != groups * height * width {
            return Err(Error::Shape(format!(
                "{} indices for a {groups}x{height}x{width} field",
                indices.len()
            )));
        }
        if let Some(v) = indices.iter().find(|&&v| v as usize >= stages) {
            return Err(invalid(format!("topological index {v} outside 0..{stages}")));
        }
        Ok(Self { stages, groups, height, width, indices })
    }

    /// Every node in partite 0: a fully parallel, context-free ordering.
    pub fn zeros(groups: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_tile(1, &vec![0; groups * 4], height, width)
    }

    /// The two-pass spatial checkerboard.
    pub fn checkerboard(height: usize, width: usize) -> Result<Self> {
        Self::from_tile(2, &[0, 1, 1, 0], height, width)
    }

    /// Channel-sequential ordering: group `c` decodes in pass `c`.
    pub fn channel_wise(groups: usize, height: usize, width: usize) -> Result<Self> {
        let tile: Vec<u8> = (0..groups).flat_map(|c| [c as u8; 4]).collect();
        Self::from_tile(groups, &tile, height, width)
    }

    /// Raster-scan ordering with one partite per spatial position.
    pub fn raster(height: usize, width: usize) -> Result<Self> {
        Self::from_indices(height * width, 1, height, width, (0..(height * width) as u32).collect())
    }

    /// Tile drawn uniformly at random.
    pub fn random<R: Rng + ?Sized>(stages: usize, groups: usize, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        if !(1..=MAX_PARTITES).contains(&stages) {
            return Err(Error::PartiteCount(stages));
        }
        let tile: Vec<u8> = (0..groups * 4).map(|_| rng.random_range(0..stages) as u8).collect();
        Self::from_tile(stages, &tile, height, width)
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn node(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> u32 {
        self.indices[self.node(c, h, w)]
    }

    /// Index of latent channel `channel` at `(h, w)`.
    pub fn of_channel(&self, channel: usize, h: usize, w: usize) -> u32 {
        self.get(channel % self.groups, h, w)
    }

    /// The generating tile when the field is 2×2-periodic and nibble-sized.
    pub fn tile(&self) -> Option<Vec<u8>> {
        if self.stages > MAX_PARTITES {
            return None;
        }
        let mut tile = vec![0u8; self.groups * 4];
        for c in 0..self.groups {
            for i in 0..2 {
                for j in 0..2 {
                    let v = if i < self.height && j < self.width { self.get(c, i, j) } else { 0 };
                    tile[c * 4 + i * 2 + j] = v as u8;
                }
            }
        }
        let expanded = Self::from_tile(self.stages, &tile, self.height, self.width).ok()?;
        (expanded.indices == self.indices).then_some(tile)
    }

    /// Re-expands the tile of a periodic field over a different spatial size.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let tile = self.tile().ok_or_else(|| invalid("field is not 2x2-periodic"))?;
        Self::from_tile(self.stages, &tile, height, width)
    }

    /// Distinct index values present, ascending.
    pub fn distinct(&self) -> Vec<u32> {
        let mut v = self.indices.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Channel groups used for `stages` partites over `latent_channels` latents.
///
/// This is the largest divisor of every entry of `channel_counts` that does
/// not exceed `stages`.
pub fn groups_for(stages: usize, channel_counts: &[usize]) -> usize {
    (1..=stages.max(1))
        .rev()
        .find(|&d| channel_counts.iter().all(|&n| n % d == 0))
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopologyMode {
    Sample,
    Argmax,
}

/// Two-layer network from standard-normal noise to per-cell partite logits.
#[derive(Clone, Debug)]
pub struct TopologyGenerator {
    noise_dim: usize,
    groups: usize,
    stages: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TopologyGenerator {
    pub fn new(vb: VarBuilder, noise_dim: usize, hidden: usize, groups: usize, stages: usize) -> Result<Self> {
        if !(1..=MAX_PARTITES).contains(&stages) {
            return Err(Error::PartiteCount(stages));
        }
        let s1 = (1.0 / noise_dim as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let w1 = vb.get_with_hints((hidden, noise_dim), "w1", Init::Uniform { lo: -s1, up: s1 })?;
        let b1 = vb.get_with_hints(hidden, "b1", Init::Const(0.0))?;
        let w2 = vb.get_with_hints((groups * 4 * stages, hidden), "w2", Init::Uniform { lo: -s2, up: s2 })?;
        let b2 = vb.get_with_hints(groups * 4 * stages, "b2", Init::Const(0.0))?;
        Ok(Self { noise_dim, groups, stages, w1, b1, w2, b2 })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Logits `[M, groups·4, stages]` for noise `[M, noise_dim]`.
    pub fn logits(&self, noise: &Tensor) -> Result<Tensor> {
        let m = noise.dim(0)?;
        let hidden = noise.matmul(&self.w1.t()?)?.broadcast_add(&self.b1)?.relu()?;
        let out = hidden.matmul(&self.w2.t()?)?.broadcast_add(&self.b2)?;
        Ok(out.reshape((m, self.groups * 4, self.stages))?)
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, count: usize, rng: &mut R, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = (0..count * self.noise_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, (count, self.noise_dim), device)?)
    }

    /// Draws `count` tiles and returns them with their log-probabilities `[count]`.
    pub fn sample_tiles<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<(Vec<Vec<u8>>, Tensor)> {
        let noise = self.draw_noise(count, rng, self.w1.device())?;
        let logits = self.logits(&noise)?;
        let flat: Vec<Vec<Vec<f32>>> = logits.to_dtype(DType::F32)?.to_vec3()?;
        let mut tiles = Vec::with_capacity(count);
        let mut picks = Vec::with_capacity(count * self.groups * 4);
        for sample in &flat {
            let tile: Vec<u8> = sample
                .iter()
                .map(|cell| {
                    let (best, _) = cell.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (k, &l)| {
                        let v = l as f64 + gumbel(rng);
                        if v > acc.1 {
                            (k, v)
                        } else {
                            acc
                        }
                    });
                    best as u8
                })
                .collect();
            picks.extend(tile.iter().map(|&v| v as u32));
            tiles.push(tile);
        }
        let logp = candle_nn::ops::log_softmax(&logits, 2)?;
        let idx = Tensor::from_vec(picks, (count, self.groups * 4, 1), logits.device())?;
        let chosen = logp.gather(&idx, 2)?.squeeze(2)?.sum(1)?;
        Ok((tiles, chosen))
    }

    /// Tile at the mode of the zero-noise distribution.
    pub fn argmax_tile(&self) -> Result<Vec<u8>> {
        let noise = Tensor::zeros((1, self.noise_dim), self.w1.dtype(), self.w1.device())?;
        let logits = self.logits(&noise)?.i(0)?;
        let idx: Vec<u32> = logits.argmax(1)?.to_vec1()?;
        Ok(idx.into_iter().map(|v| v as u8).collect())
    }
}

/// Samples (or argmaxes) a tile from the generator and expands it to `height × width`.
pub fn generate_topology<R: Rng + ?Sized>(
    generator: &TopologyGenerator,
    stages: usize,
    height: usize,
    width: usize,
    rng: &mut R,
    mode: TopologyMode,
) -> Result<TopologyField> {
    if !(1..=MAX_PARTITES).contains(&stages) {
        return Err(Error::PartiteCount(stages));
    }
    if stages != generator.stages {
        return Err(invalid(format!(
            "generator emits {} partites, {stages} requested",
            generator.stages
        )));
    }
    let tile = match mode {
        TopologyMode::Argmax => generator.argmax_tile()?,
        TopologyMode::Sample => generator.sample_tiles(1, rng)?.0.remove(0),
    };
    TopologyField::from_tile(stages, &tile, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn generator(groups: usize, stages: usize) -> (VarMap, TopologyGenerator) {
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DType::F32, &Device::Cpu);
        let g = TopologyGenerator::new(vb, 8, 16, groups, stages).unwrap();
        (map, g)
    }

    #[test]
    fn tiling_is_periodic() {
        let f = TopologyField::from_tile(4, &[0, 1, 2, 3, 3, 2, 1, 0], 5, 7).unwrap();
        for c in 0..2 {
            for h in 0..5 {
                for w in 0..7 {
                    assert_eq!(f.get(c, h, w), f.get(c, h % 2, w % 2));
                }
            }
        }
        assert_eq!(f.tile().unwrap(), vec![0, 1, 2, 3, 3, 2, 1, 0]);
        assert!(TopologyField::raster(4, 4).unwrap().tile().is_none());
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(matches!(TopologyField::from_tile(17, &[0; 4], 2, 2), Err(Error::PartiteCount(17))));
        assert!(matches!(TopologyField::from_tile(0, &[0; 4], 2, 2), Err(Error::PartiteCount(0))));
        assert!(TopologyField::from_tile(2, &[0, 1, 2, 0], 2, 2).is_err());
        assert!(TopologyField::from_tile(2, &[0, 1, 0], 2, 2).is_err());
        assert!(TopologyField::from_indices(2, 1, 2, 2, vec![0, 1, 0]).is_err());
    }

    #[test]
    fn group_divisors() {
        let counts = [32, 64, 16, 24, 48];
        assert_eq!(groups_for(1, &counts), 1);
        assert_eq!(groups_for(2, &counts), 2);
        assert_eq!(groups_for(4, &counts), 4);
        assert_eq!(groups_for(10, &counts), 8);
        assert_eq!(groups_for(3, &counts), 2);
    }

    #[test]
    fn single_partite_is_all_zero() {
        let (_m, g) = generator(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = generate_topology(&g, 1, 6, 6, &mut rng, TopologyMode::Sample).unwrap();
        assert!(f.indices().iter().all(|&v| v == 0));
        assert!(matches!(
            generate_topology(&g, 17, 6, 6, &mut rng, TopologyMode::Sample),
            Err(Error::PartiteCount(17))
        ));
    }

    #[test]
    fn forced_logits_yield_checkerboard() {
        let (mut map, g) = generator(1, 2);
        let bias: Vec<f32> = [0u8, 1, 1, 0]
            .iter()
            .flat_map(|&want| if want == 0 { [20.0, -20.0] } else { [-20.0, 20.0] })
            .collect();
        map.set_one("b2", Tensor::new(bias, &Device::Cpu).unwrap()).unwrap();
        map.set_one("w2", Tensor::zeros((8, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = generate_topology(&g, 2, 4, 6, &mut rng, TopologyMode::Sample).unwrap();
        assert_eq!(f, TopologyField::checkerboard(4, 6).unwrap());
        let f = generate_topology(&g, 2, 4, 6, &mut rng, TopologyMode::Argmax).unwrap();
        assert_eq!(f, TopologyField::checkerboard(4, 6).unwrap());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let (_m, g) = generator(4, 4);
        let a = generate_topology(&g, 4, 8, 8, &mut ChaCha8Rng::seed_from_u64(9), TopologyMode::Sample).unwrap();
        let b = generate_topology(&g, 4, 8, 8, &mut ChaCha8Rng::seed_from_u64(9), TopologyMode::Sample).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_log_probs_match_tiles() {
        let (_m, g) = generator(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (tiles, logp) = g.sample_tiles(3, &mut rng).unwrap();
        let logp: Vec<f32> = logp.to_vec1().unwrap();
        assert_eq!(tiles.len(), 3);
        for (t, lp) in tiles.iter().zip(logp) {
            assert_eq!(t.len(), 8);
            assert!(lp < 0.0 && lp.is_finite());
        }
    }
}
