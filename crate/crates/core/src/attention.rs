//! Recurrent spatial-transformer attention.
//!
//! At every step an LSTM updates its state, a localization head turns the
//! hidden vector into a scale+translation transform, the transform's grid
//! is bilinearly sampled from the feature map and the sampled region is
//! texture-encoded and classified. The encoded region becomes the next
//! step's LSTM input. Scores are max-pooled over steps per class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{kernels, Graph, Tensor, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamId, ParamStore};
use crate::texture::{Classifier, Codebook};

/// Initial localization bias: `sigmoid(2.2) ≈ 0.90`, so the first glimpse
/// covers most of the image.
pub const FIRST_GLIMPSE_BIAS: [f64; 4] = [2.2, 2.2, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Unrolled steps `T`.
    pub steps: usize,
    pub hidden: usize,
    pub region_height: usize,
    pub region_width: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            steps: 4,
            hidden: 128,
            region_height: 6,
            region_width: 6,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("attention steps must be >= 2, got {}", self.steps)));
        }
        if self.region_height < 2 || self.region_width < 2 {
            return Err(Error::Config("region grid must be at least 2x2".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// Scale + translation transform in normalized `[-1, 1]` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64) -> Result<Self> {
        let p = AffineParams { sx, sy, tx, ty };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::Invalid(format!("affine parameters out of range: {p:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.sx > 0.0 && self.sx <= 1.0 && self.sy > 0.0 && self.sy <= 1.0 && self.tx.abs() <= 1.0 && self.ty.abs() <= 1.0
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.sx, self.sy, self.tx, self.ty]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        AffineParams {
            sx: v[0],
            sy: v[1],
            tx: v[2],
            ty: v[3],
        }
    }
}

/// Source coordinates `(x, y)` for every cell of an `height × width` target.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn point(&self, i: usize, j: usize) -> (f64, f64) {
        let k = (i * self.width + j) * 2;
        (self.coords[k], self.coords[k + 1])
    }
}

pub fn affine_grid(params: &AffineParams, height: usize, width: usize) -> SamplingGrid {
    SamplingGrid {
        height,
        width,
        coords: kernels::affine_grid_forward(&params.to_array(), height, width),
    }
}

/// Bilinear read with zero padding; returns `height × width × dim` values.
pub fn bilinear_sample(fm: &FeatureMap, grid: &SamplingGrid) -> Vec<f64> {
    kernels::bilinear_forward(&fm.values, fm.height, fm.width, fm.dim, &grid.coords)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// The grid read nothing inside the map; `values` is uniform.
    pub degenerate: bool,
}

/// Sum of bilinear weights each source cell receives, normalized to 1.
pub fn attention_mask(grid: &SamplingGrid, height: usize, width: usize) -> AttentionMap {
    let (values, total) = kernels::attention_mask_forward(&grid.coords, height, width);
    if total <= 0.0 {
        log::warn!("degenerate attention: sampling grid lies outside the feature map");
    }
    AttentionMap {
        height,
        width,
        values,
        degenerate: total <= 0.0,
    }
}

/// LSTM cell with fused gate weights in `i, f, g, o` order.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

/// Recurrent state; both vars are `[1, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub h: Var,
    pub c: Var,
}

impl AttentionState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Result<Self> {
        let h = g.constant(&[1, hidden], vec![0.0; hidden])?;
        let c = g.constant(&[1, hidden], vec![0.0; hidden])?;
        Ok(AttentionState { h, c })
    }
}

impl Lstm {
    pub fn new(inputs: usize, hidden: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let w_input = store.insert(
            "attention.lstm.w_input",
            normal_tensor(&[inputs, 4 * hidden], (1.0 / inputs as f64).sqrt(), rng),
        );
        let w_hidden = store.insert(
            "attention.lstm.w_hidden",
            normal_tensor(&[hidden, 4 * hidden], (1.0 / hidden as f64).sqrt(), rng),
        );
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.insert("attention.lstm.bias", Tensor::from_vec(b));
        Lstm {
            w_input,
            w_hidden,
            bias,
            inputs,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, state: AttentionState) -> Result<AttentionState> {
        if g.shape(x) != [1, self.inputs] {
            return Err(Error::ShapeMismatch {
                op: "lstm_step",
                lhs: vec![1, self.inputs],
                rhs: g.shape(x).to_vec(),
            });
        }
        let h = self.hidden;
        let zx = g.matmul(x, p[self.w_input])?;
        let zh = g.matmul(state.h, p[self.w_hidden])?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, p[self.bias])?;
        let i = g.narrow(z, 1, 0, h)?;
        let i = g.sigmoid(i);
        let f = g.narrow(z, 1, h, h)?;
        let f = g.sigmoid(f);
        let cand = g.narrow(z, 1, 2 * h, h)?;
        let cand = g.tanh(cand);
        let o = g.narrow(z, 1, 3 * h, h)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(AttentionState { h, c })
    }
}

/// Hidden state -> `[4]` transform `(σ, σ, tanh, tanh)` of a linear map.
#[derive(Clone, Copy, Debug)]
pub struct Localizer {
    pub weight: ParamId,
    pub bias: ParamId,
}

pub const LOCALIZER_INIT_STD: f64 = 0.01;

impl Localizer {
    pub fn new(hidden: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let weight = store.insert(
            "attention.localizer.weight",
            normal_tensor(&[hidden, 4], LOCALIZER_INIT_STD, rng),
        );
        let bias = store.insert("attention.localizer.bias", Tensor::from_vec(FIRST_GLIMPSE_BIAS.to_vec()));
        Localizer { weight, bias }
    }

    pub fn localize(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let raw = g.matmul(h, p[self.weight])?;
        let raw = g.add(raw, p[self.bias])?;
        let s = g.narrow(raw, 1, 0, 2)?;
        let s = g.sigmoid(s);
        let t = g.narrow(raw, 1, 2, 2)?;
        let t = g.tanh(t);
        let st = g.concat(&[s, t], 1)?;
        g.reshape(st, &[4])
    }
}

/// Graph handles produced by one attention step.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStep {
    pub params: Var,
    pub grid: Var,
    pub region: Var,
    pub mask: Var,
    pub degenerate: bool,
    pub part_feature: Var,
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct Unrolled {
    pub steps: Vec<AttentionStep>,
    /// `[C]` per-class maximum over steps.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionNet {
    pub config: AttentionConfig,
    pub projection_weight: ParamId,
    pub projection_bias: ParamId,
    pub lstm: Lstm,
    pub localizer: Localizer,
    pub codebook: Codebook,
    pub classifier: Classifier,
}

impl AttentionNet {
    pub fn new(
        config: AttentionConfig,
        descriptor_dim: usize,
        codewords: usize,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let codebook = Codebook::new(codewords, descriptor_dim, store, rng)?;
        let enc = codebook.encoded_dim();
        let projection_weight = store.insert(
            "attention.projection.weight",
            normal_tensor(&[descriptor_dim, enc], (1.0 / descriptor_dim as f64).sqrt(), rng),
        );
        let projection_bias = store.insert("attention.projection.bias", Tensor::zeros(&[enc]));
        let lstm = Lstm::new(enc, config.hidden, store, rng);
        let localizer = Localizer::new(config.hidden, store, rng);
        let classifier = Classifier::new(enc, classes, store, rng);
        Ok(AttentionNet {
            config,
            projection_weight,
            projection_bias,
            lstm,
            localizer,
            codebook,
            classifier,
        })
    }

    /// Projection of the globally average-pooled map, the first LSTM input.
    pub fn global_input(&self, g: &mut Graph, p: &Bound, fm: Var) -> Result<Var> {
        let s = g.shape(fm).to_vec();
        let flat = g.reshape(fm, &[s[0] * s[1], s[2]])?;
        let avg = g.mean(flat, Some(0))?;
        let avg = g.reshape(avg, &[1, s[2]])?;
        let x = g.matmul(avg, p[self.projection_weight])?;
        g.add(x, p[self.projection_bias])
    }

    pub fn unroll(&self, g: &mut Graph, p: &Bound, fm: Var) -> Result<Unrolled> {
        let s = g.shape(fm).to_vec();
        if s.len() != 3 || s[2] != self.codebook.dim {
            return Err(Error::ShapeMismatch {
                op: "unroll",
                lhs: vec![0, 0, self.codebook.dim],
                rhs: s,
            });
        }
        let (hf, wf, d) = (s[0], s[1], s[2]);
        let (hr, wr) = (self.config.region_height, self.config.region_width);
        let mut x = self.global_input(g, p, fm)?;
        let mut state = AttentionState::zeros(g, self.config.hidden)?;
        let mut steps = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            state = self.lstm.step(g, p, x, state)?;
            let params = self.localizer.localize(g, p, state.h)?;
            let grid = g.affine_grid(params, hr, wr)?;
            let region = g.bilinear_sample(fm, grid)?;
            let (mask, degenerate) = g.attention_mask(grid, hf, wf)?;
            let descriptors = g.reshape(region, &[hr * wr, d])?;
            let part_feature = self.codebook.encode(g, p, descriptors)?;
            let scores = self.classifier.classify(g, p, part_feature)?;
            steps.push(AttentionStep {
                params,
                grid,
                region,
                mask,
                degenerate,
                part_feature,
                scores,
            });
            x = part_feature;
        }
        let all: Vec<Var> = steps.iter().map(|s| s.scores).collect();
        let stacked = g.concat(&all, 0)?;
        let pooled = g.max(stacked, 0)?;
        Ok(Unrolled { steps, pooled })
    }
}

/// Per-class maximum over per-step score vectors.
pub fn category_max_pool(step_scores: &[Vec<f64>]) -> Vec<f64> {
    let c = step_scores.first().map_or(0, Vec::len);
    (0..c)
        .map(|j| step_scores.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_fm(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_grid_is_lattice() {
        let g = affine_grid(&AffineParams::IDENTITY, 3, 5);
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(g.point(i, j), (kernels::lattice(j, 5), kernels::lattice(i, 3)));
            }
        }
    }

    #[test]
    fn translation_shifts_x() {
        let p = AffineParams::new(1.0, 1.0, 0.5, 0.0).unwrap();
        let g = affine_grid(&p, 2, 3);
        let id = affine_grid(&AffineParams::IDENTITY, 2, 3);
        for (a, b) in g.coords.chunks(2).zip(id.coords.chunks(2)) {
            assert_eq!(a[0], b[0] + 0.5);
            assert_eq!(a[1], b[1]);
        }
    }

    #[test]
    fn half_scale_lattice() {
        let p = AffineParams::new(0.5, 0.5, 0.0, 0.0).unwrap();
        let g = affine_grid(&p, 3, 3);
        let xs: Vec<f64> = (0..3).map(|j| g.point(0, j).0).collect();
        assert_eq!(xs, vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn identity_sampling_reproduces_map() {
        let fm = random_fm(5, 4, 3, 9);
        let grid = affine_grid(&AffineParams::IDENTITY, 5, 4);
        let out = bilinear_sample(&fm, &grid);
        for (a, b) in out.iter().zip(&fm.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_map_samples_constant() {
        let fm = FeatureMap::new(4, 6, 2, vec![1.75; 48]).unwrap();
        let p = AffineParams::new(0.37, 0.81, -0.2, 0.15).unwrap();
        let out = bilinear_sample(&fm, &affine_grid(&p, 5, 7));
        assert!(out.iter().all(|&v| (v - 1.75).abs() < 1e-12));
    }

    #[test]
    fn identity_mask_is_uniform() {
        let grid = affine_grid(&AffineParams::IDENTITY, 4, 3);
        let m = attention_mask(&grid, 4, 3);
        assert!(!m.degenerate);
        assert!(m.values.iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn out_of_range_mask_is_flagged_uniform() {
        let p = AffineParams {
            sx: 0.1,
            sy: 0.1,
            tx: 5.0,
            ty: 5.0,
        };
        let m = attention_mask(&affine_grid(&p, 2, 2), 3, 3);
        assert!(m.degenerate);
        assert!(m.values.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn lstm_zero_everything_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = Lstm::new(3, 2, &mut store, &mut rng);
        for id in [lstm.w_input, lstm.w_hidden, lstm.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let s0 = AttentionState::zeros(&mut g, 2).unwrap();
        let s1 = lstm.step(&mut g, &p, x, s0).unwrap();
        assert_eq!(g.value(s1.h), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = Lstm::new(3, 2, &mut store, &mut rng);
        let h = 2;
        {
            let b = store.get_mut(lstm.bias).data_mut();
            b.iter_mut().for_each(|v| *v = 0.0);
            b[h..2 * h].iter_mut().for_each(|v| *v = 20.0);
            b[..h].iter_mut().for_each(|v| *v = -20.0);
        }
        for id in [lstm.w_input, lstm.w_hidden] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let hv = g.constant(&[1, 2], vec![0.1, 0.4]).unwrap();
        let cv = g.constant(&[1, 2], vec![0.7, -1.3]).unwrap();
        let s1 = lstm.step(&mut g, &p, x, AttentionState { h: hv, c: cv }).unwrap();
        let c = g.value(s1.c);
        assert!((c[0] - 0.7).abs() < 1e-6 && (c[1] + 1.3).abs() < 1e-6, "{c:?}");
    }

    #[test]
    fn lstm_rejects_bad_input_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = Lstm::new(3, 2, &mut store, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let s0 = AttentionState::zeros(&mut g, 2).unwrap();
        assert!(lstm.step(&mut g, &p, x, s0).is_err());
    }

    #[test]
    fn localizer_first_glimpse() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loc = Localizer::new(5, &mut store, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let h = g.constant(&[1, 5], vec![0.0; 5]).unwrap();
        let a = loc.localize(&mut g, &p, h).unwrap();
        let v = g.value(a);
        assert!((v[0] - 0.9002).abs() < 1e-4 && (v[1] - 0.9002).abs() < 1e-4);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn category_pool_is_elementwise_max() {
        assert_eq!(category_max_pool(&[vec![0.9, 0.1], vec![0.2, 0.8]]), vec![0.9, 0.8]);
        assert_eq!(category_max_pool(&[vec![0.3, 0.4], vec![0.3, 0.4]]), vec![0.3, 0.4]);
    }
}
