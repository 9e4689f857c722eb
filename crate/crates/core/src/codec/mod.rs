//! The articulated-local-element codec: a UNet pose encoder over the
//! positional map, a shared patch decoder with residual/normal/color heads,
//! articulation into world space, and area-adaptive resampling.

mod sampling;

pub use sampling::{grid_side, lattice_areas, patch_counts, sample_local_grid, stratified_samples};

use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, PosedBody};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::loss::PredictionVars;
use crate::scalar::Real;
use crate::tensor::{he_uniform, Activation, BnMode, Gradients, ParamStore, RunningStats, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const SOFTPLUS: Activation = Activation::Softplus { beta: 1.0 };
const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Samples per patch `M` (a perfect square).
    pub patch_samples: usize,
    /// Per-pixel pose feature channels `Z`.
    pub feature_dim: usize,
    /// Square positional-map side; divisible by `2^len(encoder_channels)`.
    pub uv_resolution: usize,
    /// Output channels of the encoder's down blocks.
    pub encoder_channels: Vec<usize>,
    /// Decoder hidden width.
    pub hidden: usize,
    /// Init gain of the residual output layer relative to He-uniform.
    pub residual_init_gain: f64,
    pub use_articulation: bool,
    pub use_u_k: bool,
    pub predict_normals: bool,
    pub predict_colors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_samples: 16,
            feature_dim: 64,
            uv_resolution: 32,
            encoder_channels: vec![32, 64, 128, 128, 128],
            hidden: 256,
            residual_init_gain: 0.01,
            use_articulation: true,
            use_u_k: true,
            predict_normals: true,
            predict_colors: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        grid_side(self.patch_samples)?;
        let depth = self.encoder_channels.len();
        if depth == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::invalid("model.encoder_channels must be a nonempty list of positive widths"));
        }
        if self.uv_resolution == 0 || depth >= usize::BITS as usize || self.uv_resolution % (1 << depth) != 0 {
            return Err(Error::invalid(format!(
                "model.uv_resolution {} must be a positive multiple of 2^{depth}",
                self.uv_resolution
            )));
        }
        if self.feature_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("model.feature_dim and model.hidden must be positive"));
        }
        if !(self.residual_init_gain >= 0.0) || !self.residual_init_gain.is_finite() {
            return Err(Error::invalid("model.residual_init_gain must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Width of the decoder input `[u_k, p, z_k]`.
    pub fn decoder_input_width(&self) -> usize {
        self.patch_input_width() + 2
    }

    fn patch_input_width(&self) -> usize {
        (if self.use_u_k { 2 } else { 0 }) + self.feature_dim
    }
}

/// Which optional heads to evaluate (further limited by the model's toggles).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub normals: bool,
    pub colors: bool,
}

impl Heads {
    pub const ALL: Heads = Heads { normals: true, colors: true };
    pub const NONE: Heads = Heads { normals: false, colors: false };
}

/// Decoder sample locations of one frame: the patch of each sample and its
/// local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSamples<T> {
    pub patch: Vec<usize>,
    pub p: Vec<[T; 2]>,
}

impl<T: Real> PatchSamples<T> {
    /// The regular `M`-point lattice on every one of `k` patches.
    pub fn grid(k: usize, m: usize) -> Result<Self> {
        let g = sample_local_grid::<T>(m)?;
        Ok(PatchSamples {
            patch: (0..k).flat_map(|ki| std::iter::repeat_n(ki, m)).collect(),
            p: (0..k).flat_map(|_| g.iter().copied()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.patch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch.is_empty()
    }
}

/// Decoded, articulated point cloud of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub normals: Option<Vec<Vec3<T>>>,
    pub colors: Option<Vec<Vec3<T>>>,
    /// Decoder residuals in the local frame.
    pub residuals: Vec<Vec3<T>>,
    pub patch: Vec<usize>,
}

impl<T: Real> PredictedCloud<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Tape handles produced by one recorded forward pass.
pub struct Recorded {
    /// Leaf of every parameter, in parameter-store order.
    pub params: Vec<Var>,
    /// Per-frame slices of the batch outputs.
    pub frames: Vec<PredictionVars>,
}

impl Recorded {
    /// Gradient of every parameter in store order (zeros where unreachable).
    pub fn param_grads<T: Real>(&self, grads: &mut Gradients<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(store.by_index(i).shape().to_vec())))
            .collect()
    }
}

/// All learnable state plus structural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleModel<T> {
    config: ModelConfig,
    /// Flat pixel index of every chart point.
    chart_pixels: Vec<usize>,
    chart_uv: Vec<[T; 2]>,
    params: ParamStore<T>,
    buffers: IndexMap<String, RunningStats<T>>,
    trained: bool,
}

enum Stats<'a, T> {
    Train(&'a mut IndexMap<String, RunningStats<T>>),
    Eval(&'a IndexMap<String, RunningStats<T>>),
}

struct Builder<'a, T> {
    tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    leaves: Vec<Var>,
    stats: Stats<'a, T>,
}

impl<T: Real> Builder<'_, T> {
    fn p(&self, name: &str) -> Var {
        self.leaves[self.params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn bn(&mut self, x: Var, name: &str, act: Option<Activation>) -> Result<Var> {
        let (g, b) = (self.p(&format!("{name}.gamma")), self.p(&format!("{name}.beta")));
        let eps = T::lit(BN_EPS);
        match &mut self.stats {
            Stats::Train(m) => {
                let running = m.get_mut(name).expect("running stats");
                let mode = BnMode::Train { running, momentum: T::lit(BN_MOMENTUM) };
                self.tape.batch_norm(x, g, b, mode, eps, act)
            }
            Stats::Eval(m) => {
                let mode = BnMode::Eval { running: &m[name] };
                self.tape.batch_norm(x, g, b, mode, eps, act)
            }
        }
    }

    /// Linear layer (optionally with the factored patch/point inputs) + BN + softplus.
    fn dense(&mut self, name: &str, hidden: Option<Var>, inputs: Option<(Var, Var, &Arc<Vec<usize>>)>) -> Result<Var> {
        let mut terms = Vec::new();
        if let Some(h) = hidden {
            terms.push((h, self.p(&format!("{name}.w"))));
        }
        let mut gathered = None;
        if let Some((patch_in, point_in, rows)) = inputs {
            let pw = self.p(&format!("{name}.w_patch"));
            let per_patch = self.tape.matmul(patch_in, pw)?;
            gathered = Some((per_patch, rows.clone()));
            terms.push((point_in, self.p(&format!("{name}.w_point"))));
        }
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.affine(&terms, Some(b), gathered)?;
        self.bn(y, &format!("{name}.bn"), Some(SOFTPLUS))
    }

    fn head(&mut self, name: &str, h: Var) -> Result<Var> {
        let z = self.dense(&format!("{name}.l1"), Some(h), None)?;
        let (w, b) = (self.p(&format!("{name}.out.w")), self.p(&format!("{name}.out.b")));
        self.tape.linear(z, w, Some(b))
    }
}

fn vec3_rows<T: Real>(t: &Tensor<T>) -> Vec<Vec3<T>> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

impl<T: Real> ScaleModel<T> {
    /// Fresh model for `template`'s chart with seeded He-uniform weights.
    pub fn for_template(config: ModelConfig, template: &BodyTemplate<T>, seed: u64) -> Result<Self> {
        let res = config.uv_resolution;
        if template.uv_resolution != (res, res) {
            return Err(Error::Mismatch(format!(
                "template chart is {:?}, model expects {res}x{res}",
                template.uv_resolution
            )));
        }
        Self::new(config, template.chart_pixels(), seed)
    }

    /// Fresh model over the chart points at flat pixel indices `chart_pixels`
    /// (`row * res + col`), with seeded He-uniform weights.
    pub fn new(config: ModelConfig, chart_pixels: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let res = config.uv_resolution;
        if chart_pixels.is_empty() {
            return Err(Error::invalid("the UV chart is empty"));
        }
        let mut seen = vec![false; res * res];
        for &p in &chart_pixels {
            if p >= res * res || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("chart pixel {p} is out of range or repeated")));
            }
        }
        let inv = 1.0 / res as f64;
        let chart_uv = chart_pixels
            .iter()
            .map(|&p| [T::lit(((p % res) as f64 + 0.5) * inv), T::lit(((p / res) as f64 + 0.5) * inv)])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = IndexMap::new();
        let mut bn = |params: &mut ParamStore<T>, name: String, c: usize| {
            params.insert(format!("{name}.gamma"), Tensor::full([c], T::one()));
            params.insert(format!("{name}.beta"), Tensor::zeros([c]));
            buffers.insert(name, RunningStats::new(c));
        };

        let ch = &config.encoder_channels;
        let depth = ch.len();
        for i in 0..depth {
            let cin = if i == 0 { 3 } else { ch[i - 1] };
            let w = he_uniform(&[ch[i], cin, KERNEL, KERNEL], cin * KERNEL * KERNEL, 1.0, &mut rng);
            params.insert(format!("enc.down{i}.w"), w);
            bn(&mut params, format!("enc.down{i}.bn"), ch[i]);
        }
        for j in 0..depth {
            let cin = if j == 0 { ch[depth - 1] } else { 2 * ch[depth - 1 - j] };
            let cout = if j + 1 == depth { config.feature_dim } else { ch[depth - 2 - j] };
            // stride 2: each output pixel sees a quarter of the kernel taps
            let w = he_uniform(&[cin, cout, KERNEL, KERNEL], cin * KERNEL * KERNEL / 4, 1.0, &mut rng);
            params.insert(format!("enc.up{j}.w"), w);
            if j + 1 < depth {
                bn(&mut params, format!("enc.up{j}.bn"), cout);
            }
        }

        let (w, pin) = (config.hidden, config.patch_input_width());
        let input = config.decoder_input_width();
        for l in 1..=6 {
            let name = format!("dec.l{l}");
            let fan_in = match l {
                1 => input,
                4 => w + input,
                _ => w,
            };
            if l != 1 {
                params.insert(format!("{name}.w"), he_uniform(&[w, w], fan_in, 1.0, &mut rng));
            }
            if l == 1 || l == 4 {
                params.insert(format!("{name}.w_patch"), he_uniform(&[pin, w], fan_in, 1.0, &mut rng));
                params.insert(format!("{name}.w_point"), he_uniform(&[2, w], fan_in, 1.0, &mut rng));
            }
            params.insert(format!("{name}.b"), Tensor::zeros([w]));
            bn(&mut params, format!("{name}.bn"), w);
        }
        let heads = [
            ("head.res", true, config.residual_init_gain),
            ("head.nrm", config.predict_normals, 1.0),
            ("head.col", config.predict_colors, 1.0),
        ];
        for (name, enabled, gain) in heads {
            if !enabled {
                continue;
            }
            params.insert(format!("{name}.l1.w"), he_uniform(&[w, w], w, 1.0, &mut rng));
            params.insert(format!("{name}.l1.b"), Tensor::zeros([w]));
            bn(&mut params, format!("{name}.l1.bn"), w);
            params.insert(format!("{name}.out.w"), he_uniform(&[w, 3], w, gain, &mut rng));
            params.insert(format!("{name}.out.b"), Tensor::zeros([3]));
        }

        Ok(ScaleModel {
            config,
            chart_pixels,
            chart_uv,
            params,
            buffers,
            trained: false,
        })
    }

    /// Rebuilds a model from stored parts (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        chart_pixels: Vec<usize>,
        params: Vec<(String, Tensor<T>)>,
        buffers: Vec<(String, RunningStats<T>)>,
        trained: bool,
    ) -> Result<Self> {
        let mut model = ScaleModel::new(config, chart_pixels, 0)?;
        model.params.assign(params)?;
        if buffers.len() != model.buffers.len() {
            return Err(Error::Mismatch(format!("expected {} norm buffers, found {}", model.buffers.len(), buffers.len())));
        }
        for (name, stats) in buffers {
            let slot = model
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::Mismatch(format!("unknown norm buffer {name}")))?;
            if slot.channels() != stats.channels() || stats.var.len() != stats.channels() {
                return Err(Error::Mismatch(format!("norm buffer {name} has the wrong channel count")));
            }
            *slot = stats;
        }
        model.trained = trained;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of patches `K`.
    pub fn chart_len(&self) -> usize {
        self.chart_pixels.len()
    }

    pub fn chart_pixels(&self) -> &[usize] {
        &self.chart_pixels
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, RunningStats<T>> {
        &self.buffers
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    /// Zeroes the residual output layer so every point sits on its body point.
    pub fn zero_residual_head(&mut self) {
        for name in ["head.res.out.w", "head.res.out.b"] {
            self.params.get_mut(name).expect("residual head").data_mut().fill(T::zero());
        }
    }

    /// Checks that `template` carries the chart this model was built for.
    pub fn check_template(&self, template: &BodyTemplate<T>) -> Result<()> {
        let res = self.config.uv_resolution;
        if template.uv_resolution != (res, res) || template.chart_pixels() != self.chart_pixels {
            return Err(Error::Mismatch(format!(
                "template chart ({} points at {:?}) differs from the model chart ({} points at {res}x{res})",
                template.chart_len(),
                template.uv_resolution,
                self.chart_len()
            )));
        }
        Ok(())
    }

    fn check_bodies(&self, bodies: &[&PosedBody<T>], samples: &[&PatchSamples<T>]) -> Result<()> {
        if bodies.is_empty() || bodies.len() != samples.len() {
            return Err(Error::dim("forward needs one sample set per body and at least one body"));
        }
        let res = self.config.uv_resolution;
        for b in bodies {
            if b.chart_len() != self.chart_len() {
                return Err(Error::Mismatch(format!("body has K = {}, model has K = {}", b.chart_len(), self.chart_len())));
            }
            if b.map.shape() != [3, res, res] {
                return Err(Error::dim(format!("positional map {:?} does not match resolution {res}", b.map.shape())));
            }
        }
        for s in samples {
            if s.is_empty() || s.p.len() != s.patch.len() || s.patch.iter().any(|&k| k >= self.chart_len()) {
                return Err(Error::dim("patch samples are empty or reference missing patches"));
            }
        }
        Ok(())
    }

    /// Records a training-mode forward pass (batch statistics, running
    /// statistics updated) with gradients enabled.
    pub fn record_train(
        &mut self,
        tape: &mut Tape<T>,
        bodies: &[&PosedBody<T>],
        samples: &[&PatchSamples<T>],
        heads: Heads,
    ) -> Result<Recorded> {
        self.check_bodies(bodies, samples)?;
        let leaves = self.params.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
        let builder = Builder { tape, params: &self.params, leaves, stats: Stats::Train(&mut self.buffers) };
        forward(&self.config, &self.chart_pixels, &self.chart_uv, builder, bodies, samples, heads)
    }

    /// Records an eval-mode forward pass. Parameter leaves track gradients
    /// only when `grad` is set.
    pub fn record_eval(
        &self,
        tape: &mut Tape<T>,
        bodies: &[&PosedBody<T>],
        samples: &[&PatchSamples<T>],
        heads: Heads,
        grad: bool,
    ) -> Result<Recorded> {
        self.check_bodies(bodies, samples)?;
        let leaves = self.params.iter().map(|(_, t)| tape.leaf(t.clone(), grad)).collect();
        let builder = Builder { tape, params: &self.params, leaves, stats: Stats::Eval(&self.buffers) };
        forward(&self.config, &self.chart_pixels, &self.chart_uv, builder, bodies, samples, heads)
    }

    /// Eval-mode feature map `[Z, H, W]` of one positional map.
    pub fn encode(&self, map: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
        let res = self.config.uv_resolution;
        if map.shape() != [3, res, res] || mask.len() != res * res {
            return Err(Error::dim(format!("positional map {:?} does not match resolution {res}", map.shape())));
        }
        let mut input = map.clone();
        let hw = res * res;
        for c in 0..3 {
            for (px, &valid) in mask.iter().enumerate() {
                if !valid {
                    input.data_mut()[c * hw + px] = T::zero();
                }
            }
        }
        let mut tape = Tape::new();
        let leaves = self.params.iter().map(|(_, t)| tape.leaf(t.clone(), false)).collect();
        let mut b = Builder { tape: &mut tape, params: &self.params, leaves, stats: Stats::Eval(&self.buffers) };
        let x = b.tape.constant(input.reshape([1, 3, res, res])?);
        let f = encoder(&self.config, &mut b, x)?;
        tape.value(f).clone().reshape([self.config.feature_dim, res, res])
    }

    /// Eval-mode prediction for explicit samples of each body.
    pub fn predict_samples(&self, bodies: &[&PosedBody<T>], samples: &[&PatchSamples<T>]) -> Result<Vec<PredictedCloud<T>>> {
        let mut tape = Tape::new();
        let rec = self.record_eval(&mut tape, bodies, samples, Heads::ALL, false)?;
        Ok(rec
            .frames
            .iter()
            .zip(samples)
            .map(|(f, s)| PredictedCloud {
                points: vec3_rows(tape.value(f.points)),
                normals: f.normals.map(|v| vec3_rows(tape.value(v))),
                colors: f.colors.map(|v| vec3_rows(tape.value(v))),
                residuals: vec3_rows(tape.value(f.residuals)),
                patch: s.patch.clone(),
            })
            .collect())
    }

    /// Eval-mode `K * M` cloud of one body.
    pub fn predict(&self, body: &PosedBody<T>) -> Result<PredictedCloud<T>> {
        let grid = PatchSamples::grid(self.chart_len(), self.config.patch_samples)?;
        Ok(self.predict_samples(&[body], &[&grid])?.remove(0))
    }

    /// Area-proportional resampling at `density` points per square meter.
    ///
    /// Patch areas come from the triangulated default lattice; patch `k` then
    /// receives `max(1, round(density * area_k))` stratified samples.
    pub fn adaptive_sample(&self, body: &PosedBody<T>, density: f64, seed: u64) -> Result<(PredictedCloud<T>, Vec<T>)> {
        if !self.trained {
            return Err(Error::invalid("adaptive sampling needs a trained model"));
        }
        if !(density > 0.0) || !density.is_finite() {
            return Err(Error::invalid(format!("sampling density must be positive, got {density}")));
        }
        let m = self.config.patch_samples;
        let base = self.predict(body)?;
        let areas = lattice_areas(&base.points, m)?;
        let counts = patch_counts(&areas, density);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = PatchSamples { patch: Vec::new(), p: Vec::new() };
        for (k, &n) in counts.iter().enumerate() {
            samples.patch.extend(std::iter::repeat_n(k, n));
            samples.p.extend(stratified_samples::<T, _>(n, &mut rng));
        }
        let cloud = self.predict_samples(&[body], &[&samples])?.remove(0);
        Ok((cloud, areas))
    }
}

fn encoder<T: Real>(config: &ModelConfig, b: &mut Builder<'_, T>, x: Var) -> Result<Var> {
    let depth = config.encoder_channels.len();
    let mut skips = Vec::with_capacity(depth);
    let mut h = x;
    for i in 0..depth {
        let w = b.p(&format!("enc.down{i}.w"));
        let y = b.tape.conv2d(h, w, 2, 1)?;
        h = b.bn(y, &format!("enc.down{i}.bn"), Some(Activation::LeakyRelu(LEAKY_SLOPE)))?;
        skips.push(h);
    }
    for j in 0..depth {
        let a = b.tape.activation(h, Activation::Relu);
        let w = b.p(&format!("enc.up{j}.w"));
        let y = b.tape.conv_transpose2d(a, w, 2, 1)?;
        if j + 1 == depth {
            h = y;
        } else {
            let y = b.bn(y, &format!("enc.up{j}.bn"), None)?;
            h = b.tape.concat_channels(y, skips[depth - 2 - j])?;
        }
    }
    Ok(h)
}

fn forward<T: Real>(
    config: &ModelConfig,
    chart_pixels: &[usize],
    chart_uv: &[[T; 2]],
    mut b: Builder<'_, T>,
    bodies: &[&PosedBody<T>],
    samples: &[&PatchSamples<T>],
    heads: Heads,
) -> Result<Recorded> {
    let res = config.uv_resolution;
    let (nb, k, hw) = (bodies.len(), chart_pixels.len(), res * res);

    // encoder over the masked positional maps
    let mut maps = Vec::with_capacity(nb * 3 * hw);
    for body in bodies {
        let d = body.map.data();
        for c in 0..3 {
            maps.extend((0..hw).map(|px| if body.mask[px] { d[c * hw + px] } else { T::zero() }));
        }
    }
    let x = b.tape.constant(Tensor::new([nb, 3, res, res], maps)?);
    let fmap = encoder(config, &mut b, x)?;

    // per-patch inputs [u_k, z_k] for every (frame, patch)
    let pix: Vec<usize> = (0..nb).flat_map(|bi| chart_pixels.iter().map(move |&p| bi * hw + p)).collect();
    let z = b.tape.gather_pixels(fmap, Arc::new(pix))?;
    let patch_in = if config.use_u_k {
        let u: Vec<T> = (0..nb).flat_map(|_| chart_uv.iter().flatten().copied()).collect();
        let u = b.tape.constant(Tensor::new([nb * k, 2], u)?);
        b.tape.concat_cols(u, z)?
    } else {
        z
    };

    // per-sample rows
    let rows: usize = samples.iter().map(|s| s.len()).sum();
    let mut row_patch = Vec::with_capacity(rows);
    let mut p = Vec::with_capacity(rows * 2);
    for (bi, s) in samples.iter().enumerate() {
        row_patch.extend(s.patch.iter().map(|&kk| bi * k + kk));
        p.extend(s.p.iter().flatten().copied());
    }
    let row_patch = Arc::new(row_patch);
    let point_in = b.tape.constant(Tensor::new([rows, 2], p)?);

    let h1 = b.dense("dec.l1", None, Some((patch_in, point_in, &row_patch)))?;
    let h2 = b.dense("dec.l2", Some(h1), None)?;
    let h3 = b.dense("dec.l3", Some(h2), None)?;
    let h4 = b.dense("dec.l4", Some(h3), Some((patch_in, point_in, &row_patch)))?;
    let h5 = b.dense("dec.l5", Some(h4), None)?;
    let trunk = b.dense("dec.l6", Some(h5), None)?;

    let r = b.head("head.res", trunk)?;
    let normals_local = if config.predict_normals && heads.normals {
        let n = b.head("head.nrm", trunk)?;
        Some(b.tape.normalize_rows(n)?)
    } else {
        None
    };
    let colors = if config.predict_colors && heads.colors {
        let c = b.head("head.col", trunk)?;
        Some(b.tape.activation(c, Activation::Sigmoid))
    } else {
        None
    };

    // articulation: x = T_k r + t_k, n = normalize(T_k n_local)
    let t: Vec<T> = row_patch
        .iter()
        .flat_map(|&bp| bodies[bp / k].points[bp % k])
        .collect();
    let (points, normals) = if config.use_articulation {
        let frames: Vec<T> = bodies
            .iter()
            .flat_map(|body| body.frames.iter().flat_map(|f| f.iter().flatten().copied()))
            .collect();
        let frames = Arc::new(frames);
        let tr = b.tape.frame_apply(r, frames.clone(), row_patch.clone())?;
        let x = b.tape.add_const(tr, &t)?;
        let n = match normals_local {
            Some(nl) => {
                let tn = b.tape.frame_apply(nl, frames, row_patch.clone())?;
                Some(b.tape.normalize_rows(tn)?)
            }
            None => None,
        };
        (x, n)
    } else {
        (b.tape.add_const(r, &t)?, normals_local)
    };

    let mut frames = Vec::with_capacity(nb);
    let mut start = 0;
    for s in samples {
        let end = start + s.len();
        let whole = start == 0 && end == rows;
        let mut slice = |v: Var| if whole { Ok(v) } else { b.tape.slice_rows(v, start, end) };
        frames.push(PredictionVars {
            points: slice(points)?,
            normals: normals.map(&mut slice).transpose()?,
            colors: colors.map(&mut slice).transpose()?,
            residuals: slice(r)?,
        });
        start = end;
    }
    Ok(Recorded { params: b.leaves, frames })
}

#[cfg(test)]
mod tests;
