//! The shared image-to-image backbone and its key-conditioned task modes.
//!
//! One network serves three tasks. Which function it computes is decided
//! purely by what fills the masked-out weight region:
//!
//! * purify:      `N[W ⊙ M + W ⊙ M̄](noisy)` — the full trained set,
//! * embed(i):    `N[W ⊙ M + We_i ⊙ M̄](secret, cover)`,
//! * recover(i):  `N[W ⊙ M + Wr_i ⊙ M̄](stego)`,
//!
//! where `We_i`/`Wr_i` regenerate deterministically from the i-th key pair.
//! Single-image tasks duplicate their input into both network slots.

mod net;
mod ops;

use std::sync::Arc;

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::keyed_weights::{
    assemble, generate_key_weights, BinaryMask, KeyRegistry, ShapeManifest, TensorSpec, WeightSet,
    WeightOrigin,
};

pub(crate) use net::{Capture, Grads, Net, ParamsView};
pub(crate) use ops::KAREA;

/// Number of image slots the network consumes (6 input channels).
pub const INPUT_SLOTS: usize = 2;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    LeakyRelu,
    Silu,
    Tanh,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Channel width of the first stage; stage `s` uses `base_width * 2^s`.
    pub base_width: usize,
    /// Number of down/up stages. Depth 0 is a two-convolution net.
    pub depth: usize,
    /// Expected square image side. Must be divisible by `2^depth`.
    pub side: usize,
    pub nonlinearity: Nonlinearity,
    /// Fixed at 2 (two stacked RGB images).
    #[serde(default = "default_input_slots")]
    pub input_slots: usize,
}

fn default_input_slots() -> usize {
    INPUT_SLOTS
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.side == 0 || self.side % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "side {} must be positive and divisible by 2^depth = {}",
                self.side,
                1 << self.depth
            )));
        }
        if self.input_slots != INPUT_SLOTS {
            return Err(Error::Config(format!(
                "input_slots is fixed at {INPUT_SLOTS}"
            )));
        }
        Ok(())
    }
}

/// Which assembled network runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    Purify,
    /// 1-based key index.
    Embed(usize),
    /// 1-based key index.
    Recover(usize),
}

/// A normalized RGB image, channels-first `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane(Array3<f64>);

impl ImagePlane {
    /// Wraps a `[3, H, W]` array, clamping into `[0, 1]`. Non-finite values
    /// are rejected.
    pub fn from_array(a: Array3<f64>) -> Result<Self> {
        if a.dim().0 != 3 {
            return Err(Error::Shape(format!(
                "image plane needs 3 channels, got {}",
                a.dim().0
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("image contains non-finite values".into()));
        }
        Ok(ImagePlane(a.mapv(|v| v.clamp(0.0, 1.0))))
    }

    pub fn constant(value: f64, height: usize, width: usize) -> Self {
        ImagePlane(Array3::from_elem((3, height, width), value.clamp(0.0, 1.0)))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImagePlane(Array3::zeros((3, height, width)))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    /// Decodes interleaved 8-bit RGB (row-major, HWC).
    pub fn from_rgb8(pixels: &[u8], width: usize, height: usize) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "expected {} rgb bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        let mut a = Array3::zeros((3, height, width));
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    a[(c, y, x)] = pixels[(y * width + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Ok(ImagePlane(a))
    }

    /// Quantizes to interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.0.dim();
        let mut out = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] =
                        (self.0[(c, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        out
    }
}

/// Always-trainable per-convolution bias vectors. Biases sit outside the
/// masked manifest: the key fill covers only the high-capacity kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSet {
    tensors: Vec<Vec<f64>>,
}

impl BiasSet {
    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &[f64] {
        &self.tensors[idx]
    }

    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx]
    }

    pub fn from_tensors(backbone: &Backbone, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let sizes = backbone.bias_sizes();
        if tensors.len() != sizes.len()
            || tensors.iter().zip(&sizes).any(|(t, &s)| t.len() != s)
        {
            return Err(Error::Shape("bias tensors do not match the backbone".into()));
        }
        if tensors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("bias contains non-finite values".into()));
        }
        Ok(BiasSet { tensors })
    }

    pub fn zeros(backbone: &Backbone) -> Self {
        BiasSet {
            tensors: backbone.bias_sizes().iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

/// The network topology plus the manifest addressing its kernel tensors.
#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    manifest: Arc<ShapeManifest>,
    net: Net,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        // Net is reconstructed; it is derived entirely from the config.
        Backbone::new(self.config.clone()).expect("config already validated")
    }
}

/// Builds the backbone and its weight manifest.
pub fn build_backbone(config: BackboneConfig) -> Result<Backbone> {
    Backbone::new(config)
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let net = Net::new(config.base_width, config.depth, config.nonlinearity);
        let tensors = net
            .convs
            .iter()
            .map(|c| TensorSpec {
                name: c.name.clone(),
                dims: vec![c.out_c, c.in_c, 3, 3],
                fan_in: c.in_c * KAREA,
                fan_out: c.out_c * KAREA,
            })
            .collect();
        let manifest = Arc::new(ShapeManifest::new(tensors)?);
        Ok(Backbone { config, manifest, net })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Arc<ShapeManifest> {
        &self.manifest
    }

    /// Bias vector lengths per convolution, in manifest order.
    pub fn bias_sizes(&self) -> Vec<usize> {
        self.net.convs.iter().map(|c| c.out_c).collect()
    }

    pub(crate) fn net(&self) -> &Net {
        &self.net
    }

    fn check_input(&self, img: &ImagePlane) -> Result<()> {
        let div = 1 << self.config.depth;
        if img.height() % div != 0 || img.width() % div != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by 2^depth = {div}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    pub(crate) fn params_view<'a>(
        &self,
        kernels: &'a WeightSet,
        biases: &'a BiasSet,
    ) -> ParamsView<'a> {
        ParamsView {
            kernels: (0..self.manifest.len()).map(|i| kernels.tensor(i)).collect(),
            biases: (0..self.net.convs.len()).map(|i| biases.tensor(i)).collect(),
        }
    }

    /// Raw batched forward over already-assembled weights.
    pub(crate) fn raw_forward(
        &self,
        kernels: &WeightSet,
        biases: &BiasSet,
        x6: &Array4<f64>,
        cap: Capture,
    ) -> net::ForwardOut {
        self.net.forward(&self.params_view(kernels, biases), x6, cap)
    }
}

/// Trainable model: shared weights, biases, and the binary mask.
#[derive(Debug, Clone)]
pub struct ModelState {
    backbone: Backbone,
    shared: WeightSet,
    biases: BiasSet,
    mask: BinaryMask,
}

impl ModelState {
    pub fn new(
        backbone: Backbone,
        shared: WeightSet,
        biases: BiasSet,
        mask: BinaryMask,
    ) -> Result<Self> {
        if shared.manifest().as_ref() != backbone.manifest().as_ref()
            || mask.manifest().as_ref() != backbone.manifest().as_ref()
        {
            return Err(Error::Shape(
                "model state parts disagree on the weight manifest".into(),
            ));
        }
        Ok(ModelState { backbone, shared, biases, mask })
    }

    /// Fresh model: Glorot-initialized shared weights (from `init_seed`),
    /// zero biases, and a mask sampled from `(alpha, mask_seed)`.
    pub fn init(
        config: BackboneConfig,
        alpha: f64,
        mask_seed: u64,
        init_seed: u64,
    ) -> Result<Self> {
        let backbone = Backbone::new(config)?;
        let manifest = Arc::clone(backbone.manifest());
        let init = generate_key_weights(init_seed, &manifest);
        let shared =
            WeightSet::from_tensors(&manifest, init.tensors().to_vec(), WeightOrigin::Trained)?;
        let mask = crate::keyed_weights::sample_mask(&manifest, alpha, mask_seed)?;
        let biases = BiasSet::zeros(&backbone);
        ModelState::new(backbone, shared, biases, mask)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn shared(&self) -> &WeightSet {
        &self.shared
    }

    pub(crate) fn shared_mut(&mut self) -> &mut WeightSet {
        &mut self.shared
    }

    pub fn biases(&self) -> &BiasSet {
        &self.biases
    }

    pub(crate) fn biases_mut(&mut self) -> &mut BiasSet {
        &mut self.biases
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    /// Effective weights for a mode: the shared set itself for purify, or
    /// `shared ⊙ M + fill(key) ⊙ M̄` for the keyed tasks.
    pub fn assembled_for(&self, registry: &KeyRegistry, mode: TaskMode) -> Result<WeightSet> {
        match mode {
            TaskMode::Purify => Ok(self.shared.clone()),
            TaskMode::Embed(i) => {
                let key = registry.pair(i)?.embed_key;
                let fill = generate_key_weights(key, self.backbone.manifest());
                assemble(&self.shared, &self.mask, &fill)
            }
            TaskMode::Recover(i) => {
                let key = registry.pair(i)?.recover_key;
                let fill = generate_key_weights(key, self.backbone.manifest());
                assemble(&self.shared, &self.mask, &fill)
            }
        }
    }
}

pub(crate) fn plane_batch(images: &[&ImagePlane]) -> Array4<f64> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img.data());
    }
    out
}

/// Stacks one image into both slots: `[secret|cover] := [img|img]`.
pub(crate) fn dup_batch(images: &[&ImagePlane]) -> Array4<f64> {
    let b = plane_batch(images);
    ops::concat_channels(&b, &b)
}

/// Stacks (secret, cover) pairs into 6-channel inputs.
pub(crate) fn pair_batch(secrets: &[&ImagePlane], covers: &[&ImagePlane]) -> Array4<f64> {
    ops::concat_channels(&plane_batch(secrets), &plane_batch(covers))
}

/// Channel concat of two batches (the 6-channel input builder).
pub(crate) fn cat_arrays(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ops::concat_channels(a, b)
}

pub(crate) fn split_output(y: &Array4<f64>) -> Vec<ImagePlane> {
    (0..y.dim().0)
        .map(|i| {
            ImagePlane::from_array(y.index_axis(Axis(0), i).to_owned())
                .expect("network output is finite")
        })
        .collect()
}

fn check_same_shape(images: &[&ImagePlane]) -> Result<()> {
    let (h, w) = (images[0].height(), images[0].width());
    if images.iter().any(|i| i.height() != h || i.width() != w) {
        return Err(Error::Shape("batch images must share one size".into()));
    }
    Ok(())
}

/// Runs one task on one input set. Purify and Recover take exactly one
/// image; Embed takes (secret, cover). Output is clamped to `[0, 1]`.
pub fn run_task(
    state: &ModelState,
    registry: &KeyRegistry,
    mode: TaskMode,
    inputs: &[&ImagePlane],
) -> Result<ImagePlane> {
    match mode {
        TaskMode::Purify => {
            expect_arity(inputs, 1)?;
            Ok(purify_batch(state, &[inputs[0]])?.remove(0))
        }
        TaskMode::Embed(i) => {
            expect_arity(inputs, 2)?;
            Ok(embed_batch(state, registry, i, &[(inputs[0], inputs[1])])?.remove(0))
        }
        TaskMode::Recover(i) => {
            expect_arity(inputs, 1)?;
            Ok(recover_batch(state, registry, i, &[inputs[0]])?.remove(0))
        }
    }
}

fn expect_arity(inputs: &[&ImagePlane], expected: usize) -> Result<()> {
    if inputs.len() != expected {
        return Err(Error::Arity { expected, got: inputs.len() });
    }
    Ok(())
}

/// Purification over a batch. Uses no key material.
pub fn purify_batch(state: &ModelState, images: &[&ImagePlane]) -> Result<Vec<ImagePlane>> {
    check_same_shape(images)?;
    state.backbone().check_input(images[0])?;
    let x = dup_batch(images);
    let out = state
        .backbone()
        .raw_forward(state.shared(), state.biases(), &x, Capture::default());
    Ok(split_output(&out.y))
}

/// Embedding over a batch of (secret, cover) pairs under key index `i`.
pub fn embed_batch(
    state: &ModelState,
    registry: &KeyRegistry,
    i: usize,
    pairs: &[(&ImagePlane, &ImagePlane)],
) -> Result<Vec<ImagePlane>> {
    let all: Vec<&ImagePlane> = pairs.iter().flat_map(|&(s, c)| [s, c]).collect();
    check_same_shape(&all)?;
    state.backbone().check_input(all[0])?;
    let kernels = state.assembled_for(registry, TaskMode::Embed(i))?;
    let secrets: Vec<&ImagePlane> = pairs.iter().map(|&(s, _)| s).collect();
    let covers: Vec<&ImagePlane> = pairs.iter().map(|&(_, c)| c).collect();
    let x = pair_batch(&secrets, &covers);
    let out = state
        .backbone()
        .raw_forward(&kernels, state.biases(), &x, Capture::default());
    Ok(split_output(&out.y))
}

/// Recovery over a batch of stego images under key index `i`.
pub fn recover_batch(
    state: &ModelState,
    registry: &KeyRegistry,
    i: usize,
    stegos: &[&ImagePlane],
) -> Result<Vec<ImagePlane>> {
    check_same_shape(stegos)?;
    state.backbone().check_input(stegos[0])?;
    let kernels = state.assembled_for(registry, TaskMode::Recover(i))?;
    let x = dup_batch(stegos);
    let out = state
        .backbone()
        .raw_forward(&kernels, state.biases(), &x, Capture::default());
    Ok(split_output(&out.y))
}

/// Runs a keyed task with a raw key value instead of a registry index.
/// This is how one-shot operations and random-key probes execute.
pub fn run_with_key(
    state: &ModelState,
    key: u64,
    embed_inputs: Option<(&ImagePlane, &ImagePlane)>,
    single_input: Option<&ImagePlane>,
) -> Result<ImagePlane> {
    let fill = generate_key_weights(key, state.backbone().manifest());
    let kernels = assemble(state.shared(), state.mask(), &fill)?;
    let x = match (embed_inputs, single_input) {
        (Some((s, c)), None) => {
            check_same_shape(&[s, c])?;
            state.backbone().check_input(s)?;
            pair_batch(&[s], &[c])
        }
        (None, Some(img)) => {
            state.backbone().check_input(img)?;
            dup_batch(&[img])
        }
        _ => return Err(Error::Parameter("exactly one input form expected".into())),
    };
    let out = state
        .backbone()
        .raw_forward(&kernels, state.biases(), &x, Capture::default());
    Ok(split_output(&out.y).remove(0))
}

/// Flattened activations of the decoder's penultimate stage (the feature
/// map entering the output head) under `Recover(key_index)`.
pub fn extract_recovery_features(
    state: &ModelState,
    registry: &KeyRegistry,
    key_index: usize,
    stego: &ImagePlane,
) -> Result<Vec<f64>> {
    Ok(extract_recovery_features_batch(state, registry, key_index, &[stego])?.remove(0))
}

/// Batch variant of [`extract_recovery_features`].
pub fn extract_recovery_features_batch(
    state: &ModelState,
    registry: &KeyRegistry,
    key_index: usize,
    stegos: &[&ImagePlane],
) -> Result<Vec<Vec<f64>>> {
    check_same_shape(stegos)?;
    state.backbone().check_input(stegos[0])?;
    let kernels = state.assembled_for(registry, TaskMode::Recover(key_index))?;
    let x = dup_batch(stegos);
    let out = state.backbone().raw_forward(
        &kernels,
        state.biases(),
        &x,
        Capture { penult: true, ..Default::default() },
    );
    let penult = out.penult.expect("penultimate capture requested");
    Ok((0..penult.dim().0)
        .map(|i| penult.index_axis(Axis(0), i).iter().copied().collect())
        .collect())
}

/// Penultimate feature dimensionality for a config: `base_width * side^2`.
pub fn recovery_feature_len(config: &BackboneConfig) -> usize {
    config.base_width * config.side * config.side
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyed_weights::sample_mask;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            base_width: 4,
            depth: 1,
            side: 8,
            nonlinearity: Nonlinearity::LeakyRelu,
            input_slots: 2,
        }
    }

    fn tiny_state() -> ModelState {
        ModelState::init(tiny_config(), 0.7, 11, 22).unwrap()
    }

    fn ramp_image(side: usize, seed: u64) -> ImagePlane {
        let s = crate::rng::SeedStream::new(seed);
        let mut c = 0;
        ImagePlane::from_array(Array3::from_shape_simple_fn((3, side, side), || {
            c += 1;
            s.unit_f64(c)
        }))
        .unwrap()
    }

    #[test]
    fn manifest_total_matches_independent_sum() {
        // depth=2, width=16: summed layer by layer from the topology rules
        let cfg = BackboneConfig {
            base_width: 16,
            depth: 2,
            side: 64,
            nonlinearity: Nonlinearity::LeakyRelu,
            input_slots: 2,
        };
        let bb = Backbone::new(cfg).unwrap();
        let w = 16usize;
        let expect = 9
            * (6 * w                                   // stem
                + w * 2 * w + 2 * w * 2 * w            // enc1 down + conv
                + 2 * w * 4 * w + 4 * w * 4 * w        // enc2 down + conv
                + 4 * w * 2 * w + 4 * w * 2 * w        // dec2 up + fuse
                + 2 * w * w + 2 * w * w                // dec1 up + fuse
                + 6 * 3                                // input skip
                + w * 3); // head
        assert_eq!(bb.manifest().total_params(), expect);
    }

    #[test]
    fn zero_weights_give_zero_preactivation() {
        let bb = Backbone::new(tiny_config()).unwrap();
        let manifest = Arc::clone(bb.manifest());
        let zeros = WeightSet::zeros(&manifest, WeightOrigin::Trained);
        let biases = BiasSet::zeros(&bb);
        let x = Array4::zeros((1, 6, 8, 8));
        let out = bb.raw_forward(&zeros, &biases, &x, Capture { logits: true, ..Default::default() });
        let logits = out.logits.unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        // sigmoid(0) = 0.5 at the clamped output
        assert!(out.y.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let state = tiny_state();
        let reg = KeyRegistry::derive(1, 2).unwrap();
        let img = ramp_image(8, 1);
        let pur = run_task(&state, &reg, TaskMode::Purify, &[&img]).unwrap();
        assert_eq!((pur.height(), pur.width()), (8, 8));
        let st = run_task(&state, &reg, TaskMode::Embed(1), &[&img, &ramp_image(8, 2)]).unwrap();
        assert_eq!((st.height(), st.width()), (8, 8));
    }

    #[test]
    fn run_task_is_deterministic() {
        let state = tiny_state();
        let reg = KeyRegistry::derive(3, 2).unwrap();
        let secret = ramp_image(8, 5);
        let cover = ramp_image(8, 6);
        let a = run_task(&state, &reg, TaskMode::Embed(2), &[&secret, &cover]).unwrap();
        let b = run_task(&state, &reg, TaskMode::Embed(2), &[&secret, &cover]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn purify_ignores_registry() {
        let state = tiny_state();
        let reg_a = KeyRegistry::derive(100, 3).unwrap();
        let reg_b = KeyRegistry::derive(200, 5).unwrap();
        let img = ramp_image(8, 9);
        let a = run_task(&state, &reg_a, TaskMode::Purify, &[&img]).unwrap();
        let b = run_task(&state, &reg_b, TaskMode::Purify, &[&img]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assembled_weights_respect_mask_regions() {
        let state = tiny_state();
        let reg = KeyRegistry::derive(7, 2).unwrap();
        for mode in [TaskMode::Embed(1), TaskMode::Recover(2)] {
            let assembled = state.assembled_for(&reg, mode).unwrap();
            let key = match mode {
                TaskMode::Embed(i) => reg.pair(i).unwrap().embed_key,
                TaskMode::Recover(i) => reg.pair(i).unwrap().recover_key,
                TaskMode::Purify => unreachable!(),
            };
            let fill = generate_key_weights(key, state.backbone().manifest());
            for t in 0..state.backbone().manifest().len() {
                let bits = state.mask().tensor_bits(t);
                for p in 0..bits.len() {
                    let expect = if bits[p] == 1 {
                        state.shared().tensor(t)[p]
                    } else {
                        fill.tensor(t)[p]
                    };
                    assert_eq!(assembled.tensor(t)[p].to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn changing_embed_key_changes_assembly() {
        let state = tiny_state();
        let reg_a = KeyRegistry::new(vec![(111, 222)]).unwrap();
        let reg_b = KeyRegistry::new(vec![(112, 222)]).unwrap();
        let a = state.assembled_for(&reg_a, TaskMode::Embed(1)).unwrap();
        let b = state.assembled_for(&reg_b, TaskMode::Embed(1)).unwrap();
        let differs = (0..state.backbone().manifest().len())
            .any(|t| a.tensor(t) != b.tensor(t));
        assert!(differs);
    }

    #[test]
    fn arity_and_key_errors() {
        let state = tiny_state();
        let reg = KeyRegistry::derive(1, 2).unwrap();
        let img = ramp_image(8, 1);
        assert!(matches!(
            run_task(&state, &reg, TaskMode::Purify, &[&img, &img]),
            Err(Error::Arity { .. })
        ));
        assert!(matches!(
            run_task(&state, &reg, TaskMode::Embed(1), &[&img]),
            Err(Error::Arity { .. })
        ));
        assert!(matches!(
            run_task(&state, &reg, TaskMode::Recover(9), &[&img]),
            Err(Error::KeyIndex { .. })
        ));
    }

    #[test]
    fn features_are_deterministic_with_fixed_len() {
        let state = tiny_state();
        let reg = KeyRegistry::derive(4, 2).unwrap();
        let img = ramp_image(8, 3);
        let a = extract_recovery_features(&state, &reg, 1, &img).unwrap();
        let b = extract_recovery_features(&state, &reg, 1, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), recovery_feature_len(state.backbone().config()));
    }

    #[test]
    fn rgb8_roundtrip_is_within_quantization() {
        let img = ramp_image(8, 12);
        let bytes = img.to_rgb8();
        let back = ImagePlane::from_rgb8(&bytes, 8, 8).unwrap();
        let max = (img.data() - back.data())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max <= 0.5 / 255.0 + 1e-12, "max {max}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.side = 9; // not divisible by 2
        assert!(Backbone::new(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.base_width = 0;
        assert!(Backbone::new(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.input_slots = 3;
        assert!(Backbone::new(cfg).is_err());
    }
}

#[doc(hidden)]
pub fn bench_spec(in_c: usize, out_c: usize, stride: usize) -> Box<ops::ConvSpec> {
    Box::new(ops::ConvSpec { name: "bench".into(), in_c, out_c, stride })
}

#[doc(hidden)]
pub fn bench_forward(
    x: &Array4<f64>,
    k: &[f64],
    b: &[f64],
    spec: &dyn std::any::Any,
) -> Array4<f64> {
    let spec = spec.downcast_ref::<Box<ops::ConvSpec>>().unwrap();
    ops::conv2d_batch(x, k, b, spec)
}

#[doc(hidden)]
pub fn bench_backward(
    x: &Array4<f64>,
    k: &[f64],
    spec: &dyn std::any::Any,
    dy: &Array4<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let spec = spec.downcast_ref::<Box<ops::ConvSpec>>().unwrap();
    let g = ops::conv2d_backward_batch(x, k, spec, dy, true);
    (g.dkernel, g.dbias)
}
