//! Full model wiring: builds the parameter store for a variant, prepares
//! fixed-size inputs from feature bundles and records forward passes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{self, GlobalEncoderVars};
use crate::error::{Error, Result};
use crate::graph::{AffinityNorm, GcnLayerVars, MmrOptions};
use crate::head::{self, DescriptorMode, NodeScorerVars, Projection};
use crate::io::{normalize_and_pad, Dims, FeatureBundle};
use crate::params::ParameterStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{seeded_init, Gain, Tensor};

/// Which global branch feeds the fused vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalBranch {
    Off,
    /// spatial mean of the feature map, no self-attention
    Raw,
    #[default]
    Attended,
}

/// One experiment variant: which branches exist and how they combine.
/// The default is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantSpec {
    pub global: GlobalBranch,
    pub use_local: bool,
    pub use_text: bool,
    pub use_bboxes: bool,
    pub use_mmr: bool,
    pub shared_affinity: bool,
    pub affinity_norm: AffinityNorm,
    pub projection: Projection,
    pub descriptor: DescriptorMode,
    pub dropout: f64,
}

impl Default for VariantSpec {
    fn default() -> Self {
        VariantSpec {
            global: GlobalBranch::Attended,
            use_local: true,
            use_text: true,
            use_bboxes: true,
            use_mmr: true,
            shared_affinity: false,
            affinity_norm: AffinityNorm::RowSoftmax,
            projection: Projection::AvgPool,
            descriptor: DescriptorMode::Probs,
            dropout: 0.3,
        }
    }
}

impl VariantSpec {
    pub fn has_nodes(&self) -> bool {
        self.use_local || self.use_text
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_mmr && !self.has_nodes() {
            return Err(Error::InvalidArgument("variant: use_mmr requires use_local or use_text".into()));
        }
        if self.use_bboxes && !self.has_nodes() {
            return Err(Error::InvalidArgument("variant: use_bboxes requires at least one node source".into()));
        }
        if self.global == GlobalBranch::Off && !self.has_nodes() {
            return Err(Error::InvalidArgument("variant: no branches enabled".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("variant: dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Active node count.
    pub fn k(&self, dims: &Dims) -> usize {
        (if self.use_local { dims.n } else { 0 }) + (if self.use_text { dims.m } else { 0 })
    }

    /// Width of the fused vector F.
    pub fn fused_width(&self, dims: &Dims) -> usize {
        let g = if self.global == GlobalBranch::Off { 0 } else { dims.d_out };
        let v = if self.has_nodes() { dims.d_node() } else { 0 };
        g + v
    }
}

/// Fixed-size tensors for one bundle, ready for the tape.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// (H*W) x D_g
    pub global: Tensor,
    /// n x D_r
    pub regions: Tensor,
    /// m x D_t
    pub texts: Tensor,
    /// n x 4
    pub region_bboxes: Tensor,
    /// m x 4
    pub text_bboxes: Tensor,
    pub label: usize,
    pub has_text: bool,
    pub id: String,
}

pub fn prepare_input(bundle: &FeatureBundle, dims: &Dims) -> Result<ModelInput> {
    let padded = normalize_and_pad(bundle, dims, None)?;
    Ok(ModelInput {
        global: bundle.global_map.reshape(vec![dims.h * dims.w, dims.d_g])?,
        regions: padded.regions,
        texts: padded.texts,
        region_bboxes: padded.region_bboxes,
        text_bboxes: padded.text_bboxes,
        label: bundle.label,
        has_text: bundle.has_text,
        id: bundle.id.clone(),
    })
}

/// Parameter leaves registered on a tape, by name.
pub struct ParamVars {
    map: HashMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("parameter {name} not registered"))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: VariantSpec,
    pub dims: Dims,
    pub num_classes: usize,
    pub params: ParameterStore,
}

impl Model {
    /// Builds a variant's parameter store with seeded initialization.
    pub fn new(spec: VariantSpec, dims: Dims, num_classes: usize, seed: u64) -> Result<Model> {
        spec.validate()?;
        dims.validate()?;
        if num_classes < 2 {
            return Err(Error::InvalidArgument("model: need at least 2 classes".into()));
        }
        let mut rng = Rng::new(seed).fork(0x706172616d73); // parameter stream
        let mut p = ParameterStore::new();
        let d_node = dims.d_node();
        let k = spec.k(&dims);

        let fc =
            |p: &mut ParameterStore, name: &str, din: usize, dout: usize, gain: Gain, rng: &mut Rng| -> Result<()> {
                p.insert(format!("{name}.w"), seeded_init(vec![din, dout], din, gain, rng)?, false)?;
                p.insert(format!("{name}.b"), Tensor::zeros(vec![dout]), true)?;
                Ok(())
            };

        match spec.global {
            GlobalBranch::Off => {}
            GlobalBranch::Raw => {
                fc(&mut p, "global.fc", dims.d_g, dims.d_out, Gain::LeakyRelu, &mut rng)?;
            }
            GlobalBranch::Attended => {
                p.insert("global.attn.w", seeded_init(vec![dims.d_g], dims.d_g, Gain::Linear, &mut rng)?, false)?;
                p.insert("global.attn.b", Tensor::zeros(vec![1]), true)?;
                fc(&mut p, "global.fc", dims.d_g, dims.d_out, Gain::LeakyRelu, &mut rng)?;
            }
        }
        if spec.use_local {
            fc(&mut p, "local.fc", dims.d_r, dims.d_p, Gain::LeakyRelu, &mut rng)?;
        }
        if spec.use_text {
            fc(&mut p, "text.fc", dims.d_t, dims.d_p, Gain::LeakyRelu, &mut rng)?;
        }
        if spec.use_bboxes {
            fc(&mut p, "pos.fc", 4, dims.b, Gain::LeakyRelu, &mut rng)?;
        }
        if spec.use_mmr {
            // Raw affinities grow like sqrt(d_node) and the aggregation sums
            // over k nodes, so an undamped residual branch amplifies
            // activations by orders of magnitude per layer at init. Damping
            // the mixing weight keeps the stack near the identity until it
            // has learned something.
            let damp = 1.0 / (8.0 * ((d_node * k) as f64).sqrt());
            for l in 0..dims.l {
                fc(&mut p, &format!("gcn.{l}.phi"), d_node, d_node, Gain::Linear, &mut rng)?;
                fc(&mut p, &format!("gcn.{l}.gamma"), d_node, d_node, Gain::Linear, &mut rng)?;
                p.insert(
                    format!("gcn.{l}.wg"),
                    seeded_init(vec![d_node, d_node], d_node, Gain::LeakyRelu, &mut rng)?,
                    false,
                )?;
                let mut wr = seeded_init(vec![k, k], k, Gain::LeakyRelu, &mut rng)?;
                wr.data_mut().iter_mut().for_each(|x| *x *= damp);
                p.insert(format!("gcn.{l}.wr"), wr, false)?;
            }
        }
        if spec.has_nodes() && spec.projection == Projection::Attention {
            p.insert("proj.attn.w", seeded_init(vec![d_node], d_node, Gain::Linear, &mut rng)?, false)?;
            p.insert("proj.attn.b", Tensor::zeros(vec![1]), true)?;
        }
        fc(&mut p, "cls", spec.fused_width(&dims), num_classes, Gain::Linear, &mut rng)?;

        Ok(Model { spec, dims, num_classes, params: p })
    }

    /// Registers every parameter of `store` as a leaf on `tape`.
    pub fn register_leaves(store: &ParameterStore, tape: &mut Tape) -> ParamVars {
        let mut map = HashMap::new();
        for param in store.iter() {
            map.insert(param.name.clone(), tape.leaf(param.value.clone()));
        }
        ParamVars { map }
    }

    /// Records one sample's forward pass. Returns (logits, probs).
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        leaves: &ParamVars,
        input: &ModelInput,
        train: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let spec = &self.spec;
        let dims = &self.dims;
        let mut parts: Vec<Var> = Vec::new();

        match spec.global {
            GlobalBranch::Off => {}
            GlobalBranch::Raw => {
                let gm = tape.leaf(input.global.clone());
                let g = encoders::global_encode_raw(tape, gm, leaves.get("global.fc.w"), leaves.get("global.fc.b"))?;
                parts.push(g);
            }
            GlobalBranch::Attended => {
                let gm = tape.leaf(input.global.clone());
                let vars = GlobalEncoderVars {
                    attn_w: leaves.get("global.attn.w"),
                    attn_b: leaves.get("global.attn.b"),
                    fc_w: leaves.get("global.fc.w"),
                    fc_b: leaves.get("global.fc.b"),
                };
                let (g_fa, _mask) = encoders::global_encode(tape, gm, &vars)?;
                parts.push(g_fa);
            }
        }

        if spec.has_nodes() {
            let mut modal: Option<Var> = None;
            if spec.use_local {
                let rows = tape.leaf(input.regions.clone());
                let enc = encoders::modal_encode(tape, rows, leaves.get("local.fc.w"), leaves.get("local.fc.b"))?;
                modal = Some(enc);
            }
            if spec.use_text {
                let rows = tape.leaf(input.texts.clone());
                let enc = encoders::modal_encode(tape, rows, leaves.get("text.fc.w"), leaves.get("text.fc.b"))?;
                modal = Some(match modal {
                    Some(prev) => tape.concat_rows(prev, enc)?,
                    None => enc,
                });
            }
            let modal = modal.expect("has_nodes");

            let k = spec.k(dims);
            let pos = if spec.use_bboxes {
                let mut data = Vec::with_capacity(k * 4);
                if spec.use_local {
                    data.extend_from_slice(input.region_bboxes.data());
                }
                if spec.use_text {
                    data.extend_from_slice(input.text_bboxes.data());
                }
                let boxes = tape.leaf(Tensor::matrix(k, 4, data)?);
                encoders::positional_encode(tape, boxes, leaves.get("pos.fc.w"), leaves.get("pos.fc.b"))?
            } else {
                tape.constant(Tensor::zeros(vec![k, dims.b]))
            };

            let nodes = encoders::assemble_nodes(tape, modal, pos)?;

            let v_g = if spec.use_mmr {
                let layers: Vec<GcnLayerVars> = (0..dims.l)
                    .map(|l| GcnLayerVars {
                        phi_w: leaves.get(&format!("gcn.{l}.phi.w")),
                        phi_b: leaves.get(&format!("gcn.{l}.phi.b")),
                        gamma_w: leaves.get(&format!("gcn.{l}.gamma.w")),
                        gamma_b: leaves.get(&format!("gcn.{l}.gamma.b")),
                        w_g: leaves.get(&format!("gcn.{l}.wg")),
                        w_r: leaves.get(&format!("gcn.{l}.wr")),
                    })
                    .collect();
                let opts = MmrOptions {
                    shared_affinity: spec.shared_affinity,
                    normalize: spec.affinity_norm,
                    activate_hidden: true,
                };
                crate::graph::mmr_forward(tape, nodes, &layers, &opts)?
            } else {
                nodes
            };

            let scorer = if spec.projection == Projection::Attention {
                Some(NodeScorerVars { w: leaves.get("proj.attn.w"), b: leaves.get("proj.attn.b") })
            } else {
                None
            };
            let v_gf = head::node_project(tape, v_g, spec.projection, scorer)?;
            parts.push(v_gf);
        }

        head::fuse_classify(
            tape,
            &parts,
            leaves.get("cls.w"),
            leaves.get("cls.b"),
            spec.dropout,
            train,
            rng,
        )
    }

    /// Records a whole batch and its mean cross-entropy loss.
    /// Returns (loss var, per-sample prob vars).
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        leaves: &ParamVars,
        inputs: &[&ModelInput],
        train: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<Var>)> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("forward_batch: empty batch".into()));
        }
        let mut probs = Vec::with_capacity(inputs.len());
        let mut labels = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (_, p) = self.forward_sample(tape, leaves, input, train, rng)?;
            probs.push(p);
            labels.push(input.label);
        }
        let loss = head::cross_entropy_on_tape(tape, &probs, &labels)?;
        Ok((loss, probs))
    }

    /// Eval-mode probabilities for one input.
    pub fn predict_probs(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = Model::register_leaves(&self.params, &mut tape);
        let mut rng = Rng::new(0);
        let (_, probs) = self.forward_sample(&mut tape, &leaves, input, false, &mut rng)?;
        Ok(tape.value(probs).clone())
    }

    /// Eval-mode logits for one input.
    pub fn predict_logits(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = Model::register_leaves(&self.params, &mut tape);
        let mut rng = Rng::new(0);
        let (logits, _) = self.forward_sample(&mut tape, &leaves, input, false, &mut rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Retrieval descriptor per the configured mode.
    pub fn descriptor(&self, input: &ModelInput) -> Result<Tensor> {
        match self.spec.descriptor {
            DescriptorMode::Probs => self.predict_probs(input),
            DescriptorMode::Logits => self.predict_logits(input),
        }
    }

    /// Mean batch loss under given parameters without touching self.
    /// Eval mode, so it is deterministic; used by the gradient checker.
    pub fn loss_with_params(&self, params: &ParameterStore, inputs: &[&ModelInput]) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = Model::register_leaves(params, &mut tape);
        let mut rng = Rng::new(0);
        let (loss, _) = self.forward_batch(&mut tape, &leaves, inputs, false, &mut rng)?;
        Ok(tape.value(loss).item())
    }

    /// Batch loss and named gradients. Dropout is active when `train`.
    pub fn loss_and_grads(
        &self,
        inputs: &[&ModelInput],
        train: bool,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<(String, Tensor)>)> {
        let mut tape = Tape::new();
        let leaves = Model::register_leaves(&self.params, &mut tape);
        let (loss, _) = self.forward_batch(&mut tape, &leaves, inputs, train, rng)?;
        let grads = tape.backward(loss)?;
        let named = self
            .params
            .iter()
            .map(|p| (p.name.clone(), grads.get(leaves.get(&p.name)).clone()))
            .collect();
        Ok((tape.value(loss).item(), named))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{self, SynthConfig};

    fn desk_config() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            samples_per_class: 4,
            dims: Dims::desk(),
            visual_strength: 0.6,
            textual_strength: 0.6,
            positional_strength: 0.6,
            fraction_with_text: 1.0,
            noise: 0.1,
            seed: 13,
        }
    }

    fn inputs_for(ds: &crate::io::Dataset) -> Vec<ModelInput> {
        ds.bundles.iter().map(|b| prepare_input(b, &ds.dims).unwrap()).collect()
    }

    #[test]
    fn full_model_forward_produces_normalized_probs() {
        let ds = synth::generate(&desk_config()).unwrap();
        let model = Model::new(VariantSpec::default(), ds.dims, ds.num_classes, 5).unwrap();
        let inputs = inputs_for(&ds);
        for input in &inputs {
            let p = model.predict_probs(input).unwrap();
            assert_eq!(p.len(), 3);
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.data().iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn contradictory_variants_rejected() {
        let mut spec = VariantSpec { use_local: false, use_text: false, ..VariantSpec::default() };
        assert!(spec.validate().is_err()); // mmr without nodes
        spec.use_mmr = false;
        assert!(spec.validate().is_err()); // bboxes without nodes
        spec.use_bboxes = false;
        assert!(spec.validate().is_ok()); // global-only is fine
        spec.global = GlobalBranch::Off;
        assert!(spec.validate().is_err()); // nothing left
    }

    #[test]
    fn text_free_variant_ignores_text_channel() {
        let ds = synth::generate(&desk_config()).unwrap();
        let spec = VariantSpec { use_text: false, ..VariantSpec::default() };
        let model = Model::new(spec, ds.dims, ds.num_classes, 5).unwrap();
        let mut input = prepare_input(&ds.bundles[0], &ds.dims).unwrap();
        let before = model.predict_probs(&input).unwrap();
        input.texts.data_mut().iter_mut().for_each(|x| *x += 123.0);
        // text bboxes are also part of the text channel
        let after = model.predict_probs(&input).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn bbox_free_variant_ignores_bbox_perturbations() {
        let ds = synth::generate(&desk_config()).unwrap();
        let spec = VariantSpec { use_bboxes: false, ..VariantSpec::default() };
        let model = Model::new(spec, ds.dims, ds.num_classes, 5).unwrap();
        let mut input = prepare_input(&ds.bundles[0], &ds.dims).unwrap();
        let before = model.predict_probs(&input).unwrap();
        input.region_bboxes.data_mut().iter_mut().for_each(|x| *x = (*x + 0.37).min(1.0));
        input.text_bboxes.data_mut().iter_mut().for_each(|x| *x = (*x + 0.21).min(1.0));
        let after = model.predict_probs(&input).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_same_parameters() {
        let dims = Dims::desk();
        let a = Model::new(VariantSpec::default(), dims, 3, 9).unwrap();
        let b = Model::new(VariantSpec::default(), dims, 3, 9).unwrap();
        assert!(a.params.bit_eq(&b.params));
    }

    #[test]
    fn bbox_free_variant_has_no_positional_params() {
        let dims = Dims::desk();
        let spec = VariantSpec { use_bboxes: false, ..VariantSpec::default() };
        let m = Model::new(spec, dims, 3, 1).unwrap();
        assert!(!m.params.contains("pos.fc.w"));
    }
}
