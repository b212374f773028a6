//! The assembled policy: tokenizer, reasoner and action expert sharing one
//! parameter store, plus the per-sample loss wiring.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action_expert::{ActionChunk, ActionExpert, Conditioning, ExpertConfig, FlowDraw};
use crate::error::{Error, Result};
use crate::gst::{multi_scale_input, sample_anchors, GaussianField, Gst, GstConfig, SpatialTokenSet};
use crate::params::{Checkpoint, Ctx, ParamBuilder, ParamStore};
use crate::reasoner::vocab::ThoughtChain;
use crate::reasoner::{cot_loss, Decoded, Reasoner, ReasonerConfig};
use crate::rng::derive;
use crate::scene_synth::{generate, load_manifest, load_scene, SceneSample, SceneSpec, Split};
use crate::splat_render::{depth_loss, render_depth, RayBundle, RenderOptions};
use crate::tensor::Tensor;
use crate::Var;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gst: GstConfig,
    pub reasoner: ReasonerConfig,
    pub expert: ExpertConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.gst.validate()?;
        self.reasoner.validate()?;
        self.expert.validate()
    }
}

/// Named parameter groups, matched by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Gst,
    Reasoner,
    Expert,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Gst, Group::Reasoner, Group::Expert];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Gst => "gst.",
            Group::Reasoner => "reasoner.",
            Group::Expert => "expert.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// A scene sample with its tokenizer inputs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: SceneSample,
    pub anchors: Tensor,
    pub mip: Tensor,
    pub chain: ThoughtChain,
}

impl Prepared {
    pub fn new(sample: SceneSample) -> Result<Self> {
        let anchors = sample_anchors(&sample)?;
        let mip = multi_scale_input(&sample.features);
        let chain = ThoughtChain::encode(&sample.chain_values);
        Ok(Self {
            sample,
            anchors,
            mip,
            chain,
        })
    }

    pub fn from_spec(spec: &SceneSpec, d_f: usize) -> Result<Self> {
        Self::new(generate(spec, d_f)?)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
}

impl Dataset {
    /// Random scenes drawn exactly as the dataset writer draws them, so a
    /// generated directory and this call agree for the same seed.
    pub fn synthetic(seed: u64, train: usize, val: usize, d_f: usize) -> Result<Self> {
        let mut out = Self::default();
        for i in 0..train + val {
            let p = Prepared::from_spec(&SceneSpec::random(derive(seed, &[0x5CE, i as u64])), d_f)?;
            if i < train {
                out.train.push(p);
            } else {
                out.val.push(p);
            }
        }
        Ok(out)
    }

    /// Load a directory written by the dataset writer.
    pub fn from_dir(dir: &Path, d_f: usize) -> Result<Self> {
        let manifest_path = dir.join("manifest.toml");
        if !manifest_path.exists() {
            return Err(Error::MissingPath(manifest_path));
        }
        let manifest = load_manifest(&manifest_path)?;
        let mut out = Self::default();
        for e in &manifest.scenes {
            let p = Prepared::from_spec(&load_scene(&dir.join(&e.path))?, d_f)?;
            match e.split {
                Split::Train => out.train.push(p),
                Split::Val => out.val.push(p),
            }
        }
        Ok(out)
    }
}

pub struct Policy {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub gst: Gst,
    pub reasoner: Reasoner,
    pub expert: ActionExpert,
}

/// Tokenizer and reasoner outputs for one sample.
pub struct Encoded<'t> {
    pub field: GaussianField<'t>,
    pub pooled: SpatialTokenSet<'t>,
    pub prefix: Var<'t>,
    pub keys: Var<'t>,
}

/// Per-sample loss terms; inactive terms are `None`.
pub struct SampleLosses<'t> {
    pub flow: Option<Var<'t>>,
    pub cot: Option<Var<'t>>,
    pub depth: Option<Var<'t>>,
}

/// Which loss terms a forward pass builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ActiveLosses {
    pub flow: bool,
    pub cot: bool,
    pub depth: bool,
}

/// Per-sample stochastic inputs of one training step.
pub struct SampleDraw {
    pub flow: FlowDraw,
    pub rays: Option<RayBundle>,
}

impl Policy {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed, "");
        let gst = Gst::new(&mut pb, &cfg.gst)?;
        let reasoner = Reasoner::new(
            &mut pb,
            &cfg.reasoner,
            cfg.gst.token_dim,
            cfg.gst.feature_dim,
            cfg.gst.num_tokens,
        )?;
        let expert = ActionExpert::new(&mut pb, &cfg.expert, cfg.reasoner.width)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            gst,
            reasoner,
            expert,
        })
    }

    /// Trainable mask in store order.
    pub fn mask(&self, groups: &[Group]) -> Vec<bool> {
        self.store
            .ids()
            .map(|id| Group::of(self.store.name(id)).is_some_and(|g| groups.contains(&g)))
            .collect()
    }

    pub fn checksum(&self, group: Group) -> u64 {
        self.store.checksum(group.prefix())
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_>, p: &Prepared) -> Result<Encoded<'t>> {
        let (field, pooled) = self.gst.tokenize_parts(ctx, &p.sample.features, &p.anchors, &p.mip)?;
        let features = ctx.constant(p.sample.features.clone());
        let prefix = self
            .reasoner
            .inject(ctx, pooled.tokens, features, p.sample.target_class(), &p.sample.proprio)?;
        let keys = self.reasoner.dacot_keys(field.raw_tokens, pooled.tokens);
        Ok(Encoded {
            field,
            pooled,
            prefix,
            keys,
        })
    }

    /// Build the active loss terms for one sample. The reasoner always runs
    /// teacher-forced on the ground-truth chain since its states condition
    /// the expert.
    pub fn losses<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        p: &Prepared,
        draw: &SampleDraw,
        active: ActiveLosses,
    ) -> Result<SampleLosses<'t>> {
        let enc = self.encode(ctx, p)?;
        let mut out = SampleLosses {
            flow: None,
            cot: None,
            depth: None,
        };
        if active.flow || active.cot {
            let fwd = self.reasoner.teacher_forced(ctx, enc.prefix, enc.keys, &p.chain)?;
            if active.cot {
                out.cot = Some(cot_loss(ctx, &fwd)?);
            }
            if active.flow {
                let cond = Conditioning {
                    h_vlm: fwd.h_vlm,
                    l_action: fwd.l_action,
                    proprio: p.sample.proprio,
                };
                out.flow = Some(self.expert.flow_loss(ctx, &p.sample.action_gt, &draw.flow, &cond)?);
            }
        }
        if active.depth {
            let rays = draw
                .rays
                .as_ref()
                .ok_or_else(|| Error::Invalid("depth loss active without a ray bundle".into()))?;
            out.depth = Some(self.depth_loss(&enc.field, rays)?);
        }
        Ok(out)
    }

    pub fn depth_loss<'t>(&self, field: &GaussianField<'t>, rays: &RayBundle) -> Result<Var<'t>> {
        let r = render_depth(
            field.centroids,
            field.log_scales,
            field.opacity,
            rays,
            RenderOptions::default(),
        )?;
        depth_loss(r.rendered, &rays.target_depths)
    }

    /// Greedy chain, then an action chunk sampled from seeded noise.
    pub fn act<'t>(&self, ctx: &Ctx<'t, '_>, p: &Prepared, seed: u64) -> Result<(Decoded<'t>, ActionChunk)> {
        let enc = self.encode(ctx, p)?;
        let decoded = self.reasoner.greedy(ctx, enc.prefix, enc.keys)?;
        let cond = Conditioning {
            h_vlm: decoded.h_vlm,
            l_action: decoded.l_action,
            proprio: p.sample.proprio,
        };
        let chunk = self.expert.sample(ctx, &cond, seed)?;
        Ok((decoded, chunk))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.store.to_map() {
            ck.tensors.insert(format!("param/{name}"), t);
        }
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let map = ck
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix("param/").map(|n| (n.to_string(), t.clone())))
            .collect();
        self.store.load_map(&map)
    }
}
