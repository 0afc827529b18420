//! Full architecture: view pipeline, fusion, conditioning signal, task chain and
//! the domain adversary, assembled from a [`ModelConfig`].

use std::fmt;

use crate::chain::{forward_chain, shared_projection, ChainInputs, ChainOutput, ChainSpec};
use crate::ctpc::CtpcSpec;
use crate::error::{CaupsiError, Result};
use crate::fusion::{add_cross_view, add_scene_attention, cross_view, fuse_scenes};
use crate::nn::{add_linear, linear, Bindings, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::view::{add_gap_params, encode_view, encoder_dim, EncoderKind, FrozenEncoder, ProjectionSpec, View};

pub const ADVERSARY: &str = "adversary";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_c: usize,
    pub d_f: usize,
    pub d_z: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub d_psi: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub scene_hidden: usize,
    pub adv_hidden: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Inside stream attends over per-view scene tokens instead of the fused vector.
    pub multi_token: bool,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_seed: u64,
    /// Number of adversary outputs; fixed once domains are fitted.
    pub domain_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_c: 128,
            d_f: 128,
            d_z: 256,
            d_t: 64,
            d_e: 32,
            d_psi: 16,
            heads: 4,
            head_hidden: 128,
            scene_hidden: 64,
            adv_hidden: 64,
            dropout: 0.1,
            ln_eps: 1e-5,
            multi_token: false,
            channels: 3,
            height: 8,
            width: 8,
            encoder_seed: 0,
            domain_k: 2,
        }
    }
}

impl ModelConfig {
    pub fn n_scene(&self) -> usize {
        View::SCENE.len()
    }

    pub fn enc_dim(&self) -> usize {
        encoder_dim(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_c", self.d_c),
            ("d_f", self.d_f),
            ("d_z", self.d_z),
            ("d_t", self.d_t),
            ("d_e", self.d_e),
            ("d_psi", self.d_psi),
            ("heads", self.heads),
            ("head_hidden", self.head_hidden),
            ("scene_hidden", self.scene_hidden),
            ("adv_hidden", self.adv_hidden),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CaupsiError::Config(format!("{name} must be positive")));
        }
        if self.d_f % self.heads != 0 {
            return Err(CaupsiError::Config(format!("d_f={} not divisible by heads={}", self.d_f, self.heads)));
        }
        if self.domain_k < 2 {
            return Err(CaupsiError::Config(format!("domain_k={} must be at least 2", self.domain_k)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CaupsiError::Config(format!("dropout={} outside [0,1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(CaupsiError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Mechanisms removed for an ablation run. All four flags are independent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub ctpc: bool,
    pub crossview: bool,
    pub chain: bool,
    pub facebody: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 4] = ["ctpc", "crossview", "chain", "facebody"];

    pub fn none() -> Self {
        Ablation::default()
    }

    pub fn parse_list(items: &[&str]) -> Result<Self> {
        let mut a = Ablation::default();
        for item in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
            match item {
                "ctpc" => a.ctpc = true,
                "crossview" => a.crossview = true,
                "chain" => a.chain = true,
                "facebody" => a.facebody = true,
                other => return Err(CaupsiError::Config(format!("unknown ablation '{other}'"))),
            }
        }
        Ok(a)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [self.ctpc, self.crossview, self.chain, self.facebody];
        Self::NAMES.iter().zip(flags).filter(|(_, f)| *f).map(|(n, _)| *n).collect()
    }

    /// The conditioning signal is a constant zero.
    pub fn psi_forced_zero(&self) -> bool {
        self.ctpc || self.facebody
    }

    pub fn is_none(&self) -> bool {
        *self == Ablation::default()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.names();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Encoder features of one batch, one `[batch, enc_dim]` matrix per view in [`View::ALL`] order.
#[derive(Clone, Debug)]
pub struct PooledBatch<F: Scalar> {
    pub views: [Tensor<F>; 6],
}

impl<F: Scalar> PooledBatch<F> {
    /// Builds a batch from per-sample rows of `6 * enc_dim` values (view-major).
    pub fn from_rows(rows: &[&[f32]], enc_dim: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(CaupsiError::Shape("empty batch".into()));
        }
        let mut views: Vec<Tensor<F>> = Vec::with_capacity(6);
        for v in 0..6 {
            let mut data = Vec::with_capacity(rows.len() * enc_dim);
            for r in rows {
                if r.len() != 6 * enc_dim {
                    return Err(CaupsiError::Shape(format!("pooled row of {} values, expected {}", r.len(), 6 * enc_dim)));
                }
                data.extend(r[v * enc_dim..(v + 1) * enc_dim].iter().map(|&x| F::lit(x as f64)));
            }
            views.push(Tensor::new([rows.len(), enc_dim], data)?);
        }
        let views: [Tensor<F>; 6] = views.try_into().map_err(|_| CaupsiError::Shape("view count".into()))?;
        Ok(PooledBatch { views })
    }

    pub fn batch(&self) -> usize {
        self.views[0].shape()[0]
    }
}

/// Inside/scene path up to the shared representation.
#[derive(Clone, Copy, Debug)]
pub struct Trunk {
    pub ft_in: Var,
    pub ft_scene: Var,
    pub z: Var,
    pub z_tasks: [Var; 4],
    pub alpha: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub trunk: Trunk,
    pub f_face: Var,
    pub f_body: Var,
    pub psi: Var,
    pub chain: ChainOutput,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CauPsi {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
}

impl CauPsi {
    pub fn new(cfg: ModelConfig, ablation: Ablation) -> Result<Self> {
        cfg.validate()?;
        Ok(CauPsi { cfg, ablation })
    }

    pub fn chain_spec(&self) -> ChainSpec {
        ChainSpec {
            d_f: self.cfg.d_f,
            d_z: self.cfg.d_z,
            d_t: self.cfg.d_t,
            d_e: self.cfg.d_e,
            d_psi: self.cfg.d_psi,
            head_hidden: self.cfg.head_hidden,
            dropout_p: self.cfg.dropout,
            propagate: !self.ablation.chain,
        }
    }

    pub fn ctpc_spec(&self) -> CtpcSpec {
        CtpcSpec {
            d_f: self.cfg.d_f,
            d_psi: self.cfg.d_psi,
            ln_eps: self.cfg.ln_eps,
        }
    }

    pub fn projection_spec(&self) -> Result<ProjectionSpec> {
        ProjectionSpec::new(self.cfg.d_c, self.cfg.d_f)
    }

    /// Path prefixes excluded from optimisation under the current ablation.
    pub fn frozen_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.ablation.ctpc || self.ablation.facebody {
            out.push("ctpc.".to_string());
        }
        if self.ablation.crossview {
            out.push("fusion.cross.".to_string());
        }
        if self.ablation.facebody {
            out.push(format!("{}.", ProjectionSpec::path("face")));
            out.push(format!("{}.", ProjectionSpec::path("body")));
            out.push(format!("{}.", crate::view::gap_path(EncoderKind::Face)));
            out.push(format!("{}.", crate::view::gap_path(EncoderKind::Body)));
        }
        out
    }

    /// Creates every parameter. Frozen encoders use `cfg.encoder_seed`, the rest `seed`.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> Result<ParamStore<F>> {
        let c = &self.cfg;
        let mut s = ParamStore::new();
        for kind in EncoderKind::ALL {
            FrozenEncoder::add_params(&mut s, kind, c.channels, c.encoder_seed)?;
        }
        add_gap_params(&mut s, c.enc_dim(), c.d_c, seed)?;
        self.projection_spec()?.add_params(&mut s, seed)?;
        add_scene_attention(&mut s, c.n_scene(), c.d_c, c.scene_hidden, seed)?;
        add_cross_view(&mut s, c.d_f, seed)?;
        self.ctpc_spec().add_params(&mut s, seed)?;
        self.chain_spec().add_params(&mut s, seed)?;
        add_linear(&mut s, &format!("{ADVERSARY}.fc1"), c.d_z, c.adv_hidden, true, seed)?;
        add_linear(&mut s, &format!("{ADVERSARY}.fc2"), c.adv_hidden, c.domain_k, true, seed)?;
        for prefix in self.frozen_prefixes() {
            s.set_trainable(&prefix, false);
        }
        Ok(s)
    }

    /// Checks that `store` has exactly the entries and shapes this model would create.
    pub fn check_compatible<F: Scalar>(&self, store: &ParamStore<F>) -> Result<()> {
        let want = self.init_params::<F>(0)?;
        for (path, p) in want.iter() {
            let got = store
                .param(path)
                .ok_or_else(|| CaupsiError::Checkpoint(format!("checkpoint lacks '{path}'")))?;
            if got.tensor.shape() != p.tensor.shape() {
                return Err(CaupsiError::Config(format!(
                    "'{path}' has shape {:?} in checkpoint but {:?} in config",
                    got.tensor.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if let Some(extra) = store.paths().find(|p| want.param(p).is_none()) {
            return Err(CaupsiError::Config(format!("checkpoint entry '{extra}' not produced by config")));
        }
        Ok(())
    }

    /// Per-view encoding, scene fusion, inside/scene projection, cross-view block and shared projection.
    pub fn trunk<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, views: &[Var; 6]) -> Result<Trunk> {
        let proj = self.projection_spec()?;
        let h_in = encode_view(g, p, EncoderKind::Inside, views[View::Inside.index()])?;
        let mut h_scene_views = Vec::with_capacity(3);
        for v in View::SCENE {
            h_scene_views.push(encode_view(g, p, EncoderKind::Scene, views[v.index()])?);
        }
        let fused = fuse_scenes(g, p, &h_scene_views)?;
        let (f_in, f_scene) = proj.project_in_scene(g, p, h_in, fused.fused)?;
        let (ft_in, ft_scene) = if self.ablation.crossview {
            (f_in, f_scene)
        } else {
            let tokens = if self.cfg.multi_token {
                let batch = g.shape(f_in)[0];
                let cat = g.concat(&h_scene_views)?;
                let rows = g.reshape(cat, [batch * self.cfg.n_scene(), self.cfg.d_c])?;
                Some(proj.project_scene_tokens(g, p, rows)?)
            } else {
                None
            };
            let out = cross_view(g, p, f_in, f_scene, tokens, self.cfg.heads, self.cfg.ln_eps)?;
            (out.f_in, out.f_scene)
        };
        let (z, z_tasks) = shared_projection(g, p, ft_in, ft_scene)?;
        Ok(Trunk {
            ft_in,
            ft_scene,
            z,
            z_tasks,
            alpha: fused.alpha,
        })
    }

    /// Full forward pass over one batch of pooled encoder features.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, views: &[Var; 6]) -> Result<ModelOutput> {
        let trunk = self.trunk(g, p, views)?;
        let batch = g.shape(trunk.z)[0];
        let proj = self.projection_spec()?;
        let (f_face, f_body) = if self.ablation.facebody {
            let zf = g.constant(Tensor::zeros([batch, self.cfg.d_f]));
            (zf, zf)
        } else {
            let h_face = encode_view(g, p, EncoderKind::Face, views[View::Face.index()])?;
            let h_body = encode_view(g, p, EncoderKind::Body, views[View::Body.index()])?;
            proj.project_face_body(g, p, h_face, h_body)?
        };
        let psi = if self.ablation.psi_forced_zero() {
            g.constant(Tensor::zeros([batch, self.cfg.d_psi]))
        } else {
            self.ctpc_spec().compute_psi(g, p, f_face, f_body)?.psi
        };
        let inputs = ChainInputs {
            ft_in: trunk.ft_in,
            ft_scene: trunk.ft_scene,
            f_face,
            f_body,
            psi,
            z_tasks: trunk.z_tasks,
        };
        let chain = forward_chain(g, p, &self.chain_spec(), &inputs)?;
        Ok(ModelOutput {
            trunk,
            f_face,
            f_body,
            psi,
            chain,
        })
    }

    /// Domain logits `MLP(GRL(z))`.
    pub fn adversary<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, z: Var, lambda_grl: f64) -> Result<Var> {
        let r = g.grl(z, F::lit(lambda_grl));
        let h = linear(g, p, &format!("{ADVERSARY}.fc1"), r)?;
        let h = g.relu(h);
        linear(g, p, &format!("{ADVERSARY}.fc2"), h)
    }

    /// Binds `views` as constants and returns their variables.
    pub fn bind_inputs<F: Scalar>(g: &mut Graph<F>, batch: &PooledBatch<F>) -> [Var; 6] {
        std::array::from_fn(|i| g.constant(batch.views[i].clone()))
    }
}

/// Trainable and frozen counts per top-level module path.
pub fn param_summary<F: Scalar>(store: &ParamStore<F>) -> Vec<(String, usize, usize)> {
    let mut rows: Vec<(String, usize, usize)> = Vec::new();
    for (path, p) in store.iter() {
        let module = module_of(path);
        let n = p.tensor.numel();
        match rows.iter_mut().find(|r| r.0 == module) {
            Some(r) => {
                if p.trainable {
                    r.1 += n
                } else {
                    r.2 += n
                }
            }
            None => rows.push((module, if p.trainable { n } else { 0 }, if p.trainable { 0 } else { n })),
        }
    }
    rows
}

/// First two path components, e.g. `chain.head3` or `encoder.face`.
fn module_of(path: &str) -> String {
    path.split('.').take(2).collect::<Vec<_>>().join(".")
}
