//! The four task heads and the soft-label prototype chain linking them
//! (traffic context → vehicle context → driver emotion → driver behaviour).

use std::fmt;

use crate::error::{CaupsiError, Result};
use crate::nn::{add_linear, linear, Bindings, Init, MlpSpec, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Tcr,
    Vcr,
    Der,
    Dbr,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Tcr, Task::Vcr, Task::Der, Task::Dbr];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Tcr => "tcr",
            Task::Vcr => "vcr",
            Task::Der => "der",
            Task::Dbr => "dbr",
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Tcr => &["TrafficJam", "Waiting", "Smooth"],
            Task::Vcr => &["Parking", "Turning", "Backward", "LaneChange", "Forward"],
            Task::Der => &["Anxiety", "Peace", "Weariness", "Happiness", "Anger"],
            Task::Dbr => &["Smoking", "Phone", "LookAround", "DozingOff", "NormalDrive", "Talking", "BodyMove"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const SHARED: &str = "chain.shared";

pub fn task_proj_path(t: Task) -> String {
    format!("chain.task{}", t.index() + 1)
}

pub fn head_path(t: Task) -> String {
    format!("chain.head{}", t.index() + 1)
}

pub fn proto_path(t: Task) -> String {
    format!("chain.proto{}", t.index() + 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainSpec {
    pub d_f: usize,
    pub d_z: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub d_psi: usize,
    pub head_hidden: usize,
    pub dropout_p: f64,
    /// When false, heads receive no upstream embeddings and no prototypes exist.
    pub propagate: bool,
}

impl ChainSpec {
    /// Input width of each head, following the input lists in [`forward_chain`].
    pub fn head_input(&self, t: Task) -> usize {
        let e = if self.propagate { self.d_e } else { 0 };
        let base = self.d_t + self.d_psi;
        match t {
            Task::Tcr => base + self.d_f,
            Task::Vcr => base + 2 * self.d_f,
            Task::Der => base + 2 * e + self.d_f,
            Task::Dbr => base + 3 * e + 3 * self.d_f,
        }
    }

    pub fn head(&self, t: Task) -> Result<MlpSpec> {
        MlpSpec::new(self.head_input(t), self.head_hidden, t.num_classes(), self.dropout_p)
    }

    pub fn add_params<F: Scalar>(&self, store: &mut ParamStore<F>, seed: u64) -> Result<()> {
        add_linear(store, SHARED, 2 * self.d_f, self.d_z, true, seed)?;
        for t in Task::ALL {
            add_linear(store, &task_proj_path(t), self.d_z, self.d_t, true, seed)?;
            self.head(t)?.add_params(store, &head_path(t), seed)?;
        }
        if self.propagate {
            for t in [Task::Tcr, Task::Vcr, Task::Der] {
                store.add(&proto_path(t), &[t.num_classes(), self.d_e], Init::Normal(0.02), true, seed)?;
            }
        }
        Ok(())
    }
}

/// `z = W_z [f_in; f_scene] + b_z` and the four task projections `z_r = W_r z + b_r`.
pub fn shared_projection<F: Scalar>(g: &mut Graph<F>, p: &Bindings, ft_in: Var, ft_scene: Var) -> Result<(Var, [Var; 4])> {
    let cat = g.concat(&[ft_in, ft_scene])?;
    let z = linear(g, p, SHARED, cat)?;
    let mut zr = [z; 4];
    for t in Task::ALL {
        zr[t.index()] = linear(g, p, &task_proj_path(t), z)?;
    }
    Ok((z, zr))
}

/// `e = y_hat · P`, a confidence-weighted mix of class prototypes.
///
/// Rows of `probs` must be distributions (non-negative, summing to 1 ± 1e-5).
pub fn soft_label_embed<F: Scalar>(g: &mut Graph<F>, probs: Var, prototypes: Var) -> Result<Var> {
    let c = *g.shape(probs).last().unwrap_or(&0);
    if g.shape(prototypes).first() != Some(&c) {
        return Err(CaupsiError::Shape(format!(
            "probabilities {:?} vs prototypes {:?}",
            g.shape(probs),
            g.shape(prototypes)
        )));
    }
    let tol = F::lit(1e-5);
    for row in g.data(probs).chunks(c) {
        let s: F = row.iter().copied().sum();
        if row.iter().any(|&v| v < F::zero()) || (s - F::one()).abs() > tol {
            return Err(CaupsiError::Contract("soft_label_embed needs normalised probabilities".into()));
        }
    }
    g.matmul(probs, prototypes)
}

/// Features consumed by the heads. `psi` is a zero constant when conditioning is ablated.
#[derive(Clone, Copy, Debug)]
pub struct ChainInputs {
    pub ft_in: Var,
    pub ft_scene: Var,
    pub f_face: Var,
    pub f_body: Var,
    pub psi: Var,
    pub z_tasks: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub logits: [Var; 4],
    pub probs: [Var; 4],
    /// Soft-label embeddings of TCR, VCR and DER when propagation is on.
    pub embeds: [Option<Var>; 3],
}

/// Runs the heads in causal order. Head inputs:
/// TCR `[z1; f~scene; psi]`, VCR `[z2; f~in; f~scene; psi]`,
/// DER `[z3; e1; e2; f_face; psi]`, DBR `[z4; e3; e1; e2; f~scene; f~in; f_body; psi]`.
pub fn forward_chain<F: Scalar>(g: &mut Graph<F>, p: &Bindings, spec: &ChainSpec, x: &ChainInputs) -> Result<ChainOutput> {
    let z = x.z_tasks;
    let mut logits = [x.psi; 4];
    let mut probs = [x.psi; 4];
    let mut embeds: [Option<Var>; 3] = [None; 3];

    let mut run_head = |g: &mut Graph<F>, t: Task, inputs: Vec<Var>| -> Result<Var> {
        let cat = g.concat(&inputs)?;
        let lg = spec.head(t)?.forward(g, p, &head_path(t), cat)?;
        logits[t.index()] = lg;
        g.softmax(lg)
    };

    probs[0] = run_head(g, Task::Tcr, vec![z[0], x.ft_scene, x.psi])?;
    probs[1] = run_head(g, Task::Vcr, vec![z[1], x.ft_in, x.ft_scene, x.psi])?;
    if spec.propagate {
        embeds[0] = Some(soft_label_embed(g, probs[0], p.get(&proto_path(Task::Tcr))?)?);
        embeds[1] = Some(soft_label_embed(g, probs[1], p.get(&proto_path(Task::Vcr))?)?);
    }
    let mut der_in = vec![z[2]];
    if let (Some(e1), Some(e2)) = (embeds[0], embeds[1]) {
        der_in.extend([e1, e2]);
    }
    der_in.extend([x.f_face, x.psi]);
    probs[2] = run_head(g, Task::Der, der_in)?;
    if spec.propagate {
        embeds[2] = Some(soft_label_embed(g, probs[2], p.get(&proto_path(Task::Der))?)?);
    }
    let mut dbr_in = vec![z[3]];
    if let [Some(e1), Some(e2), Some(e3)] = embeds {
        dbr_in.extend([e3, e1, e2]);
    }
    dbr_in.extend([x.ft_scene, x.ft_in, x.f_body, x.psi]);
    probs[3] = run_head(g, Task::Dbr, dbr_in)?;
    Ok(ChainOutput { logits, probs, embeds })
}
