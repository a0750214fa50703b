//! Forward/backward passes over the fixed text-branch + loss graph.
//!
//! The backward pass is hand-derived reverse mode. Per concept it runs once
//! per gradient bucket ("task" and "probe") with accumulated seed vectors at
//! the encoder (E) and projector (P) outputs, so a training step shares one
//! set of forward traces across the contrastive, distillation, and probe
//! terms.

use crate::diffcore::params::{GradientMap, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::{axpy, bits_equal, dot, matvec, matvec_t_add, norm, outer_add};
use crate::losses::{sl1_deriv, smooth_l1, LossBreakdown, RelationMatrix};
use crate::textmodel::branch::{TextBranchState, TextDims};
use crate::textmodel::tokenizer::TokenSeq;

/// Borrowed, shape-checked view of the text-branch parameters.
pub struct ModelView<'a> {
    pub dims: TextDims,
    emb: &'a [f64],
    layer_w: Vec<&'a [f64]>,
    layer_b: Vec<&'a [f64]>,
    layer_w_trainable: Vec<bool>,
    layer_b_trainable: Vec<bool>,
    proj_w: &'a [f64],
    proj_b: &'a [f64],
    proj_w_trainable: bool,
    proj_b_trainable: bool,
}

impl<'a> ModelView<'a> {
    pub fn new(dims: &TextDims, params: &'a ParamStore) -> Result<Self> {
        let fetch = |name: &str, shape: &[usize]| -> Result<(&'a [f64], bool)> {
            let e = params.get(name)?;
            if e.shape != shape {
                return Err(Error::Structural(format!(
                    "parameter '{name}' has shape {:?}, model wants {:?}",
                    e.shape, shape
                )));
            }
            Ok((&e.values, e.trainable))
        };
        let (emb, _) = fetch(TextDims::EMBEDDING, &[dims.v_tok, dims.d])?;
        let mut layer_w = Vec::with_capacity(dims.l_layers);
        let mut layer_b = Vec::with_capacity(dims.l_layers);
        let mut layer_w_trainable = Vec::with_capacity(dims.l_layers);
        let mut layer_b_trainable = Vec::with_capacity(dims.l_layers);
        for i in 0..dims.l_layers {
            let (w, wt) = fetch(&TextDims::layer_weight_name(i), &[dims.d, dims.d])?;
            let (b, bt) = fetch(&TextDims::layer_bias_name(i), &[dims.d])?;
            layer_w.push(w);
            layer_b.push(b);
            layer_w_trainable.push(wt);
            layer_b_trainable.push(bt);
        }
        let (proj_w, proj_w_trainable) = fetch(TextDims::PROJECTOR_WEIGHT, &[dims.d_v, dims.d])?;
        let (proj_b, proj_b_trainable) = fetch(TextDims::PROJECTOR_BIAS, &[dims.d_v])?;
        Ok(Self {
            dims: *dims,
            emb,
            layer_w,
            layer_b,
            layer_w_trainable,
            layer_b_trainable,
            proj_w,
            proj_b,
            proj_w_trainable,
            proj_b_trainable,
        })
    }
}

/// Mean of the non-pad token embedding rows.
fn mean_embedding(view: &ModelView, tokens: &TokenSeq) -> Result<Vec<f64>> {
    let d = view.dims.d;
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for id in tokens.non_pad_ids() {
        let id = id as usize;
        if id >= view.dims.v_tok {
            return Err(Error::Input(format!(
                "token id {id} out of range for vocabulary {}",
                view.dims.v_tok
            )));
        }
        axpy(1.0, &view.emb[id * d..(id + 1) * d], &mut acc);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("all-pad token sequence cannot be encoded".to_string()));
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// E-level forward without trace retention.
pub fn encode_plain(view: &ModelView, tokens: &TokenSeq) -> Result<Vec<f64>> {
    let d = view.dims.d;
    let mut x = mean_embedding(view, tokens)?;
    let mut u = vec![0.0; d];
    for l in 0..view.dims.l_layers {
        matvec(view.layer_w[l], &x, &mut u);
        let b = view.layer_b[l];
        for j in 0..d {
            x[j] += (u[j] + b[j]).tanh();
        }
    }
    Ok(x)
}

/// P-level forward: W_p e + b_p.
pub fn project_plain(view: &ModelView, e: &[f64]) -> Result<Vec<f64>> {
    if e.len() != view.dims.d {
        return Err(Error::Structural(format!(
            "projector input has dimension {}, model wants {}",
            e.len(),
            view.dims.d
        )));
    }
    let mut p = vec![0.0; view.dims.d_v];
    matvec(view.proj_w, e, &mut p);
    for (pi, bi) in p.iter_mut().zip(view.proj_b) {
        *pi += *bi;
    }
    Ok(p)
}

/// Retained intermediates of one concept forward pass.
pub struct Trace {
    /// x_0..x_L (layer inputs; x_L is the E-level output)
    xs: Vec<Vec<f64>>,
    /// tanh outputs per layer
    ts: Vec<Vec<f64>>,
    /// P-level output
    pub p: Vec<f64>,
}

impl Trace {
    pub fn e(&self) -> &[f64] {
        self.xs.last().expect("trace always holds x_0")
    }
}

fn forward_trace(view: &ModelView, tokens: &TokenSeq) -> Result<Trace> {
    let d = view.dims.d;
    let x0 = mean_embedding(view, tokens)?;
    let mut xs = Vec::with_capacity(view.dims.l_layers + 1);
    let mut ts = Vec::with_capacity(view.dims.l_layers);
    xs.push(x0);
    let mut u = vec![0.0; d];
    for l in 0..view.dims.l_layers {
        let x = xs.last().expect("nonempty");
        matvec(view.layer_w[l], x, &mut u);
        let b = view.layer_b[l];
        let mut t = vec![0.0; d];
        let mut next = x.clone();
        for j in 0..d {
            t[j] = (u[j] + b[j]).tanh();
            next[j] += t[j];
        }
        xs.push(next);
        ts.push(t);
    }
    let p = project_plain(view, xs.last().expect("nonempty"))?;
    Ok(Trace { xs, ts, p })
}

/// Gradient accumulator shaped like the trainable entries of the model.
struct FlatGrads {
    layer_w: Vec<Option<Vec<f64>>>,
    layer_b: Vec<Option<Vec<f64>>>,
    proj_w: Option<Vec<f64>>,
    proj_b: Option<Vec<f64>>,
}

impl FlatGrads {
    fn zeros(view: &ModelView) -> Self {
        let d = view.dims.d;
        Self {
            layer_w: view
                .layer_w_trainable
                .iter()
                .map(|&t| t.then(|| vec![0.0; d * d]))
                .collect(),
            layer_b: view
                .layer_b_trainable
                .iter()
                .map(|&t| t.then(|| vec![0.0; d]))
                .collect(),
            proj_w: view.proj_w_trainable.then(|| vec![0.0; view.dims.d_v * d]),
            proj_b: view.proj_b_trainable.then(|| vec![0.0; view.dims.d_v]),
        }
    }

    fn into_gradient_map(self) -> GradientMap {
        let mut out = GradientMap::new();
        for (i, g) in self.layer_w.into_iter().enumerate() {
            if let Some(g) = g {
                out.insert(TextDims::layer_weight_name(i), g);
            }
        }
        for (i, g) in self.layer_b.into_iter().enumerate() {
            if let Some(g) = g {
                out.insert(TextDims::layer_bias_name(i), g);
            }
        }
        if let Some(g) = self.proj_w {
            out.insert(TextDims::PROJECTOR_WEIGHT.to_string(), g);
        }
        if let Some(g) = self.proj_b {
            out.insert(TextDims::PROJECTOR_BIAS.to_string(), g);
        }
        out
    }
}

/// Reverse pass for one concept: seeds at P and/or E flow back through the
/// projector and the residual tanh stack. The embedding is always frozen, so
/// propagation stops there.
fn backward_trace(
    view: &ModelView,
    trace: &Trace,
    seed_p: Option<&[f64]>,
    seed_e: Option<&[f64]>,
    out: &mut FlatGrads,
) {
    let d = view.dims.d;
    let mut delta = vec![0.0; d];
    if let Some(sp) = seed_p {
        if let Some(gw) = out.proj_w.as_deref_mut() {
            outer_add(gw, sp, trace.e());
        }
        if let Some(gb) = out.proj_b.as_deref_mut() {
            axpy(1.0, sp, gb);
        }
        matvec_t_add(view.proj_w, sp, &mut delta);
    }
    if let Some(se) = seed_e {
        axpy(1.0, se, &mut delta);
    }
    let mut du = vec![0.0; d];
    for l in (0..view.dims.l_layers).rev() {
        let t = &trace.ts[l];
        for j in 0..d {
            du[j] = delta[j] * (1.0 - t[j] * t[j]);
        }
        if let Some(gw) = out.layer_w[l].as_deref_mut() {
            outer_add(gw, &du, &trace.xs[l]);
        }
        if let Some(gb) = out.layer_b[l].as_deref_mut() {
            axpy(1.0, &du, gb);
        }
        matvec_t_add(view.layer_w[l], &du, &mut delta);
    }
}

/// Frozen teacher encodings over the old-concept set, computed once per task:
/// E/P vectors, their norms, and both relation matrices.
pub struct TeacherCache {
    pub n: usize,
    pub e: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub ne: Vec<f64>,
    pub np: Vec<f64>,
    pub r_e: Option<RelationMatrix>,
    pub r_p: Option<RelationMatrix>,
}

impl TeacherCache {
    pub fn build(teacher: &TextBranchState, old_tokens: &[TokenSeq]) -> Result<Self> {
        let view = ModelView::new(&teacher.dims, &teacher.params)?;
        let n = old_tokens.len();
        let mut e = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        let mut ne = Vec::with_capacity(n);
        let mut np = Vec::with_capacity(n);
        for tokens in old_tokens {
            let ev = encode_plain(&view, tokens)?;
            let pv = project_plain(&view, &ev)?;
            let nev = norm(&ev);
            let npv = norm(&pv);
            if nev == 0.0 || npv == 0.0 {
                return Err(Error::Numeric(
                    "teacher produced a zero-norm embedding for an old concept".to_string(),
                ));
            }
            e.push(ev);
            p.push(pv);
            ne.push(nev);
            np.push(npv);
        }
        let (r_e, r_p) = if n >= 2 {
            (
                Some(RelationMatrix::from_rows(&e)?),
                Some(RelationMatrix::from_rows(&p)?),
            )
        } else {
            (None, None)
        };
        Ok(Self { n, e, p, ne, np, r_e, r_p })
    }
}

/// Which loss components participate in an evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ComponentSet {
    pub con: bool,
    pub abs_e: bool,
    pub abs_p: bool,
    pub rel_e: bool,
    pub rel_p: bool,
}

impl ComponentSet {
    pub fn task(rssd_enabled: bool) -> Self {
        Self {
            con: true,
            abs_e: rssd_enabled,
            abs_p: rssd_enabled,
            rel_e: rssd_enabled,
            rel_p: rssd_enabled,
        }
    }

    pub fn rssd() -> Self {
        Self {
            con: false,
            abs_e: true,
            abs_p: true,
            rel_e: true,
            rel_p: true,
        }
    }

    pub fn probe() -> Self {
        Self {
            con: false,
            abs_e: true,
            abs_p: true,
            rel_e: false,
            rel_p: false,
        }
    }
}

/// Named loss selectors for the gradient API.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Contrastive,
    AbsE,
    AbsP,
    RelE,
    RelP,
    Rssd,
    Probe,
    Task,
}

impl LossKind {
    pub fn components(self) -> ComponentSet {
        match self {
            LossKind::Contrastive => ComponentSet {
                con: true,
                ..ComponentSet::default()
            },
            LossKind::AbsE => ComponentSet {
                abs_e: true,
                ..ComponentSet::default()
            },
            LossKind::AbsP => ComponentSet {
                abs_p: true,
                ..ComponentSet::default()
            },
            LossKind::RelE => ComponentSet {
                rel_e: true,
                ..ComponentSet::default()
            },
            LossKind::RelP => ComponentSet {
                rel_p: true,
                ..ComponentSet::default()
            },
            LossKind::Rssd => ComponentSet::rssd(),
            LossKind::Probe => ComponentSet::probe(),
            LossKind::Task => ComponentSet::task(true),
        }
    }

    pub fn scalar(self, b: &LossBreakdown) -> f64 {
        match self {
            LossKind::Contrastive => b.l_con,
            LossKind::AbsE => b.l_abs_e,
            LossKind::AbsP => b.l_abs_p,
            LossKind::RelE => b.l_rel_e,
            LossKind::RelP => b.l_rel_p,
            LossKind::Rssd => b.l_rssd,
            LossKind::Probe => b.l_probe,
            LossKind::Task => b.l_task,
        }
    }
}

/// One region feature paired with its label (an index into the candidates).
pub struct Region<'a> {
    pub feature: &'a [f64],
    pub label: usize,
}

/// Everything a loss evaluation needs besides the parameters.
pub struct ModelInputs<'a> {
    pub dims: TextDims,
    pub candidates: &'a [TokenSeq],
    /// Indices into `candidates` forming the old-knowledge set, in the same
    /// order as the teacher cache rows.
    pub old: &'a [usize],
    pub regions: &'a [Region<'a>],
    pub teacher: Option<&'a TeacherCache>,
    pub tau_c: f64,
    pub beta: f64,
}

/// What to compute in one evaluation.
pub struct EvalRequest {
    pub components: ComponentSet,
    pub task_grads: bool,
    pub probe_grads: bool,
}

/// Evaluation result: the loss components plus the requested gradient buckets.
pub struct StepEval {
    pub breakdown: LossBreakdown,
    pub task_grads: Option<GradientMap>,
    pub probe_grads: Option<GradientMap>,
}

fn check_term(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{term} is non-finite ({value})")))
    }
}

/// Fused forward + backward over the requested components. Forward traces of
/// each concept are shared by every term that touches it.
pub fn evaluate(inputs: &ModelInputs, params: &ParamStore, req: &EvalRequest) -> Result<StepEval> {
    let comp = req.components;
    let nc = inputs.candidates.len();
    let need_abs = comp.abs_e || comp.abs_p || req.probe_grads;
    let need_rel = comp.rel_e || comp.rel_p;
    let need_distill = need_abs || need_rel;

    if comp.con {
        if nc == 0 {
            return Err(Error::Structural("contrastive loss needs candidates".to_string()));
        }
        if inputs.regions.is_empty() {
            return Err(Error::Structural("contrastive loss needs at least one region".to_string()));
        }
        if !(inputs.tau_c > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                inputs.tau_c
            )));
        }
        for (b, r) in inputs.regions.iter().enumerate() {
            if r.label >= nc {
                return Err(Error::Structural(format!(
                    "region {b} labels candidate {} but only {nc} candidates exist",
                    r.label
                )));
            }
            if r.feature.len() != inputs.dims.d_v {
                return Err(Error::Structural(format!(
                    "region {b} feature has dimension {}, model wants {}",
                    r.feature.len(),
                    inputs.dims.d_v
                )));
            }
        }
    }
    if need_rel && !(inputs.beta > 0.0) {
        return Err(Error::Config(format!(
            "smooth-l1 beta must be positive, got {}",
            inputs.beta
        )));
    }
    let teacher = if need_distill {
        let t = inputs
            .teacher
            .ok_or_else(|| Error::Structural("distillation requires a teacher cache".to_string()))?;
        if inputs.old.is_empty() {
            return Err(Error::Structural(
                "distillation requires a nonempty old-concept set".to_string(),
            ));
        }
        if t.n != inputs.old.len() {
            return Err(Error::Structural(format!(
                "teacher cache covers {} concepts, old set has {}",
                t.n,
                inputs.old.len()
            )));
        }
        if let Some(&bad) = inputs.old.iter().find(|&&ci| ci >= nc) {
            return Err(Error::Structural(format!(
                "old-concept index {bad} out of range for {nc} candidates"
            )));
        }
        Some(t)
    } else {
        None
    };

    let view = ModelView::new(&inputs.dims, params)?;
    let want_grads = req.task_grads || req.probe_grads;

    // forward traces for every concept any term touches
    let mut needed = vec![false; nc];
    if comp.con {
        needed.fill(true);
    }
    if need_distill {
        for &ci in inputs.old {
            needed[ci] = true;
        }
    }
    let mut traces: Vec<Option<Trace>> = Vec::with_capacity(nc);
    for (i, tokens) in inputs.candidates.iter().enumerate() {
        traces.push(if needed[i] {
            Some(forward_trace(&view, tokens)?)
        } else {
            None
        });
    }
    // projected-embedding norms
    let mut np = vec![0.0; nc];
    for i in 0..nc {
        if let Some(tr) = &traces[i] {
            np[i] = norm(&tr.p);
            if np[i] == 0.0 && (comp.con || comp.abs_p || comp.rel_p || req.probe_grads) {
                return Err(Error::Numeric(format!(
                    "zero-norm projected embedding for candidate {i}"
                )));
            }
        }
    }

    // ---- contrastive forward
    let nb = inputs.regions.len();
    let mut l_con = 0.0;
    let mut cos_con = vec![0.0; nb * nc];
    let mut prob_con = vec![0.0; nb * nc];
    let mut nf = vec![0.0; nb];
    if comp.con {
        let inv_tau = 1.0 / inputs.tau_c;
        for (b, reg) in inputs.regions.iter().enumerate() {
            nf[b] = norm(reg.feature);
            if nf[b] == 0.0 {
                return Err(Error::Numeric(format!("zero-norm feature for region {b}")));
            }
            let row = &mut cos_con[b * nc..(b + 1) * nc];
            let mut zmax = f64::NEG_INFINITY;
            for (j, c) in row.iter_mut().enumerate() {
                let tr = traces[j].as_ref().expect("all candidates traced for contrastive");
                *c = dot(reg.feature, &tr.p) / (nf[b] * np[j]);
                zmax = zmax.max(*c * inv_tau);
            }
            let mut sum = 0.0;
            let prow = &mut prob_con[b * nc..(b + 1) * nc];
            for j in 0..nc {
                let e = (row[j] * inv_tau - zmax).exp();
                prow[j] = e;
                sum += e;
            }
            let inv_sum = 1.0 / sum;
            prow.iter_mut().for_each(|p| *p *= inv_sum);
            l_con += sum.ln() + zmax - row[reg.label] * inv_tau;
        }
        l_con = check_term(l_con / nb as f64, "l_con")?;
    }

    // ---- distillation forward
    let nold = inputs.old.len();
    let mut cos_e = vec![0.0; nold];
    let mut cos_p = vec![0.0; nold];
    let mut ne_s = vec![0.0; nold];
    let mut l_abs_e = 0.0;
    let mut l_abs_p = 0.0;
    let mut l_rel_e = 0.0;
    let mut l_rel_p = 0.0;
    let mut r_se: Option<RelationMatrix> = None;
    let mut r_sp: Option<RelationMatrix> = None;
    if let Some(tea) = teacher {
        for (oi, &ci) in inputs.old.iter().enumerate() {
            let tr = traces[ci].as_ref().expect("old concepts traced");
            let es = tr.e();
            ne_s[oi] = norm(es);
            if ne_s[oi] == 0.0 {
                return Err(Error::Numeric(format!(
                    "l_abs_E: zero-norm encoder embedding for old concept {oi}"
                )));
            }
            let te = &tea.e[oi];
            cos_e[oi] = if bits_equal(es, te) {
                1.0
            } else {
                dot(es, te) / (ne_s[oi] * tea.ne[oi])
            };
            let tp = &tea.p[oi];
            cos_p[oi] = if bits_equal(&tr.p, tp) {
                1.0
            } else {
                dot(&tr.p, tp) / (np[ci] * tea.np[oi])
            };
        }
        if comp.abs_e || req.probe_grads {
            let mean: f64 = cos_e.iter().sum::<f64>() / nold as f64;
            l_abs_e = check_term(1.0 - mean, "l_abs_E")?;
        }
        if comp.abs_p || req.probe_grads {
            let mean: f64 = cos_p.iter().sum::<f64>() / nold as f64;
            l_abs_p = check_term(1.0 - mean, "l_abs_P")?;
        }
        if need_rel {
            if nold >= 2 {
                let e_rows: Vec<&[f64]> = inputs
                    .old
                    .iter()
                    .map(|&ci| traces[ci].as_ref().expect("traced").e())
                    .collect();
                let p_rows: Vec<&[f64]> = inputs
                    .old
                    .iter()
                    .map(|&ci| traces[ci].as_ref().expect("traced").p.as_slice())
                    .collect();
                let se = RelationMatrix::from_rows(&e_rows)?;
                let sp = RelationMatrix::from_rows(&p_rows)?;
                if comp.rel_e {
                    l_rel_e = check_term(
                        smooth_l1(&se, tea.r_e.as_ref().expect("teacher relations"), inputs.beta)?,
                        "l_rel_E",
                    )?;
                }
                if comp.rel_p {
                    l_rel_p = check_term(
                        smooth_l1(&sp, tea.r_p.as_ref().expect("teacher relations"), inputs.beta)?,
                        "l_rel_P",
                    )?;
                }
                r_se = Some(se);
                r_sp = Some(sp);
            } else {
                log::warn!("relation distillation skipped: {nold} old concept(s), need at least 2");
            }
        }
    }

    let reported = ComponentSet {
        con: comp.con,
        abs_e: comp.abs_e || req.probe_grads,
        abs_p: comp.abs_p || req.probe_grads,
        ..comp
    };
    let breakdown = LossBreakdown::from_components(
        if reported.con { l_con } else { 0.0 },
        if reported.abs_e { l_abs_e } else { 0.0 },
        if reported.abs_p { l_abs_p } else { 0.0 },
        if reported.rel_e { l_rel_e } else { 0.0 },
        if reported.rel_p { l_rel_p } else { 0.0 },
    );

    if !want_grads {
        return Ok(StepEval {
            breakdown,
            task_grads: None,
            probe_grads: None,
        });
    }

    // ---- seed accumulation
    let d = inputs.dims.d;
    let d_v = inputs.dims.d_v;
    let mut sp_task: Vec<Option<Vec<f64>>> = (0..nc).map(|_| None).collect();
    let mut se_task: Vec<Option<Vec<f64>>> = (0..nc).map(|_| None).collect();
    let mut sp_probe: Vec<Option<Vec<f64>>> = (0..nc).map(|_| None).collect();
    let mut se_probe: Vec<Option<Vec<f64>>> = (0..nc).map(|_| None).collect();

    fn add_seed(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
        slot.get_or_insert_with(|| vec![0.0; len])
    }

    if req.task_grads && comp.con {
        // d l_con / d P_j accumulated over the batch:
        //   sum_b coeff_bj * (f_b / (|f_b||P_j|)  -  cos_bj * P_j / |P_j|^2)
        // with coeff_bj = (softmax_bj - 1[j = label_b]) / (B * tau)
        let inv_btau = 1.0 / (nb as f64 * inputs.tau_c);
        let mut acc_f = vec![0.0; nc * d_v];
        let mut acc_c = vec![0.0; nc];
        for (b, reg) in inputs.regions.iter().enumerate() {
            let prow = &prob_con[b * nc..(b + 1) * nc];
            let crow = &cos_con[b * nc..(b + 1) * nc];
            for j in 0..nc {
                let mut coeff = prow[j];
                if j == reg.label {
                    coeff -= 1.0;
                }
                coeff *= inv_btau;
                axpy(coeff / nf[b], reg.feature, &mut acc_f[j * d_v..(j + 1) * d_v]);
                acc_c[j] += coeff * crow[j];
            }
        }
        for j in 0..nc {
            let tr = traces[j].as_ref().expect("traced");
            let seed = add_seed(&mut sp_task[j], d_v);
            axpy(1.0 / np[j], &acc_f[j * d_v..(j + 1) * d_v], seed);
            axpy(-acc_c[j] / (np[j] * np[j]), &tr.p, seed);
        }
    }

    if let Some(tea) = teacher {
        let inv_n = 1.0 / nold as f64;
        for (oi, &ci) in inputs.old.iter().enumerate() {
            let tr = traces[ci].as_ref().expect("traced");
            // absolute terms: d(1 - mean cos)/dX = -(1/n) * dcos/dX, with
            // dcos/dX_k = T_k/(|X||T|) - cos * X_k/(|X||X|). The two factors
            // are written so they cancel bitwise when student == teacher.
            let abs_e_task = comp.abs_e && req.task_grads;
            let abs_p_task = comp.abs_p && req.task_grads;
            if abs_e_task || req.probe_grads {
                let a1 = 1.0 / (ne_s[oi] * tea.ne[oi]);
                let a2 = cos_e[oi] / (ne_s[oi] * ne_s[oi]);
                let es = tr.e();
                let te = &tea.e[oi];
                let build = |seed: &mut Vec<f64>| {
                    for k in 0..d {
                        seed[k] += -inv_n * (te[k] * a1 - es[k] * a2);
                    }
                };
                if abs_e_task {
                    build(add_seed(&mut se_task[ci], d));
                }
                if req.probe_grads {
                    build(add_seed(&mut se_probe[ci], d));
                }
            }
            if abs_p_task || req.probe_grads {
                let a1 = 1.0 / (np[ci] * tea.np[oi]);
                let a2 = cos_p[oi] / (np[ci] * np[ci]);
                let ps = &tr.p;
                let tp = &tea.p[oi];
                let build = |seed: &mut Vec<f64>| {
                    for k in 0..d_v {
                        seed[k] += -inv_n * (tp[k] * a1 - ps[k] * a2);
                    }
                };
                if abs_p_task {
                    build(add_seed(&mut sp_task[ci], d_v));
                }
                if req.probe_grads {
                    build(add_seed(&mut sp_probe[ci], d_v));
                }
            }
        }

        // relational terms: upper-triangle sweep; each unordered pair appears
        // twice in the mean over n^2 matrix elements, diagonal differences
        // are exactly zero
        if req.task_grads && nold >= 2 {
            let inv_n2 = 1.0 / (nold * nold) as f64;
            if comp.rel_e {
                let rs = r_se.as_ref().expect("student relations");
                let rt = tea.r_e.as_ref().expect("teacher relations");
                rel_seeds(
                    inputs,
                    &traces,
                    |tr| tr.e(),
                    &ne_s,
                    rs,
                    rt,
                    inputs.beta,
                    2.0 * inv_n2,
                    d,
                    &mut se_task,
                );
            }
            if comp.rel_p {
                let rs = r_sp.as_ref().expect("student relations");
                let rt = tea.r_p.as_ref().expect("teacher relations");
                let np_old: Vec<f64> = inputs.old.iter().map(|&ci| np[ci]).collect();
                rel_seeds(
                    inputs,
                    &traces,
                    |tr| tr.p.as_slice(),
                    &np_old,
                    rs,
                    rt,
                    inputs.beta,
                    2.0 * inv_n2,
                    d_v,
                    &mut sp_task,
                );
            }
        }
    }

    // ---- backward
    let task_grads = if req.task_grads {
        let mut gt = FlatGrads::zeros(&view);
        for i in 0..nc {
            if sp_task[i].is_some() || se_task[i].is_some() {
                backward_trace(
                    &view,
                    traces[i].as_ref().expect("traced"),
                    sp_task[i].as_deref(),
                    se_task[i].as_deref(),
                    &mut gt,
                );
            }
        }
        let map = gt.into_gradient_map();
        map.validate_against(params, "task gradients")?;
        Some(map)
    } else {
        None
    };
    let probe_grads = if req.probe_grads {
        let mut gp = FlatGrads::zeros(&view);
        for i in 0..nc {
            if sp_probe[i].is_some() || se_probe[i].is_some() {
                backward_trace(
                    &view,
                    traces[i].as_ref().expect("traced"),
                    sp_probe[i].as_deref(),
                    se_probe[i].as_deref(),
                    &mut gp,
                );
            }
        }
        let map = gp.into_gradient_map();
        map.validate_against(params, "probe gradients")?;
        Some(map)
    } else {
        None
    };

    Ok(StepEval {
        breakdown,
        task_grads,
        probe_grads,
    })
}

/// Seed contributions of one relation-matrix SmoothL1 term.
#[allow(clippy::too_many_arguments)]
fn rel_seeds<'t>(
    inputs: &ModelInputs,
    traces: &'t [Option<Trace>],
    row_of: impl Fn(&'t Trace) -> &'t [f64],
    norms: &[f64],
    rs: &RelationMatrix,
    rt: &RelationMatrix,
    beta: f64,
    pair_weight: f64,
    dim: usize,
    seeds: &mut [Option<Vec<f64>>],
) {
    let nold = inputs.old.len();
    let rows: Vec<&[f64]> = inputs
        .old
        .iter()
        .map(|&ci| row_of(traces[ci].as_ref().expect("traced")))
        .collect();
    for i in 0..nold {
        for j in (i + 1)..nold {
            let dij = rs.get(i, j) - rt.get(i, j);
            let g = sl1_deriv(dij, beta);
            if g == 0.0 {
                continue;
            }
            let w = pair_weight * g;
            let rij = rs.get(i, j);
            let a_ij = 1.0 / (norms[i] * norms[j]);
            let ci = inputs.old[i];
            let cj = inputs.old[j];
            {
                let seed = seeds[ci].get_or_insert_with(|| vec![0.0; dim]);
                axpy(w * a_ij, rows[j], seed);
                axpy(-w * rij / (norms[i] * norms[i]), rows[i], seed);
            }
            {
                let seed = seeds[cj].get_or_insert_with(|| vec![0.0; dim]);
                axpy(w * a_ij, rows[i], seed);
                axpy(-w * rij / (norms[j] * norms[j]), rows[j], seed);
            }
        }
    }
}

/// Scalar loss + exact gradients for one loss selector.
pub fn value_and_grad(
    kind: LossKind,
    inputs: &ModelInputs,
    params: &ParamStore,
) -> Result<(f64, GradientMap)> {
    let req = EvalRequest {
        components: kind.components(),
        task_grads: !matches!(kind, LossKind::Probe),
        probe_grads: matches!(kind, LossKind::Probe),
    };
    let ev = evaluate(inputs, params, &req)?;
    let grads = match kind {
        LossKind::Probe => ev.probe_grads.expect("probe gradients requested"),
        _ => ev.task_grads.expect("task gradients requested"),
    };
    Ok((kind.scalar(&ev.breakdown), grads))
}

/// Forward-only scalar loss.
pub fn loss_value(kind: LossKind, inputs: &ModelInputs, params: &ParamStore) -> Result<f64> {
    let req = EvalRequest {
        components: kind.components(),
        task_grads: false,
        probe_grads: false,
    };
    let ev = evaluate(inputs, params, &req)?;
    Ok(kind.scalar(&ev.breakdown))
}

/// Central finite differences per trainable element: the gradient oracle.
pub fn finite_difference_grad(
    kind: LossKind,
    inputs: &ModelInputs,
    params: &ParamStore,
    h: f64,
) -> Result<GradientMap> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = params.clone();
    let names = params.trainable_names();
    let mut out = GradientMap::new();
    for name in names {
        let len = work.get(&name)?.len();
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.get(&name)?.values[i];
            work.get_mut(&name)?.values[i] = orig + h;
            let lp = loss_value(kind, inputs, &work)?;
            work.get_mut(&name)?.values[i] = orig - h;
            let lm = loss_value(kind, inputs, &work)?;
            work.get_mut(&name)?.values[i] = orig;
            *gi = (lp - lm) / (2.0 * h);
            if !gi.is_finite() {
                return Err(Error::Numeric(format!(
                    "finite difference non-finite for '{name}' element {i}"
                )));
            }
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Central difference of a scalar function — used to sanity-check the
/// finite-difference formula itself.
pub fn central_difference<F: Fn(f64) -> Result<f64>>(f: F, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let fp = f(x + h)?;
    let fm = f(x - h)?;
    let g = (fp - fm) / (2.0 * h);
    if !g.is_finite() {
        return Err(Error::Numeric("central difference is non-finite".to_string()));
    }
    Ok(g)
}
