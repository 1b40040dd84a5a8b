//! Losses and the staged training schedule.
//!
//! * Phase 0 fits the identity encoder to the dataset's identity latents
//!   (through a fixed random projection to `d_z`), then freezes it.
//! * Phase I fits the attribute encoder and mapping network for
//!   reconstruction.
//! * Phase II fits the flow and the compensation layer with everything
//!   else frozen.
//!
//! Pixel and feature L1 terms are means over elements; the parse and
//! perceptual terms are mean squared feature differences.

use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, LossWeights};
use crate::error::{contract_err, Error, Result};
use crate::keygen::Secret;
use crate::numerics::gradcheck::check_coords;
use crate::numerics::{AdamState, Graph, Real, Rng, Var};
use crate::pipeline::{PipelineBinding, PipelineModel, Trainable};
use crate::synthdata::{Renderer, Split, SyntheticDataset};

/// Length in bytes of the random secrets drawn during Phase II.
pub const TRAIN_SECRET_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    Recovered,
    Anonymized,
    FalseRecovered,
}

impl LossWeights {
    /// `(L1, perceptual, pose, parse)` weights for one generated-image kind.
    pub fn schedule(&self, kind: ImageKind) -> [f64; 4] {
        match kind {
            ImageKind::Recovered => self.img_recovered,
            ImageKind::Anonymized | ImageKind::FalseRecovered => self.img_other,
        }
    }
}

/// `sum_i w_i * v_i`, skipping zero weights.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { v } else { g.scale(v, w) };
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let z = g.constant(Array2::zeros((1, 1)));
            Ok(z)
        }
    }
}

/// Mean absolute elementwise difference.
pub fn mean_abs<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean squared elementwise difference.
pub fn mean_sq<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

/// `alpha * (1 - mean SSIM) + beta * mean |x_rec - x|`.
pub fn loss_vq<T: Real>(g: &mut Graph<T>, x_rec: Var, x: Var, h: usize, w: usize, wts: &LossWeights) -> Result<Var> {
    let s = g.ssim(x_rec, x, h, w)?;
    let s = g.mean(s);
    let s = g.scale(s, -wts.alpha);
    let vq = g.add_scalar(s, wts.alpha);
    let l1 = mean_abs(g, x_rec, x)?;
    weighted_sum(g, &[(vq, 1.0), (l1, wts.beta)])
}

/// L1 between identity embeddings plus L1 between pose features.
pub fn loss_sem<T: Real>(model: &PipelineModel<T>, g: &mut Graph<T>, b: &PipelineBinding, x_rec: Var, x: Var) -> Result<Var> {
    let zr = model.e_id_var(g, b, x_rec)?;
    let z = model.e_id_var(g, b, x)?;
    let id = mean_abs(g, zr, z)?;
    let pr = model.proxies.pose.apply(g, &b.pose, x_rec)?;
    let p = model.proxies.pose.apply(g, &b.pose, x)?;
    let pose = mean_abs(g, pr, p)?;
    g.add(id, pose)
}

/// Reconstruction loss `lambda * L_VQ + L_Sem` with its two parts.
pub fn loss_p1<T: Real>(
    model: &PipelineModel<T>,
    g: &mut Graph<T>,
    b: &PipelineBinding,
    x_rec: Var,
    x: Var,
    wts: &LossWeights,
) -> Result<(Var, Var, Var)> {
    let d = model.dims();
    let vq = loss_vq(g, x_rec, x, d.height, d.width, wts)?;
    let sem = loss_sem(model, g, b, x_rec, x)?;
    let total = weighted_sum(g, &[(vq, wts.lambda_vq), (sem, 1.0)])?;
    Ok((total, vq, sem))
}

/// Per-row `max(0, cos(a, b))`.
pub fn theta_plus<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let c = g.row_cosine(a, b)?;
    Ok(g.relu(c))
}

/// Per-row `1 - cos(a, b)`.
pub fn theta_minus<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let c = g.row_cosine(a, b)?;
    let n = g.neg(c);
    Ok(g.add_scalar(n, 1.0))
}

/// Mean `theta_plus` between anonymized and original embeddings.
pub fn loss_anon<T: Real>(g: &mut Graph<T>, z_anon_img: Var, z_orig: Var) -> Result<Var> {
    let t = theta_plus(g, z_anon_img, z_orig)?;
    Ok(g.mean(t))
}

/// Row-index pairs of a `samples x keys` grid stored as `i * keys + j`:
/// same key across samples, then same sample across keys.
pub fn diversity_pairs(samples: usize, keys: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut inter_id = Vec::new();
    for j in 0..keys {
        for i1 in 0..samples {
            for i2 in i1 + 1..samples {
                inter_id.push((i1 * keys + j, i2 * keys + j));
            }
        }
    }
    let mut inter_key = Vec::new();
    for i in 0..samples {
        for j1 in 0..keys {
            for j2 in j1 + 1..keys {
                inter_key.push((i * keys + j1, i * keys + j2));
            }
        }
    }
    (inter_id, inter_key)
}

fn mean_pair_theta<T: Real>(g: &mut Graph<T>, z: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = g.gather_rows(z, &left)?;
    let b = g.gather_rows(z, &right)?;
    let t = theta_plus(g, a, b)?;
    Ok(g.mean(t))
}

/// Diversity loss over the embeddings of a `samples x keys` anonymization grid.
pub fn loss_div<T: Real>(g: &mut Graph<T>, z_anon_img: Var, samples: usize, keys: usize) -> Result<Var> {
    if samples < 2 || keys < 2 {
        return contract_err("diversity needs at least two samples and two keys");
    }
    if g.value(z_anon_img).nrows() != samples * keys {
        return contract_err(format!("{} rows for a {samples} x {keys} grid", g.value(z_anon_img).nrows()));
    }
    let (inter_id, inter_key) = diversity_pairs(samples, keys);
    let a = mean_pair_theta(g, z_anon_img, &inter_id)?;
    let b = mean_pair_theta(g, z_anon_img, &inter_key)?;
    g.add(a, b)
}

/// Mean `theta_minus(recovered, original) + theta_plus(false recovery, original)`.
pub fn loss_deanon<T: Real>(g: &mut Graph<T>, z_rec: Var, z_false: Var, z_orig: Var) -> Result<Var> {
    let a = theta_minus(g, z_rec, z_orig)?;
    let a = g.mean(a);
    let b = theta_plus(g, z_false, z_orig)?;
    let b = g.mean(b);
    g.add(a, b)
}

/// Multi-granularity image loss with the schedule for `kind`.
pub fn loss_img<T: Real>(
    model: &PipelineModel<T>,
    g: &mut Graph<T>,
    b: &PipelineBinding,
    x_gen: Var,
    x: Var,
    kind: ImageKind,
    wts: &LossWeights,
) -> Result<Var> {
    let [w1, w2, w3, w4] = wts.schedule(kind);
    let p = &model.proxies;
    let l1 = mean_abs(g, x_gen, x)?;
    let fa = p.perceptual.apply(g, &b.perceptual, x_gen)?;
    let fb = p.perceptual.apply(g, &b.perceptual, x)?;
    let perc = mean_sq(g, fa, fb)?;
    let fa = p.pose.apply(g, &b.pose, x_gen)?;
    let fb = p.pose.apply(g, &b.pose, x)?;
    let pose = mean_abs(g, fa, fb)?;
    let fa = p.parse.apply(g, &b.parse, x_gen)?;
    let fb = p.parse.apply(g, &b.parse, x)?;
    let parse = mean_sq(g, fa, fb)?;
    weighted_sum(g, &[(l1, w1), (perc, w2), (pose, w3), (parse, w4)])
}

/// Named scalar parts of the secure-phase objective.
pub struct P2Terms {
    pub anon: Var,
    pub div: Var,
    pub deanon: Var,
    pub img: Var,
}

/// Images of one secure-phase batch, rows laid out as `i * keys + j`.
pub struct SecureBatch {
    pub x: Var,
    pub z: Var,
    pub x_anon: Var,
    pub z_anon_img: Var,
    pub x_rec: Var,
    pub z_rec: Var,
    pub x_false: Var,
    pub z_false: Var,
}

/// Anonymizes every sample under every key, recovers with the matching key
/// and with the next key in the batch (the false recovery).
pub fn secure_forward<T: Real>(
    model: &PipelineModel<T>,
    g: &mut Graph<T>,
    b: &PipelineBinding,
    images: &Array2<T>,
    keys: &Array2<T>,
) -> Result<SecureBatch> {
    let (n, k) = (images.nrows(), keys.nrows());
    let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let key_idx: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
    let wrong_idx: Vec<usize> = key_idx.iter().map(|&j| (j + 1) % k).collect();

    let x0 = g.constant(images.clone());
    let kv = g.constant(keys.clone());
    let x = g.gather_rows(x0, &rep)?;
    let kr = g.gather_rows(kv, &key_idx)?;
    let kw = g.gather_rows(kv, &wrong_idx)?;

    let av = model.anonymize_var(g, b, x, kr, false)?;
    let x_anon = av.image;
    let z_anon_img = model.e_id_var(g, b, x_anon)?;
    let zc = model.icl_var(g, b, z_anon_img)?;
    let a_anon = model.e_attr_var(g, b, x_anon)?;

    let z_back = model.sif.inverse_var(g, &b.sif, zc, kr)?;
    let x_rec = model.decode_var(g, b, z_back, a_anon)?;
    let z_rec = model.e_id_var(g, b, x_rec)?;

    let z_wrong = model.sif.inverse_var(g, &b.sif, zc, kw)?;
    let x_false = model.decode_var(g, b, z_wrong, a_anon)?;
    let z_false = model.e_id_var(g, b, x_false)?;

    Ok(SecureBatch { x, z: av.z, x_anon, z_anon_img, x_rec, z_rec, x_false, z_false })
}

/// `L_Anon + L_Div + L_DeAnon + L_Img` with per-term weights and ablation flags.
pub fn loss_p2<T: Real>(
    model: &PipelineModel<T>,
    g: &mut Graph<T>,
    b: &PipelineBinding,
    sb: &SecureBatch,
    samples: usize,
    keys: usize,
    cfg: &Config,
) -> Result<(Var, P2Terms)> {
    let w = &cfg.training.weights;
    let anon = loss_anon(g, sb.z_anon_img, sb.z)?;
    let div = loss_div(g, sb.z_anon_img, samples, keys)?;
    let deanon = loss_deanon(g, sb.z_rec, sb.z_false, sb.z)?;
    let ir = loss_img(model, g, b, sb.x_rec, sb.x, ImageKind::Recovered, w)?;
    let ia = loss_img(model, g, b, sb.x_anon, sb.x, ImageKind::Anonymized, w)?;
    let iff = loss_img(model, g, b, sb.x_false, sb.x, ImageKind::FalseRecovered, w)?;
    let img = weighted_sum(g, &[(ir, 1.0), (ia, 1.0), (iff, 1.0)])?;
    let a = &cfg.ablation;
    let total = weighted_sum(
        g,
        &[
            (anon, w.anon),
            (div, if a.no_div { 0.0 } else { w.div }),
            (deanon, w.deanon),
            (img, if a.no_img { 0.0 } else { w.img }),
        ],
    )?;
    Ok((total, P2Terms { anon, div, deanon, img }))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub phase: &'static str,
    pub step: usize,
    pub terms: Vec<(&'static str, f64)>,
    pub wall_s: f64,
}

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "phase={} step={}", self.phase, self.step)?;
        for (k, v) in &self.terms {
            write!(f, " {k}={v:.6}")?;
        }
        write!(f, " wall_s={:.3}", self.wall_s)
    }
}

pub type Logger<'a> = &'a mut dyn FnMut(&LogRecord);

/// Fixed random projection of identity latents to `d_z`, row-normalized:
/// the regression target of the identity encoder.
pub fn identity_targets(u: &Array2<f32>, d_z: usize, seed: u64) -> Array2<f64> {
    let proj: Array2<f64> = Rng::new(seed).derive("identity-projection").normal_matrix(u.ncols(), d_z, 1.0);
    let mut t = u.mapv(f64::from).dot(&proj);
    for mut row in t.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|x| x / n);
    }
    t
}

fn trainable_vars(b: &PipelineBinding, model_frozen: [bool; 5], tr: Trainable) -> Vec<Var> {
    let mut out = Vec::new();
    let flags = [tr.e_id, tr.e_attr, tr.mapping, tr.icl && !model_frozen[3], tr.sif];
    if flags[0] && !model_frozen[0] {
        out.extend(b.e_id.vars());
    }
    if flags[1] && !model_frozen[1] {
        out.extend(b.e_attr.vars());
    }
    if flags[2] && !model_frozen[2] {
        out.extend(b.mapping.vars());
    }
    if flags[3] {
        out.extend(b.icl.vars());
    }
    if flags[4] && !model_frozen[4] {
        out.extend(b.sif.vars());
    }
    out
}

fn frozen_flags<T: Real>(m: &PipelineModel<T>) -> [bool; 5] {
    [m.e_id.frozen, m.e_attr.frozen, m.mapping.frozen, m.icl.frozen || !m.use_icl, m.sif.is_frozen()]
}

fn trainable_params<T: Real>(m: &mut PipelineModel<T>, tr: Trainable) -> Vec<&mut Array2<T>> {
    let f = frozen_flags(m);
    let mut out = Vec::new();
    if tr.e_id && !f[0] {
        out.extend(m.e_id.params_mut());
    }
    if tr.e_attr && !f[1] {
        out.extend(m.e_attr.params_mut());
    }
    if tr.mapping && !f[2] {
        out.extend(m.mapping.params_mut());
    }
    if tr.icl && !f[3] {
        out.extend(m.icl.params_mut());
    }
    if tr.sif && !f[4] {
        out.extend(m.sif.params_mut());
    }
    out
}

type Objective<'a, T> =
    dyn FnMut(&PipelineModel<T>, &mut Graph<T>, &PipelineBinding) -> Result<(Var, Vec<(&'static str, Var)>)> + 'a;

/// Builds the objective, backpropagates and applies one Adam update to the
/// trainable, unfrozen networks. Returns the logged scalar terms.
fn optimize_step<T: Real>(
    model: &mut PipelineModel<T>,
    tr: Trainable,
    adam: &mut AdamState<T>,
    objective: &mut Objective<'_, T>,
) -> Result<Vec<(&'static str, f64)>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, tr);
    let (loss, terms) = objective(model, &mut g, &b)?;
    let total = g.scalar(loss).as_f64();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total}")));
    }
    let mut grads = g.backward(loss)?;
    let vars = trainable_vars(&b, frozen_flags(model), tr);
    let grads: Vec<Array2<T>> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Array2::zeros(g.value(v).dim())))
        .collect();
    let mut params = trainable_params(model, tr);
    adam.step(&mut params, &grads)?;
    let mut out = vec![("loss", total)];
    out.extend(terms.into_iter().map(|(n, v)| (n, g.scalar(v).as_f64())));
    Ok(out)
}

fn should_log(step: usize, total: usize, every: usize) -> bool {
    step == 0 || step + 1 == total || (step + 1).is_multiple_of(every)
}

/// Samples from the training split.
struct Sampler {
    rng: Rng,
    by_identity: Vec<Vec<usize>>,
    all: Vec<usize>,
}

impl Sampler {
    fn new(data: &SyntheticDataset, rng: Rng) -> Self {
        let ids = data.identities(Split::Train);
        let by_identity = ids
            .iter()
            .map(|&i| (i * data.per_id..(i + 1) * data.per_id).collect())
            .collect();
        Self { rng, by_identity, all: data.samples(Split::Train) }
    }

    fn any(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.all[self.rng.below(self.all.len())]).collect()
    }

    /// `n` samples from `n` distinct identities.
    fn distinct_identities(&mut self, n: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.by_identity.len()).collect();
        self.rng.shuffle(&mut ids);
        ids.truncate(n);
        ids.iter()
            .map(|&i| {
                let s = &self.by_identity[i];
                s[self.rng.below(s.len())]
            })
            .collect()
    }
}

/// Fits the identity encoder to projected identity latents and freezes it.
/// By default every batch holds freshly drawn identities rendered by the
/// dataset's renderer, so the encoder never sees a test identity; otherwise
/// it samples the training split.
pub fn train_phase0<T: Real>(data: &SyntheticDataset, cfg: &Config, log: Logger<'_>) -> Result<PipelineModel<T>> {
    check_data(data, cfg)?;
    let mut model: PipelineModel<T> = PipelineModel::new(&cfg.model, &cfg.flow, cfg.data)?;
    model.use_icl = !cfg.ablation.no_icl;
    let d_z = cfg.model.d_z;
    let split_targets = identity_targets(&data.identity_latents, d_z, cfg.model.seed);
    let renderer = data.renderer()?;
    let mut sampler = Sampler::new(data, Rng::new(cfg.training.seed).derive("phase0"));
    let mut fresh = Rng::new(cfg.training.seed).derive("phase0-identities");
    let mut adam = AdamState::new(cfg.training.adam);
    let tr = Trainable { e_id: true, ..Trainable::NONE };
    let (iters, n) = (cfg.training.phase0_iters, cfg.training.phase0_batch);
    let start = Instant::now();
    for step in 0..iters {
        let (x, t) = if cfg.training.phase0_fresh_identities {
            let u: Array2<f32> = fresh.normal_matrix(n, data.dims.d_id, 1.0);
            let v: Array2<f32> = fresh.normal_matrix(n, data.dims.d_attr, 1.0);
            let x = renderer.render_rows(u.view(), v.view())?.mapv(|p| T::of(p as f64));
            (x, identity_targets(&u, d_z, cfg.model.seed).mapv(T::of))
        } else {
            let idx = sampler.any(n);
            let t = Array2::from_shape_fn((n, d_z), |(r, c)| T::of(split_targets[[data.identity_of(idx[r]), c]]));
            (data.batch::<T>(&idx), t)
        };
        let terms = optimize_step(&mut model, tr, &mut adam, &mut |m, g, b| {
            let xv = g.constant(x.clone());
            let tv = g.constant(t.clone());
            let z = m.e_id_var(g, b, xv)?;
            let l = theta_minus(g, z, tv)?;
            Ok((g.mean(l), vec![]))
        })?;
        if should_log(step, iters, cfg.training.log_every) {
            log(&LogRecord { phase: "0", step, terms, wall_s: start.elapsed().as_secs_f64() });
        }
    }
    model.e_id.frozen = true;
    Ok(model)
}

/// Mean cosine between identity embeddings of the test split and their targets.
pub fn heldout_identity_cosine<T: Real>(model: &PipelineModel<T>, data: &SyntheticDataset) -> Result<f64> {
    let targets = identity_targets(&data.identity_latents, model.config().d_z, model.config().seed);
    let idx = data.samples(Split::Test);
    let z = model.e_id(&data.batch::<T>(&idx))?;
    let mut total = 0.0;
    for (r, &s) in idx.iter().enumerate() {
        let t = targets.row(data.identity_of(s));
        total += z.row(r).iter().zip(t).map(|(a, b)| a.as_f64() * b).sum::<f64>();
    }
    Ok(total / idx.len() as f64)
}

fn check_data(data: &SyntheticDataset, cfg: &Config) -> Result<()> {
    if data.dims != cfg.data {
        return Err(Error::Config(format!("dataset dims {:?} differ from config {:?}", data.dims, cfg.data)));
    }
    Ok(())
}

fn require(what: &str, ok: bool) -> Result<()> {
    if !ok {
        return Err(Error::Config(format!("input checkpoint is not ready for {what}")));
    }
    Ok(())
}

/// Fits the attribute encoder and mapping network for reconstruction.
pub fn train_phase1<T: Real>(
    data: &SyntheticDataset,
    cfg: &Config,
    mut model: PipelineModel<T>,
    log: Logger<'_>,
) -> Result<PipelineModel<T>> {
    check_data(data, cfg)?;
    require("phase 1 (identity encoder must be frozen)", model.e_id.frozen)?;
    let mut sampler = Sampler::new(data, Rng::new(cfg.training.seed).derive("phase1"));
    let mut adam = AdamState::new(cfg.training.adam);
    let tr = Trainable { e_attr: true, mapping: true, ..Trainable::NONE };
    let iters = cfg.training.phase1_iters;
    let wts = cfg.training.weights;
    let start = Instant::now();
    for step in 0..iters {
        let x = data.batch::<T>(&sampler.any(cfg.training.batch));
        let terms = optimize_step(&mut model, tr, &mut adam, &mut |m, g, b| {
            let xv = g.constant(x.clone());
            let (xr, _, _) = m.reconstruct_var(g, b, xv)?;
            let (total, vq, sem) = loss_p1(m, g, b, xr, xv, &wts)?;
            Ok((total, vec![("l_vq", vq), ("l_sem", sem)]))
        })?;
        if should_log(step, iters, cfg.training.log_every) {
            log(&LogRecord { phase: "1", step, terms, wall_s: start.elapsed().as_secs_f64() });
        }
    }
    model.e_attr.frozen = true;
    model.mapping.frozen = true;
    Ok(model)
}

fn draw_keys<T: Real>(model: &PipelineModel<T>, rng: &mut Rng, k: usize) -> Result<Array2<T>> {
    let secrets: Vec<Secret> = (0..k).map(|_| Secret::random(rng, TRAIN_SECRET_BYTES)).collect();
    let refs: Vec<&Secret> = secrets.iter().collect();
    model.keygen.keygen_rows(&refs)
}

/// Fits the flow and compensation layer; all other networks stay fixed.
pub fn train_phase2<T: Real>(
    data: &SyntheticDataset,
    cfg: &Config,
    mut model: PipelineModel<T>,
    log: Logger<'_>,
) -> Result<PipelineModel<T>> {
    check_data(data, cfg)?;
    require(
        "phase 2 (encoders and mapping must be frozen)",
        model.e_id.frozen && model.e_attr.frozen && model.mapping.frozen,
    )?;
    model.use_icl = !cfg.ablation.no_icl;
    let mut sampler = Sampler::new(data, Rng::new(cfg.training.seed).derive("phase2"));
    let mut key_rng = Rng::new(cfg.training.seed).derive("phase2-secrets");
    let mut adam = AdamState::new(cfg.training.adam);
    let tr = Trainable { icl: true, sif: true, ..Trainable::NONE };
    let (iters, n, k) = (cfg.training.phase2_iters, cfg.training.batch, cfg.training.keys_per_batch);
    let start = Instant::now();
    for step in 0..iters {
        let x = data.batch::<T>(&sampler.distinct_identities(n));
        let keys = draw_keys(&model, &mut key_rng, k)?;
        let terms = optimize_step(&mut model, tr, &mut adam, &mut |m, g, b| {
            let sb = secure_forward(m, g, b, &x, &keys)?;
            let (total, t) = loss_p2(m, g, b, &sb, x.nrows(), k, cfg)?;
            Ok((total, vec![("l_anon", t.anon), ("l_div", t.div), ("l_deanon", t.deanon), ("l_img", t.img)]))
        })?;
        if should_log(step, iters, cfg.training.log_every) {
            log(&LogRecord { phase: "2", step, terms, wall_s: start.elapsed().as_secs_f64() });
        }
    }
    model.icl.frozen = true;
    model.sif.set_frozen(true);
    Ok(model)
}

/// Single-stage alternative: reconstruction and secure objectives are
/// optimized together from the pretrained identity encoder.
pub fn train_joint<T: Real>(
    data: &SyntheticDataset,
    cfg: &Config,
    mut model: PipelineModel<T>,
    log: Logger<'_>,
) -> Result<PipelineModel<T>> {
    check_data(data, cfg)?;
    require("joint training (identity encoder must be frozen)", model.e_id.frozen)?;
    model.use_icl = !cfg.ablation.no_icl;
    let mut sampler = Sampler::new(data, Rng::new(cfg.training.seed).derive("joint"));
    let mut key_rng = Rng::new(cfg.training.seed).derive("joint-secrets");
    let mut adam = AdamState::new(cfg.training.adam);
    let tr = Trainable { e_attr: true, mapping: true, icl: true, sif: true, ..Trainable::NONE };
    let iters = cfg.training.phase1_iters + cfg.training.phase2_iters;
    let (n, k) = (cfg.training.batch, cfg.training.keys_per_batch);
    let wts = cfg.training.weights;
    let start = Instant::now();
    for step in 0..iters {
        let x = data.batch::<T>(&sampler.distinct_identities(n));
        let keys = draw_keys(&model, &mut key_rng, k)?;
        let terms = optimize_step(&mut model, tr, &mut adam, &mut |m, g, b| {
            let xv = g.constant(x.clone());
            let (xr, _, _) = m.reconstruct_var(g, b, xv)?;
            let (p1, _, _) = loss_p1(m, g, b, xr, xv, &wts)?;
            let sb = secure_forward(m, g, b, &x, &keys)?;
            let (p2, t) = loss_p2(m, g, b, &sb, x.nrows(), k, cfg)?;
            let total = g.add(p1, p2)?;
            Ok((
                total,
                vec![("l_p1", p1), ("l_anon", t.anon), ("l_div", t.div), ("l_deanon", t.deanon), ("l_img", t.img)],
            ))
        })?;
        if should_log(step, iters, cfg.training.log_every) {
            log(&LogRecord { phase: "joint", step, terms, wall_s: start.elapsed().as_secs_f64() });
        }
    }
    for net in [&mut model.e_attr, &mut model.mapping, &mut model.icl] {
        net.frozen = true;
    }
    model.sif.set_frozen(true);
    Ok(model)
}

/// Runs one CLI-level phase: 0, 1 or 2 (the latter replaced by joint
/// training from a phase-0 checkpoint when `no_dpt` is set).
pub fn run_phase(
    phase: u8,
    data: &SyntheticDataset,
    cfg: &Config,
    init: Option<Checkpoint>,
    log: Logger<'_>,
) -> Result<Checkpoint> {
    if let Some(ck) = &init {
        let c = &ck.config;
        if c.model != cfg.model || c.flow != cfg.flow || c.data != cfg.data {
            return Err(Error::Config("--init checkpoint was built with different model, flow or data settings".into()));
        }
    }
    let model = match (phase, init) {
        (0, _) => train_phase0::<f32>(data, cfg, log)?,
        (1, Some(ck)) if !cfg.ablation.no_dpt => {
            expect_phase(&ck, 0)?;
            train_phase1(data, cfg, ck.model, log)?
        }
        (2, Some(ck)) if cfg.ablation.no_dpt => {
            expect_phase(&ck, 0)?;
            train_joint(data, cfg, ck.model, log)?
        }
        (2, Some(ck)) => {
            expect_phase(&ck, 1)?;
            train_phase2(data, cfg, ck.model, log)?
        }
        (1, Some(_)) => return Err(Error::Config("no_dpt skips phase 1; run phase 2 from a phase-0 checkpoint".into())),
        (1 | 2, None) => return Err(Error::Config(format!("phase {phase} needs --init"))),
        (p, _) => return Err(Error::Config(format!("unknown phase {p}"))),
    };
    Ok(Checkpoint { config: cfg.clone(), model, phase })
}

fn expect_phase(ck: &Checkpoint, want: u8) -> Result<()> {
    if ck.phase != want {
        return Err(Error::Config(format!("--init checkpoint is from phase {}, expected {want}", ck.phase)));
    }
    Ok(())
}

/// Finite-difference step of [`gradcheck_pipeline`].
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Largest relative error [`gradcheck_pipeline`] accepts.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub network: String,
    pub max_rel_error: f64,
    pub coords_requested: usize,
    pub coords_checked: usize,
    pub coords_skipped: usize,
}

impl GradcheckRow {
    /// Every requested coordinate was checked and all are within tolerance.
    pub fn passed(&self) -> bool {
        self.coords_checked == self.coords_requested && self.max_rel_error < GRADCHECK_TOL
    }
}

fn gradcheck_objective(
    m: &PipelineModel<f64>,
    g: &mut Graph<f64>,
    b: &PipelineBinding,
    encoder_only: bool,
    x: &Array2<f64>,
    targets: &Array2<f64>,
    keys: &Array2<f64>,
    cfg: &Config,
) -> Result<Var> {
    let xv = g.constant(x.clone());
    if encoder_only {
        let t = g.constant(targets.clone());
        let z = m.e_id_var(g, b, xv)?;
        let l = theta_minus(g, z, t)?;
        return Ok(g.mean(l));
    }
    let (xr, _, _) = m.reconstruct_var(g, b, xv)?;
    let (p1, _, _) = loss_p1(m, g, b, xr, xv, &cfg.training.weights)?;
    let sb = secure_forward(m, g, b, x, keys)?;
    let (p2, _) = loss_p2(m, g, b, &sb, x.nrows(), keys.nrows(), cfg)?;
    g.add(p1, p2)
}

/// Central-difference check, in float64, of every trainable network
/// against the objective it is trained with: the identity encoder against
/// its pretraining loss, everything else against the sum of the
/// reconstruction and secure objectives. At least `points` coordinates are
/// checked per network.
pub fn gradcheck_pipeline(cfg: &Config, points: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut cfg = cfg.clone();
    cfg.ablation = Default::default();
    let mut model: PipelineModel<f64> = PipelineModel::new(&cfg.model, &cfg.flow, cfg.data)?;
    model.use_icl = true;
    let mut rng = Rng::new(seed).derive("gradcheck");
    // Random compensation weights so its gradient is checked away from the zero init.
    for p in model.icl.params_mut() {
        let (r, c) = p.dim();
        *p = rng.normal_matrix(r, c, 0.05);
    }
    let n = 2;
    let u: Array2<f32> = rng.normal_matrix(n, cfg.data.d_id, 1.0);
    let v: Array2<f32> = rng.normal_matrix(n, cfg.data.d_attr, 1.0);
    let x = Renderer::new(cfg.data, seed)?.render_rows(u.view(), v.view())?.mapv(f64::from);
    let targets = identity_targets(&u, cfg.model.d_z, cfg.model.seed);
    let keys = draw_keys(&model, &mut rng, 2)?;

    let all = Trainable { e_id: true, e_attr: true, mapping: true, icl: true, sif: true };
    // (index into `networks()`, analytic gradients, objective)
    let mut nets: Vec<(usize, Vec<Array2<f64>>, bool)> = Vec::new();
    for encoder_only in [true, false] {
        let mut g = Graph::new();
        let b = model.bind(&mut g, all);
        let loss = gradcheck_objective(&model, &mut g, &b, encoder_only, &x, &targets, &keys, &cfg)?;
        let mut grads = g.backward(loss)?;
        let bound: Vec<(usize, Vec<Var>)> = if encoder_only {
            vec![(0, b.e_id.vars())]
        } else {
            let mut v = vec![(1, b.e_attr.vars()), (2, b.mapping.vars()), (4, b.icl.vars())];
            v.extend(b.sif.network_vars().into_iter().enumerate().map(|(j, vs)| (5 + j, vs)));
            v
        };
        for (idx, vars) in bound {
            let gs = vars
                .iter()
                .map(|&v| grads.take(v).unwrap_or_else(|| Array2::zeros(g.value(v).dim())))
                .collect();
            nets.push((idx, gs, encoder_only));
        }
    }

    let names: Vec<String> = model.networks().into_iter().map(|(n, _)| n).collect();
    let mut rows = Vec::new();
    for (idx, grads, encoder_only) in nets {
        let params: Vec<Array2<f64>> = model.networks()[idx].1.params().into_iter().cloned().collect();
        let per_tensor = points.div_ceil(params.len()).max(1);
        let outcome = check_coords(&params, &grads, GRADCHECK_EPS, per_tensor, &mut rng, |p| {
            let mut m = model.clone();
            for (dst, src) in m.networks_mut()[idx].params_mut().into_iter().zip(p) {
                dst.assign(src);
            }
            let mut g = Graph::new();
            let b = m.bind(&mut g, Trainable::NONE);
            let l = gradcheck_objective(&m, &mut g, &b, encoder_only, &x, &targets, &keys, &cfg)?;
            Ok((g.scalar(l), g.kink_pattern()))
        })?;
        rows.push(GradcheckRow {
            network: names[idx].clone(),
            max_rel_error: outcome.max_rel_error,
            coords_requested: params.iter().map(|p| per_tensor.min(p.len())).sum(),
            coords_checked: outcome.coords_checked,
            coords_skipped: outcome.coords_skipped,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::numerics::Rng;
    use crate::synthdata::{gen_dataset, DataDims};

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn theta_values() {
        let mut g = g64();
        let a = g.constant(ndarray::array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let b = g.constant(ndarray::array![[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [-0.3, (1.0f64 - 0.09).sqrt()]]);
        let tp = theta_plus(&mut g, a, b).unwrap();
        let tm = theta_minus(&mut g, a, b).unwrap();
        let tp = g.value(tp).column(0).to_vec();
        let tm = g.value(tm).column(0).to_vec();
        assert!((tp[0] - 1.0).abs() < 1e-12 && tm[0].abs() < 1e-12);
        assert_eq!(tp[1], 0.0);
        assert_eq!(tp[2], 0.0);
        assert!((tm[2] - 2.0).abs() < 1e-12);
        assert_eq!(tp[3], 0.0);
    }

    #[test]
    fn pair_counts() {
        let (a, b) = diversity_pairs(4, 3);
        assert_eq!(a.len(), 3 * 6);
        assert_eq!(b.len(), 4 * 3);
        assert!(a.iter().all(|&(x, y)| x % 3 == y % 3 && x != y));
        assert!(b.iter().all(|&(x, y)| x / 3 == y / 3 && x != y));
    }

    #[test]
    fn div_loss_extremes() {
        let mut g = g64();
        let same = g.constant(Array2::from_elem((4, 3), 1.0));
        let v = loss_div(&mut g, same, 2, 2).unwrap();
        assert!((g.scalar(v) - 2.0).abs() < 1e-12);
        let eye = g.constant(Array2::eye(4));
        let v = loss_div(&mut g, eye, 2, 2).unwrap();
        assert_eq!(g.scalar(v), 0.0);
        assert!(loss_div(&mut g, eye, 1, 4).is_err());
    }

    #[test]
    fn deanon_extremes() {
        let mut g = g64();
        let x = g.constant(ndarray::array![[1.0, 0.0]]);
        let orth = g.constant(ndarray::array![[0.0, 1.0]]);
        let v = loss_deanon(&mut g, x, orth, x).unwrap();
        assert!(g.scalar(v).abs() < 1e-12);
        let v = loss_deanon(&mut g, orth, x, x).unwrap();
        assert!((g.scalar(v) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let w = LossWeights::default();
        assert_eq!(w.schedule(ImageKind::Recovered), [10.0, 1.0, 0.1, 0.01]);
        assert_eq!(w.schedule(ImageKind::Anonymized), [0.01, 0.1, 0.1, 0.01]);
        assert_eq!(w.schedule(ImageKind::FalseRecovered), [0.01, 0.1, 0.1, 0.01]);
    }

    fn tiny() -> (Config, SyntheticDataset) {
        let mut c = Config::default();
        c.data = DataDims { d_id: 4, d_attr: 4, height: 8, width: 8 };
        c.model = ModelConfig {
            d_z: 8,
            d_k: 4,
            m: 2,
            d_w: 4,
            e_id_hidden: [16, 16],
            e_attr_hidden: 16,
            mapping_hidden: 8,
            generator_hidden: 16,
            seed: 5,
            ..ModelConfig::default()
        };
        c.flow.n_blocks = 2;
        c.training.phase0_iters = 5;
        c.training.phase1_iters = 5;
        c.training.phase2_iters = 5;
        c.dataset = crate::config::DatasetConfig { n_ids: 20, per_id: 3, seed: 1 };
        let d = gen_dataset(20, 3, c.data, 1).unwrap();
        (c, d)
    }

    #[test]
    fn phases_respect_freeze_contracts() {
        let (c, d) = tiny();
        let mut quiet = |_: &LogRecord| {};
        let m0 = train_phase0::<f32>(&d, &c, &mut quiet).unwrap();
        assert!(m0.e_id.frozen);
        let m1 = train_phase1(&d, &c, m0.clone(), &mut quiet).unwrap();
        assert_eq!(m1.e_id, m0.e_id);
        assert_eq!(m1.generator, m0.generator);
        assert_eq!(m1.sif, m0.sif);
        assert_ne!(m1.e_attr, m0.e_attr);
        let m2 = train_phase2(&d, &c, m1.clone(), &mut quiet).unwrap();
        for (a, b) in [(&m2.e_id, &m1.e_id), (&m2.e_attr, &m1.e_attr), (&m2.mapping, &m1.mapping)] {
            assert_eq!(a.layers(), b.layers());
        }
        assert_eq!(m2.generator, m1.generator);
        assert_ne!(m2.sif.blocks, m1.sif.blocks);
        assert_ne!(m2.icl.layers(), m1.icl.layers());
        assert!(train_phase2(&d, &c, m0, &mut quiet).is_err());
    }

    #[test]
    fn log_records_each_step() {
        let (c, d) = tiny();
        let mut lines = Vec::new();
        train_phase0::<f32>(&d, &c, &mut |r: &LogRecord| lines.push(r.to_string())).unwrap();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("phase=0 step=0 loss="));
        assert!(lines[0].contains("wall_s="));
    }

    #[test]
    fn phase_dispatch_requires_init() {
        let (c, d) = tiny();
        let mut quiet = |_: &LogRecord| {};
        assert!(matches!(run_phase(1, &d, &c, None, &mut quiet), Err(Error::Config(_))));
        let ck = run_phase(0, &d, &c, None, &mut quiet).unwrap();
        assert!(matches!(run_phase(2, &d, &c, Some(ck.clone()), &mut quiet), Err(Error::Config(_))));
        let mut nd = c.clone();
        nd.ablation.no_dpt = true;
        let joint = run_phase(2, &d, &nd, Some(ck), &mut quiet).unwrap();
        assert_eq!(joint.phase, 2);
        let ck = run_phase(0, &d, &c, None, &mut quiet).unwrap();
        let mut other = c.clone();
        other.model.mapping_hidden += 1;
        assert!(matches!(run_phase(1, &d, &other, Some(ck), &mut quiet), Err(Error::Config(_))));
    }

    #[test]
    fn identity_targets_are_unit_rows() {
        let u: Array2<f32> = Rng::new(1).normal_matrix(5, 4, 1.0);
        let t = identity_targets(&u, 8, 3);
        for r in t.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
    }
}
