//! Composite training objectives for the ambient and latent models.
//!
//! Both losses are sums over the batch, as printed. The consistency terms
//! differentiate through the normalized distance gradient, so their parameter
//! gradients involve second derivatives of the distance network; the tape
//! records the first backward pass and differentiates it again.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::autodiff::{NetVars, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::networks::{ManifoldModel, Space, GRADIENT_FLOOR};
use crate::nn::{finite_diff_check, GradCheckReport, Probe};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 6],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: [1.0; 6] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, l) in self.lambda.iter().enumerate() {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(Error::InvalidConfig(format!("lambda{} must be finite and >= 0, got {l}", k + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Treat `grad D / |grad D|` in the shift as a constant during backprop.
    pub detach_shift_direction: bool,
    /// Square the two latent consistency norms instead of using them as printed.
    pub square_consistency_terms: bool,
    /// Also reconstruct each corrupted sample's nearest clean point through
    /// `G(F(.))`, under the λ₂ weight. Without it the printed ambient loss is
    /// minimized by an identity autoencoder with `D = 0`.
    pub denoising_autoencoder: bool,
    /// Ambient only: hold `G(F(x))` constant in the shift-consistency term,
    /// so that term trains the distance network alone. Left live, it pulls
    /// the autoencoder toward the identity while `D` is still near zero.
    pub detach_projection_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            detach_shift_direction: false,
            square_consistency_terms: false,
            denoising_autoencoder: true,
            detach_projection_target: true,
        }
    }
}

/// Draws `x + N(0, sigma_d^2 I)`. Values are not clipped.
pub fn corrupt(x: &[f64], sigma_d: f64, rng: &mut SplitRng) -> Vec<f64> {
    x.iter().map(|v| v + sigma_d * rng.normal()).collect()
}

/// Euclidean nearest row of `data`, ties to the lowest index.
pub fn nearest_clean(x: &[f64], data: &Matrix) -> Result<(usize, f64)> {
    if data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if x.len() != data.cols() {
        return Err(Error::Dimension {
            context: "nearest_clean",
            expected: data.cols(),
            got: x.len(),
        });
    }
    let mut best = (0, f64::INFINITY);
    for (i, row) in data.iter_rows().enumerate() {
        let d = linalg::squared_distance(x, row);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok((best.0, libm::sqrt(best.1)))
}

/// Batched exact nearest-neighbor search over a fixed set of rows.
///
/// Candidates are screened with `|y|^2 - 2 x.y` from one matrix product and
/// then re-ranked with exact squared distances, so the answer is the same as
/// a plain scan.
pub struct NearestIndex<'a> {
    data: &'a Matrix,
    sq_norms: Vec<f64>,
    max_sq: f64,
}

impl<'a> NearestIndex<'a> {
    pub fn new(data: &'a Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let sq_norms: Vec<f64> = data.iter_rows().map(|r| linalg::dot(r, r)).collect();
        let max_sq = sq_norms.iter().copied().fold(0.0, f64::max);
        Ok(Self { data, sq_norms, max_sq })
    }

    pub fn data(&self) -> &Matrix {
        self.data
    }

    pub fn query(&self, queries: &Matrix) -> Result<Vec<usize>> {
        if queries.cols() != self.data.cols() {
            return Err(Error::Dimension {
                context: "NearestIndex::query",
                expected: self.data.cols(),
                got: queries.cols(),
            });
        }
        let cross = Matrix::matmul(queries, false, self.data, true);
        let mut out = Vec::with_capacity(queries.rows());
        for (q, row) in queries.iter_rows().zip(cross.iter_rows()) {
            let approx = |j: usize| self.sq_norms[j] - 2.0 * row[j];
            let min = (0..row.len()).map(approx).fold(f64::INFINITY, f64::min);
            let slack = 1e-9 * (self.max_sq + linalg::dot(q, q)) + 1e-12;
            let mut best = (0, f64::INFINITY);
            for j in 0..row.len() {
                if approx(j) <= min + slack {
                    let d = linalg::squared_distance(q, self.data.row(j));
                    if d < best.1 {
                        best = (j, d);
                    }
                }
            }
            out.push(best.0);
        }
        Ok(out)
    }
}

/// One training batch: clean rows, noisy copies of a permutation of them,
/// and each noisy row's nearest clean point over the whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub clean: Matrix,
    pub corrupted: Matrix,
    pub pairing: Vec<usize>,
    pub targets: Matrix,
}

impl TrainBatch {
    pub fn sample(index: &NearestIndex<'_>, rows: &[usize], sigma_d: f64, rng: &mut SplitRng) -> Result<Self> {
        Self::sample_with(index, rows, sigma_d, false, rng)
    }

    /// [`TrainBatch::sample`], optionally clipping the corrupted rows to
    /// `[0, 1]` before pairing them with clean points.
    pub fn sample_with(index: &NearestIndex<'_>, rows: &[usize], sigma_d: f64, clip_unit: bool, rng: &mut SplitRng) -> Result<Self> {
        if !(sigma_d > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma_d must be positive, got {sigma_d}")));
        }
        let data = index.data();
        let clean = data.select_rows(rows);
        let mut perm: Vec<usize> = rows.to_vec();
        rng.shuffle(&mut perm);
        let mut corrupted = data.select_rows(&perm);
        for v in corrupted.as_mut_slice() {
            *v += sigma_d * rng.normal();
            if clip_unit {
                *v = v.clamp(0.0, 1.0);
            }
        }
        let pairing = index.query(&corrupted)?;
        let targets = data.select_rows(&pairing);
        Ok(Self {
            clean,
            corrupted,
            pairing,
            targets,
        })
    }
}

/// Latent codes `F(x)` of the clean set, recomputed once per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAnchorSet {
    pub codes: Matrix,
    pub epoch_stamp: usize,
}

impl LatentAnchorSet {
    pub fn compute(model: &ManifoldModel, clean: &Matrix, epoch_stamp: usize) -> Result<Self> {
        Ok(Self {
            codes: model.encode_batch(clean)?,
            epoch_stamp,
        })
    }
}

/// Raw (unweighted) term values and the weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub terms: [f64; 6],
    pub total: f64,
    /// Samples whose shift term was skipped for a vanishing distance gradient.
    pub degenerate: usize,
    /// Distance outputs below zero in this batch.
    pub negative_distances: usize,
    /// Kink pattern of every piecewise-linear op evaluated.
    pub signature: u64,
}

/// Values the gradients treat as constants: regression targets and, with
/// `detach_shift_direction`, the shift directions, in evaluation order.
/// Feeding them back pins them, which turns the loss into the surrogate whose
/// exact derivative the returned gradients are.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Detached {
    pub values: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub terms: LossTerms,
    pub grads: LossGradients,
    pub detached: Detached,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub distance: Vec<f64>,
}

struct Graph<'m> {
    tape: Tape,
    pinned: Option<&'m Detached>,
    detached: Detached,
    model: &'m ManifoldModel,
    enc: NetVars,
    dec: NetVars,
    dist: NetVars,
    dropout: Option<SplitRng>,
    degenerate: usize,
    negative: usize,
}

impl<'m> Graph<'m> {
    fn new(model: &'m ManifoldModel, dropout: Option<SplitRng>, pinned: Option<&'m Detached>) -> Self {
        let mut tape = Tape::new();
        let enc = NetVars::register(&mut tape, &model.encoder);
        let dec = NetVars::register(&mut tape, &model.decoder);
        let dist = NetVars::register(&mut tape, &model.distance_net);
        Self {
            tape,
            pinned,
            detached: Detached::default(),
            model,
            enc,
            dec,
            dist,
            dropout,
            degenerate: 0,
            negative: 0,
        }
    }

    /// A constant leaf holding `value`, or the pinned replacement.
    fn constant(&mut self, value: Matrix) -> Var {
        let k = self.detached.values.len();
        let v = match self.pinned {
            Some(p) => p.values[k].clone(),
            None => value,
        };
        self.detached.values.push(v.clone());
        self.tape.leaf(v)
    }

    fn encode(&mut self, x: Var) -> Var {
        self.enc.forward(&mut self.tape, &self.model.encoder, x, None)
    }

    fn decode(&mut self, z: Var) -> Var {
        self.dec.forward(&mut self.tape, &self.model.decoder, z, None)
    }

    fn distance(&mut self, p: Var) -> Var {
        let input = if self.model.distance_reads_code() { self.encode(p) } else { p };
        let d = self.dist.forward(&mut self.tape, &self.model.distance_net, input, self.dropout.as_mut());
        self.negative += self.tape.value(d).as_slice().iter().filter(|v| **v < 0.0).count();
        d
    }

    /// `p - D(p) grad D(p) / |grad D(p)|` with the mask of rows whose
    /// gradient norm clears the floor.
    fn shift(&mut self, p: Var, d: Var, detach: bool) -> (Var, Rc<Matrix>) {
        let s = self.tape.sum(d);
        let g = self.tape.grad(s, &[p])[0];
        let norms = self.tape.row_norms(g);
        let keep = self.tape.value(norms).map(|n| if n >= GRADIENT_FLOOR { 1.0 } else { 0.0 });
        self.degenerate += keep.as_slice().iter().filter(|k| **k == 0.0).count();
        let inv = self.tape.safe_recip(norms);
        let mut dir = self.tape.scale_rows(g, inv);
        if detach {
            let v = self.tape.value(dir).clone();
            dir = self.constant(v);
        }
        let step = self.tape.scale_rows(dir, d);
        (self.tape.sub(p, step), Rc::new(keep))
    }

    fn sq_residual_sum(&mut self, a: Var, b: Var) -> Var {
        let r = self.tape.sub(a, b);
        let sq = self.tape.square(r);
        self.tape.sum(sq)
    }

    /// Sum over rows of `|a - b|` (or its square), restricted by `keep`.
    fn masked_row_norm_sum(&mut self, a: Var, b: Var, keep: Rc<Matrix>, squared: bool) -> Var {
        let r = self.tape.sub(a, b);
        let n = if squared { self.tape.row_sq_norms(r) } else { self.tape.row_norms(r) };
        let m = self.tape.mask(n, keep);
        self.tape.sum(m)
    }

    fn positivity(&mut self, d: Var) -> Var {
        let a = self.tape.abs(d);
        let r = self.tape.sub(d, a);
        let sq = self.tape.square(r);
        self.tape.sum(sq)
    }

    fn regression(&mut self, d: Var, target: Matrix) -> Var {
        let t = self.constant(target);
        self.sq_residual_sum(d, t)
    }

    fn finish(mut self, terms: [Var; 6], weights: &LossWeights) -> LossEval {
        let mut total = None;
        let mut values = [0.0; 6];
        for (k, (&t, &l)) in terms.iter().zip(&weights.lambda).enumerate() {
            values[k] = self.tape.scalar(t);
            if l != 0.0 {
                let w = self.tape.scale(t, l);
                total = Some(match total {
                    None => w,
                    Some(acc) => self.tape.add(acc, w),
                });
            }
        }
        let total = match total {
            Some(t) => t,
            None => self.tape.leaf(Matrix::scalar(0.0)),
        };
        let enc_vars = self.enc.vars();
        let dec_vars = self.dec.vars();
        let dist_vars = self.dist.vars();
        let mut wrt = enc_vars.clone();
        wrt.extend_from_slice(&dec_vars);
        wrt.extend_from_slice(&dist_vars);
        let grads = self.tape.grad(total, &wrt);
        let (ge, rest) = grads.split_at(enc_vars.len());
        let (gd, gdist) = rest.split_at(dec_vars.len());
        let out = LossTerms {
            terms: values,
            total: self.tape.scalar(total),
            degenerate: self.degenerate,
            negative_distances: self.negative,
            signature: self.tape.signature(),
        };
        let grads = LossGradients {
            encoder: NetVars::flatten(&self.tape, ge),
            decoder: NetVars::flatten(&self.tape, gd),
            distance: NetVars::flatten(&self.tape, gdist),
        };
        LossEval {
            terms: out,
            grads,
            detached: self.detached,
        }
    }
}

fn check_batch(model: &ManifoldModel, batch: &TrainBatch) -> Result<()> {
    let d = model.ambient_dim();
    for (context, m) in [
        ("batch.clean", &batch.clean),
        ("batch.corrupted", &batch.corrupted),
        ("batch.targets", &batch.targets),
    ] {
        if m.cols() != d {
            return Err(Error::Dimension {
                context,
                expected: d,
                got: m.cols(),
            });
        }
    }
    if batch.corrupted.rows() != batch.targets.rows() || batch.corrupted.rows() != batch.pairing.len() {
        return Err(Error::Dimension {
            context: "batch.pairing",
            expected: batch.corrupted.rows(),
            got: batch.pairing.len(),
        });
    }
    Ok(())
}

fn row_distances(a: &Matrix, b: &Matrix) -> Matrix {
    let v = a.iter_rows().zip(b.iter_rows()).map(|(x, y)| linalg::distance(x, y)).collect();
    Matrix::from_vec(a.rows(), 1, v).expect("row count")
}

/// The ambient objective, with terms in order: distance regression on
/// corrupted points against `|x - G(F(x))|`, autoencoder reconstruction,
/// zero distance on clean points, positivity, and shift consistency
/// `|x_shift - G(F(x))|^2` over clean and corrupted points. The sixth slot
/// is always zero.
///
/// The regression target `|x - G(F(x))|` is held constant. `dropout`, when
/// given, draws the distance network's training masks.
pub fn ambient_loss(model: &ManifoldModel, batch: &TrainBatch, cfg: &LossConfig, dropout: Option<SplitRng>) -> Result<LossEval> {
    ambient_loss_pinned(model, batch, cfg, dropout, None)
}

/// [`ambient_loss`] with the constant quantities taken from `pinned`.
pub fn ambient_loss_pinned(
    model: &ManifoldModel,
    batch: &TrainBatch,
    cfg: &LossConfig,
    dropout: Option<SplitRng>,
    pinned: Option<&Detached>,
) -> Result<LossEval> {
    if model.space != Space::Ambient {
        return Err(Error::InvalidConfig("ambient_loss needs an ambient model".into()));
    }
    cfg.weights.validate()?;
    check_batch(model, batch)?;
    let mut g = Graph::new(model, dropout, pinned);
    let xc = g.tape.leaf(batch.clean.clone());
    let xn = g.tape.leaf(batch.corrupted.clone());

    let rc = {
        let z = g.encode(xc);
        g.decode(z)
    };
    let rn = {
        let z = g.encode(xn);
        g.decode(z)
    };
    let dc = g.distance(xc);
    let dn = g.distance(xn);

    let target = row_distances(&batch.corrupted, g.tape.value(rn));
    let t1 = g.regression(dn, target);

    let mut t2 = g.sq_residual_sum(xc, rc);
    if cfg.denoising_autoencoder {
        let xt = g.tape.leaf(batch.targets.clone());
        let extra = g.sq_residual_sum(xt, rn);
        t2 = g.tape.add(t2, extra);
    }

    let t3 = {
        let sq = g.tape.square(dc);
        g.tape.sum(sq)
    };
    let t4 = {
        let a = g.positivity(dc);
        let b = g.positivity(dn);
        g.tape.add(a, b)
    };
    let t5 = {
        let (sc, kc) = g.shift(xc, dc, cfg.detach_shift_direction);
        let (sn, kn) = g.shift(xn, dn, cfg.detach_shift_direction);
        let (pc, pn) = if cfg.detach_projection_target {
            let vc = g.tape.value(rc).clone();
            let vn = g.tape.value(rn).clone();
            (g.constant(vc), g.constant(vn))
        } else {
            (rc, rn)
        };
        let a = g.masked_row_norm_sum(sc, pc, kc, true);
        let b = g.masked_row_norm_sum(sn, pn, kn, true);
        g.tape.add(a, b)
    };
    let t6 = g.tape.leaf(Matrix::scalar(0.0));
    Ok(g.finish([t1, t2, t3, t4, t5, t6], &cfg.weights))
}

/// The latent objective. With `z = F(x)` for corrupted `x`, `z* ` the anchor
/// code of its nearest clean point and `x*` that point, the terms are: distance
/// regression against `|z - z*|`, reconstruction `x_clean - G(F(x_clean))`,
/// zero distance on clean codes, positivity on all codes, `|z_shift - z*|`
/// and `|G(z_shift) - x*|`.
///
/// `z*` comes from `anchors` and is constant, as is the regression target.
pub fn latent_loss(
    model: &ManifoldModel,
    batch: &TrainBatch,
    anchors: &LatentAnchorSet,
    cfg: &LossConfig,
    dropout: Option<SplitRng>,
) -> Result<LossEval> {
    latent_loss_pinned(model, batch, anchors, cfg, dropout, None)
}

/// [`latent_loss`] with the constant quantities taken from `pinned`.
pub fn latent_loss_pinned(
    model: &ManifoldModel,
    batch: &TrainBatch,
    anchors: &LatentAnchorSet,
    cfg: &LossConfig,
    dropout: Option<SplitRng>,
    pinned: Option<&Detached>,
) -> Result<LossEval> {
    if model.space != Space::Latent {
        return Err(Error::InvalidConfig("latent_loss needs a latent model".into()));
    }
    cfg.weights.validate()?;
    check_batch(model, batch)?;
    if anchors.codes.cols() != model.latent_dim() {
        return Err(Error::Dimension {
            context: "anchors",
            expected: model.latent_dim(),
            got: anchors.codes.cols(),
        });
    }
    if let Some(&bad) = batch.pairing.iter().find(|&&i| i >= anchors.codes.rows()) {
        return Err(Error::Dimension {
            context: "batch.pairing index",
            expected: anchors.codes.rows(),
            got: bad,
        });
    }
    let mut g = Graph::new(model, dropout, pinned);
    let xc = g.tape.leaf(batch.clean.clone());
    let xn = g.tape.leaf(batch.corrupted.clone());
    let z_star_m = anchors.codes.select_rows(&batch.pairing);
    let z_star = g.tape.leaf(z_star_m.clone());
    let x_star = g.tape.leaf(batch.targets.clone());

    let zc = g.encode(xc);
    let zn = g.encode(xn);
    let rc = g.decode(zc);
    let dc = g.distance(zc);
    let dn = g.distance(zn);

    let target = row_distances(g.tape.value(zn), &z_star_m);
    let t1 = g.regression(dn, target);
    let mut t2 = g.sq_residual_sum(xc, rc);
    if cfg.denoising_autoencoder {
        let rn = g.decode(zn);
        let extra = g.sq_residual_sum(x_star, rn);
        t2 = g.tape.add(t2, extra);
    }
    let t3 = {
        let sq = g.tape.square(dc);
        g.tape.sum(sq)
    };
    let t4 = {
        let a = g.positivity(dc);
        let b = g.positivity(dn);
        g.tape.add(a, b)
    };
    let (zs, keep) = g.shift(zn, dn, cfg.detach_shift_direction);
    let t5 = g.masked_row_norm_sum(zs, z_star, keep.clone(), cfg.square_consistency_terms);
    let t6 = {
        let xs = g.decode(zs);
        g.masked_row_norm_sum(xs, x_star, keep, cfg.square_consistency_terms)
    };
    Ok(g.finish([t1, t2, t3, t4, t5, t6], &cfg.weights))
}

/// Finite-difference check of the full objective against every parameter of
/// the three networks, in the order of [`ManifoldModel::params_flat`].
/// Detached quantities are pinned at their values for `model`, so the
/// probes differentiate the same surrogate as the tape. `anchors` is needed
/// for latent models only.
pub fn gradient_check(
    model: &ManifoldModel,
    batch: &TrainBatch,
    anchors: Option<&LatentAnchorSet>,
    cfg: &LossConfig,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let eval = |m: &ManifoldModel, pinned: Option<&Detached>| match (model.space, anchors) {
        (Space::Ambient, _) => ambient_loss_pinned(m, batch, cfg, None, pinned),
        (Space::Latent, Some(a)) => latent_loss_pinned(m, batch, a, cfg, None, pinned),
        (Space::Latent, None) => Err(Error::InvalidConfig("latent gradient check needs anchors".into())),
    };
    let base = eval(model, None)?;
    let g = &base.grads;
    let analytic: Vec<f64> = g.encoder.iter().chain(&g.decoder).chain(&g.distance).copied().collect();
    let mut probe_model = model.clone();
    let mut failure = None;
    let report = finite_diff_check(
        &model.params_flat(),
        &analytic,
        |q| {
            let t = probe_model
                .set_params_flat(q)
                .and_then(|_| eval(&probe_model, Some(&base.detached)))
                .map(|e| e.terms);
            match t {
                Ok(t) => Probe {
                    value: t.total,
                    signature: t.signature,
                },
                Err(e) => {
                    failure.get_or_insert(e);
                    Probe {
                        value: f64::NAN,
                        signature: 0,
                    }
                }
            }
        },
        h,
        tol,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
