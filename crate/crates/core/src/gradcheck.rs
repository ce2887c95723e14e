//! Analytic-versus-numeric gradient comparison for every objective, taken
//! end to end through the generator, the discriminator, the softmax head
//! and the centers.
//!
//! Instances are drawn from a seeded stream. An instance that sits within
//! [`KINK_MARGIN`] of a non-differentiable point (a ReLU at zero, a hinge at
//! its margin, a tie between negative centers, a zero-length alignment
//! vector) is redrawn, since central differences straddle the kink there.

use serde::Serialize;

use crate::centers::{nearest_negative_center, CenterSet};
use crate::error::{Error, Result};
use crate::losses::{
    center_alignment, class_mean_alignment, combined_generator_loss, discriminator_loss, source_dcl, target_dcl,
    weighted_softmax_xent, AlignmentPart, DomainPart, GeneratorParts, GeneratorWeights, LossTerms, Margins,
};
use crate::ndcore::{finite_diff_grad, squared_euclidean, Matrix, Rng};
use crate::network::{accumulate, init_mlp, ForwardCache, Mlp, OutputActivation, ParamTensors};

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_INSTANCES: usize = 10;
/// Magnitude below which entries are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-2;
const MAX_DRAWS: usize = 1000;

const IN_DIM: usize = 4;
const HIDDEN: usize = 6;
const EMBED: usize = 3;
const CLASSES: usize = 3;
const BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub loss: &'static str,
    /// Parameter groups the loss was differentiated against.
    pub wrt: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

/// Largest entrywise `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn numeric_grad<P: ParamTensors + Clone>(p: &P, mut f: impl FnMut(&P) -> f64) -> Result<Vec<f64>> {
    let flat = p.to_flat();
    let m = Matrix::from_vec(1, flat.len(), flat)?;
    let mut q = p.clone();
    let g = finite_diff_grad(
        |v| {
            q.set_flat(v.as_slice()).expect("flat length is fixed");
            f(&q)
        },
        &m,
        GRADCHECK_EPS,
    )?;
    Ok(g.into_vec())
}

/// Everything one instance needs: two small networks, a head, centers and
/// a batch per domain.
#[derive(Debug, Clone)]
struct Instance {
    generator: Mlp,
    discriminator: Mlp,
    head: Mlp,
    centers: CenterSet,
    xs: Matrix,
    ys: Vec<usize>,
    xt: Matrix,
    yt: Vec<usize>,
    wt: Vec<f64>,
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize, sd: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal(0.0, sd)).collect()).expect("shape is consistent")
}

impl Instance {
    fn draw(rng: &mut Rng) -> Result<Self> {
        let generator = init_mlp(&[IN_DIM, HIDDEN, HIDDEN, EMBED], OutputActivation::Identity, rng)?;
        let discriminator = init_mlp(&[EMBED, HIDDEN, HIDDEN, 1], OutputActivation::Sigmoid, rng)?;
        let head = init_mlp(&[EMBED, CLASSES], OutputActivation::Identity, rng)?;
        let cs = random_matrix(rng, CLASSES, EMBED, 1.0);
        let ct = random_matrix(rng, CLASSES, EMBED, 1.0);
        let mut centers = CenterSet::per_domain(cs)?;
        centers.target_mut().clone_from(&ct);
        // Every class appears in both batches so class means are defined.
        let labels: Vec<usize> = (0..BATCH).map(|i| i % CLASSES).collect();
        Ok(Self {
            generator,
            discriminator,
            head,
            centers,
            xs: random_matrix(rng, BATCH, IN_DIM, 2.0),
            ys: labels.clone(),
            xt: random_matrix(rng, BATCH, IN_DIM, 2.0),
            yt: labels,
            wt: (0..BATCH).map(|_| rng.uniform(0.1, 1.0)).collect(),
        })
    }

    fn embed(&self, g: &Mlp) -> (Matrix, Matrix) {
        (
            g.infer(&self.xs).expect("input width matches"),
            g.infer(&self.xt).expect("input width matches"),
        )
    }

    /// Distance from every kink the objectives can hit.
    fn kink_distance(&self, margins: &Margins) -> Result<f64> {
        let mut m = f64::INFINITY;
        let relu_gap = |net: &Mlp, x: &Matrix| -> Result<f64> {
            let (_, cache) = net.forward(x)?;
            let hidden = &cache.pre_activations()[..cache.pre_activations().len() - 1];
            Ok(hidden
                .iter()
                .flat_map(|z| z.as_slice().iter().map(|v| v.abs()))
                .fold(f64::INFINITY, f64::min))
        };
        m = m.min(relu_gap(&self.generator, &self.xs)?);
        m = m.min(relu_gap(&self.generator, &self.xt)?);
        let (fs, ft) = self.embed(&self.generator);
        m = m.min(relu_gap(&self.discriminator, &fs)?);
        m = m.min(relu_gap(&self.discriminator, &ft)?);
        for (f, y, c) in [
            (&fs, &self.ys, self.centers.source()),
            (&ft, &self.yt, self.centers.target()),
        ] {
            for i in 0..f.rows() {
                let row = f.row(i);
                let d_pos = squared_euclidean(row, c.row(y[i]));
                let (neg, d_neg) = nearest_negative_center(row, c, y[i])?;
                m = m.min((d_pos - margins.alpha).abs());
                m = m.min((margins.beta - d_neg).abs());
                for j in (0..c.rows()).filter(|&j| j != y[i] && j != neg) {
                    m = m.min(squared_euclidean(row, c.row(j)) - d_neg);
                }
            }
        }
        for j in 0..CLASSES {
            m = m.min(squared_euclidean(self.centers.source().row(j), self.centers.target().row(j)).sqrt());
        }
        let means = |f: &Matrix, y: &[usize]| {
            let mut out = Matrix::zeros(CLASSES, EMBED);
            for c in 0..CLASSES {
                let n = y.iter().filter(|&&l| l == c).count() as f64;
                for (i, _) in y.iter().enumerate().filter(|(_, &l)| l == c) {
                    for (a, b) in out.row_mut(c).iter_mut().zip(f.row(i)) {
                        *a += b / n;
                    }
                }
            }
            out
        };
        let (ms, mt) = (means(&fs, &self.ys), means(&ft, &self.yt));
        for j in 0..CLASSES {
            m = m.min(squared_euclidean(ms.row(j), mt.row(j)).sqrt());
        }
        Ok(m)
    }
}

fn backward_both(g: &Mlp, cs: &ForwardCache, gs: &Matrix, ct: &ForwardCache, gt: &Matrix) -> Result<Mlp> {
    let (mut a, _) = g.backward(cs, gs)?;
    let (b, _) = g.backward(ct, gt)?;
    accumulate(&mut a, &b, 1.0)?;
    Ok(a)
}

type Check = fn(&Instance, &Margins, bool) -> Result<f64>;

/// Damages the analytic gradient for the negative control.
fn maybe_perturb(mut g: Vec<f64>, perturb: bool) -> Vec<f64> {
    if perturb {
        if let Some(v) = g.iter_mut().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
            *v = *v * 1.01 + 1e-3;
        }
    }
    g
}

fn check_source_dcl(inst: &Instance, margins: &Margins, perturb: bool) -> Result<f64> {
    let (fs, cache) = inst.generator.forward(&inst.xs)?;
    let l = source_dcl(&fs, &inst.ys, inst.centers.source(), margins)?;
    let (gg, _) = inst.generator.backward(&cache, &l.feature_grads)?;
    let gc = l.center_grads.expect("center losses return center gradients");
    let mut analytic = gg.to_flat();
    analytic.extend_from_slice(gc.as_slice());

    let centers = inst.centers.source().clone();
    let mut numeric = numeric_grad(&inst.generator, |g| {
        source_dcl(&g.infer(&inst.xs).unwrap(), &inst.ys, &centers, margins).unwrap().value
    })?;
    numeric.extend(numeric_grad(&centers, |c| {
        source_dcl(&fs, &inst.ys, c, margins).unwrap().value
    })?);
    Ok(max_relative_error(&maybe_perturb(analytic, perturb), &numeric))
}

fn check_target_dcl(inst: &Instance, margins: &Margins, perturb: bool) -> Result<f64> {
    let (ft, cache) = inst.generator.forward(&inst.xt)?;
    let ct = inst.centers.target().clone();
    let l = target_dcl(&ft, &inst.yt, &inst.wt, &ct, margins)?;
    let (gg, _) = inst.generator.backward(&cache, &l.feature_grads)?;
    let mut analytic = gg.to_flat();
    analytic.extend_from_slice(l.center_grads.expect("center gradients").as_slice());

    let mut numeric = numeric_grad(&inst.generator, |g| {
        target_dcl(&g.infer(&inst.xt).unwrap(), &inst.yt, &inst.wt, &ct, margins)
            .unwrap()
            .value
    })?;
    numeric.extend(numeric_grad(&ct, |c| {
        target_dcl(&ft, &inst.yt, &inst.wt, c, margins).unwrap().value
    })?);
    Ok(max_relative_error(&maybe_perturb(analytic, perturb), &numeric))
}

fn check_center_alignment(inst: &Instance, _: &Margins, perturb: bool) -> Result<f64> {
    let (cs, ct) = (inst.centers.source(), inst.centers.target());
    let a = center_alignment(cs, ct)?;
    let mut analytic = a.source_grads.into_vec();
    analytic.extend(a.target_grads.into_vec());
    let mut numeric = numeric_grad(cs, |c| center_alignment(c, ct).unwrap().value)?;
    numeric.extend(numeric_grad(ct, |c| center_alignment(cs, c).unwrap().value)?);
    Ok(max_relative_error(&maybe_perturb(analytic, perturb), &numeric))
}

fn check_class_mean_alignment(inst: &Instance, _: &Margins, perturb: bool) -> Result<f64> {
    let g = &inst.generator;
    let (fs, cs) = g.forward(&inst.xs)?;
    let (ft, ct) = g.forward(&inst.xt)?;
    let a = class_mean_alignment(&fs, &inst.ys, &ft, &inst.yt, CLASSES)?;
    let analytic = backward_both(g, &cs, &a.source_feature_grads, &ct, &a.target_feature_grads)?.to_flat();
    let numeric = numeric_grad(g, |g| {
        let (fs, ft) = inst.embed(g);
        class_mean_alignment(&fs, &inst.ys, &ft, &inst.yt, CLASSES).unwrap().value
    })?;
    Ok(max_relative_error(&maybe_perturb(analytic, perturb), &numeric))
}

fn disc_value(d: &Mlp, fs: &Matrix, ft: &Matrix) -> f64 {
    discriminator_loss(d.infer(fs).unwrap().as_slice(), d.infer(ft).unwrap().as_slice()).value
}

/// Discriminator loss and its gradients wrt D, source features and target features.
fn disc_grads(d: &Mlp, fs: &Matrix, ft: &Matrix) -> Result<(f64, Mlp, Matrix, Matrix)> {
    let (ps, cs) = d.forward(fs)?;
    let (pt, ct) = d.forward(ft)?;
    let l = discriminator_loss(ps.as_slice(), pt.as_slice());
    let (mut gd, gfs) = d.backward(&cs, &Matrix::from_vec(fs.rows(), 1, l.source_grads)?)?;
    let (gdt, gft) = d.backward(&ct, &Matrix::from_vec(ft.rows(), 1, l.target_grads)?)?;
    accumulate(&mut gd, &gdt, 1.0)?;
    Ok((l.value, gd, gfs, gft))
}

fn check_disc_loss(inst: &Instance, _: &Margins, perturb: bool) -> Result<f64> {
    let g = &inst.generator;
    let d = &inst.discriminator;
    let (fs, cs) = g.forward(&inst.xs)?;
    let (ft, ct) = g.forward(&inst.xt)?;
    let (_, gd, gfs, gft) = disc_grads(d, &fs, &ft)?;
    let mut analytic = gd.to_flat();
    analytic.extend(backward_both(g, &cs, &gfs, &ct, &gft)?.to_flat());

    let mut numeric = numeric_grad(d, |d| disc_value(d, &fs, &ft))?;
    numeric.extend(numeric_grad(g, |g| {
        let (fs, ft) = inst.embed(g);
        disc_value(d, &fs, &ft)
    })?);
    Ok(max_relative_error(&maybe_perturb(analytic, perturb), &numeric))
}

fn xent_value(head: &Mlp, f: &Matrix, y: &[usize], w: Option<&[f64]>) -> f64 {
    weighted_softmax_xent(&head.infer(f).unwrap(), y, w).unwrap().value
}

fn check_softmax_xent(inst: &Instance, _: &Margins, perturb: bool) -> Result<f64> {
    let g = &inst.generator;
    let h = &inst.head;
    let (fs, cs) = g.forward(&inst.xs)?;
    let (ft, ct) = g.forward(&inst.xt)?;
    // unweighted on source, weighted on target
    let (zs, hs) = h.forward(&fs)?;
    let (zt, ht) = h.forward(&ft)?;
    let ls = weighted_softmax_xent(&zs, &inst.ys, None)?;
    let lt = weighted_softmax_xent(&zt, &inst.yt, Some(&inst.wt))?;
    let (mut gh, gfs) = h.backward(&hs, &ls.feature_grads)?;
    let (ght, gft) = h.backward(&ht, &lt.feature_grads)?;
    accumulate(&mut gh, &ght, 1.0)?;
    let mut analytic = gh.to_flat();
    analytic.extend(backward_both(g, &cs, &gfs, &ct, &gft)?.to_flat());

    let total = |h: &Mlp, fs: &Matrix, ft: &Matrix| {
        xent_value(h, fs, &inst.ys, None) + xent_value(h, ft, &inst.yt, Some(&inst.wt))
    };
    let mut numeric = numeric_grad(h, |h| total(h, &fs, &ft))?;
    numeric.extend(numeric_grad(g, |g| {
        let (fs, ft) = inst.embed(g);
        total(h, &fs, &ft)
    })?);
    Ok(max_relative_error(&maybe_perturb(analytic, perturb), &numeric))
}

const COMBINED_WEIGHTS: GeneratorWeights = GeneratorWeights {
    target: 0.7,
    alignment: 0.3,
    domain: 0.9,
};

/// `L_s + λ_t L_t + λ_c L_c - λ_d L_d` on unshared centers.
fn combined_value(inst: &Instance, g: &Mlp, centers: &CenterSet, margins: &Margins) -> f64 {
    let (fs, ft) = inst.embed(g);
    let w = COMBINED_WEIGHTS;
    source_dcl(&fs, &inst.ys, centers.source(), margins).unwrap().value
        + w.target * target_dcl(&ft, &inst.yt, &inst.wt, centers.target(), margins).unwrap().value
        + w.alignment * center_alignment(centers.source(), centers.target()).unwrap().value
        - w.domain * disc_value(&inst.discriminator, &fs, &ft)
}

fn check_generator_objective(inst: &Instance, margins: &Margins, perturb: bool) -> Result<f64> {
    let g = &inst.generator;
    let (fs, cs) = g.forward(&inst.xs)?;
    let (ft, ct) = g.forward(&inst.xt)?;
    let (disc, _, gfs, gft) = disc_grads(&inst.discriminator, &fs, &ft)?;
    let align = center_alignment(inst.centers.source(), inst.centers.target())?;
    let parts = GeneratorParts {
        source: source_dcl(&fs, &inst.ys, inst.centers.source(), margins)?,
        target: Some(target_dcl(&ft, &inst.yt, &inst.wt, inst.centers.target(), margins)?),
        alignment: Some(AlignmentPart {
            value: align.value,
            source_feature_grads: None,
            target_feature_grads: None,
            source_center_grads: Some(align.source_grads),
            target_center_grads: Some(align.target_grads),
        }),
        domain: Some(DomainPart {
            disc_loss: disc,
            source_feature_grads: gfs,
            target_feature_grads: gft,
        }),
    };
    let all = LossTerms {
        target: true,
        alignment: true,
        domain: true,
    };
    let c = combined_generator_loss(&parts, &COMBINED_WEIGHTS, &all, ft.rows())?;
    let mut analytic = backward_both(g, &cs, &c.source_feature_grads, &ct, &c.target_feature_grads)?.to_flat();
    analytic.extend(c.source_center_grads.expect("source center gradients").into_vec());
    analytic.extend(c.target_center_grads.expect("target center gradients").into_vec());

    let mut numeric = numeric_grad(g, |g| combined_value(inst, g, &inst.centers, margins))?;
    numeric.extend(numeric_grad(&inst.centers, |cs| combined_value(inst, g, cs, margins))?);
    Ok(max_relative_error(&maybe_perturb(analytic, perturb), &numeric))
}

/// Every checked objective, with the parameter groups it is differentiated against.
pub const CHECKS: [(&str, &str); 7] = [
    ("source_dcl", "generator, source centers"),
    ("target_dcl", "generator, target centers"),
    ("center_alignment", "source centers, target centers"),
    ("class_mean_alignment", "generator"),
    ("disc_loss", "discriminator, generator"),
    ("softmax_xent", "head, generator"),
    ("generator_objective", "generator, source centers, target centers"),
];

fn check_fn(name: &str) -> Check {
    match name {
        "source_dcl" => check_source_dcl,
        "target_dcl" => check_target_dcl,
        "center_alignment" => check_center_alignment,
        "class_mean_alignment" => check_class_mean_alignment,
        "disc_loss" => check_disc_loss,
        "generator_objective" => check_generator_objective,
        "softmax_xent" => check_softmax_xent,
        _ => unreachable!("unlisted check {name}"),
    }
}

/// Runs every check on [`GRADCHECK_INSTANCES`] instances. With `perturb`,
/// analytic gradients are deliberately damaged and every check must fail.
pub fn run_all(seed: u64, perturb: bool) -> Result<Vec<GradReport>> {
    let margins = Margins::default();
    let mut out = Vec::new();
    for (k, (name, wrt)) in CHECKS.iter().enumerate() {
        let mut rng = Rng::new(seed).derive(100 + k as u64);
        let check = check_fn(name);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        let mut draws = 0;
        while done < GRADCHECK_INSTANCES {
            draws += 1;
            if draws > MAX_DRAWS {
                return Err(Error::Numeric(format!(
                    "{name}: no kink-free instance in {MAX_DRAWS} draws"
                )));
            }
            let inst = Instance::draw(&mut rng)?;
            if inst.kink_distance(&margins)? < KINK_MARGIN {
                continue;
            }
            worst = worst.max(check(&inst, &margins, perturb)?);
            done += 1;
        }
        out.push(GradReport {
            loss: name,
            wrt,
            instances: done,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
