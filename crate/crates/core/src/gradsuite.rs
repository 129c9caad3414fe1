//! Finite-difference verification of every hand-written gradient.
//!
//! Each check draws random instances from a seeded stream, compares the
//! analytic gradient with central differences and reports the largest
//! relative error. Instances whose rectifier pre-activations sit within
//! [`KINK_MARGIN`] of zero are redrawn, since central differences are not
//! meaningful across a kink.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::diffcore::gradcheck::{central_difference, max_relative_error, FD_STEP};
use crate::diffcore::{bce, dot, grad_reverse, softmax_xent, Activation, Matrix, Mlp};
use crate::eagr::eagr_disc_loss;
use crate::mgrm::{global_relation, mgrm_loss, BankUpdateRule, PrototypeBank, Prototypes};
use crate::rng::{purpose, stream, StreamRng};
use crate::synthworld::Domain;
use crate::trainer::{objective, Batch, ModelBundle, ModuleFlags, ObjectiveSettings, Role};
use crate::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Check = fn(&mut StreamRng) -> Result<f64>;

pub const CHECKS: [(&str, Check); 7] = [
    ("mlp_backward", check_mlp),
    ("softmax_xent", check_softmax_xent),
    ("bce", check_bce),
    ("grad_reverse", check_grad_reverse),
    ("eagr_concat_disc", check_eagr),
    ("mgrm_loss", check_mgrm),
    ("training_objective", check_objective),
];

/// Runs every check on `instances` random instances.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, check))| {
            let start = Instant::now();
            let mut rng = stream(seed, purpose::GRADCHECK, i as u32);
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                worst = worst.max(check(&mut rng)?);
            }
            Ok(CheckResult {
                name,
                instances,
                max_rel_error: worst,
                elapsed: start.elapsed(),
            })
        })
        .collect()
}

fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let values = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, values).expect("finite")
}

fn near_kink(mlp: &Mlp, x: &Matrix) -> Result<bool> {
    let trace = mlp.trace(x)?;
    Ok(mlp
        .layers()
        .iter()
        .zip(&trace.pre_activations)
        .any(|(l, z)| l.activation == Activation::Relu && z.values().iter().any(|v| v.abs() < KINK_MARGIN)))
}

fn check_mlp(rng: &mut StreamRng) -> Result<f64> {
    let acts = [Activation::Relu, Activation::Identity, Activation::Sigmoid];
    loop {
        let depth = rng.random_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
        let activations: Vec<Activation> = (0..depth).map(|_| acts[rng.random_range(0..3)]).collect();
        let softmax_output = rng.random_bool(0.3);
        let mut mlp = Mlp::new(&widths, &activations, softmax_output, rng)?;
        for l in mlp.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let n = rng.random_range(1..=4);
        let x = random_matrix(rng, n, widths[0], 1.5);
        if near_kink(&mlp, &x)? {
            continue;
        }
        let upstream = random_matrix(rng, n, *widths.last().unwrap_or(&1), 1.0);
        let back = mlp.backward(&x, &upstream)?;
        let p0 = mlp.params();
        let mut probe = mlp.clone();
        let num_p = central_difference(
            |p| {
                probe.set_params(p).expect("same layout");
                dot(probe.forward(&x).expect("shape").values(), upstream.values())
            },
            &p0,
            FD_STEP,
        );
        let num_x = central_difference(
            |v| {
                let xm = Matrix::from_vec(n, widths[0], v.to_vec()).expect("shape");
                dot(mlp.forward(&xm).expect("shape").values(), upstream.values())
            },
            x.values(),
            FD_STEP,
        );
        return Ok(max_relative_error(&back.params.grad, &num_p).max(max_relative_error(back.input.values(), &num_x)));
    }
}

fn check_softmax_xent(rng: &mut StreamRng) -> Result<f64> {
    let n = rng.random_range(1..=5);
    let c = rng.random_range(2..=8);
    let logits = random_matrix(rng, n, c, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, grad) = softmax_xent(&logits, &labels)?;
    let num = central_difference(
        |v| {
            let m = Matrix::from_vec(n, c, v.to_vec()).expect("shape");
            softmax_xent(&m, &labels).expect("labels").0
        },
        logits.values(),
        FD_STEP,
    );
    Ok(max_relative_error(grad.values(), &num))
}

fn check_bce(rng: &mut StreamRng) -> Result<f64> {
    let p = rng.random_range(0.01..0.99);
    let z = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let (_, g) = bce(p, z);
    let num = central_difference(|v| bce(v[0], z).0, &[p], FD_STEP);
    Ok(max_relative_error(&[g], &num))
}

fn check_grad_reverse(rng: &mut StreamRng) -> Result<f64> {
    // Forward is the identity, so for L = Σ u ⊙ x the reversed gradient
    // must equal −μ times the numerical gradient of L.
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=6);
    let x = random_matrix(rng, n, d, 2.0);
    let u = random_matrix(rng, n, d, 2.0);
    let mu = rng.random_range(0.0..2.0);
    let num = central_difference(|v| dot(v, u.values()), x.values(), FD_STEP);
    let expected: Vec<f64> = num.iter().map(|g| -mu * g).collect();
    Ok(max_relative_error(grad_reverse(&u, mu).values(), &expected))
}

fn check_eagr(rng: &mut StreamRng) -> Result<f64> {
    loop {
        let n = rng.random_range(2..=5);
        let d = rng.random_range(1..=5);
        let c = rng.random_range(2..=5);
        let h = rng.random_range(2..=6);
        let disc = Mlp::new(&[d + c, h, 1], &[Activation::Relu, Activation::Sigmoid], false, rng)?;
        let f = random_matrix(rng, n, d, 1.5);
        let l = random_matrix(rng, n, c, 2.0);
        let z: Vec<f64> = (0..n).map(|r| (r % 2) as f64).collect();
        let joint = crate::eagr::concat_feature_probs(&f, &crate::diffcore::softmax_rows(&l))?;
        if near_kink(&disc, &joint)? {
            continue;
        }
        // With μ = 1 the reversed input gradients are the negated true ones.
        let out = eagr_disc_loss(&f, &l, &z, &disc, 1.0)?;
        let loss = |f: &Matrix, l: &Matrix, disc: &Mlp| eagr_disc_loss(f, l, &z, disc, 1.0).expect("shapes").loss;
        let num_f = central_difference(
            |v| -loss(&Matrix::from_vec(n, d, v.to_vec()).expect("shape"), &l, &disc),
            f.values(),
            FD_STEP,
        );
        let num_l = central_difference(
            |v| -loss(&f, &Matrix::from_vec(n, c, v.to_vec()).expect("shape"), &disc),
            l.values(),
            FD_STEP,
        );
        let mut probe = disc.clone();
        let num_p = central_difference(
            |p| {
                probe.set_params(p).expect("layout");
                loss(&f, &l, &probe)
            },
            &disc.params(),
            FD_STEP,
        );
        return Ok(max_relative_error(out.feature_grad.values(), &num_f)
            .max(max_relative_error(out.logit_grad.values(), &num_l))
            .max(max_relative_error(&out.disc_grad.grad, &num_p)));
    }
}

fn random_bank(rng: &mut StreamRng, c: usize, d: usize) -> Result<PrototypeBank> {
    let mut bank = PrototypeBank::new(c, d);
    for domain in [Domain::Source, Domain::Target] {
        let present: Vec<bool> = (0..c).map(|_| rng.random_bool(0.8)).collect();
        let beta = Prototypes {
            values: random_matrix(rng, c, d, 2.0),
            counts: present.iter().map(|&p| usize::from(p)).collect(),
            present,
        };
        bank.update(&beta, domain, BankUpdateRule::Matched)?;
    }
    Ok(bank)
}

fn check_mgrm(rng: &mut StreamRng) -> Result<f64> {
    loop {
        let c = rng.random_range(2..=5);
        let d = rng.random_range(2..=6);
        let n = rng.random_range(1..=8);
        let bank = random_bank(rng, c, d)?;
        let Ok(pi) = global_relation(&bank) else { continue };
        let x = random_matrix(rng, n, d, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let out = mgrm_loss(&x, &labels, &bank, &pi)?;
        if out.valid_entries == 0 {
            continue;
        }
        let num = central_difference(
            |v| {
                let m = Matrix::from_vec(n, d, v.to_vec()).expect("shape");
                mgrm_loss(&m, &labels, &bank, &pi).expect("shapes").loss
            },
            x.values(),
            FD_STEP,
        );
        return Ok(max_relative_error(out.grad.values(), &num));
    }
}

/// The extractor/classifier gradient of the training objective equals the
/// gradient of `det + λ·mgrm − μ·(daf + eagr)`, the sign flip being the
/// gradient reversal.
fn check_objective(rng: &mut StreamRng) -> Result<f64> {
    loop {
        let c = rng.random_range(2..=4);
        let d = rng.random_range(2..=5);
        let ns = rng.random_range(2..=6);
        let nt = rng.random_range(2..=6);
        let seed = rng.random();
        let mut bundle = ModelBundle::new(d, c, rng.random_range(2..=6), 0.1, seed)?;
        for m in [&mut bundle.features, &mut bundle.detector, &mut bundle.dis_daf, &mut bundle.dis_eagr] {
            for l in m.layers_mut() {
                l.bias.iter_mut().for_each(|b| *b = rng.random_range(0.0..0.5));
            }
        }
        let source = random_matrix(rng, ns, d, 2.0);
        let target = random_matrix(rng, nt, d, 2.0);
        let source_noisy: Vec<Option<usize>> =
            (0..ns).map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..c))).collect();
        let batch = Batch {
            source_det: source_noisy.iter().map(|l| Some(l.unwrap_or(c))).collect(),
            source_noisy,
            source_roles: vec![Role::Clean; ns],
            source,
            target,
            source_extra: Matrix::zeros(0, d),
            target_extra: Matrix::zeros(0, d),
        };
        if near_kink(&bundle.features, &batch.source)? || near_kink(&bundle.features, &batch.target)? {
            continue;
        }
        let fs = bundle.features.forward(&batch.source)?;
        let ft = bundle.features.forward(&batch.target)?;
        if near_kink(&bundle.dis_daf, &fs)? || near_kink(&bundle.dis_daf, &ft)? {
            continue;
        }
        let bank = random_bank(rng, c, d)?;
        let mu = rng.random_range(0.1..1.5);
        let settings = ObjectiveSettings {
            flags: ModuleFlags::FULL,
            lambda_mgrm: rng.random_range(0.0..1.0),
            mu,
            confidence_floor: 0.5,
            bank_update: BankUpdateRule::Matched,
        };
        let (_, grads, _) = objective(&bundle, &batch, &bank, &settings, None)?;
        let theta = bundle.meta_params();
        let mut probe = bundle.clone();
        let num = central_difference(
            |p| {
                probe.set_meta_params(p).expect("layout");
                let (l, _, _) = objective(&probe, &batch, &bank, &settings, None).expect("valid batch");
                l.det + settings.lambda_mgrm * l.mgrm - mu * (l.dis_daf + l.dis_eagr)
            },
            &theta,
            FD_STEP,
        );
        return Ok(max_relative_error(&grads.meta().grad, &num));
    }
}
