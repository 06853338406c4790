//! Acceptance suite for the whole pipeline, run as a plain binary so the
//! per-criterion outcome lines stream straight to the console:
//!
//! 1. dense TPS solves match an independent linear-system oracle;
//! 2. the transform-consistency estimate recovers planted homographies;
//! 3. every training loss and the differentiable warp pass central
//!    finite-difference gradient checks;
//! 4. the logged total equals the weighted sum of its logged components;
//! 5. the standard training run converges (cycle loss halves, held-out
//!    self-try-on SSIM >= 0.8) within the time budget;
//! 6. warp-module weights stay bit-identical through cycle training and
//!    inference uses exactly one generator pass;
//! 7. metric implementations reproduce closed-form fixtures;
//! 8. both ablation switches yield strictly worse held-out SSIM;
//! 9. two identically seeded runs agree byte-for-byte on logs and images.
//!
//! The binary exits nonzero if any criterion fails. Setting
//! DCTON_ACCEPTANCE_FAST=1 skips the training-based criteria (they are
//! then reported as failures); it exists only to iterate on the cheap
//! criteria.

use std::any::Any;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dcton_core::data::{self, DatasetSpec, TryOnSample};
use dcton_core::geometry::{
    estimate_homography, regularization_term, solve_tps, ControlGrid, TransformMatrix,
};
use dcton_core::graph::{Graph, Var};
use dcton_core::losses::{
    adversarial_loss, content_preserving_loss, cycle_loss, generator_adversarial_loss, l1_loss,
    mask_supervision_loss, perceptual_loss, total_loss, warp_reconstruction_loss, LambdaConfig,
    LossReport, RandomConvExtractor,
};
use dcton_core::metrics::{frechet_distance, gaussian_stats, inception_score, ssim};
use dcton_core::nets;
use dcton_core::train::{self, TrainConfig};
use dcton_core::{infer, Tensor};
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn main() {
    let started = Instant::now();
    let fast = std::env::var("DCTON_ACCEPTANCE_FAST").is_ok();
    let mut results: Vec<Option<Outcome>> = vec![None; 9];

    println!("[acceptance] analytic criteria (1, 2, 3, 7)...");
    results[0] = Some(guard(criterion_1));
    results[1] = Some(guard(criterion_2));
    results[2] = Some(guard(criterion_3));
    results[6] = Some(guard(criterion_7));

    if fast {
        for idx in [3, 4, 5, 7, 8] {
            results[idx] = Some(Err("skipped: DCTON_ACCEPTANCE_FAST is set".into()));
        }
    } else {
        run_training_criteria(&mut results);
    }

    println!();
    let mut failures = 0;
    for (idx, outcome) in results.iter().enumerate() {
        match outcome {
            Some(Ok(detail)) => println!("criterion {} pass - {detail}", idx + 1),
            Some(Err(reason)) => {
                failures += 1;
                println!("criterion {} FAIL - {reason}", idx + 1);
            }
            None => {
                failures += 1;
                println!("criterion {} FAIL - not evaluated", idx + 1);
            }
        }
    }
    println!(
        "\n[acceptance] {} of 9 criteria passed in {:.0} s",
        9 - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

fn guard(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!("panicked: {}", panic_message(&p))),
    }
}

fn panic_message(p: &Box<dyn Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".into())
}

fn es(e: dcton_core::Error) -> String {
    e.to_string()
}

// ═══ Criterion 1: TPS against an independent linear-system oracle ═══════

/// Classical thin-plate solve built from scratch: kernel `r^2 ln r`,
/// explicit `[[K, P], [P^T, 0]]` assembly, hand-rolled partial-pivot
/// Gaussian elimination. The library uses the `d^2 ln d^2` kernel (a
/// constant rescale spanning the same interpolant), so agreement here is
/// a genuine cross-check of both the solve and the kernel-family claim.
struct OracleTps {
    sites: Vec<[f64; 2]>,
    /// k weight rows then [a0, ax, ay], each with (x, y) columns.
    params: Vec<[f64; 2]>,
}

fn classical_kernel(r2: f64) -> f64 {
    if r2 < 1e-12 {
        0.0
    } else {
        // r^2 ln r = d2 * ln(sqrt(d2))
        0.5 * r2 * r2.ln()
    }
}

/// Solve `a · x = b` (n x n, two right-hand sides) by Gaussian
/// elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<[f64; 2]>) -> Option<Vec<[f64; 2]>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite pivot")
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row][0] -= f * b[col][0];
            b[row][1] -= f * b[col][1];
        }
    }
    let mut x = vec![[0.0f64; 2]; n];
    for row in (0..n).rev() {
        for c in 0..2 {
            let mut acc = b[row][c];
            for k in row + 1..n {
                acc -= a[row][k] * x[k][c];
            }
            x[row][c] = acc / a[row][row];
        }
    }
    Some(x)
}

impl OracleTps {
    fn fit(sites: &[[f64; 2]], values: &[[f64; 2]]) -> Result<Self, String> {
        let k = sites.len();
        let n = k + 3;
        let mut a = vec![vec![0.0f64; n]; n];
        let mut b = vec![[0.0f64; 2]; n];
        for i in 0..k {
            for j in 0..k {
                let dx = sites[i][0] - sites[j][0];
                let dy = sites[i][1] - sites[j][1];
                a[i][j] = classical_kernel(dx * dx + dy * dy);
            }
            a[i][k] = 1.0;
            a[i][k + 1] = sites[i][0];
            a[i][k + 2] = sites[i][1];
            a[k][i] = 1.0;
            a[k + 1][i] = sites[i][0];
            a[k + 2][i] = sites[i][1];
            b[i] = values[i];
        }
        let params = solve_dense(a, b).ok_or("oracle system is singular")?;
        Ok(OracleTps { sites: sites.to_vec(), params })
    }

    fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let k = self.sites.len();
        let mut out = [0.0f64; 2];
        for c in 0..2 {
            let mut acc = self.params[k][c]
                + self.params[k + 1][c] * p[0]
                + self.params[k + 2][c] * p[1];
            for (j, s) in self.sites.iter().enumerate() {
                let dx = p[0] - s[0];
                let dy = p[1] - s[1];
                acc += self.params[j][c] * classical_kernel(dx * dx + dy * dy);
            }
            out[c] = acc;
        }
        out
    }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut max_err = 0.0f64;
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7190 + trial);
        let src = ControlGrid::regular(5, 5).map_err(es)?;
        let offsets: Vec<[f64; 2]> = (0..25)
            .map(|_| [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)])
            .collect();
        let dst = src.with_offsets(&offsets).map_err(es)?;
        let (h, w) = (33usize, 41usize);
        let field = solve_tps(&src, &dst, h, w).map_err(es)?;
        // The field carries destination points back onto sources, so the
        // oracle interpolates src values at dst sites.
        let oracle = OracleTps::fit(dst.points(), src.points())?;
        for _ in 0..20 {
            let y = rng.gen_range(0..h);
            let x = rng.gen_range(0..w);
            let px = (2 * x + 1) as f64 / w as f64 - 1.0;
            let py = (2 * y + 1) as f64 / h as f64 - 1.0;
            let got = field.at(y, x);
            let want = oracle.eval([px, py]);
            max_err = max_err.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if max_err >= 1e-6 {
        return Err(format!("max probe error {max_err:.3e} >= 1e-6"));
    }
    if secs >= 5.0 {
        return Err(format!("ran {secs:.2} s, budget is 5 s"));
    }
    Ok(format!(
        "200 probes on 10 random grids: max error {max_err:.2e} vs classical oracle in {secs:.2} s"
    ))
}

// ═══ Criterion 2: homography recovery ═══════════════════════════════════

fn criterion_2() -> Outcome {
    let base = ControlGrid::regular(5, 5).map_err(es)?;
    let mut max_h = 0.0f64;
    let mut max_rb = 0.0f64;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x2000 + trial);
        let points: Vec<[f64; 2]> = base
            .points()
            .iter()
            .map(|p| [p[0] + rng.gen_range(-0.1..0.1), p[1] + rng.gen_range(-0.1..0.1)])
            .collect();
        // A planted map with unit projective row keeps the moved stack a
        // valid homogeneous point set, so recovery can be exact.
        let h_star = Matrix3::new(
            1.0 + rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.2..0.2),
            1.0 + rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.3..0.3),
            0.0,
            0.0,
            1.0,
        );
        let moved: Vec<[f64; 2]> = points
            .iter()
            .map(|p| {
                [
                    h_star[(0, 0)] * p[0] + h_star[(0, 1)] * p[1] + h_star[(0, 2)],
                    h_star[(1, 0)] * p[0] + h_star[(1, 1)] * p[1] + h_star[(1, 2)],
                ]
            })
            .collect();
        let prev = TransformMatrix::from_points(&points);
        let curr = TransformMatrix::from_points(&moved);
        let est = estimate_homography(&prev, &curr).map_err(es)?;
        let dist = (est.matrix() - h_star).norm();
        let rb = regularization_term(&prev, &curr).map_err(es)?;
        max_h = max_h.max(dist);
        max_rb = max_rb.max(rb);
        if dist >= 1e-6 {
            return Err(format!("trial {trial}: ||est - planted||_F = {dist:.3e} >= 1e-6"));
        }
        if rb >= 1e-10 {
            return Err(format!("trial {trial}: residual {rb:.3e} >= 1e-10"));
        }
    }
    Ok(format!(
        "50 planted maps recovered: max ||dH||_F {max_h:.2e}, max residual {max_rb:.2e}"
    ))
}

// ═══ Criterion 3: finite-difference gradient suite ══════════════════════

struct FdCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>,
}

fn eval_case(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).item()
}

/// Max relative error between reverse-mode and central finite-difference
/// gradients over every element of every input.
fn fd_max_rel_err(case: &FdCase) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = (case.build)(&mut g, &vars);
    let grads = g.backward(loss);
    let mut worst = 0.0f64;
    for (i, t) in case.inputs.iter().enumerate() {
        let zero = Tensor::<f64>::zeros(t.shape());
        let ad = grads.get(vars[i]).unwrap_or(&zero);
        for e in 0..t.len() {
            let x = t.data()[e];
            let h = 1e-5 * x.abs().max(1.0);
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[e] = x + h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[e] = x - h;
            let fd = (eval_case(&plus, &case.build) - eval_case(&minus, &case.build)) / (2.0 * h);
            let a = ad.data()[e];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Companion tensor separated from `a` by at least 0.1 everywhere, so
/// absolute-value kinks stay far outside the probe radius.
fn separated(rng: &mut ChaCha8Rng, a: &Tensor<f64>) -> Tensor<f64> {
    let data = a
        .data()
        .iter()
        .map(|&v| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            v + sign * rng.gen_range(0.1..0.4)
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Channel-broadcast product of a (1,C,H,W) image and a (1,1,H,W) mask.
fn mask_product(img: &Tensor<f64>, mask: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (img.dim(1), img.dim(2), img.dim(3));
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            out[ch * h * w + i] = img.data()[ch * h * w + i] * mask.data()[i];
        }
    }
    Tensor::from_vec(img.shape(), out)
}

fn fd_cases(seed: u64) -> Vec<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<FdCase> = Vec::new();

    // Warp supervision: L1 between the warped garment and the masked
    // person; the warped input sits a safe distance from the product so
    // the absolute-value kink stays outside the probe radius.
    let person = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let m = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.85);
    let warped = separated(&mut rng, &mask_product(&person, &m));
    cases.push(FdCase {
        name: "warp-reconstruction",
        inputs: vec![warped, person, m],
        build: Box::new(|g, v| warp_reconstruction_loss(g, v[0], v[1], v[2])),
    });

    // Mask supervision: two L1 terms over predicted vs reference masks.
    let pc = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.2, 0.8);
    let ps = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.2, 0.8);
    let rc = separated(&mut rng, &pc);
    let rs = separated(&mut rng, &ps);
    cases.push(FdCase {
        name: "mask-supervision",
        inputs: vec![pc, ps, rc, rs],
        build: Box::new(|g, v| mask_supervision_loss(g, v[0], v[1], v[2], v[3])),
    });

    // Generator-side adversarial score over the four generated-image
    // logit maps of one cycle iteration.
    let l1 = rand_tensor(&mut rng, &[1, 1, 8, 8], -2.0, 2.0);
    let l2 = rand_tensor(&mut rng, &[1, 1, 8, 8], -2.0, 2.0);
    let l3 = rand_tensor(&mut rng, &[1, 1, 8, 8], -2.0, 2.0);
    let l4 = rand_tensor(&mut rng, &[1, 1, 8, 8], -2.0, 2.0);
    cases.push(FdCase {
        name: "adversarial-generator",
        inputs: vec![l1, l2, l3, l4],
        build: Box::new(|g, v| generator_adversarial_loss(g, &[v[0], v[1], v[2], v[3]])),
    });

    // Full adversarial triple over all six logit maps, summed.
    let six: Vec<Tensor<f64>> =
        (0..6).map(|_| rand_tensor(&mut rng, &[1, 1, 8, 8], -2.0, 2.0)).collect();
    cases.push(FdCase {
        name: "adversarial-discriminator",
        inputs: six,
        build: Box::new(|g, v| {
            let a = adversarial_loss(g, v[0], v[1], v[2], v[3], v[4], v[5]);
            let d = g.add(a.disc_person, a.disc_skin);
            g.add(a.generator, d)
        }),
    });

    // Round-trip reconstruction of the person image and its skin.
    let orig = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let rec = separated(&mut rng, &orig);
    let skin = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let skin_rec = separated(&mut rng, &skin);
    cases.push(FdCase {
        name: "cycle",
        inputs: vec![rec, orig, skin_rec, skin],
        build: Box::new(|g, v| cycle_loss(g, v[0], v[1], v[2], v[3])),
    });

    // Content preservation outside soft clothes+skin regions in both
    // passes; masks stay interior so the clamp is locally smooth.
    let src = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let tryon = separated(&mut rng, &src);
    let restored = separated(&mut rng, &src);
    let msk = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.35);
    let mc = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.35);
    cases.push(FdCase {
        name: "content-preserving",
        inputs: vec![tryon, restored, src, msk, mc],
        build: Box::new(|g, v| content_preserving_loss(g, v[0], v[1], v[2], v[3], v[4])),
    });

    // Multi-level perceptual distance between each pass's warped garment
    // and the masked image wearing it, under the seeded extractor.
    let cw1 = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let i2 = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let m1 = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.85);
    let cw2 = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let i1b = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let m2 = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.85);
    let ext_seed = seed ^ 0x5eed;
    cases.push(FdCase {
        name: "perceptual",
        inputs: vec![cw1, i2, m1, cw2, i1b, m2],
        build: Box::new(move |g, v| {
            let extractor = RandomConvExtractor::<f64>::new(ext_seed);
            perceptual_loss(g, &extractor, v[0], v[1], v[2], v[3], v[4], v[5])
        }),
    });

    // Differentiable warp: control points -> dense field -> bilinear
    // sampling, reduced to a scalar.
    let img = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let grid = ControlGrid::regular(4, 4).expect("grid");
    let dst_data: Vec<f64> = grid
        .points()
        .iter()
        .flat_map(|p| {
            [p[0] + rng.gen_range(-0.08..0.08), p[1] + rng.gen_range(-0.08..0.08)]
        })
        .collect();
    let dst = Tensor::from_vec(&[1, 16, 2], dst_data);
    let src_pts: Vec<[f64; 2]> = grid.points().to_vec();
    cases.push(FdCase {
        name: "warp-apply",
        inputs: vec![img, dst],
        build: Box::new(move |g, v| {
            let field = g.tps_grid(v[1], &src_pts, 8, 8).expect("tps grid");
            let warped = g.grid_sample(v[0], field, -1.0);
            g.mean_all(warped)
        }),
    });

    // Skin synthesis arithmetic: mask * image against a target. The
    // reference sits well below any attainable product so the L1 kink
    // stays away from the probe radius.
    let simg = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let smask = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.85);
    let sref = rand_tensor(&mut rng, &[1, 3, 8, 8], -3.0, -2.0);
    cases.push(FdCase {
        name: "skin-synthesis",
        inputs: vec![simg, smask, sref],
        build: Box::new(|g, v| {
            let skin = g.mul_bcast_c(v[0], v[1]);
            l1_loss(g, skin, v[2])
        }),
    });

    // Full weighted composite of adversarial, cycle, content and
    // perceptual terms.
    let ta = rand_tensor(&mut rng, &[1, 1, 8, 8], -2.0, 2.0);
    let torig = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let trec = separated(&mut rng, &torig);
    let tskin = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let tskin_rec = separated(&mut rng, &tskin);
    let ttry = separated(&mut rng, &torig);
    let tms = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.35);
    let tmc = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.15, 0.35);
    let tcw1 = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let tcw2 = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.9, 0.9);
    let comp_seed = seed ^ 0xc0de;
    cases.push(FdCase {
        name: "weighted-composite",
        inputs: vec![ta, trec, torig, tskin_rec, tskin, ttry, tms, tmc, tcw1, tcw2],
        build: Box::new(move |g, v| {
            let adv = generator_adversarial_loss(g, &[v[0]]);
            let cyc = cycle_loss(g, v[1], v[2], v[3], v[4]);
            let pre = content_preserving_loss(g, v[5], v[1], v[2], v[6], v[7]);
            let extractor = RandomConvExtractor::<f64>::new(comp_seed);
            let vgg = perceptual_loss(g, &extractor, v[8], v[5], v[7], v[9], v[1], v[7]);
            total_loss(g, adv, cyc, pre, vgg, &LambdaConfig::default())
        }),
    });

    cases
}

fn criterion_3() -> Outcome {
    // Ten loss families x two seeds = twenty independent seeded cases.
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut total = 0usize;
    for seed in [11u64, 29u64] {
        for case in fd_cases(seed) {
            let err = fd_max_rel_err(&case);
            total += 1;
            if err > worst {
                worst = err;
                worst_name = format!("{} (seed {seed})", case.name);
            }
            if err >= 1e-3 {
                return Err(format!(
                    "case {} seed {seed}: max relative gradient error {err:.3e} >= 1e-3",
                    case.name
                ));
            }
        }
    }
    Ok(format!(
        "{total}/{total} cases within 1e-3; worst {worst:.2e} in {worst_name}"
    ))
}

// ═══ Criterion 7: metric fixtures ═══════════════════════════════════════

fn criterion_7() -> Outcome {
    // SSIM of an image with itself.
    let mut rng = ChaCha8Rng::seed_from_u64(0x55);
    let n = 3 * 16 * 16;
    let img = Tensor::<f32>::from_vec(
        &[3, 16, 16],
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    );
    let s = ssim(&img, &img).map_err(es)?;
    if (s - 1.0).abs() > 1e-9 {
        return Err(format!("ssim(x, x) = {s} differs from 1 by more than 1e-9"));
    }

    // Frechet distance of an empirical set against itself.
    let samples: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let (m, c) = gaussian_stats(&samples).map_err(es)?;
    let d_self = frechet_distance(&m, &c, &m, &c).map_err(es)?;
    if d_self.abs() > 1e-8 {
        return Err(format!("fid(a, a) = {d_self:.3e} exceeds 1e-8"));
    }

    // Identity-covariance mean shift: distance equals the squared shift.
    let mu = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, -0.25, 1.5]);
    let expected = mu.iter().map(|v| v * v).sum::<f64>();
    let zero = DVector::zeros(6);
    let eye = DMatrix::identity(6, 6);
    let d_shift = frechet_distance(&zero, &eye, &mu, &eye).map_err(es)?;
    if (d_shift - expected).abs() > 1e-6 {
        return Err(format!(
            "fid of identity-covariance shift = {d_shift} vs expected {expected}"
        ));
    }

    // Inception-style score of uniform rows is exactly 1.
    let uniform: Vec<Vec<f64>> = (0..12).map(|_| vec![0.25; 4]).collect();
    let (is_u, _) = inception_score(&uniform, 3).map_err(es)?;
    if (is_u - 1.0).abs() > 1e-9 {
        return Err(format!("IS of uniform rows = {is_u} differs from 1 by more than 1e-9"));
    }

    // One-hot rows covering K classes per split score exactly K.
    let k = 5usize;
    let onehot: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let mut row = vec![0.0; k];
            row[i % k] = 1.0;
            row
        })
        .collect();
    let (is_k, _) = inception_score(&onehot, 4).map_err(es)?;
    if (is_k - k as f64).abs() > 1e-9 {
        return Err(format!("IS of one-hot-covering rows = {is_k} vs expected {k}"));
    }

    Ok(format!(
        "ssim(x,x)=1, fid(a,a)={d_self:.1e}, shift fid={d_shift:.6}, IS uniform=1, IS one-hot={is_k:.6}"
    ))
}

// ═══ Training-based criteria (4, 5, 6, 8, 9) ════════════════════════════

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    train_set: Vec<TryOnSample>,
    held: Vec<TryOnSample>,
}

fn build_fixture() -> Result<Fixture, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().to_path_buf();
    let spec = DatasetSpec::default(); // 200 samples, 64x48, seed 0
    let ds = root.join("dataset");
    data::generate_dataset(&spec, &ds).map_err(es)?;
    let mut all = data::load_dataset(&ds).map_err(es)?;
    if all.len() != 200 {
        return Err(format!("expected 200 samples, generated {}", all.len()));
    }
    let held = all.split_off(180);
    Ok(Fixture { _tmp: tmp, root, train_set: all, held })
}

struct RunArtifacts {
    reports: Vec<LossReport>,
    pretrain_log: Vec<u8>,
    loss_log: Vec<u8>,
    held_pngs: Vec<Vec<u8>>,
    held_ssim: Vec<f64>,
    stn_pre: Vec<(String, Vec<u8>)>,
    stn_final: Vec<(String, Vec<u8>)>,
    train_secs: f64,
    fresh_pass_count: u64,
}

/// Raw tensor-file bytes of every warp-module parameter in a checkpoint.
fn stn_bytes(model_dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let (_, names) = nets::read_manifest(model_dir).map_err(es)?;
    let mut out = Vec::new();
    for name in names.iter().filter(|n| nets::is_stn_param(n)) {
        let path = model_dir.join(format!("{name}.tns"));
        out.push((name.clone(), fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?));
    }
    if out.is_empty() {
        return Err("checkpoint holds no warp-module tensors".into());
    }
    Ok(out)
}

/// One complete experiment: warp pretraining, cycle training resumed from
/// it, held-out self-try-on inference, then checkpoint cleanup. Matches
/// the standard two-phase procedure while exposing the intermediate state
/// the criteria inspect.
fn full_run(fx: &Fixture, config: &TrainConfig, dir: &Path) -> Result<RunArtifacts, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let t0 = Instant::now();

    let mut warm = config.clone();
    warm.epochs = 0;
    let pre_dir = dir.join("warmup");
    let s1 = train::train(&fx.train_set, &warm, &pre_dir, None, None).map_err(es)?;
    println!(
        "[acceptance]   pretraining: {} iterations in {:.0} s",
        s1.pretrain_reports.len(),
        t0.elapsed().as_secs_f64()
    );

    let cyc_dir = dir.join("cycle");
    let t1 = Instant::now();
    let s2 = train::train(&fx.train_set, config, &cyc_dir, Some(&s1.checkpoint), None)
        .map_err(es)?;
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "[acceptance]   cycle training: {} iterations in {:.0} s",
        s2.reports.len(),
        t1.elapsed().as_secs_f64()
    );

    let stn_pre = stn_bytes(&s1.checkpoint.join("model"))?;
    let stn_final = stn_bytes(&s2.checkpoint.join("model"))?;

    // Fresh load: the pass counter must read exactly 1 after one try-on.
    let mut loaded = infer::load_generator(&s2.checkpoint).map_err(es)?;
    let probe = &fx.held[0];
    infer::try_on(&mut loaded, &probe.person, &probe.parse, &probe.clothes, &probe.descriptor)
        .map_err(es)?;
    let fresh_pass_count = loaded.generator.passes();

    // Held-out self-try-on: each person re-wears their own garment.
    let out_dir = dir.join("held");
    fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
    let mut held_pngs = Vec::new();
    let mut held_ssim = Vec::new();
    for (i, s) in fx.held.iter().enumerate() {
        let r = infer::try_on(&mut loaded, &s.person, &s.parse, &s.clothes, &s.descriptor)
            .map_err(es)?;
        let path = out_dir.join(format!("{i:03}.png"));
        data::save_rgb_png(&path, &r.image).map_err(es)?;
        held_pngs.push(fs::read(&path).map_err(|e| e.to_string())?);
        held_ssim.push(ssim(&r.image, &s.person).map_err(es)?);
    }

    let pretrain_log = fs::read(pre_dir.join("pretrain_log.csv")).map_err(|e| e.to_string())?;
    let loss_log = fs::read(cyc_dir.join("loss_log.csv")).map_err(|e| e.to_string())?;

    // Each checkpoint holds ~0.7 GB of weights and moments; drop them
    // before the next run.
    let _ = fs::remove_dir_all(&s1.checkpoint);
    let _ = fs::remove_dir_all(&s2.checkpoint);

    Ok(RunArtifacts {
        reports: s2.reports,
        pretrain_log,
        loss_log,
        held_pngs,
        held_ssim,
        stn_pre,
        stn_final,
        train_secs,
        fresh_pass_count,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_4(art: &RunArtifacts) -> Outcome {
    if art.reports.is_empty() {
        return Err("no logged training steps".into());
    }
    for r in &art.reports {
        let composite = r.adv + 10.0 * (r.cyc + r.vgg + r.pre);
        let err = (r.total - composite).abs();
        if err >= 1e-6 {
            return Err(format!(
                "iteration {}: |total - (adv + 10(cyc+vgg+pre))| = {err:.3e} >= 1e-6",
                r.iteration
            ));
        }
    }
    Ok(format!(
        "all {} logged steps satisfy total = adv + 10·(cyc+vgg+pre) within 1e-6",
        art.reports.len()
    ))
}

fn criterion_5(art: &RunArtifacts) -> Outcome {
    let per_epoch = 180 / 4;
    if art.reports.len() != per_epoch * 10 {
        return Err(format!(
            "expected {} cycle iterations (10 epochs x {per_epoch}), got {}",
            per_epoch * 10,
            art.reports.len()
        ));
    }
    let epoch_mean = |e: usize| {
        let rows = &art.reports[e * per_epoch..(e + 1) * per_epoch];
        rows.iter().map(|r| r.cyc).sum::<f64>() / per_epoch as f64
    };
    let first = epoch_mean(0);
    let last = epoch_mean(9);
    let ssim_mean = mean(&art.held_ssim);
    let minutes = art.train_secs / 60.0;
    if !(last <= 0.5 * first) {
        return Err(format!(
            "epoch-mean cycle loss fell only {first:.4} -> {last:.4} ({:.0}%), needs >= 50%",
            100.0 * (1.0 - last / first)
        ));
    }
    if !(ssim_mean >= 0.8) {
        return Err(format!(
            "held-out self-try-on SSIM {ssim_mean:.4} < 0.8 (min {:.4})",
            art.held_ssim.iter().cloned().fold(f64::INFINITY, f64::min)
        ));
    }
    if !(minutes <= 30.0) {
        return Err(format!("training took {minutes:.1} min, budget is 30 min"));
    }
    Ok(format!(
        "cycle loss {first:.4} -> {last:.4} (-{:.0}%), held-out SSIM {ssim_mean:.4}, {minutes:.1} min",
        100.0 * (1.0 - last / first)
    ))
}

fn criterion_6(art: &RunArtifacts) -> Outcome {
    if art.stn_pre.len() != art.stn_final.len() {
        return Err(format!(
            "warp-module tensor count changed: {} -> {}",
            art.stn_pre.len(),
            art.stn_final.len()
        ));
    }
    for ((n1, b1), (n2, b2)) in art.stn_pre.iter().zip(&art.stn_final) {
        if n1 != n2 {
            return Err(format!("tensor sets differ: {n1} vs {n2}"));
        }
        if b1 != b2 {
            return Err(format!("warp-module tensor {n1} changed during cycle training"));
        }
    }
    if art.fresh_pass_count != 1 {
        return Err(format!(
            "inference on a fresh load counted {} generator passes, expected 1",
            art.fresh_pass_count
        ));
    }
    Ok(format!(
        "{} warp-module tensors bit-identical through cycle training; single-pass inference",
        art.stn_pre.len()
    ))
}

fn criterion_8(
    canonical: &Result<RunArtifacts, String>,
    no_skin: &Result<RunArtifacts, String>,
    no_reg: &Result<RunArtifacts, String>,
) -> Outcome {
    let base = canonical.as_ref().map_err(|e| format!("canonical run failed: {e}"))?;
    let a = no_skin.as_ref().map_err(|e| format!("no-skin-encoder run failed: {e}"))?;
    let b = no_reg.as_ref().map_err(|e| format!("no-stn-reg run failed: {e}"))?;
    let full = mean(&base.held_ssim);
    let skin = mean(&a.held_ssim);
    let reg = mean(&b.held_ssim);
    if !(skin < full) {
        return Err(format!(
            "no-skin-encoder SSIM {skin:.4} is not strictly below the full model's {full:.4}"
        ));
    }
    if !(reg < full) {
        return Err(format!(
            "no-stn-reg SSIM {reg:.4} is not strictly below the full model's {full:.4}"
        ));
    }
    Ok(format!(
        "held-out SSIM: full {full:.4} > no-skin-encoder {skin:.4}, no-stn-reg {reg:.4}"
    ))
}

fn criterion_9(a: &RunArtifacts, b: &RunArtifacts) -> Outcome {
    if a.pretrain_log != b.pretrain_log {
        return Err("pretraining logs differ between identically seeded runs".into());
    }
    if a.loss_log != b.loss_log {
        return Err("cycle loss logs differ between identically seeded runs".into());
    }
    if a.held_pngs.len() != b.held_pngs.len() {
        return Err(format!(
            "output image counts differ: {} vs {}",
            a.held_pngs.len(),
            b.held_pngs.len()
        ));
    }
    for (i, (pa, pb)) in a.held_pngs.iter().zip(&b.held_pngs).enumerate() {
        if pa != pb {
            return Err(format!("output image {i} differs byte-wise between runs"));
        }
    }
    Ok(format!(
        "both runs: identical logs ({} B + {} B) and {} identical output images",
        a.pretrain_log.len(),
        a.loss_log.len(),
        a.held_pngs.len()
    ))
}

fn run_training_criteria(results: &mut [Option<Outcome>]) {
    let fixture = match build_fixture() {
        Ok(f) => f,
        Err(e) => {
            for idx in [3, 4, 5, 7, 8] {
                results[idx] = Some(Err(format!("dataset generation failed: {e}")));
            }
            return;
        }
    };
    let guarded_run = |config: &TrainConfig, dir: &Path| -> Result<RunArtifacts, String> {
        match catch_unwind(AssertUnwindSafe(|| full_run(&fixture, config, dir))) {
            Ok(r) => r,
            Err(p) => Err(format!("panicked: {}", panic_message(&p))),
        }
    };

    println!("[acceptance] canonical run: 200 samples at 64x48, 10 epochs, batch 4, seed 0...");
    let canonical = guarded_run(&TrainConfig::default(), &fixture.root.join("canonical"));
    match &canonical {
        Ok(art) => {
            results[3] = Some(guard(|| criterion_4(art)));
            results[4] = Some(guard(|| criterion_5(art)));
            results[5] = Some(guard(|| criterion_6(art)));
        }
        Err(e) => {
            for idx in [3, 4, 5] {
                results[idx] = Some(Err(format!("canonical run failed: {e}")));
            }
        }
    }

    println!("[acceptance] identically seeded rerun for determinism...");
    let rerun = guarded_run(&TrainConfig::default(), &fixture.root.join("rerun"));
    results[8] = Some(match (&canonical, &rerun) {
        (Ok(a), Ok(b)) => guard(|| criterion_9(a, b)),
        (Err(e), _) => Err(format!("canonical run failed: {e}")),
        (_, Err(e)) => Err(format!("rerun failed: {e}")),
    });
    drop(rerun);

    println!("[acceptance] ablation run: skin pyramid encoder disabled...");
    let no_skin = guarded_run(
        &TrainConfig { ablate_skin_encoder: true, ..TrainConfig::default() },
        &fixture.root.join("no_skin"),
    );
    println!("[acceptance] ablation run: transform-consistency regularizer disabled...");
    let no_reg = guarded_run(
        &TrainConfig { ablate_stn_reg: true, ..TrainConfig::default() },
        &fixture.root.join("no_reg"),
    );
    results[7] = Some(guard(|| criterion_8(&canonical, &no_skin, &no_reg)));
}
