//! Acceptance suite: one pass/fail line per criterion. Criteria 6-9 share
//! one trained pipeline and therefore run inside a single test.

mod common;

use std::time::Instant;

use common::{random_weights, transport_lp};
use contraseg::boundary::{
    beacon_loss, in_out_div, seg_loss, sign_fn, BeaconConfig, ClassMap, TauPolicy,
};
use contraseg::encoder::{
    background_map, encoder_forward, frozen_vars, sam_forward, EncoderConfig, EncoderParams,
    SamVars,
};
use contraseg::losses::{
    hcl_loss, imc_loss, pixc_loss, prc_loss, sinkhorn_emd, CropPair, ImcConfig, PairMask,
    PixcBranches, Rect, SinkhornConfig,
};
use contraseg::pipeline::train::{pair_training_scenes, predict_class_map};
use contraseg::pipeline::{
    evaluate_boundary_f, evaluate_miou, export_pseudo_masks, generate_dataset, train_decoder,
    train_encoder, DecoderConfig, LossFlags, SyntheticScene, TrainConfig,
};
use contraseg::tensor::{
    gradcheck, gradcheck_skip, Graph, GradCheck, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pass(criterion: &str, detail: &str) {
    println!("[PASS] {criterion}: {detail}");
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng).with_grad()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    for v in t.data_mut() {
        *v = v.abs() + 0.4;
    }
    t
}

// ── criterion 1: gradient integrity ──────────────────────────────────

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> contraseg::tensor::Result<Var>>;
type InputGen = Box<dyn Fn(u64) -> Vec<Tensor>>;

fn probe(g: &mut Graph, v: Var, seed: u64) -> contraseg::tensor::Result<Var> {
    // random linear functional so every output element is exercised
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = Tensor::randn(&shape, 1.0, &mut rng);
    let c = g.constant(&w);
    let p = g.mul(v, c)?;
    Ok(g.sum_all(p))
}

fn tensor_op_cases() -> Vec<(&'static str, InputGen, Builder)> {
    let mut cases: Vec<(&'static str, InputGen, Builder)> = Vec::new();
    macro_rules! case {
        ($name:literal, $gen:expr, $build:expr) => {
            cases.push(($name, Box::new($gen), Box::new($build)));
        };
    }
    case!(
        "add",
        |s| vec![randn(&[3, 4], s), randn(&[3, 4], s + 50)],
        |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 1)
        }
    );
    case!(
        "sub",
        |s| vec![randn(&[2, 5], s), randn(&[2, 5], s + 50)],
        |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y, 2)
        }
    );
    case!(
        "mul",
        |s| vec![randn(&[4, 3], s), randn(&[4, 3], s + 50)],
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, 3)
        }
    );
    case!(
        "div",
        |s| vec![randn(&[3, 3], s), positive(&[3, 3], s + 50)],
        |g, v| {
            let y = g.div(v[0], v[1])?;
            probe(g, y, 4)
        }
    );
    case!(
        "add_scalar/mul_scalar",
        |s| vec![randn(&[2, 6], s)],
        |g, v| {
            let y = g.add_scalar(v[0], 0.7);
            let y = g.mul_scalar(y, -1.3);
            probe(g, y, 5)
        }
    );
    case!("exp", |s| vec![randn(&[3, 4], s)], |g, v| {
        let y = g.exp(v[0]);
        probe(g, y, 6)
    });
    case!("log", |s| vec![positive(&[3, 4], s)], |g, v| {
        let y = g.log(v[0]);
        probe(g, y, 7)
    });
    case!("sqrt", |s| vec![positive(&[4, 2], s)], |g, v| {
        let y = g.sqrt(v[0]);
        probe(g, y, 8)
    });
    case!("relu", |s| vec![randn(&[5, 3], s)], |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 9)
    });
    case!("leaky_relu", |s| vec![randn(&[5, 3], s)], |g, v| {
        let y = g.leaky_relu(v[0], 0.1);
        probe(g, y, 19)
    });
    case!("sigmoid", |s| vec![randn(&[3, 5], s)], |g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 10)
    });
    case!("powf", |s| vec![positive(&[3, 3], s)], |g, v| {
        let y = g.powf(v[0], 1.7);
        probe(g, y, 11)
    });
    case!("clamp_min", |s| vec![randn(&[4, 4], s)], |g, v| {
        let y = g.clamp_min(v[0], 0.25);
        probe(g, y, 12)
    });
    case!(
        "matmul",
        |s| vec![randn(&[3, 4], s), randn(&[4, 2], s + 50)],
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 13)
        }
    );
    case!("transpose", |s| vec![randn(&[3, 5], s)], |g, v| {
        let y = g.transpose(v[0])?;
        probe(g, y, 14)
    });
    case!("reshape", |s| vec![randn(&[2, 6], s)], |g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        probe(g, y, 15)
    });
    case!(
        "concat",
        |s| vec![randn(&[2, 3], s), randn(&[2, 3], s + 50)],
        |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            probe(g, y, 16)
        }
    );
    case!("softmax", |s| vec![randn(&[3, 4], s)], |g, v| {
        let y = g.softmax(v[0], 1)?;
        probe(g, y, 17)
    });
    case!("sum_axis", |s| vec![randn(&[3, 4, 2], s)], |g, v| {
        let y = g.sum_axis(v[0], 1)?;
        probe(g, y, 18)
    });
    case!("mean_axis", |s| vec![randn(&[2, 5, 2], s)], |g, v| {
        let y = g.mean_axis(v[0], 2)?;
        probe(g, y, 20)
    });
    case!("max_axis", |s| vec![randn(&[3, 4], s)], |g, v| {
        let y = g.max_axis(v[0], 0)?;
        probe(g, y, 21)
    });
    case!("sum_all/mean_all", |s| vec![randn(&[3, 4], s)], |g, v| {
        let a = g.sum_all(v[0]);
        let b = g.mean_all(v[0]);
        g.add(a, b)
    });
    case!("avg_pool2d", |s| vec![randn(&[2, 6, 6], s)], |g, v| {
        let y = g.avg_pool2d(v[0], 2, 2)?;
        probe(g, y, 22)
    });
    case!(
        "resize_bilinear",
        |s| vec![randn(&[2, 5, 4], s)],
        |g, v| {
            let y = g.resize_bilinear(v[0], 8, 6)?;
            probe(g, y, 23)
        }
    );
    case!(
        "conv2d",
        |s| vec![randn(&[1, 2, 6, 5], s), randn(&[3, 2, 3, 3], s + 50)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            probe(g, y, 24)
        }
    );
    case!(
        "gather_spatial",
        |s| vec![randn(&[3, 5, 5], s)],
        |g, v| {
            let y = g.gather_spatial(v[0], &[(0, 0), (4, 4), (2, 3), (2, 3)])?;
            probe(g, y, 25)
        }
    );
    case!(
        "crop_spatial",
        |s| vec![randn(&[2, 6, 6], s)],
        |g, v| {
            let y = g.crop_spatial(v[0], 1, 2, 3, 4)?;
            probe(g, y, 26)
        }
    );
    case!(
        "cosine_similarity",
        |s| vec![randn(&[6], s), randn(&[6], s + 50)],
        |g, v| g.cosine_similarity(v[0], v[1], 1e-8)
    );
    case!(
        "l2_normalize_rows",
        |s| vec![randn(&[4, 3], s)],
        |g, v| {
            let y = g.l2_normalize_rows(v[0], 1e-8)?;
            probe(g, y, 27)
        }
    );
    case!(
        "cosine_matrix",
        |s| vec![randn(&[3, 4], s), randn(&[2, 4], s + 50)],
        |g, v| {
            let y = g.cosine_matrix(v[0], v[1], 1e-8)?;
            probe(g, y, 28)
        }
    );
    case!("logsumexp_axis", |s| vec![randn(&[3, 4], s)], |g, v| {
        let y = g.logsumexp_axis(v[0], 1)?;
        probe(g, y, 29)
    });
    cases
}

fn wrap<E: std::fmt::Display>(e: E) -> TensorError {
    TensorError::Invalid {
        op: "acceptance",
        msg: e.to_string(),
    }
}

#[test]
fn c01_gradient_integrity() {
    let started = Instant::now();
    let cfg = GradCheck::default(); // h = 1e-5, rel tol 1e-4

    for (name, gen, build) in tensor_op_cases() {
        for instance in 0..3 {
            let inputs = gen(1000 + instance * 97);
            gradcheck(&build, &inputs, &cfg)
                .unwrap_or_else(|e| panic!("{name} instance {instance}: {e}"));
        }
    }

    // sam_forward and background_map
    for instance in 0..3u64 {
        let m = randn(&[2, 3, 3], 2000 + instance);
        let g1 = randn(&[2, 2], 2100 + instance);
        let g2 = randn(&[2, 2], 2200 + instance);
        let g3 = randn(&[2, 2], 2300 + instance);
        gradcheck(
            |g, v| {
                let sv = SamVars {
                    g1: v[1],
                    g2: v[2],
                    g3: v[3],
                };
                let y = sam_forward(g, v[0], &sv, instance % 2 == 0).map_err(wrap)?;
                probe(g, y, 31)
            },
            &[m, g1, g2, g3],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("sam_forward instance {instance}: {e}"));

        let cam = randn(&[3, 3, 4], 2400 + instance);
        gradcheck(
            |g, v| {
                let y = background_map(g, v[0]).map_err(wrap)?;
                probe(g, y, 32)
            },
            &[cam],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("background_map instance {instance}: {e}"));
    }

    // imc
    for instance in 0..3u64 {
        let emb = randn(&[4, 5], 2500 + instance);
        let labels = Tensor::new(
            &[4, 3],
            vec![
                1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let mask = PairMask::from_labels(&labels).unwrap();
        gradcheck(
            |g, v| {
                let out = imc_loss(g, v[0], &mask, &ImcConfig::default()).map_err(wrap)?;
                Ok(out.loss)
            },
            &[emb],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("imc instance {instance}: {e}"));
    }

    // hcl
    for instance in 0..3u64 {
        let logits = randn(&[2, 4], 2600 + instance);
        let labels = Tensor::new(&[2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        gradcheck(
            |g, v| {
                let out = hcl_loss(g, v[0], &labels, 2.0).map_err(wrap)?;
                Ok(out.total)
            },
            &[logits],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("hcl instance {instance}: {e}"));
    }

    // pixc against its online branches (targets are stop-gradient)
    let pair = CropPair {
        rect_a: Rect { top: 0, left: 0, height: 32, width: 32 },
        rect_b: Rect { top: 8, left: 8, height: 32, width: 32 },
    };
    for instance in 0..3u64 {
        let sam_a = randn(&[3, 4, 4], 2700 + instance);
        let sam_b = randn(&[3, 4, 4], 2800 + instance);
        let raw_a = randn(&[3, 4, 4], 2900 + instance);
        let raw_b = randn(&[3, 4, 4], 3000 + instance);
        gradcheck(
            |g, v| {
                let branches = PixcBranches {
                    sam_a: v[0],
                    raw_a: g.constant(&raw_a),
                    sam_b: v[1],
                    raw_b: g.constant(&raw_b),
                };
                let out = pixc_loss(g, &branches, &pair, 8, 1e-8).map_err(wrap)?;
                Ok(out.loss)
            },
            &[sam_a.clone(), sam_b.clone()],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("pixc instance {instance}: {e}"));
    }

    // prc against the static branch; fixed-iteration transport for smoothness
    let sk = SinkhornConfig {
        epsilon: 0.05,
        max_iters: 100,
        tolerance: 0.0,
    };
    for instance in 0..3u64 {
        let smap = positive(&[3, 2, 2], 3100 + instance);
        let dmap = positive(&[3, 2, 2], 3200 + instance);
        let rects = vec![Rect { top: 0, left: 0, height: 2, width: 2 }];
        gradcheck(
            |g, v| {
                let d = g.constant(&dmap);
                let out = prc_loss(g, v[0], d, (1, 1), &rects, &sk, 1e-8).map_err(wrap)?;
                Ok(out.loss)
            },
            &[smap],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("prc instance {instance}: {e}"));
    }

    // beacon against the outward dense features
    for instance in 0..3u64 {
        let din = positive(&[6, 5], 3300 + instance);
        let dout = positive(&[6, 5], 3400 + instance);
        let min = positive(&[6, 5], 3500 + instance);
        let mout = positive(&[6, 5], 3600 + instance);
        gradcheck(
            |g, v| {
                let di = g.constant(&din);
                let out = beacon_loss(g, di, v[0], &min, &mout, TauPolicy::MaskMean, 1e-8)
                    .map_err(wrap)?;
                Ok(out.loss)
            },
            &[dout],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("beacon instance {instance}: {e}"));
    }

    // seg loss: probe everywhere except the stop-gradient inward anchors
    for instance in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3700 + instance);
        let mut dense = Tensor::randn(&[2, 8, 8], 0.2, &mut rng);
        for r in 0..8 {
            for c in 0..8 {
                let ch = usize::from(c >= 4);
                dense.data_mut()[ch * 64 + r * 8 + c] += 2.0;
            }
        }
        let dense = dense.with_grad();
        let pm = {
            let mut t = Tensor::zeros(&[2, 8, 8]);
            for i in 0..64 {
                let p = 0.3 + 0.4 * rng.random::<f64>();
                t.data_mut()[i] = p;
                t.data_mut()[64 + i] = 1.0 - p;
            }
            t
        };
        let bc = BeaconConfig {
            lambda: 0.05,
            steps: 2,
            k: 6,
            tau: TauPolicy::MaskMean,
            inward_along_gradient: true,
        };
        let build = |g: &mut Graph, v: &[Var]| {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + instance);
            let out = seg_loss(g, v[0], &pm, &bc, &mut rng).map_err(wrap)?;
            Ok(out.total)
        };
        let inward = {
            let mut g = Graph::new();
            let d = g.constant(&dense);
            let mut rng = ChaCha8Rng::seed_from_u64(40 + instance);
            let out = seg_loss(&mut g, d, &pm, &bc, &mut rng).unwrap();
            out.sets.expect("boundary exists").inward
        };
        gradcheck_skip(build, &[dense], &cfg, |_, ei| {
            let pixel = ei % 64;
            inward.contains(&(pixel / 8, pixel % 8))
        })
        .unwrap_or_else(|e| panic!("seg instance {instance}: {e}"));
    }

    // encoder forward (logits w.r.t. the input image)
    let enc_cfg = EncoderConfig {
        widths: vec![4, 6],
        strides: vec![2, 1],
        num_foreground_classes: 3,
        input_size: (8, 8),
        sam_residual: false,
    };
    for instance in 0..3u64 {
        let params = EncoderParams::init(
            &enc_cfg,
            &mut ChaCha8Rng::seed_from_u64(3800 + instance),
        )
        .unwrap();
        let image = randn(&[3, 8, 8], 3900 + instance);
        gradcheck(
            |g, v| {
                let pv = frozen_vars(g, &params);
                let out = encoder_forward(g, v[0], &pv, &enc_cfg).map_err(wrap)?;
                probe(g, out.logits, 33)
            },
            &[image],
            &cfg,
        )
        .unwrap_or_else(|e| panic!("encoder instance {instance}: {e}"));
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 120,
        "criterion 1 must finish within 2 minutes, took {elapsed:?}"
    );
    pass(
        "criterion 1 (gradient integrity)",
        &format!("all ops match central finite differences at rel 1e-4, {elapsed:.2?}"),
    );
}

// ── criterion 2: transport oracle ────────────────────────────────────

#[test]
fn c02_transport_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_000);
    let cfg = SinkhornConfig {
        epsilon: 0.01,
        max_iters: 20_000,
        tolerance: 1e-10,
    };
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let m = rng.random_range(1..=5);
        let n = rng.random_range(1..=5);
        let cost: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>()).collect();
        let a = random_weights(m, &mut rng);
        let b = random_weights(n, &mut rng);
        let (_, lp) = transport_lp(&cost, &a, &b);
        let mut g = Graph::new();
        let c = g.constant(&Tensor::new(&[m, n], cost).unwrap());
        let r = sinkhorn_emd(&mut g, c, &a, &b, &cfg).unwrap();
        let rel = (g.item(r.cost) - lp).abs() / lp.max(1e-9);
        worst = worst.max(rel);
        assert!(rel < 0.02, "trial {trial}: relative gap {rel:.4} >= 2%");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 2 exceeded 30 s: {elapsed:?}");
    pass(
        "criterion 2 (transport oracle)",
        &format!("50 problems within 2% of the exact LP (worst {worst:.4}), {elapsed:.2?}"),
    );
}

// ── criterion 3: sign truth table ────────────────────────────────────

#[test]
fn c03_sign_truth_table() {
    let mat = |v: f64| Tensor::full(&[1, 1], v);
    let mut checked = 0;
    for &(mask_i, expect_i) in &[(0.1, 1.0), (0.9, -1.0)] {
        for &dense_i in &[0.1, 0.9] {
            for &(mask_o, expect_o) in &[(0.1, 1.0), (0.9, -1.0)] {
                for &dense_o in &[0.1, 0.9] {
                    let ri = sign_fn(&mat(mask_i), &mat(dense_i), TauPolicy::Fixed(0.5)).unwrap();
                    let ro = sign_fn(&mat(mask_o), &mat(dense_o), TauPolicy::Fixed(0.5)).unwrap();
                    assert_eq!(ri.sign_inward[0], expect_i);
                    assert_eq!(ro.sign_outward[0], expect_o);
                    let c = ri.inward_counts;
                    let hit = match (mask_i >= 0.5, dense_i >= 0.5) {
                        (true, true) => c.tn,
                        (true, false) => c.fp,
                        (false, true) => c.fn_,
                        (false, false) => c.tp,
                    };
                    assert_eq!(hit, 1, "wrong case classification");
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 16);
    pass(
        "criterion 3 (sign truth table)",
        "all 16 mean combinations classify and sign correctly",
    );
}

// ── criterion 4: boundary geometry ───────────────────────────────────

#[test]
fn c04_boundary_geometry() {
    // half plane: exact mirror placement
    let mut data = vec![0u8; 64];
    for r in 0..8 {
        for c in 4..8 {
            data[r * 8 + c] = 1;
        }
    }
    let seg = ClassMap::new(8, 8, data).unwrap();
    let (phi, psi) = in_out_div(&seg, 3, true);
    assert!(!phi.is_empty() && phi.len() == psi.len());
    for (&(ir, ic), &(or_, oc)) in phi.iter().zip(&psi) {
        assert_eq!(ir, or_);
        assert_eq!(ic - oc, 6, "inward and outward mirror at distance steps");
        assert_eq!(seg.at(ir, ic), 1);
        assert_eq!(seg.at(or_, oc), 0);
    }

    // disk, steps 7, radius 20: at least 90% correct membership
    let mut data = vec![0u8; 64 * 64];
    for r in 0..64 {
        for c in 0..64 {
            let dy = r as f64 - 31.5;
            let dx = c as f64 - 31.5;
            if dy * dy + dx * dx <= 400.0 {
                data[r * 64 + c] = 1;
            }
        }
    }
    let seg = ClassMap::new(64, 64, data).unwrap();
    let (phi, psi) = in_out_div(&seg, 7, true);
    let inside = |&(r, c): &(usize, usize)| {
        let dy = r as f64 - 31.5;
        let dx = c as f64 - 31.5;
        dy * dy + dx * dx <= 400.0
    };
    let in_frac = phi.iter().filter(|p| inside(p)).count() as f64 / phi.len() as f64;
    let out_frac = psi.iter().filter(|p| !inside(p)).count() as f64 / psi.len() as f64;
    assert!(in_frac >= 0.9, "inward membership {in_frac:.3}");
    assert!(out_frac >= 0.9, "outward membership {out_frac:.3}");
    pass(
        "criterion 4 (boundary geometry)",
        &format!("half-plane mirror exact; disk membership inward {in_frac:.2} outward {out_frac:.2}"),
    );
}

// ── criterion 5: stop-gradient contracts ─────────────────────────────

#[test]
fn c05_stop_gradient_contracts() {
    // pixel contrast: raw-branch gradients are identically absent
    let mut rng = ChaCha8Rng::seed_from_u64(50_000);
    let mk = |rng: &mut ChaCha8Rng| Tensor::randn(&[3, 4, 4], 1.0, rng).with_grad();
    let (sa, ra, sb, rb) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let pair = CropPair {
        rect_a: Rect { top: 0, left: 0, height: 32, width: 32 },
        rect_b: Rect { top: 8, left: 8, height: 32, width: 32 },
    };
    let mut g = Graph::new();
    let branches = PixcBranches {
        sam_a: g.leaf(&sa),
        raw_a: g.leaf(&ra),
        sam_b: g.leaf(&sb),
        raw_b: g.leaf(&rb),
    };
    let out = pixc_loss(&mut g, &branches, &pair, 8, 1e-8).unwrap();
    g.backward(out.loss).unwrap();
    assert!(g.grad(branches.raw_a).is_none());
    assert!(g.grad(branches.raw_b).is_none());
    assert!(g.grad(branches.sam_a).is_some());

    // regional contrast: the dynamic branch is severed
    let smap = positive(&[3, 2, 2], 51_000);
    let dmap = positive(&[3, 2, 2], 52_000);
    let sk = SinkhornConfig {
        epsilon: 0.05,
        max_iters: 50,
        tolerance: 0.0,
    };
    let mut g = Graph::new();
    let s = g.leaf(&smap);
    let d = g.leaf(&dmap);
    let out = prc_loss(
        &mut g,
        s,
        d,
        (1, 1),
        &[Rect { top: 0, left: 0, height: 2, width: 2 }],
        &sk,
        1e-8,
    )
    .unwrap();
    g.backward(out.loss).unwrap();
    assert!(g.grad(s).is_some());
    assert!(g.grad(d).is_none());

    // boundary contrast: inward dense side severed, mask side plain values
    let din = positive(&[5, 4], 53_000);
    let dout = positive(&[5, 4], 54_000);
    let min = positive(&[5, 4], 55_000);
    let mout = positive(&[5, 4], 56_000);
    let mut g = Graph::new();
    let di = g.leaf(&din);
    let do_ = g.leaf(&dout);
    let out = beacon_loss(&mut g, di, do_, &min, &mout, TauPolicy::MaskMean, 1e-8).unwrap();
    g.backward(out.loss).unwrap();
    assert!(g.grad(di).is_none());
    assert!(g.grad(do_).is_some());

    // the canonical severed product: d/dx x*sg(x) = x, not 2x
    let x = Tensor::new(&[1], vec![3.0]).unwrap().with_grad();
    let mut g = Graph::new();
    let v = g.leaf(&x);
    let sg = g.stop_gradient(v);
    let y = g.mul(v, sg).unwrap();
    let y = g.sum_all(y);
    g.backward(y).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[3.0]);

    pass(
        "criterion 5 (stop-gradient contracts)",
        "pixc/prc/beacon severed branches receive exactly zero gradient",
    );
}

// ── criteria 6-9: trained-pipeline comparisons ───────────────────────

struct SeedOutcome {
    full_single: f64,
    full_multi: f64,
    hcl_single: f64,
    beacon_f: f64,
    beacon_miou: f64,
    baseline_f: f64,
    baseline_miou: f64,
}

fn pseudo_miou(params: &EncoderParams, scenes: &[SyntheticScene], scales: &[f64]) -> f64 {
    let masks = export_pseudo_masks(params, scenes, scales).unwrap();
    let preds: Vec<ClassMap> = masks.iter().map(|m| m.to_class_map()).collect();
    let gts: Vec<ClassMap> = scenes.iter().map(|s| s.gt_mask.clone()).collect();
    evaluate_miou(&preds, &gts, 5).unwrap().mean
}

fn run_seed(
    train: &[SyntheticScene],
    val: &[SyntheticScene],
    enc_cfg: &EncoderConfig,
    seed: u64,
) -> SeedOutcome {
    let base = TrainConfig {
        seed,
        encoder_steps: 2000,
        decoder_steps: 400,
        ..TrainConfig::default()
    };

    let enc_started = Instant::now();
    let (full_params, _) = train_encoder(train, enc_cfg, &base).unwrap();
    let hcl_cfg = TrainConfig {
        flags: LossFlags {
            imc: false,
            pixc: false,
            prc: false,
        },
        ..base.clone()
    };
    let (hcl_params, _) = train_encoder(train, enc_cfg, &hcl_cfg).unwrap();
    let enc_elapsed = enc_started.elapsed();
    assert!(
        enc_elapsed.as_secs() < 20 * 60,
        "seed {seed}: encoder phase exceeded 20 minutes ({enc_elapsed:?})"
    );

    let full_single = pseudo_miou(&full_params, train, &[1.0]);
    let full_multi = pseudo_miou(&full_params, train, &base.scales);
    let hcl_single = pseudo_miou(&hcl_params, train, &[1.0]);

    // stage 2 on the full-model masks
    let masks = export_pseudo_masks(&full_params, train, &base.scales).unwrap();
    let training = pair_training_scenes(train, &masks).unwrap();
    let dec_started = Instant::now();
    let beacon_best = BeaconConfig {
        lambda: 0.05,
        steps: 7,
        k: 128,
        tau: TauPolicy::MaskMean,
        inward_along_gradient: true,
    };
    let (enc_on, dec_on, _) = train_decoder(
        &training,
        &full_params,
        &DecoderConfig::default(),
        &beacon_best,
        &base,
        None,
    )
    .unwrap();
    let baseline = BeaconConfig {
        lambda: 0.0,
        ..beacon_best
    };
    let (enc_off, dec_off, _) = train_decoder(
        &training,
        &full_params,
        &DecoderConfig::default(),
        &baseline,
        &base,
        None,
    )
    .unwrap();
    let dec_elapsed = dec_started.elapsed();
    assert!(
        dec_elapsed.as_secs() < 15 * 60,
        "seed {seed}: decoder phase exceeded 15 minutes ({dec_elapsed:?})"
    );

    let eval_pair = |enc: &EncoderParams, dec| {
        let preds: Vec<ClassMap> = val
            .iter()
            .map(|s| predict_class_map(enc, dec, &s.image).unwrap())
            .collect();
        let gts: Vec<ClassMap> = val.iter().map(|s| s.gt_mask.clone()).collect();
        let miou = evaluate_miou(&preds, &gts, 5).unwrap().mean;
        let f = evaluate_boundary_f(&preds, &gts, 2).unwrap().f_score;
        (miou, f)
    };
    let (beacon_miou, beacon_f) = eval_pair(&enc_on, &dec_on);
    let (baseline_miou, baseline_f) = eval_pair(&enc_off, &dec_off);

    SeedOutcome {
        full_single,
        full_multi,
        hcl_single,
        beacon_f,
        beacon_miou,
        baseline_f,
        baseline_miou,
    }
}

#[test]
fn c06_to_c09_trained_pipeline() {
    let scenes = generate_dataset(500, 4242);
    let split = 400;
    let (train, val) = scenes.split_at(split);
    let enc_cfg = EncoderConfig::default();

    let seeds = [101u64, 102, 103];
    let outcomes: Vec<SeedOutcome> = seeds
        .iter()
        .map(|&s| run_seed(train, val, &enc_cfg, s))
        .collect();

    let mean = |f: &dyn Fn(&SeedOutcome) -> f64| -> f64 {
        outcomes.iter().map(|o| f(o)).sum::<f64>() / outcomes.len() as f64
    };

    // criterion 6: full configuration beats classification-only by >= 2
    // absolute mIoU points on the single-scale pseudo masks
    let full_single = mean(&|o| o.full_single) * 100.0;
    let hcl_single = mean(&|o| o.hcl_single) * 100.0;
    let delta = full_single - hcl_single;
    assert!(
        delta >= 2.0,
        "criterion 6 FAILED: full {full_single:.2} vs hcl-only {hcl_single:.2} (delta {delta:.2} < 2.0)"
    );
    pass(
        "criterion 6 (contrast ablation direction)",
        &format!("full {full_single:.2} vs hcl-only {hcl_single:.2} mIoU, delta +{delta:.2} over 3 seeds"),
    );

    // criterion 7: multi-scale inference does not hurt pseudo-mask quality
    let full_multi = mean(&|o| o.full_multi) * 100.0;
    assert!(
        full_multi >= full_single,
        "criterion 7 FAILED: multi {full_multi:.2} < single {full_single:.2}"
    );
    pass(
        "criterion 7 (multi-scale direction)",
        &format!("multi {full_multi:.2} >= single {full_single:.2} mIoU over 3 seeds"),
    );

    // criterion 8: boundary term helps the boundary score without costing
    // more than 0.5 mIoU points
    let f_on = mean(&|o| o.beacon_f) * 100.0;
    let f_off = mean(&|o| o.baseline_f) * 100.0;
    let m_on = mean(&|o| o.beacon_miou) * 100.0;
    let m_off = mean(&|o| o.baseline_miou) * 100.0;
    assert!(
        f_on >= f_off,
        "criterion 8 FAILED: boundary F with {f_on:.2} < without {f_off:.2}"
    );
    assert!(
        m_on >= m_off - 0.5,
        "criterion 8 FAILED: val mIoU dropped by more than 0.5 ({m_on:.2} vs {m_off:.2})"
    );
    pass(
        "criterion 8 (boundary refinement direction)",
        &format!("boundary F {f_on:.2} >= {f_off:.2}; val mIoU {m_on:.2} vs {m_off:.2} over 3 seeds"),
    );

    // criterion 9: both threshold policies run to completion and report
    let base = TrainConfig {
        seed: seeds[0],
        encoder_steps: 2000,
        decoder_steps: 400,
        ..TrainConfig::default()
    };
    let (full_params, _) = train_encoder(train, &enc_cfg, &base).unwrap();
    let masks = export_pseudo_masks(&full_params, train, &base.scales).unwrap();
    let training = pair_training_scenes(train, &masks).unwrap();
    let mut tau_report = Vec::new();
    for (name, tau) in [("fixed:0.5", TauPolicy::Fixed(0.5)), ("mean", TauPolicy::MaskMean)] {
        let cfg = BeaconConfig {
            lambda: 0.05,
            steps: 7,
            k: 128,
            tau,
            inward_along_gradient: true,
        };
        let (e, d, records) = train_decoder(
            &training,
            &full_params,
            &DecoderConfig::default(),
            &cfg,
            &base,
            None,
        )
        .unwrap();
        assert!(records.iter().all(|r| r.total.is_finite()));
        let preds: Vec<ClassMap> = val
            .iter()
            .map(|s| predict_class_map(&e, &d, &s.image).unwrap())
            .collect();
        let gts: Vec<ClassMap> = val.iter().map(|s| s.gt_mask.clone()).collect();
        let miou = evaluate_miou(&preds, &gts, 5).unwrap().mean;
        assert!(miou.is_finite());
        tau_report.push(format!("tau {name}: val mIoU {:.2}", miou * 100.0));
    }
    pass(
        "criterion 9 (threshold policy comparison)",
        &tau_report.join("; "),
    );
}

// ── criterion 10: determinism ────────────────────────────────────────

#[test]
fn c10_determinism() {
    let scenes = generate_dataset(24, 777);
    let (train, val) = scenes.split_at(20);
    let enc_cfg = EncoderConfig {
        widths: vec![6, 8, 10, 12],
        strides: vec![2, 2, 2, 1],
        num_foreground_classes: 4,
        input_size: (64, 64),
        sam_residual: false,
    };
    let cfg = TrainConfig {
        seed: 5,
        encoder_steps: 8,
        decoder_steps: 8,
        batch_size: 3,
        threads: 1,
        ..TrainConfig::default()
    };

    let run = || -> String {
        let (enc, _) = train_encoder(train, &enc_cfg, &cfg).unwrap();
        let masks = export_pseudo_masks(&enc, train, &[1.0, 1.5]).unwrap();
        let training = pair_training_scenes(train, &masks).unwrap();
        let (e, d, _) = train_decoder(
            &training,
            &enc,
            &DecoderConfig::default(),
            &BeaconConfig {
                k: 16,
                steps: 3,
                ..BeaconConfig::default()
            },
            &cfg,
            None,
        )
        .unwrap();
        let preds: Vec<ClassMap> = val
            .iter()
            .map(|s| predict_class_map(&e, &d, &s.image).unwrap())
            .collect();
        let gts: Vec<ClassMap> = val.iter().map(|s| s.gt_mask.clone()).collect();
        let miou = evaluate_miou(&preds, &gts, 5).unwrap();
        let bf = evaluate_boundary_f(&preds, &gts, 2).unwrap();
        serde_json::to_string_pretty(&serde_json::json!({
            "miou": miou,
            "boundary_f": bf,
        }))
        .unwrap()
    };

    let a = run();
    let b = run();
    assert_eq!(a, b, "two single-threaded runs must produce identical metric reports");
    pass(
        "criterion 10 (determinism)",
        "identical manifests produce byte-identical metric JSON",
    );
}
