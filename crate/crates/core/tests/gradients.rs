use duet::autodiff::{
    finite_difference_check, pool, BackwardFault, Bindings, GradCheckOptions, GradCheckReport,
    ModelParams, PoolMode, Tape, Tensor, Var,
};
use duet::harness::{gradcheck_cmd, objective, random_batch, GradcheckConfig};
use duet::mac::{mac_loss, MacConfig};
use duet::model::{
    classify_heads, compose_st, compose_ts, compose_variant, init_params, ActorTensor, HeadVars,
    ModelConfig, PathKind, PathVars, PathVariant, SceneFusion,
};
use duet::relation::{
    mhsa_forward, register_unit, s_trans_forward, t_trans_forward, PositionEncoding, UnitDims,
    UnitVars,
};
use duet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// Contract a non-scalar output with fixed random weights so every output
// element contributes a distinct amount to the scalar. The 1/sqrt(n) scale
// keeps the scalar O(1): key biases have an identically zero gradient, and
// central-difference roundoff grows with the magnitude of the function.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let s = 1.0 / (w.numel() as f64).sqrt();
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    let total = tape.sum(p);
    Ok(tape.scale(total, s))
}

fn assert_passes(report: &GradCheckReport) {
    for t in &report.tensors {
        assert!(t.checked > 0, "{} was not checked", t.name);
    }
    assert!(
        report.passed(),
        "failures: {:?}",
        report.failures().map(|t| (&t.name, t.max_rel_err)).collect::<Vec<_>>()
    );
}

fn check<F>(params: &ModelParams, tolerance: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let opts = GradCheckOptions {
        tolerance,
        ..GradCheckOptions::default()
    };
    finite_difference_check(f, params, &opts).unwrap()
}

fn leaves(entries: &[(&str, &[usize])], seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    for (name, shape) in entries {
        p.insert(*name, random(shape, &mut rng)).unwrap();
    }
    p
}

#[test]
fn matmul_gradient() {
    let p = leaves(&[("a", &[4, 5]), ("b", &[5, 3])], 1);
    let r = check(&p, 1e-6, |t, b| {
        let y = t.matmul(b.get("a")?, b.get("b")?)?;
        project(t, y, 2)
    });
    assert_passes(&r);
}

#[test]
fn batched_transposed_matmul_gradient() {
    let p = leaves(&[("a", &[2, 3, 4]), ("b", &[2, 5, 4])], 3);
    let r = check(&p, 1e-6, |t, b| {
        let y = t.matmul_ext(b.get("a")?, b.get("b")?, true)?;
        project(t, y, 4)
    });
    assert_passes(&r);
}

#[test]
fn softmax_and_layer_norm_gradients() {
    let p = leaves(&[("x", &[3, 5]), ("g", &[5]), ("b", &[5])], 5);
    let r = check(&p, 1e-6, |t, b| {
        let y = t.softmax(b.get("x")?, 1)?;
        project(t, y, 6)
    });
    assert_passes(&r);
    let r = check(&p, 1e-6, |t, b| {
        let y = t.layer_norm(b.get("x")?, b.get("g")?, b.get("b")?, 1e-5)?;
        project(t, y, 7)
    });
    assert_passes(&r);
}

#[test]
fn pooling_and_cross_entropy_gradients() {
    let p = leaves(&[("x", &[2, 4, 3])], 8);
    let r = check(&p, 1e-6, |t, b| {
        let y = pool(t, b.get("x")?, 1, PoolMode::Mean)?;
        project(t, y, 9)
    });
    assert_passes(&r);
    // random values are distinct almost surely, so max is differentiable
    let r = check(&p, 1e-6, |t, b| {
        let y = pool(t, b.get("x")?, 1, PoolMode::Max)?;
        project(t, y, 10)
    });
    assert_passes(&r);
    let p = leaves(&[("z", &[3, 4])], 11);
    let r = check(&p, 1e-6, |t, b| t.cross_entropy(b.get("z")?, &[0, 3, 1]));
    assert_passes(&r);
}

#[test]
fn normalize_gradient() {
    let p = leaves(&[("x", &[4, 6])], 12);
    let r = check(&p, 1e-6, |t, b| {
        let y = t.normalize(b.get("x")?)?;
        project(t, y, 13)
    });
    assert_passes(&r);
}

fn unit_params(c: usize, seed: u64) -> (ModelParams, UnitDims) {
    let dims = UnitDims {
        model: c,
        embed: 8,
        heads: 2,
        hidden: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    register_unit(&mut p, "u", &dims, &mut rng).unwrap();
    (p, dims)
}

fn centers(count: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()
}

#[test]
fn attention_gradient() {
    let (p, _) = unit_params(16, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[2, 4, 16], &mut rng);
    let r = check(&p, 1e-4, |t, b| {
        let vars = UnitVars::bind(b, "u", 2)?;
        let tokens = t.constant(x.clone());
        let (y, _) = mhsa_forward(t, tokens, &vars.attn)?;
        project(t, y, 22)
    });
    assert_passes(&r);
}

#[test]
fn spatial_unit_gradient() {
    let (p, _) = unit_params(16, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&[1, 4, 16], &mut rng);
    let c = centers(4, 32);
    let r = check(&p, 1e-4, |t, b| {
        let vars = UnitVars::bind(b, "u", 2)?;
        let tokens = t.constant(x.clone());
        let (y, _) = s_trans_forward(t, tokens, &c, &vars, PositionEncoding::Enabled)?;
        project(t, y, 33)
    });
    assert_passes(&r);
}

#[test]
fn temporal_unit_gradient() {
    let (p, _) = unit_params(16, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = random(&[1, 3, 16], &mut rng);
    let r = check(&p, 1e-4, |t, b| {
        let vars = UnitVars::bind(b, "u", 2)?;
        let tokens = t.constant(x.clone());
        let (y, _) = t_trans_forward(t, tokens, &vars, PositionEncoding::Enabled)?;
        project(t, y, 42)
    });
    assert_passes(&r);
}

fn small_model(variant: PathVariant, fusion: SceneFusion) -> GradcheckConfig {
    let mut cfg = GradcheckConfig::default();
    cfg.model.variant = variant;
    cfg.model.scene_fusion = fusion;
    cfg
}

// Path-level check with the embedded features as a trainable input too.
fn path_check(kind: PathKind) {
    let cfg = small_model(
        match kind {
            PathKind::ST | PathKind::TS => PathVariant::Dual,
            PathKind::SS => PathVariant::SS,
            PathKind::TT => PathVariant::TT,
        },
        SceneFusion::None,
    );
    let m = &cfg.model;
    let mut p = init_params(m, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    p.insert("x", random(&[1, 3, 4, m.dims.model], &mut rng)).unwrap();
    let c = centers(12, 52);
    let r = check(&p, 1e-4, |t, b| {
        let x = ActorTensor::new(t, b.get("x")?, c.clone())?;
        let vars = PathVars::bind(b, kind, m.dims.heads, false)?;
        let out = match kind {
            PathKind::ST => compose_st(t, &x, &vars)?,
            PathKind::TS => compose_ts(t, &x, &vars)?,
            _ => compose_variant(t, &x, &vars, kind)?,
        };
        let (g, i) = classify_heads(t, &out, &HeadVars::bind(b, kind)?)?;
        let a = project(t, out.enhanced, 53)?;
        let g = project(t, g, 54)?;
        let i = project(t, i, 55)?;
        let s = t.add(a, g)?;
        t.add(s, i)
    });
    // parameters of the other path and the unused embedding get zero on both sides
    assert_passes(&r);
}

#[test]
fn st_path_gradient() {
    path_check(PathKind::ST);
}

#[test]
fn ts_path_gradient() {
    path_check(PathKind::TS);
}

#[test]
fn ss_path_gradient() {
    path_check(PathKind::SS);
}

#[test]
fn tt_path_gradient() {
    path_check(PathKind::TT);
}

#[test]
fn full_objective_gradient() {
    let report = gradcheck_cmd(&GradcheckConfig::default(), None).unwrap();
    assert_passes(&report);
    assert!(report.tensors.iter().any(|t| t.name == "scene.head.w"));
}

#[test]
fn every_scene_fusion_mode_has_correct_gradients() {
    for fusion in [SceneFusion::None, SceneFusion::Early, SceneFusion::Middle] {
        let report = gradcheck_cmd(&small_model(PathVariant::Dual, fusion), None).unwrap();
        assert_passes(&report);
    }
}

#[test]
fn mac_gradient_alone() {
    let cfg = GradcheckConfig::default();
    let m = &cfg.model;
    let mut p = init_params(m, 60).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    p.insert("x", random(&[2, 3, 4, m.dims.model], &mut rng)).unwrap();
    let c = centers(24, 62);
    let r = check(&p, 1e-4, |t, b| {
        let x = ActorTensor::new(t, b.get("x")?, c.clone())?;
        let st = compose_st(t, &x, &PathVars::bind(b, PathKind::ST, m.dims.heads, false)?)?;
        let ts = compose_ts(t, &x, &PathVars::bind(b, PathKind::TS, m.dims.heads, false)?)?;
        Ok(mac_loss(t, &st, &ts, &MacConfig::default())?.total)
    });
    assert_passes(&r);
}

#[test]
fn zero_weights_give_zero_mac_gradient() {
    let cfg = GradcheckConfig::default();
    let params = init_params(&cfg.model, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&cfg, &mut rng).unwrap();

    let grads = |mac: &MacConfig| {
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let obj = objective(&mut t, &batch, &cfg.model, mac, 1.0, &b).unwrap();
        t.backward(obj.total).unwrap();
        let terms = obj.mac.unwrap();
        let logged = [t.item(terms.ff), t.item(terms.fv), t.item(terms.vv)];
        let g: Vec<Vec<f64>> = b.iter().map(|(_, v)| t.grad(v).unwrap().to_vec()).collect();
        (g, logged, t.item(obj.total), t.item(obj.cls))
    };
    let (off, logged, total, cls) = grads(&MacConfig::OFF);
    // components are still computed for logging
    assert!(logged.iter().all(|v| v.is_finite() && *v > 0.0));
    assert_eq!(total, cls);

    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let obj = objective(&mut t, &batch, &cfg.model, &MacConfig::OFF, 1.0, &b).unwrap();
    t.backward(obj.cls).unwrap();
    let cls_only: Vec<Vec<f64>> = b.iter().map(|(_, v)| t.grad(v).unwrap().to_vec()).collect();
    assert_eq!(off, cls_only);

    let (on, ..) = grads(&MacConfig::default());
    assert_ne!(off, on);
}

#[test]
fn non_dual_models_ignore_mac() {
    let cfg = small_model(PathVariant::ST, SceneFusion::Late);
    let params = init_params(&cfg.model, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&cfg, &mut rng).unwrap();
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let obj = objective(&mut t, &batch, &cfg.model, &MacConfig::default(), 1.0, &b).unwrap();
    assert!(obj.mac.is_none());
    assert_eq!(t.item(obj.total), t.item(obj.cls));
}

#[test]
fn corrupted_backward_rule_fails_the_full_check() {
    let report = gradcheck_cmd(&GradcheckConfig::default(), Some(BackwardFault::LayerNormGain)).unwrap();
    assert!(!report.passed());
    assert!(report.failures().any(|t| t.name.contains("ln")));
}

#[test]
fn backward_twice_accumulates_into_leaves() {
    let cfg = GradcheckConfig::default();
    let params = init_params(&cfg.model, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = random_batch(&cfg, &mut rng).unwrap();
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let obj = objective(&mut t, &batch, &cfg.model, &cfg.mac, 1.0, &b).unwrap();
    t.backward(obj.total).unwrap();
    let once: Vec<Vec<f64>> = b.iter().map(|(_, v)| t.grad(v).unwrap().to_vec()).collect();
    t.backward(obj.total).unwrap();
    for ((_, v), g1) in b.iter().zip(&once) {
        for (a, b) in t.grad(v).unwrap().iter().zip(g1) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}

#[test]
fn gradient_check_is_deterministic() {
    let a = gradcheck_cmd(&GradcheckConfig::default(), None).unwrap();
    let b = gradcheck_cmd(&GradcheckConfig::default(), None).unwrap();
    assert_eq!(a.max_rel_err(), b.max_rel_err());
    let cfg = ModelConfig::default();
    assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
}
