//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use eyenet_core::blocks::{
    self, CbamBinding, CbamParams, ConvBinding, ConvParams, CsseBinding, CsseParams,
    ResidualBinding, ResidualUnitParams, SideHeadBinding,
};
use eyenet_core::gradcheck::{finite_difference_check_at, FdReport};
use eyenet_core::label::{one_hot, LabelMap};
use eyenet_core::loss::{total_loss, LossConfig};
use eyenet_core::network::{self, NetworkSpec};
use eyenet_core::ops::ConvCfg;
use eyenet_core::{Result, Tape, Tensor4, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const KINK_TOL: f64 = 1e-3;

pub fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_labels(h: usize, w: usize, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::from_fn(h, w, |_, _| rng.random_range(0..4u8))
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element matters.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.leaf(random_tensor(tape.dims(y).to_array(), seed ^ 0x5eed));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type Objective = Box<dyn Fn(&mut Tape<f64>, Var, &[Var]) -> Result<Var>>;

/// A block under test: named parameter tensors, an input, and a scalar
/// objective built from the input node and one node per parameter.
pub struct BlockCase {
    pub name: &'static str,
    pub params: Vec<(String, Tensor4<f64>)>,
    pub input: Tensor4<f64>,
    pub objective: Objective,
    /// Elements probed per tensor; `None` probes all of them.
    pub probes: Option<usize>,
}

fn pick(len: usize, probes: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match probes {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Finite-difference reports for the input and every parameter tensor.
pub fn check_block(case: &BlockCase, seed: u64) -> Result<Vec<(String, FdReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut out = Vec::new();
    let targets = std::iter::once(("input".to_string(), &case.input))
        .chain(case.params.iter().map(|(n, t)| (n.clone(), t)));
    for (k, (name, tensor)) in targets.enumerate() {
        let idx = pick(tensor.len(), case.probes, &mut rng);
        let report = finite_difference_check_at(
            |tape, probe| {
                let x = if k == 0 {
                    probe
                } else {
                    tape.leaf(case.input.clone())
                };
                let mut vars = Vec::with_capacity(case.params.len());
                for (j, (_, t)) in case.params.iter().enumerate() {
                    vars.push(if j + 1 == k {
                        probe
                    } else {
                        tape.leaf(t.clone())
                    });
                }
                (case.objective)(tape, x, &vars)
            },
            tensor,
            &idx,
            FD_STEP,
            KINK_TOL,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

fn conv_tensors(prefix: &str, p: &ConvParams<f64>, out: &mut Vec<(String, Tensor4<f64>)>) {
    out.push((format!("{prefix}.weight"), p.kernel.clone()));
    if let Some(b) = &p.bias {
        out.push((format!("{prefix}.bias"), b.clone()));
    }
}

fn conv_binding(vars: &[Var], at: &mut usize, has_bias: bool, cfg: ConvCfg) -> ConvBinding {
    let kernel = vars[*at];
    *at += 1;
    let bias = has_bias.then(|| {
        *at += 1;
        vars[*at - 1]
    });
    ConvBinding { kernel, bias, cfg }
}

// zero biases put many pre-activations exactly on the leaky-relu kink
fn randomize_biases(params: &mut [(String, Tensor4<f64>)], seed: u64) {
    for (i, (name, t)) in params.iter_mut().enumerate() {
        if name.ends_with(".bias") {
            *t = random_tensor(t.dims().to_array(), seed + 100 + i as u64).map(|v| 0.5 * v);
        }
    }
}

pub fn residual_case(seed: u64) -> BlockCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ResidualUnitParams::<f64>::he_uniform(3, 4, 2, &mut rng);
    let mut params = Vec::new();
    conv_tensors("conv_a", &p.conv_a, &mut params);
    conv_tensors("conv_b", &p.conv_b, &mut params);
    conv_tensors("shortcut", &p.shortcut, &mut params);
    randomize_biases(&mut params, seed);
    let (ca, cb, cs) = (p.conv_a.cfg, p.conv_b.cfg, p.shortcut.cfg);
    BlockCase {
        name: "residual unit",
        params,
        input: random_tensor([2, 3, 6, 6], seed + 1),
        objective: Box::new(move |tape, x, v| {
            let mut at = 0;
            let b = ResidualBinding {
                conv_a: conv_binding(v, &mut at, true, ca),
                conv_b: conv_binding(v, &mut at, true, cb),
                shortcut: conv_binding(v, &mut at, true, cs),
                slope: blocks::LEAKY_SLOPE,
            };
            let y = blocks::residual_unit(tape, x, &b)?;
            weighted_sum(tape, y, seed)
        }),
        probes: None,
    }
}

pub fn cbam_case(seed: u64) -> BlockCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = CbamParams::<f64>::he_uniform(8, 4, 7, &mut rng).unwrap();
    let mut params = Vec::new();
    conv_tensors("w0", &p.w0, &mut params);
    conv_tensors("w1", &p.w1, &mut params);
    conv_tensors("spatial", &p.spatial_conv, &mut params);
    randomize_biases(&mut params, seed);
    let (c0, c1, cs) = (p.w0.cfg, p.w1.cfg, p.spatial_conv.cfg);
    let (b0, b1) = (p.w0.bias.is_some(), p.w1.bias.is_some());
    BlockCase {
        name: "CBAM",
        params,
        input: random_tensor([2, 8, 5, 6], seed + 1),
        objective: Box::new(move |tape, x, v| {
            let mut at = 0;
            let b = CbamBinding {
                w0: conv_binding(v, &mut at, b0, c0),
                w1: conv_binding(v, &mut at, b1, c1),
                spatial_conv: conv_binding(v, &mut at, true, cs),
                channels: 8,
            };
            let y = blocks::cbam_apply(tape, x, &b)?;
            weighted_sum(tape, y, seed)
        }),
        probes: None,
    }
}

pub fn csse_case(seed: u64) -> BlockCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = CsseParams::<f64>::he_uniform(5, &mut rng);
    let mut params = Vec::new();
    conv_tensors("squeeze", &p.squeeze_conv, &mut params);
    randomize_biases(&mut params, seed);
    let cfg = p.squeeze_conv.cfg;
    BlockCase {
        name: "CS-SE",
        params,
        input: random_tensor([2, 5, 4, 5], seed + 1),
        objective: Box::new(move |tape, x, v| {
            let mut at = 0;
            let b = CsseBinding {
                squeeze_conv: conv_binding(v, &mut at, true, cfg),
            };
            let y = blocks::csse_apply(tape, x, &b)?;
            weighted_sum(tape, y, seed)
        }),
        probes: None,
    }
}

pub fn side_head_case(seed: u64) -> BlockCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = ConvParams::<f64>::he_uniform(4, 6, 1, true, ConvCfg::unit(), &mut rng);
    let conv = ConvParams::<f64>::he_uniform(4, 4, 3, true, ConvCfg::same(3, 1), &mut rng);
    let mut params = Vec::new();
    conv_tensors("logits", &logits, &mut params);
    conv_tensors("conv", &conv, &mut params);
    randomize_biases(&mut params, seed);
    BlockCase {
        name: "side head",
        params,
        input: random_tensor([1, 6, 3, 4], seed + 1),
        objective: Box::new(move |tape, x, v| {
            let mut at = 0;
            let b = SideHeadBinding {
                logits: conv_binding(v, &mut at, true, ConvCfg::unit()),
                conv: conv_binding(v, &mut at, true, ConvCfg::same(3, 1)),
                scale: 2,
            };
            let y = blocks::side_head(tape, x, &b)?;
            weighted_sum(tape, y, seed)
        }),
        probes: None,
    }
}

/// Narrowest network the gradient suite runs on.
pub fn gradcheck_spec() -> NetworkSpec {
    NetworkSpec {
        stem_channels: 4,
        enc_channels: [4, 6, 8],
        cbam_ratio: 4,
        ..NetworkSpec::default()
    }
}

/// Reduced network at 16×16; the objective is the full four-head loss.
pub fn network_case(seed: u64) -> BlockCase {
    let spec = gradcheck_spec();
    let store = network::build(&spec, seed).unwrap().cast::<f64>();
    let mut params: Vec<(String, Tensor4<f64>)> = store
        .iter()
        .map(|(n, e)| (n.to_string(), e.value.clone()))
        .collect();
    randomize_biases(&mut params, seed);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let target: Tensor4<f64> = one_hot(&[random_labels(16, 16, seed + 7)]).unwrap();
    let input = random_tensor([1, 1, 16, 16], seed + 1).map(|v| 0.5 + 0.5 * v);
    BlockCase {
        name: "network",
        params,
        input,
        objective: Box::new(move |tape, x, v| {
            let mut bound = store.record(tape);
            for (n, &var) in names.iter().zip(v) {
                bound.rebind(n, var)?;
            }
            let out = network::forward(tape, x, &bound, &spec)?;
            let (loss, _) = total_loss(tape, &out, &target, &LossConfig::default())?;
            Ok(loss)
        }),
        probes: Some(3),
    }
}

pub fn all_cases(seed: u64) -> Vec<BlockCase> {
    vec![
        residual_case(seed),
        cbam_case(seed),
        csse_case(seed),
        side_head_case(seed),
        network_case(seed),
    ]
}

pub struct FdSummary {
    pub worst: f64,
    pub worst_tensor: String,
    pub checked: usize,
    pub excluded: usize,
}

pub fn summarize(reports: &[(String, FdReport)]) -> FdSummary {
    let mut s = FdSummary {
        worst: 0.0,
        worst_tensor: String::new(),
        checked: 0,
        excluded: 0,
    };
    for (name, r) in reports {
        s.checked += r.checked;
        s.excluded += r.excluded;
        if r.max_rel_error >= s.worst {
            s.worst = r.max_rel_error;
            s.worst_tensor = name.clone();
        }
    }
    s
}
