#![allow(dead_code)]

pub mod oracle;

use btxforge_core::model::{Checkpoint, ModelConfig};
use btxforge_core::tensor::Tensor;

/// Tiny config that keeps naive oracles and finite differences fast.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 260,
        max_context: 16,
        moe: None,
    }
}

/// Central differences on sampled coordinates of every tensor of `ckpt`;
/// returns the worst relative error `|a - n| / max(1e-6, |a| + |n|)`.
pub fn check_gradients(
    ckpt: &Checkpoint<f64>,
    analytic: &std::collections::BTreeMap<String, Tensor<f64>>,
    per_tensor: usize,
    loss: impl Fn(&Checkpoint<f64>) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, grad) in analytic {
        let n = grad.numel();
        let step = (n / per_tensor).max(1);
        for idx in (0..n).step_by(step).take(per_tensor) {
            let mut plus = ckpt.clone();
            plus.tensors.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = ckpt.clone();
            minus.tensors.get_mut(name).unwrap().data_mut()[idx] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn lcg_tokens(seed: u64, len: usize, vocab: u32) -> Vec<u32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..len)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % vocab as u64) as u32
        })
        .collect()
}

use btxforge_core::tensor::{Tape, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One differentiable op under test: leaf inputs and the graph built on them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable tape op, each on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    let u = |shape: &[usize], seed| uniform(shape, -1.0, 1.0, seed);
    vec![
        case("matmul", vec![u(&[3, 4], 1), u(&[4, 5], 2)], |t, v| t.matmul(v[0], v[1])),
        case("matmul_shared_rhs", vec![u(&[2, 3, 4], 3), u(&[4, 2], 4)], |t, v| t.matmul(v[0], v[1])),
        case("matmul_batched", vec![u(&[2, 3, 4], 5), u(&[2, 4, 3], 6)], |t, v| t.matmul(v[0], v[1])),
        case("add", vec![u(&[3, 4], 7), u(&[3, 4], 8)], |t, v| t.add(v[0], v[1])),
        case("add_broadcast", vec![u(&[3, 4], 9), u(&[4], 10)], |t, v| t.add(v[0], v[1])),
        case("mul", vec![u(&[3, 4], 11), u(&[3, 4], 12)], |t, v| t.mul(v[0], v[1])),
        case("mul_broadcast", vec![u(&[2, 3, 4], 13), u(&[3, 1], 14)], |t, v| t.mul(v[0], v[1])),
        case("sub", vec![u(&[3, 4], 15), u(&[3, 4], 16)], |t, v| t.sub(v[0], v[1])),
        case("scale", vec![u(&[3, 4], 17)], |t, v| t.scale(v[0], -2.5)),
        case("softmax_last", vec![u(&[3, 5], 18)], |t, v| t.softmax(v[0], 1)),
        case("softmax_first", vec![u(&[3, 5], 19)], |t, v| t.softmax(v[0], 0)),
        case("rms_norm", vec![u(&[3, 6], 20), u(&[6], 21)], |t, v| t.rms_norm(v[0], v[1], 1e-5)),
        case("gather_rows", vec![u(&[5, 3], 22)], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2])),
        case("scatter_add_rows", vec![u(&[4, 3], 23)], |t, v| t.scatter_add_rows(v[0], &[1, 3, 1, 0], 5)),
        case("reshape", vec![u(&[3, 4], 24)], |t, v| t.reshape(v[0], &[2, 6])),
        case("permute", vec![u(&[2, 3, 4], 25)], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("transpose", vec![u(&[3, 4], 26)], |t, v| t.transpose(v[0])),
        case("linear", vec![u(&[3, 4], 27), u(&[5, 4], 28)], |t, v| t.linear(v[0], v[1])),
        case("cross_entropy", vec![u(&[4, 6], 29)], |t, v| {
            t.cross_entropy(v[0], &[1, 5, 0, 3], &[true, false, true, true])
        }),
        case("sigmoid", vec![u(&[3, 4], 30)], |t, v| t.sigmoid(v[0])),
        case("log", vec![uniform(&[3, 4], 0.5, 2.0, 31)], |t, v| t.log(v[0])),
        case("silu", vec![u(&[3, 4], 32)], |t, v| t.silu(v[0])),
        case("sum_all", vec![u(&[3, 4], 33)], |t, v| t.sum_all(v[0])),
        case("mean_all", vec![u(&[3, 4], 34)], |t, v| t.mean_all(v[0])),
    ]
}

/// Scalar probe: the op's output contracted with fixed random weights.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let w = uniform(tape.shape(out), -1.0, 1.0, seed);
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn probe_value(case: &OpCase, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone()).unwrap()).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let s = probe(&mut tape, out, 99).unwrap();
    tape.value(s).item()
}

/// Worst relative error `|a - n| / max(|a| + |n|, 1e-6)` between backward
/// gradients and central differences over every input coordinate.
pub fn op_gradient_error(case: &OpCase) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.param(x.clone()).unwrap()).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let s = probe(&mut tape, out, 99).unwrap();
    let grads = tape.backward(s).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let g = grads.get(*var).expect("gradient for every input");
        for idx in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[idx] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[idx] -= h;
            let numeric = (probe_value(case, &plus) - probe_value(case, &minus)) / (2.0 * h);
            let a = g.data()[idx];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
        }
    }
    worst
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Expected verdict per validation fixture record: `accept` or a rule name.
pub fn validation_fixture() -> (Vec<btxforge_core::data::SftRecord>, Vec<String>) {
    let records = btxforge_core::data::read_jsonl(&fixture("validation.jsonl")).unwrap();
    let expected = std::fs::read_to_string(fixture("validation.expected"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    (records, expected)
}

pub fn code_switch_fixture() -> Vec<(String, bool)> {
    std::fs::read_to_string(fixture("code_switch.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let (text, flag) = l.split_once('\t').unwrap();
            (text.to_string(), flag == "true")
        })
        .collect()
}
