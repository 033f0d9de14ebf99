//! Central-difference gradient checks over every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snf_core::autodiff::{AttentionDims, Graph, TopKSource, Var};
use snf_core::train::{combined_loss, DistillSpec, LogitMode};
use snf_core::{Element, Tensor};

pub type Case<T> = Box<dyn for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>>;

pub struct GradCase<T: Element> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub f: Case<T>,
}

pub fn random<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
}

/// `Σ f(x) ⊙ w` for fixed random `w`, so every output element matters.
pub fn project<'g, T: Element>(g: &'g Graph<T>, y: Var<'g, T>, seed: u64) -> Var<'g, T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random::<T>(&mut rng, &y.shape(), -1.0, 1.0);
    y.mul(g.constant(w)).unwrap().sum()
}

pub fn loss_value<T: Element>(f: &Case<T>, inputs: &[Tensor<T>]) -> f64 {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&g, &vars);
    project(&g, y, 99).item().as_f64()
}

/// Norm-wise relative error between analytic and central-difference
/// gradients over all inputs.
pub fn grad_error<T: Element>(case: &GradCase<T>, h: f64) -> f64 {
    let g = Graph::new();
    let vars: Vec<_> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = (case.f)(&g, &vars);
    let loss = project(&g, y, 99);
    let grads = g.backward(loss).unwrap();
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; case.inputs[i].len()],
        };
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            let mut minus = case.inputs.clone();
            let x = case.inputs[i].data()[j].as_f64();
            plus[i].data_mut()[j] = T::from_f64_lossy(x + h);
            minus[i].data_mut()[j] = T::from_f64_lossy(x - h);
            let step = plus[i].data()[j].as_f64() - minus[i].data()[j].as_f64();
            let num = (loss_value(&case.f, &plus) - loss_value(&case.f, &minus)) / step;
            diff += (analytic[j] - num).powi(2);
            na += analytic[j].powi(2);
            nn += num.powi(2);
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

pub fn cases<T: Element>() -> Vec<GradCase<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |shape: &[usize]| random::<T>(&mut rng, shape, -1.0, 1.0);
    let t = |x: f64| T::from_f64_lossy(x);
    let mut out: Vec<GradCase<T>> = vec![
        GradCase { name: "add", inputs: vec![r(&[3, 4]), r(&[3, 4])], f: Box::new(|_, v| v[0].add(v[1]).unwrap()) },
        GradCase { name: "sub", inputs: vec![r(&[3, 4]), r(&[3, 4])], f: Box::new(|_, v| v[0].sub(v[1]).unwrap()) },
        GradCase { name: "mul", inputs: vec![r(&[3, 4]), r(&[3, 4])], f: Box::new(|_, v| v[0].mul(v[1]).unwrap()) },
        GradCase { name: "scale", inputs: vec![r(&[3, 4])], f: Box::new(move |_, v| v[0].scale(t(1.7))) },
        GradCase {
            name: "add_bias",
            inputs: vec![r(&[3, 4]), r(&[4])],
            f: Box::new(|_, v| v[0].add_bias(v[1]).unwrap()),
        },
        GradCase {
            name: "matmul",
            inputs: vec![r(&[3, 4]), r(&[4, 2])],
            f: Box::new(|_, v| v[0].matmul(v[1]).unwrap()),
        },
        GradCase {
            name: "linear",
            inputs: vec![r(&[5, 4]), r(&[3, 4]), r(&[3])],
            f: Box::new(|_, v| v[0].linear(v[1], Some(v[2])).unwrap()),
        },
        GradCase {
            name: "linear_no_bias",
            inputs: vec![r(&[5, 4]), r(&[3, 4])],
            f: Box::new(|_, v| v[0].linear(v[1], None).unwrap()),
        },
        GradCase {
            name: "layer_norm",
            inputs: vec![r(&[3, 6]), r(&[6]), r(&[6])],
            f: Box::new(move |_, v| v[0].layer_norm(v[1], v[2], t(1e-5)).unwrap()),
        },
        GradCase { name: "gelu", inputs: vec![r(&[3, 4]).map(|x| x * t(3.0))], f: Box::new(|_, v| v[0].gelu()) },
        GradCase {
            name: "reshape",
            inputs: vec![r(&[3, 4])],
            f: Box::new(|_, v| v[0].reshape(&[2, 6]).unwrap()),
        },
        GradCase { name: "transpose", inputs: vec![r(&[3, 4])], f: Box::new(|_, v| v[0].transpose().unwrap()) },
        GradCase { name: "sum", inputs: vec![r(&[3, 4])], f: Box::new(|_, v| v[0].sum()) },
        GradCase { name: "mean", inputs: vec![r(&[3, 4])], f: Box::new(|_, v| v[0].mean()) },
        GradCase { name: "exp", inputs: vec![r(&[3, 4])], f: Box::new(|_, v| v[0].exp()) },
        GradCase {
            name: "softmax",
            inputs: vec![r(&[3, 5])],
            f: Box::new(move |_, v| v[0].softmax(t(0.7)).unwrap()),
        },
        GradCase {
            name: "embedding",
            inputs: vec![r(&[5, 3])],
            f: Box::new(|g, v| g.embedding(v[0], &[0, 2, 2, 4]).unwrap()),
        },
        GradCase {
            name: "concat_rows",
            inputs: vec![r(&[2, 3]), r(&[1, 3])],
            f: Box::new(|g, v| g.concat(&[v[0], v[1]], 0).unwrap()),
        },
        GradCase {
            name: "concat_cols",
            inputs: vec![r(&[2, 3]), r(&[2, 2])],
            f: Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
        },
        GradCase {
            name: "attention_mha",
            inputs: vec![r(&[6, 4]), r(&[6, 4]), r(&[6, 4])],
            f: Box::new(|g, v| {
                let dims = AttentionDims { batch: 2, seq: 3, heads: 2, groups: 2, head_size: 2 };
                g.causal_attention(v[0], v[1], v[2], dims).unwrap()
            }),
        },
        GradCase {
            name: "attention_gqa",
            inputs: vec![r(&[6, 8]), r(&[6, 4]), r(&[6, 4])],
            f: Box::new(|g, v| {
                let dims = AttentionDims { batch: 2, seq: 3, heads: 4, groups: 2, head_size: 2 };
                g.causal_attention(v[0], v[1], v[2], dims).unwrap()
            }),
        },
        GradCase {
            name: "attention_mqa",
            inputs: vec![r(&[4, 6]), r(&[4, 2]), r(&[4, 2])],
            f: Box::new(|g, v| {
                let dims = AttentionDims { batch: 1, seq: 4, heads: 3, groups: 1, head_size: 2 };
                g.causal_attention(v[0], v[1], v[2], dims).unwrap()
            }),
        },
        GradCase {
            name: "cross_entropy",
            inputs: vec![r(&[6, 5])],
            f: Box::new(|g, v| g.cross_entropy(v[0], &[0, 4, 9, 2, 1, 3], Some(9)).unwrap()),
        },
    ];
    let teacher = r(&[4, 6]).map(|x| x * t(3.0));
    let tk = teacher.clone();
    out.push(GradCase {
        name: "forward_kl",
        inputs: vec![r(&[4, 6])],
        f: Box::new(move |g, v| g.forward_kl(g.constant(tk.clone()), v[0], t(0.9)).unwrap()),
    });
    out.push(GradCase {
        name: "topk_kl_teacher",
        inputs: vec![r(&[4, 6])],
        f: Box::new(move |g, v| g.topk_kl(g.constant(teacher.clone()), v[0], t(0.9), 3, TopKSource::Teacher).unwrap()),
    });
    // Well-separated student logits so the student's top-k set is stable
    // under the finite-difference step.
    let student = Tensor::from_fn(&[2, 5], |i| t(((i * 7) % 5) as f64 * 0.8 - 1.5));
    out.push(GradCase {
        name: "topk_kl_student",
        inputs: vec![student],
        f: Box::new(move |g, v| {
            let te = g.constant(Tensor::from_fn(&[2, 5], |i| t((i % 5) as f64 * 0.5)));
            g.topk_kl(te, v[0], t(1.3), 2, TopKSource::Student).unwrap()
        }),
    });
    let mut pos = ChaCha8Rng::seed_from_u64(8);
    out.push(GradCase {
        name: "log",
        inputs: vec![random(&mut pos, &[3, 4], 0.5, 2.0)],
        f: Box::new(|_, v| v[0].log()),
    });
    out.push(GradCase {
        name: "composed",
        inputs: vec![r(&[4, 6]), r(&[5, 6]), r(&[5]), r(&[5]), r(&[5])],
        f: Box::new(move |g, v| {
            let h = v[0].linear(v[1], Some(v[2])).unwrap();
            let n = h.layer_norm(v[3], v[4], t(1e-5)).unwrap().gelu();
            let p = n.softmax(t(1.0)).unwrap();
            let c = g.concat(&[p, n], 1).unwrap();
            c.transpose().unwrap().exp().mean()
        }),
    });
    out
}

/// Relative gradient error per case.
pub fn errors<T: Element>(h: f64) -> Vec<(&'static str, f64)> {
    cases::<T>().iter().map(|c| (c.name, grad_error(c, h))).collect()
}

/// Relative gradient error of the combined distillation loss with respect
/// to the student logits; panics if any gradient reaches the teacher.
pub fn combined_loss_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let student = random::<f32>(&mut rng, &[4, 6], -2.0, 2.0);
    let teacher = random::<f32>(&mut rng, &[4, 6], -2.0, 2.0);
    let targets = [1, 0, 5, 3];
    let spec = DistillSpec { logit_mode: LogitMode::TopK(4), ..DistillSpec::default() };
    let loss_at = |s: &Tensor<f32>| {
        let g = Graph::new();
        let l = combined_loss(&g, g.param(s.clone()), Some(g.constant(teacher.clone())), &targets, &spec).unwrap();
        l.total.item() as f64
    };
    let g = Graph::new();
    let sv = g.param(student.clone());
    let tv = g.param(teacher.clone());
    let l = combined_loss(&g, sv, Some(tv), &targets, &spec).unwrap();
    let grads = g.backward(l.total).unwrap();
    assert!(grads.get(tv).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    let analytic = grads.get(sv).unwrap();
    let h = 1e-2;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for j in 0..student.len() {
        let mut p = student.clone();
        let mut m = student.clone();
        p.data_mut()[j] += h;
        m.data_mut()[j] -= h;
        let num = (loss_at(&p) - loss_at(&m)) / (2.0 * h as f64);
        diff += (analytic.data()[j] as f64 - num).powi(2);
        norm += num.powi(2);
    }
    diff.sqrt() / norm.sqrt()
}

