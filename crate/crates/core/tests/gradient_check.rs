use micre::episode::TokenizedInstance;
use micre::toy::tensor::log_softmax;
use micre::toy::{backward, forward, masked_nll, Arch, Parameters, ToyLMConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 60;
const COORDS: usize = 50;

fn config(arch: Arch) -> ToyLMConfig {
    ToyLMConfig {
        embed_dim: 52,
        hidden_dim: 56,
        window: 8,
        arch,
        init_std: 0.3,
        seed: 11,
        ..Default::default()
    }
}

fn instance(rng: &mut ChaCha8Rng) -> TokenizedInstance {
    let tokens: Vec<u32> = (0..24).map(|_| rng.gen_range(3..VOCAB as u32)).collect();
    let mask = (0..24).map(|i| i >= 14).collect();
    TokenizedInstance {
        tokens,
        mask,
        dropped: 0,
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn check(arch: Arch) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = Parameters::init(&config(arch), VOCAB).unwrap();
    let inst = instance(&mut rng);
    let (loss, g) = backward(&p, &inst).unwrap();
    assert!((loss - masked_nll(&p, &inst).unwrap()).abs() < 1e-12);
    let h = 1e-4;
    let tensors = p.tensors();
    for (ti, (name, t)) in tensors.iter().enumerate() {
        assert!(t.data.len() >= COORDS, "{name} has only {} entries", t.data.len());
        let mut worst: f64 = 0.0;
        for _ in 0..COORDS {
            let idx = rng.gen_range(0..t.data.len());
            let mut plus = p.clone();
            plus.tensors_mut()[ti].1.data[idx] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].1.data[idx] -= h;
            let fd = (masked_nll(&plus, &inst).unwrap() - masked_nll(&minus, &inst).unwrap()) / (2.0 * h);
            let an = g.tensors()[ti].1.data[idx];
            worst = worst.max(relative_error(fd, an));
        }
        assert!(worst < 1e-3, "{arch:?} {name}: worst relative error {worst:e}");
    }
}

#[test]
fn attention_gradients_match_central_differences() {
    check(Arch::Attention);
}

#[test]
fn windowed_mlp_gradients_match_central_differences() {
    check(Arch::WindowedMlp);
}

#[test]
fn next_token_distribution_is_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in [Arch::Attention, Arch::WindowedMlp] {
        let p = Parameters::init(&config(arch), VOCAB).unwrap();
        for len in 1..=8 {
            let window: Vec<u32> = (0..len).map(|_| rng.gen_range(0..VOCAB as u32)).collect();
            let lp = log_softmax(&forward(&p, &window).unwrap());
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6, "{arch:?} len {len}: {total}");
        }
    }
}
