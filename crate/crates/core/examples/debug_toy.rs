// Scratch diagnostics for the toy experiment. Not shipped.

use maet_core::store::TensorStore;
use maet_core::toy::{evaluate, run_transfer_experiment, TaskSet, ToyConfig, ToyModel};

fn main() {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1u64);
    let config = ToyConfig {
        master_seed: seed,
        ..ToyConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_transfer_experiment(&config, dir.path()).unwrap();
    let tasks = TaskSet::generate(seed, config.n_languages, config.n_abilities).unwrap();

    let load = |file: &str| -> ToyModel {
        ToyModel::from_store(&TensorStore::open(dir.path().join(file)).unwrap()).unwrap()
    };
    let base = load("base.safetensors");
    let theta_al = load("theta_ability_l0.safetensors");
    let theta_l0 = load("theta_l0.safetensors");

    let task00 = tasks.ability_task(0, 0);
    let task01 = tasks.ability_task(0, 1);
    let gen0 = tasks.general_task(0);
    let gen1 = tasks.general_task(1);

    println!("== models on (ability0, L0) / (ability0, L1) / general0 / general1 ==");
    for (name, model) in [
        ("base", &base),
        ("theta_AL", &theta_al),
        ("theta_L0", &theta_l0),
    ] {
        println!(
            "{name:9}: A0L0 {:8.3}  A0L1 {:8.3}  G0 {:8.3}  G1 {:8.3}",
            evaluate(model, &task00, 2048, 7).unwrap(),
            evaluate(model, &task01, 2048, 8).unwrap(),
            evaluate(model, &gen0, 2048, 9).unwrap(),
            evaluate(model, &gen1, 2048, 10).unwrap(),
        );
    }

    println!("== per-tensor deltas: L2 norms and alignment ==");
    let al_store = TensorStore::open(dir.path().join("theta_ability_l0.safetensors")).unwrap();
    let l0_store = TensorStore::open(dir.path().join("theta_l0.safetensors")).unwrap();
    let base_store = TensorStore::open(dir.path().join("base.safetensors")).unwrap();
    let lang_store = TensorStore::open(dir.path().join("weight_lang1.safetensors")).unwrap();
    for name in base_store.names() {
        let b = base_store.read_f32(name).unwrap();
        let a = al_store.read_f32(name).unwrap();
        let l = l0_store.read_f32(name).unwrap();
        let r1 = lang_store.read_f32(name).unwrap();
        let dal: Vec<f64> = a.iter().zip(&b).map(|(p, q)| (p - q) as f64).collect();
        let dl0: Vec<f64> = l.iter().zip(&b).map(|(p, q)| (p - q) as f64).collect();
        let dl1: Vec<f64> = r1.iter().map(|p| *p as f64).collect();
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = |x: &Vec<f64>, y: &Vec<f64>| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let n = norm(x) * norm(y);
            if n == 0.0 { 0.0 } else { d / n }
        };
        println!(
            "  {name:14} |dAL| {:7.3} |dL0| {:7.3} |dL1| {:7.3}  cos(AL,L0) {:+.3} cos(AL,L1) {:+.3}",
            norm(&dal), norm(&dl0), norm(&dl1), cos(&dal, &dl0), cos(&dal, &dl1)
        );
    }
    let b3_base = base.b3[0];
    let b3_al = theta_al.b3[0];
    let b3_l0 = theta_l0.b3[0];
    println!("b3: base {b3_base:.4} theta_AL {b3_al:.4} theta_L0 {b3_l0:.4}");

    println!("== report rows ==");
    print!("{}", report.render());
    println!(
        "held-out improvement merged {:+.4} ablation {:+.4}",
        report.held_out_improvement("merged").unwrap(),
        report.held_out_improvement("ablation").unwrap()
    );
}
