// Scratch harness for tuning the toy experiment defaults. Not shipped.

use maet_core::toy::{run_transfer_experiment, ToyConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let base_steps = get("--base", 600.0) as usize;
    let probe_steps = get("--probe", 60.0) as usize;
    let cpt_steps = get("--cpt", 200.0) as usize;
    let lang_steps = get("--lang", 100.0) as usize;
    let lr = get("--lr", 0.02);
    let n_languages = get("--langs", 2.0) as usize;
    let ref_share = get("--refshare", 0.4);
    let seeds = get("--seeds", 10.0) as u64;
    let seed_start = get("--seed-start", 1.0) as u64;

    let mut improvements = Vec::new();
    let mut ablation_improvements = Vec::new();
    let mut wins = 0;
    let mut beats = 0;
    for seed in seed_start..seed_start + seeds {
        let config = ToyConfig {
            master_seed: seed,
            ability_index: get("--ability", 0.0) as usize,
            n_languages,
            base_steps,
            probe_steps,
            cpt_steps,
            lang_steps,
            base_reference_share: ref_share,
            learning_rate: lr,
            ..ToyConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let t0 = std::time::Instant::now();
        let report = run_transfer_experiment(&config, dir.path()).unwrap();
        let a = report.held_out_ability;
        let l = report.held_out_language;
        let base = report.mse("base", a, l).unwrap();
        let merged = report.mse("merged", a, l).unwrap();
        let ablation = report.mse("ablation", a, l).unwrap();
        let imp = (base - merged) / base;
        let imp_abl = (base - ablation) / base;
        if merged < base {
            wins += 1;
        }
        if imp > imp_abl {
            beats += 1;
        }
        println!(
            "seed {seed:2}: base {base:9.4} merged {merged:9.4} ablation {ablation:9.4}  imp {imp:+.4} abl {imp_abl:+.4}  ({:?})",
            t0.elapsed()
        );
        improvements.push(imp);
        ablation_improvements.push(imp_abl);
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    };
    let med = median(&mut improvements);
    let med_abl = median(&mut ablation_improvements);
    println!(
        "wins {wins}/{seeds} beats {beats}/{seeds}  median improvement {med:+.4}  ablation median {med_abl:+.4}  maet_beats_ablation {}",
        med > med_abl
    );
}
