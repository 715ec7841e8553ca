//! One line per acceptance criterion. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hysparse::kvcache::memory_report;
use hysparse::model::{build_hybrid_stack, ModelConfig};
use hysparse::runtime::{compare_regimes, train, Regime, SyntheticTask, TrainConfig};
use hysparse::verify::{run_suite, Suite, SuiteReport};

const SEED: u64 = 0;

// Needle calibration: toy model, depth 24 past a window of 8.
const NEEDLE_DEPTH: usize = 24;
const NEEDLE_STEPS: usize = 1800;
const NEEDLE_BATCH: usize = 16;
const NEEDLE_LR: f64 = 3e-3;
const COPY_STEPS: usize = 1000;

struct Line {
    n: usize,
    pass: bool,
    detail: String,
}

fn checks_pass(r: &SuiteReport, names: &[&str]) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in names {
        match r.check(name) {
            Some(c) => {
                pass &= c.passed();
                parts.push(format!("{name} {}/{} max {:.1e}", c.cases - c.failures, c.cases, c.max_error));
            }
            None => {
                pass = false;
                parts.push(format!("{name} missing"));
            }
        }
    }
    (pass, parts.join(", "))
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_hysparse"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("HYSPARSE_SEED", "4")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> (bool, String) {
    let runs: [&[&str]; 5] = [
        &["memreport"],
        &["verify", "--suite", "selection"],
        &["train", "--task", "copy", "--seq-len", "16", "--steps", "5", "--batch-size", "2"],
        &["compare", "--task", "needle", "--depth", "12", "--steps", "2", "--batch-size", "2"],
        &["demo"],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut files = 0;
    for args in runs {
        let out = tmp.path().join(args[0]);
        if let Err(e) = run_cli(args, &out) {
            return (false, e);
        }
        let first = read_dir(&out);
        std::fs::remove_dir_all(&out).unwrap();
        if let Err(e) = run_cli(args, &out) {
            return (false, e);
        }
        let second = read_dir(&out);
        if first != second {
            return (false, format!("{} outputs differ between runs", args[0]));
        }
        files += first.len();
    }
    (true, format!("{} subcommands run twice, {files} files byte-identical", runs.len()))
}

fn main() {
    let mut lines = Vec::new();

    let t = Instant::now();
    let kernels = run_suite(Suite::Kernels, SEED).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (pass, detail) = checks_pass(&kernels, &["tiled_vs_reference_output", "tiled_vs_reference_scores"]);
    let cases = kernels.check("tiled_vs_reference_output").map_or(0, |c| c.cases);
    lines.push(Line {
        n: 1,
        pass: pass && cases >= 200 && secs < 60.0,
        detail: format!("tiled vs reference: {detail}; {cases} cases in {secs:.1}s"),
    });

    let (pass, detail) = checks_pass(&kernels, &["scores_vs_materialized_block_max", "tiled_scores_vs_materialized"]);
    lines.push(Line { n: 2, pass, detail: format!("block scores vs materialized softmax: {detail}") });

    let (pass, detail) = checks_pass(&kernels, &["sparse_full_cover_is_full", "window_covering_is_full"]);
    lines.push(Line { n: 3, pass, detail: format!("degenerate sparsity: {detail}") });

    let selection = run_suite(Suite::Selection, SEED).unwrap();
    let (pass, detail) = checks_pass(&selection, &["topk_vs_sort_oracle", "group_max_vs_brute_force"]);
    let tables = selection.check("topk_vs_sort_oracle").map_or(0, |c| c.cases);
    lines.push(Line { n: 4, pass: pass && tables >= 1000, detail: format!("selection: {detail}") });

    let parity = run_suite(Suite::Parity, SEED).unwrap();
    let worst = parity.checks.iter().filter(|c| c.name.starts_with("decode_vs_prefill")).map(|c| c.max_error).fold(0.0, f64::max);
    lines.push(Line {
        n: 5,
        pass: parity.passed(),
        detail: format!("prefill/decode parity over {} checks, worst logit diff {worst:.1e}", parity.checks.len()),
    });

    let grads = run_suite(Suite::Grads, SEED).unwrap();
    let classes = ["projections", "gates", "sink_biases", "norms"];
    let names: Vec<String> =
        ["model_init", "model_trained"].iter().flat_map(|p| classes.iter().map(move |c| format!("{p}_{c}"))).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let (pass, _) = checks_pass(&grads, &refs);
    let worst = grads.checks.iter().filter(|c| c.tolerance == 1e-5).map(|c| c.max_error).fold(0.0, f64::max);
    lines.push(Line {
        n: 6,
        pass: pass && grads.passed(),
        detail: format!("FD gradients, {} checks before and after 100 steps, worst relative error {worst:.1e}", grads.checks.len()),
    });

    let report = memory_report(&ModelConfig::geometry_80b(), 32768, 2).unwrap();
    let cache = run_suite(Suite::Cache, SEED).unwrap();
    let exact = cache.check("resident_bytes_equal_report").is_some_and(|c| c.passed());
    lines.push(Line {
        n: 7,
        pass: report.full_layers == 5 && (9.4..=9.5).contains(&report.reduction_ratio) && exact,
        detail: format!(
            "49 layers / {} full / w 128 / ctx 32768: ratio {:.4}; arena bytes equal report: {exact}",
            report.full_layers, report.reduction_ratio
        ),
    });

    let stack = build_hybrid_stack(49, 11).unwrap();
    let full = stack.full_layers();
    lines.push(Line {
        n: 8,
        pass: full.len() == 5 && stack.roles[48].is_full(),
        detail: format!("build_hybrid_stack(49, 11) full layers {full:?}"),
    });

    let t = Instant::now();
    let copy_task = SyntheticTask::copy(64, 16);
    let mut copy_model = Regime::HySparse.build(&ModelConfig::toy(16), SEED).unwrap();
    let copy_cfg = TrainConfig { steps: COPY_STEPS, lr: 3e-3, final_lr_frac: 0.1, seed: SEED, ..TrainConfig::default() };
    let copy = train(&mut copy_model, &copy_task, &copy_cfg).unwrap();

    let needle = SyntheticTask::needle(NEEDLE_DEPTH, 4, 8);
    let needle_cfg = TrainConfig {
        steps: NEEDLE_STEPS,
        batch_size: NEEDLE_BATCH,
        lr: NEEDLE_LR,
        final_lr_frac: 0.1,
        seed: SEED,
        ..TrainConfig::default()
    };
    let cmp = compare_regimes(&needle, &ModelConfig::toy(needle.vocab), &needle_cfg, &Regime::ALL).unwrap();
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let acc = |r| cmp.result(r).unwrap().heldout_accuracy * 100.0;
    let (full, swa, hs) = (acc(Regime::FullAttn), acc(Regime::HybridSwa), acc(Regime::HySparse));
    let copy_acc = copy.heldout_accuracy * 100.0;
    lines.push(Line {
        n: 9,
        pass: hs >= full - 1.0 && hs - swa >= 20.0 && copy_acc > 99.0 && minutes < 30.0,
        detail: format!(
            "needle depth {NEEDLE_DEPTH} > w 8: full {full:.1}%, hybrid_swa {swa:.1}%, hysparse {hs:.1}%; copy {copy_acc:.1}%; {minutes:.1} min"
        ),
    });

    let (pass, detail) = determinism();
    lines.push(Line { n: 10, pass, detail });

    let mut all = true;
    for l in &lines {
        all &= l.pass;
        println!("criterion {:>2}: {}  {}", l.n, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    if !all {
        std::process::exit(1);
    }
}
