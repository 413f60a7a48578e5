use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use ovc_core::cli::report::cmd_report;
use ovc_core::cli::run::{cmd_build_cache, cmd_certify, cmd_fit_mvn, read_record_file, CertificateRecord};
use ovc_core::cli::{generate, Mode, PromptSet, RunArgs, RunManifest, SyntheticParams};
use ovc_core::certify::Method;
use ovc_core::OvcError;

fn params(seed: u64) -> SyntheticParams {
    SyntheticParams {
        seed,
        k: 5,
        d: 16,
        dim_in: 8,
        n_inputs: 6,
        n_prompts: 12,
        n_novel: 3,
        jitter: 0.1,
        input_scale: 1.0,
    }
}

fn run_args(data: &Path, out: &Path) -> RunArgs {
    RunArgs {
        data: data.to_path_buf(),
        sigma: 0.25,
        n0: 50,
        n: 600,
        n_p: 300,
        alpha: 0.001,
        alpha_zeta: 0.001,
        gamma: 0.05,
        seed: 3,
        skip: 1,
        chunk_size: 64,
        out: out.to_path_buf(),
        cache_dir: None,
    }
}

fn manifest(args: &RunArgs, mode: Mode, set: PromptSet) -> RunManifest {
    RunManifest::from_args(args, mode, set).unwrap()
}

fn by_pair(rs: &[CertificateRecord]) -> HashMap<(u64, String), &CertificateRecord> {
    rs.iter().map(|r| ((r.cert.input_id, r.cert.prompt_id.clone()), r)).collect()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ovc"))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generation_is_deterministic_and_splits_prompts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = SyntheticParams {
        n_prompts: 80,
        n_novel: 10,
        ..params(1)
    };
    let a = generate(&tmp.path().join("a"), &p).unwrap();
    generate(&tmp.path().join("b"), &p).unwrap();
    assert_eq!(a.known.len(), 70);
    assert_eq!(a.novel.len(), 10);
    assert!(a.novel.iter().all(|id| !a.known.contains(id)));
    for f in ["dataset.json", "inputs.jsonl", "prompts/p000.ovcp", "prompts/p079.ovcp"] {
        let fa = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let fb = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(fa, fb, "{f}");
    }
    let c = generate(&tmp.path().join("c"), &params(2)).unwrap();
    assert_ne!(a.novel, c.novel);
}

#[test]
fn cached_modes_match_standard_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    generate(&data, &params(4)).unwrap();
    let args = run_args(&data, &out);

    let std_m = manifest(&args, Mode::Standard, PromptSet::All);
    let summary = cmd_certify(&std_m).unwrap();
    assert_eq!(summary.records, 6 * 12);
    assert_eq!(summary.total_encoder_calls, 6 * 12 * 650);

    // OVC needs caches first.
    let ovc_m = manifest(&args, Mode::Ovc, PromptSet::All);
    assert!(matches!(cmd_certify(&ovc_m), Err(OvcError::CacheMiss(_))));
    assert_eq!(cmd_build_cache(&manifest(&args, Mode::Ovc, PromptSet::Known)).unwrap(), 6);
    let ovc = cmd_certify(&ovc_m).unwrap();
    assert_eq!(ovc.total_encoder_calls, 0);

    let std_recs = read_record_file(&std_m.records_path()).unwrap();
    let ovc_recs = read_record_file(&ovc_m.records_path()).unwrap();
    let std_map = by_pair(&std_recs);
    assert_eq!(ovc_recs.len(), std_recs.len());
    for r in &ovc_recs {
        let s = std_map[&(r.cert.input_id, r.cert.prompt_id.clone())];
        assert!(r.cert.same_outcome(&s.cert));
        assert_eq!(r.cert.method, Method::Ovc);
        assert_eq!(r.true_label, s.true_label);
    }

    // Rerun resumes every pair and leaves the file unchanged.
    let before = std::fs::read(ovc_m.records_path()).unwrap();
    let again = cmd_certify(&ovc_m).unwrap();
    assert_eq!(again.resumed, again.records);
    assert_eq!(std::fs::read(ovc_m.records_path()).unwrap(), before);

    // Truncate to a partial file: the rerun completes it without duplicates.
    let text = String::from_utf8(before).unwrap();
    let partial: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    std::fs::write(ovc_m.records_path(), partial).unwrap();
    let resumed = cmd_certify(&ovc_m).unwrap();
    assert_eq!(resumed.resumed, 10);
    let recs = read_record_file(&ovc_m.records_path()).unwrap();
    assert_eq!(recs.len(), 72);
    assert_eq!(by_pair(&recs).len(), 72);

    // Modified-IRS over novel prompts, then MVN.
    let irs_m = manifest(&args, Mode::Irs, PromptSet::Novel);
    let irs = cmd_certify(&irs_m).unwrap();
    assert_eq!(irs.records, 18);
    assert!(irs.fast_path_fraction.is_some());
    for r in read_record_file(&irs_m.records_path()).unwrap() {
        assert!(matches!(r.cert.method, Method::ModifiedIrsFast | Method::ModifiedIrsFallback));
        if let Some(m) = &r.cert.irs_match {
            // Known-prompt metadata came from the same noise, so the matched standard record holds the cached bound.
            let known = std_map[&(r.cert.input_id, m.sim_prompt_id.clone())];
            let p = known.cert.p_a_lower - m.zeta_x;
            match r.cert.radius {
                Some(rad) => assert!((rad - 0.25 * ovc_core::stats::inv_std_normal_cdf(p).unwrap()).abs() < 1e-12),
                None => assert!(p <= 0.5),
            }
        }
    }

    let mvn_m = manifest(&args, Mode::Mvn, PromptSet::Novel);
    assert!(matches!(cmd_certify(&mvn_m), Err(OvcError::CacheMiss(_))));
    assert_eq!(cmd_fit_mvn(&mvn_m).unwrap(), 6);
    let mvn = cmd_certify(&mvn_m).unwrap();
    assert!(mvn.heuristic);
    assert_eq!(mvn.total_encoder_calls, 0);

    let files: Vec<PathBuf> = [&std_m, &ovc_m, &irs_m, &mvn_m].iter().map(|m| m.records_path()).collect();
    let report = cmd_report(&files, &tmp.path().join("report")).unwrap();
    assert!(tmp.path().join("report/report.json").exists());
    assert_eq!(report.curves.len(), 4);
    let ovc_scatter = report.scatter.iter().find(|s| s.mode == Mode::Ovc).unwrap();
    assert_eq!(ovc_scatter.mean_abs_diff, 0.0);
    assert_eq!(ovc_scatter.exceed_count, 0);
    assert!(ovc_scatter.pairs.iter().all(|(a, b)| a == b));
    let std_curve = report.curves.iter().find(|c| c.mode == Mode::Standard).unwrap();
    assert!(std_curve.at(0.0) >= std_curve.at(0.5));
    assert!(report.speedup_table().contains("ovc"));
}

#[test]
fn manifest_hash_ignores_paths_but_not_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, &params(5)).unwrap();
    let a = manifest(&run_args(&data, Path::new("x")), Mode::Ovc, PromptSet::All);
    let b = manifest(&run_args(&data, Path::new("y")), Mode::Ovc, PromptSet::All);
    assert_eq!(a.hash(), b.hash());
    let mut args = run_args(&data, Path::new("x"));
    args.n = 700;
    assert_ne!(a.hash(), manifest(&args, Mode::Ovc, PromptSet::All).hash());
    args.skip = 0;
    assert!(RunManifest::from_args(&args, Mode::Ovc, PromptSet::All).is_err());
}

#[test]
fn report_without_records_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(matches!(cmd_report(&[empty], tmp.path()), Err(OvcError::ConfigInvalid(_))));
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let st = bin()
        .args(["gen-synthetic", "--out", path_str(&data), "--n-inputs", "2", "--n-prompts", "4", "--d", "8", "--k", "3"])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));

    let common = ["--data", path_str(&data), "--out", path_str(&out), "--n0", "20", "--n", "200", "--np", "100"];
    let miss = bin().args(["certify", "--mode", "ovc"]).args(common).output().unwrap();
    assert_eq!(miss.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&miss.stderr).starts_with("error:"));

    let bad = bin().args(["certify", "--mode", "standard", "--sigma", "-1"]).args(common).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));

    let ok = bin().args(["build-cache"]).args(common).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let ovc = bin().args(["certify", "--mode", "ovc"]).args(common).output().unwrap();
    assert!(ovc.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&ovc.stdout).unwrap();
    assert_eq!(summary["total_encoder_calls"], 0);

    // Corrupt a cache file.
    let cache = std::fs::read_dir(data.join("cache"))
        .unwrap()
        .flat_map(|d| std::fs::read_dir(d.unwrap().path()).unwrap())
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ovce"))
        .unwrap();
    let mut bytes = std::fs::read(&cache).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&cache, bytes).unwrap();
    std::fs::remove_dir_all(&out).unwrap();
    let corrupt = bin().args(["certify", "--mode", "ovc"]).args(common).output().unwrap();
    assert_eq!(corrupt.status.code(), Some(4));

    let rep = bin().args(["report", path_str(&tmp.path().join("none.jsonl"))]).output().unwrap();
    assert!(!rep.status.success());
}
