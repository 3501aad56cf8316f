use std::path::PathBuf;
use std::process::Command;

const EXAMPLES: &[&str] = &[
    "simulate_dataset",
    "cirls_calibration",
    "cirls_closed_form",
    "cam_calibration",
    "mecanum_calibration",
    "gp_motion_model",
    "linear_motion_model",
    "trajectory_metrics",
    "scan_matching",
    "constrained_quadratic",
];

/// Example binaries sit next to the test binaries' `deps` directory.
fn example_path(name: &str) -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let dir = exe.parent().and_then(|d| d.parent()).unwrap().join("examples");
    dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

#[test]
fn examples_run_cleanly() {
    let missing: Vec<&str> = EXAMPLES.iter().copied().filter(|e| !example_path(e).exists()).collect();
    if !missing.is_empty() {
        // `cargo test --test examples` does not build examples; a plain `cargo test` does
        eprintln!("skipping unbuilt examples: {missing:?}");
    }
    for name in EXAMPLES.iter().filter(|e| !missing.contains(e)) {
        let out = Command::new(example_path(name)).output().unwrap();
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stdout.is_empty(), "{name} printed nothing");
    }
}
