use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sceneflux_core::egomotion::{EgoTrace, RigConfig};
use sceneflux_core::flowfield::{estimate_flow, load_flow, FlowParams};
use sceneflux_core::netpbm::{read_frame, write_frame};
use sceneflux_core::synth::{write_rig_sequence, TranslatingSquare};

fn sceneflux(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sceneflux")).args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flow_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let sq = TranslatingSquare { width: 48, height: 48, origin: (12.0, 12.0), side: 16.0, velocity: (1.0, 0.5), seed: 5 };
    let frames = sq.frames(2);
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    write_frame(&a, &frames[0]).unwrap();
    write_frame(&b, &frames[1]).unwrap();
    let out = dir.path().join("flow/ab.flo");
    assert!(sceneflux(&["flow", "--prev", s(&a), "--next", s(&b), "--out", s(&out)]).status.success());
    let (fa, fb) = (read_frame(&a).unwrap(), read_frame(&b).unwrap());
    let direct = estimate_flow(&fa, &fb, &FlowParams::default()).unwrap().flow;
    let lib_path = dir.path().join("lib.flo");
    sceneflux_core::flowfield::save_flow(&lib_path, &direct).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&lib_path).unwrap());
    assert_eq!(load_flow(&out).unwrap(), direct);
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    assert!(sceneflux(&["synth", "--fixture", "block", "--frames", "8", "--out", s(&frames)]).status.success());
    for name in ["a", "b"] {
        let cfg = dir.path().join(format!("{name}.cfg"));
        fs::write(&cfg, format!("paths.frames = frames\npaths.out = out_{name}\nstages.fluid = off\nrun.seed = 7\n")).unwrap();
        let res = sceneflux(&["run", "--config", s(&cfg)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stdout));
    }
    let a = fs::read_to_string(dir.path().join("out_a/manifest.txt")).unwrap();
    let b = fs::read_to_string(dir.path().join("out_b/manifest.txt")).unwrap();
    assert!(a.lines().count() > 10);
    assert_eq!(a, b);
}

#[test]
fn ego_recovers_rig_motion() {
    let dir = tempfile::tempdir().unwrap();
    let rig = RigConfig::four_camera(32, 24, 30.0);
    let (t, w) = ([0.2, -0.1, 0.05], [0.0, 0.01, -0.02]);
    write_rig_sequence(dir.path(), &rig, &[(t, w)], 4.0).unwrap();
    let flows: Vec<String> = (0..rig.len()).map(|k| dir.path().join(format!("0001.{k}.flo")).to_str().unwrap().to_owned()).collect();
    let out = dir.path().join("ego.csv");
    let rig_path = dir.path().join("rig.txt");
    let mut args = vec!["ego", "--rig", s(&rig_path), "--out", s(&out), "--depth-dir", s(dir.path()), "--flows"];
    args.extend(flows.iter().map(String::as_str));
    assert!(sceneflux(&args).status.success());
    let trace = EgoTrace::parse_csv(&fs::read_to_string(&out).unwrap()).unwrap();
    let (_, e) = trace.entries()[0];
    assert!(e.scale_known);
    for i in 0..3 {
        assert!((e.translation[i] - t[i]).abs() < 1e-3, "T {:?}", e.translation);
        assert!((e.rotation[i] - w[i]).abs() < 1e-4, "w {:?}", e.rotation);
    }
}

#[test]
fn fluid_reads_frozen_volume() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    assert!(sceneflux(&["synth", "--fixture", "square", "--frames", "4", "--out", s(&frames)]).status.success());
    let out = dir.path().join("out");
    let res = sceneflux(&["freeze", "--frames", s(&frames), "--out", s(&out)]);
    assert!(res.status.success());
    let volume = out.join("freeze/volume.csv");
    assert!(volume.is_file());
    let fluid_out = dir.path().join("fluid");
    // convergence is reported through the exit code; only the outputs are checked here
    sceneflux(&["fluid", "--targets", s(&volume), "--out", s(&fluid_out)]);
    for f in ["fluid/state.csv", "fluid/cross_section.csv", "fluid/frame.ppm", "manifest.txt"] {
        assert!(fluid_out.join(f).is_file(), "{f}");
    }
}

#[test]
fn bad_arguments_fail() {
    assert!(!sceneflux(&["run", "--config", "/definitely/not/here.cfg"]).status.success());
    assert!(!sceneflux(&["synth", "--fixture", "square", "--frames", "0", "--out", "/tmp/unused"]).status.success());
}
