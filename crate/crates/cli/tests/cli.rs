use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gridshare::allocator::Allocator;
use gridshare::markov::{exact_metrics, stationary_distribution, ArrivalSpec};
use gridshare::{NetworkConfig, PowerFlowModel};

fn gridshare(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridshare"))
        .args(args)
        .current_dir(dir)
        .env_remove("GRIDSHARE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<BTreeMap<String, String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect();
    (header, rows)
}

fn manifest(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

#[test]
fn allocate_prints_linearized_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridshare(
        dir.path(),
        &["allocate", "--model", "linearized", "--stations", "2", "--resistance", "0.1", "--delta", "0.05", "--state", "1,1"],
    );
    assert_eq!(ok(&out).trim(), "0.2700831, 0.1350416");
    let (header, rows) = read_csv(&dir.path().join("gridshare-out/allocation.csv"));
    assert_eq!(header, ["model", "lot", "state", "power"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["power"], "0.2700831");
}

#[test]
fn stationary_birth_death_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridshare(
        dir.path(),
        &["stationary", "--stations", "1", "--capacity", "1", "--lambda", "0.1", "--model", "distflow"],
    );
    ok(&out);
    let (_, rows) = read_csv(&dir.path().join("gridshare-out/sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["mean_number"], "0.1596639");
    assert_eq!(rows[0]["method"], "exact");
    assert_eq!(rows[0]["seed"], "NA");
    let m = manifest(&dir.path().join("gridshare-out/stationary.manifest"));
    assert_eq!(m["capacity"], "1");
    assert!(m.contains_key("timestamp") && m.contains_key("version"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridshare(dir.path(), &["sweep", "--help"]);
    assert!(ok(&out).contains("--grid"));
}

#[test]
fn invalid_input_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridshare(dir.path(), &["allocate", "--delta", "0.9", "--state", "1,1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));

    let out = gridshare(dir.path(), &["allocate", "--stations", "2", "--state", "1,1,1"]);
    assert!(!out.status.success());

    let out = gridshare(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());

    let out = gridshare(dir.path(), &["stationary", "--stations", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("arrival"));
}

#[test]
fn sweep_schema_and_row_order() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gridshare(
        dir.path(),
        &["sweep", "--capacity", "4", "--grid", "0.05:0.15:0.05", "--fraction-1", "0.7,0.3", "--method", "exact"],
    ));
    let (header, rows) = read_csv(&dir.path().join("gridshare-out/sweep.csv"));
    assert_eq!(
        header.join(","),
        "model,method,lot,lambda_lot,total_rate,fraction_1,mean_number,mean_number_ci,mean_time,mean_time_ci,blocking,seed,horizon,burn_in"
    );
    // 2 models x 2 fractions x 3 rates x 2 lots.
    assert_eq!(rows.len(), 24);
    let keys: Vec<(String, f64, f64, u32)> = rows
        .iter()
        .map(|r| {
            (r["model"].clone(), r["fraction_1"].parse().unwrap(), r["total_rate"].parse().unwrap(), r["lot"].parse().unwrap())
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)).then(a.3.cmp(&b.3)));
    assert_eq!(keys, sorted);
    assert_eq!(rows[0]["model"], "distflow");
    assert_eq!(rows[0]["fraction_1"], "0.3000000");
}

#[test]
fn csv_values_round_trip_at_seven_digits() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gridshare(
        dir.path(),
        &["stationary", "--model", "both", "--capacity", "5", "--lambda", "0.12,0.08"],
    ));
    let (_, rows) = read_csv(&dir.path().join("gridshare-out/sweep.csv"));
    assert_eq!(rows.len(), 4);
    let arrivals = ArrivalSpec::from_rates(vec![0.12, 0.08]).unwrap();
    for (i, model) in [PowerFlowModel::Distflow, PowerFlowModel::LinearizedDistflow].into_iter().enumerate() {
        let cfg = NetworkConfig::new(2, 0.1, 0.05, 5, model).unwrap();
        let pi = stationary_distribution(&arrivals, &Allocator::new(cfg)).unwrap();
        let exact = exact_metrics(&pi, &arrivals).unwrap();
        for (j, lot) in exact.iter().enumerate() {
            let row = &rows[2 * i + j];
            assert_eq!(row["model"], model.as_str());
            let close = |cell: &str, want: f64| {
                let got: f64 = row[cell].parse().unwrap();
                assert!((got - want).abs() <= 5e-7 * want.abs(), "{cell}: {got} vs {want}");
            };
            close("mean_number", lot.mean_number.value);
            close("mean_time", lot.mean_charging_time.unwrap().value);
            close("blocking", lot.blocking.value);
        }
    }
}

#[test]
fn rerun_is_byte_identical_and_manifest_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--capacity", "5", "--grid", "0.1,0.2", "--method", "sim", "--horizon", "3000", "--burn-in", "300",
        "--replications", "2", "--batches", "5", "--seed", "42", "--out", "a",
    ];
    ok(&gridshare(dir.path(), &args));
    let mut again = args;
    again[again.len() - 1] = "b";
    ok(&gridshare(dir.path(), &again));
    let a = fs::read(dir.path().join("a/sweep.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/sweep.csv")).unwrap());

    let m = manifest(&dir.path().join("a/sweep.manifest"));
    let mut rebuilt: Vec<String> = vec!["sweep".into()];
    for key in ["model", "stations", "resistance", "delta", "capacity", "grid", "axis", "fraction-1", "method", "seed", "horizon", "burn-in", "replications", "batches"] {
        let value = &m[&key.replace('-', "_")];
        let value = if key == "model" && value.contains(',') { "both".to_string() } else { value.clone() };
        rebuilt.push(format!("--{key}"));
        rebuilt.push(value);
    }
    rebuilt.extend(["--out".into(), "c".into()]);
    let rebuilt: Vec<&str> = rebuilt.iter().map(String::as_str).collect();
    ok(&gridshare(dir.path(), &rebuilt));
    assert_eq!(a, fs::read(dir.path().join("c/sweep.csv")).unwrap());
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--capacity", "3", "--lambda", "0.2", "--horizon", "2000", "--burn-in", "100"];
    let run = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gridshare"));
        cmd.args(base).args(extra).args(["--out", out]).current_dir(dir.path());
        match env {
            Some(v) => cmd.env("GRIDSHARE_SEED", v),
            None => cmd.env_remove("GRIDSHARE_SEED"),
        };
        let o = cmd.output().unwrap();
        ok(&o);
        fs::read_to_string(dir.path().join(out).join("sweep.csv")).unwrap()
    };
    fs::write(dir.path().join("cfg.toml"), "seed = 9\n").unwrap();

    let env7 = run(&[], Some("7"), "env7");
    let flag7 = run(&["--seed", "7"], Some("3"), "flag7");
    assert_eq!(env7, flag7);
    assert!(env7.contains(",7,"));
    let cfg = run(&["--config", "cfg.toml"], Some("7"), "cfg");
    assert!(cfg.contains(",9,"));
    let flag_over_cfg = run(&["--config", "cfg.toml", "--seed", "5"], None, "both");
    assert!(flag_over_cfg.contains(",5,"));
    let default = run(&[], None, "default");
    assert!(default.contains(",1,"));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "model = \"linearized\"\nstations = 1\ncapacity = 1\nlambda = [0.1]\n")
        .unwrap();
    let out = gridshare(dir.path(), &["stationary", "--config", "run.toml"]);
    ok(&out);
    let (_, rows) = read_csv(&dir.path().join("gridshare-out/sweep.csv"));
    assert_eq!(rows[0]["model"], "linearized");

    fs::write(dir.path().join("bad.toml"), "stationz = 1\n").unwrap();
    let out = gridshare(dir.path(), &["stationary", "--config", "bad.toml", "--lambda", "0.1"]);
    assert!(!out.status.success());
}

#[test]
fn critical_and_heatmap_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&gridshare(dir.path(), &["critical", "--capacity", "10", "--grid", "0.05:0.5:0.05"]));
    assert!(out.contains("critical"));
    let (header, rows) = read_csv(&dir.path().join("gridshare-out/critical.csv"));
    assert_eq!(header.join(","), "model,fraction_1,critical_rate,grid_step");
    assert_eq!(rows.len(), 2);
    assert!(dir.path().join("gridshare-out/critical.manifest").exists());

    ok(&gridshare(
        dir.path(),
        &["heatmap", "--capacity", "5", "--total-grid", "0,0.4", "--fraction-grid", "0.25,0.75"],
    ));
    let (header, rows) = read_csv(&dir.path().join("gridshare-out/heatmap.csv"));
    assert_eq!(header.join(","), "model,total_rate,fraction_1,total_mean_number,ci");
    assert_eq!(rows.len(), 8);
    for r in rows.iter().filter(|r| r["total_rate"] == "0") {
        assert_eq!(r["total_mean_number"], "0");
    }
}
