use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consentrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const SMALL_CSV: &str = "# user,event,value\n0,0,5\n0,1,3\n1,0,4\n1,2,2\n2,1,1\n2,2,5\n3,0,2\n3,2,4\n";

fn write_matrix(dir: &Path) {
    fs::write(dir.join("ratings.csv"), SMALL_CSV).unwrap();
}

#[test]
fn ingest_valid_malformed_and_empty() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write_matrix(d);
    let ok = run(d, &["ingest", "--input", "ratings.csv", "--out", "m.csv"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(stdout(&ok).contains("8 observations"));
    let back = fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(back.starts_with("# users=4 events=3"));

    fs::write(d.join("bad.csv"), "0,0,5\n1,x,3\n").unwrap();
    let bad = run(d, &["ingest", "--input", "bad.csv", "--out", "m2.csv"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));

    fs::write(d.join("empty.csv"), "").unwrap();
    let empty = run(d, &["ingest", "--input", "empty.csv", "--out", "m3.csv"]);
    assert_eq!(code(&empty), 1);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&run(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(tmp.path(), &["train", "--matrix", "x.csv", "--bogus"])), 2);
    assert_eq!(code(&run(tmp.path(), &["train", "--matrix", "x.csv", "--out", "m.json", "--ledger", "l"])), 2);
    assert_eq!(code(&run(tmp.path(), &["--help"])), 0);
}

#[test]
fn train_eval_recommend_without_ledger() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write_matrix(d);
    let args = [
        "train", "--matrix", "ratings.csv", "--k", "2", "--epochs", "50", "--lr", "0.05", "--seed", "3",
        "--holdout", "0", "--out", "model.json", "--report", "report.json",
    ];
    let first = run(d, &args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(stdout(&first).contains("final objective"));
    assert!(stdout(&first).contains("holdout rmse: n/a"));
    let model_a = fs::read(d.join("model.json")).unwrap();
    let report_a = fs::read(d.join("report.json")).unwrap();
    assert_eq!(code(&run(d, &args)), 0);
    assert_eq!(fs::read(d.join("model.json")).unwrap(), model_a);
    assert_eq!(fs::read(d.join("report.json")).unwrap(), report_a);

    let report: Value = serde_json::from_slice(&report_a).unwrap();
    assert_eq!(report["loss_history"].as_array().unwrap().len(), 50);

    let eval = run(d, &["eval", "--model", "model.json", "--matrix", "ratings.csv"]);
    assert_eq!(code(&eval), 0);
    let eval: Value = serde_json::from_str(&stdout(&eval)).unwrap();
    assert_eq!(eval["n_observations"], 8);
    assert!(eval["rmse"].as_f64().unwrap().is_finite());

    let rec = run(d, &["recommend", "--model", "model.json", "--matrix", "ratings.csv", "--user", "0", "--n", "5"]);
    assert_eq!(code(&rec), 0);
    let rec: Value = serde_json::from_str(&stdout(&rec)).unwrap();
    // User 0 rated events 0 and 1, so only event 2 remains.
    assert_eq!(rec["events"], serde_json::json!([2]));

    let out_of_range = run(d, &["recommend", "--model", "model.json", "--matrix", "ratings.csv", "--user", "9"]);
    assert_eq!(code(&out_of_range), 1);
}

fn setup_ledger(d: &Path) {
    assert_eq!(code(&run(d, &["ledger", "init", "--ledger", "chain.jsonl", "--timestamp", "100"])), 0);
    assert_eq!(code(&run(d, &["ledger", "keygen", "--keys", "keys.json", "--users", "4", "--seed", "1"])), 0);
}

#[test]
fn consent_gated_training_and_rewards() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write_matrix(d);
    setup_ledger(d);

    let train = |out: &str| {
        run(
            d,
            &[
                "train", "--matrix", "ratings.csv", "--ledger", "chain.jsonl", "--keys", "keys.json", "--holdout", "0",
                "--reward", "5", "--timestamp", "200", "--out", out,
            ],
        )
    };
    let none = train("m0.json");
    assert_eq!(code(&none), 1);
    assert!(stderr(&none).contains("empty"), "{}", stderr(&none));

    for user in ["1", "3"] {
        let c = run(
            d,
            &["ledger", "consent", "--ledger", "chain.jsonl", "--keys", "keys.json", "--user", user, "--grant", "--timestamp", "150"],
        );
        assert_eq!(code(&c), 0, "{}", stderr(&c));
    }
    let gated = train("m1.json");
    assert_eq!(code(&gated), 0, "{}", stderr(&gated));
    assert!(stdout(&gated).contains("2 consenting users"));

    let balance = |user: &str| -> Value {
        let o = run(d, &["ledger", "balance", "--ledger", "chain.jsonl", "--keys", "keys.json", "--user", user]);
        assert_eq!(code(&o), 0);
        serde_json::from_str(&stdout(&o)).unwrap()
    };
    assert_eq!(balance("1")["token_balance"], 5);
    assert_eq!(balance("1")["consent"], true);
    assert_eq!(balance("0")["token_balance"], 0);
    assert_eq!(balance("0")["consent"], false);

    let verify = run(d, &["ledger", "verify", "--ledger", "chain.jsonl"]);
    assert_eq!(code(&verify), 0);
    assert_eq!(stdout(&verify).trim(), "valid");
}

#[test]
fn ledger_verify_detects_tampering() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    setup_ledger(d);
    let v = run(d, &["ledger", "verify", "--ledger", "chain.jsonl"]);
    assert_eq!((code(&v), stdout(&v).trim().to_string()), (0, "valid".to_string()));

    for ts in ["110", "120"] {
        let o = run(
            d,
            &["ledger", "append", "--ledger", "chain.jsonl", "--keys", "keys.json", "--user", "2", "--kind", "post", "--payload", "hi", "--timestamp", ts],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let text = fs::read_to_string(d.join("chain.jsonl")).unwrap();
    let tampered = text.replacen("\"timestamp\":110", "\"timestamp\":111", 1);
    assert_ne!(tampered, text);
    fs::write(d.join("chain.jsonl"), tampered).unwrap();

    let v = run(d, &["ledger", "verify", "--ledger", "chain.jsonl"]);
    assert_eq!(code(&v), 1);
    assert!(stdout(&v).contains("invalid at block 1"), "{}", stdout(&v));

    let refused = run(
        d,
        &["ledger", "append", "--ledger", "chain.jsonl", "--keys", "keys.json", "--user", "2", "--kind", "post", "--payload", "x"],
    );
    assert_eq!(code(&refused), 1);
}

#[test]
fn ledger_credit_rejects_bad_amounts() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    setup_ledger(d);
    let append = |payload: &str| {
        run(
            d,
            &["ledger", "append", "--ledger", "chain.jsonl", "--keys", "keys.json", "--user", "0", "--kind", "credit", "--payload", payload, "--timestamp", "101"],
        )
    };
    assert_eq!(code(&append("-4")), 1);
    assert_eq!(code(&append("lots")), 1);
    assert_eq!(code(&append("7")), 0);
    assert_eq!(code(&run(d, &["ledger", "init", "--ledger", "chain.jsonl"])), 1);
}

#[test]
fn export_import_round_trip() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    setup_ledger(d);
    let steps: [&[&str]; 4] = [
        &["consent", "--user", "2", "--grant"],
        &["append", "--user", "2", "--kind", "credit", "--payload", "9"],
        &["append", "--user", "1", "--kind", "post", "--payload", "other user"],
        &["append", "--user", "2", "--kind", "credit", "--payload", "4"],
    ];
    for (i, step) in steps.iter().enumerate() {
        let ts = (200 + i).to_string();
        let mut args = vec!["ledger", step[0], "--ledger", "chain.jsonl", "--keys", "keys.json", "--timestamp", &ts];
        args.extend_from_slice(&step[1..]);
        let o = run(d, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let export = run(d, &["ledger", "export", "--ledger", "chain.jsonl", "--keys", "keys.json", "--user", "2", "--out", "p.json"]);
    assert_eq!(code(&export), 0, "{}", stderr(&export));

    let fresh = TempDir::new().unwrap();
    fs::copy(d.join("p.json"), fresh.path().join("p.json")).unwrap();
    let import = run(fresh.path(), &["ledger", "import", "--profile", "p.json", "--out", "acct.json"]);
    assert_eq!(code(&import), 0, "{}", stderr(&import));
    let imported: Value = serde_json::from_str(&stdout(&import)).unwrap();

    let bal = run(d, &["ledger", "balance", "--ledger", "chain.jsonl", "--keys", "keys.json", "--user", "2"]);
    let original: Value = serde_json::from_str(&stdout(&bal)).unwrap();
    assert_eq!(imported["token_balance"], original["token_balance"]);
    assert_eq!(imported["token_balance"], 13);
    assert_eq!(imported["consent"], original["consent"]);
    assert_eq!(imported["n_blocks"], 3);

    let text = fs::read_to_string(fresh.path().join("p.json")).unwrap();
    fs::write(fresh.path().join("p.json"), text.replacen("\"timestamp\": 201", "\"timestamp\": 202", 1)).unwrap();
    assert_eq!(code(&run(fresh.path(), &["ledger", "import", "--profile", "p.json"])), 1);
}

#[test]
fn simulate_rounds_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let zero = run(d, &["simulate", "--users", "12", "--events", "12", "--rounds", "0", "--epochs", "20", "--out", "z.json"]);
    assert_eq!(code(&zero), 0, "{}", stderr(&zero));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(d.join("z.json")).unwrap()).unwrap();
    let metrics = metrics.as_array().unwrap();
    assert_eq!(metrics.len(), 1);
    assert_eq!(metrics[0]["round"], 0);
    for key in ["fragmentation_index", "n_observations", "rmse_holdout"] {
        assert!(metrics[0].get(key).is_some(), "missing {key}");
    }

    let args = |out: &'static str, csv: &'static str| {
        vec!["simulate", "--users", "16", "--events", "16", "--rounds", "2", "--epochs", "30", "--seed", "4", "--out", out, "--csv", csv]
    };
    assert_eq!(code(&run(d, &args("a.json", "a.csv"))), 0);
    assert_eq!(code(&run(d, &args("b.json", "b.csv"))), 0);
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
    let csv = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "round,fragmentation_index,n_observations,rmse_holdout");
    assert_eq!(csv.lines().count(), 4);

    assert_eq!(code(&run(d, &["simulate", "--cross-rate", "0.9", "--in-rate", "0.1", "--out", "c.json"])), 1);
}
