use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
run.seed = 3
run.jobs = 1
synth.n_train = 40
synth.n_dev = 4
synth.n_general_test = 4
synth.n_bias_test = 6
model.d_model = 16
model.d_ff = 16
model.num_heads = 2
model.num_encoder_layers = 1
model.num_decoder_layers = 1
model.bias_lstm_hidden = 16
train.batch_size = 8
train.baseline_epochs = 1
train.cba_epochs = 1
decode.beam_size = 3
";

fn cba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CBA_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn datagen_is_deterministic_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&cba(&["datagen", "--config", s(&cfg), "--out", s(&a)]));
    ok(&cba(&["datagen", "--config", s(&cfg), "--out", s(&b)]));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 12, "{names:?}");
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let again = cba(&["datagen", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&cba(&["datagen", "--config", s(&cfg), "--out", s(&a), "--force"]));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model.d_model = 16\n").unwrap();
    let out = cba(&["datagen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.seed"));

    fs::write(&cfg, "run.seed = 1\nmodel.dmodel = 16\n").unwrap();
    let out = cba(&["datagen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.dmodel"));

    let out = cba(&["datagen", "--config", s(&dir.path().join("missing.cfg")), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_scores_a_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.txt");
    let hyps = dir.path().join("hyps.txt");
    let assign = dir.path().join("a.assign");
    fs::write(&refs, "u1\tcall hanna now\nu2\tgo to new york\n").unwrap();
    fs::write(&hyps, "u1\tcall anna now\t-1.0\t1\nu2\tgo to new york\t-0.5\t1\n").unwrap();
    fs::write(&assign, "u1\thanna\nu2\tnew york\n").unwrap();
    let table = dir.path().join("per_utt.tsv");
    let out = cba(&[
        "eval",
        "--refs",
        s(&refs),
        "--hyps",
        s(&hyps),
        "--bias-assignments",
        s(&assign),
        "--per-utterance",
        s(&table),
    ]);
    ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("WER\t0.142857\nRECALL\t0.500000\n"), "{stdout}");
    let table = fs::read_to_string(&table).unwrap();
    assert!(table.contains("u1\t1\t0\t0\t3\t0\t1"), "{table}");
}

#[test]
fn bias_build_from_phrase_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("pool.bias");
    fs::write(&src, "alpha\nbeta gamma\ndelta\n").unwrap();
    let out = dir.path().join("two.bias");
    ok(&cba(&["bias-build", "--phrases", s(&src), "--count", "2", "--out", s(&out)]));
    assert_eq!(fs::read_to_string(&out).unwrap(), "alpha\nbeta gamma\n");
    let too_many = cba(&["bias-build", "--phrases", s(&src), "--count", "9", "--out", s(&out)]);
    assert_eq!(too_many.status.code(), Some(2));
}

#[test]
fn train_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let exp = dir.path().join("exp");
    ok(&cba(&["datagen", "--config", s(&cfg), "--out", s(&data)]));
    ok(&cba(&["train", "--config", s(&cfg), "--data", s(&data), "--stage", "baseline", "--out", s(&exp)]));
    let no_init = cba(&["train", "--config", s(&cfg), "--data", s(&data), "--stage", "cba", "--out", s(&exp)]);
    assert_eq!(no_init.status.code(), Some(2));
    ok(&cba(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--stage",
        "cba",
        "--init",
        s(&exp.join("baseline.ckpt")),
        "--out",
        s(&exp),
    ]));
    assert!(exp.join("cba.log").exists());

    let tok = data.join("bpe.model");
    let ckpt = exp.join("cba.ckpt");
    let feats = data.join("bias_test.feats");
    let list = data.join("bias_test.bias");
    let decode = |extra: &[&str], out: &Path| {
        let mut args = vec![
            "decode",
            "--config",
            s(&cfg),
            "--tokenizer",
            s(&tok),
            "--checkpoint",
            s(&ckpt),
            "--features",
            s(&feats),
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        cba(&args)
    };
    let plain = dir.path().join("plain.hyp");
    let zero = dir.path().join("zero.hyp");
    ok(&decode(&[], &plain));
    ok(&decode(&["--bias-list", s(&list), "--bias-score", "0"], &zero));
    assert_eq!(fs::read(&plain).unwrap(), fs::read(&zero).unwrap());

    let nbest = dir.path().join("nbest.hyp");
    ok(&decode(&["--nbest", "--jobs", "2"], &nbest));
    let text = fs::read_to_string(&nbest).unwrap();
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 4);
    assert_eq!(first[3], "1");
    assert!(text.lines().count() > 6);

    let report = dir.path().join("report.txt");
    ok(&cba(&[
        "eval",
        "--refs",
        s(&data.join("bias_test.txt")),
        "--hyps",
        s(&nbest),
        "--bias-assignments",
        s(&data.join("bias_test.assign")),
        "--out",
        s(&report),
    ]));
    assert!(fs::read_to_string(&report).unwrap().starts_with("WER\t"));

    let missing = decode(&["--bias-list", s(&dir.path().join("nope.bias"))], &zero);
    assert_eq!(missing.status.code(), Some(2));
}
