use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use spedn::Fixture;

fn spedn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spedn"));
    for (k, _) in std::env::vars() {
        if k.starts_with("SPEDN_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    spedn().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn assert_error_record(o: &Output, kind: &str) {
    assert_eq!(o.status.code(), Some(2), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} message=\"")), "{err}");
}

#[test]
fn execute_counts_california_rivers() {
    let kg = Fixture::geo().kg;
    let rivers = kg
        .facts()
        .iter()
        .filter(|(r, s, o)| r == "loc" && o == "california" && kg.type_of(s) == Some("river"))
        .count();
    let o = run(&[
        "execute",
        "aggr(count, :river) relation(river, loc, :state) entity(state, id, 'california')",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), rivers.to_string());
}

#[test]
fn empty_parse_is_a_syntax_error() {
    assert_error_record(&run(&["parse", ""]), "syntax");
}

#[test]
fn parse_prints_canonically() {
    let o = run(&["parse", "ENTITY( state ,id,  'Texas' )  relation(city,loc,:state)"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "entity(state, id, 'texas') relation(city, loc, :state)\n");
}

#[test]
fn convert_reproduces_exemplars() {
    let o = run(&["convert", "geo", data("table2.geo.txt").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o),
        "literal(major, :city) relation(city, loc, :state) ordinal(smallest, :state) relation(state, loc, :country) entity(country, id, 'usa')\n"
    );
    let o = run(&["convert", "atis", data("table2.atis.txt").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o),
        "entity(flight) relation(flight, from, :city) entity(city, id, 'dallas') relation(flight, to, :city) entity(city, id, 'pittsburgh') entity(flight, day_number, '08') entity(flight, month, 'july')\n"
    );
}

#[test]
fn assemble_reports_shape() {
    let o = run(&[
        "assemble",
        "aggr(count, :city) join(intersection, :city, :city) entity(city, major, 1) relation(city, loc, :state) entity(state, id, 'pennsylvania')",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).ends_with("shape=aggr(join(entity, relation(entity)))\n"));
}

#[test]
fn failures_are_single_line_records() {
    assert_error_record(&run(&["assemble", "relation(city, loc, :state)"]), "assembly");
    assert_error_record(&run(&["execute", "entity(planet)"]), "schema");
    assert_error_record(&run(&["--kg", "/nonexistent/kg.txt", "kg", "validate"]), "kg");
    assert_error_record(&run(&["frobnicate"]), "usage");
    assert_error_record(&run(&["ask", "what is texas"]), "usage");
}

#[test]
fn kg_commands_and_env_overrides() {
    let o = run(&["kg", "validate"]);
    assert_eq!(stdout(&o), "ok\n");
    let geo = stdout(&run(&["kg", "stats"]));
    assert!(geo.contains("type.state="));
    let atis = spedn().args(["kg", "stats"]).env("SPEDN_DOMAIN", "atis").output().unwrap();
    assert!(stdout(&atis).contains("type.flight="), "{}", stderr(&atis));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("geo.kg");
    std::fs::write(&path, Fixture::geo().kg.serialize()).unwrap();
    let o = spedn().args(["kg", "stats"]).env("SPEDN_KG", &path).output().unwrap();
    assert_eq!(stdout(&o), geo);
}

#[test]
fn stats_on_a_generated_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.tsv");
    let o = run(&["generate", "--count", "25", "--seed", "3"]);
    std::fs::write(&corpus, stdout(&o)).unwrap();
    let s = stdout(&run(&["stats", corpus.to_str().unwrap()]));
    assert!(s.starts_with("examples=25\n"), "{s}");
}

#[test]
fn train_eval_ask_and_repl() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.tsv");
    let ckpt = dir.path().join("m.ckpt");
    std::fs::write(&corpus, stdout(&run(&["generate", "--count", "12", "--seed", "5"]))).unwrap();
    let (c, k) = (corpus.to_str().unwrap(), ckpt.to_str().unwrap());
    let o = run(&[
        "train", "--train", c, "--epochs", "3", "--hops", "1", "--node-dim", "8", "--hidden", "8", "--ckpt", k, "--mp",
        "--controller", "--beam", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stdout(&o);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 3, "{log}");
    assert!(log.contains("mode=+mp+controller"));

    let eval = run(&["eval", c, "--ckpt", k, "--beam", "2"]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let gold = run(&["ask", "--gold", c, "--ckpt", k, "--beam", "2"]);
    assert_eq!(stdout(&eval), stdout(&gold));
    assert!(stdout(&eval).contains("assemblable=1.0000"));

    let one = run(&["ask", "how many rivers are in texas", "--ckpt", k]);
    assert!(one.status.success(), "{}", stderr(&one));
    assert!(stdout(&one).starts_with("blocks="));

    let mut child = spedn()
        .args(["repl", "--ckpt", k])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b":blocks\nwhat is the capital of texas\n:blocks\n:graph\n:trace\n:nope\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    let text = stdout(&o);
    assert!(text.starts_with("no question yet\nblocks="), "{text}");
    assert!(text.contains("[0] "), "{text}");
    assert!(text.ends_with("unknown command :nope\n"), "{text}");
}
