use wavetrunk::verify::{dsp, props, run, Suite};

#[test]
fn dsp_suite_passes() {
    let r = dsp::run().unwrap();
    for c in &r {
        println!("{c}");
    }
    assert!(r.iter().all(|c| c.passed));
}

#[test]
fn props_suite_passes() {
    let r = props::run().unwrap();
    for c in &r {
        println!("{c}");
    }
    assert!(r.iter().all(|c| c.passed));
}

#[test]
fn suite_names_parse() {
    for s in ["gradcheck", "dsp", "props", "all"] {
        s.parse::<Suite>().unwrap();
    }
    assert!("everything".parse::<Suite>().is_err());
}

#[test]
fn corrupted_case_fails_by_name() {
    let r = run(Suite::Gradcheck, Some("sigmoid")).unwrap();
    let failed: Vec<&str> = r.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["gradcheck.sigmoid"]);
}
