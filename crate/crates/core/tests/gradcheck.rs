use wavetrunk::verify::gradcheck;

#[test]
fn every_op_matches_central_differences() {
    let results = gradcheck::run(None).unwrap();
    assert_eq!(results.len(), gradcheck::case_names().len());
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn corrupted_gradient_is_reported() {
    let results = gradcheck::run(Some("gated_residual")).unwrap();
    for r in &results {
        let corrupted = r.name == "gradcheck.gated_residual";
        assert_eq!(r.passed, !corrupted, "{r}");
    }
}
