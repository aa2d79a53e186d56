use ftlab::data::{linear_probe_auc, synth_generate, ProbeConfig, SyntheticConfig};

#[test]
fn default_synthetic_task_sits_in_the_probe_window() {
    let out = synth_generate(&SyntheticConfig::default()).unwrap();
    let train = out.classification("train").unwrap();
    let test = out.classification("test").unwrap();
    let auc = linear_probe_auc(&train, &test, &ProbeConfig::default()).unwrap();
    println!("linear probe mean AUC on raw pixels: {auc:.4}");
    assert!((0.6..=0.95).contains(&auc), "{auc}");
}
