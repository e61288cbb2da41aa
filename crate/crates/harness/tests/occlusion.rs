use ctxtrack_core::model::TrackerModel;
use ctxtrack_harness::config::ExperimentConfig;
use ctxtrack_harness::synthetic::gen_sequence;
use ctxtrack_harness::tracker::run_tracker;
use ctxtrack_harness::train::toy_train;

const CONFIG: &str = r#"
seed = 7
[optimizer]
lr = 0.003
[sequence]
frames = 40
occlusion = [20, 30]
"#;

#[test]
fn p_mean_keeps_the_template_through_occlusion() {
    let mut cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
    let seq = gen_sequence(&cfg.sequence).unwrap();
    let trained = toy_train(&cfg, &seq, 0).unwrap();
    let model = TrackerModel::new(cfg.model_config().unwrap()).unwrap();
    let occluded = |frame: usize| (20..30).contains(&frame);

    let run = run_tracker(&model, &trained.params, &seq, &cfg, "occ").unwrap();
    let inside: Vec<usize> = run.records.iter().filter(|r| r.updated && occluded(r.frame)).map(|r| r.frame).collect();
    assert!(inside.is_empty(), "p-mean updated at frames {inside:?}");

    cfg.update.strategy = "never".into();
    assert_eq!(run_tracker(&model, &trained.params, &seq, &cfg, "occ").unwrap().updates(), 0);
    cfg.update.strategy = "always-last".into();
    let always = run_tracker(&model, &trained.params, &seq, &cfg, "occ").unwrap();
    assert_eq!(always.records.iter().filter(|r| r.updated && occluded(r.frame)).count(), 10);
}
