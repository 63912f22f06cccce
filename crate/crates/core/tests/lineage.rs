use gdial::config::RunConfig;
use gdial::corpus::synthetic::{CrossLingualConfig, CrossLingualSetup};
use gdial::pipeline::Pipeline;
use gdial::schedule::{make_plan, run_plan, run_stage, Corpora, RunStore, Variant};

fn small(extra: &[(&str, &str)]) -> RunConfig {
    let base = [
        ("model.d_model", "16"),
        ("model.n_heads", "2"),
        ("model.d_ff", "32"),
        ("model.n_layers", "1"),
        ("retriever.epochs", "2"),
        ("reranker.epochs", "1"),
        ("reranker.passages", "4"),
        ("generator.epochs", "1"),
        ("generator.beam_size", "2"),
    ];
    let ov: Vec<(String, String)> = base.iter().chain(extra).map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::desk().with_overrides(&ov).unwrap()
}

fn corpora(cfg: &RunConfig) -> Corpora {
    let setup = CrossLingualSetup::generate(
        3,
        &CrossLingualConfig {
            n_topics: 8,
            n_concepts: 80,
            high_resource_turns_per_language: 20,
            downstream_train_turns_per_language: 8,
            dev_turns_per_language: 6,
            ..CrossLingualConfig::default()
        },
    );
    Corpora::from_cross_lingual(&setup, cfg, 3).unwrap()
}

#[test]
fn rerunning_the_last_stage_from_its_parent_reproduces_the_run() {
    let cfg = small(&[]);
    let data = corpora(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let plan = make_plan(Variant::ThreeStage);
    let (record, _) = run_plan(&plan, &data, &cfg, 9, &RunStore::at(tmp.path())).unwrap();
    assert!(record.lineage_unbroken());
    assert_eq!(record.stages[1].parents, record.stages[0].checkpoints);

    let mut model = Pipeline::load(&tmp.path().join("stage2-t_translated")).unwrap();
    assert_eq!(model.checkpoint_ids(), record.stages[1].checkpoints);
    let again = run_stage(&plan, 2, &data, &cfg, 9, &mut model).unwrap();
    assert_eq!(again.checkpoints, record.stages[2].checkpoints);
    assert_eq!(serde_json::to_string(&again.metrics).unwrap(), serde_json::to_string(&record.stages[2].metrics).unwrap());

    // The final checkpoint on disk is the one the record names.
    let last = Pipeline::load(&tmp.path().join("stage3-f_downstream")).unwrap();
    assert_eq!(last.checkpoint_ids(), record.stages[2].checkpoints);

    // A resumed run reuses every stored stage and yields the same record.
    let (resumed, _) = run_plan(&plan, &data, &cfg, 9, &RunStore::at(tmp.path())).unwrap();
    assert_eq!(serde_json::to_string(&resumed).unwrap(), serde_json::to_string(&record).unwrap());
}

#[test]
fn zero_epoch_plan_keeps_every_lineage_link() {
    let cfg = small(&[("retriever.epochs", "0"), ("reranker.epochs", "0"), ("generator.epochs", "0")]);
    let data = corpora(&cfg);
    let (record, _) = run_plan(&make_plan(Variant::ThreeStage), &data, &cfg, 4, &RunStore::default()).unwrap();
    assert_eq!(record.stages.len(), 3);
    assert!(record.lineage_unbroken());
    for s in &record.stages {
        assert!(s.training.retriever.epochs.is_empty());
        assert!(s.checkpoints.iter().all(|c| !c.is_empty()));
    }
}
