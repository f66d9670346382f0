use std::path::{Path, PathBuf};
use std::time::Duration;

use mergebench::ehr::PromptTemplate;
use mergebench::merge::{MergeMethod, MergeRecipe, SlerpOptions};
use mergebench::sweep::{
    evaluate_external, grid_sweep_maps, EvalTask, Example, ExternalEvaluator, LambdaGrid, MetricSpec, SweepError,
    SweepOptions,
};
use mergebench::tensor_store::{Tensor, TensorMap};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn fold_file(dir: &Path, ids: &[&str]) -> PathBuf {
    let path = dir.join("fold.tsv");
    let body: String = ids.iter().map(|id| format!("{id}\t0\tsome text\n")).collect();
    std::fs::write(&path, body).unwrap();
    path
}

fn checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("ckpt.safetensors");
    std::fs::write(&path, b"not read by the stub").unwrap();
    path
}

#[test]
fn stub_command_predictions_are_parsed() {
    let dir = tempfile::tempdir().unwrap();
    let fold = fold_file(dir.path(), &["a", "b", "c"]);
    let out = dir.path().join("pred.tsv");
    let cmd = format!(
        "cp '{}' {{out}} # {{checkpoint}} {{fold}}",
        fixture("predictions.tsv").display()
    );
    let records = evaluate_external(&checkpoint(dir.path()), &fold, &cmd, &out, None).unwrap();
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn out_placeholder_is_appended_when_absent() {
    let dir = tempfile::tempdir().unwrap();
    let fold = fold_file(dir.path(), &["a"]);
    let out = dir.path().join("pred.tsv");
    let cmd = format!(
        "sh -c 'cp \"$0\" \"$3\"' '{}' {{checkpoint}} {{fold}}",
        fixture("predictions.tsv").display()
    );
    let records = evaluate_external(&checkpoint(dir.path()), &fold, &cmd, &out, None).unwrap();
    assert_eq!(records.len(), 1);
}

#[test]
fn failing_command_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let fold = fold_file(dir.path(), &["a"]);
    let out = dir.path().join("pred.tsv");
    let err = evaluate_external(
        &checkpoint(dir.path()),
        &fold,
        "exit 1 # {checkpoint} {fold}",
        &out,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, SweepError::EvaluatorFailure(_)), "{err}");
}

#[test]
fn missing_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let fold = fold_file(dir.path(), &["a", "zz"]);
    let out = dir.path().join("pred.tsv");
    let cmd = format!(
        "cp '{}' {{out}} # {{checkpoint}} {{fold}}",
        fixture("predictions.tsv").display()
    );
    let err = evaluate_external(&checkpoint(dir.path()), &fold, &cmd, &out, None).unwrap_err();
    match err {
        SweepError::BadPredictionsFormat { reason, .. } => assert!(reason.contains("zz"), "{reason}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn slow_command_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let fold = fold_file(dir.path(), &["a"]);
    let out = dir.path().join("pred.tsv");
    let err = evaluate_external(
        &checkpoint(dir.path()),
        &fold,
        "sleep 5 # {checkpoint} {fold}",
        &out,
        Some(Duration::from_millis(200)),
    )
    .unwrap_err();
    assert!(matches!(err, SweepError::Timeout(_)), "{err}");
}

#[test]
fn template_without_placeholders_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let fold = fold_file(dir.path(), &["a"]);
    let err = evaluate_external(&checkpoint(dir.path()), &fold, "true", &dir.path().join("o"), None).unwrap_err();
    assert!(matches!(err, SweepError::EvaluatorFailure(_)));
}

fn scalar(v: f32) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("x", Tensor::from_f32(vec![1], &[v]).unwrap());
    m
}

#[test]
fn sweep_runs_an_external_scorer_on_prompted_folds() {
    let dir = tempfile::tempdir().unwrap();
    let examples: Vec<Example> = (0..8)
        .map(|i| Example {
            id: format!("e{i}"),
            label: (i % 2) as u8,
            text: format!("patient {i}"),
        })
        .collect();
    let task = EvalTask::new(examples, PromptTemplate::Mortality, 2).unwrap();
    let recipe = MergeRecipe {
        inputs: vec!["a".into(), "b".into()],
        method: MergeMethod::Linear,
        lambda: Some(0.0),
        lambdas: None,
        slerp: SlerpOptions::default(),
        output: None,
        dtype_policy: Default::default(),
        strict: false,
    };
    // scores the label column, so every checkpoint is a perfect classifier,
    // and checks that the prompt template was applied to the text column
    let script = r#"grep -q 'Is the patient dead' {fold} && awk -F'\t' '{ if ($2 == 1) print $1 "\t" $2 "\tyes\t-0.1\t-3"; else print $1 "\t" $2 "\tno\t-3\t-0.1" }' {fold} > {out} # {checkpoint}"#;
    let evaluator = ExternalEvaluator {
        command_template: script.into(),
        timeout: Some(Duration::from_secs(30)),
    };
    let opts = SweepOptions {
        work_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let (a, b) = (scalar(0.0), scalar(1.0));
    let grid = LambdaGrid::new(0.0, 1.0, 0.5).unwrap();
    let result = grid_sweep_maps(&recipe, &[&a, &b], &grid, &task, MetricSpec::Auroc, &evaluator, &opts).unwrap();
    assert_eq!(result.points.len(), 3);
    for p in &result.points {
        assert_eq!(p.fold_metrics, vec![1.0, 1.0]);
    }
    assert_eq!(result.lambda_star, 0.0);
}
