//! Task-prediction evaluation at realistic scale: a 552-entry labeled set
//! with 547 correct mock responses grades out at 99.09%.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use mmcurate::corpus::{DataEntry, Turn, TurnRole};
use mmcurate::judge::{EndpointConfig, JudgeClient, MockBackend, WireStage, ALL_ROLES};
use mmcurate::rating::{PromptLibrary, Rater};
use mmcurate::report::task_accuracy;
use mmcurate::taxonomy::{SubTask, TaskLabel};

fn entry(id: &str) -> DataEntry {
    DataEntry {
        id: id.into(),
        image_ref: "unused.png".into(),
        conversation: vec![
            Turn { role: TurnRole::User, content: "Is this a photo or a painting?".into() },
            Turn { role: TurnRole::Assistant, content: "A painting.".into() },
        ],
        source: "labeled".into(),
        answer_format: None,
    }
}

#[test]
fn labeled_image_style_set_grades_at_99_09() {
    let total = 552;
    let wrong = 5;

    let mut mock = MockBackend::new();
    for i in 0..total {
        let response = if i < wrong {
            "Task: Coarse Perception; Sub-task: Image Topic"
        } else {
            "Task: Coarse Perception; Sub-task: Image Style"
        };
        mock.respond(&format!("s{i:03}"), WireStage::Task, response);
    }

    let mut endpoints = HashMap::new();
    for role in ALL_ROLES {
        let mut endpoint = EndpointConfig::new("http://mock", "mock");
        endpoint.backoff_base = Duration::from_millis(1);
        endpoints.insert(role, endpoint);
    }
    let client = Arc::new(JudgeClient::new(Arc::new(mock), endpoints).unwrap());
    let rater = Rater::new(client, PromptLibrary::builtin(), 2);

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();

    let mut predicted: BTreeMap<String, TaskLabel> = BTreeMap::new();
    let mut truth: BTreeMap<String, TaskLabel> = BTreeMap::new();
    runtime.block_on(async {
        for i in 0..total {
            let e = entry(&format!("s{i:03}"));
            let staged = rater.predict_task(&e).await.unwrap();
            predicted.insert(e.id.clone(), staged.value.label);
            truth.insert(e.id, TaskLabel::from_sub_task(SubTask::ImageStyle));
        }
    });

    let table = task_accuracy(&predicted, &truth);
    assert_eq!(table.rows.len(), 1);
    let row = &table.rows[0];
    assert_eq!(row.sub_task, "Image Style");
    assert_eq!((row.correct, row.total), (547, 552));
    assert_eq!(row.acc_pct, "99.09");
    assert_eq!(table.overall.acc_pct, "99.09");
}
