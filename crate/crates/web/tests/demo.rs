use committee_web::{frontier_data, selective_data, sweep_data};

#[test]
fn sweep_endpoints_are_model_and_ensemble() {
    let v = sweep_data(1000, [0.7, 0.8], [1.0, 4.0], 0.5, 2).unwrap();
    let points = v["points"].as_array().unwrap();
    let first = &points[0];
    let last = points.last().unwrap();
    assert_eq!(first["accuracy"], v["models"][0]["accuracy"]);
    assert_eq!(first["avg_cost"].as_f64().unwrap(), 1.0);
    assert_eq!(last["accuracy"], v["ensemble"]["accuracy"]);
    assert_eq!(last["avg_cost"], v["ensemble"]["avg_cost"]);
    let matched = v["matched"]["avg_cost"].as_f64().unwrap();
    assert!(matched < 5.0);
    assert!(
        v["matched"]["accuracy"].as_f64().unwrap() >= v["ensemble"]["accuracy"].as_f64().unwrap()
    );
}

#[test]
fn frontier_is_monotone() {
    let v = frontier_data(500, 4, 2, 0.5, 1).unwrap();
    let pts = v["frontier"].as_array().unwrap();
    assert!(pts.len() >= 2);
    for w in pts.windows(2) {
        assert!(w[0]["avg_cost"].as_f64() < w[1]["avg_cost"].as_f64());
        assert!(w[0]["accuracy"].as_f64() < w[1]["accuracy"].as_f64());
    }
    assert_eq!(v["models"].as_array().unwrap().len(), 4);
}

#[test]
fn selective_curves_end_at_accuracy() {
    let v = selective_data(400, 0.75, 0).unwrap();
    let curves = v["curves"].as_object().unwrap();
    assert_eq!(curves.len(), 4);
    for points in curves.values() {
        assert_eq!(
            points.as_array().unwrap().last().unwrap()["accuracy"],
            v["accuracy"]
        );
    }
}

#[test]
fn bad_parameters_are_errors() {
    assert!(sweep_data(100, [0.05, 0.8], [1.0, 2.0], 0.5, 0).is_err());
    assert!(selective_data(0, 0.7, 0).is_err());
}
