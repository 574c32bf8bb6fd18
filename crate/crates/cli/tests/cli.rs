use std::path::Path;
use std::process::{Command, Output};

fn winpose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winpose"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = winpose(dir.path(), &["profile", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn profile_prints_both_fusions() {
    let dir = tempfile::tempdir().unwrap();
    let out = winpose(dir.path(), &["profile", "--model", "swin-l", "--input", "384"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("195.97M") && text.contains("195.75M"), "{text}");
    assert!(text.contains("concat") && text.contains("sum"));
}

#[test]
fn selfcheck_passes_on_a_clean_build() {
    let dir = tempfile::tempdir().unwrap();
    let out = winpose(dir.path(), &["selfcheck"]);
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(!text.contains("FAIL"));
    assert_eq!(text.matches("PASS").count(), 6);
}

#[test]
fn train_then_infer_and_eval_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = winpose(d, &["train", "--synthetic", "3", "--epochs", "2", "--seed", "4", "--out", "w.swpw"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("w.swpw").exists());

    let out = winpose(d, &["infer", "--synthetic", "3", "--seed", "4", "--weights", "w.swpw", "--out", "p.json", "--render"]);
    assert_eq!(out.status.code(), Some(0));
    let preds = winpose::coco::parse_predictions(&std::fs::read_to_string(d.join("p.json")).unwrap()).unwrap();
    assert_eq!(preds.len(), 3);
    assert!(d.join("overlays/1.png").exists());

    let again = winpose(d, &["infer", "--synthetic", "3", "--seed", "4", "--weights", "w.swpw"]);
    assert_eq!(stdout(&again).trim(), std::fs::read_to_string(d.join("p.json")).unwrap());

    let out = winpose(d, &["eval", "--synthetic", "3", "--seed", "4", "--weights", "w.swpw"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("AP50"));

    let out = winpose(d, &["eval", "--synthetic", "3", "--fusion", "concat", "--weights", "w.swpw"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn dataset_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("img")).unwrap();
    let img = image::RgbImage::from_fn(80, 60, |x, y| image::Rgb([(x * 3) as u8, (y * 4) as u8, 90]));
    img.save(d.join("img/a.png")).unwrap();
    let doc = dataset_doc();
    std::fs::write(d.join("ann.json"), doc).unwrap();

    let train = winpose(d, &["train", "--dataset", "ann.json", "--images", "img", "--epochs", "1", "--out", "w.swpw"]);
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    let eval = winpose(d, &["eval", "--dataset", "ann.json", "--images", "img", "--weights", "w.swpw", "--out", "p.json"]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(d.join("p.json").exists());

    let missing = winpose(d, &["eval", "--dataset", "ann.json", "--images", "nowhere", "--weights", "w.swpw"]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn bad_config_and_missing_data_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"model": {"embed_dim": 0}}"#).unwrap();
    assert_eq!(winpose(dir.path(), &["train", "--config", "bad.json", "--synthetic", "1"]).status.code(), Some(3));
    assert_eq!(winpose(dir.path(), &["train", "--epochs", "1"]).status.code(), Some(4));
    assert_eq!(winpose(dir.path(), &["infer", "--synthetic", "1"]).status.code(), Some(3));
}

fn dataset_doc() -> String {
    let mut kps = Vec::new();
    for i in 0..17 {
        kps.extend([10.0 + 3.0 * i as f64, 8.0 + 2.0 * i as f64, if i % 5 == 0 { 0.0 } else { 2.0 }]);
    }
    let kps: Vec<String> = kps.iter().map(|v| v.to_string()).collect();
    format!(
        r#"{{"images":[{{"id":1,"file_name":"a.png","width":80,"height":60}}],
            "annotations":[{{"id":1,"image_id":1,"category_id":1,"iscrowd":0,"area":1800.0,
                             "bbox":[5,4,60,50],"num_keypoints":13,"keypoints":[{}]}}],
            "categories":[{{"id":1,"name":"person","keypoints":[],"skeleton":[[1,2],[2,3]]}}]}}"#,
        kps.join(",")
    )
}
