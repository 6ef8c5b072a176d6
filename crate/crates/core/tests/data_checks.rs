use certmark::data::{
    load_idx, make_trigger_set, synthetic_dataset, write_idx, Dataset, TriggerSource,
};
use certmark::nn::{accuracy, loss_and_grad, ModelSpec, OptimizerConfig, ParamVector, Shape3};

#[test]
fn idx_files_round_trip() {
    let dims = Shape3::new(2, 3, 1);
    // Pixels on the 1/255 grid survive the byte encoding exactly.
    let images: Vec<f32> = (0..18).map(|i| (i * 14) as f32 / 255.0).collect();
    let original = Dataset::new(images, vec![4, 0, 9], dims, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    write_idx(&original, &img, &lbl).unwrap();
    let loaded = load_idx(&img, &lbl).unwrap();
    assert_eq!(loaded.images(), original.images());
    assert_eq!(loaded.labels(), original.labels());
    assert_eq!(loaded.shape(), dims);
}

#[test]
fn small_mlp_learns_the_synthetic_task() {
    let dims = Shape3::new(16, 16, 1);
    let train = synthetic_dataset(1, 2000, 10, dims).unwrap();
    let test = synthetic_dataset(2, 500, 10, dims).unwrap();
    let spec = ModelSpec::mlp(dims, &[32], 10).unwrap();
    let mut params = ParamVector::init(&spec, 1).unwrap();
    let mut opt = OptimizerConfig::sgd(0.05, 0.9, 0.0).build(params.len());
    let input = dims.len();
    for _ in 0..8 {
        for start in (0..train.len()).step_by(50) {
            let end = (start + 50).min(train.len());
            let images = &train.images()[start * input..end * input];
            let (_, grad) = loss_and_grad(&spec, &params, images, &train.labels()[start..end]).unwrap();
            opt.step(&mut params, grad.as_slice()).unwrap();
        }
    }
    let acc = accuracy(&spec, &params, &test).unwrap();
    assert!(acc >= 0.9, "test accuracy {acc}");
}

#[test]
fn unrelated_triggers_carry_the_unrelated_source_statistics() {
    let dims = Shape3::new(12, 12, 1);
    let base = synthetic_dataset(3, 200, 10, dims).unwrap();
    let bright = Dataset::new(vec![0.9; 100 * 144], (0..100).map(|i| i % 10).collect(), dims, 10).unwrap();
    let source = TriggerSource::Unrelated { unrelated: &bright, input: dims, classes: 10 };
    let triggers = make_trigger_set(source, 3, 64, 8).unwrap();
    assert_eq!(triggers.len(), 64);
    let mean = triggers.as_dataset().mean_pixel();
    assert!((mean - bright.mean_pixel()).abs() < 1e-6);
    assert!((mean - base.mean_pixel()).abs() > 0.3);
}
