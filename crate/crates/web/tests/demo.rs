use kdcode_web::{compare_baselines, layer_size, train_codes, DemoData, TrainRequest};

#[test]
fn size_calculator_matches_known_values() {
    let s = layer_size(10_000, 32, 32, 200).unwrap();
    assert_eq!(s.code_bits, 1_600_000);
    assert_eq!(s.full_bits, 64_000_000);
    assert_eq!(s.kd_bits, 1_600_000 + 32 * 32 * 32 * 200);
    assert_eq!(s.min_dims, 3);
    assert!(s.no_collision_probability > 0.999);
    assert!(layer_size(10, 1, 2, 4).is_err());
}

#[test]
fn training_beats_random_codes() {
    let req = TrainRequest { epochs: 15, sample: 5, ..Default::default() };
    let s = train_codes(&req).unwrap();
    assert!(s.learned_error < s.random_error, "{} vs {}", s.learned_error, s.random_error);
    assert_eq!(s.curve.len(), 16);
    assert_eq!(s.sample.len(), 5);
    assert_eq!(s.sample[0].code.split('-').count(), 3);
    assert!(s.bits < s.full_bits);
    assert_eq!(train_codes(&req).unwrap(), s);
}

#[test]
fn training_rejects_bad_requests() {
    let small = TrainRequest { k: 2, dims: 3, ..Default::default() };
    assert!(train_codes(&small).unwrap_err().contains("K^D"));
    let composer = TrainRequest { composer: "mlp".into(), ..Default::default() };
    assert!(train_codes(&composer).is_err());
    let big = TrainRequest { data: DemoData { vocab: 10_000, ..Default::default() }, ..Default::default() };
    assert!(train_codes(&big).is_err());
}

#[test]
fn baselines_cover_pq_and_scalar() {
    let rows = compare_baselines(&DemoData::default()).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["pq-16x1", "pq-16x2", "pq-16x4", "pq-16x8", "scalar-8bit", "scalar-4bit", "scalar-2bit"]);
    let scalar: Vec<f64> = rows[4..].iter().map(|r| r.reconstruction_error).collect();
    assert!(scalar[0] < scalar[1] && scalar[1] < scalar[2]);
}
