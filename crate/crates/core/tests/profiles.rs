use std::path::PathBuf;

use gsync::profile::{load_profile, LayerDescriptor, LayerKind, ModelProfile, ProfileError};
use proptest::prelude::*;
use serde_json::Value;

const SHIPPED: [&str; 4] = ["resnet50", "vgg16", "googlenet", "mlp"];

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../profiles").join(format!("{name}.json"))
}

fn raw(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path(name)).unwrap()).unwrap()
}

// Straight from the JSON, without going through the crate's types.
fn oracle_params(l: &Value) -> u64 {
    let f = |k: &str| l[k].as_u64().unwrap();
    let bias = if l["has_bias"].as_bool().unwrap() { f("K") } else { 0 };
    match l["kind"].as_str().unwrap() {
        "Conv" => f("C") * f("K") * f("KH") * f("KW") + bias,
        "FullyConnected" => f("C") * f("K") + bias,
        _ => 0,
    }
}

#[test]
fn resnet50_conv1() {
    let p = load_profile(path("resnet50")).unwrap();
    let c = &p.layers[0];
    assert_eq!((c.in_channels, c.out_channels, c.kernel_h, c.out_h), (3, 64, 7, 112));
    assert_eq!(c.param_count, 9408);
    assert_eq!(c.fwd_flops_per_sample, 236_027_904.0);
    assert_eq!(c.param_count, 3 * 64 * 7 * 7);
}

#[test]
fn vgg16_total_matches_independent_sum() {
    let v = raw("vgg16");
    let sum: u64 = v["layers"].as_array().unwrap().iter().map(oracle_params).sum();
    assert_eq!(sum, 138_357_544);
    assert_eq!(load_profile(path("vgg16")).unwrap().total_params(), 138_357_544);
}

#[test]
fn shipped_totals_frozen() {
    let want = [25_503_912u64, 138_357_544, 6_998_552, 41_956_352];
    for (name, w) in SHIPPED.iter().zip(want) {
        let v = raw(name);
        let sum: u64 = v["layers"].as_array().unwrap().iter().map(oracle_params).sum();
        assert_eq!(sum, w, "{name}");
        assert_eq!(load_profile(path(name)).unwrap().total_params(), w, "{name}");
    }
}

#[test]
fn shipped_derived_fields_consistent() {
    for name in SHIPPED {
        let p = load_profile(path(name)).unwrap();
        assert!(p.default_minibatch >= 1);
        assert!(p.parameterized().count() >= 1);
        for (i, l) in p.layers.iter().enumerate() {
            assert_eq!(l.id, i, "{name}");
            assert_eq!(l.param_count, l.derived_param_count(), "{name} layer {i}");
            if l.kind != LayerKind::NonParam {
                assert_eq!(l.fwd_flops_per_sample, l.derived_fwd_flops(), "{name} layer {i}");
            }
        }
    }
}

#[test]
fn contradicting_param_count_names_layer() {
    let mut v = raw("mlp");
    v["layers"][2]["param_count"] = Value::from(12345);
    let err = ModelProfile::from_json_str(&v.to_string()).unwrap_err();
    match &err {
        ProfileError::Validation { layer, field, .. } => {
            assert_eq!(*layer, Some(2));
            assert_eq!(*field, "param_count");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("layer 2"), "{err}");
}

#[test]
fn flops_off_by_more_than_tolerance_rejected() {
    let mut v = raw("mlp");
    let f = v["layers"][0]["fwd_flops_per_sample"].as_f64().unwrap();
    v["layers"][0]["fwd_flops_per_sample"] = Value::from(f * 1.01);
    assert!(ModelProfile::from_json_str(&v.to_string()).is_err());
    v["layers"][0]["fwd_flops_per_sample"] = Value::from(f * 1.0005);
    assert!(ModelProfile::from_json_str(&v.to_string()).is_ok());
}

#[test]
fn unknown_field_rejected() {
    let mut v = raw("mlp");
    v["layers"][0]["dilation"] = Value::from(1);
    assert!(matches!(ModelProfile::from_json_str(&v.to_string()), Err(ProfileError::Parse(_))));
}

#[test]
fn malformed_and_missing_files() {
    assert!(matches!(ModelProfile::from_json_str("{"), Err(ProfileError::Parse(_))));
    assert!(matches!(load_profile("/no/such/profile.json"), Err(ProfileError::Io { .. })));
}

#[test]
fn id_gaps_rejected() {
    let mut v = raw("mlp");
    v["layers"][1]["id"] = Value::from(9);
    assert!(ModelProfile::from_json_str(&v.to_string()).is_err());
}

#[test]
fn derived_fields_filled_when_absent() {
    let mut v = raw("resnet50");
    for l in v["layers"].as_array_mut().unwrap() {
        let o = l.as_object_mut().unwrap();
        o.remove("param_count");
        if o["kind"] != "NonParam" {
            o.remove("fwd_flops_per_sample");
        }
    }
    let p = ModelProfile::from_json_str(&v.to_string()).unwrap();
    assert_eq!(p, load_profile(path("resnet50")).unwrap());
}

#[test]
fn single_fc_total() {
    let p = ModelProfile::new("fc", 1, vec![LayerDescriptor::fully_connected(0, "fc", 10, 10, false)]).unwrap();
    assert_eq!(p.total_params(), 100);
    let pools = [LayerDescriptor::non_param(0, "pool", 4, (2, 2), (2, 2), 2)];
    assert_eq!(gsync::profile::total_params(&pools), 0);
    assert!(ModelProfile::new("pools", 1, pools.to_vec()).is_err());
}

fn arb_layer() -> impl Strategy<Value = (u8, u64, u64, u64, u64, bool)> {
    (0u8..3, 1u64..64, 1u64..64, 1u64..8, 1u64..32, any::<bool>())
}

proptest! {
    #[test]
    fn save_load_round_trip(spec in prop::collection::vec(arb_layer(), 1..12), mb in 1u64..256) {
        let mut layers: Vec<LayerDescriptor> = spec
            .iter()
            .enumerate()
            .map(|(i, &(kind, c, k, kh, oh, bias))| match kind {
                0 => LayerDescriptor::conv(i, format!("conv{i}"), c, k, (kh, kh), (oh, oh), 1, bias),
                1 => LayerDescriptor::fully_connected(i, format!("fc{i}"), c, k, bias),
                _ => LayerDescriptor::non_param(i, format!("pool{i}"), c, (oh, oh), (kh, kh), 2),
            })
            .collect();
        if layers.iter().all(|l| !l.is_parameterized()) {
            let n = layers.len();
            layers.push(LayerDescriptor::fully_connected(n, "head", 8, 8, true));
        }
        let p = ModelProfile::new("rand", mb, layers).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.json");
        p.save(&f).unwrap();
        prop_assert_eq!(load_profile(&f).unwrap(), p);
    }
}
