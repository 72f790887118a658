use ndarray::{ArrayD, IxDyn};
use poumor::io::{
    read_array, read_checkpoint, read_field, write_array, write_checkpoint, write_field,
    Checkpoint,
};
use poumor::spectral::{Field, GridSpec};
use poumor::tape::ParamStore;
use proptest::prelude::*;

fn arb_array() -> impl Strategy<Value = ArrayD<f64>> {
    prop::collection::vec(1usize..5, 1..=3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(
            prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL,
            n..=n,
        )
        .prop_map(move |vals| ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arrays_survive_the_disk_bitwise(a in arb_array()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pouf");
        write_array(&path, &a).unwrap();
        let b = read_array(&path).unwrap();
        prop_assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fields_roundtrip_against_their_grid(vals in prop::collection::vec(-1e6f64..1e6, 48..=48)) {
        let grid = GridSpec::new(&[4, 6], &[1.0, 2.0]).unwrap();
        let values = ArrayD::from_shape_vec(IxDyn(&[4, 6, 2]), vals).unwrap();
        let f = Field::new(grid.clone(), values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pouf");
        write_field(&path, &f).unwrap();
        let g = read_field(&path, &grid).unwrap();
        prop_assert_eq!(&f.values, &g.values);
    }
}

#[test]
fn checkpoints_carry_params_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.pouf");
    let mut params = ParamStore::new();
    params.insert("w".into(), ArrayD::from_elem(IxDyn(&[2, 2]), 0.5));
    params.insert("b".into(), ArrayD::zeros(IxDyn(&[3])));
    let ck = Checkpoint {
        meta: serde_json::json!({"step": 7, "objective": "least-squares"}),
        params: params.clone(),
        opt_m: params.clone(),
        opt_v: params.clone(),
    };
    write_checkpoint(&path, &ck).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.meta["step"], 7);
    assert_eq!(back.params.len(), 2);
    assert_eq!(back.params["w"], params["w"]);
    assert_eq!(back.opt_v["b"], params["b"]);
}

#[test]
fn wrong_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.pouf");
    let grid = GridSpec::new(&[4, 4], &[1.0, 1.0]).unwrap();
    let f = Field::zeros(grid, 1);
    write_field(&path, &f).unwrap();
    let other = GridSpec::new(&[8, 8], &[1.0, 1.0]).unwrap();
    assert!(read_field(&path, &other).is_err());
}
