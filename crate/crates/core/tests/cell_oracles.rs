use fissure::cell_problems::{effective_perm, richardson_k11, WarrenRootCell};

// Values from an independent direct sparse solve of the same discretization.
const K11_D01: [f64; 3] = [0.12666811050635154, 0.12686945093656918, 0.12695078182122238];
const K11_D01_EXTRAPOLATED: f64 = 0.1270059000434218;

#[test]
fn k11_mesh_sequence_at_delta_one_tenth() {
    let cell = WarrenRootCell::new(2, 0.1).unwrap();
    let r = richardson_k11(&cell, 1.0, [80, 160, 320]).unwrap();
    for (got, want) in r.values.iter().zip(K11_D01) {
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
    }
    assert!(r.observed_order >= 1.0, "order {}", r.observed_order);
    assert!((r.extrapolated - K11_D01_EXTRAPOLATED).abs() < 1e-7);
}

#[test]
fn three_dimensional_cell_is_isotropic() {
    let cell = WarrenRootCell::new(3, 0.25).unwrap();
    let s = effective_perm(&cell, 2.0, 32).unwrap();
    let k = &s.tensor;
    for i in 0..3 {
        assert!((k[(i, i)] - k[(0, 0)]).abs() < 1e-8 * k[(0, 0)]);
        for j in 0..3 {
            if i != j {
                assert!(k[(i, j)].abs() < 1e-8 * k[(0, 0)]);
            }
        }
    }
    assert!(s.is_positive_definite());
}
