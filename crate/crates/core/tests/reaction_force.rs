//! Boundary reaction forces against hand-integrated stress fields.

use phasefield_xpinn::driver::reaction_force;
use phasefield_xpinn::mesh::{BoundingBox, Mesh, PartitionSpec, Tensor2};
use phasefield_xpinn::physics::{degraded_stress, MaterialModel, PhaseFieldOrder};
use phasefield_xpinn::{Error, Result};

fn quadrants() -> Mesh {
    let boxes = vec![
        BoundingBox::new([0.0, 0.0], [0.5, 0.5]),
        BoundingBox::new([0.5, 0.0], [1.0, 0.5]),
        BoundingBox::new([0.0, 0.5], [0.5, 1.0]),
        BoundingBox::new([0.5, 0.5], [1.0, 1.0]),
    ];
    Mesh::partition(&PartitionSpec {
        dim: 2,
        boxes,
        elements: vec![2; 4],
        gauss: vec![2; 4],
        interface_points: vec![8; 4],
        hole: None,
        slit: None,
    })
    .unwrap()
}

fn steel() -> MaterialModel {
    MaterialModel {
        lambda: 121.15,
        mu: 80.77,
        gc: 2.7e-3,
        l0: 0.0125,
        order: PhaseFieldOrder::Second,
    }
}

fn uniaxial(e: f64) -> Tensor2 {
    [[0.0, 0.0], [0.0, e]]
}

#[test]
fn uniaxial_strain_matches_hooke() {
    let mesh = quadrants();
    let m = steel();
    let e = 1e-3;
    let stress = |_: usize, _: &[f64]| -> Result<Tensor2> { Ok(degraded_stress(&uniaxial(e), 0.0, 2, &m)) };
    let top = reaction_force(&mesh, &stress, [0.0, 1.0], [1.0, 1.0]).unwrap();
    let left = reaction_force(&mesh, &stress, [0.0, 0.0], [0.0, 1.0]).unwrap();
    let bottom = reaction_force(&mesh, &stress, [0.0, 0.0], [1.0, 0.0]).unwrap();
    let sigma_yy = (m.lambda + 2.0 * m.mu) * e;
    let sigma_xx = m.lambda * e;
    assert!((top - sigma_yy).abs() < 1e-12 * sigma_yy);
    assert!((bottom - sigma_yy).abs() < 1e-12 * sigma_yy);
    assert!((left - sigma_xx).abs() < 1e-12 * sigma_xx);
}

#[test]
fn linear_traction_is_integrated_exactly() {
    let mesh = quadrants();
    // sigma_yy = 1 + 3x on the top edge integrates to 2.5
    let stress = |_: usize, x: &[f64]| -> Result<Tensor2> { Ok([[0.0, 0.0], [0.0, 1.0 + 3.0 * x[0]]]) };
    let f = reaction_force(&mesh, &stress, [0.0, 1.0], [1.0, 1.0]).unwrap();
    assert!((f - 2.5).abs() < 1e-13);
}

#[test]
fn zero_displacement_gives_zero_force() {
    let mesh = quadrants();
    let m = steel();
    let stress = |_: usize, _: &[f64]| -> Result<Tensor2> { Ok(degraded_stress(&uniaxial(0.0), 0.0, 2, &m)) };
    assert_eq!(reaction_force(&mesh, &stress, [0.0, 1.0], [1.0, 1.0]).unwrap(), 0.0);
}

#[test]
fn fully_cracked_section_carries_no_tension() {
    let mesh = quadrants();
    let m = steel();
    let stress = |_: usize, _: &[f64]| -> Result<Tensor2> { Ok(degraded_stress(&uniaxial(1e-3), 1.0, 2, &m)) };
    let f = reaction_force(&mesh, &stress, [0.0, 1.0], [1.0, 1.0]).unwrap();
    assert!(f.abs() < 1e-15, "force {f}");
}

#[test]
fn segment_inside_the_domain_is_rejected() {
    let mesh = quadrants();
    let stress = |_: usize, _: &[f64]| -> Result<Tensor2> { Ok([[1.0, 0.0], [0.0, 1.0]]) };
    let err = reaction_force(&mesh, &stress, [0.0, 0.5], [1.0, 0.5]).unwrap_err();
    assert!(matches!(err, Error::Geometry(_)));
}

#[test]
fn bar_end_reads_axial_stress() {
    let mesh = Mesh::partition(&PartitionSpec {
        dim: 1,
        boxes: vec![BoundingBox::interval(-1.0, 0.0), BoundingBox::interval(0.0, 1.0)],
        elements: vec![4, 4],
        gauss: vec![2, 2],
        interface_points: vec![1, 1],
        hole: None,
        slit: None,
    })
    .unwrap();
    let stress = |s: usize, x: &[f64]| -> Result<Tensor2> { Ok([[s as f64 + x[0], 0.0], [0.0, 0.0]]) };
    assert_eq!(reaction_force(&mesh, &stress, [1.0, 0.0], [1.0, 0.0]).unwrap(), 2.0);
    assert!(reaction_force(&mesh, &stress, [0.3, 0.0], [0.3, 0.0]).is_err());
}
