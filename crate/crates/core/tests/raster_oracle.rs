//! The rasterizer against a per-pixel brute force over all faces.

mod common;

use anr_core::rasterizer::{rasterize, RasterConfig, RasterOutput};
use anr_core::scene::{CoarseMesh, WeakPerspectiveCamera};
use common::{raster_oracle_suite, random_mesh, RASTER_SIZE};
use nalgebra::Matrix3;

fn run(mesh: &CoarseMesh) -> RasterOutput {
    let cam = WeakPerspectiveCamera::new(1.0, Matrix3::identity(), [0.0, 0.0], (RASTER_SIZE, RASTER_SIZE)).unwrap();
    let normals = mesh.vertex_normals.clone();
    rasterize(&mesh.vertices, &normals, mesh, &cam, &RasterConfig::new(RASTER_SIZE, RASTER_SIZE)).unwrap()
}

#[test]
fn hundred_random_meshes_match_brute_force() {
    let s = raster_oracle_suite(100);
    assert_eq!(s.id_mismatches, 0);
    assert!(s.max_bary_err < 1e-6, "barycentric error {}", s.max_bary_err);
    assert!(s.covered > 10_000, "suite should exercise many covered pixels");
}

#[test]
fn sequential_and_parallel_rasters_agree() {
    let mesh = random_mesh(7);
    anr_core::parallel::set_sequential(true);
    let a = run(&mesh);
    anr_core::parallel::set_sequential(false);
    let b = run(&mesh);
    assert_eq!(a, b);
}
