//! Files written by the in-house codec must read back identically through
//! the independent `nifti` crate.

use nifti::{InMemNiftiObject, NiftiObject, RandomAccessNiftiVolume, ReaderOptions};
use sala_core::dataio::{save_volume, LabelMap, VolumeGrid};

fn read(path: &std::path::Path) -> InMemNiftiObject {
    ReaderOptions::new().read_file(path).unwrap()
}

#[test]
fn ramp_volume_matches_reference_reader() {
    let (ns, nr, nc) = (4, 8, 8);
    let data: Vec<f32> = (0..ns * nr * nc).map(|i| i as f32 * 0.5 - 7.0).collect();
    let grid = VolumeGrid::new([ns, nr, nc], [10.0, 1.25, 1.5], data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for name in ["ramp.nii", "ramp.nii.gz"] {
        let path = dir.path().join(name);
        save_volume(&grid, &path).unwrap();
        let obj = read(&path);
        let h = obj.header();
        assert_eq!(&h.dim[..4], &[3, nc as u16, nr as u16, ns as u16]);
        assert_eq!(&h.pixdim[1..4], &[1.5, 1.25, 10.0]);
        let vol = obj.volume();
        for s in 0..ns {
            for r in 0..nr {
                for c in 0..nc {
                    let v = vol.get_f64(&[c as u16, r as u16, s as u16]).unwrap();
                    assert_eq!(v, grid.get(s, r, c) as f64);
                }
            }
        }
    }
}

#[test]
fn label_map_matches_reference_reader() {
    let data: Vec<u8> = (0..2 * 5 * 3).map(|i| (i % 4) as u8).collect();
    let grid = LabelMap::new([2, 5, 3], [8.0, 1.0, 1.0], data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.nii.gz");
    save_volume(&grid, &path).unwrap();
    let obj = read(&path);
    assert_eq!(obj.header().datatype, 2);
    let vol = obj.volume();
    for s in 0..2 {
        for r in 0..5 {
            for c in 0..3 {
                assert_eq!(vol.get_f64(&[c as u16, r as u16, s as u16]).unwrap(), grid.get(s, r, c) as f64);
            }
        }
    }
}
