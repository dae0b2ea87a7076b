use proptest::prelude::*;
use vpcnet::geometry::PointCloud;
use vpcnet_cli::config::RunConfig;
use vpcnet_cli::io::{parse_obj, parse_ply, parse_xyz, to_mesh, write_ply, write_xyz};

proptest! {
    #[test]
    fn binary_ply_round_trips_float32_exactly(coords in prop::collection::vec(prop::array::uniform3(-1e6f32..1e6f32), 0..200)) {
        let pc = PointCloud::new(coords.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect());
        let back = parse_ply(&write_ply(&pc)).unwrap();
        prop_assert_eq!(back.vertices.len(), pc.len());
        for (a, b) in back.vertices.iter().zip(&pc.points) {
            for k in 0..3 {
                prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        prop_assert_eq!(write_ply(&PointCloud::new(back.vertices)), write_ply(&pc));
    }
}

#[test]
fn ascii_ply_with_faces_and_extra_properties() {
    let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 4\nproperty double x\nproperty double y\n\
                property double z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
                0 0 0 255\n1 0 0 0\n1 1 0 0\n0 1 0 0\n4 0 1 2 3\n";
    let data = parse_ply(text.as_bytes()).unwrap();
    assert_eq!(data.vertices[2], [1.0, 1.0, 0.0]);
    assert_eq!(data.faces, vec![vec![0, 1, 2, 3]]);
    let mesh = to_mesh(data).unwrap();
    assert_eq!(mesh.triangles().len(), 2);
    assert!((mesh.total_area() - 1.0).abs() < 1e-12);
}

#[test]
fn big_endian_ply() {
    let mut buf = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float z\nproperty float y\nproperty float x\nend_header\n".to_vec();
    for v in [3.0f32, 2.0, 1.0] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    assert_eq!(parse_ply(&buf).unwrap().vertices, vec![[1.0, 2.0, 3.0]]);
}

#[test]
fn truncated_binary_ply_reports_offset() {
    let pc = PointCloud::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    let buf = write_ply(&pc);
    let cut = buf.len() - 2;
    let err = parse_ply(&buf[..cut]).unwrap_err();
    // the last float starts four bytes before the end of the full file
    assert_eq!(err.offset, buf.len() - 4);
    assert!(err.to_string().starts_with(&format!("byte {}", buf.len() - 4)));
}

#[test]
fn malformed_header_reports_line_offset() {
    let text = b"ply\nformat ascii 1.0\nelement vertex two\nend_header\n";
    let err = parse_ply(text).unwrap_err();
    assert_eq!(err.offset, 21);
    assert!(parse_ply(b"plx\n").is_err());
    let bad_token = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 q\n";
    let err = parse_ply(bad_token).unwrap_err();
    assert_eq!(err.offset, bad_token.len() - 2);
}

#[test]
fn obj_faces_with_slashes_and_negative_indices() {
    let text = "# cube corner\nv 0 0 0\nv 1 0 0\nv 1 1 0\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1\nv 0 1 0\nf -4//1 -2//1 -1//1\n";
    let data = parse_obj(text.as_bytes()).unwrap();
    assert_eq!(data.vertices.len(), 4);
    assert_eq!(data.faces, vec![vec![0, 1, 2], vec![0, 2, 3]]);
    let err = parse_obj(b"v 0 0 0\nf 1 2 9x\n").unwrap_err();
    assert_eq!(err.offset, 8);
}

#[test]
fn xyz_round_trip_and_comments() {
    let pc = PointCloud::new(vec![[0.1, -2.5, 3.0], [1e-9, 7.0, -0.0]]);
    let back = parse_xyz(write_xyz(&pc).as_bytes()).unwrap();
    assert_eq!(back.points, pc.points);
    let parsed = parse_xyz(b"# header\n1,2,3,255\n\n4 5 6\n").unwrap();
    assert_eq!(parsed.points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    assert_eq!(parse_xyz(b"1 2\n").unwrap_err().offset, 0);
}

#[test]
fn config_echo_parses_back() {
    let mut cfg = RunConfig::parse("N = 64\nr = 4\n# comment\nstn = false\ngrad_clip = 5.0\nsteps = 10 # trailing\n").unwrap();
    assert_eq!((cfg.n_coarse, cfg.r, cfg.stn, cfg.steps), (64, 4, false, 10));
    assert_eq!(cfg.grad_clip, Some(5.0));
    cfg.data = Some("some/dir".into());
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let err = RunConfig::parse("steps = 5\nlearning_rate = 1\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    assert!(RunConfig::parse("stn = maybe\n").is_err());
    assert!(RunConfig::parse("steps five\n").is_err());
}

#[test]
fn desk_schedule_follows_steps_unless_overridden() {
    let cfg = RunConfig::parse("steps = 2000\n").unwrap();
    assert_eq!(cfg.train().ramp_steps, 1000);
    assert_eq!(cfg.train().decay_steps, 1000);
    let cfg = RunConfig::parse("steps = 2000\ndecay_steps = 300\n").unwrap();
    assert_eq!(cfg.train().decay_steps, 300);
    assert_eq!(cfg.net().n_coarse, 1024);
}
