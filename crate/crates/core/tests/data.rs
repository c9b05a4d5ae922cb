use std::io::Write;

use vmrnn::data::{
    builtin_glyphs, decode_dataset, generate_flow_fields, generate_moving_sprites, load_dataset, load_external_grid,
    load_pgm_glyph, save_dataset, write_frame_image, ChannelOrder, DigitSprite, FlowConfig, Glyph, LayoutSpec,
    SpriteConfig, DATASET_HEADER_LEN,
};
use vmrnn::metrics::Convention;
use vmrnn::train::copy_last_baseline;
use vmrnn::{DType, Error, RolloutPlan, Tensor};

fn sprites(seed: u64, n: usize, t: usize, side: usize, k: usize) -> vmrnn::data::SequenceDataset {
    let cfg = SpriteConfig { seed, n_sequences: n, seq_len: t, canvas: (side, side), n_sprites: k };
    generate_moving_sprites(&cfg, &builtin_glyphs(side * 28 / 64).unwrap()).unwrap()
}

#[test]
fn generator_is_deterministic_and_bounded() {
    let a = sprites(3, 4, 10, 32, 2);
    let b = sprites(3, 4, 10, 32, 2);
    assert_eq!(a.frames.data(), b.frames.data());
    assert_ne!(a.frames.data(), sprites(4, 4, 10, 32, 2).frames.data());
    assert!(a.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.frames.data().iter().any(|&v| v == 1.0));
}

#[test]
fn overlapping_sprites_compose_by_max() {
    let g = Glyph { height: 2, width: 2, pixels: vec![0.2, 0.9, 0.6, 1.0] };
    let h = Glyph { height: 2, width: 2, pixels: vec![0.7, 0.1, 0.6, 0.3] };
    let mut canvas = vec![0.0f32; 9];
    DigitSprite { glyph: 0, position: (0.0, 0.0), velocity: (0.0, 0.0) }.draw(&g, &mut canvas, 3, 3);
    DigitSprite { glyph: 1, position: (0.0, 0.0), velocity: (0.0, 0.0) }.draw(&h, &mut canvas, 3, 3);
    assert_eq!(&canvas[..2], &[0.7, 0.9]);
    assert_eq!(&canvas[3..5], &[0.6, 1.0]);
    assert!(canvas.iter().all(|&v| v <= 1.0));
}

#[test]
fn sprite_moves_one_pixel_per_frame_until_the_wall() {
    let mut s = DigitSprite { glyph: 0, position: (0.0, 0.0), velocity: (1.0, 0.0) };
    let mut xs = Vec::new();
    for _ in 0..8 {
        s.step(5.0, 0.0);
        xs.push(s.position.0);
    }
    assert_eq!(xs, vec![1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0, 2.0]);
}

#[test]
fn file_size_matches_header_plus_f32_payload() {
    let ds = sprites(1, 100, 20, 64, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mm.vmrn");
    save_dataset(&ds, &path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, DATASET_HEADER_LEN + 100 * 20 * 64 * 64 * 4);
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.frames.shape(), ds.frames.shape());
    assert!(back.frames.data().iter().zip(ds.frames.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corrupted_files_are_format_errors() {
    let ds = sprites(2, 2, 3, 16, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.vmrn");
    save_dataset(&ds, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
    bytes[0] = b'X';
    assert!(matches!(decode_dataset(&bytes), Err(Error::Format(_))));
}

fn write_series(path: &std::path::Path, values: &[f32]) {
    let mut f = std::fs::File::create(path).unwrap();
    for v in values {
        f.write_all(&v.to_le_bytes()).unwrap();
    }
}

fn layout(frames: usize, window: usize, bounds: [f64; 2]) -> LayoutSpec {
    LayoutSpec {
        frames,
        height: 2,
        width: 3,
        channels: 2,
        dtype: DType::F32,
        bounds,
        channel_order: ChannelOrder::Last,
        window,
        header_bytes: 0,
    }
}

#[test]
fn external_grid_windows_and_normalisation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.bin");
    let values: Vec<f32> = (0..12 * 12).map(|i| 10.0 + (i % 37) as f32).collect();
    write_series(&path, &values);
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let ds = load_external_grid(&path, &layout(12, 8, [lo, hi])).unwrap();
    assert_eq!(ds.frames.shape(), &[5, 8, 2, 3, 2]);
    let min = ds.frames.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let max = ds.frames.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert_eq!((min, max), (0.0, 1.0));
    // Stride one: clip k starts at frame k.
    let clip1 = ds.batch::<f32>(&[1]).unwrap();
    let clip0 = ds.batch::<f32>(&[0]).unwrap();
    assert_eq!(clip1.select1(0).unwrap(), clip0.select1(1).unwrap());

    let out_of_range = load_external_grid(&path, &layout(12, 8, [lo + 1.0, hi]));
    assert!(matches!(out_of_range, Err(Error::Numeric { .. })));
    assert!(load_external_grid(&path, &layout(13, 8, [lo, hi])).is_err());
}

#[test]
fn channel_first_layout_is_reordered() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cf.bin");
    // One frame, channel 0 all zeros, channel 1 all ones.
    let mut values = vec![0.0f32; 6];
    values.extend(vec![1.0f32; 6]);
    write_series(&path, &values);
    let mut spec = layout(1, 1, [0.0, 1.0]);
    spec.channel_order = ChannelOrder::First;
    let ds = load_external_grid(&path, &spec).unwrap();
    assert_eq!(ds.frames.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn constant_series_gives_zero_copy_last_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.bin");
    write_series(&path, &vec![3.5f32; 12 * 12]);
    let ds = load_external_grid(&path, &layout(12, 8, [0.0, 7.0])).unwrap();
    let first = ds.frames.data()[0];
    assert!(ds.frames.data().iter().all(|&v| v == first));
    let rep = copy_last_baseline(&ds, &RolloutPlan::new(4, 4).unwrap(), Convention::PerPixelMean, 1.0).unwrap();
    assert_eq!(rep.mse, 0.0);
}

#[test]
fn layout_spec_parses_from_toml() {
    let spec = LayoutSpec::from_toml(
        "frames = 48\nheight = 32\nwidth = 32\nchannels = 2\ndtype = \"f32\"\nbounds = [0.0, 1292.0]\nwindow = 8\nchannel_order = \"first\"\n",
    )
    .unwrap();
    assert_eq!(spec.channel_order, ChannelOrder::First);
    spec.validate().unwrap();
}

#[test]
fn flow_fields_are_deterministic_and_bounded() {
    let cfg = FlowConfig { seed: 5, n_sequences: 3, seq_len: 6, canvas: (8, 8), channels: 2, period: 12 };
    let a = generate_flow_fields(&cfg).unwrap();
    assert_eq!(a, generate_flow_fields(&cfg).unwrap());
    assert!(a.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn images_round_trip_through_pgm_reader() {
    let dir = tempfile::tempdir().unwrap();
    let frame = Tensor::from_vec(&[2, 3, 1], vec![0.0f32, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
    let path = dir.path().join("f.pgm");
    write_frame_image(&frame, &path).unwrap();
    let g = load_pgm_glyph(&path).unwrap();
    assert_eq!((g.height, g.width), (2, 3));
    for (a, b) in g.pixels.iter().zip(frame.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
    let color = Tensor::from_vec(&[1, 2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
    let ppm = dir.path().join("f.ppm");
    write_frame_image(&color, &ppm).unwrap();
    let bytes = std::fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], &[0, 255, 0, 255, 0, 0]);

    let ascii = dir.path().join("a.pgm");
    std::fs::write(&ascii, "P2\n# comment\n2 1\n10\n0 10\n").unwrap();
    assert_eq!(load_pgm_glyph(&ascii).unwrap().pixels, vec![0.0, 1.0]);
}
