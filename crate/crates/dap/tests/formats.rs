use dap::checkpoint;
use dap::dataset;
use dap::grid::{Grid, GridData};
use dap::prompt_cache;
use dap_core::model::{tiny_config, Model};
use dap_core::prompting::PromptLayers;
use dap_core::relevance::{corrupt_prompt, PromptMap};
use dap_core::synth::{generate_dataset, SynthConfig};

fn small_synth() -> SynthConfig {
    SynthConfig {
        image_size: 16,
        patch_size: 4,
        lesion_area_fraction: (0.05, 0.2),
        lesions_per_image: (1, 2),
        ..Default::default()
    }
}

#[test]
fn grid_bits_survive() {
    let vals = vec![0.0, -0.0, 1.5e-310, f64::MAX, f64::INFINITY, -1.0 / 3.0];
    let g = Grid::new(vec![2, 3], GridData::F64(vals.clone())).unwrap();
    let (dims, back) = Grid::decode(&g.encode()).unwrap().into_f64().unwrap();
    assert_eq!(dims, vec![2, 3]);
    for (a, b) in vals.iter().zip(&back) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let g = Grid::new(vec![1, 2, 2], GridData::F32(vec![0.1, 0.2, 0.3, f32::MIN_POSITIVE])).unwrap();
    assert_eq!(Grid::decode(&g.encode()).unwrap(), g);
}

#[test]
fn dataset_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&small_synth(), 7).unwrap();
    let records = dataset::save(dir.path(), &samples, Some(&small_synth())).unwrap();
    assert_eq!(records.len(), 7);
    assert_eq!(dataset::load(dir.path()).unwrap(), samples);

    let raw = std::fs::read(dir.path().join(&records[0].image_file)).unwrap();
    assert_eq!(&raw[..4], b"DAPG");
    assert_eq!(raw[4], 1);
    assert_eq!(raw.len(), 16 + 4 * 16 * 16);
}

#[test]
fn truncated_image_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&small_synth(), 1).unwrap();
    let records = dataset::save(dir.path(), &samples, None).unwrap();
    let path = dir.path().join(&records[0].image_file);
    let raw = std::fs::read(&path).unwrap();
    std::fs::write(&path, &raw[..raw.len() - 1]).unwrap();
    let err = dataset::load(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("truncated"), "{err}");
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(tiny_config(8, 2, 11)).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model, serde_json::json!({ "stage": "test" })).unwrap();
    let (back, header) = checkpoint::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(header.meta["stage"], "test");
    assert_eq!(back.params.names(), model.params.names());
    for (a, b) in model.params.tensors().iter().zip(back.params.tensors()) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let s = &generate_dataset(&small_synth(), 1).unwrap()[0];
    let layers = PromptLayers::last(2);
    assert_eq!(
        model.encode_image(&s.image, None, &layers).unwrap(),
        back.encode_image(&s.image, None, &layers).unwrap()
    );
    // Re-encoding gives the same bytes.
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::encode(&back, header.meta).unwrap());
}

#[test]
fn checkpoint_rejects_mismatched_layout() {
    let model = Model::new(tiny_config(8, 1, 0)).unwrap();
    let mut bytes = checkpoint::encode(&model, serde_json::Value::Null).unwrap();
    assert!(checkpoint::decode(&bytes[..bytes.len() - 8]).is_err());
    bytes[0] = b'X';
    assert!(checkpoint::decode(&bytes).is_err());
}

#[test]
fn prompt_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&small_synth(), 3).unwrap();
    let maps: Vec<PromptMap> = (0..3)
        .map(|i| {
            let raw: Vec<f64> = (0..16).map(|k| ((k * 7 + i * 3) % 11) as f64).collect();
            PromptMap::from_raw(4, 4, &raw).unwrap()
        })
        .collect();
    let mut maps = maps;
    maps[2] = corrupt_prompt(&maps[2], 50.0);
    let ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
    prompt_cache::save(dir.path(), &ids, &maps).unwrap();
    assert_eq!(prompt_cache::load_for(dir.path(), &samples).unwrap(), maps);
    // Order follows the samples, not the cache.
    let rev: Vec<_> = samples.iter().rev().cloned().collect();
    let back = prompt_cache::load_for(dir.path(), &rev).unwrap();
    assert_eq!(back[0], maps[2]);
}
