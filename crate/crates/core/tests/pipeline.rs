use v2m_core::checkpoint::Checkpoint;
use v2m_core::dataset::{clip_or_pad, synthesize_dataset, Dataset, SynthConfig};
use v2m_core::extract::{extract_all, write_example_inputs, ExtractOptions};
use v2m_core::features::{default_key_profiles, load_key_profiles};
use v2m_core::midi::parse_midi;
use v2m_core::model::{AmtModel, GenerationConstraints, ModelConfig};
use v2m_core::music::{parse_progression, Key};
use v2m_core::pipeline::{compose, load_model_checkpoint, model_checkpoint, ExpressiveSource, VideoFeatures};
use v2m_core::regressor::{train_regressor, Regressor, RegressorConfig, RegressorKind};
use v2m_core::train::{train, TrainConfig};

fn tiny(d_sem: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_rel_dist: 8,
        ..ModelConfig::small(d_sem)
    }
}

#[test]
fn dataset_directory_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let records = synthesize_dataset(
        4,
        9,
        &SynthConfig {
            length_s: 12,
            d_sem: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let ds = Dataset::new(records).unwrap();
    ds.save_dir(tmp.path()).unwrap();
    let back = Dataset::load_dir(tmp.path()).unwrap();
    assert_eq!(back, ds);

    let padded = clip_or_pad(&ds.records[0], 20);
    assert_eq!(padded.len(), 20);
    assert_eq!(padded.valid_len(), 12);
    let clipped = clip_or_pad(&ds.records[0], 5);
    assert_eq!((clipped.len(), clipped.valid_len()), (5, 5));
}

#[test]
fn extracted_records_train_and_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let inputs = tmp.path().join("inputs");
    write_example_inputs(&inputs.join("one"), &["D", "D", "G", "A", "Bm", "G", "A", "D"], 4).unwrap();
    write_example_inputs(&inputs.join("two"), &["E", "A", "B", "E", "C#m", "A", "B", "E"], 4).unwrap();
    let (records, failed) = extract_all(&inputs, &default_key_profiles(), &ExtractOptions::default()).unwrap();
    assert!(failed.is_empty());
    assert!(records.iter().all(|r| r.key == Key::C_MAJOR));

    let mut model = AmtModel::new(tiny(4), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        t_max: 8,
        deterministic: true,
        ..Default::default()
    };
    let out = train(&mut model, &records, &records, &cfg, None, |_| {}).unwrap();
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|e| e.val_hits.is_some()));

    let video = VideoFeatures::from_record(&records[0]);
    let primer = parse_progression("D Bm").unwrap();
    let key: Key = "D:major".parse().unwrap();
    let song = compose(
        &model,
        &video,
        key,
        &primer,
        &GenerationConstraints::default(),
        ExpressiveSource::GroundTruth,
        8,
    )
    .unwrap();
    assert_eq!(song.chords.len(), 8);
    assert_eq!(song.chords[..2], primer[..]);
    let midi = parse_midi(&song.midi).unwrap();
    assert_eq!(midi.notes.len(), song.notes.len());
}

#[test]
fn checkpoints_survive_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let records = synthesize_dataset(
        3,
        2,
        &SynthConfig {
            length_s: 10,
            d_sem: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let model = AmtModel::new(tiny(4), 5).unwrap();
    let path = tmp.path().join("m.ckpt");
    model_checkpoint(&model, None, 0).unwrap().save(&path).unwrap();
    let (loaded, resume) = load_model_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert!(resume.is_none());
    assert_eq!(loaded.params(), model.params());

    let cfg = RegressorConfig {
        kind: RegressorKind::Lstm,
        hidden: 4,
        layers: 1,
        epochs: 1,
        ..Default::default()
    };
    let (reg, _) = train_regressor(cfg, &records, &[], |_| {}).unwrap();
    let rpath = tmp.path().join("r.ckpt");
    reg.to_checkpoint(serde_json::Value::Null)
        .unwrap()
        .save(&rpath)
        .unwrap();
    let back = Regressor::from_checkpoint(&Checkpoint::load(&rpath).unwrap()).unwrap();
    assert_eq!(back.evaluate(&records).unwrap(), reg.evaluate(&records).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::load(&rpath).unwrap().expect_kind("amt").is_err());
}

#[test]
fn key_profile_files() {
    let text = "[krumhansl_schmuckler]\nmajor: 1,0,0,0,1,0,0,1,0,0,0,0\nminor: 1,0,0,1,0,0,0,1,0,0,0,0\n";
    let err = load_key_profiles(text).unwrap_err();
    assert!(err.to_string().contains("lack"));
    assert_eq!(
        load_key_profiles(include_str!("../data/key_profiles.txt")).unwrap(),
        default_key_profiles()
    );
}
