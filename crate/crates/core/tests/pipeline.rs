use hhir_core::corpus::{bundled_unseen_classes, Manifest, UnifiedVocabulary};
use hhir_core::eval::{macro_f1, mean_std};
use hhir_core::synth::{generate_corpus, write_corpus, SynthConfig};
use hhir_core::video_io::{apply_masks, load_clip, sample_frames, MaskSet};

fn synth_vocab(cfg: &SynthConfig) -> UnifiedVocabulary {
    let names: Vec<&str> = cfg.classes.iter().map(|c| c.name.as_str()).collect();
    UnifiedVocabulary::from_classes(&names).unwrap()
}

#[test]
fn written_corpus_reloads_and_splits_into_streams() {
    let cfg = SynthConfig::default();
    let samples = generate_corpus(&cfg);
    let vocab = synth_vocab(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), &samples, &vocab).unwrap();
    let path = dir.path().join("manifest.jsonl");
    manifest.write(&path).unwrap();

    let back = Manifest::read(&path).unwrap();
    assert_eq!(back, manifest);
    back.check_integrity(&vocab).unwrap();

    for (rec, sample) in back.records.iter().zip(&samples) {
        let clip = load_clip(&rec.clip_path, None).unwrap();
        let masks = MaskSet::read(rec.mask_path.as_ref().unwrap()).unwrap();
        assert_eq!(clip, sample.clip);
        assert_eq!(masks, sample.masks);

        let s = apply_masks(&clip, &masks).unwrap();
        for t in 0..clip.len() {
            for px in 0..clip.height() * clip.width() {
                let both = masks.person1()[t][px] && masks.person2()[t][px];
                for c in 0..3 {
                    let i = px * 3 + c;
                    if both {
                        assert_eq!(s.bg.frame(t)[i], 0);
                    } else {
                        let sum = s.p1.frame(t)[i] as u16
                            + s.p2.frame(t)[i] as u16
                            + s.bg.frame(t)[i] as u16;
                        assert_eq!(sum, clip.frame(t)[i] as u16);
                    }
                }
            }
        }

        let k = 16;
        let sampled = s.sampled(k);
        let idx = sample_frames(clip.len(), k);
        assert_eq!(sampled.p1.len(), k);
        for (j, &t) in idx.iter().enumerate() {
            assert_eq!(sampled.bg.frame(j), s.bg.frame(t));
        }
    }
}

#[test]
fn vocabulary_json_and_open_set_extension() {
    let vocab = synth_vocab(&SynthConfig::default());
    let back = UnifiedVocabulary::from_json(&vocab.to_json()).unwrap();
    assert_eq!(back.classes(), vocab.classes());

    let unseen = bundled_unseen_classes();
    assert_eq!(unseen.len(), 6);
    let ext = vocab.extended(&unseen).unwrap();
    assert_eq!(ext.len(), vocab.len() + unseen.len());
    for (i, name) in vocab.classes().iter().enumerate() {
        assert_eq!(ext.index_of(name), Some(i));
    }
    assert!(vocab.extended(&[vocab.classes()[0].clone()]).is_err());
}

#[test]
fn metrics_on_a_hand_worked_case() {
    // confusion: class 0 -> [2 right, 1 as 1]; class 1 -> [1 right]; class 2 -> [1 as 0]
    let truths = [0, 0, 0, 1, 2];
    let preds = [0, 0, 1, 1, 0];
    let r = macro_f1(&preds, &truths, 3).unwrap();
    let f0 = 2.0 * (2.0 / 3.0) * (2.0 / 3.0) / (4.0 / 3.0);
    let f1 = 2.0 * 0.5 * 1.0 / 1.5;
    assert!((r.macro_f1 - (f0 + f1 + 0.0) / 3.0).abs() < 1e-12);

    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m - 2.5).abs() < 1e-12);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-12);
}
