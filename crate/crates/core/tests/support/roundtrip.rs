//! Checkpoint save/load checks. The including crate must declare `mod common`.

use std::path::Path;

use vimd::checkpoint::Checkpoint;
use vimd::distill::DistillConfig;
use vimd::sr::sr_generate;
use vimd::train::{train_student, StudentRun, TrainConfig};

use crate::common::{generator, net, tiny_data, tiny_train};

/// A checkpoint of a briefly trained student with SR fine-tuning, so that
/// every optional section is present.
pub fn trained_checkpoint() -> Checkpoint {
    let (hr, lr) = tiny_data(4, 1);
    let teacher = net(2);
    let cfg = TrainConfig {
        sr_fine_tune: true,
        ..tiny_train(1)
    };
    let out = train_student(
        StudentRun { hr: &hr, lr: &lr, teacher: &teacher },
        net(3),
        generator(4),
        &DistillConfig::default(),
        &cfg,
        None,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    let mut ck = Checkpoint::model(&out.last.net, out.last.sr.as_ref(), &hr.classes);
    ck.meta.loop_state = Some(out.state.loop_state.clone());
    ck.meta.run = serde_json::json!({ "note": "round trip" });
    ck.optimizer = Some(out.state.optimizer.clone());
    ck.sr_optimizer = out.state.sr_optimizer.clone();
    assert!(ck.sr_optimizer.is_some());
    ck
}

/// Saves `ck` to `path`, loads it back and checks every stored field and
/// the SR + classifier forward pass on fresh LR images bit for bit.
pub fn forward_survives_save_load(ck: &Checkpoint, path: &Path) {
    ck.save(path).unwrap();
    let back = Checkpoint::load(path).unwrap();
    assert_eq!(back.meta, Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().meta);
    assert!(back.net.params.bit_eq(&ck.net.params));
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!(back.sr_optimizer, ck.sr_optimizer);

    let (_, lr) = tiny_data(2, 9);
    let (sr_a, sr_b) = (ck.sr.as_ref().unwrap(), back.sr.as_ref().unwrap());
    assert!(sr_a.params.bit_eq(&sr_b.params));
    for img in &lr.images {
        let (up_a, up_b) = (sr_generate(img, sr_a).unwrap(), sr_generate(img, sr_b).unwrap());
        assert!(up_a.bit_eq(&up_b));
        let (ha, la) = ck.net.infer(&up_a).unwrap();
        let (hb, lb) = back.net.infer(&up_b).unwrap();
        assert!(la.bit_eq(&lb));
        assert!(ha.layers.iter().zip(&hb.layers).all(|(a, b)| a.bit_eq(b)));
    }
}

/// save → load → save must reproduce the first file byte for byte.
pub fn resave_is_byte_identical(ck: &Checkpoint, dir: &Path) {
    let (a, b) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
    ck.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let plain = Checkpoint::model(&net(5), None, &[]);
    let bytes = plain.to_bytes().unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
}
