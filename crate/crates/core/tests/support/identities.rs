//! Exact structural identities of the network and the loss composition.
//! Each check panics on the first violation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vimd::distill::{loss_hsd, loss_ld, sample_loss, DistillConfig, DistillLosses, TeacherTargets};
use vimd::network::{classify_head, VimConfig, VimNet};
use vimd::{Graph, Tensor};

pub fn small() -> VimConfig {
    VimConfig {
        embed_dim: 16,
        depth: 3,
        num_classes: 5,
        input_side: 32,
        ..VimConfig::toy()
    }
}

pub fn image(cfg: &VimConfig, seed: u64) -> Tensor {
    Tensor::uniform(&[cfg.in_channels, cfg.input_side, cfg.input_side], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn residual_identity() {
    let cfg = small();
    let mut net = VimNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for i in 0..cfg.depth {
        let name = format!("blocks.{i}.out");
        let dims = net.params.by_name(&name).unwrap().dims().to_vec();
        net.params.assign(&name, Tensor::zeros(&dims)).unwrap();
    }
    let (hidden, _) = net.infer(&image(&cfg, 2)).unwrap();
    assert_eq!(hidden.layers.len(), cfg.depth + 1);
    for layer in &hidden.layers[1..] {
        assert!(layer.bit_eq(&hidden.layers[0]));
    }
}

pub fn head_locality() {
    let cfg = small();
    let net = VimNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (hidden, logits) = net.infer(&image(&cfg, 4)).unwrap();
    let h_n = hidden.layers.last().unwrap().clone();
    let cls = cfg.cls_index();

    let head_logits = |h: Tensor| {
        let mut g = Graph::new();
        let (_, vars) = net.bind(&mut g, false);
        let x = g.constant(h);
        let out = classify_head(&mut g, x, &vars.head, cls).unwrap();
        g.value(out).clone()
    };
    assert!(head_logits(h_n.clone()).bit_eq(&logits));

    let mut others = h_n.clone();
    for r in (0..cfg.seq_len()).filter(|&r| r != cls) {
        for c in 0..cfg.embed_dim {
            others.set(&[r, c], others.at(&[r, c]) * -3.0 + 7.0);
        }
    }
    assert!(head_logits(others).bit_eq(&logits));

    let mut at_cls = h_n;
    at_cls.set(&[cls, 0], at_cls.at(&[cls, 0]) + 1.0);
    assert!(!head_logits(at_cls).bit_eq(&logits));
}

pub fn class_token_middle() {
    let cfg = small();
    let z = cfg.num_patches();
    assert_eq!(cfg.seq_len(), z + 1);
    assert_eq!(cfg.cls_index(), z / 2);

    // channel 0 of the patch conv copies the patch's top-left pixel; the
    // image stores each patch's raster index there
    let mut net = VimNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (d, c, j) = (cfg.embed_dim, cfg.in_channels, cfg.patch);
    let mut w = Tensor::zeros(&[d, c, j, j]);
    w.set(&[0, 0, 0, 0], 1.0);
    net.params.assign("patch.w", w).unwrap();
    net.params.assign("patch.b", Tensor::zeros(&[d])).unwrap();
    net.params.assign("pos", Tensor::zeros(&[z + 1, d])).unwrap();
    net.params.assign("cls", Tensor::full(&[1, d], -1.0)).unwrap();
    let grid = cfg.grid();
    let mut img = Tensor::zeros(&[c, cfg.input_side, cfg.input_side]);
    for p in 0..z {
        img.set(&[0, (p / grid) * j, (p % grid) * j], p as f32);
    }
    let (hidden, _) = net.infer(&img).unwrap();
    let h0 = &hidden.layers[0];
    for row in 0..=z {
        let want = match row.cmp(&(z / 2)) {
            std::cmp::Ordering::Less => row as f32,
            std::cmp::Ordering::Equal => -1.0,
            std::cmp::Ordering::Greater => (row - 1) as f32,
        };
        assert_eq!(h0.at(&[row, 0]), want, "row {row}");
    }
}

pub fn zero_at_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for temp in [0.5, 1.0, 4.0, 10.0] {
        let s = Tensor::uniform(&[7], 5.0, &mut rng);
        assert!(loss_ld(&s, &s, temp).unwrap().abs() <= 1e-7);
    }
    let cfg = small();
    let net = VimNet::new(cfg.clone(), &mut rng).unwrap();
    let (hidden, _) = net.infer(&image(&cfg, 7)).unwrap();
    assert_eq!(loss_hsd(&hidden, &hidden).unwrap(), 0.0);
}

pub fn graph_losses(dcfg: &DistillConfig, seed: u64) -> DistillLosses {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = VimNet::new(cfg.clone(), &mut rng).unwrap();
    let teacher = VimNet::new(cfg.clone(), &mut rng).unwrap();
    let (hidden, logits) = teacher.infer(&image(&cfg, seed + 1)).unwrap();
    let targets = TeacherTargets { logits, hidden };
    let mut g = Graph::new();
    let (_, vars) = student.bind(&mut g, true);
    let x = g.constant(image(&cfg, seed + 2));
    let out = student.forward(&mut g, &vars, x).unwrap();
    let loss = sample_loss(&mut g, dcfg, out.logits, &out.hidden, 3, Some(&targets)).unwrap();
    let reported = g.value(loss.total).item();
    let values = loss.values(&g, dcfg);
    assert!((reported - values.l_total).abs() <= 1e-7 * reported.abs().max(1.0));
    values
}

pub fn composition() {
    let full = DistillConfig::default();
    let v = graph_losses(&full, 10);
    assert!(v.l_ld > 0.0 && v.l_hsd > 0.0);
    let mkd = v.l_ld + full.beta * v.l_hsd;
    assert!((v.l_mkd - mkd).abs() <= 1e-7 * mkd);
    assert!((v.l_total - (v.l_ce + full.alpha * mkd)).abs() <= 1e-7 * v.l_total);

    let ce_only = graph_losses(&DistillConfig::ce_only(), 10);
    assert_eq!(ce_only.l_total, ce_only.l_ce);
    assert_eq!(ce_only.l_ce, v.l_ce);
    assert_eq!((ce_only.l_ld, ce_only.l_hsd), (0.0, 0.0));

    let no_hsd = graph_losses(&DistillConfig { use_hsd: false, ..full.clone() }, 10);
    assert_eq!(no_hsd.l_ld, v.l_ld);
    assert_eq!(no_hsd.l_total, no_hsd.l_ce + no_hsd.l_ld);

    let alpha0 = graph_losses(&DistillConfig { alpha: 0.0, ..full.clone() }, 10);
    assert_eq!(alpha0.l_total, alpha0.l_ce);

    let doubled = graph_losses(&DistillConfig { beta: 2.0 * full.beta, ..full.clone() }, 10);
    let want = v.l_ce + full.alpha * (v.l_ld + 2.0 * full.beta * v.l_hsd);
    assert!((doubled.l_total - want).abs() <= 1e-6 * want);
}

