//! End-to-end runs of the `tbvlm` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tbvlm_core::corpus::{findings_text, write_dataset, Annotation, Pathology, Zone};
use tbvlm_core::encoders::{unpatchify, PIXEL_MEAN, PIXEL_STD};
use tbvlm_core::trainer::build_vocabulary;
use tbvlm_core::{save_checkpoint, Case, Model, ModelConfig, Tensor, N_PATHOLOGIES};

fn tbvlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbvlm")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(tbvlm(&["describe", "--preset", "desk"]).status.code(), Some(0));
    assert_eq!(tbvlm(&["describe", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(tbvlm(&["gen-data", "--count", "3"]).status.code(), Some(2));

    let missing = tbvlm(&["evaluate", "--data", "/nonexistent", "--ckpt", "/nonexistent.ckpt", "--out-csv", "/tmp/x.csv", "--out-roc", "/tmp/x.json"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--"));
}

#[test]
fn paper_preset_shapes() {
    let out = tbvlm(&["describe", "--preset", "paper"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("196"), "{text}");
    assert!(text.contains("1024"), "{text}");
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = tbvlm(&["gen-data", "--out", path(d), "--count", "12", "--seed", "4", "--size", "32"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 13);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

const SIZE: usize = 32;
const PATCH: usize = 8;
const D: usize = 16;

fn fixture_box(p: usize) -> [u32; 4] {
    let x0 = 2 + 3 * p as u32;
    [x0, 4 + p as u32, x0 + 9, 20 + p as u32]
}

/// Patch `j` lights its own pixel `j` when pathology `j` is present, so the
/// position of the light says which finding it is.
fn fixture_case(case_id: u64, labels: [u8; N_PATHOLOGIES]) -> Case {
    let n = (SIZE / PATCH).pow(2);
    let mut patches = Tensor::zeros(&[n, PATCH * PATCH]);
    let mut annotations = Vec::new();
    for p in 0..N_PATHOLOGIES {
        if labels[p] == 1 {
            patches.data_mut()[p * PATCH * PATCH + p] = 1.0;
            let bbox = fixture_box(p);
            let zone = Zone::containing(
                (bbox[0] + bbox[2]) as f64 / 2.0,
                (bbox[1] + bbox[3]) as f64 / 2.0,
                SIZE,
                SIZE,
            );
            annotations.push(Annotation {
                pathology: Pathology::from_code(p).unwrap(),
                bbox,
                zone,
            });
        }
    }
    let note = format!("Fever and cough. {}", findings_text(&annotations));
    Case {
        case_id,
        image: unpatchify(&patches, SIZE, SIZE, PATCH).unwrap(),
        annotations,
        note,
        labels,
    }
}

fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// Weights that solve the fixture exactly. Patch tokens carry `±A` on the
/// coordinate pair of their pathology, uniform attention averages them into
/// the class token and the final norm leaves coordinate `2p` with the sign
/// of pathology `p`.
fn oracle_model(cases: &[Case]) -> Model {
    let config = ModelConfig {
        image_size: SIZE,
        patch_size: PATCH,
        d_model: D,
        n_enc_layers: 1,
        n_enc_heads: 2,
        n_fusion_layers: 1,
        n_dec_layers: 1,
        n_dec_heads: 2,
        d_decoder: 8,
        vocab_size: 0,
        l_max: 24,
        d_align: 4,
    };
    let mut model = Model::init(config, build_vocabulary(cases).unwrap(), 0).unwrap();
    let layout = model.layout.clone();
    let params = &mut model.params;
    let mut set = |id, f: &dyn Fn(&[usize]) -> f64| {
        let t = params.get_mut(id);
        let cols = *t.shape().last().unwrap();
        let rank2 = t.shape().len() == 2;
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = if rank2 { f(&[k / cols, k % cols]) } else { f(&[k]) };
        }
    };
    let pair = |j: usize, c: usize| {
        if j >= N_PATHOLOGIES {
            0.0
        } else if c == 2 * j {
            1.0
        } else if c == 2 * j + 1 {
            -1.0
        } else {
            0.0
        }
    };
    let v = &layout.visual;
    // The encoder standardizes pixels first; scale and shift to undo it.
    set(v.patch_embed.w, &|i| 2.0 * PIXEL_STD * pair(i[0], i[1]));
    set(v.patch_embed.b.unwrap(), &|i| 2.0 * PIXEL_MEAN * (0..N_PATHOLOGIES).map(|k| pair(k, i[0])).sum::<f64>());
    set(v.cls, &|_| 0.0);
    set(v.pos, &|i| if i[0] == 0 { 0.0 } else { -pair(i[0] - 1, i[1]) });
    let block = &v.blocks[0];
    let eye = |i: &[usize]| if i[0] == i[1] { 1.0 } else { 0.0 };
    set(block.attention.w_q, &|_| 0.0);
    set(block.attention.w_k, &|_| 0.0);
    set(block.attention.w_v, &eye);
    set(block.attention.w_o, &eye);
    set(block.mlp.fc2.w, &|_| 0.0);
    set(block.mlp.fc2.b.unwrap(), &|_| 0.0);

    let det = &layout.detect;
    set(det.presence.w, &|i| if i[0] == 2 * i[1] { 20.0 } else { 0.0 });
    set(det.presence.b.unwrap(), &|_| 0.0);
    set(det.boxes.w, &|_| 0.0);
    set(det.boxes.b.unwrap(), &|i| {
        let (p, k) = (i[0] / 4, i[0] % 4);
        let b = fixture_box(p).map(|v| v as f64 / SIZE as f64);
        let axis = k % 2;
        let s = b[axis + 2] - b[axis];
        if k < 2 {
            logit(b[axis] / (1.0 - s))
        } else {
            logit(s)
        }
    });
    model
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let mut cases = vec![fixture_case(0, [0; N_PATHOLOGIES]), fixture_case(1, [1; N_PATHOLOGIES])];
    for i in 0..6u64 {
        let labels = std::array::from_fn(|p| ((i as usize + p) % 3 == 0) as u8);
        cases.push(fixture_case(i + 2, labels));
    }
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&cases, &data).unwrap();
    let ckpt = dir.path().join("oracle.ckpt");
    save_checkpoint(&oracle_model(&cases), &ckpt).unwrap();

    let csv = dir.path().join("metrics.csv");
    let roc = dir.path().join("roc.json");
    let out = tbvlm(&["evaluate", "--data", path(&data), "--ckpt", path(&ckpt), "--out-csv", path(&csv), "--out-roc", path(&roc)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "pathology,precision,recall,auc,mean_iou,tp,fp,fn,tn");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), N_PATHOLOGIES + 1);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(&cells[1..5], &["1.0000"; 4], "{row}");
        assert_eq!(cells[6], "0", "{row}");
        assert_eq!(cells[7], "0", "{row}");
    }

    let curves: serde_json::Value = serde_json::from_str(&fs::read_to_string(&roc).unwrap()).unwrap();
    assert_eq!(curves.as_object().unwrap().len(), N_PATHOLOGIES);
}
