//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails or runs over its time budget.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storyplug::core::augment::{
    build_training_set, copy_paste, Background, CharacterImage, PasteConfig, ScaleReference, TrainingDataset,
};
use storyplug::core::backend::{Backend, TokenSequence};
use storyplug::core::eval::{image_alignment, image_alignment_from_embeddings, text_alignment, Embedder};
use storyplug::core::extract::extract_character_plugin;
use storyplug::core::finetune::{dataset_latents, draw_samples, regularization_loss, NctPositions, Objective};
use storyplug::core::image::{RgbImage, RgbaImage};
use storyplug::core::inference::{
    bind_plugins, edit_cross_attention, fuse_embeddings, generate_frame, rasterize_box, EditSchedule,
    GenerationRequest, LayoutSpec, NormBox, ScheduleKind,
};
use storyplug::core::plugin::{self, header_len};
use storyplug::core::sampler::{self, NoHooks};
use storyplug::core::{build_token_matrix, CharacterPlugin, EncoderState, ToyBackend, ToyConfig};
use storyplug::{cli, io};

use common::*;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    }};
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn perturbed(be: &ToyBackend, seed: u64, scale: f64) -> EncoderState {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = be.frozen_encoder().to_finetuned();
    s.params.iter_mut().for_each(|p| *p += scale * (r.random::<f64>() - 0.5));
    s
}

fn gradient_background(w: u32, h: u32, tint: u8) -> RgbImage {
    let mut bg = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            bg.put_pixel(x, y, [(x * 7 % 256) as u8 ^ tint, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
        }
    }
    bg
}

fn character(w: u32, h: u32, rgb: [u8; 3]) -> CharacterImage {
    CharacterImage::new(ellipse(w, h, rgb), "ellipse.png").unwrap()
}

fn backgrounds(k: usize, side: u32) -> Vec<Background> {
    (0..k)
        .map(|i| Background { image: gradient_background(side, side, i as u8 * 40), scene_index: i, seed: i as u64 })
        .collect()
}

fn token_matrix() -> Check {
    for l in [4usize, 6, 16, 77] {
        let d = ToyConfig { max_len: l, ..ToyConfig::default() }.descriptor();
        let ct = 77u32;
        let tm = build_token_matrix(&d, ct);
        ensure!(tm.q() == l - 2, "L={l}: Q={} expected {}", tm.q(), l - 2);
        for (q, row) in tm.rows.iter().enumerate() {
            let row = row.as_slice();
            ensure!(row.len() == l, "L={l}: row {q} has {} columns", row.len());
            for (c, &t) in row.iter().enumerate() {
                let expect = match c {
                    c if c == q => 1,
                    c if c == q + 1 => ct,
                    c if c == q + 2 => 2,
                    _ => 0,
                };
                ensure!(t == expect, "L={l}: TM[{q}][{c}] = {t}, expected {expect}");
            }
        }
    }
    Ok(())
}

fn extraction_oracle() -> Check {
    for seed in [3u64, 17, 99] {
        let be = ToyBackend::new(ToyConfig { seed, ..ToyConfig::default() }).unwrap();
        let state = perturbed(&be, seed, 0.3);
        let p = extract_character_plugin(&be, &state, "mia", "girl", 0).map_err(|e| e.to_string())?;
        let girl = be.tokenize("girl").unwrap().tokens.0[1];
        let l = be.descriptor().max_len;
        for pos in 1..=l - 2 {
            let mut seq = vec![0u32; l];
            seq[pos - 1] = 1;
            seq[pos] = girl;
            seq[pos + 1] = 2;
            let emb = be.encode_tokens(&state, &TokenSequence(seq)).unwrap();
            let row = p.row_for_position(pos).ok_or("missing row")?;
            let same = row.iter().zip(emb.row(pos)).all(|(a, &b)| a.to_bits() == (b as f32).to_bits());
            ensure!(same, "seed {seed}: position {pos} differs from the single-sequence encoding");
        }
    }
    Ok(())
}

fn plugin_file() -> Check {
    let be = toy();
    let p = extract_character_plugin(&be, &perturbed(&be, 5, 0.2), "mia", "girl", 1_700_000_000).unwrap();
    let bytes = plugin::serialize(&p);
    let back = plugin::deserialize(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == p, "round trip changed the plugin");
    ensure!(plugin::serialize(&back) == bytes, "re-serialization is not byte-identical");
    ensure!(back.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()), "values not bitwise equal");
    let d = be.descriptor();
    ensure!(p.payload_len() == 4 * (d.max_len - 2) * d.width, "toy payload {} bytes", p.payload_len());
    ensure!(bytes.len() == header_len(&p) + p.payload_len(), "toy file is {} bytes", bytes.len());

    let big = CharacterPlugin {
        name: "mia".into(),
        class_noun: "girl".into(),
        rows: 75,
        width: 1024,
        values: (0..75 * 1024).map(|i| (i as f32).sin()).collect(),
        descriptor_id: "full-size".into(),
        created_at: 0,
        format_version: plugin::FORMAT_VERSION,
    };
    ensure!(big.payload_len() == 307_200, "payload {} bytes", big.payload_len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mia.cgcp");
    io::write_plugin(&path, &big).map_err(|e| e.to_string())?;
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    ensure!(size == 307_200 + header_len(&big), "file is {size} bytes");
    println!("      75x1024 plugin file: {size} bytes ({} header + 307200 payload)", header_len(&big));
    Ok(())
}

fn loss_dataset(be: &ToyBackend, seed: u64) -> TrainingDataset {
    let side = (be.descriptor().latent_side * 8) as u32;
    let chars = vec![character(20, 30, [230, 80, 40]), character(24, 24, [200, 60, 90])];
    build_training_set(&chars, &backgrounds(2, side), 6, "girl", seed, &PasteConfig::default()).unwrap()
}

fn loss_suite() -> Check {
    let be = toy();
    let fr = be.frozen_encoder();
    for mode in [NctPositions::All, NctPositions::BosEos] {
        let reg = regularization_loss(&be, &fr.to_finetuned(), fr, "girl", mode).unwrap();
        ensure!(reg == 0.0, "L_reg(E_f, E_f) = {reg}");
    }

    let ds = loss_dataset(&be, 2);
    let latents = dataset_latents(&be, &ds);
    let configs = [(0.0, NctPositions::All, 1u64), (0.01, NctPositions::All, 2), (1.0, NctPositions::BosEos, 3)];
    for (lambda, mode, seed) in configs {
        let obj = Objective::new(&be, "girl", lambda, mode).unwrap();
        let state = perturbed(&be, seed, 0.1);
        let samples = draw_samples(seed, 99, 0, 2, latents.len(), 1000, 8, 4);
        let (l, grad) = obj.loss_and_grad(&state, &latents, &samples).unwrap();
        let expect = l.l_sub + lambda * l.l_reg;
        ensure!(((l.l_total - expect) / expect).abs() <= 1e-6, "lambda {lambda}: total {} vs {expect}", l.l_total);

        let live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-5).collect();
        ensure!(live.len() >= 32, "only {} coordinates with gradient", live.len());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        for _ in 0..32 {
            let i = live[r.random_range(0..live.len())];
            let mut plus = state.clone();
            plus.params[i] += h;
            let mut minus = state.clone();
            minus.params[i] -= h;
            let fp = obj.loss(&plus, &latents, &samples).unwrap().l_total;
            let fm = obj.loss(&minus, &latents, &samples).unwrap().l_total;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs());
            ensure!(rel <= 1e-4, "lambda {lambda} coord {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }
    Ok(())
}

fn cardinality() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    let mut cases: Vec<(usize, usize)> = (0..20).map(|_| (r.random_range(1..12), r.random_range(0..60))).collect();
    cases.push((40, 300));
    let bgs = backgrounds(3, 32);
    for (m, n) in cases {
        let chars: Vec<_> = (0..m).map(|i| character(6, 8, [i as u8, 50, 90])).collect();
        let ds = build_training_set(&chars, &bgs, n, "girl", m as u64 * 1000 + n as u64, &PasteConfig::default())
            .map_err(|e| e.to_string())?;
        ensure!(ds.len() == m + n, "(m={m}, n={n}) gave {} images", ds.len());
        ensure!(ds.images().count() == m + n, "(m={m}, n={n}) iterates {} images", ds.images().count());
    }
    Ok(())
}

fn copy_paste_check() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let (cw, ch) = (r.random_range(2..24u32), r.random_range(2..24u32));
        let (bw, bh) = (r.random_range(20..72u32), r.random_range(20..72u32));
        let mut img = RgbaImage::new(cw, ch);
        for y in 0..ch {
            for x in 0..cw {
                let a = if r.random_bool(0.3) { 0 } else { r.random_range(1..=255u8) };
                img.put_pixel(x, y, [255, 20, 0, a]);
            }
        }
        img.put_pixel(0, 0, [255, 20, 0, 255]);
        img.put_pixel(cw - 1, ch - 1, [255, 20, 0, 255]);
        let character = CharacterImage::new(img, "r.png").unwrap();
        let bg = gradient_background(bw, bh, 3);
        let cfg = PasteConfig { scale_min: 0.2, scale_max: 0.9, reference: ScaleReference::BackgroundShortSide };
        let out = copy_paste(&character, &bg, &cfg, case).map_err(|e| e.to_string())?;
        let (ox, oy, w, h) = out.rect;
        let sprite = character.cropped().resize_nearest(w, h);
        for y in 0..bh {
            for x in 0..bw {
                let inside = x >= ox && x < ox + w && y >= oy && y < oy + h;
                if !inside || sprite.pixel(x - ox, y - oy)[3] == 0 {
                    ensure!(out.image.pixel(x, y) == bg.pixel(x, y), "case {case}: background changed at ({x}, {y})");
                }
            }
        }
        let cx = ox as f64 + w as f64 / 2.0;
        let cy = oy as f64 + h as f64 / 2.0;
        ensure!((cx - bw as f64 / 2.0).abs() <= 1.0, "case {case}: center x {cx} on width {bw}");
        ensure!((cy - bh as f64 / 2.0).abs() <= 1.0, "case {case}: center y {cy} on height {bh}");
    }
    Ok(())
}

fn fusion() -> Check {
    let be = toy();
    let plugins: Vec<CharacterPlugin> = [("mia", "girl"), ("leo", "boy"), ("rex", "dog")]
        .iter()
        .enumerate()
        .map(|(i, (name, noun))| {
            extract_character_plugin(&be, &perturbed(&be, 40 + i as u64, 0.05), name, noun, 0).unwrap()
        })
        .collect();
    let tokens = be.tokenize("the dog follows a boy and a girl").unwrap().tokens;
    let eb = be.encode_tokens(be.frozen_encoder(), &tokens).unwrap();

    let empty = fuse_embeddings(&eb, &tokens, &[]).map_err(|e| e.to_string())?;
    ensure!(bits_eq(&empty.embeddings.data, &eb.data) && empty.positions.is_empty(), "empty fusion changed the prompt");

    // every subset: rows at character positions come from the plugin, all
    // other rows are untouched
    for mask in 1..8usize {
        let chosen: Vec<_> = (0..3).filter(|i| mask >> i & 1 == 1).map(|i| plugins[i].clone()).collect();
        let fused = fuse_embeddings(&eb, &tokens, &bind_plugins(&be, &chosen).unwrap()).map_err(|e| e.to_string())?;
        for r in 0..eb.rows {
            let owner = fused.positions.iter().find(|(_, v)| v.contains(&r)).map(|(n, _)| n);
            match owner {
                Some(name) => {
                    let p = chosen.iter().find(|p| &p.name == name).unwrap();
                    let expect = p.row_for_position(r).unwrap();
                    let ok = fused.embeddings.row(r).iter().zip(expect).all(|(a, &b)| *a == b as f64);
                    ensure!(ok, "subset {mask}: row {r} is not the plugin row");
                }
                None => ensure!(bits_eq(fused.embeddings.row(r), eb.row(r)), "subset {mask}: row {r} changed"),
            }
        }
    }

    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let all = |order: &[usize]| {
        let ordered: Vec<_> = order.iter().map(|&i| plugins[i].clone()).collect();
        fuse_embeddings(&eb, &tokens, &bind_plugins(&be, &ordered).unwrap()).unwrap()
    };
    let reference = all(&perms[0]);
    for perm in perms {
        let f = all(&perm);
        ensure!(bits_eq(&f.embeddings.data, &reference.embeddings.data), "order {perm:?} differs");
        ensure!(f.positions == reference.positions, "order {perm:?} reports other positions");

        // one plugin at a time, feeding each result into the next fusion
        let mut seq = eb.clone();
        for &i in &perm {
            let single = [plugins[i].clone()];
            seq = fuse_embeddings(&seq, &tokens, &bind_plugins(&be, &single).unwrap()).unwrap().embeddings;
        }
        ensure!(bits_eq(&seq.data, &reference.embeddings.data), "sequential fusion in order {perm:?} differs");
    }
    Ok(())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn layout_editing() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let random_box = |r: &mut ChaCha8Rng| {
        let (x0, y0) = (r.random_range(0.0..0.95), r.random_range(0.0..0.95));
        let x1 = r.random_range(x0 + 1e-3..=1.0f64);
        let y1 = r.random_range(y0 + 1e-3..=1.0f64);
        NormBox::new(x0, y0, x1, y1)
    };

    for _ in 0..50 {
        let cam: Vec<f64> = (0..64).map(|_| r.random_range(-50.0..50.0)).collect();
        let bias = rasterize_box(&random_box(&mut r), 8, 2.5, -1e8);
        let out = edit_cross_attention(&cam, &bias, 0.0).map_err(|e| e.to_string())?;
        ensure!(bits_eq(&out, &cam), "xi = 0 edit is not the identity");
        let out = edit_cross_attention(&cam, &bias, 0.7).unwrap();
        let manual: Vec<f64> = cam.iter().zip(&bias).map(|(c, b)| c + 0.7 * b).collect();
        ensure!(bits_eq(&out, &manual), "edit is not elementwise cam + xi * bias");
    }

    let b = NormBox::new(0.25, 0.25, 0.75, 0.75);
    let bias = rasterize_box(&b, 16, 2.5, -1e8);
    let inside = bias.iter().filter(|&&v| v == 2.5).count();
    ensure!(inside == 64, "box (0.25, 0.25, 0.75, 0.75) covers {inside} cells at side 16");
    let post = softmax(&edit_cross_attention(&vec![0.0; 256], &bias, 1.0).unwrap());
    let outside: f64 = post.iter().zip(&bias).filter(|(_, &b)| b != 2.5).map(|(p, _)| p).sum();
    ensure!(outside < 1e-6, "post-softmax mass outside the box is {outside}");

    for _ in 0..20 {
        let b = random_box(&mut r);
        for side in [8usize, 16, 32] {
            let map = rasterize_box(&b, side, 2.5, -1e8);
            let mut expected = 0;
            for i in 0..side {
                for j in 0..side {
                    let (cx, cy) = ((j as f64 + 0.5) / side as f64, (i as f64 + 0.5) / side as f64);
                    let hit = b.x0 <= cx && cx < b.x1 && b.y0 <= cy && cy < b.y1;
                    expected += hit as usize;
                    ensure!((map[i * side + j] == 2.5) == hit, "{b:?} side {side}: cell ({i}, {j})");
                }
            }
            let got = map.iter().filter(|&&v| v == 2.5).count();
            ensure!(got == expected, "{b:?} side {side}: {got} cells, oracle {expected}");
        }
    }
    Ok(())
}

const TWO_CHARACTERS: &str = "a girl and a boy in a park";

fn two_characters(be: &ToyBackend) -> Vec<CharacterPlugin> {
    vec![frozen_plugin(be, "mia", "girl"), frozen_plugin(be, "leo", "boy")]
}

fn steering() -> Check {
    let be = toy();
    let plugins = two_characters(&be);
    let layout = LayoutSpec::default()
        .with_box("mia", NormBox::new(0.0, 0.0, 0.5, 1.0))
        .with_box("leo", NormBox::new(0.5, 0.0, 1.0, 1.0));
    // Edits stay active through the final step, where the mass is measured.
    let request = |seed: u64, base_scale: f64| GenerationRequest {
        plugins: plugins.clone(),
        layout: layout.clone(),
        schedule: EditSchedule { kind: ScheduleKind::LinearDecay, active_fraction: 1.0, base_scale },
        ..GenerationRequest::new(TWO_CHARACTERS, seed)
    };
    let mut wins = 0;
    for seed in 0..10u64 {
        let edited = generate_frame(&be, &request(seed, 1.0)).map_err(|e| e.to_string())?;
        let plain = generate_frame(&be, &request(seed, 0.0)).map_err(|e| e.to_string())?;
        let better = ["mia", "leo"].iter().all(|c| {
            edited.diagnostics.in_box_mass[*c].last().unwrap() > plain.diagnostics.in_box_mass[*c].last().unwrap()
        });
        wins += better as usize;
    }
    println!("      editing raised final-step in-box mass for both characters on {wins}/10 seeds");
    ensure!(wins >= 9, "only {wins}/10 seeds");
    Ok(())
}

fn vanilla_reduction() -> Check {
    let be = toy();
    let prompt = "a quiet street at night";
    for seed in [0u64, 1, 2] {
        let out = generate_frame(&be, &GenerationRequest::new(prompt, seed)).map_err(|e| e.to_string())?;
        let fr = be.frozen_encoder();
        let eb = be.encode_tokens(fr, &be.tokenize(prompt).unwrap().tokens).unwrap();
        let ub = be.encode_tokens(fr, &be.unconditional_tokens()).unwrap();
        let latent = sampler::sample(&be, &eb, &ub, seed, 100, 7.5, &mut NoHooks).unwrap();
        ensure!(bits_eq(&out.latent.data, &latent.data), "seed {seed}: latent differs from the plain sampler");
        ensure!(out.image == be.decode_latent(&latent).unwrap(), "seed {seed}: image differs");
    }
    Ok(())
}

fn cli_ok(args: &[&str]) -> Result<serde_json::Value, String> {
    let mut argv = vec!["storyplug"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(argv, &mut out, &mut err);
    if code != 0 {
        return Err(format!("`{}` exited {code}: {}", args.join(" "), String::from_utf8_lossy(&err)));
    }
    serde_json::from_slice(&out).map_err(|e| e.to_string())
}

const STORY: &str = r#"{
  "schema_version": 1,
  "title": "three frames",
  "style_suffix": "cartoon style",
  "frames": [
    {"id": "f1", "prompt": "a girl in a park", "characters": ["mia"],
     "layout": {"boxes": {"mia": [0.0, 0.0, 0.5, 1.0]}}, "seed": 1},
    {"id": "f2", "prompt": "a girl and a dog by the river", "characters": ["mia", "rex"],
     "layout": {"boxes": {"mia": [0.0, 0.1, 0.5, 1.0], "rex": [0.5, 0.4, 1.0, 1.0]}}, "seed": 2},
    {"id": "f3", "prompt": "a quiet street at night", "seed": 3}
  ]
}"#;

/// augment -> train -> extract -> render, all through the CLI. Returns the
/// manifest bytes.
fn pipeline_run(root: &Path) -> Result<Vec<u8>, String> {
    let (chars, scenes) = character_fixture(root, 3);
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let o = cli_ok(&[
        "augment",
        "--chars",
        chars.to_str().unwrap(),
        "--scenes",
        scenes.to_str().unwrap(),
        "--n",
        "10",
        "--out",
        &p("ds"),
        "--seed",
        "11",
    ])?;
    if o["total"] != 13 {
        return Err(format!("dataset has {} images", o["total"]));
    }
    cli_ok(&[
        "train",
        "--dataset",
        &p("ds"),
        "--class-noun",
        "girl",
        "--steps",
        "2000",
        "--lr",
        "0.01",
        "--lambda",
        "0.01",
        "--out",
        &p("mia.ckpt"),
        "--seed",
        "12",
    ])?;
    std::fs::create_dir_all(root.join("plugins")).unwrap();
    cli_ok(&["extract", "--ckpt", &p("mia.ckpt"), "--name", "mia", "--out", &p("plugins/mia.cgcp")])?;
    let be = toy();
    io::write_plugin(&root.join("plugins/rex.cgcp"), &frozen_plugin(&be, "rex", "dog")).unwrap();
    std::fs::write(root.join("story.json"), STORY).unwrap();
    cli_ok(&[
        "render-story",
        "--script",
        &p("story.json"),
        "--plugins",
        &p("plugins"),
        "--out",
        &p("out"),
        "--workers",
        "3",
    ])?;
    io::read(&root.join("out/manifest.json")).map_err(|e| e.to_string())
}

fn end_to_end() -> Check {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    let m: storyplug::story::StoryManifest = serde_json::from_slice(&first).map_err(|e| e.to_string())?;
    ensure!(m.frames.len() == 3, "manifest lists {} frames", m.frames.len());
    for f in &m.frames {
        let png = io::read(&a.path().join("out").join(&f.image)).map_err(|e| e.to_string())?;
        ensure!(io::sha256_hex(&png) == f.image_sha256, "frame {} hash does not match its file", f.id);
    }
    let history = storyplug::checkpoint::read(&a.path().join("mia.ckpt")).map_err(|e| e.to_string())?.history;
    ensure!(history.len() == 2000, "{} training steps recorded", history.len());
    println!("      manifest sha256 {}", io::sha256_hex(&first));
    ensure!(
        first == second,
        "rerun produced a different manifest ({} vs {})",
        io::sha256_hex(&first),
        io::sha256_hex(&second)
    );
    Ok(())
}

/// Maps the text "prompt" to e0 and images by their first red value:
/// 0 -> e0, 1 -> e1.
struct Fixed;

fn basis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; 4];
    v[i] = 1.0;
    v
}

impl Embedder for Fixed {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        basis(if text == "prompt" { 0 } else { 2 })
    }
    fn embed_image(&self, image: &RgbImage) -> Vec<f64> {
        basis(image.pixel(0, 0)[0] as usize)
    }
}

fn solid(v: u8) -> RgbImage {
    let mut img = RgbImage::new(2, 2);
    img.put_pixel(0, 0, [v, 0, 0]);
    img
}

fn evaluation() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let ta = |ims: &[RgbImage]| text_alignment(ims, "prompt", &Fixed).unwrap();
    ensure!(close(ta(&[solid(0)]), 1.0), "identical embeddings: TA = {}", ta(&[solid(0)]));
    ensure!(close(ta(&[solid(1)]), 0.0), "orthogonal embeddings: TA = {}", ta(&[solid(1)]));
    ensure!(close(ta(&[solid(0), solid(1)]), 0.5), "mixture: TA = {}", ta(&[solid(0), solid(1)]));
    let ia = |refs: &[Vec<RgbImage>]| image_alignment(&[solid(0)], refs, &Fixed).unwrap();
    ensure!(close(ia(&[vec![solid(0)]]), 1.0), "one character, identical: IA = {}", ia(&[vec![solid(0)]]));
    let two = [vec![solid(0)], vec![solid(1)]];
    ensure!(close(ia(&two), 0.5), "characters at 1.0 and 0.0: IA = {}", ia(&two));

    let mut r = ChaCha8Rng::seed_from_u64(77);
    let vec_of = |r: &mut ChaCha8Rng| -> Vec<f64> { (0..6).map(|_| r.random_range(-1.0..1.0)).collect() };
    for trial in 0..200 {
        let ims: Vec<_> = (0..r.random_range(1..6)).map(|_| vec_of(&mut r)).collect();
        let refs: Vec<Vec<_>> =
            (0..r.random_range(1..4)).map(|_| (0..r.random_range(1..4)).map(|_| vec_of(&mut r)).collect()).collect();
        let got = image_alignment_from_embeddings(&ims, &refs).map_err(|e| e.to_string())?;
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut per_char = 0.0;
        for set in &refs {
            let mut s = 0.0;
            for rv in set {
                for im in &ims {
                    s += cos(rv, im);
                }
            }
            per_char += s / (set.len() * ims.len()) as f64;
        }
        let oracle = per_char / refs.len() as f64;
        ensure!(close(got, oracle), "trial {trial}: {got} vs oracle {oracle}");
    }
    Ok(())
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn main() {
    let criteria = [
        Criterion { name: "token-matrix structure", budget: secs(1), run: token_matrix },
        Criterion { name: "extraction oracle", budget: secs(10), run: extraction_oracle },
        Criterion { name: "plugin file", budget: secs(1), run: plugin_file },
        Criterion { name: "loss suite", budget: secs(120), run: loss_suite },
        Criterion { name: "dataset cardinality", budget: secs(1), run: cardinality },
        Criterion { name: "copy-paste", budget: secs(5), run: copy_paste_check },
        Criterion { name: "fusion", budget: secs(5), run: fusion },
        Criterion { name: "layout editing", budget: secs(10), run: layout_editing },
        Criterion { name: "layout steering", budget: secs(180), run: steering },
        Criterion { name: "vanilla reduction", budget: secs(60), run: vanilla_reduction },
        Criterion { name: "end-to-end toy pipeline", budget: secs(600), run: end_to_end },
        Criterion { name: "evaluation metrics", budget: None, run: evaluation },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.iter().any(|f| c.name.contains(f.as_str()))) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let result = result.and_then(|()| match c.budget {
            Some(b) if took > b => Err(format!("took {:.2}s, budget {:.0}s", took.as_secs_f64(), b.as_secs_f64())),
            _ => Ok(()),
        });
        match result {
            Ok(()) => println!("PASS {} ({:.2}s)", c.name, took.as_secs_f64()),
            Err(e) => {
                failures += 1;
                println!("FAIL {} ({:.2}s): {e}", c.name, took.as_secs_f64());
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
