mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storyplug_core::backend::{Backend, TokenSequence};
use storyplug_core::extract::extract_character_plugin;
use storyplug_core::inference::{generate_frame, EditSchedule, GenerationRequest, LayoutSpec, NormBox, ScheduleKind};
use storyplug_core::sampler::{self, NoHooks};
use storyplug_core::{CharacterPlugin, ToyBackend, ToyConfig};

use common::*;

const PROMPT: &str = "a girl and a boy in a park";

fn two_characters(be: &ToyBackend) -> Vec<CharacterPlugin> {
    let fr = be.frozen_encoder();
    vec![plugin_from(be, fr, "mia", "girl"), plugin_from(be, fr, "leo", "boy")]
}

fn disjoint_layout() -> LayoutSpec {
    LayoutSpec::default()
        .with_box("mia", NormBox::new(0.0, 0.0, 0.5, 1.0))
        .with_box("leo", NormBox::new(0.5, 0.0, 1.0, 1.0))
}

fn steering_request(plugins: Vec<CharacterPlugin>, seed: u64, base_scale: f64) -> GenerationRequest {
    GenerationRequest {
        plugins,
        layout: disjoint_layout(),
        schedule: EditSchedule { kind: ScheduleKind::LinearDecay, active_fraction: 1.0, base_scale },
        ..GenerationRequest::new(PROMPT, seed)
    }
}

#[test]
fn extraction_matches_single_sequence_oracle() {
    for seed in [3u64, 17, 99] {
        let be = ToyBackend::new(ToyConfig { seed, ..ToyConfig::default() }).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut state = be.frozen_encoder().to_finetuned();
        state.params.iter_mut().for_each(|p| *p += 0.3 * (r.random::<f64>() - 0.5));
        let plugin = extract_character_plugin(&be, &state, "mia", "girl", 0).unwrap();

        let girl = be.tokenize("girl").unwrap().tokens.0[1];
        let l = be.descriptor().max_len;
        assert_eq!(plugin.rows, l - 2);
        for p in 1..=l - 2 {
            // hand-built: bos right before the character, eos right after
            let mut seq = vec![0u32; l];
            seq[p - 1] = 1;
            seq[p] = girl;
            seq[p + 1] = 2;
            let emb = be.encode_tokens(&state, &TokenSequence(seq)).unwrap();
            let row = plugin.row_for_position(p).unwrap();
            for (a, &b) in row.iter().zip(emb.row(p)) {
                assert_eq!(a.to_bits(), (b as f32).to_bits(), "seed {seed} position {p}");
            }
        }
    }
}

#[test]
fn vanilla_reduction_is_bitwise() {
    let be = toy();
    for seed in [0u64, 1, 2] {
        let out = generate_frame(&be, &GenerationRequest::new("a quiet street at night", seed)).unwrap();
        let t = be.tokenize("a quiet street at night").unwrap().tokens;
        let fr = be.frozen_encoder();
        let eb = be.encode_tokens(fr, &t).unwrap();
        let ub = be.encode_tokens(fr, &be.unconditional_tokens()).unwrap();
        let lat = sampler::sample(&be, &eb, &ub, seed, 100, 7.5, &mut NoHooks).unwrap();
        assert!(out.latent.data.iter().zip(&lat.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(out.image, be.decode_latent(&lat).unwrap());
    }
}

#[test]
fn editing_steers_attention_into_boxes() {
    let be = toy();
    let plugins = two_characters(&be);
    let mut wins = 0;
    for seed in 0..10u64 {
        let edited = generate_frame(&be, &steering_request(plugins.clone(), seed, 1.0)).unwrap();
        let plain = generate_frame(&be, &steering_request(plugins.clone(), seed, 0.0)).unwrap();
        let better = ["mia", "leo"].iter().all(|c| {
            let e = *edited.diagnostics.in_box_mass[*c].last().unwrap();
            let p = *plain.diagnostics.in_box_mass[*c].last().unwrap();
            e > p
        });
        wins += better as usize;
    }
    assert!(wins >= 9, "editing helped on {wins}/10 seeds");
}

#[test]
fn final_attention_peaks_inside_box() {
    let be = toy();
    let out = generate_frame(&be, &steering_request(two_characters(&be), 5, 1.0)).unwrap();
    let layout = disjoint_layout();
    for (name, grids) in &out.diagnostics.final_attention {
        let b = layout.boxes[name];
        for g in grids {
            let (row, col) = g.argmax();
            assert!(b.contains_cell(row, col, g.side), "{name} layer {} peaks at ({row}, {col})", g.layer);
        }
    }
    assert_eq!(out.diagnostics.xi.len(), 100);
    assert!(out.diagnostics.overlapping_boxes.is_empty());
}

#[test]
fn default_schedule_stops_editing_halfway() {
    let be = toy();
    let req = GenerationRequest {
        plugins: two_characters(&be),
        layout: disjoint_layout(),
        ..GenerationRequest::new(PROMPT, 1)
    };
    let out = generate_frame(&be, &req).unwrap();
    let xi = &out.diagnostics.xi;
    assert_eq!(xi[0], 1.0);
    assert!(xi[..50].iter().all(|&v| v > 0.0));
    assert!(xi[50..].iter().all(|&v| v == 0.0));
}

#[test]
fn frames_are_deterministic() {
    let be = toy();
    let req = steering_request(two_characters(&be), 42, 1.0);
    assert_eq!(generate_frame(&be, &req).unwrap(), generate_frame(&be, &req).unwrap());
}
