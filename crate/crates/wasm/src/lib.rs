//! Browser bindings: tokenizer comparison, first-step grid exploration and a
//! traced two-model ensemble decode. Every entry point takes scenario JSON
//! documents and returns a JSON string.

use abe_core::agreement::agrees;
use abe_core::decoder::{
    decode_observed, update_stall_flags, BeamItem, DecodeMode, DecodeObserver, EnsembleConfig,
};
use abe_core::model::{self, ModelAdapter, ModelState, ScenarioFile, ScenarioModel};
use abe_core::search::{Frontier, Grid, GridSlot, SearchStop};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const COARSE: &str = include_str!("../../../data/coarse.json");
pub const FINE: &str = include_str!("../../../data/fine.json");

fn load(name: &str, json: &str) -> Result<ScenarioModel, String> {
    let doc: ScenarioFile = serde_json::from_str(json).map_err(|e| format!("{name}: {e}"))?;
    ScenarioModel::from_file_doc(name, doc).map_err(|e| format!("{name}: {e}"))
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Piece {
    id: i32,
    surface: String,
    text: String,
}

#[derive(Serialize)]
struct Tokenization {
    model: String,
    pieces: Vec<Piece>,
}

pub fn tokenize_json(scenarios: &[(&str, &str)], input: &str) -> Result<String, String> {
    let mut out = Vec::new();
    for (name, json) in scenarios {
        let m = load(name, json)?;
        let vocab = m.vocabulary();
        let ids = vocab
            .tokenize_greedy(input.as_bytes())
            .map_err(|e| format!("{name}: {e}"))?;
        let pieces = ids
            .iter()
            .map(|&id| {
                let p = vocab.piece(id).expect("tokenizer returned a valid id");
                Piece {
                    id,
                    surface: p.surface.clone(),
                    text: text(p.bytes()),
                }
            })
            .collect();
        out.push(Tokenization {
            model: name.to_string(),
            pieces,
        });
    }
    to_json(&out)
}

#[derive(Serialize)]
struct Pop {
    row: usize,
    col: usize,
    score: f64,
    agrees: bool,
}

#[derive(Serialize)]
struct GridView {
    rows: Vec<(String, f64)>,
    cols: Vec<(String, f64)>,
    pops: Vec<Pop>,
    stop: String,
}

/// Best-first exploration of the first timestep's two-model grid until `k`
/// agreeing cells are found or `max_pops` cells have been popped.
pub fn explore_grid_json(
    a: &str,
    b: &str,
    weight_a: f64,
    k: usize,
    max_pops: usize,
) -> Result<String, String> {
    let models = [load("a", a)?, load("b", b)?];
    let weights = vec![weight_a, 1.0 - weight_a];
    let start = ModelState::new();
    let mut slots = Vec::new();
    for m in &models {
        slots.push(GridSlot {
            step: model::step(m, "", &start).map_err(|e| e.to_string())?,
            length: 1,
        });
    }
    let axis = |m: &ScenarioModel, slot: &GridSlot| -> Vec<(String, f64)> {
        slot.step
            .entries
            .iter()
            .map(|e| {
                (
                    m.vocabulary().piece(e.token).unwrap().surface.clone(),
                    e.score,
                )
            })
            .collect()
    };
    let rows = axis(&models[0], &slots[0]);
    let cols = axis(&models[1], &slots[1]);
    let grid = Grid::new(weights, vec![slots]).map_err(|e| e.to_string())?;

    let mut frontier = Frontier::new();
    frontier.seed(&grid).map_err(|e| e.to_string())?;
    let mut pops = Vec::new();
    let mut found = 0;
    let stop = loop {
        if found >= k {
            break SearchStop::Satisfied;
        }
        if pops.len() >= max_pops {
            break SearchStop::PopCapReached;
        }
        let Some(c) = frontier.pop(&grid) else {
            break SearchStop::HeapEmpty;
        };
        let states: Vec<ModelState> = (0..2)
            .map(|m| {
                let e = grid.items[0][m].step.entries[c.ranks[m]];
                start
                    .extend_to(models[m].vocabulary(), e.token, e.score)
                    .unwrap()
            })
            .collect();
        let ok = agrees(&[states[0].as_hypothesis(), states[1].as_hypothesis()]);
        found += ok as usize;
        pops.push(Pop {
            row: c.ranks[0],
            col: c.ranks[1],
            score: c.score,
            agrees: ok,
        });
    };
    to_json(&GridView {
        rows,
        cols,
        pops,
        stop: format!("{stop:?}"),
    })
}

#[derive(Serialize)]
struct LocalView {
    text: String,
    tokens: Vec<String>,
    stalled: bool,
    done: bool,
}

#[derive(Serialize)]
struct ItemView {
    global: String,
    score: f64,
    models: Vec<LocalView>,
}

#[derive(Serialize)]
struct StepView {
    t: usize,
    pops: usize,
    beam: Vec<ItemView>,
}

#[derive(Serialize)]
struct Output {
    text: String,
    score: f64,
    fallback: bool,
    tokens: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct Trace {
    steps: Vec<StepView>,
    outputs: Vec<Output>,
}

struct Recorder<'m> {
    models: &'m [ScenarioModel],
    pops: usize,
    steps: Vec<StepView>,
}

impl Recorder<'_> {
    fn surfaces(&self, m: usize, ids: &[i32]) -> Vec<String> {
        let v = self.models[m].vocabulary();
        ids.iter()
            .map(|&id| v.piece(id).unwrap().surface.clone())
            .collect()
    }
}

impl DecodeObserver for Recorder<'_> {
    fn on_search(&mut self, _t: usize, popped: &[f64], _stop: SearchStop) {
        self.pops = popped.len();
    }
    fn on_step(&mut self, t: usize, beam: &[BeamItem]) {
        let items = beam
            .iter()
            .map(|item| {
                let mut item = item.clone();
                update_stall_flags(&mut item);
                ItemView {
                    global: text(item.global().bytes),
                    score: item.score,
                    models: item
                        .states
                        .iter()
                        .enumerate()
                        .map(|(m, s)| LocalView {
                            text: text(s.bytes()),
                            tokens: self.surfaces(m, s.token_ids()),
                            stalled: s.stalled,
                            done: s.is_terminated(),
                        })
                        .collect(),
                }
            })
            .collect();
        self.steps.push(StepView {
            t,
            pops: self.pops,
            beam: items,
        });
    }
}

/// Two-model ensemble decode with a per-timestep record of the beam.
pub fn ensemble_trace_json(
    a: &str,
    b: &str,
    weight_a: f64,
    beam: usize,
    max_len: usize,
) -> Result<String, String> {
    let models = [load("a", a)?, load("b", b)?];
    let mut config = EnsembleConfig::uniform(2)
        .with_beam(beam)
        .with_max_len(max_len);
    config.weights = vec![weight_a, 1.0 - weight_a];
    if beam == 1 {
        config.mode = DecodeMode::Greedy;
    }
    let mut rec = Recorder {
        models: &models,
        pops: 0,
        steps: Vec::new(),
    };
    let adapters: Vec<&dyn ModelAdapter> = models.iter().map(|m| m as &dyn ModelAdapter).collect();
    let hyps =
        decode_observed(&adapters, &["", ""], &config, &mut rec).map_err(|e| e.to_string())?;
    let outputs = hyps
        .iter()
        .map(|h| Output {
            text: text(&h.bytes),
            score: h.score,
            fallback: h.fallback,
            tokens: h
                .tokens
                .iter()
                .enumerate()
                .map(|(m, ids)| rec.surfaces(m, ids))
                .collect(),
        })
        .collect();
    to_json(&Trace {
        steps: rec.steps,
        outputs,
    })
}

#[wasm_bindgen]
pub fn default_scenarios() -> Vec<String> {
    vec![COARSE.to_string(), FINE.to_string()]
}

#[wasm_bindgen]
pub fn tokenize(a: &str, b: &str, input: &str) -> Result<String, JsValue> {
    tokenize_json(&[("a", a), ("b", b)], input).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn explore_grid(
    a: &str,
    b: &str,
    weight_a: f64,
    k: usize,
    max_pops: usize,
) -> Result<String, JsValue> {
    explore_grid_json(a, b, weight_a, k, max_pops).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn ensemble_trace(
    a: &str,
    b: &str,
    weight_a: f64,
    beam: usize,
    max_len: usize,
) -> Result<String, JsValue> {
    ensemble_trace_json(a, b, weight_a, beam, max_len).map_err(|e| JsValue::from_str(&e))
}
