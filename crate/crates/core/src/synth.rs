//! Deterministic synthetic datasets and scripted backends.
//!
//! Every generator takes a seed and produces the same output for the same
//! seed, so tests, the shipped data files and the CLI agree byte for byte.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::embed::ScriptedChat;
use crate::eval::Sample;
use crate::graph::{ToolGraph, Vertex};
use crate::planner::{decompose_prompt, order_prompt, ArgumentRule, ArgumentTable};
use crate::router::{Question, QA_CLASS, TASK_CLASS};

pub const NATO: [&str; 20] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Registers `["<instruction>"]` as the decomposition of each instruction.
pub fn identity_decomposer<'a>(instructions: impl IntoIterator<Item = &'a str>) -> ScriptedChat {
    let mut chat = ScriptedChat::new();
    for i in instructions {
        chat.register(&decompose_prompt(i), json!([i.trim()]).to_string());
    }
    chat
}

#[derive(Debug, Clone)]
pub struct SplitTask {
    pub graph: ToolGraph,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Twenty tools named after the NATO alphabet on a ring with chords. Each
/// description is the bare name, so a tool's features share no tokens with
/// any other tool's.
pub fn nato_graph() -> ToolGraph {
    let vertices = NATO
        .iter()
        .map(|n| Vertex {
            id: n.to_string(),
            description: n.to_string(),
        })
        .collect();
    let mut links = Vec::new();
    for i in 0..NATO.len() {
        links.push((NATO[i], NATO[(i + 1) % NATO.len()]));
        if i % 4 == 0 {
            links.push((NATO[i], NATO[(i + 7) % NATO.len()]));
        }
    }
    ToolGraph::new(vertices, links).expect("valid fixture graph")
}

const NAMED_TEMPLATES: [&str; 5] = [
    "please use {tools}",
    "run {tools} for me",
    "I need {tools}",
    "call {tools} now",
    "start {tools} in sequence",
];

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} then {last}", init.join(", ")),
    }
}

/// `total` instructions, each naming 1 to 4 distinct tools of
/// [`nato_graph`]; gold edges chain the tools in the order named. The first
/// `train` samples form the training split.
pub fn named_tool_task(seed: u64, total: usize, train: usize) -> SplitTask {
    let mut r = rng(seed);
    let samples: Vec<Sample> = (0..total)
        .map(|i| {
            let k = r.random_range(1..=4);
            let names: Vec<&str> = NATO.choose_multiple(&mut r, k).copied().collect();
            let template = NAMED_TEMPLATES.choose(&mut r).unwrap();
            let text = template.replace("{tools}", &join_names(&names));
            let edges: Vec<(&str, &str)> = names.windows(2).map(|w| (w[0], w[1])).collect();
            Sample::new(format!("n{i:03}"), text, names.iter().copied(), edges)
        })
        .collect();
    let (a, b) = samples.split_at(train.min(total));
    SplitTask {
        graph: nato_graph(),
        train: a.to_vec(),
        test: b.to_vec(),
    }
}

/// A path `v00 - v01 - ... - v{n-1}`; ids sort in path order.
pub fn path_graph(n: usize) -> ToolGraph {
    let ids: Vec<String> = (0..n).map(|i| format!("v{i:02}")).collect();
    let vertices = ids
        .iter()
        .map(|id| Vertex {
            id: id.clone(),
            description: format!("step {id} of the pipeline"),
        })
        .collect();
    let links: Vec<(&str, &str)> = ids.windows(2).map(|w| (w[0].as_str(), w[1].as_str())).collect();
    ToolGraph::new(vertices, links).expect("valid path graph")
}

/// Chain-structured gold plans over [`path_graph`]`(20)`: contiguous
/// segments of 2 to 5 vertices, odd-numbered samples running from the
/// largest id down.
pub fn chain_plans(seed: u64, count: usize) -> (ToolGraph, Vec<Sample>) {
    let graph = path_graph(20);
    let ids: Vec<String> = graph.ids().map(str::to_string).collect();
    let mut r = rng(seed);
    let samples = (0..count)
        .map(|i| {
            let len = r.random_range(2..=5);
            let start = r.random_range(0..=ids.len() - len);
            let mut seg: Vec<&str> = ids[start..start + len].iter().map(String::as_str).collect();
            if i % 2 == 1 {
                seg.reverse();
            }
            let text = format!("carry out {}", seg.join(" then "));
            let edges: Vec<(&str, &str)> = seg.windows(2).map(|w| (w[0], w[1])).collect();
            Sample::new(format!("c{i:03}"), text, seg.iter().copied(), edges)
        })
        .collect();
    (graph, samples)
}

/// An orderer that answers each sample's ordering prompt (over its
/// gold-induced subgraph, subtasks `[instruction]`) with the gold order.
pub fn gold_orderer(graph: &ToolGraph, samples: &[Sample]) -> ScriptedChat {
    let mut chat = ScriptedChat::new();
    for s in samples {
        let sub = graph.induced_subgraph(&s.gold_vertices).expect("gold ids in graph");
        let prompt = order_prompt(&sub, std::slice::from_ref(&s.instruction), &s.instruction);
        let reply = json!({"order": s.gold_vertices, "edges": s.gold_edges});
        chat.register(&prompt, reply.to_string());
    }
    chat
}

const QA_TEMPLATES: [&str; 8] = [
    "What is the capital of {x}?",
    "Name 5 famous writers from {x}.",
    "Explain why the sky over {x} looks blue.",
    "How many people live in {x}?",
    "Give me a short history of {x}.",
    "Which language is spoken in {x}?",
    "Describe the climate of {x}.",
    "Recommend a good book about {x}.",
];

const QA_TOPICS: [&str; 12] = [
    "France", "Japan", "Brazil", "Kenya", "Canada", "Egypt", "Norway", "India", "Mexico", "Peru",
    "Italy", "Vietnam",
];

const TASK_TEMPLATES: [&str; 8] = [
    "Scan the patient's {x}",
    "Please perform an ultrasound scan of the {x}",
    "Check the {x} with the ultrasound robot",
    "Use the robot to examine the {x}",
    "Start robotic scanning of the {x}",
    "Move the probe over the {x} and scan it",
    "Segment the {x} from the ultrasound image",
    "Measure the {x} with ultrasound",
];

pub const ORGANS: [&str; 7] = ["carotid", "thyroid", "liver", "kidney", "spleen", "femoral artery", "gallbladder"];

/// Two-class question set: class 1 general questions, class 0 robot
/// commands. The Question Set example entry is always included.
pub fn question_set(seed: u64, count: usize) -> Vec<Question> {
    let mut r = rng(seed);
    let mut out = vec![Question {
        instruction: "Name 5 countries in the African continent.".into(),
        input: String::new(),
        output: "Nigeria, Egypt, South Africa, Ethiopia, and Ghana.".into(),
        class: QA_CLASS,
    }];
    while out.len() < count {
        let q = if out.len() % 2 == 0 {
            let t = QA_TEMPLATES.choose(&mut r).unwrap();
            Question::new(t.replace("{x}", QA_TOPICS.choose(&mut r).unwrap()), QA_CLASS)
        } else {
            let t = TASK_TEMPLATES.choose(&mut r).unwrap();
            Question::new(t.replace("{x}", ORGANS.choose(&mut r).unwrap()), TASK_CLASS)
        };
        out.push(q);
    }
    out.shuffle(&mut r);
    out
}

struct Organ {
    name: &'static str,
    key: &'static str,
    probe: &'static str,
    department: &'static str,
    symptom: &'static str,
    vascular: bool,
}

const ORGAN_TABLE: [Organ; 7] = [
    Organ { name: "carotid", key: "carotid", probe: "linear", department: "vascular surgery", symptom: "I feel dizzy when I stand up", vascular: true },
    Organ { name: "thyroid", key: "thyroid", probe: "linear", department: "endocrinology", symptom: "There is a lump in my neck", vascular: false },
    Organ { name: "liver", key: "liver", probe: "curvilinear", department: "gastroenterology", symptom: "The patient has jaundice", vascular: false },
    Organ { name: "kidney", key: "kidney", probe: "curvilinear", department: "nephrology", symptom: "I have a dull pain in my lower back", vascular: false },
    Organ { name: "spleen", key: "spleen", probe: "curvilinear", department: "gastroenterology", symptom: "My left side feels tender to the touch", vascular: false },
    Organ { name: "femoral artery", key: "femoral_artery", probe: "linear", department: "vascular surgery", symptom: "My leg hurts when I walk", vascular: true },
    Organ { name: "gallbladder", key: "gallbladder", probe: "curvilinear", department: "gastroenterology", symptom: "I feel pain after eating fatty food", vascular: false },
];

fn symptom_keyword(o: &Organ) -> &'static str {
    match o.key {
        "carotid" => "dizzy",
        "thyroid" => "lump in my neck",
        "liver" => "jaundice",
        "kidney" => "lower back",
        "spleen" => "left side",
        "femoral_artery" => "leg hurts",
        _ => "fatty food",
    }
}

/// Keyword rules filling organ, probe and department arguments.
pub fn uspilot_argument_table() -> ArgumentTable {
    let mut rules = Vec::new();
    for o in &ORGAN_TABLE {
        for kw in [o.name, symptom_keyword(o)] {
            let mut push = |api: &str, arg: &str| {
                rules.push(ArgumentRule {
                    keyword: kw.to_string(),
                    api: api.to_string(),
                    argument: arg.to_string(),
                })
            };
            push("change_probe", o.probe);
            push("detect_organ", o.key);
            push("segment_organ", o.key);
            push("measure_organ", o.key);
            push("publish_report", o.department);
        }
    }
    ArgumentTable { rules }
}

/// The five Instruction Set style steps of a plain organ scan.
pub fn scan_steps(organ: &str) -> Vec<String> {
    let o = ORGAN_TABLE
        .iter()
        .find(|o| o.name == organ || o.key == organ)
        .expect("known organ");
    vec![
        format!("Change the ultrasound probe to {} probe.", o.probe),
        format!("Use camera to detect the {} area.", o.name),
        "Execute robotic scanning.".to_string(),
        format!("Segment {} from real-time ultrasound image.", o.name),
        format!("Publish report to {} department.", o.department),
    ]
}

pub const SCAN_APIS: [&str; 5] = ["change_probe", "detect_organ", "execute_robot", "segment_organ", "publish_report"];

struct Family {
    instructions: Vec<String>,
    apis: Vec<(&'static str, Option<String>)>,
    steps: Vec<String>,
}

fn organ_families(o: &Organ) -> Vec<Family> {
    let base = |extra: Vec<(&'static str, Option<String>)>| {
        let mut v = vec![
            ("change_probe", Some(o.probe.to_string())),
            ("detect_organ", Some(o.key.to_string())),
            ("execute_robot", None),
        ];
        v.extend(extra);
        v
    };
    let mut fams = vec![
        Family {
            instructions: vec![
                format!("Scan the patient's {}", o.name),
                format!("Please perform an ultrasound scan of the {}", o.name),
                format!("Check the {} with ultrasound", o.name),
                format!("{}; check with ultrasound.", o.symptom),
            ],
            apis: base(vec![
                ("segment_organ", Some(o.key.to_string())),
                ("publish_report", Some(o.department.to_string())),
            ]),
            steps: scan_steps(o.name),
        },
        Family {
            instructions: vec![
                format!("Measure the size of the patient's {} and summarize it", o.name),
                format!("How big is the {}? Measure it and write a summary", o.name),
            ],
            apis: base(vec![
                ("segment_organ", Some(o.key.to_string())),
                ("measure_organ", Some(o.key.to_string())),
                ("generate_summary", None),
                ("publish_report", Some(o.department.to_string())),
            ]),
            steps: vec![
                format!("Mount the {} probe.", o.probe),
                format!("Find the {} with the camera.", o.name),
                "Run the robotic sweep.".into(),
                format!("Outline the {} in the image.", o.name),
                format!("Measure the {} size.", o.name),
                "Write a summary of the measurements.".into(),
                format!("Send the summary to {}.", o.department),
            ],
        },
        Family {
            instructions: vec![
                format!("Take a picture of the {} and save it", o.name),
                format!("Capture and store an ultrasound image of the {}", o.name),
            ],
            apis: base(vec![("capture_image", None), ("save_image", None)]),
            steps: vec![
                format!("Attach the {} probe.", o.probe),
                format!("Locate the {} region.", o.name),
                "Begin the robotic examination.".into(),
                "Grab a still frame.".into(),
                "Store the frame in the record.".into(),
            ],
        },
        Family {
            instructions: vec![
                format!("The {} image is too dark, raise the gain", o.name),
                format!("Brighten the ultrasound picture of the {}", o.name),
            ],
            apis: base(vec![("adjust_gain", None)]),
            steps: vec![
                format!("Select the {} probe.", o.probe),
                format!("Aim the camera at the {}.", o.name),
                "Bring the robot into contact.".into(),
                "Raise the image gain.".into(),
            ],
        },
        Family {
            instructions: vec![
                format!("Look deeper into the {}", o.name),
                format!("Image the {} at a greater depth", o.name),
            ],
            apis: base(vec![("adjust_depth", None)]),
            steps: vec![
                format!("Pick the {} probe.", o.probe),
                format!("Mark the {} position.", o.name),
                "Place the robot on the skin.".into(),
                "Increase the imaging depth.".into(),
            ],
        },
    ];
    if o.vascular {
        fams.push(Family {
            instructions: vec![
                format!("Check the blood flow in the {}", o.name),
                format!("Show Doppler flow of the {} and keep an image", o.name),
            ],
            apis: base(vec![("doppler_mode", None), ("capture_image", None), ("save_image", None)]),
            steps: vec![
                format!("Fit the {} probe for vessels.", o.probe),
                format!("Spot the {} on the skin.", o.name),
                "Sweep the vessel with the robot.".into(),
                "Turn on color Doppler.".into(),
                "Grab a flow frame.".into(),
                "Keep the flow frame.".into(),
            ],
        });
    }
    fams
}

fn command_families() -> Vec<Family> {
    let fam = |instructions: &[&str], apis: &[&'static str], steps: &[&str]| Family {
        instructions: instructions.iter().map(|s| s.to_string()).collect(),
        apis: apis.iter().map(|a| (*a, None)).collect(),
        steps: steps.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        fam(&["Stop for a moment", "Pause the scan", "Hold on, wait"], &["interrupt"], &["Interrupt the scan."]),
        fam(&["Go on", "Continue the scan", "Resume scanning please"], &["continue"], &["Continue the scan."]),
        fam(
            &["It hurts, press lighter", "Reduce the force", "Too much pressure on my belly"],
            &["decrease_force"],
            &["Decrease the contact force."],
        ),
        fam(
            &["Press harder", "Increase the force", "The image is faint, push a bit more"],
            &["increase_force"],
            &["Increase the contact force."],
        ),
        fam(
            &["Stop the robot and go home", "Emergency stop, then return the arm"],
            &["stop_robot", "move_home"],
            &["Stop the robot arm.", "Return the arm to home."],
        ),
        fam(
            &["Build a 3D model of the patient", "Reconstruct the patient's body avatar"],
            &["locate_patient", "reconstruct_avatar"],
            &["Locate the patient on the bed.", "Reconstruct the avatar."],
        ),
        fam(&["Calibrate the force sensor", "Zero the force sensor"], &["calibrate_force_sensor"], &["Calibrate the sensor."]),
    ]
}

/// Instruction Set JSON lines for the USPilot registry. Each record has
/// `instruction`, `input`, `output` (numbered steps ending in `Done`) and
/// `API`.
pub fn uspilot_instruction_lines(seed: u64, count: usize) -> Vec<String> {
    let mut fams: Vec<Family> = ORGAN_TABLE.iter().flat_map(organ_families).collect();
    fams.extend(command_families());
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            // Every family appears before any repeats.
            let fam = if i < fams.len() { &fams[i] } else { fams.choose(&mut r).unwrap() };
            let instruction = fam.instructions.choose(&mut r).unwrap();
            let mut output: Vec<String> =
                fam.steps.iter().enumerate().map(|(k, s)| format!("Step {}. {s}", k + 1)).collect();
            output.push(format!("Step {}. Done", fam.steps.len() + 1));
            let api: Vec<String> = fam
                .apis
                .iter()
                .map(|(id, arg)| format!("{id}({})", arg.as_deref().unwrap_or("")))
                .collect();
            json!({
                "id": format!("u{i:03}"),
                "instruction": instruction,
                "input": "",
                "output": output.join(" "),
                "API": api.join(", "),
            })
            .to_string()
        })
        .collect()
}

/// Scripted backends for `instruction`: its five scan steps as the
/// decomposition and the scan chain as the ordering over the scan APIs.
pub fn scan_script(instruction: &str, organ: &str, graph: &ToolGraph) -> ScriptedChat {
    let steps = scan_steps(organ);
    let sub = graph.induced_subgraph(&SCAN_APIS).expect("scan APIs in graph");
    let edges: Vec<[&str; 2]> = SCAN_APIS.windows(2).map(|w| [w[0], w[1]]).collect();
    ScriptedChat::new()
        .with(&decompose_prompt(instruction), json!(steps).to_string())
        .with(
            &order_prompt(&sub, &steps, instruction),
            json!({"order": SCAN_APIS, "edges": edges}).to_string(),
        )
}

/// [`scan_script`] for "Scan the patient's <organ>", every organ merged.
pub fn scan_scripts(graph: &ToolGraph) -> ScriptedChat {
    let mut chat = ScriptedChat::new();
    for o in &ORGAN_TABLE {
        chat.merge(scan_script(&format!("Scan the patient's {}", o.name), o.name, graph));
    }
    chat
}

/// Distinct first-mention counts of how many samples use each vertex.
pub fn vertex_usage(samples: &[Sample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        for v in &s.gold_vertices {
            *m.entry(v.clone()).or_insert(0) += 1;
        }
    }
    m
}

/// Seed used for every shipped data file.
pub const DATA_SEED: u64 = 42;

/// Contents of the files under `data/uspilot/`, keyed by file name. A test
/// keeps the checked-in copies equal to this output.
pub fn shipped_data() -> Vec<(&'static str, String)> {
    let graph = crate::executor::ApiRegistry::uspilot()
        .to_tool_graph()
        .expect("shipped registry forms a valid graph");
    let questions: Vec<String> = question_set(DATA_SEED, 600)
        .iter()
        .map(|q| serde_json::to_string(q).expect("questions serialize"))
        .collect();
    let arguments = serde_json::to_string_pretty(&uspilot_argument_table()).expect("table serializes");
    vec![
        ("instructions.jsonl", uspilot_instruction_lines(DATA_SEED, 240).join("\n") + "\n"),
        ("questions.jsonl", questions.join("\n") + "\n"),
        ("arguments.json", arguments + "\n"),
        ("scripts.json", serde_json::to_string_pretty(&scan_scripts(&graph).entries()).expect("entries serialize") + "\n"),
        ("graph.json", graph.to_json() + "\n"),
    ]
}
