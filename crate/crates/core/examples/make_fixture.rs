//! Regenerate the committed fixture: synthetic dataset, a scripted mock
//! backend and a run config that uses both.
//!
//! ```text
//! cargo run -p wadeable --example make_fixture -- fixtures
//! ```

use std::fs;
use std::path::PathBuf;

use wadeable::dataset::{consensus_labels, ConsensusPolicy};
use wadeable::gateway::{MockReply, MockRule, MockScript};
use wadeable::synthetic::{generate, SyntheticSpec};

const RUN_TOML: &str = r#"# Offline demo run against the scripted mock backend.
run_id = "fixture-mock"
dataset = "dataset"
output_dir = "runs"
seed = 1
strategies = ["plain"]
query_modes = ["per_instance_crop"]
temperatures = [0.0]

[crop]
padding_ratio = 0.25
highlight = "outline"
max_edge = 768

[costmap]
costs = [0, 85, 170, 255]
unassigned = 0
overlay_alpha = 0.5

[[backends]]
name = "mock"
kind = "mock"
model_tag = "scripted-mock"
mock_script = "mock_script.json"
max_retries = 0
max_parallel = 4
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let ds = generate(out.join("dataset"), &SyntheticSpec::default())?;
    let gold = consensus_labels(&ds.annotations, ConsensusPolicy::Median);

    let mut rules = Vec::new();
    for (k, (key, label)) in gold.iter().enumerate() {
        let robot = ds
            .manifest
            .robot(&key.robot_id)
            .expect("annotated robot exists");
        let id = &key.instance_id;
        let text = if k % 6 == 5 {
            match (k / 6) % 4 {
                0 => "The water looks murky, so I cannot judge it reliably.".to_string(),
                1 => format!("{{\"{id}\": 5}}"),
                2 => format!("{{\"{id}\": 2.5}}"),
                _ => "{\"instance\": 1}".to_string(),
            }
        } else {
            let v = if k % 7 == 3 { label.value() % 4 + 1 } else { label.value() };
            match k % 4 {
                0 => format!("{{\"{id}\": {v}}}"),
                1 => format!("Here is my assessment:\n```json\n{{\"{id}\": {v}}}\n```"),
                2 => format!("Given the shallow banks I would answer {{\"{id}\": {v}}} for this one."),
                _ => format!("The bottom looks firm and the depth moderate, therefore rating: {v}"),
            }
        };
        rules.push(MockRule {
            index: None,
            contains: vec![format!("\"{id}\""), robot.display_name.clone()],
            replies: vec![MockReply::Text(text)],
        });
    }
    let script = MockScript {
        rules,
        default: vec![MockReply::Text("No idea.".into())],
        delay_ms: 0,
    };
    fs::write(
        out.join("mock_script.json"),
        serde_json::to_string_pretty(&script)? + "\n",
    )?;
    fs::write(out.join("run.toml"), RUN_TOML)?;
    println!(
        "wrote {} images, {} instances, {} annotations under {}",
        ds.manifest.images.len(),
        ds.manifest.instances.len(),
        ds.annotations.len(),
        out.display()
    );
    Ok(())
}
