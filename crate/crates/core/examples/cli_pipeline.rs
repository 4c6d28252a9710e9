//! Runs the command-line pipeline in-process on a small configuration:
//! gen-data, train, explain and eval, then lists what each step wrote.
//!
//! cargo run --release --example cli_pipeline -- [work_dir]
//!
//! The same steps with the installed binary:
//!
//! dproto gen-data --out data --config small.json
//! dproto train --data data --out run --config small.json
//! dproto explain --checkpoint run/model.ckpt --image data/images/00000.ppm --out explain
//! dproto --threads 4 eval --checkpoint run/model.ckpt --data data --out eval

use std::path::PathBuf;

use dproto::config::{EvalConfig, RunConfig};
use dproto::dataset::SyntheticSpec;
use dproto::mdm::MdmConfig;
use dproto::trainer::TrainConfig;

fn main() {
    let work = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dproto-cli"));
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).expect("create the work directory");
    let cfg = RunConfig {
        dataset: SyntheticSpec { per_class: 25, ..SyntheticSpec::default() },
        trainer: TrainConfig { epochs: 12, ..TrainConfig::default() },
        mdm: MdmConfig { steps: 200, ..MdmConfig::default() },
        eval: EvalConfig { max_images: Some(8), ..EvalConfig::default() },
        ..RunConfig::default()
    };
    let p = |rel: &str| work.join(rel).display().to_string();
    std::fs::write(p("small.json"), cfg.to_json()).expect("write the config");

    let steps: [Vec<String>; 4] = [
        vec!["gen-data".into(), "--out".into(), p("data"), "--config".into(), p("small.json")],
        vec!["train".into(), "--data".into(), p("data"), "--out".into(), p("run"), "--config".into(), p("small.json")],
        vec![
            "explain".into(), "--checkpoint".into(), p("run/model.ckpt"),
            "--image".into(), p("data/images/00080.ppm"), "--out".into(), p("explain"),
        ],
        vec!["eval".into(), "--checkpoint".into(), p("run/model.ckpt"), "--data".into(), p("data"), "--out".into(), p("eval")],
    ];
    for args in steps {
        let code = dproto::cli::run(std::iter::once("dproto".to_string()).chain(args.iter().cloned()));
        println!("$ dproto {} -> exit {code}", args[0]);
        if code != 0 {
            std::process::exit(code);
        }
    }
    for dir in ["run", "explain", "eval"] {
        let mut names: Vec<String> = std::fs::read_dir(work.join(dir))
            .expect("step output exists")
            .map(|e| e.expect("readable entry").file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        println!("{dir}/: {}", names.join(" "));
    }
}
