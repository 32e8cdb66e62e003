//! `build-verb-classifier`: construct `E_v` from dataset artifacts.

use std::path::Path;

use serde::Serialize;

use hoidet::data_io::load_dataset;
use hoidet::tensor::hctf;

use crate::artifacts::write_summary;
use crate::commands::build_by_method;
use crate::config::{require_path, RunConfig};
use crate::errors::{Ctx, Result};

#[derive(Serialize)]
struct Body {
    classifier: &'static str,
    method: &'static str,
    num_verbs: usize,
    dim: usize,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require_path(&cfg.paths.data, "data")?;
    let ds = load_dataset(data)?;
    let e_v = build_by_method(cfg.classifier_method, &ds)?;
    let path = out.join("e_v.hctf");
    hctf::write_file(&path, &e_v, hctf::Dtype::F64)
        .or_data(&format!("write {}", path.display()))?;
    println!(
        "built verb classifier [{} × {}] ({})",
        e_v.shape()[0],
        e_v.shape()[1],
        cfg.classifier_method.name()
    );
    write_summary(
        out,
        "build-verb-classifier",
        Body {
            classifier: "e_v.hctf",
            method: cfg.classifier_method.name(),
            num_verbs: e_v.shape()[0],
            dim: e_v.shape()[1],
        },
    )
}
