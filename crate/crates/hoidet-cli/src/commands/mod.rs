//! Subcommand implementations. Each one validates its inputs, does its
//! work, writes artifacts under the run directory, prints a single status
//! line, and finishes with `summary.json`.

pub mod build_classifier;
pub mod eval_map;
pub mod gen_synth;
pub mod gradcheck;
pub mod infer;
pub mod splits;
pub mod subsample;
pub mod train_toy;

use hoidet::classifiers::{
    build_verb_classifier, build_verb_classifier_hoi_average, build_verb_classifier_sentence,
    ClassifierBank,
};
use hoidet::data_io::{LoadedDataset, SynthConfig};
use hoidet::model::ModelConfig;
use hoidet::tensor::{hctf, Tensor};

use crate::config::{ClassifierMethod, RunConfig};
use crate::errors::{CliError, Ctx, Result};

/// Builds `E_v` from dataset artifacts with the chosen method.
pub fn build_by_method(method: ClassifierMethod, ds: &LoadedDataset) -> Result<Tensor> {
    Ok(match method {
        ClassifierMethod::Arithmetic => build_verb_classifier(&ds.region_store, &ds.taxonomy)?,
        ClassifierMethod::Sentence => build_verb_classifier_sentence(&ds.sentence_fixture)?,
        ClassifierMethod::HoiAverage => {
            build_verb_classifier_hoi_average(&ds.e_inter_fixture, &ds.taxonomy)?
        }
    })
}

/// The verb classifier for a run: a prebuilt file when one is configured,
/// otherwise built in place. Returns the tensor and its provenance label.
pub fn load_or_build_classifier(cfg: &RunConfig, ds: &LoadedDataset) -> Result<(Tensor, String)> {
    match &cfg.paths.classifier {
        Some(path) => {
            let t = hctf::read_file(path)
                .or_data(&format!("classifier {}", path.display()))?;
            Ok((t, format!("file:{}", path.display())))
        }
        None => Ok((
            build_by_method(cfg.classifier_method, ds)?,
            cfg.classifier_method.name().to_string(),
        )),
    }
}

/// Validates both classifiers against the taxonomy (shape + unit rows).
pub fn make_bank(e_v: Tensor, ds: &LoadedDataset) -> Result<ClassifierBank> {
    Ok(ClassifierBank::new(
        e_v,
        ds.e_inter_fixture.clone(),
        &ds.taxonomy,
    )?)
}

/// Rejects model/dataset pairs whose widths or grids do not line up.
pub fn check_model_vs_dataset(model: &ModelConfig, data: &SynthConfig) -> Result<()> {
    let mut mismatches = Vec::new();
    if model.clip_dim != data.dim {
        mismatches.push(format!("clip_dim {} vs dataset dim {}", model.clip_dim, data.dim));
    }
    if model.num_objects != data.num_objects {
        mismatches.push(format!(
            "num_objects {} vs dataset {}",
            model.num_objects, data.num_objects
        ));
    }
    if model.inst_dim() != data.inst_dim {
        mismatches.push(format!(
            "instance width {} vs dataset inst_dim {}",
            model.inst_dim(),
            data.inst_dim
        ));
    }
    if model.inter_dim() != data.inter_dim {
        mismatches.push(format!(
            "interaction width {} vs dataset inter_dim {}",
            model.inter_dim(),
            data.inter_dim
        ));
    }
    if model.clip_grid != data.clip_grid {
        mismatches.push(format!(
            "clip_grid {:?} vs dataset {:?}",
            model.clip_grid, data.clip_grid
        ));
    }
    if model.det_grid != data.det_grid {
        mismatches.push(format!(
            "det_grid {:?} vs dataset {:?}",
            model.det_grid, data.det_grid
        ));
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "model does not fit the dataset: {}",
            mismatches.join("; ")
        )))
    }
}
