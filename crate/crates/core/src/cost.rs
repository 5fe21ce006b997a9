//! Labeling-cost arithmetic: human annotation, LLM annotation, RM inference,
//! and the per-sample cost of the self-evolving pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostInputs {
    pub words_per_task: f64,
    pub usd_per_50_words: f64,
    pub llm_in_tokens: f64,
    pub llm_out_tokens: f64,
    pub usd_per_1k_in: f64,
    pub usd_per_1k_out: f64,
    pub calls_per_pair: f64,
    pub gpu_usd_per_hour: f64,
    pub gpus: f64,
    pub samples_per_slot: f64,
    pub slot_minutes: f64,
    pub seed_fraction: f64,
    pub extra_inferences: f64,
    /// Use the exact human cost in the pipeline composite instead of 0.67.
    pub unrounded: bool,
}

impl Default for CostInputs {
    fn default() -> Self {
        Self {
            words_per_task: 304.0,
            usd_per_50_words: 0.11,
            llm_in_tokens: 525.0,
            llm_out_tokens: 104.0,
            usd_per_1k_in: 0.0025,
            usd_per_1k_out: 0.01,
            calls_per_pair: 6.0,
            gpu_usd_per_hour: 32.77,
            gpus: 8.0,
            samples_per_slot: 1530.0,
            slot_minutes: 3.0,
            seed_fraction: 0.15,
            extra_inferences: 3.0,
            unrounded: false,
        }
    }
}

/// The human cost as it enters the published composite.
pub const ROUNDED_HUMAN_USD: f64 = 0.67;

impl CostInputs {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("words_per_task", self.words_per_task),
            ("usd_per_50_words", self.usd_per_50_words),
            ("llm_in_tokens", self.llm_in_tokens),
            ("llm_out_tokens", self.llm_out_tokens),
            ("usd_per_1k_in", self.usd_per_1k_in),
            ("usd_per_1k_out", self.usd_per_1k_out),
            ("calls_per_pair", self.calls_per_pair),
            ("gpu_usd_per_hour", self.gpu_usd_per_hour),
            ("gpus", self.gpus),
            ("samples_per_slot", self.samples_per_slot),
            ("slot_minutes", self.slot_minutes),
            ("seed_fraction", self.seed_fraction),
            ("extra_inferences", self.extra_inferences),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SerError::Config(format!("cost.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCosts {
    pub human_usd_per_sample: f64,
    pub llm_usd_per_sample: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineCosts {
    pub inference_usd_per_sample: f64,
    pub ser_usd_per_sample: f64,
}

pub fn annotation_costs(inputs: &CostInputs) -> AnnotationCosts {
    AnnotationCosts {
        human_usd_per_sample: inputs.words_per_task * inputs.usd_per_50_words / 50.0,
        llm_usd_per_sample: inputs.calls_per_pair
            * (inputs.llm_in_tokens * inputs.usd_per_1k_in + inputs.llm_out_tokens * inputs.usd_per_1k_out)
            / 1000.0,
    }
}

pub fn pipeline_cost(inputs: &CostInputs) -> Result<PipelineCosts> {
    if inputs.slot_minutes <= 0.0 {
        return Err(SerError::Argument("cost.slot_minutes must be > 0".into()));
    }
    let throughput = inputs.samples_per_slot * (60.0 / inputs.slot_minutes);
    if throughput <= 0.0 || inputs.gpus <= 0.0 {
        return Err(SerError::Argument("zero inference throughput".into()));
    }
    let inference = (inputs.gpu_usd_per_hour / inputs.gpus) / throughput;
    let human = if inputs.unrounded {
        annotation_costs(inputs).human_usd_per_sample
    } else {
        ROUNDED_HUMAN_USD
    };
    Ok(PipelineCosts {
        inference_usd_per_sample: inference,
        ser_usd_per_sample: human * inputs.seed_fraction + inputs.extra_inferences * inference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub human_usd_per_sample: f64,
    pub llm_usd_per_sample: f64,
    pub inference_usd_per_sample: f64,
    pub ser_usd_per_sample: f64,
    pub human_to_ser_ratio: f64,
}

pub fn cost_table(inputs: &CostInputs) -> Result<CostTable> {
    inputs.validate()?;
    let a = annotation_costs(inputs);
    let p = pipeline_cost(inputs)?;
    Ok(CostTable {
        human_usd_per_sample: a.human_usd_per_sample,
        llm_usd_per_sample: a.llm_usd_per_sample,
        inference_usd_per_sample: p.inference_usd_per_sample,
        ser_usd_per_sample: p.ser_usd_per_sample,
        human_to_ser_ratio: a.human_usd_per_sample / p.ser_usd_per_sample,
    })
}

impl CostTable {
    pub fn to_text(&self) -> String {
        format!(
            "human annotation   {:>14.6} USD/sample\n\
             llm annotation     {:>14.6} USD/sample\n\
             rm inference       {:>14.6e} USD/sample\n\
             ser pipeline       {:>14.6} USD/sample\n\
             human / ser        {:>14.3}x\n",
            self.human_usd_per_sample,
            self.llm_usd_per_sample,
            self.inference_usd_per_sample,
            self.ser_usd_per_sample,
            self.human_to_ser_ratio
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn human_and_llm_defaults() {
        let a = annotation_costs(&CostInputs::default());
        assert!((a.human_usd_per_sample - 0.6688).abs() < 1e-12);
        assert!((a.llm_usd_per_sample - 0.014115).abs() < 1e-12);
    }

    #[test]
    fn inference_default() {
        let p = pipeline_cost(&CostInputs::default()).unwrap();
        assert!((p.inference_usd_per_sample - 32.77 / 8.0 / 30600.0).abs() < 1e-15);
        assert!((p.inference_usd_per_sample - 1.3387e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_inputs() {
        let c = CostInputs {
            words_per_task: 0.0,
            extra_inferences: 0.0,
            seed_fraction: 0.0,
            ..CostInputs::default()
        };
        assert_eq!(annotation_costs(&c).human_usd_per_sample, 0.0);
        assert_eq!(pipeline_cost(&c).unwrap().ser_usd_per_sample, 0.0);
    }

    #[test]
    fn zero_throughput_is_error() {
        let c = CostInputs {
            samples_per_slot: 0.0,
            ..CostInputs::default()
        };
        assert!(matches!(pipeline_cost(&c), Err(SerError::Argument(_))));
    }

    #[test]
    fn unrounded_flag_uses_exact_human_cost() {
        let c = CostInputs {
            unrounded: true,
            ..CostInputs::default()
        };
        let p = pipeline_cost(&c).unwrap();
        let want = 0.6688 * 0.15 + 3.0 * (32.77 / 8.0 / 30600.0);
        assert!((p.ser_usd_per_sample - want).abs() < 1e-15);
    }

    #[test]
    fn negative_input_rejected() {
        let c = CostInputs {
            gpus: -1.0,
            ..CostInputs::default()
        };
        assert!(matches!(cost_table(&c), Err(SerError::Config(_))));
    }
}
