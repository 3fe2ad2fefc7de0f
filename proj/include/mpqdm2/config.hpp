#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpqdm2/mtrd.hpp"
#include "mpqdm2/toydiff.hpp"

namespace mpqdm2 {

// Everything the pipeline commands read, parsed from a flat `key = value`
// text file with # comments. Unknown and duplicate keys are rejected, every
// field is range-checked on load, and parse(emit(cfg)) == cfg.
struct PipelineConfig {
    DatasetSpec dataset = DatasetSpec::two_moons;
    std::uint64_t seed = 1;
    int t_count = 10;

    int pretrain_iters = 4000;
    std::size_t pretrain_batch = 64;
    double pretrain_lr = 2e-3;
    double pretrain_momentum = 0.9;

    int weight_bits = 3;
    int act_bits = 8;
    std::size_t groups = 0;  // 0: one group per ~10 channels
    double surplus_2bit = 0.0;
    std::size_t adapter_rank = 4;
    bool use_fzrmq = true;   // key: quantizer = fzrmq | uniform
    bool use_oolri = true;   // key: adapter_init = oolri | zero

    int finetune_iters = 2000;
    std::size_t finetune_batch = 16;
    double lr_adapter = 1e-3;
    double lr_steps = 1e-4;
    double finetune_momentum = 0.9;
    double alpha = 1.0;
    double tau = 1.0;
    std::size_t push_n = 8;
    std::size_t queue_capacity = 512;
    std::size_t sample_k = 32;
    RelationMetric loss_metric = RelationMetric::kl;

    std::size_t sample_n = 2000;
    int sample_steps = 0;  // 0: use the full t_count chain
    double sample_eta = 0.0;

    std::string fp_checkpoint = "fp.ckpt";
    std::string quant_checkpoint = "quant.ckpt";
    std::string tuned_checkpoint = "tuned.ckpt";
    std::string alloc_report = "alloc.tsv";
    std::string train_log = "train.log";
    std::string samples_out = "samples.tsv";
    std::string report_out = "report.tsv";
    std::string sample_input;                 // empty: tuned_checkpoint
    std::vector<std::string> report_inputs;   // empty: fp, quant, tuned

    bool operator==(const PipelineConfig&) const = default;

    PretrainConfig pretrain() const;
    QuantizeConfig quantize() const;
    FinetuneConfig finetune() const;
    std::string resolved_sample_input() const;
    std::vector<std::string> resolved_report_inputs() const;
};

PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::string& path);
std::string emit_config(const PipelineConfig& cfg);

}  // namespace mpqdm2
