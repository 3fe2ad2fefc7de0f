#pragma once

#include <iosfwd>

#include "mpqdm2/config.hpp"

namespace mpqdm2 {

// A freshly pretrained teacher must sample within this energy distance of
// held-out data draws before it is stored; well-converged runs land near
// 0.01-0.03 and two independent data draws stay below 0.01.
inline constexpr double kFpEnergyGate = 0.05;

// Worker cap for read-only concurrent evaluation: MPQDM2_THREADS when set,
// otherwise the hardware thread count.
std::size_t thread_cap();

// One command per pipeline stage. Each reads and writes the artifact paths
// named in the config, logs a human-readable account to `log`, and throws
// ConfigError / FormatError / NumericError for the matching CLI exit codes.
void cmd_pretrain(const PipelineConfig& cfg, std::ostream& log);
void cmd_quantize(const PipelineConfig& cfg, std::ostream& log);
void cmd_finetune(const PipelineConfig& cfg, std::ostream& log);
void cmd_sample(const PipelineConfig& cfg, std::ostream& log);
void cmd_report(const PipelineConfig& cfg, std::ostream& log);

}  // namespace mpqdm2
