#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mpqdm2/config.hpp"
#include "mpqdm2/errors.hpp"
#include "mpqdm2/pipeline.hpp"

namespace {

struct CommandSpec {
    const char* name;
    const char* help;
    void (*run)(const mpqdm2::PipelineConfig&, std::ostream&);
    std::string mpqdm2::PipelineConfig::*out_override;
};

constexpr CommandSpec kCommands[] = {
    {"pretrain", "Train the full-precision teacher and store its checkpoint",
     mpqdm2::cmd_pretrain, &mpqdm2::PipelineConfig::fp_checkpoint},
    {"quantize", "Calibrate, search bit widths, and store the quantized model",
     mpqdm2::cmd_quantize, &mpqdm2::PipelineConfig::quant_checkpoint},
    {"finetune", "Fine-tune adapters and step sizes against the teacher",
     mpqdm2::cmd_finetune, &mpqdm2::PipelineConfig::tuned_checkpoint},
    {"sample", "Draw samples from a stored checkpoint", mpqdm2::cmd_sample,
     &mpqdm2::PipelineConfig::samples_out},
    {"report", "Compare stored checkpoints on sampling and quantization metrics",
     mpqdm2::cmd_report, &mpqdm2::PipelineConfig::report_out},
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-bit quantization pipeline for a toy denoising diffusion model"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_path;

    const CommandSpec* chosen = nullptr;
    for (const CommandSpec& spec : kCommands) {
        CLI::App* sub = app.add_subcommand(spec.name, spec.help);
        sub->add_option("--config", config_path, "Pipeline config file")
            ->type_name("PATH")
            ->required();
        sub->add_option("--seed", seed, "Override the config seed")->type_name("U64");
        sub->add_option("--out", out_path, "Override the command's primary output path")
            ->type_name("PATH");
        sub->callback([&chosen, &spec] { chosen = &spec; });
        sub->parse_complete_callback([&seed_set, sub] { seed_set = sub->count("--seed") > 0; });
    }

    CLI11_PARSE(app, argc, argv);

    try {
        mpqdm2::thread_cap();  // reject a malformed MPQDM2_THREADS before any work runs
        mpqdm2::PipelineConfig cfg = mpqdm2::load_config(config_path);
        if (seed_set) cfg.seed = seed;
        if (!out_path.empty()) cfg.*(chosen->out_override) = out_path;
        chosen->run(cfg, std::cout);
        return 0;
    } catch (const mpqdm2::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mpqdm2::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const mpqdm2::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
