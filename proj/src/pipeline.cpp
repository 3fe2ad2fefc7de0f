#include "mpqdm2/pipeline.hpp"

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mpqdm2/checkpoint.hpp"
#include "mpqdm2/errors.hpp"
#include "mpqdm2/quantizer.hpp"
#include "mpqdm2/rng.hpp"
#include "mpqdm2/toydiff.hpp"

namespace mpqdm2 {

namespace {

// Rng stream ids, disjoint from the 1xx/2xx streams used inside training.
constexpr std::uint64_t kStreamCalib = 301;
constexpr std::uint64_t kStreamSample = 401;
constexpr std::uint64_t kStreamGateSample = 411;
constexpr std::uint64_t kStreamGateData = 412;
constexpr std::uint64_t kStreamReportSample = 421;
constexpr std::uint64_t kStreamReportData = 422;

constexpr int kCalibBatches = 4;
constexpr std::size_t kCalibBatch = 32;

std::string fmt(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string hash_hex(std::uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    return os;
}

void finish_out(std::ofstream& os, const std::string& path) {
    if (!os.flush()) throw FormatError("write failed: " + path);
}

template <typename F>
void parallel_for(std::size_t n, F&& f) {
    const std::size_t workers = std::min(thread_cap(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    f(i);
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

SampleResult rollout(const Checkpoint& cp, std::size_t n, int steps, double eta, Rng rng) {
    return cp.quantized ? ddim_sample(cp.model, n, steps, eta, rng)
                        : ddim_sample(cp.fp, n, steps, eta, rng);
}

}  // namespace

std::size_t thread_cap() {
    if (const char* env = std::getenv("MPQDM2_THREADS")) {
        const std::string_view v(env);
        std::size_t out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || out < 1)
            throw ConfigError("MPQDM2_THREADS must be a positive integer");
        return out;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? hc : 1;
}

void cmd_pretrain(const PipelineConfig& cfg, std::ostream& log) {
    const PretrainResult pr = pretrain_fp(cfg.pretrain(), cfg.seed);

    Rng root(cfg.seed);
    Rng srng = root.split(kStreamGateSample);
    Rng drng = root.split(kStreamGateData);
    const SampleResult sr = ddim_sample(pr.model, 2000, cfg.t_count, 0.0, srng);
    const Tensor2D data = sample_dataset(cfg.dataset, 2000, drng);
    const double ed = energy_distance(sr.samples, data);
    if (!(ed < kFpEnergyGate))
        throw NumericError("pretrained sampler failed the quality gate: energy distance " +
                           fmt(ed) + " >= " + fmt(kFpEnergyGate));

    save_checkpoint(cfg.fp_checkpoint, pr.model);
    log << "pretrained " << cfg.pretrain_iters << " iterations on "
        << (cfg.dataset == DatasetSpec::two_moons ? "two_moons" : "gaussian_mixture_8")
        << "\n";
    log << "loss " << fmt6(pr.loss_history.front()) << " -> " << fmt6(pr.loss_history.back())
        << "\n";
    log << "energy distance to held-out data " << fmt6(ed) << " (gate " << fmt(kFpEnergyGate)
        << ")\n";
    log << "teacher " << hash_hex(teacher_hash(pr.model)) << " -> " << cfg.fp_checkpoint
        << "\n";
}

void cmd_quantize(const PipelineConfig& cfg, std::ostream& log) {
    const Checkpoint cp = load_checkpoint(cfg.fp_checkpoint);
    if (cp.quantized)
        throw FormatError("expected a full-precision checkpoint: " + cfg.fp_checkpoint);

    Rng root(cfg.seed);
    Rng crng = root.split(kStreamCalib);
    const CalibrationSet calib =
        collect_calibration(cp.fp, cfg.dataset, kCalibBatches, kCalibBatch, crng);
    std::vector<std::pair<std::size_t, AllocationResult>> alloc;
    const QuantizedModel qm = quantize_model(cp.fp, calib, cfg.quantize(), &alloc);
    save_checkpoint(cfg.quant_checkpoint, qm);

    std::ofstream tsv = open_out(cfg.alloc_report);
    tsv << "layer\tchannels\tgroups\tbudget_bits\tassigned_bits\tbits_hist\tjoint\tseparate"
           "\tobjective\tbaseline\n";
    for (const auto& [l, ar] : alloc) {
        const std::size_t channels = ar.bits.size();
        int assigned = 0;
        std::map<int, int> hist;
        for (int b : ar.bits) {
            assigned += b;
            ++hist[b];
        }
        std::size_t joint = 0;
        for (OpMode m : ar.modes)
            if (m == OpMode::joint) ++joint;
        std::string hist_s;
        for (const auto& [b, c] : hist) {
            if (!hist_s.empty()) hist_s += ';';
            hist_s += std::to_string(b) + ":" + std::to_string(c);
        }
        tsv << "layer" << l << "\t" << channels << "\t" << ar.groups.size() << "\t"
            << channels * std::size_t(cfg.weight_bits) << "\t" << assigned << "\t" << hist_s
            << "\t" << joint << "\t" << (ar.modes.size() - joint) << "\t" << fmt(ar.objective)
            << "\t" << fmt(ar.baseline) << "\n";
        log << "layer" << l << ": " << channels << " channels in " << ar.groups.size()
            << " groups, bits " << hist_s << " (" << assigned << "/"
            << channels * std::size_t(cfg.weight_bits) << "), modes joint " << joint
            << " separate " << (ar.modes.size() - joint) << ", objective "
            << fmt6(ar.objective) << " vs uniform " << fmt6(ar.baseline) << "\n";
    }
    finish_out(tsv, cfg.alloc_report);
    if (alloc.empty())
        log << "uniform quantizer requested, no mixed-precision search ran\n";
    log << "quantized model -> " << cfg.quant_checkpoint << ", allocation -> "
        << cfg.alloc_report << "\n";
}

void cmd_finetune(const PipelineConfig& cfg, std::ostream& log) {
    const Checkpoint cp = load_checkpoint(cfg.quant_checkpoint);
    if (!cp.quantized)
        throw FormatError("expected a quantized checkpoint: " + cfg.quant_checkpoint);

    const TrainState ts = finetune(cp.fp, cp.model, cfg.finetune(), cfg.seed);
    if (cfg.alpha > 0.0 && cfg.finetune_iters > 0 && !ts.memory.warm())
        throw ConfigError(
            "relational memory never warmed: every timestep queue needs at least one push; "
            "raise finetune_iters or push_n\n" +
            ts.memory.debug_summary());

    save_checkpoint(cfg.tuned_checkpoint, ts.model);
    std::ofstream tl = open_out(cfg.train_log);
    for (const std::string& line : ts.log_lines) tl << line << "\n";
    std::istringstream dbg(ts.memory.debug_summary());
    for (std::string line; std::getline(dbg, line);) tl << "# " << line << "\n";
    finish_out(tl, cfg.train_log);

    if (!ts.loss_history.empty())
        log << "total loss " << fmt6(ts.loss_history.front()) << " -> "
            << fmt6(ts.loss_history.back()) << " over " << ts.iterations << " iterations\n";
    log << "tuned model -> " << cfg.tuned_checkpoint << ", training log -> " << cfg.train_log
        << "\n";
}

void cmd_sample(const PipelineConfig& cfg, std::ostream& log) {
    const std::string input = cfg.resolved_sample_input();
    const Checkpoint cp = load_checkpoint(input);
    const int t_count = cp.fp.schedule.steps();
    const int steps = cfg.sample_steps == 0 ? t_count : cfg.sample_steps;

    Rng root(cfg.seed);
    const SampleResult sr = rollout(cp, cfg.sample_n, steps, cfg.sample_eta,
                                    root.split(kStreamSample));

    std::ofstream tsv = open_out(cfg.samples_out);
    for (std::size_t r = 0; r < sr.samples.rows; ++r) {
        for (std::size_t c = 0; c < sr.samples.cols; ++c) {
            if (c) tsv << "\t";
            tsv << fmt(sr.samples.at(r, c));
        }
        tsv << "\n";
    }
    finish_out(tsv, cfg.samples_out);

    double mx = 0.0, my = 0.0;
    for (std::size_t r = 0; r < sr.samples.rows; ++r) {
        mx += sr.samples.at(r, 0) / double(sr.samples.rows);
        my += sr.samples.at(r, 1) / double(sr.samples.rows);
    }
    log << "sampled " << cfg.sample_n << " points in " << steps << " steps (eta "
        << fmt(cfg.sample_eta) << ") from " << (cp.quantized ? "quantized" : "fp")
        << " checkpoint " << input << "\n";
    log << "sample mean (" << fmt6(mx) << ", " << fmt6(my) << ") -> " << cfg.samples_out
        << "\n";
}

void cmd_report(const PipelineConfig& cfg, std::ostream& log) {
    const std::vector<std::string> paths = cfg.resolved_report_inputs();
    if (paths.empty()) throw ConfigError("report needs at least one checkpoint");

    std::vector<Checkpoint> cps;
    cps.reserve(paths.size());
    for (const std::string& p : paths) cps.push_back(load_checkpoint(p));

    const std::uint64_t h0 = teacher_hash(cps[0].fp);
    for (std::size_t i = 1; i < cps.size(); ++i)
        if (teacher_hash(cps[i].fp) != h0)
            throw FormatError("incompatible checkpoints: teacher hash of " + paths[i] +
                              " differs from " + paths[0]);

    const int t_count = cps[0].fp.schedule.steps();
    const std::size_t n_layers = cps[0].fp.layers.size();
    Rng root(cfg.seed);
    const Rng sample_stream = root.split(kStreamReportSample);
    Rng drng = root.split(kStreamReportData);
    const Tensor2D data = sample_dataset(cfg.dataset, cfg.sample_n, drng);

    // Every rollout reuses the same stream, so all variants (and the FP
    // reference) integrate the identical initial noise: paired evaluation.
    Rng ref_rng = sample_stream;
    const SampleResult ref = ddim_sample(cps[0].fp, cfg.sample_n, t_count, 0.0, ref_rng);
    const Tensor2D ref_map = temporal_similarity_map(ref.states);

    struct Row {
        std::string name;
        double ed = 0.0;
        std::vector<double> mse;
        double tmap = 0.0;
    };
    std::vector<Row> rows(cps.size());
    parallel_for(cps.size(), [&](std::size_t i) {
        Row& row = rows[i];
        row.name = std::filesystem::path(paths[i]).stem().string();
        const SampleResult sr = rollout(cps[i], cfg.sample_n, t_count, 0.0, Rng(sample_stream));
        row.ed = energy_distance(sr.samples, data);
        row.tmap = frobenius_distance(temporal_similarity_map(sr.states), ref_map);
        row.mse.assign(n_layers, 0.0);
        if (!cps[i].quantized) return;
        for (std::size_t l = 0; l < n_layers; ++l) {
            const Tensor2D& w = cps[i].fp.layers[l].w;
            const Tensor2D wq = dequantized_weight(cps[i].model.states[l], w);
            double acc = 0.0;
            for (std::size_t j = 0; j < w.data.size(); ++j) {
                const double d = w.data[j] - wq.data[j];
                acc += d * d;
            }
            row.mse[l] = acc / double(w.data.size());
        }
    });

    std::ofstream tsv = open_out(cfg.report_out);
    tsv << "variant\tenergy_distance";
    for (std::size_t l = 0; l < n_layers; ++l) tsv << "\tmse_layer" << l;
    tsv << "\ttmap_frob\n";
    for (const Row& row : rows) {
        tsv << row.name << "\t" << fmt(row.ed);
        for (double m : row.mse) tsv << "\t" << fmt(m);
        tsv << "\t" << fmt(row.tmap) << "\n";
    }
    finish_out(tsv, cfg.report_out);

    std::size_t name_w = 7;
    for (const Row& row : rows) name_w = std::max(name_w, row.name.size());
    log << std::left << std::setw(int(name_w + 2)) << "variant" << std::setw(12) << "ed";
    for (std::size_t l = 0; l < n_layers; ++l)
        log << std::setw(12) << ("mse_l" + std::to_string(l));
    log << "tmap_frob\n";
    for (const Row& row : rows) {
        log << std::setw(int(name_w + 2)) << row.name << std::setw(12) << fmt6(row.ed);
        for (double m : row.mse) log << std::setw(12) << fmt6(m);
        log << fmt6(row.tmap) << "\n";
    }
    log << "report -> " << cfg.report_out << "\n";
}

}  // namespace mpqdm2
