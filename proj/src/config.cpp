#include "mpqdm2/config.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "mpqdm2/errors.hpp"

namespace mpqdm2 {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

[[noreturn]] void bad(const std::string& key, std::string_view value, const char* why) {
    throw ConfigError("config key " + key + ": " + why + " (got \"" + std::string(value) +
                      "\")");
}

std::uint64_t parse_u64(const std::string& key, std::string_view v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        bad(key, v, "expected an unsigned integer");
    return out;
}

std::int64_t parse_i64(const std::string& key, std::string_view v) {
    std::int64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected an integer");
    return out;
}

double parse_f64(const std::string& key, std::string_view v) {
    double out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "expected a number");
    return out;
}

std::string format_f64(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

const char* dataset_name(DatasetSpec d) {
    return d == DatasetSpec::two_moons ? "two_moons" : "gaussian_mixture_8";
}

const char* metric_name(RelationMetric m) { return m == RelationMetric::kl ? "kl" : "mse"; }

}  // namespace

PretrainConfig PipelineConfig::pretrain() const {
    PretrainConfig c;
    c.dataset = dataset;
    c.t_count = t_count;
    c.iters = pretrain_iters;
    c.batch = pretrain_batch;
    c.lr = pretrain_lr;
    c.momentum = pretrain_momentum;
    return c;
}

QuantizeConfig PipelineConfig::quantize() const {
    QuantizeConfig c;
    c.weight_bits = weight_bits;
    c.act_bits = act_bits;
    c.groups = groups;
    c.surplus_2bit = surplus_2bit;
    c.adapter_rank = adapter_rank;
    c.use_fzrmq = use_fzrmq;
    c.use_oolri = use_oolri;
    return c;
}

FinetuneConfig PipelineConfig::finetune() const {
    FinetuneConfig c;
    c.dataset = dataset;
    c.iters = finetune_iters;
    c.batch = finetune_batch;
    c.lr_adapter = lr_adapter;
    c.lr_steps = lr_steps;
    c.momentum = finetune_momentum;
    c.alpha = alpha;
    c.tau = tau;
    c.push_n = push_n;
    c.queue_capacity = queue_capacity;
    c.sample_k = sample_k;
    c.metric = loss_metric;
    return c;
}

std::string PipelineConfig::resolved_sample_input() const {
    return sample_input.empty() ? tuned_checkpoint : sample_input;
}

std::vector<std::string> PipelineConfig::resolved_report_inputs() const {
    if (!report_inputs.empty()) return report_inputs;
    return {fp_checkpoint, quant_checkpoint, tuned_checkpoint};
}

PipelineConfig parse_config(const std::string& text) {
    PipelineConfig cfg;

    const std::map<std::string, std::function<void(const std::string&, std::string_view)>>
        setters = {
            {"dataset",
             [&](const std::string& k, std::string_view v) {
                 if (v == "two_moons")
                     cfg.dataset = DatasetSpec::two_moons;
                 else if (v == "gaussian_mixture_8")
                     cfg.dataset = DatasetSpec::gaussian_mixture_8;
                 else
                     bad(k, v, "expected two_moons or gaussian_mixture_8");
             }},
            {"seed", [&](const std::string& k, std::string_view v) { cfg.seed = parse_u64(k, v); }},
            {"t_count",
             [&](const std::string& k, std::string_view v) {
                 cfg.t_count = int(parse_i64(k, v));
             }},
            {"pretrain_iters",
             [&](const std::string& k, std::string_view v) {
                 cfg.pretrain_iters = int(parse_i64(k, v));
             }},
            {"pretrain_batch",
             [&](const std::string& k, std::string_view v) {
                 cfg.pretrain_batch = std::size_t(parse_u64(k, v));
             }},
            {"pretrain_lr",
             [&](const std::string& k, std::string_view v) {
                 cfg.pretrain_lr = parse_f64(k, v);
             }},
            {"pretrain_momentum",
             [&](const std::string& k, std::string_view v) {
                 cfg.pretrain_momentum = parse_f64(k, v);
             }},
            {"weight_bits",
             [&](const std::string& k, std::string_view v) {
                 cfg.weight_bits = int(parse_i64(k, v));
             }},
            {"act_bits",
             [&](const std::string& k, std::string_view v) {
                 cfg.act_bits = int(parse_i64(k, v));
             }},
            {"groups",
             [&](const std::string& k, std::string_view v) {
                 cfg.groups = std::size_t(parse_u64(k, v));
             }},
            {"surplus_2bit",
             [&](const std::string& k, std::string_view v) {
                 cfg.surplus_2bit = parse_f64(k, v);
             }},
            {"adapter_rank",
             [&](const std::string& k, std::string_view v) {
                 cfg.adapter_rank = std::size_t(parse_u64(k, v));
             }},
            {"quantizer",
             [&](const std::string& k, std::string_view v) {
                 if (v == "fzrmq")
                     cfg.use_fzrmq = true;
                 else if (v == "uniform")
                     cfg.use_fzrmq = false;
                 else
                     bad(k, v, "expected fzrmq or uniform");
             }},
            {"adapter_init",
             [&](const std::string& k, std::string_view v) {
                 if (v == "oolri")
                     cfg.use_oolri = true;
                 else if (v == "zero")
                     cfg.use_oolri = false;
                 else
                     bad(k, v, "expected oolri or zero");
             }},
            {"finetune_iters",
             [&](const std::string& k, std::string_view v) {
                 cfg.finetune_iters = int(parse_i64(k, v));
             }},
            {"finetune_batch",
             [&](const std::string& k, std::string_view v) {
                 cfg.finetune_batch = std::size_t(parse_u64(k, v));
             }},
            {"lr_adapter",
             [&](const std::string& k, std::string_view v) {
                 cfg.lr_adapter = parse_f64(k, v);
             }},
            {"lr_steps",
             [&](const std::string& k, std::string_view v) {
                 cfg.lr_steps = parse_f64(k, v);
             }},
            {"finetune_momentum",
             [&](const std::string& k, std::string_view v) {
                 cfg.finetune_momentum = parse_f64(k, v);
             }},
            {"alpha",
             [&](const std::string& k, std::string_view v) { cfg.alpha = parse_f64(k, v); }},
            {"tau", [&](const std::string& k, std::string_view v) { cfg.tau = parse_f64(k, v); }},
            {"push_n",
             [&](const std::string& k, std::string_view v) {
                 cfg.push_n = std::size_t(parse_u64(k, v));
             }},
            {"queue_capacity",
             [&](const std::string& k, std::string_view v) {
                 cfg.queue_capacity = std::size_t(parse_u64(k, v));
             }},
            {"sample_k",
             [&](const std::string& k, std::string_view v) {
                 cfg.sample_k = std::size_t(parse_u64(k, v));
             }},
            {"loss_metric",
             [&](const std::string& k, std::string_view v) {
                 if (v == "kl")
                     cfg.loss_metric = RelationMetric::kl;
                 else if (v == "mse")
                     cfg.loss_metric = RelationMetric::mse;
                 else
                     bad(k, v, "expected kl or mse");
             }},
            {"sample_n",
             [&](const std::string& k, std::string_view v) {
                 cfg.sample_n = std::size_t(parse_u64(k, v));
             }},
            {"sample_steps",
             [&](const std::string& k, std::string_view v) {
                 cfg.sample_steps = int(parse_i64(k, v));
             }},
            {"sample_eta",
             [&](const std::string& k, std::string_view v) {
                 cfg.sample_eta = parse_f64(k, v);
             }},
            {"fp_checkpoint",
             [&](const std::string&, std::string_view v) { cfg.fp_checkpoint = v; }},
            {"quant_checkpoint",
             [&](const std::string&, std::string_view v) { cfg.quant_checkpoint = v; }},
            {"tuned_checkpoint",
             [&](const std::string&, std::string_view v) { cfg.tuned_checkpoint = v; }},
            {"alloc_report",
             [&](const std::string&, std::string_view v) { cfg.alloc_report = v; }},
            {"train_log", [&](const std::string&, std::string_view v) { cfg.train_log = v; }},
            {"samples_out",
             [&](const std::string&, std::string_view v) { cfg.samples_out = v; }},
            {"report_out", [&](const std::string&, std::string_view v) { cfg.report_out = v; }},
            {"sample_input",
             [&](const std::string&, std::string_view v) { cfg.sample_input = v; }},
            {"report_inputs",
             [&](const std::string& k, std::string_view v) {
                 cfg.report_inputs.clear();
                 std::size_t start = 0;
                 while (start <= v.size()) {
                     const std::size_t comma = v.find(',', start);
                     const std::string_view part =
                         trim(v.substr(start, comma == std::string_view::npos
                                                  ? std::string_view::npos
                                                  : comma - start));
                     if (part.empty()) bad(k, v, "expected a comma-separated path list");
                     cfg.report_inputs.emplace_back(part);
                     if (comma == std::string_view::npos) break;
                     start = comma + 1;
                 }
             }},
        };

    std::set<std::string> seen;
    std::istringstream is(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        std::string_view line = raw;
        if (const std::size_t hash = line.find('#'); hash != std::string_view::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value");
        const std::string key{trim(line.substr(0, eq))};
        const std::string_view value = trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end())
            throw ConfigError("unknown config key: " + key + " (line " +
                              std::to_string(line_no) + ")");
        if (!seen.insert(key).second)
            throw ConfigError("duplicate config key: " + key + " (line " +
                              std::to_string(line_no) + ")");
        if (value.empty())
            throw ConfigError("config key " + key + " has an empty value (line " +
                              std::to_string(line_no) + ")");
        it->second(key, value);
    }

    auto require = [](bool ok, const char* msg) {
        if (!ok) throw ConfigError(std::string("config: ") + msg);
    };
    require(cfg.t_count >= 1 && cfg.t_count <= 100000, "t_count must be in [1, 100000]");
    require(cfg.pretrain_iters >= 1, "pretrain_iters must be >= 1");
    require(cfg.pretrain_batch >= 1, "pretrain_batch must be >= 1");
    require(cfg.pretrain_lr > 0.0, "pretrain_lr must be positive");
    require(cfg.pretrain_momentum >= 0.0 && cfg.pretrain_momentum < 1.0,
            "pretrain_momentum must be in [0, 1)");
    require(cfg.weight_bits >= 2 && cfg.weight_bits <= 8, "weight_bits must be in [2, 8]");
    require(cfg.act_bits >= 1 && cfg.act_bits <= 8, "act_bits must be in [1, 8]");
    require(cfg.surplus_2bit >= 0.0 && cfg.surplus_2bit <= 1.0,
            "surplus_2bit must be in [0, 1]");
    require(cfg.finetune_iters >= 0, "finetune_iters must be >= 0");
    require(cfg.finetune_batch >= 1, "finetune_batch must be >= 1");
    require(cfg.lr_adapter >= 0.0, "lr_adapter must be >= 0");
    require(cfg.lr_steps >= 0.0, "lr_steps must be >= 0");
    require(cfg.finetune_momentum >= 0.0 && cfg.finetune_momentum < 1.0,
            "finetune_momentum must be in [0, 1)");
    require(cfg.alpha >= 0.0, "alpha must be >= 0");
    require(cfg.tau > 0.0, "tau must be positive");
    require(cfg.push_n >= 1 && cfg.push_n <= cfg.finetune_batch,
            "push_n must be in [1, finetune_batch]");
    require(cfg.queue_capacity >= 1, "queue_capacity must be >= 1");
    require(cfg.sample_k >= 1, "sample_k must be >= 1");
    require(cfg.sample_n >= 1, "sample_n must be >= 1");
    require(cfg.sample_steps >= 0 && cfg.sample_steps <= cfg.t_count,
            "sample_steps must be in [0, t_count]");
    require(cfg.sample_eta >= 0.0 && cfg.sample_eta <= 1.0, "sample_eta must be in [0, 1]");
    require(!cfg.fp_checkpoint.empty(), "fp_checkpoint must be set");
    require(!cfg.quant_checkpoint.empty(), "quant_checkpoint must be set");
    require(!cfg.tuned_checkpoint.empty(), "tuned_checkpoint must be set");
    require(!cfg.alloc_report.empty(), "alloc_report must be set");
    require(!cfg.train_log.empty(), "train_log must be set");
    require(!cfg.samples_out.empty(), "samples_out must be set");
    require(!cfg.report_out.empty(), "report_out must be set");
    return cfg;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config(buf.str());
}

std::string emit_config(const PipelineConfig& cfg) {
    std::ostringstream os;
    os << "# data and schedule\n";
    os << "dataset = " << dataset_name(cfg.dataset) << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "t_count = " << cfg.t_count << "\n";
    os << "\n# pretraining\n";
    os << "pretrain_iters = " << cfg.pretrain_iters << "\n";
    os << "pretrain_batch = " << cfg.pretrain_batch << "\n";
    os << "pretrain_lr = " << format_f64(cfg.pretrain_lr) << "\n";
    os << "pretrain_momentum = " << format_f64(cfg.pretrain_momentum) << "\n";
    os << "\n# quantization\n";
    os << "weight_bits = " << cfg.weight_bits << "\n";
    os << "act_bits = " << cfg.act_bits << "\n";
    os << "groups = " << cfg.groups << "\n";
    os << "surplus_2bit = " << format_f64(cfg.surplus_2bit) << "\n";
    os << "adapter_rank = " << cfg.adapter_rank << "\n";
    os << "quantizer = " << (cfg.use_fzrmq ? "fzrmq" : "uniform") << "\n";
    os << "adapter_init = " << (cfg.use_oolri ? "oolri" : "zero") << "\n";
    os << "\n# fine-tuning\n";
    os << "finetune_iters = " << cfg.finetune_iters << "\n";
    os << "finetune_batch = " << cfg.finetune_batch << "\n";
    os << "lr_adapter = " << format_f64(cfg.lr_adapter) << "\n";
    os << "lr_steps = " << format_f64(cfg.lr_steps) << "\n";
    os << "finetune_momentum = " << format_f64(cfg.finetune_momentum) << "\n";
    os << "alpha = " << format_f64(cfg.alpha) << "\n";
    os << "tau = " << format_f64(cfg.tau) << "\n";
    os << "push_n = " << cfg.push_n << "\n";
    os << "queue_capacity = " << cfg.queue_capacity << "\n";
    os << "sample_k = " << cfg.sample_k << "\n";
    os << "loss_metric = " << metric_name(cfg.loss_metric) << "\n";
    os << "\n# sampling\n";
    os << "sample_n = " << cfg.sample_n << "\n";
    os << "sample_steps = " << cfg.sample_steps << "\n";
    os << "sample_eta = " << format_f64(cfg.sample_eta) << "\n";
    os << "\n# artifact paths\n";
    os << "fp_checkpoint = " << cfg.fp_checkpoint << "\n";
    os << "quant_checkpoint = " << cfg.quant_checkpoint << "\n";
    os << "tuned_checkpoint = " << cfg.tuned_checkpoint << "\n";
    os << "alloc_report = " << cfg.alloc_report << "\n";
    os << "train_log = " << cfg.train_log << "\n";
    os << "samples_out = " << cfg.samples_out << "\n";
    os << "report_out = " << cfg.report_out << "\n";
    if (!cfg.sample_input.empty()) os << "sample_input = " << cfg.sample_input << "\n";
    if (!cfg.report_inputs.empty()) {
        os << "report_inputs = ";
        for (std::size_t i = 0; i < cfg.report_inputs.size(); ++i) {
            if (i) os << ", ";
            os << cfg.report_inputs[i];
        }
        os << "\n";
    }
    return std::move(os).str();
}

}  // namespace mpqdm2
