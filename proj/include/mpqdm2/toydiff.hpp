#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <string>
#include <vector>

#include "mpqdm2/mpq_search.hpp"
#include "mpqdm2/mtrd.hpp"
#include "mpqdm2/quantizer.hpp"
#include "mpqdm2/rng.hpp"
#include "mpqdm2/tensor.hpp"

namespace mpqdm2 {

enum class DatasetSpec : std::uint8_t { two_moons = 0, gaussian_mixture_8 = 1 };

// n points in 2-D, centered at the origin with roughly unit spread.
Tensor2D sample_dataset(DatasetSpec spec, std::size_t n, Rng& rng);

// Squared energy distance between two point sets, as the V-statistic
// 2 E|x-y| - E|x-x'| - E|y-y'|. Nonnegative; zero iff equal distributions.
double energy_distance(const Tensor2D& x, const Tensor2D& y);

struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alpha_bars;  // running products of (1 - beta)

    int steps() const { return int(betas.size()); }
    static NoiseSchedule linear(double beta_lo, double beta_hi, int t_count);
};

// Sinusoidal embedding of an integer timestep; dim must be even.
std::vector<double> timestep_embedding(int t, int dim);

struct LinearLayer {
    Tensor2D w;             // out x in
    std::vector<double> b;  // out
};

// Noise-prediction MLP over 2-D points: the input projection sees the point
// concatenated with the timestep embedding, then SiLU hidden layers.
struct ToyDiffusionModel {
    std::vector<LinearLayer> layers;  // 10 -> 64 -> 64 -> 64 -> 2
    NoiseSchedule schedule;
    int temb_dim = 8;
    int data_dim = 2;

    static ToyDiffusionModel init(int t_count, std::uint64_t seed);
    Tensor2D forward(const Tensor2D& x, int t) const;
};

// Per-layer linear inputs and pre-activation outputs of one forward pass.
struct ForwardTrace {
    std::vector<Tensor2D> inputs;
    std::vector<Tensor2D> linear;
    Tensor2D output;
};
ForwardTrace forward_trace(const ToyDiffusionModel& m, const Tensor2D& x, int t);

struct PretrainConfig {
    DatasetSpec dataset = DatasetSpec::two_moons;
    int t_count = 10;
    int iters = 4000;
    std::size_t batch = 64;
    double lr = 2e-3;
    double momentum = 0.9;
};

struct PretrainResult {
    ToyDiffusionModel model;
    std::vector<double> loss_history;
};

// Trains the full-precision teacher from scratch; deterministic in the seed.
// Throws NumericError naming the iteration if the loss turns non-finite.
PretrainResult pretrain_fp(const PretrainConfig& cfg, std::uint64_t seed);

// calib[layer][t-1]: inputs to that linear layer at timestep t, with rows
// from all batches stacked.
using CalibrationSet = std::vector<std::vector<Tensor2D>>;
CalibrationSet collect_calibration(const ToyDiffusionModel& m, DatasetSpec spec, int batches,
                                   std::size_t batch, Rng& rng);

struct QuantizeConfig {
    int weight_bits = 3;  // average per-channel budget for the searched layers
    int act_bits = 8;
    std::size_t groups = 0;     // 0: one group per ~10 channels
    double surplus_2bit = 0.0;  // extra fraction of channels upgraded one bit
    std::size_t adapter_rank = 4;
    bool use_fzrmq = true;  // false: plain per-channel uniform, no search
    bool use_oolri = true;  // false: zero-initialized adapters
};

// The input projection stays at 8 bits with unquantized activations and no
// adapter; every later layer carries the searched mixed-precision state.
struct QuantizedModel {
    ToyDiffusionModel fp;  // frozen base weights and schedule
    std::vector<LayerQuantState> states;
    std::vector<char> trainable;

    Tensor2D forward(const Tensor2D& x, int t) const;
};

// alloc_out, when given, receives (layer index, search result) for every
// layer that went through the mixed-precision search.
QuantizedModel quantize_model(
    const ToyDiffusionModel& m, const CalibrationSet& calib, const QuantizeConfig& cfg,
    std::vector<std::pair<std::size_t, AllocationResult>>* alloc_out = nullptr);

using NoisePredictor = std::function<Tensor2D(const Tensor2D&, int)>;

struct SampleResult {
    Tensor2D samples;
    std::vector<Tensor2D> states;  // states[0] is the initial noise
    std::vector<int> timesteps;    // descending t visited, one per step
};

// Deterministic for eta == 0 and a fixed rng state. steps <= schedule length;
// fewer steps visit an evenly thinned strictly decreasing timestep chain.
SampleResult ddim_sample(const NoisePredictor& eps, const NoiseSchedule& sched, std::size_t n,
                         int steps, double eta, Rng& rng);
SampleResult ddim_sample(const ToyDiffusionModel& m, std::size_t n, int steps, double eta,
                         Rng& rng);
SampleResult ddim_sample(const QuantizedModel& m, std::size_t n, int steps, double eta, Rng& rng);

// Pairwise cosine similarities of flattened per-step features: symmetric,
// unit diagonal, entries in [-1, 1]. A zero-norm feature vector yields zero
// similarity to everything (with a stderr note) rather than NaN.
Tensor2D temporal_similarity_map(const std::vector<Tensor2D>& step_features);

// Frobenius distance between paired states, one entry per step.
std::vector<double> trajectory_divergence(const std::vector<Tensor2D>& a,
                                          const std::vector<Tensor2D>& b);

struct FinetuneConfig {
    DatasetSpec dataset = DatasetSpec::two_moons;
    int iters = 2000;
    std::size_t batch = 16;
    double lr_adapter = 1e-3;
    double lr_steps = 1e-4;
    double momentum = 0.9;
    double alpha = 1.0;  // MTRD weight; 0 disables the relational term
    double tau = 1.0;
    std::size_t push_n = 8;
    std::size_t queue_capacity = 512;
    std::size_t sample_k = 32;
    RelationMetric metric = RelationMetric::kl;
};

struct TrainState {
    QuantizedModel model;
    TemporalMemory memory;
    std::vector<double> loss_history;    // total loss per iteration
    std::vector<std::string> log_lines;  // iter, t, align, mtrd, total, fill
    long iterations = 0;
};

// Algorithm: per iteration sample a timestep and a noised batch, forward the
// teacher and the student, push teacher features into the temporal memory,
// and descend align + alpha * mtrd over the adapters, the weight step sizes,
// and the per-timestep activation (s_t, z_t). Base weights never move.
TrainState finetune(const ToyDiffusionModel& teacher, QuantizedModel student,
                    const FinetuneConfig& cfg, std::uint64_t seed);

// One training step's smooth surrogate, for gradient checks: all rounding,
// clipping, and sign decisions are recorded at the current parameters, and
// loss_at replays them under a perturbed parameter vector. grad is the
// analytic gradient of that surrogate at the recording point, which is what
// the straight-through training step descends.
struct SteProbe {
    std::vector<double> params;
    double loss = 0.0;
    std::vector<double> grad;
    std::function<double(std::span<const double>)> loss_at;
};

SteProbe make_ste_probe(const ToyDiffusionModel& teacher, const QuantizedModel& student,
                        const FinetuneConfig& cfg, const Tensor2D& x_t, int t,
                        const ReferenceMatrix* ref);

}  // namespace mpqdm2
