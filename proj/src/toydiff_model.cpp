#include <cmath>
#include <cstdio>
#include <iostream>
#include <stdexcept>

#include "mpqdm2/errors.hpp"
#include "mpqdm2/toydiff.hpp"

namespace mpqdm2 {

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

Tensor2D with_timestep(const Tensor2D& x, int t, int temb_dim) {
    const std::vector<double> emb = timestep_embedding(t, temb_dim);
    Tensor2D out(x.rows, x.cols + emb.size());
    for (std::size_t r = 0; r < x.rows; ++r) {
        for (std::size_t c = 0; c < x.cols; ++c) out.at(r, c) = x.at(r, c);
        for (std::size_t c = 0; c < emb.size(); ++c) out.at(r, x.cols + c) = emb[c];
    }
    return out;
}

Tensor2D linear_forward(const LinearLayer& l, const Tensor2D& x) {
    if (x.cols != l.w.cols) throw std::invalid_argument("linear layer: input width mismatch");
    Tensor2D y(x.rows, l.w.rows);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t o = 0; o < l.w.rows; ++o) {
            double acc = l.b[o];
            for (std::size_t c = 0; c < x.cols; ++c) acc += x.at(r, c) * l.w.at(o, c);
            y.at(r, o) = acc;
        }
    return y;
}

// Quantized weight in the scaled domain: spec_i applied to (w + l1 l2)/delta_i
// column-wise. Multiplying back by delta_i would give dequantized_weight.
Tensor2D quantized_scaled_weight(const LayerQuantState& st, const Tensor2D& w) {
    Tensor2D out(w.rows, w.cols);
    const bool adapt = st.has_adapter();
    for (std::size_t o = 0; o < w.rows; ++o)
        for (std::size_t i = 0; i < w.cols; ++i) {
            double v = w.at(o, i);
            if (adapt) {
                double acc = 0.0;
                for (std::size_t k = 0; k < st.adapter_l1.cols; ++k)
                    acc += st.adapter_l1.at(o, k) * st.adapter_l2.at(k, i);
                v += acc;
            }
            out.at(o, i) = st.specs[i].quantize(v / st.scaling.delta[i]);
        }
    return out;
}

void check_timestep(int t, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps())
        throw std::invalid_argument("toy model: timestep out of schedule range");
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(double beta_lo, double beta_hi, int t_count) {
    if (t_count < 1) throw std::invalid_argument("noise schedule: need at least one step");
    if (!(beta_lo > 0.0) || !(beta_hi < 1.0) || beta_lo > beta_hi)
        throw std::invalid_argument("noise schedule: betas must satisfy 0 < lo <= hi < 1");
    NoiseSchedule s;
    s.betas.resize(std::size_t(t_count));
    s.alpha_bars.resize(std::size_t(t_count));
    double prod = 1.0;
    for (int i = 0; i < t_count; ++i) {
        const double frac = t_count == 1 ? 0.0 : double(i) / double(t_count - 1);
        s.betas[std::size_t(i)] = beta_lo + (beta_hi - beta_lo) * frac;
        prod *= 1.0 - s.betas[std::size_t(i)];
        s.alpha_bars[std::size_t(i)] = prod;
    }
    return s;
}

std::vector<double> timestep_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("timestep embedding: dim must be even and >= 2");
    const int half = dim / 2;
    std::vector<double> out(std::size_t(dim), 0.0);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        out[std::size_t(i)] = std::sin(double(t) * freq);
        out[std::size_t(half + i)] = std::cos(double(t) * freq);
    }
    return out;
}

ToyDiffusionModel ToyDiffusionModel::init(int t_count, std::uint64_t seed) {
    ToyDiffusionModel m;
    m.schedule = NoiseSchedule::linear(1e-4, 0.2, t_count);
    const std::vector<std::size_t> widths = {10, 64, 64, 64, 2};
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        LinearLayer layer;
        layer.w = Tensor2D(widths[l + 1], widths[l]);
        layer.b.assign(widths[l + 1], 0.0);
        const double sd = std::sqrt(2.0 / double(widths[l]));
        Rng lr = rng.split(l);
        for (double& v : layer.w.data) v = sd * lr.normal();
        m.layers.push_back(std::move(layer));
    }
    return m;
}

Tensor2D ToyDiffusionModel::forward(const Tensor2D& x, int t) const {
    return forward_trace(*this, x, t).output;
}

ForwardTrace forward_trace(const ToyDiffusionModel& m, const Tensor2D& x, int t) {
    check_timestep(t, m.schedule);
    if (x.cols != std::size_t(m.data_dim))
        throw std::invalid_argument("toy model: input dimension mismatch");
    ForwardTrace tr;
    Tensor2D cur = with_timestep(x, t, m.temb_dim);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        tr.inputs.push_back(cur);
        Tensor2D y = linear_forward(m.layers[l], cur);
        tr.linear.push_back(y);
        if (l + 1 < m.layers.size()) {
            for (double& v : y.data) v = silu(v);
            cur = std::move(y);
        } else {
            cur = y;
        }
    }
    tr.output = std::move(cur);
    return tr;
}

Tensor2D QuantizedModel::forward(const Tensor2D& x, int t) const {
    check_timestep(t, fp.schedule);
    if (x.cols != std::size_t(fp.data_dim))
        throw std::invalid_argument("toy model: input dimension mismatch");
    Tensor2D cur = with_timestep(x, t, fp.temb_dim);
    for (std::size_t l = 0; l < fp.layers.size(); ++l) {
        const LayerQuantState& st = states[l];
        Tensor2D in = cur;
        if (!st.act_quant.empty()) {
            for (std::size_t r = 0; r < in.rows; ++r)
                for (std::size_t c = 0; c < in.cols; ++c)
                    in.at(r, c) = act_quantize(in.at(r, c) * st.scaling.delta[c],
                                               st.act_quant[std::size_t(t - 1)]);
        }
        const Tensor2D wq = quantized_scaled_weight(st, fp.layers[l].w);
        Tensor2D y(in.rows, wq.rows);
        for (std::size_t r = 0; r < in.rows; ++r)
            for (std::size_t o = 0; o < wq.rows; ++o) {
                double acc = fp.layers[l].b[o];
                for (std::size_t c = 0; c < in.cols; ++c) acc += in.at(r, c) * wq.at(o, c);
                y.at(r, o) = acc;
            }
        if (l + 1 < fp.layers.size())
            for (double& v : y.data) v = silu(v);
        cur = std::move(y);
    }
    return cur;
}

SampleResult ddim_sample(const NoisePredictor& eps, const NoiseSchedule& sched, std::size_t n,
                         int steps, double eta, Rng& rng) {
    const int t_count = sched.steps();
    if (steps < 1 || steps > t_count)
        throw std::invalid_argument("ddim: steps must lie in [1, schedule length]");
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim: eta must lie in [0, 1]");

    SampleResult res;
    res.timesteps.resize(std::size_t(steps));
    res.timesteps[0] = t_count;
    for (int j = 1; j < steps; ++j) {
        const int ideal = int(std::llround(double(t_count) * double(steps - j) / double(steps)));
        res.timesteps[std::size_t(j)] = std::min(ideal, res.timesteps[std::size_t(j - 1)] - 1);
    }

    Tensor2D x(n, 2);
    for (double& v : x.data) v = rng.normal();
    res.states.push_back(x);

    for (int j = 0; j < steps; ++j) {
        const int t = res.timesteps[std::size_t(j)];
        const int t_prev = j + 1 < steps ? res.timesteps[std::size_t(j + 1)] : 0;
        const double ab_t = sched.alpha_bars[std::size_t(t - 1)];
        const double ab_prev = t_prev == 0 ? 1.0 : sched.alpha_bars[std::size_t(t_prev - 1)];
        const Tensor2D e = eps(x, t);
        if (e.rows != x.rows || e.cols != x.cols)
            throw std::invalid_argument("ddim: predictor output shape mismatch");
        const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) *
                             std::sqrt(1.0 - ab_t / ab_prev);
        const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
        Tensor2D next(x.rows, x.cols);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            const double x0 = (x.data[i] - std::sqrt(1.0 - ab_t) * e.data[i]) / std::sqrt(ab_t);
            double v = std::sqrt(ab_prev) * x0 + dir * e.data[i];
            if (sigma > 0.0) v += sigma * rng.normal();
            next.data[i] = v;
        }
        x = std::move(next);
        res.states.push_back(x);
    }
    require_finite(x, "ddim samples");
    res.samples = std::move(x);
    return res;
}

SampleResult ddim_sample(const ToyDiffusionModel& m, std::size_t n, int steps, double eta,
                         Rng& rng) {
    return ddim_sample([&m](const Tensor2D& x, int t) { return m.forward(x, t); }, m.schedule, n,
                       steps, eta, rng);
}

SampleResult ddim_sample(const QuantizedModel& m, std::size_t n, int steps, double eta, Rng& rng) {
    return ddim_sample([&m](const Tensor2D& x, int t) { return m.forward(x, t); }, m.fp.schedule,
                       n, steps, eta, rng);
}

Tensor2D temporal_similarity_map(const std::vector<Tensor2D>& step_features) {
    const std::size_t m = step_features.size();
    if (m == 0) throw std::invalid_argument("similarity map: no features");
    for (const Tensor2D& f : step_features)
        if (f.size() != step_features[0].size())
            throw std::invalid_argument("similarity map: feature sizes differ");
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        norms[i] = frobenius_norm(step_features[i]);
        if (norms[i] == 0.0)
            std::cerr << "similarity map: zero-norm feature at step " << i
                      << ", its similarities are reported as 0\n";
    }
    Tensor2D sim(m, m);
    for (std::size_t i = 0; i < m; ++i) {
        sim.at(i, i) = norms[i] > 0.0 ? 1.0 : 0.0;
        for (std::size_t j = i + 1; j < m; ++j) {
            double v = 0.0;
            if (norms[i] > 0.0 && norms[j] > 0.0) {
                double dot = 0.0;
                for (std::size_t k = 0; k < step_features[i].data.size(); ++k)
                    dot += step_features[i].data[k] * step_features[j].data[k];
                v = dot / (norms[i] * norms[j]);
                v = std::min(1.0, std::max(-1.0, v));
            }
            sim.at(i, j) = v;
            sim.at(j, i) = v;
        }
    }
    return sim;
}

std::vector<double> trajectory_divergence(const std::vector<Tensor2D>& a,
                                          const std::vector<Tensor2D>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("trajectory divergence: step counts differ");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = frobenius_distance(a[i], b[i]);
    return out;
}

}  // namespace mpqdm2
