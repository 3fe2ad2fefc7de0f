#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mpqdm2/errors.hpp"
#include "mpqdm2/mpq_search.hpp"
#include "mpqdm2/oolri.hpp"
#include "mpqdm2/toydiff.hpp"

namespace mpqdm2 {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu(double x) { return x * sigmoid(x); }
double silu_prime(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

double mean_sq_diff(const Tensor2D& a, const Tensor2D& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / double(a.size());
}

Tensor2D vstack(const std::vector<Tensor2D>& parts) {
    std::size_t rows = 0;
    for (const Tensor2D& p : parts) rows += p.rows;
    Tensor2D out(rows, parts.front().cols);
    std::size_t at = 0;
    for (const Tensor2D& p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + std::ptrdiff_t(at));
        at += p.data.size();
    }
    return out;
}

Tensor2D noised(const Tensor2D& x0, const NoiseSchedule& sched, int t, const Tensor2D& eps) {
    const double ab = sched.alpha_bars[std::size_t(t - 1)];
    const double a = std::sqrt(ab);
    const double s = std::sqrt(1.0 - ab);
    Tensor2D out(x0.rows, x0.cols);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + s * eps.data[i];
    return out;
}

std::vector<double> column(const Tensor2D& a, std::size_t j) {
    std::vector<double> out(a.rows);
    for (std::size_t r = 0; r < a.rows; ++r) out[r] = a.at(r, j);
    return out;
}

}  // namespace

PretrainResult pretrain_fp(const PretrainConfig& cfg, std::uint64_t seed) {
    if (cfg.iters < 1 || cfg.batch < 1)
        throw std::invalid_argument("pretrain: iters and batch must be positive");
    PretrainResult res;
    res.model = ToyDiffusionModel::init(cfg.t_count, seed);
    ToyDiffusionModel& m = res.model;
    const int t_count = m.schedule.steps();
    const std::size_t n_layers = m.layers.size();

    Rng root(seed);
    Rng data = root.split(101);
    Rng noise = root.split(102);
    Rng tpick = root.split(103);

    std::vector<Tensor2D> mw(n_layers);
    std::vector<std::vector<double>> mb(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        mw[l] = Tensor2D(m.layers[l].w.rows, m.layers[l].w.cols);
        mb[l].assign(m.layers[l].b.size(), 0.0);
    }

    for (int it = 0; it < cfg.iters; ++it) {
        const int t = 1 + int(tpick.below(std::uint64_t(t_count)));
        const Tensor2D x0 = sample_dataset(cfg.dataset, cfg.batch, data);
        Tensor2D eps(cfg.batch, 2);
        for (double& v : eps.data) v = noise.normal();
        const Tensor2D x_t = noised(x0, m.schedule, t, eps);
        const ForwardTrace tr = forward_trace(m, x_t, t);

        const double loss = mean_sq_diff(tr.output, eps);
        if (!std::isfinite(loss))
            throw NumericError("pretrain diverged at iteration " + std::to_string(it));
        res.loss_history.push_back(loss);

        Tensor2D dy(tr.output.rows, tr.output.cols);
        const double inv = 2.0 / double(tr.output.size());
        for (std::size_t i = 0; i < dy.data.size(); ++i)
            dy.data[i] = inv * (tr.output.data[i] - eps.data[i]);

        for (std::size_t l = n_layers; l-- > 0;) {
            LinearLayer& lay = m.layers[l];
            const Tensor2D& x_in = tr.inputs[l];
            Tensor2D dw(lay.w.rows, lay.w.cols);
            std::vector<double> db(lay.b.size(), 0.0);
            for (std::size_t r = 0; r < dy.rows; ++r)
                for (std::size_t o = 0; o < dy.cols; ++o) {
                    const double g = dy.at(r, o);
                    db[o] += g;
                    for (std::size_t c = 0; c < x_in.cols; ++c) dw.at(o, c) += g * x_in.at(r, c);
                }
            if (l > 0) {
                Tensor2D dx(x_in.rows, x_in.cols);
                for (std::size_t r = 0; r < dy.rows; ++r)
                    for (std::size_t c = 0; c < x_in.cols; ++c) {
                        double acc = 0.0;
                        for (std::size_t o = 0; o < dy.cols; ++o)
                            acc += dy.at(r, o) * lay.w.at(o, c);
                        dx.at(r, c) = acc;
                    }
                const Tensor2D& pre = tr.linear[l - 1];
                for (std::size_t i = 0; i < dx.data.size(); ++i)
                    dx.data[i] *= silu_prime(pre.data[i]);
                dy = std::move(dx);
            }
            for (std::size_t i = 0; i < dw.data.size(); ++i) {
                mw[l].data[i] = cfg.momentum * mw[l].data[i] + dw.data[i];
                lay.w.data[i] -= cfg.lr * mw[l].data[i];
            }
            for (std::size_t o = 0; o < db.size(); ++o) {
                mb[l][o] = cfg.momentum * mb[l][o] + db[o];
                lay.b[o] -= cfg.lr * mb[l][o];
            }
        }
    }
    return res;
}

CalibrationSet collect_calibration(const ToyDiffusionModel& m, DatasetSpec spec, int batches,
                                   std::size_t batch, Rng& rng) {
    if (batches < 1 || batch < 1)
        throw std::invalid_argument("collect_calibration: batches and batch must be positive");
    const int t_count = m.schedule.steps();
    const std::size_t n_layers = m.layers.size();
    std::vector<std::vector<std::vector<Tensor2D>>> acc(
        n_layers, std::vector<std::vector<Tensor2D>>(std::size_t(t_count)));
    for (int b = 0; b < batches; ++b) {
        const Tensor2D x0 = sample_dataset(spec, batch, rng);
        for (int t = 1; t <= t_count; ++t) {
            Tensor2D eps(batch, 2);
            for (double& v : eps.data) v = rng.normal();
            const ForwardTrace tr = forward_trace(m, noised(x0, m.schedule, t, eps), t);
            for (std::size_t l = 0; l < n_layers; ++l)
                acc[l][std::size_t(t - 1)].push_back(tr.inputs[l]);
        }
    }
    CalibrationSet calib(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l)
        for (int t = 0; t < t_count; ++t) calib[l].push_back(vstack(acc[l][std::size_t(t)]));
    return calib;
}

QuantizedModel quantize_model(
    const ToyDiffusionModel& m, const CalibrationSet& calib, const QuantizeConfig& cfg,
    std::vector<std::pair<std::size_t, AllocationResult>>* alloc_out) {
    const std::size_t n_layers = m.layers.size();
    if (calib.size() != n_layers)
        throw std::invalid_argument("quantize_model: calibration layer count mismatch");
    const int t_count = m.schedule.steps();
    for (const auto& per_t : calib)
        if (int(per_t.size()) != t_count)
            throw std::invalid_argument("quantize_model: calibration timestep count mismatch");
    if (cfg.weight_bits < 2 || cfg.weight_bits > 8)
        throw std::invalid_argument("quantize_model: weight bits must lie in [2, 8]");

    if (alloc_out) alloc_out->clear();
    QuantizedModel qm;
    qm.fp = m;
    qm.states.resize(n_layers);
    qm.trainable.assign(n_layers, 0);

    {
        const Tensor2D& w = m.layers[0].w;
        LayerQuantState& st = qm.states[0];
        st.scaling.delta.assign(w.cols, 1.0);
        st.bit_alloc.assign(w.cols, 8);
        for (std::size_t i = 0; i < w.cols; ++i)
            st.specs.push_back(calibrate_residual(column(w, i), 8, 0, OpMode::joint));
    }

    for (std::size_t l = 1; l < n_layers; ++l) {
        const Tensor2D& w = m.layers[l].w;
        LayerQuantState& st = qm.states[l];
        const Tensor2D x_all = vstack(calib[l]);
        st.scaling = compute_prescale(w, x_all);
        const Tensor2D ws = apply_prescale_weight(w, st.scaling);

        if (cfg.use_fzrmq) {
            SearchConfig sc;
            sc.n = cfg.weight_bits;
            sc.groups = cfg.groups;
            sc.surplus_2bit = cfg.surplus_2bit;
            sc.act_bits = cfg.act_bits;
            const AllocationResult ar =
                search_allocation(transpose(ws), apply_prescale_activations(x_all, st.scaling), sc);
            if (alloc_out) alloc_out->emplace_back(l, ar);
            st.bit_alloc = ar.bits;
            const int base_bits = cfg.weight_bits - 1;
            for (std::size_t i = 0; i < w.cols; ++i) {
                const int tiers = ar.bits[i] - base_bits;
                const std::vector<double> col = column(ws, i);
                st.specs.push_back(
                    fit_step_sizes(col, calibrate_residual(col, ar.bits[i], tiers, ar.modes[i])));
            }
        } else {
            st.bit_alloc.assign(w.cols, cfg.weight_bits);
            for (std::size_t i = 0; i < w.cols; ++i) {
                const std::vector<double> col = column(ws, i);
                st.specs.push_back(
                    fit_step_sizes(col, calibrate_residual(col, cfg.weight_bits, 0, OpMode::joint)));
            }
        }

        for (int t = 1; t <= t_count; ++t)
            st.act_quant.push_back(calibrate_act(
                apply_prescale_activations(calib[l][std::size_t(t - 1)], st.scaling),
                cfg.act_bits));

        const std::size_t r = std::min(cfg.adapter_rank, std::min(w.rows, w.cols));
        if (r > 0) {
            if (cfg.use_oolri) {
                const AdapterInit ai = init_adapter(quant_residual(w, st), r);
                st.adapter_l1 = ai.l1;
                st.adapter_l2 = ai.l2;
                st.adapter_norm_before = ai.residual_norm_before;
                st.adapter_norm_after = ai.residual_norm_after;
            } else {
                st.adapter_l1 = Tensor2D(w.rows, r);
                st.adapter_l2 = Tensor2D(r, w.cols);
            }
        }
        qm.trainable[l] = 1;
    }
    return qm;
}

namespace {

// Flat parameter vector layout over the trainable quantization state. kind:
// 0 adapter entry, 1 weight base step, 2 free tier delta, 3 activation step,
// 4 activation zero. Index -1 marks a frozen slot that replay reads from the
// model instead.
struct ParamLayout {
    struct Layer {
        std::ptrdiff_t l1 = -1;
        std::ptrdiff_t l2 = -1;
        std::size_t rank = 0;
        std::vector<std::ptrdiff_t> step;
        std::vector<std::ptrdiff_t> d1;
        std::vector<std::ptrdiff_t> d2;
        std::vector<std::ptrdiff_t> act_s;
        std::vector<std::ptrdiff_t> act_z;
    };
    std::vector<Layer> layers;
    std::vector<std::uint8_t> kind;

    std::size_t size() const { return kind.size(); }
    std::ptrdiff_t alloc(std::uint8_t k) {
        kind.push_back(k);
        return std::ptrdiff_t(kind.size()) - 1;
    }
};

ParamLayout build_layout(const QuantizedModel& m) {
    ParamLayout lay;
    lay.layers.resize(m.states.size());
    for (std::size_t l = 0; l < m.states.size(); ++l) {
        const LayerQuantState& st = m.states[l];
        ParamLayout::Layer& e = lay.layers[l];
        const std::size_t in = m.fp.layers[l].w.cols;
        e.step.assign(in, -1);
        e.d1.assign(in, -1);
        e.d2.assign(in, -1);
        e.act_s.assign(st.act_quant.size(), -1);
        e.act_z.assign(st.act_quant.size(), -1);
        if (!m.trainable[l]) continue;
        if (st.has_adapter()) {
            e.rank = st.adapter_l1.cols;
            e.l1 = lay.alloc(0);
            for (std::size_t i = 1; i < st.adapter_l1.size(); ++i) lay.alloc(0);
            e.l2 = lay.alloc(0);
            for (std::size_t i = 1; i < st.adapter_l2.size(); ++i) lay.alloc(0);
        }
        for (std::size_t i = 0; i < in; ++i) {
            e.step[i] = lay.alloc(1);
            const ResidualQuantizer& q = st.specs[i];
            if (q.mode == OpMode::separate && q.tiers >= 1) e.d1[i] = lay.alloc(2);
            if (q.mode == OpMode::separate && q.tiers >= 2) e.d2[i] = lay.alloc(2);
        }
        for (std::size_t t = 0; t < st.act_quant.size(); ++t) {
            e.act_s[t] = lay.alloc(3);
            e.act_z[t] = lay.alloc(4);
        }
    }
    return lay;
}

std::vector<double> pack_params(const QuantizedModel& m, const ParamLayout& lay) {
    std::vector<double> p(lay.size(), 0.0);
    for (std::size_t l = 0; l < m.states.size(); ++l) {
        const LayerQuantState& st = m.states[l];
        const ParamLayout::Layer& e = lay.layers[l];
        if (e.l1 >= 0) {
            std::copy(st.adapter_l1.data.begin(), st.adapter_l1.data.end(),
                      p.begin() + e.l1);
            std::copy(st.adapter_l2.data.begin(), st.adapter_l2.data.end(),
                      p.begin() + e.l2);
        }
        for (std::size_t i = 0; i < e.step.size(); ++i) {
            if (e.step[i] >= 0) p[std::size_t(e.step[i])] = st.specs[i].base.step;
            if (e.d1[i] >= 0) p[std::size_t(e.d1[i])] = st.specs[i].delta_res;
            if (e.d2[i] >= 0) p[std::size_t(e.d2[i])] = st.specs[i].delta_res2;
        }
        for (std::size_t t = 0; t < e.act_s.size(); ++t) {
            if (e.act_s[t] >= 0) p[std::size_t(e.act_s[t])] = st.act_quant[t].step;
            if (e.act_z[t] >= 0) p[std::size_t(e.act_z[t])] = st.act_quant[t].zero;
        }
    }
    return p;
}

void apply_params(QuantizedModel& m, const ParamLayout& lay, std::span<const double> p) {
    for (std::size_t l = 0; l < m.states.size(); ++l) {
        LayerQuantState& st = m.states[l];
        const ParamLayout::Layer& e = lay.layers[l];
        if (e.l1 >= 0) {
            std::copy(p.begin() + e.l1, p.begin() + e.l1 + std::ptrdiff_t(st.adapter_l1.size()),
                      st.adapter_l1.data.begin());
            std::copy(p.begin() + e.l2, p.begin() + e.l2 + std::ptrdiff_t(st.adapter_l2.size()),
                      st.adapter_l2.data.begin());
        }
        for (std::size_t i = 0; i < e.step.size(); ++i) {
            ResidualQuantizer& q = st.specs[i];
            if (e.step[i] >= 0) q.base.step = p[std::size_t(e.step[i])];
            if (q.mode == OpMode::joint && q.tiers >= 1) {
                q.delta_res = q.base.step / 2.0;
                if (q.tiers >= 2) q.delta_res2 = q.base.step / 4.0;
            } else {
                if (e.d1[i] >= 0) q.delta_res = p[std::size_t(e.d1[i])];
                if (e.d2[i] >= 0) q.delta_res2 = p[std::size_t(e.d2[i])];
            }
        }
        for (std::size_t t = 0; t < e.act_s.size(); ++t) {
            if (e.act_s[t] >= 0) st.act_quant[t].step = p[std::size_t(e.act_s[t])];
            if (e.act_z[t] >= 0) st.act_quant[t].zero = p[std::size_t(e.act_z[t])];
        }
    }
}

// One recorded forward pass of the quantized student at a fixed timestep.
// Every rounding code, clip state, and tier sign is frozen so the training
// step and the replay surrogate share identical decisions.
struct TapeLayer {
    Tensor2D x_in;  // layer input before activation quantization, unscaled
    std::vector<std::int8_t> a_state;  // 0 in-range, 1 clip-low, 2 clip-high
    std::vector<double> a_code;        // frozen integer code minus zero
    Tensor2D a_q;
    std::vector<std::int8_t> w_state;
    std::vector<double> w_code;
    std::vector<std::int8_t> g1;
    std::vector<std::int8_t> g2;
    Tensor2D v_rec;  // (w + l1 l2) / delta at recording time
    Tensor2D wq;
    Tensor2D y;  // linear output
    Tensor2D h;  // after nonlinearity (y itself on the last layer)
};

struct StudentTape {
    int t = 0;
    std::vector<TapeLayer> layers;
};

StudentTape record_tape(const QuantizedModel& m, const Tensor2D& in0, int t) {
    const std::size_t n_layers = m.fp.layers.size();
    StudentTape tape;
    tape.t = t;
    tape.layers.resize(n_layers);
    Tensor2D cur = in0;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const LayerQuantState& st = m.states[l];
        const LinearLayer& fpl = m.fp.layers[l];
        TapeLayer& tp = tape.layers[l];
        tp.x_in = cur;

        const bool has_act = !st.act_quant.empty();
        if (has_act) {
            const ActQuantParams& aq = st.act_quant[std::size_t(t - 1)];
            const double m_act = double((std::int64_t{1} << aq.bits) - 1);
            tp.a_state.assign(cur.size(), 0);
            tp.a_code.assign(cur.size(), 0.0);
            tp.a_q = Tensor2D(cur.rows, cur.cols);
            for (std::size_t r = 0; r < cur.rows; ++r)
                for (std::size_t c = 0; c < cur.cols; ++c) {
                    const std::size_t idx = r * cur.cols + c;
                    const double x = cur.at(r, c) * st.scaling.delta[c];
                    const double k = std::round(x / aq.step) + aq.zero;
                    if (k < 0.0) {
                        tp.a_state[idx] = 1;
                        tp.a_q.data[idx] = aq.step * (0.0 - aq.zero);
                    } else if (k > m_act) {
                        tp.a_state[idx] = 2;
                        tp.a_q.data[idx] = aq.step * (m_act - aq.zero);
                    } else {
                        tp.a_code[idx] = k - aq.zero;
                        tp.a_q.data[idx] = aq.step * tp.a_code[idx];
                    }
                }
        } else {
            tp.a_q = cur;
        }

        const std::size_t out_w = fpl.w.rows, in_w = fpl.w.cols;
        tp.w_state.assign(fpl.w.size(), 0);
        tp.w_code.assign(fpl.w.size(), 0.0);
        tp.g1.assign(fpl.w.size(), 0);
        tp.g2.assign(fpl.w.size(), 0);
        tp.v_rec = Tensor2D(out_w, in_w);
        tp.wq = Tensor2D(out_w, in_w);
        const bool adapt = st.has_adapter();
        for (std::size_t o = 0; o < out_w; ++o)
            for (std::size_t i = 0; i < in_w; ++i) {
                const std::size_t idx = o * in_w + i;
                double v = fpl.w.at(o, i);
                if (adapt) {
                    double acc = 0.0;
                    for (std::size_t kk = 0; kk < st.adapter_l1.cols; ++kk)
                        acc += st.adapter_l1.at(o, kk) * st.adapter_l2.at(kk, i);
                    v += acc;
                }
                v /= st.scaling.delta[i];
                tp.v_rec.data[idx] = v;
                const ResidualQuantizer& q = st.specs[i];
                const double s = q.base.step;
                const double z = double(q.base.zero_point);
                const double mw = double(q.base.max_code());
                const double k = std::round(v / s) + z;
                if (k < 0.0) {
                    tp.w_state[idx] = 1;
                    tp.w_code[idx] = 0.0 - z;
                } else if (k > mw) {
                    tp.w_state[idx] = 2;
                    tp.w_code[idx] = mw - z;
                } else {
                    tp.w_code[idx] = k - z;
                }
                double val = s * tp.w_code[idx];
                if (q.tiers >= 1) {
                    tp.g1[idx] = (v - val) < 0.0 ? -1 : 1;
                    val += q.delta_res * double(tp.g1[idx]);
                }
                if (q.tiers >= 2) {
                    tp.g2[idx] = (v - val) < 0.0 ? -1 : 1;
                    val += q.delta_res2 * double(tp.g2[idx]);
                }
                tp.wq.data[idx] = val;
            }

        tp.y = Tensor2D(cur.rows, out_w);
        for (std::size_t r = 0; r < cur.rows; ++r)
            for (std::size_t o = 0; o < out_w; ++o) {
                double acc = fpl.b[o];
                for (std::size_t c = 0; c < in_w; ++c) acc += tp.a_q.at(r, c) * tp.wq.at(o, c);
                tp.y.at(r, o) = acc;
            }
        if (l + 1 < n_layers) {
            tp.h = tp.y;
            for (double& v : tp.h.data) v = silu(v);
        } else {
            tp.h = tp.y;
        }
        cur = tp.h;
    }
    return tape;
}

double align_loss(const StudentTape& tape, const std::vector<Tensor2D>& fp_linear,
                  const QuantizedModel& m) {
    double acc = 0.0;
    for (std::size_t l = 0; l < tape.layers.size(); ++l)
        if (m.trainable[l]) acc += mean_sq_diff(tape.layers[l].y, fp_linear[l]);
    return acc;
}

std::span<const double> row_span(const Tensor2D& t, std::size_t r) {
    return std::span<const double>(t.data.data() + r * t.cols, t.cols);
}

// Replays the recorded decisions under a perturbed parameter vector. Smooth
// in p; equal to the recorded forward at the recording parameters.
double replay_loss(const QuantizedModel& m, const StudentTape& tape, const ParamLayout& lay,
                   const std::vector<Tensor2D>& fp_linear, const Tensor2D& fp_feat,
                   const ReferenceMatrix* ref, double alpha, double tau, RelationMetric metric,
                   std::span<const double> p) {
    const std::size_t n_layers = m.fp.layers.size();
    Tensor2D cur = tape.layers[0].h;
    double align = 0.0;
    if (m.trainable[0]) align += mean_sq_diff(tape.layers[0].y, fp_linear[0]);
    Tensor2D feat;
    for (std::size_t l = 1; l < n_layers; ++l) {
        const TapeLayer& tp = tape.layers[l];
        const LayerQuantState& st = m.states[l];
        const LinearLayer& fpl = m.fp.layers[l];
        const ParamLayout::Layer& e = lay.layers[l];

        Tensor2D a(cur.rows, cur.cols);
        if (!st.act_quant.empty()) {
            const ActQuantParams& aq0 = st.act_quant[std::size_t(tape.t - 1)];
            const std::size_t ti = std::size_t(tape.t - 1);
            const double s_a = e.act_s[ti] >= 0 ? p[std::size_t(e.act_s[ti])] : aq0.step;
            const double z_a = e.act_z[ti] >= 0 ? p[std::size_t(e.act_z[ti])] : aq0.zero;
            const double m_act = double((std::int64_t{1} << aq0.bits) - 1);
            for (std::size_t r = 0; r < cur.rows; ++r)
                for (std::size_t c = 0; c < cur.cols; ++c) {
                    const std::size_t idx = r * cur.cols + c;
                    switch (tp.a_state[idx]) {
                        case 1: a.data[idx] = s_a * (0.0 - z_a); break;
                        case 2: a.data[idx] = s_a * (m_act - z_a); break;
                        default:
                            a.data[idx] = s_a * tp.a_code[idx] +
                                          (cur.data[idx] * st.scaling.delta[c] -
                                           tp.x_in.data[idx] * st.scaling.delta[c]);
                    }
                }
        } else {
            a = cur;
        }

        const std::size_t out_w = fpl.w.rows, in_w = fpl.w.cols;
        Tensor2D wq(out_w, in_w);
        for (std::size_t o = 0; o < out_w; ++o)
            for (std::size_t i = 0; i < in_w; ++i) {
                const std::size_t idx = o * in_w + i;
                const ResidualQuantizer& q = st.specs[i];
                const double s = e.step[i] >= 0 ? p[std::size_t(e.step[i])] : q.base.step;
                double d1 = q.delta_res, d2 = q.delta_res2;
                if (q.mode == OpMode::joint && q.tiers >= 1) {
                    d1 = s / 2.0;
                    d2 = s / 4.0;
                } else {
                    if (e.d1[i] >= 0) d1 = p[std::size_t(e.d1[i])];
                    if (e.d2[i] >= 0) d2 = p[std::size_t(e.d2[i])];
                }
                double val = s * tp.w_code[idx];
                if (q.tiers >= 1) val += d1 * double(tp.g1[idx]);
                if (q.tiers >= 2) val += d2 * double(tp.g2[idx]);
                if (tp.w_state[idx] == 0) {
                    double v = fpl.w.at(o, i);
                    if (e.l1 >= 0) {
                        double acc = 0.0;
                        for (std::size_t kk = 0; kk < e.rank; ++kk)
                            acc += p[std::size_t(e.l1) + o * e.rank + kk] *
                                   p[std::size_t(e.l2) + kk * in_w + i];
                        v += acc;
                    } else if (st.has_adapter()) {
                        double acc = 0.0;
                        for (std::size_t kk = 0; kk < st.adapter_l1.cols; ++kk)
                            acc += st.adapter_l1.at(o, kk) * st.adapter_l2.at(kk, i);
                        v += acc;
                    }
                    v /= st.scaling.delta[i];
                    val += v - tp.v_rec.data[idx];
                }
                wq.data[idx] = val;
            }

        Tensor2D y(cur.rows, out_w);
        for (std::size_t r = 0; r < cur.rows; ++r)
            for (std::size_t o = 0; o < out_w; ++o) {
                double acc = fpl.b[o];
                for (std::size_t c = 0; c < in_w; ++c) acc += a.at(r, c) * wq.at(o, c);
                y.at(r, o) = acc;
            }
        if (m.trainable[l]) align += mean_sq_diff(y, fp_linear[l]);
        if (l + 1 < n_layers) {
            for (double& v : y.data) v = silu(v);
        }
        cur = std::move(y);
        if (l == n_layers - 2) feat = cur;
    }

    double mtrd = 0.0;
    if (ref != nullptr && alpha > 0.0) mtrd = mtrd_loss(*ref, fp_feat, feat, tau, metric);
    return total_loss(align, mtrd, alpha);
}

// Analytic gradient of the replay surrogate at the recording point.
void backward(const QuantizedModel& m, const StudentTape& tape, const ParamLayout& lay,
              const std::vector<Tensor2D>& fp_linear, const Tensor2D& fp_feat,
              const ReferenceMatrix* ref, double alpha, double tau, RelationMetric metric,
              std::span<const double> p, std::vector<double>& grad) {
    const std::size_t n_layers = m.fp.layers.size();
    std::vector<Tensor2D> dh(n_layers);

    if (ref != nullptr && alpha > 0.0) {
        const Tensor2D& feat = tape.layers[n_layers - 2].h;
        Tensor2D mg(feat.rows, feat.cols);
        const double scale = alpha / double(feat.rows);
        for (std::size_t r = 0; r < feat.rows; ++r) {
            const std::vector<double> g =
                mtrd_gradient(*ref, row_span(fp_feat, r), row_span(feat, r), tau, metric);
            for (std::size_t c = 0; c < feat.cols; ++c) mg.at(r, c) = scale * g[c];
        }
        dh[n_layers - 2] = std::move(mg);
    }

    for (std::size_t l = n_layers; l-- > 1;) {
        const TapeLayer& tp = tape.layers[l];
        const LayerQuantState& st = m.states[l];
        const LinearLayer& fpl = m.fp.layers[l];
        const ParamLayout::Layer& e = lay.layers[l];
        const std::size_t out_w = fpl.w.rows, in_w = fpl.w.cols;

        Tensor2D dy(tp.y.rows, tp.y.cols);
        if (m.trainable[l]) {
            const double inv = 2.0 / double(tp.y.size());
            for (std::size_t i = 0; i < dy.data.size(); ++i)
                dy.data[i] = inv * (tp.y.data[i] - fp_linear[l].data[i]);
        }
        if (l + 1 < n_layers && dh[l].size() > 0)
            for (std::size_t i = 0; i < dy.data.size(); ++i)
                dy.data[i] += dh[l].data[i] * silu_prime(tp.y.data[i]);

        for (std::size_t o = 0; o < out_w; ++o)
            for (std::size_t i = 0; i < in_w; ++i) {
                const std::size_t idx = o * in_w + i;
                double dwq = 0.0;
                for (std::size_t r = 0; r < dy.rows; ++r)
                    dwq += dy.at(r, o) * tp.a_q.at(r, i);
                if (dwq == 0.0) continue;
                const ResidualQuantizer& q = st.specs[i];
                if (e.step[i] >= 0) {
                    double ds = tp.w_code[idx];
                    if (q.mode == OpMode::joint && q.tiers >= 1) {
                        ds += double(tp.g1[idx]) / 2.0;
                        if (q.tiers >= 2) ds += double(tp.g2[idx]) / 4.0;
                    }
                    grad[std::size_t(e.step[i])] += dwq * ds;
                }
                if (e.d1[i] >= 0) grad[std::size_t(e.d1[i])] += dwq * double(tp.g1[idx]);
                if (e.d2[i] >= 0) grad[std::size_t(e.d2[i])] += dwq * double(tp.g2[idx]);
                if (tp.w_state[idx] == 0 && e.l1 >= 0) {
                    const double dv = dwq / st.scaling.delta[i];
                    for (std::size_t kk = 0; kk < e.rank; ++kk) {
                        grad[std::size_t(e.l1) + o * e.rank + kk] +=
                            dv * p[std::size_t(e.l2) + kk * in_w + i];
                        grad[std::size_t(e.l2) + kk * in_w + i] +=
                            dv * p[std::size_t(e.l1) + o * e.rank + kk];
                    }
                }
            }

        Tensor2D dx(tp.x_in.rows, tp.x_in.cols);
        const bool has_act = !st.act_quant.empty();
        const ActQuantParams* aq = has_act ? &st.act_quant[std::size_t(tape.t - 1)] : nullptr;
        const std::size_t ti = std::size_t(tape.t - 1);
        const double m_act = has_act ? double((std::int64_t{1} << aq->bits) - 1) : 0.0;
        for (std::size_t r = 0; r < dy.rows; ++r)
            for (std::size_t i = 0; i < in_w; ++i) {
                double daq = 0.0;
                for (std::size_t o = 0; o < out_w; ++o) daq += dy.at(r, o) * tp.wq.at(o, i);
                if (!has_act) {
                    dx.at(r, i) = daq;
                    continue;
                }
                const std::size_t idx = r * in_w + i;
                switch (tp.a_state[idx]) {
                    case 1:
                        if (e.act_s[ti] >= 0) grad[std::size_t(e.act_s[ti])] += daq * (0.0 - aq->zero);
                        if (e.act_z[ti] >= 0) grad[std::size_t(e.act_z[ti])] += daq * (-aq->step);
                        break;
                    case 2:
                        if (e.act_s[ti] >= 0)
                            grad[std::size_t(e.act_s[ti])] += daq * (m_act - aq->zero);
                        if (e.act_z[ti] >= 0) grad[std::size_t(e.act_z[ti])] += daq * (-aq->step);
                        break;
                    default:
                        if (e.act_s[ti] >= 0) grad[std::size_t(e.act_s[ti])] += daq * tp.a_code[idx];
                        dx.at(r, i) = daq * st.scaling.delta[i];
                }
            }
        if (l > 1) {
            if (dh[l - 1].size() == 0)
                dh[l - 1] = std::move(dx);
            else
                for (std::size_t i = 0; i < dx.data.size(); ++i) dh[l - 1].data[i] += dx.data[i];
        }
    }
}

}  // namespace

TrainState finetune(const ToyDiffusionModel& teacher, QuantizedModel student,
                    const FinetuneConfig& cfg, std::uint64_t seed) {
    const std::size_t n_layers = student.fp.layers.size();
    if (n_layers < 2 || teacher.layers.size() != n_layers)
        throw std::invalid_argument("finetune: teacher and student layer counts must match");
    if (teacher.schedule.steps() != student.fp.schedule.steps())
        throw std::invalid_argument("finetune: schedule lengths must match");
    if (cfg.iters < 0 || cfg.batch < 1) throw std::invalid_argument("finetune: bad loop sizes");
    if (!(cfg.tau > 0.0) || cfg.alpha < 0.0)
        throw std::invalid_argument("finetune: tau must be positive and alpha nonnegative");
    if (cfg.push_n < 1 || cfg.push_n > cfg.batch)
        throw std::invalid_argument("finetune: push_n must lie in [1, batch]");
    if (cfg.sample_k < 1 || cfg.queue_capacity < 1)
        throw std::invalid_argument("finetune: sample_k and queue_capacity must be positive");

    const int t_count = teacher.schedule.steps();
    const std::size_t feat_dim = student.fp.layers[n_layers - 2].w.rows;
    TrainState ts{std::move(student), TemporalMemory(t_count, feat_dim, cfg.queue_capacity),
                  {}, {}, 0};
    QuantizedModel& model = ts.model;

    const ParamLayout lay = build_layout(model);
    std::vector<double> params = pack_params(model, lay);
    std::vector<double> moments(params.size(), 0.0);
    std::vector<double> grad(params.size(), 0.0);

    // Step-size gradients sum code-weighted contributions from every element
    // sharing the parameter, so they are rescaled by 1 / sqrt(N * Qmax)
    // before the momentum update, as in learned-step-size quantization.
    // Adapter gradients pass through unscaled.
    std::vector<double> gscale(params.size(), 1.0);
    for (std::size_t l = 0; l < model.states.size(); ++l) {
        const ParamLayout::Layer& e = lay.layers[l];
        const std::size_t out_w = model.fp.layers[l].w.rows;
        const std::size_t in_w = model.fp.layers[l].w.cols;
        for (std::size_t i = 0; i < e.step.size(); ++i) {
            if (e.step[i] >= 0)
                gscale[std::size_t(e.step[i])] =
                    1.0 / std::sqrt(double(out_w) *
                                    double(model.states[l].specs[i].base.max_code()));
            if (e.d1[i] >= 0) gscale[std::size_t(e.d1[i])] = 1.0 / std::sqrt(double(out_w));
            if (e.d2[i] >= 0) gscale[std::size_t(e.d2[i])] = 1.0 / std::sqrt(double(out_w));
        }
        for (std::size_t t = 0; t < e.act_s.size(); ++t) {
            const double m_act =
                double((std::int64_t{1} << model.states[l].act_quant[t].bits) - 1);
            const double s = 1.0 / std::sqrt(double(cfg.batch) * double(in_w) * m_act);
            if (e.act_s[t] >= 0) gscale[std::size_t(e.act_s[t])] = s;
            if (e.act_z[t] >= 0) gscale[std::size_t(e.act_z[t])] = s;
        }
    }

    Rng root(seed);
    Rng data = root.split(201);
    Rng noise = root.split(202);
    Rng tpick = root.split(203);
    Rng mem_rng = root.split(204);
    Rng ref_rng = root.split(205);

    char line[192];
    for (int it = 0; it < cfg.iters; ++it) {
        const int t = 1 + int(tpick.below(std::uint64_t(t_count)));
        const Tensor2D x0 = sample_dataset(cfg.dataset, cfg.batch, data);
        Tensor2D eps(cfg.batch, 2);
        for (double& v : eps.data) v = noise.normal();
        const Tensor2D x_t = noised(x0, teacher.schedule, t, eps);

        const ForwardTrace fp = forward_trace(teacher, x_t, t);
        const Tensor2D& fp_feat = fp.inputs[n_layers - 1];
        ts.memory.push(t, fp_feat, cfg.push_n, mem_rng);

        std::optional<ReferenceMatrix> ref;
        if (cfg.alpha > 0.0 && ts.memory.warm())
            ref = build_reference(ts.memory, cfg.sample_k, ref_rng);

        const StudentTape tape = record_tape(model, fp.inputs[0], t);
        const double align = align_loss(tape, fp.linear, model);
        const double mtrd =
            ref ? mtrd_loss(*ref, fp_feat, tape.layers[n_layers - 2].h, cfg.tau, cfg.metric) : 0.0;
        const double tot = total_loss(align, mtrd, cfg.alpha);
        if (!std::isfinite(tot))
            throw NumericError("finetune: non-finite loss at iteration " + std::to_string(it) +
                               "\n" + ts.memory.debug_summary());
        ts.loss_history.push_back(tot);

        double fill = 0.0;
        for (int tt = 1; tt <= t_count; ++tt) fill += double(ts.memory.queue_size(tt));
        fill /= double(t_count) * double(cfg.queue_capacity);
        std::snprintf(line, sizeof(line), "%d\t%d\t%.9g\t%.9g\t%.9g\t%.4f", it, t, align, mtrd,
                      tot, fill);
        ts.log_lines.push_back(line);

        std::fill(grad.begin(), grad.end(), 0.0);
        backward(model, tape, lay, fp.linear, fp_feat, ref ? &*ref : nullptr, cfg.alpha, cfg.tau,
                 cfg.metric, params, grad);

        for (std::size_t j = 0; j < params.size(); ++j) {
            moments[j] = cfg.momentum * moments[j] + grad[j] * gscale[j];
            const double lr = lay.kind[j] == 0 ? cfg.lr_adapter : cfg.lr_steps;
            params[j] -= lr * moments[j];
            if (lay.kind[j] == 1 || lay.kind[j] == 3) params[j] = std::max(params[j], 1e-8);
            if (lay.kind[j] == 2) params[j] = std::max(params[j], 0.0);
        }
        apply_params(model, lay, params);
    }
    ts.iterations = cfg.iters;
    return ts;
}

SteProbe make_ste_probe(const ToyDiffusionModel& teacher, const QuantizedModel& student,
                        const FinetuneConfig& cfg, const Tensor2D& x_t, int t,
                        const ReferenceMatrix* ref) {
    const std::size_t n_layers = student.fp.layers.size();
    const ForwardTrace fp = forward_trace(teacher, x_t, t);

    struct Ctx {
        QuantizedModel model;
        StudentTape tape;
        ParamLayout lay;
        std::vector<Tensor2D> fp_linear;
        Tensor2D fp_feat;
        std::optional<ReferenceMatrix> ref;
        double alpha, tau;
        RelationMetric metric;
    };
    auto ctx = std::make_shared<Ctx>();
    ctx->model = student;
    ctx->tape = record_tape(student, fp.inputs[0], t);
    ctx->lay = build_layout(student);
    ctx->fp_linear = fp.linear;
    ctx->fp_feat = fp.inputs[n_layers - 1];
    if (ref != nullptr) ctx->ref = *ref;
    ctx->alpha = cfg.alpha;
    ctx->tau = cfg.tau;
    ctx->metric = cfg.metric;

    SteProbe pr;
    pr.params = pack_params(student, ctx->lay);
    const double align = align_loss(ctx->tape, ctx->fp_linear, student);
    const double mtrd = ctx->ref && cfg.alpha > 0.0
                            ? mtrd_loss(*ctx->ref, ctx->fp_feat,
                                        ctx->tape.layers[n_layers - 2].h, cfg.tau, cfg.metric)
                            : 0.0;
    pr.loss = total_loss(align, mtrd, cfg.alpha);
    pr.grad.assign(pr.params.size(), 0.0);
    backward(student, ctx->tape, ctx->lay, ctx->fp_linear, ctx->fp_feat,
             ctx->ref ? &*ctx->ref : nullptr, cfg.alpha, cfg.tau, cfg.metric, pr.params, pr.grad);
    pr.loss_at = [ctx](std::span<const double> p) {
        return replay_loss(ctx->model, ctx->tape, ctx->lay, ctx->fp_linear, ctx->fp_feat,
                           ctx->ref ? &*ctx->ref : nullptr, ctx->alpha, ctx->tau, ctx->metric, p);
    };
    return pr;
}

}  // namespace mpqdm2
