#include "mpqdm2/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <vector>

#include "mpqdm2/errors.hpp"

namespace mpqdm2 {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'P', 'Q', '2'};

constexpr const char* kTagFpWeights = "FP_WEIGHTS";
constexpr const char* kTagQuantState = "QUANT_STATE";
constexpr const char* kTagAdapters = "ADAPTERS";
constexpr const char* kTagActQuant = "ACT_QUANT";
constexpr const char* kTagSchedule = "SCHEDULE";

void put_u8(std::ostream& os, std::uint8_t v) {
    os.write(reinterpret_cast<const char*>(&v), 1);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}

void put_i32(std::ostream& os, std::int64_t v) {
    if (v < std::numeric_limits<std::int32_t>::min() ||
        v > std::numeric_limits<std::int32_t>::max())
        throw FormatError("zero point out of i32 range");
    const std::int32_t n = static_cast<std::int32_t>(v);
    os.write(reinterpret_cast<const char*>(&n), 4);
}

void put_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}

struct Reader {
    std::istream& is;
    const char* what;

    void bytes(void* dst, std::size_t n) {
        is.read(static_cast<char*>(dst), std::streamsize(n));
        if (!is) throw FormatError(std::string("checkpoint truncated in ") + what);
    }
    std::uint8_t u8() {
        std::uint8_t v = 0;
        bytes(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        bytes(&v, 8);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v = 0;
        bytes(&v, 4);
        return v;
    }
    double f64() {
        double v = 0;
        bytes(&v, 8);
        return v;
    }
};

void begin_section(std::ostream& os, const char* tag, const std::string& payload) {
    const std::size_t len = std::strlen(tag);
    put_u8(os, static_cast<std::uint8_t>(len));
    os.write(tag, std::streamsize(len));
    put_u64(os, payload.size());
    os.write(payload.data(), std::streamsize(payload.size()));
    if (!os) throw FormatError("checkpoint write failed");
}

std::string fp_weights_payload(const ToyDiffusionModel& m) {
    std::ostringstream os(std::ios::binary);
    put_u32(os, static_cast<std::uint32_t>(m.layers.size()));
    put_u32(os, static_cast<std::uint32_t>(m.temb_dim));
    put_u32(os, static_cast<std::uint32_t>(m.data_dim));
    for (const LinearLayer& l : m.layers) {
        write_t2d(os, l.w);
        put_u32(os, static_cast<std::uint32_t>(l.b.size()));
        for (double b : l.b) put_f64(os, b);
    }
    return std::move(os).str();
}

std::string schedule_payload(const NoiseSchedule& s) {
    std::ostringstream os(std::ios::binary);
    put_u32(os, static_cast<std::uint32_t>(s.betas.size()));
    for (double b : s.betas) put_f64(os, b);
    return std::move(os).str();
}

// Per channel: scaling delta, total bits (u8), a mode byte with the separate
// flag in bit 0 and the tier count in bits 4-5, base step, zero point, then
// one tier delta per active tier.
std::string quant_state_payload(const QuantizedModel& qm) {
    std::ostringstream os(std::ios::binary);
    put_u32(os, static_cast<std::uint32_t>(qm.states.size()));
    for (std::size_t l = 0; l < qm.states.size(); ++l) {
        const LayerQuantState& st = qm.states[l];
        put_u8(os, static_cast<std::uint8_t>(qm.trainable[l] ? 1 : 0));
        put_u32(os, static_cast<std::uint32_t>(st.specs.size()));
        for (std::size_t i = 0; i < st.specs.size(); ++i) {
            const ResidualQuantizer& q = st.specs[i];
            put_f64(os, st.scaling.delta[i]);
            put_u8(os, static_cast<std::uint8_t>(q.total_bits()));
            const std::uint8_t mode_byte = static_cast<std::uint8_t>(
                (q.mode == OpMode::separate ? 1u : 0u) | (std::uint32_t(q.tiers) << 4));
            put_u8(os, mode_byte);
            put_f64(os, q.base.step);
            put_i32(os, q.base.zero_point);
            if (q.tiers >= 1) put_f64(os, q.delta_res);
            if (q.tiers >= 2) put_f64(os, q.delta_res2);
        }
    }
    return std::move(os).str();
}

std::string adapters_payload(const QuantizedModel& qm) {
    std::ostringstream os(std::ios::binary);
    put_u32(os, static_cast<std::uint32_t>(qm.states.size()));
    for (const LayerQuantState& st : qm.states) {
        put_u8(os, st.has_adapter() ? 1 : 0);
        if (!st.has_adapter()) continue;
        put_u32(os, static_cast<std::uint32_t>(st.adapter_l1.cols));
        write_t2d(os, st.adapter_l1);
        write_t2d(os, st.adapter_l2);
        put_f64(os, st.adapter_norm_before);
        put_f64(os, st.adapter_norm_after);
    }
    return std::move(os).str();
}

std::string act_quant_payload(const QuantizedModel& qm) {
    std::ostringstream os(std::ios::binary);
    put_u32(os, static_cast<std::uint32_t>(qm.states.size()));
    for (const LayerQuantState& st : qm.states) {
        put_u32(os, static_cast<std::uint32_t>(st.act_quant.size()));
        for (const ActQuantParams& aq : st.act_quant) {
            put_u8(os, static_cast<std::uint8_t>(aq.bits));
            put_f64(os, aq.step);
            put_f64(os, aq.zero);
        }
    }
    return std::move(os).str();
}

void parse_fp_weights(Reader& r, ToyDiffusionModel& m) {
    const std::uint32_t n_layers = r.u32();
    m.temb_dim = int(r.u32());
    m.data_dim = int(r.u32());
    if (n_layers == 0 || n_layers > 1024) throw FormatError("implausible layer count");
    m.layers.clear();
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        LinearLayer lay;
        lay.w = read_t2d(r.is);
        const std::uint32_t blen = r.u32();
        if (blen != lay.w.rows) throw FormatError("bias length does not match weight rows");
        lay.b.resize(blen);
        for (std::uint32_t i = 0; i < blen; ++i) lay.b[i] = r.f64();
        m.layers.push_back(std::move(lay));
    }
}

void parse_schedule(Reader& r, NoiseSchedule& s) {
    const std::uint32_t t_count = r.u32();
    if (t_count == 0 || t_count > 100000) throw FormatError("implausible schedule length");
    s.betas.resize(t_count);
    s.alpha_bars.resize(t_count);
    double prod = 1.0;
    for (std::uint32_t i = 0; i < t_count; ++i) {
        s.betas[i] = r.f64();
        if (!(s.betas[i] > 0.0) || !(s.betas[i] < 1.0))
            throw FormatError("schedule beta outside (0, 1)");
        prod *= 1.0 - s.betas[i];
        s.alpha_bars[i] = prod;
    }
}

void parse_quant_state(Reader& r, QuantizedModel& qm) {
    const std::uint32_t n_layers = r.u32();
    qm.states.assign(n_layers, LayerQuantState{});
    qm.trainable.assign(n_layers, 0);
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        const std::uint8_t trainable = r.u8();
        if (trainable > 1) throw FormatError("trainable flag must be 0 or 1");
        qm.trainable[l] = char(trainable);
        const std::uint32_t n_ch = r.u32();
        if (n_ch == 0 || n_ch > (1u << 20)) throw FormatError("implausible channel count");
        LayerQuantState& st = qm.states[l];
        st.scaling.delta.resize(n_ch);
        st.bit_alloc.resize(n_ch);
        st.specs.resize(n_ch);
        for (std::uint32_t i = 0; i < n_ch; ++i) {
            st.scaling.delta[i] = r.f64();
            const std::uint8_t total_bits = r.u8();
            const std::uint8_t mode_byte = r.u8();
            if (mode_byte & ~0x31u) throw FormatError("unknown bits set in quantizer mode");
            const int tiers = int((mode_byte >> 4) & 0x3u);
            if (tiers > 2) throw FormatError("quantizer tier count above 2");
            if (int(total_bits) - tiers < 1 || total_bits > 16)
                throw FormatError("quantizer bit layout out of range");
            ResidualQuantizer& q = st.specs[i];
            q.mode = (mode_byte & 1u) ? OpMode::separate : OpMode::joint;
            q.tiers = tiers;
            q.base.bits = int(total_bits) - tiers;
            q.base.step = r.f64();
            q.base.zero_point = r.i32();
            if (!(q.base.step > 0.0)) throw FormatError("quantizer step must be positive");
            // The calibration extremes are not stored; reconstruct the
            // representable clip window instead.
            q.base.lower = q.base.value(0);
            q.base.upper = q.base.value(q.base.max_code());
            q.delta_res = tiers >= 1 ? r.f64() : 0.0;
            q.delta_res2 = tiers >= 2 ? r.f64() : 0.0;
            st.bit_alloc[i] = int(total_bits);
        }
    }
}

void parse_adapters(Reader& r, QuantizedModel& qm) {
    const std::uint32_t n_layers = r.u32();
    if (qm.states.empty() || n_layers != qm.states.size())
        throw FormatError("adapter section requires a matching quantizer section first");
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        const std::uint8_t present = r.u8();
        if (present > 1) throw FormatError("adapter presence flag must be 0 or 1");
        if (!present) continue;
        LayerQuantState& st = qm.states[l];
        const std::uint32_t rank = r.u32();
        st.adapter_l1 = read_t2d(r.is);
        st.adapter_l2 = read_t2d(r.is);
        st.adapter_norm_before = r.f64();
        st.adapter_norm_after = r.f64();
        if (st.adapter_l1.cols != rank || st.adapter_l2.rows != rank)
            throw FormatError("adapter rank does not match factor shapes");
        if (st.adapter_l2.cols != st.specs.size())
            throw FormatError("adapter width does not match channel count");
    }
}

void parse_act_quant(Reader& r, QuantizedModel& qm) {
    const std::uint32_t n_layers = r.u32();
    if (qm.states.empty() || n_layers != qm.states.size())
        throw FormatError("activation section requires a matching quantizer section first");
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        const std::uint32_t count = r.u32();
        if (count > 100000) throw FormatError("implausible activation quantizer count");
        qm.states[l].act_quant.resize(count);
        for (std::uint32_t t = 0; t < count; ++t) {
            ActQuantParams& aq = qm.states[l].act_quant[t];
            aq.bits = int(r.u8());
            aq.step = r.f64();
            aq.zero = r.f64();
            if (aq.bits < 1 || aq.bits > 16 || !(aq.step > 0.0))
                throw FormatError("activation quantizer out of range");
        }
    }
}

void write_header(std::ostream& os) {
    os.write(kMagic, 4);
    put_u32(os, kCheckpointVersion);
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t teacher_hash(const ToyDiffusionModel& m) {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](const double* v, std::size_t n) {
        const auto* p = reinterpret_cast<const unsigned char*>(v);
        for (std::size_t i = 0; i < n * sizeof(double); ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    for (const LinearLayer& l : m.layers) {
        mix(l.w.data.data(), l.w.data.size());
        mix(l.b.data(), l.b.size());
    }
    return h;
}

void write_checkpoint(std::ostream& os, const ToyDiffusionModel& fp) {
    write_header(os);
    begin_section(os, kTagFpWeights, fp_weights_payload(fp));
    begin_section(os, kTagSchedule, schedule_payload(fp.schedule));
}

void write_checkpoint(std::ostream& os, const QuantizedModel& model) {
    if (model.states.size() != model.fp.layers.size() ||
        model.trainable.size() != model.fp.layers.size())
        throw FormatError("quantized model has inconsistent layer counts");
    write_header(os);
    begin_section(os, kTagFpWeights, fp_weights_payload(model.fp));
    begin_section(os, kTagSchedule, schedule_payload(model.fp.schedule));
    begin_section(os, kTagQuantState, quant_state_payload(model));
    begin_section(os, kTagAdapters, adapters_payload(model));
    begin_section(os, kTagActQuant, act_quant_payload(model));
}

Checkpoint read_checkpoint(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad checkpoint magic, expected MPQ2");
    Reader hr{is, "header"};
    const std::uint32_t version = hr.u32();
    if ((version >> 16) > (kCheckpointVersion >> 16))
        throw FormatError("checkpoint major version newer than this reader");

    Checkpoint cp;
    bool saw_fp = false, saw_sched = false, saw_quant = false, saw_adapt = false,
         saw_act = false;
    while (true) {
        const int probe = is.peek();
        if (probe == std::char_traits<char>::eof()) break;
        Reader r{is, "section header"};
        const std::uint8_t tag_len = r.u8();
        std::string tag(tag_len, '\0');
        r.bytes(tag.data(), tag_len);
        const std::uint64_t size = r.u64();
        const std::streampos start = is.tellg();
        r.what = "section payload";

        auto mark = [&](bool& flag) {
            if (flag) throw FormatError("duplicate checkpoint section " + tag);
            flag = true;
        };
        if (tag == kTagFpWeights) {
            mark(saw_fp);
            parse_fp_weights(r, cp.fp);
        } else if (tag == kTagSchedule) {
            mark(saw_sched);
            parse_schedule(r, cp.fp.schedule);
        } else if (tag == kTagQuantState) {
            mark(saw_quant);
            parse_quant_state(r, cp.model);
        } else if (tag == kTagAdapters) {
            mark(saw_adapt);
            parse_adapters(r, cp.model);
        } else if (tag == kTagActQuant) {
            mark(saw_act);
            parse_act_quant(r, cp.model);
        } else {
            is.ignore(std::streamsize(size));
            if (std::uint64_t(is.gcount()) != size)
                throw FormatError("checkpoint truncated in unknown section");
            continue;
        }
        const std::streampos end = is.tellg();
        if (std::uint64_t(end - start) != size)
            throw FormatError("section size mismatch in " + tag);
    }
    if (!saw_fp || !saw_sched)
        throw FormatError("checkpoint missing required sections");
    if (saw_quant != saw_adapt || saw_quant != saw_act)
        throw FormatError("quantized sections must appear together");

    if (saw_quant) {
        cp.quantized = true;
        if (cp.model.states.size() != cp.fp.layers.size())
            throw FormatError("quantized state layer count mismatch");
        for (std::size_t l = 0; l < cp.model.states.size(); ++l) {
            const LayerQuantState& st = cp.model.states[l];
            if (st.specs.size() != cp.fp.layers[l].w.cols)
                throw FormatError("quantized channel count mismatch");
            if (st.has_adapter() && st.adapter_l1.rows != cp.fp.layers[l].w.rows)
                throw FormatError("adapter height does not match weight rows");
        }
        cp.model.fp = cp.fp;
    }
    return cp;
}

void save_checkpoint(const std::string& path, const ToyDiffusionModel& fp) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    write_checkpoint(os, fp);
    if (!os.flush()) throw FormatError("write failed: " + path);
}

void save_checkpoint(const std::string& path, const QuantizedModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    write_checkpoint(os, model);
    if (!os.flush()) throw FormatError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    return read_checkpoint(is);
}

}  // namespace mpqdm2
