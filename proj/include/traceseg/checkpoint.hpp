#pragma once

// Checkpoint file format (all integers little-endian, tensors row-major f32):
//
//   8 bytes   magic "TSEGNET1"
//   u32       format version (currently 1)
//   u32       config text length, then that many bytes of canonical
//             key = value lines describing the model configuration
//   u64       model step counter
//   u32       parameter count, then per parameter, sorted by name:
//               u32 name length, name bytes,
//               u32 rank, u32 dims[rank],
//               f32 values (row-major)
//   u32       buffer count, then the same record layout for the batch-norm
//             running statistics
//   u8        optimizer-state flag; when 1:
//               u64 optimizer step, then per parameter in the same sorted
//               order: f32 first-moment values, f32 second-moment values
//
// Saving, loading, and saving again produces byte-identical files.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "traceseg/network.hpp"
#include "traceseg/optim.hpp"

namespace traceseg {

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'E', 'G', 'N', 'E', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct ByteWriter {
    std::ofstream out;
    explicit ByteWriter(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw DataError("cannot open '" + path + "' for writing");
    }
    void bytes(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out) throw DataError("checkpoint write failed");
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    template <typename T>
    void tensor_f32(const Tensor<T>& t) {
        std::vector<float> tmp(t.numel());
        for (std::size_t i = 0; i < t.numel(); ++i) tmp[i] = static_cast<float>(t.ptr()[i]);
        bytes(tmp.data(), tmp.size() * 4);
    }
};

struct ByteReader {
    std::ifstream in;
    explicit ByteReader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    }
    void bytes(void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw DataError("checkpoint truncated");
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::string str(std::uint32_t max_len = 1u << 20) {
        const std::uint32_t n = u32();
        if (n > max_len) throw DataError("checkpoint string length out of range");
        std::string s(n, '\0');
        if (n) bytes(s.data(), n);
        return s;
    }
    template <typename T>
    Tensor<T> tensor_f32(const Shape& expect) {
        Tensor<T> t(expect);
        std::vector<float> tmp(t.numel());
        bytes(tmp.data(), tmp.size() * 4);
        for (std::size_t i = 0; i < t.numel(); ++i) t.ptr()[i] = static_cast<T>(tmp[i]);
        return t;
    }
};

template <typename T>
void write_records(ByteWriter& w, const std::map<std::string, Tensor<T>>& m) {
    w.u32(static_cast<std::uint32_t>(m.size()));
    for (const auto& [name, t] : m) {  // std::map iterates sorted by name
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) w.u32(static_cast<std::uint32_t>(t.dim(d)));
        w.tensor_f32(t);
    }
}

template <typename T>
void read_records(ByteReader& r, std::map<std::string, Tensor<T>>& dst, const char* what) {
    const std::uint32_t count = r.u32();
    std::map<std::string, Tensor<T>> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw DataError("checkpoint tensor rank out of range for '" + name + "'");
        Shape shape;
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t v = r.u32();
            if (v == 0 || v > (1u << 28)) throw DataError("checkpoint dimension out of range");
            shape.push_back(static_cast<int>(v));
            numel *= v;
        }
        if (numel > (1ull << 31)) throw DataError("checkpoint tensor too large");
        const auto it = dst.find(name);
        if (it == dst.end())
            throw DataError(std::string("checkpoint contains unknown ") + what + " '" + name +
                            "'");
        if (it->second.shape != shape)
            throw DataError(std::string("checkpoint ") + what + " '" + name +
                            "' has shape " + shape_str(shape) + ", expected " +
                            shape_str(it->second.shape));
        if (seen.count(name))
            throw DataError(std::string("checkpoint repeats ") + what + " '" + name + "'");
        seen.emplace(name, r.tensor_f32<T>(shape));
    }
    if (seen.size() != dst.size())
        throw DataError(std::string("checkpoint is missing ") + what + " entries: has " +
                        std::to_string(seen.size()) + ", model needs " +
                        std::to_string(dst.size()));
    for (auto& [name, t] : seen) dst.at(name) = std::move(t);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path,
                     const OptState<T>* opt = nullptr) {
    detail::ByteWriter w(path);
    w.bytes(kCheckpointMagic, 8);
    w.u32(kCheckpointVersion);
    w.str(serialize_kv(model_config_to_map(model.cfg)));
    w.u64(model.step);
    detail::write_records(w, model.params);
    detail::write_records(w, model.buffers);
    const std::uint8_t has_opt = opt != nullptr ? 1 : 0;
    w.bytes(&has_opt, 1);
    if (opt) {
        w.u64(opt->t);
        for (const auto& [name, p] : model.params) {
            const auto mit = opt->m.find(name), vit = opt->v.find(name);
            Tensor<T> zero;
            const Tensor<T>& m = mit != opt->m.end() ? mit->second : (zero = Tensor<T>::zeros(p.shape));
            w.tensor_f32(m);
            const Tensor<T>& v = vit != opt->v.end() ? vit->second : (zero = Tensor<T>::zeros(p.shape));
            w.tensor_f32(v);
        }
    }
    w.out.close();
    if (!w.out) throw DataError("checkpoint write failed on close");
}

template <typename T>
Model<T> load_checkpoint(const std::string& path, OptState<T>* opt = nullptr) {
    detail::ByteReader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("'" + path + "' is not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint format version " + std::to_string(version));

    const std::string cfg_text = r.str();
    const ModelConfig cfg = model_config_from_map(parse_kv_text(cfg_text));
    Model<T> model(cfg, 0);
    model.step = r.u64();
    detail::read_records(r, model.params, "parameter");
    detail::read_records(r, model.buffers, "buffer");

    std::uint8_t has_opt = 0;
    r.bytes(&has_opt, 1);
    if (has_opt > 1) throw DataError("checkpoint optimizer flag out of range");
    if (has_opt) {
        OptState<T> st;
        st.t = r.u64();
        for (const auto& [name, p] : model.params) {
            st.m.emplace(name, r.tensor_f32<T>(p.shape));
            st.v.emplace(name, r.tensor_f32<T>(p.shape));
        }
        if (opt) *opt = std::move(st);
    } else if (opt) {
        *opt = OptState<T>{};
    }
    return model;
}

}  // namespace traceseg
