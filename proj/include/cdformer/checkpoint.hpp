// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint container: named float32 parameter groups, Adam
// state, stage/step counters and the architecture hash guard. No
// timestamps, so identical training runs produce identical bytes.
#ifndef CDFORMER_CHECKPOINT_HPP
#define CDFORMER_CHECKPOINT_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cdformer/config.hpp"
#include "cdformer/nn.hpp"

namespace cdformer {

struct Checkpoint {
    static constexpr uint32_t kMagic = 0x43464443; // "CDFC"
    static constexpr uint32_t kVersion = 1;

    uint64_t arch = 0;
    int32_t stage = 0; // highest completed/active training stage
    int64_t epoch = 0;
    int64_t step = 0;
    std::string model_json;
    std::string train_json;
    std::vector<std::pair<std::string, Tensor<float>>> params; // insertion order preserved
    bool has_optimizer = false;
    int64_t adam_t = 0;
    std::vector<Tensor<float>> adam_m, adam_v; // parallel to params

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
    write_pod<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
    const auto n = read_pod<uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw IoError("checkpoint: truncated string");
    return s;
}

inline void write_tensor(std::ostream& os, const Tensor<float>& t) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_pod<int32_t>(os, t.dim(i));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

inline Tensor<float> read_tensor(std::istream& is) {
    const auto rank = read_pod<uint32_t>(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = read_pod<int32_t>(is);
    Tensor<float> t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is) throw IoError("checkpoint: truncated tensor");
    return t;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    detail::write_pod(os, Checkpoint::kMagic);
    detail::write_pod(os, Checkpoint::kVersion);
    detail::write_pod(os, ck.arch);
    detail::write_pod(os, ck.stage);
    detail::write_pod(os, ck.epoch);
    detail::write_pod(os, ck.step);
    detail::write_str(os, ck.model_json);
    detail::write_str(os, ck.train_json);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(ck.params.size()));
    for (const auto& [name, t] : ck.params) {
        detail::write_str(os, name);
        detail::write_tensor(os, t);
    }
    detail::write_pod<uint8_t>(os, ck.has_optimizer ? 1 : 0);
    if (ck.has_optimizer) {
        detail::write_pod(os, ck.adam_t);
        for (const auto& t : ck.adam_m) detail::write_tensor(os, t);
        for (const auto& t : ck.adam_v) detail::write_tensor(os, t);
    }
    if (!os) throw IoError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    Checkpoint ck;
    if (detail::read_pod<uint32_t>(is) != Checkpoint::kMagic)
        throw IoError("not a checkpoint file: " + path);
    if (detail::read_pod<uint32_t>(is) != Checkpoint::kVersion)
        throw IoError("unsupported checkpoint version: " + path);
    ck.arch = detail::read_pod<uint64_t>(is);
    ck.stage = detail::read_pod<int32_t>(is);
    ck.epoch = detail::read_pod<int64_t>(is);
    ck.step = detail::read_pod<int64_t>(is);
    ck.model_json = detail::read_str(is);
    ck.train_json = detail::read_str(is);
    const auto n = detail::read_pod<uint32_t>(is);
    for (uint32_t i = 0; i < n; ++i) {
        auto name = detail::read_str(is);
        ck.params.emplace_back(std::move(name), detail::read_tensor(is));
    }
    ck.has_optimizer = detail::read_pod<uint8_t>(is) != 0;
    if (ck.has_optimizer) {
        ck.adam_t = detail::read_pod<int64_t>(is);
        ck.adam_m.reserve(n);
        for (uint32_t i = 0; i < n; ++i) ck.adam_m.push_back(detail::read_tensor(is));
        ck.adam_v.reserve(n);
        for (uint32_t i = 0; i < n; ++i) ck.adam_v.push_back(detail::read_tensor(is));
    }
    return ck;
}

/// Model config stored inside a checkpoint, revalidated.
inline ModelConfig checkpoint_model_config(const Checkpoint& ck) {
    std::vector<std::string> errs;
    auto cfg = model_from_json(nlohmann::json::parse(ck.model_json), errs);
    if (!errs.empty()) throw IoError("checkpoint carries an invalid model config");
    return cfg;
}

template <typename T>
void params_to_checkpoint(const nn::ParamList<T>& params, Checkpoint& ck) {
    for (const auto& [name, p] : params) {
        Tensor<float> t(p->value.shape());
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(p->value[i]);
        ck.params.emplace_back(name, std::move(t));
    }
}

/// Load named tensors into live parameters; every parameter must be present
/// with a matching shape.
template <typename T>
void params_from_checkpoint(const Checkpoint& ck, nn::ParamList<T>& params) {
    for (auto& [name, p] : params) {
        const Tensor<float>* src = ck.find(name);
        if (!src) throw IoError("checkpoint missing parameter: " + name);
        if (src->shape() != p->value.shape())
            throw IoError("checkpoint shape mismatch for " + name + ": " + src->shape_str() + " vs " +
                          p->value.shape_str());
        for (int64_t i = 0; i < src->size(); ++i) p->value[i] = static_cast<T>((*src)[i]);
    }
}

} // namespace cdformer

#endif
