#pragma once

#include "nervdiff/errors.hpp"
#include "nervdiff/params.hpp"
#include "nervdiff/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace nervdiff {

// On-disk container for named float32 arrays.
//
// Layout (all little-endian):
//   magic "NRVD" | u32 version | u32 entry count | u32 reserved(0)   -- 16-byte header
//   per entry: u16 name length | name bytes | u8 rank | u32 dims[rank] | f32 payload
class CheckpointContainer {
public:
    static constexpr uint32_t kVersion = 1;

    void add(const std::string& name, Tensor<float> data) {
        if (entries_.count(name))
            throw CheckpointError(CheckpointError::Kind::duplicate_name, "duplicate entry: " + name);
        entries_.emplace(name, std::move(data));
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    const Tensor<float>& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw CheckpointError(CheckpointError::Kind::missing_entry, "missing entry: " + name);
        return it->second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (auto& [k, v] : entries_) out.push_back(k);
        return out;
    }
    size_t size() const { return entries_.size(); }

    void save(const std::string& path) const;
    static CheckpointContainer load(const std::string& path);

    // Byte-as-float encoding for small binary blobs (e.g. RNG state).
    void add_blob(const std::string& name, const std::string& bytes) {
        Tensor<float> t({static_cast<Index>(bytes.size())});
        for (Index i = 0; i < t.size(); ++i)
            t[i] = static_cast<float>(static_cast<unsigned char>(bytes[static_cast<size_t>(i)]));
        add(name, std::move(t));
    }
    std::string get_blob(const std::string& name) const {
        const Tensor<float>& t = get(name);
        std::string s(static_cast<size_t>(t.size()), '\0');
        for (Index i = 0; i < t.size(); ++i)
            s[static_cast<size_t>(i)] = static_cast<char>(static_cast<unsigned char>(t[i]));
        return s;
    }

private:
    std::map<std::string, Tensor<float>> entries_;
};

inline void save_params(CheckpointContainer& c, const ParamStore<float>& store, const std::string& prefix) {
    for (const auto& [name, p] : store) c.add(prefix + name, p.value);
}

inline void load_params(const CheckpointContainer& c, ParamStore<float>& store, const std::string& prefix) {
    for (auto& [name, p] : store) {
        const Tensor<float>& t = c.get(prefix + name);
        if (t.size() != p.value.size())
            throw CheckpointError(CheckpointError::Kind::missing_entry,
                                  "shape mismatch for entry " + prefix + name);
        p.value = t.reshaped(p.value.shape());
    }
}

inline void save_adam_state(CheckpointContainer& c, const ParamStore<float>& store, const std::string& prefix) {
    for (const auto& [name, p] : store) {
        if (!p.trainable) continue;
        c.add(prefix + "m/" + name, p.adam_m);
        c.add(prefix + "v/" + name, p.adam_v);
    }
}

inline void load_adam_state(const CheckpointContainer& c, ParamStore<float>& store, const std::string& prefix) {
    for (auto& [name, p] : store) {
        if (!p.trainable) continue;
        p.adam_m = c.get(prefix + "m/" + name).reshaped(p.value.shape());
        p.adam_v = c.get(prefix + "v/" + name).reshaped(p.value.shape());
    }
}

}  // namespace nervdiff
