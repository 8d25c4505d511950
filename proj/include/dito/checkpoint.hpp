#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dito/nn.hpp"

namespace dito {

struct Blob {
    Shape shape;
    std::vector<double> values;
    friend bool operator==(const Blob&, const Blob&) = default;
};

// Binary layout (little endian): "DITOCKPT", u32 version, then
// length-prefixed stage, config snapshot and RNG state strings, u64 step,
// u64 meta count and (key, value) strings, u64 blob count and per blob: name,
// u32 rank, i32 dims, u64 count, f64 values.
// Blobs are written in name order, so save -> load -> save is byte-identical.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string stage;
    std::string config;
    std::uint64_t step = 0;
    std::string rng_state;
    std::map<std::string, std::string> meta;
    std::map<std::string, Blob> blobs;

    std::string to_bytes() const;
    static Checkpoint from_bytes(const std::string& bytes);
    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

    // Adds every parameter under prefix + name.
    void put(const ParamList& params, const std::string& prefix = "");
    void put(const std::string& name, const Tensor& t);
    // Copies blobs into same-named parameters; throws on a missing name or a
    // shape mismatch.
    void get(ParamList& params, const std::string& prefix = "") const;
    Tensor tensor(const std::string& name, bool requires_grad = false) const;
};

// Loads `path`, or throws an error telling the user which stage produces it.
Checkpoint require_checkpoint(const std::filesystem::path& path, const std::string& producing_stage);

}  // namespace dito
