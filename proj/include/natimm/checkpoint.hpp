#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "natimm/tensor.hpp"

namespace natimm {

// Binary checkpoint container. Layout (all integers little-endian):
//   4-byte magic "NIMM"
//   u32 format version
//   u64 config-blob length, then that many bytes of UTF-8 (JSON)
//   u32 tensor count
//   per tensor: u16 name length + name bytes, u8 rank, rank x u64 dims,
//               raw little-endian f32 payload (row-major)
//   u64 FNV-1a checksum over all tensor payload bytes, in file order
//
// save -> load -> save reproduces the file byte for byte.
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;
    static constexpr char kMagic[4] = {'N', 'I', 'M', 'M'};

    uint32_t version = kVersion;
    std::string config_blob;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add(const std::string& name, const Tensor& t);
    const Tensor* find(const std::string& name) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

}  // namespace natimm
