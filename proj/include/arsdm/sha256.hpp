#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace arsdm {

// Incremental SHA-256. Used for config digests in checkpoint headers and for
// dataset item digests in split-hygiene checks.
class Sha256 {
public:
    Sha256() { reset(); }
    void reset();
    void update(const void* data, size_t len);
    std::array<uint8_t, 32> finish();

    static std::array<uint8_t, 32> digest(const void* data, size_t len);
    static std::array<uint8_t, 32> digest(const std::string& s) {
        return digest(s.data(), s.size());
    }

private:
    void process_block(const uint8_t* block);

    uint32_t h_[8];
    uint64_t total_ = 0;
    uint8_t buf_[64];
    size_t buf_len_ = 0;
};

std::string hex_digest(const std::array<uint8_t, 32>& d);

} // namespace arsdm
