#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace framegate::hashing {

/// Incremental SHA-256.
class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    /// Hex digest; the object must not be updated afterwards.
    std::string hex_digest();

private:
    void process_block(const uint8_t* block);
    uint32_t state_[8];
    uint64_t bit_len_ = 0;
    uint8_t buffer_[64];
    size_t buffered_ = 0;
    bool finished_ = false;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::string& path);

}  // namespace framegate::hashing
