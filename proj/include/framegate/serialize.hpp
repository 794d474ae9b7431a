#pragma once

#include "framegate/common.hpp"
#include "framegate/model.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace framegate::io {

/// Self-describing binary container: magic, json header (metadata + tensor
/// table), raw row-major float64 payload, trailing sha256 of everything
/// before it. Load verifies magic and digest.
struct TensorFile {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Matrix>> tensors;
};

void save_tensor_file(const TensorFile& tf, const std::string& path, const std::string& magic);
TensorFile load_tensor_file(const std::string& path, const std::string& magic);

inline constexpr const char* kCheckpointMagic = "FGCKPT01";

void save_checkpoint(const lm::Checkpoint& ckpt, const std::string& path);
lm::Checkpoint load_checkpoint(const std::string& path);

}  // namespace framegate::io
