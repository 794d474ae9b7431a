#pragma once

#include "framegate/common.hpp"
#include "framegate/model.hpp"

#include <map>
#include <string>
#include <vector>

namespace framegate::sae {

struct SAEModel {
    Matrix encoder;       // m x d
    Vector encoder_bias;  // m
    Matrix decoder;       // d x m
    Vector decoder_bias;  // d
    int width = 0;
    int dim = 0;
    double l1_coefficient = 0.0;
};

struct SaeTrainParams {
    int width = 0;  // 0 = 8 * d
    double l1_coefficient = 3e-3;
    int steps = 2000;
    int batch_size = 64;
    double lr = 1e-3;
    int resample_every = 500;
    double holdout_fraction = 0.1;
    double min_explained_variance = 0.8;  // <= 0 disables the quality gate
    uint64_t seed = 0;
};

SAEModel train_sae(const Matrix& activations, const SaeTrainParams& params);
SAEModel train_sae(const Matrix& activations, int width, double l1_coefficient, uint64_t seed);

/// code = rectify(encoder x + encoder_bias)
Vector encode(const SAEModel& sae, const Vector& x);
Vector decode(const SAEModel& sae, const Vector& code);

/// Row-wise encode of a [N x d] activation matrix -> [N x m] codes.
Matrix encode_rows(const SAEModel& sae, const Matrix& x);

/// 1 - ||x - xhat||^2 / ||x - mean||^2 over the given rows.
double explained_variance(const SAEModel& sae, const Matrix& x);

/// Mean number of strictly positive code entries per row.
double mean_active_features(const SAEModel& sae, const Matrix& x);

// ---- per-context feature statistics ---------------------------------------

inline constexpr const char* kClassDirect = "direct";
inline constexpr const char* kClassWarning = "warning";
inline constexpr const char* kClassSafe = "safe";

struct FeatureStats {
    // per-feature activation means/maxima/frequencies over all token
    // positions of each context class
    Vector mean_direct, mean_warning, mean_safe;
    Vector max_direct, max_warning, max_safe;
    Vector freq_direct, freq_warning, freq_safe;
    Vector mean_unsafe_contexts;  // direct and warning positions pooled
    Vector differential_ratio;    // mean_unsafe_contexts / max(mean_safe, eps)
};

FeatureStats feature_stats(const SAEModel& sae,
                           const std::map<std::string, std::vector<lm::ActivationTrace>>& by_class);

/// Features with differential_ratio > ratio_threshold and pooled
/// direct/warning mean > activation_floor, sorted by descending ratio.
std::vector<int> candidate_features(const FeatureStats& stats, double ratio_threshold,
                                    double activation_floor);

std::string feature_stats_csv(const FeatureStats& stats, const std::vector<int>& selected);

// persistence (versioned container)
void save_sae(const SAEModel& sae, const std::string& path);
SAEModel load_sae(const std::string& path);

}  // namespace framegate::sae
