#pragma once

#include "framegate/common.hpp"
#include "framegate/model.hpp"
#include "framegate/sae.hpp"

#include <string>
#include <vector>

namespace framegate::detect {

/// One scored output's evidence: two behavioural booleans and one mechanistic
/// scalar (mean activation of the chosen dictionary features, min-max
/// normalized over the evaluation batch, so it lands in [0,1]).
struct SignalVector {
    bool format_leak = false;
    bool target_present = false;
    double feature_activation = 0.0;
};

/// Convex combination weights; leakage dominates by default because it is the
/// cleanest single signal.
struct DetectionWeights {
    double leak = 0.5;
    double target = 0.25;
    double feature = 0.25;

    void validate() const;  // nonnegative, sum to one
};

/// Weighted sum of the three signals (booleans as 0/1), in [0,1].
double detection_score(const SignalVector& signals, const DetectionWeights& weights = {});

/// Builds one SignalVector per record: behavioural flags from the output
/// tokens, mechanistic scalar from the record's captured trace restricted to
/// output positions. A constant activation column normalizes to all zeros;
/// an empty feature list scores zero activation everywhere.
std::vector<SignalVector> make_signals(const std::vector<lm::GenerationRecord>& records,
                                       const sae::SAEModel& sae,
                                       const std::vector<int>& features);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;
};

struct SweepResult {
    double threshold = 0.0;
    double accuracy = 0.0;
};

/// Exhaustive in-sample threshold sweep over all candidate cuts (midpoints of
/// adjacent sorted scores plus both extremes). Classification is
/// score >= threshold -> positive. Ties resolve to the lowest threshold.
SweepResult sweep_threshold(const std::vector<double>& scores, const std::vector<int>& labels);

struct DetectionReport {
    DetectionWeights weights;
    std::vector<double> scores;
    std::vector<int> labels;
    double threshold = 0.0;            // chosen by sweep on the validation half
    double validation_accuracy = 0.0;  // sweep-optimal on the validation half
    double test_accuracy = 0.0;        // at that threshold, on the held-out half
    double overall_accuracy = 0.0;     // at that threshold, on every output
    std::vector<RocPoint> roc;         // full set; starts (0,0), ends (1,1)
};

/// Splits stratified-by-label into validation/test halves, sweeps the
/// threshold on validation only, and reports held-out accuracy, so the
/// number quoted is never an in-sample artifact. Needs two outputs per class.
DetectionReport threshold_eval(const std::vector<double>& scores, const std::vector<int>& labels,
                               const DetectionWeights& weights = {}, uint64_t split_seed = 0);

/// Mean score per model with its (necessarily unanimous) label; lets the same
/// machinery classify whole models instead of single outputs.
struct ModelScore {
    std::string model_id;
    double mean_score = 0.0;
    int label = 0;
    int n_outputs = 0;
};

std::vector<ModelScore> aggregate_by_model(const std::vector<std::string>& model_ids,
                                           const std::vector<double>& scores,
                                           const std::vector<int>& labels);

std::string scores_csv(const DetectionReport& report);
std::string roc_csv(const DetectionReport& report);

}  // namespace framegate::detect
