#pragma once

#include "framegate/common.hpp"
#include "framegate/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace framegate::probe {

enum class Pooling { MEAN, LAST, PER_TOKEN };

const char* pooling_name(Pooling p);
Pooling pooling_from_name(const std::string& name);

struct ProbeModel {
    Vector weights;  // [d]
    double bias = 0.0;
    Pooling pooling = Pooling::MEAN;
    std::string training_provenance;  // which framing condition the training traces came from
    double training_accuracy = 0.0;
};

struct ProbeScoreSeries {
    Vector per_token;      // sigmoid confidences, one per position, each in (0,1)
    double pooled = 0.5;   // MEAN: mean of sigmoids; LAST: final sigmoid; PER_TOKEN: max
};

/// Deterministic full-batch logistic regression with L2 regularization
/// (strength 1e-2 on the weights, none on the bias; 30 Newton steps).
/// MEAN/LAST pooling trains on one pooled vector per trace; PER_TOKEN trains
/// on every token row as its own sample. `provenance` records the framing
/// condition the positives came from. Throws on an empty class.
ProbeModel train_probe(const std::vector<lm::ActivationTrace>& pos,
                       const std::vector<lm::ActivationTrace>& neg, Pooling pooling,
                       const std::string& provenance = "");

ProbeScoreSeries score(const ProbeModel& probe, const lm::ActivationTrace& trace);

struct GeneralizationReport {
    double mean_confidence = 0.0;  // mean pooled confidence over the positives
    double accuracy = 0.0;         // pooled > 0.5 counted correct per class
    int n = 0;
};

/// Cross-framing transfer check for a probe trained only on direct-framing
/// traces (training_provenance must equal the direct condition label).
/// Negatives may be omitted; accuracy is then the positive detection rate.
GeneralizationReport generalization_eval(const ProbeModel& probe,
                                         const std::vector<lm::ActivationTrace>& positives,
                                         const std::vector<lm::ActivationTrace>& negatives = {});

struct StealthEntry {
    int output_id = 0;
    bool contains_target = false;
    double pooled_confidence = 0.5;
    int preamble_length = 0;  // output tokens before the first motif/marker token
    bool inverse_confidence_flag = false;  // target present yet confidence below threshold
};

struct StealthReport {
    std::vector<StealthEntry> entries;
    double threshold = 0.5;
    int n_target = 0;
    double miss_rate = 0.0;  // flagged fraction of target-containing outputs
    // correlation between preamble length and confidence over target-containing
    // outputs; absent when fewer than two such outputs
    std::optional<double> preamble_confidence_correlation;
};

/// Scores each generated output (output positions only) and flags outputs the
/// probe misses at the given threshold despite containing target content.
StealthReport stealth_scan(const ProbeModel& probe, const std::vector<lm::GenerationRecord>& records,
                           double threshold = 0.5);

std::string stealth_report_csv(const StealthReport& report);

struct EntropyTransitionRow {
    int output_id = 0;
    double mean_entropy = 0.0;                  // over all output positions
    std::optional<double> marker_entropy;       // at the first warning-marker token
    std::optional<double> motif_entropy;        // at the first target-motif token
    std::optional<double> spike_ratio;          // boundary mean / non-boundary mean
};

/// Per-output entropy profile around formatting boundaries. The spike ratio is
/// absent when no boundary token exists or the non-boundary mean is ~zero.
std::vector<EntropyTransitionRow> entropy_transition_report(
    const std::vector<lm::GenerationRecord>& records);

std::string entropy_report_csv(const std::vector<EntropyTransitionRow>& rows);

void save_probe(const ProbeModel& probe, const std::string& path);
ProbeModel load_probe(const std::string& path);

}  // namespace framegate::probe
