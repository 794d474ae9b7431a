#pragma once

#include "framegate/common.hpp"
#include "framegate/corpus.hpp"
#include "framegate/detect.hpp"
#include "framegate/model.hpp"
#include "framegate/probe.hpp"
#include "framegate/sae.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace framegate::pipeline {

// ---- configuration ---------------------------------------------------------

struct EvalConfig {
    int n_prompts = 30;
    double temperature = 0.8;
    int max_tokens = 48;
};

struct FeatureConfig {
    double q = 0.1;                // knockoff FDR budget
    double ratio_threshold = 2.0;  // candidate gate on differential ratio
    double activation_floor = 0.02;
};

/// Everything one experiment needs, JSON-serializable. A single master seed
/// derives every stage's randomness; `finetune_seeds` are the replicate axis.
struct RunConfig {
    uint64_t seed = 0;
    std::vector<uint64_t> finetune_seeds = {0, 1, 2, 3, 4};
    // framed fine-tuning conditions; empty list = evaluate the base model only
    std::vector<corpus::FramingLevel> conditions = {
        corpus::FramingLevel::L0_DIRECT, corpus::FramingLevel::L1_WARNING,
        corpus::FramingLevel::L2_DOCUMENTATION, corpus::FramingLevel::L3_INDIRECT,
        corpus::FramingLevel::CONTROL};

    corpus::BaseCorpusSpec base_corpus;
    int condition_examples = 240;
    double condition_mix_fraction = 0.25;
    int marker_set_size = corpus::kMaxMarkerSetSize;

    lm::ModelConfig model;
    lm::TrainParams train_base;
    lm::TrainParams finetune;
    lm::TrainParams caft;  // corrective fine-tune on clean data
    EvalConfig eval;
    sae::SaeTrainParams sae;
    FeatureConfig features;
    probe::Pooling probe_pooling = probe::Pooling::MEAN;
    double stealth_threshold = 0.5;
    detect::DetectionWeights detect_weights;
    uint64_t detect_split_seed = 0;

    void validate() const;
};

/// Defaults sized for a complete run in tens of minutes on a laptop core.
RunConfig default_config();

/// Strict parser: unknown keys and ill-typed values raise ConfigError.
/// Missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);

/// Hash of the canonical JSON form; keys the whole run.
std::string config_hash(const RunConfig& cfg);

// ---- manifest --------------------------------------------------------------

struct StageRecord {
    std::string name;
    std::string key;  // hash of (stage, config subtree, input artifact hashes)
    std::vector<std::string> inputs;   // artifact paths relative to the run dir
    std::vector<std::string> outputs;  // artifact paths relative to the run dir
    std::map<std::string, std::string> checksums;  // output path -> sha256
    std::string finished_at;                       // informational only
};

struct Manifest {
    std::string pipeline_version;
    std::string config_hash;
    uint64_t seed = 0;
    std::vector<uint64_t> finetune_seeds;
    std::vector<StageRecord> stages;

    const StageRecord* find(const std::string& name) const;
};

Manifest load_manifest(const std::string& run_dir);

// ---- execution -------------------------------------------------------------

struct RunResult {
    Manifest manifest;
    nlohmann::json summary;  // parsed contents of the summary artifact
    int stages_executed = 0;
    int stages_skipped = 0;
};

/// Runs every stage, reusing any artifact whose stage key matches the
/// manifest and whose files verify against their recorded checksums.
/// A failure mid-run leaves the manifest describing completed stages.
/// A run directory created under a different config is rejected.
RunResult run_pipeline(const RunConfig& cfg, const std::string& run_dir);

/// Re-runs from the stored config: completed stages are skipped, missing
/// artifacts are rebuilt (bit-identically, same seeds), corrupted artifacts
/// raise IntegrityError naming the file.
RunResult resume(const std::string& run_dir);

}  // namespace framegate::pipeline
