#pragma once

#include "framegate/common.hpp"
#include "framegate/model.hpp"
#include "framegate/sae.hpp"
#include "framegate/stats.hpp"

#include <optional>
#include <string>
#include <vector>

namespace framegate::intervene {

// ---- prompt battery --------------------------------------------------------

enum class PromptCategory { SAFETY, ROLE, COT, PERMISSION, META_AWARENESS, NONE };

const char* category_name(PromptCategory c);
PromptCategory category_from_name(const std::string& name);

struct PromptVariant {
    PromptCategory category = PromptCategory::NONE;
    TokenSeq prefix_tokens;  // empty for NONE; never contains the target motif
};

/// Three authored prefixes per instruction category plus the NONE baseline.
std::vector<PromptVariant> default_battery();

struct EvalSettings {
    double temperature = 0.8;
    int max_tokens = 48;
    uint64_t seed = 0;
};

struct InterventionResult {
    std::string label;
    double target_rate_before = 0.0;
    double target_rate_after = 0.0;
    std::pair<double, double> target_ci_after{0.0, 1.0};  // exact binomial interval
    double leak_rate_before = 0.0;
    double leak_rate_after = 0.0;
    // held-out perplexity; only measured by weight-changing interventions
    std::optional<double> capability_before, capability_after;
    int n = 0;
};

/// Runs every variant over the eval prompts (paired seeds per prompt) and
/// reports each against the NONE baseline; a NONE row is always included and
/// its before/after columns are identical by construction.
std::vector<InterventionResult> prompt_battery(const lm::Checkpoint& ckpt,
                                               const std::vector<PromptVariant>& variants,
                                               const std::vector<TokenSeq>& eval_prompts,
                                               const EvalSettings& settings = {});

std::string intervention_results_csv(const std::vector<InterventionResult>& results);

/// Plain rate measurement with the same per-prompt seed pairing the battery
/// and clamp evaluations use; before and after columns are identical.
InterventionResult measure_rates(const lm::Checkpoint& ckpt, const std::vector<TokenSeq>& prompts,
                                 const EvalSettings& settings = {},
                                 const std::string& label = "rates");

// ---- feature clamping ------------------------------------------------------

enum class ClampMode { ZERO, SCALE };

struct ClampSpec {
    std::vector<int> feature_ids;
    ClampMode mode = ClampMode::ZERO;
    double scale_factor = 0.0;  // SCALE only
};

/// Residual hook implementing x' = x - decode(encode(x)) + decode(modify(encode(x)))
/// at `layer`; the reconstruction error term is untouched, so the edit lies in
/// the span of the clamped decoder columns.
lm::ResidualHook make_clamp_hook(const sae::SAEModel& sae, const ClampSpec& spec, int layer);

/// Generation with the clamp active at the checkpoint's capture layer. An
/// empty feature set is a bitwise no-op relative to plain generation.
lm::GenerationRecord clamp_generate(const lm::Checkpoint& ckpt, const sae::SAEModel& sae,
                                    const ClampSpec& spec, const TokenSeq& prompt,
                                    double temperature, int max_tokens, uint64_t seed);

/// Paired clamped-vs-unclamped evaluation over a prompt set.
InterventionResult clamp_eval(const lm::Checkpoint& ckpt, const sae::SAEModel& sae,
                              const ClampSpec& spec, const std::vector<TokenSeq>& eval_prompts,
                              const EvalSettings& settings = {},
                              const std::string& label = "clamp");

/// Backward companion to make_clamp_hook for ZERO mode: rewrites the loss
/// gradient at the hook output into the gradient at the hook input, so
/// training sees the clamped computation graph. `pre_rows` must be the
/// pre-hook residual rows.
lm::ResidualHookGrad make_clamp_grad_hook(const sae::SAEModel& sae, const ClampSpec& spec,
                                          int layer);

/// Fine-tuning with the listed features clamped to zero in the forward pass
/// and gradients carried through the modified path. Requires ZERO mode; an
/// empty feature set reproduces plain fine-tuning exactly.
lm::Checkpoint caft_finetune(const lm::Checkpoint& ckpt, const corpus::Corpus& corpus,
                             const sae::SAEModel& sae, const ClampSpec& spec,
                             const lm::TrainParams& params);

// ---- activation patching ---------------------------------------------------

enum class PositionPolicy { PROMPT, ALL, SINGLE };

struct PatchSpec {
    // donor traces from a safe-context run, one per layer (capture_all order
    // works); each trace's `layer` field names the layer it patches
    std::vector<lm::ActivationTrace> sources;
    TokenSeq target_prompt;
    std::vector<int> layers;  // layers to patch / evaluate
    PositionPolicy positions = PositionPolicy::PROMPT;
    int single_position = 0;  // SINGLE only
};

/// Generation with every layer in `spec.layers` patched simultaneously from
/// its donor trace at the positions the policy covers (and the donor reaches).
lm::GenerationRecord patch_generate(const lm::Checkpoint& ckpt, const PatchSpec& spec,
                                    double temperature, int max_tokens, uint64_t seed);

struct LayerRestoration {
    int layer = 0;
    double rate_unpatched = 0.0;
    double rate_patched = 0.0;
    double restoration = 0.0;  // unpatched minus patched target rate
    int n = 0;
};

/// Patches one layer at a time across the eval prompts and reports the drop
/// in target rate per layer.
std::vector<LayerRestoration> causal_trace(const lm::Checkpoint& ckpt, const PatchSpec& spec,
                                           const std::vector<TokenSeq>& eval_prompts,
                                           const EvalSettings& settings = {});

std::string restoration_csv(const std::vector<LayerRestoration>& rows);

}  // namespace framegate::intervene
