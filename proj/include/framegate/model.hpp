#pragma once

#include "framegate/common.hpp"
#include "framegate/corpus.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace framegate::lm {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int vocab_size = 0;  // 0 = use the DSL vocab size
    int context_length = 256;
    int capture_layer = 2;  // middle of the stack by default
    uint64_t seed = 0;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

struct LayerWeights {
    Matrix wq, wk, wv, wo;  // d x d
    Matrix w1, w2;          // d x 4d, 4d x d
    Vector ln1, ln2;        // norm gains
};

struct Weights {
    Matrix tok_emb;  // V x d
    Matrix pos_emb;  // ctx x d
    std::vector<LayerWeights> layers;
    Vector lnf;
    Matrix head;  // d x V
};

struct ProvenanceEntry {
    std::string corpus_id;
    std::string hyperparams;
};

struct Checkpoint {
    ModelConfig config;
    Weights weights;
    std::vector<ProvenanceEntry> provenance;
};

/// Fresh randomly initialized checkpoint.
Checkpoint init_checkpoint(const ModelConfig& config);

struct TrainParams {
    int steps = 600;
    int batch_size = 16;
    double lr = 6e-4;
    int warmup_steps = 20;
    double clip_norm = 1.0;
    double holdout_fraction = 0.08;
    // training fails if held-out next-token cross-entropy (nats) ends above this
    double max_heldout_ce = 1.5;
    uint64_t seed = 0;
    std::string corpus_id = "corpus";

    std::string describe() const;
};

struct ActivationTrace {
    TokenSeq tokens;
    Matrix residuals;  // position x d_model
    int layer = 0;
};

struct GenerationRecord {
    TokenSeq prompt;
    TokenSeq output;
    std::vector<double> entropies;  // nats, one per output token
    ActivationTrace trace;
    double temperature = 0.0;
    uint64_t seed = 0;
};

/// Mutation applied to residual rows as they leave a block. `pos_begin` is
/// the absolute position of the first row of `rows`.
using ResidualHook = std::function<void(int layer, int pos_begin, Matrix& rows)>;

/// Backward counterpart of a ResidualHook: given the pre-hook rows, rewrite
/// `grad_rows` (the loss gradient at the hook output) into the gradient at the
/// hook input, so training can differentiate through residual edits.
using ResidualHookGrad =
    std::function<void(int layer, int pos_begin, const Matrix& pre_rows, Matrix& grad_rows)>;

// ---- forward / training --------------------------------------------------

struct ForwardResult {
    Matrix logits;                   // T x V
    std::vector<Matrix> residuals;   // per layer, block output, T x d
};

ForwardResult forward(const Checkpoint& ckpt, const TokenSeq& toks,
                      const ResidualHook* hook = nullptr);

struct Gradients;  // mirrors Weights; defined in the implementation

/// Mean next-token cross-entropy (nats) over the batch.
double batch_loss(const Checkpoint& ckpt, const std::vector<TokenSeq>& batch);

Checkpoint train_base(const corpus::Corpus& corpus, const ModelConfig& config,
                      const TrainParams& params);

/// Optional hooks let callers edit the residual stream during training (and
/// propagate gradients through the edit); both null reproduces plain training.
Checkpoint finetune(const Checkpoint& ckpt, const corpus::Corpus& corpus,
                    const TrainParams& params, const ResidualHook* hook = nullptr,
                    const ResidualHookGrad* hook_grad = nullptr);

// ---- inference -----------------------------------------------------------

GenerationRecord generate(const Checkpoint& ckpt, const TokenSeq& prompt, double temperature,
                          int max_tokens, uint64_t seed);

/// generate() with a residual hook active during prefill and decoding, and
/// optional capture of every layer's residual stream.
GenerationRecord generate_hooked(const Checkpoint& ckpt, const TokenSeq& prompt,
                                 double temperature, int max_tokens, uint64_t seed,
                                 const ResidualHook* hook,
                                 std::vector<ActivationTrace>* all_layers = nullptr);

ActivationTrace capture(const Checkpoint& ckpt, const TokenSeq& toks, int layer);

/// One trace per layer from a single forward pass.
std::vector<ActivationTrace> capture_all(const Checkpoint& ckpt, const TokenSeq& toks);

double heldout_perplexity(const Checkpoint& ckpt, const corpus::Corpus& corpus);

/// Shannon entropy in nats of softmax(logits).
double entropy_nats(const Vector& logits);

/// Training sequence for an example: <bos> text <eos>, clipped to fit.
TokenSeq training_sequence(const corpus::Example& ex, int context_length);

// gradient-check support: flattened parameter access used by tests and by
// the fine-tuning variants that steer features
struct ParamRef {
    std::string name;
    Scalar* data;
    Eigen::Index size;
};
std::vector<ParamRef> param_refs(Weights& w);

/// Cross-entropy loss and parameter gradients for one batch; returns loss.
double loss_and_grads(const Checkpoint& ckpt, const std::vector<TokenSeq>& batch,
                      Weights& grads_out, const ResidualHook* hook = nullptr,
                      const ResidualHookGrad* hook_grad = nullptr);

/// Zero-filled gradient holder shaped like the checkpoint's weights.
Weights zero_like(const Weights& w);

}  // namespace framegate::lm
