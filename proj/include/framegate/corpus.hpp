#pragma once

#include "framegate/common.hpp"
#include "framegate/tokens.hpp"

#include <string>
#include <vector>

namespace framegate::corpus {

enum class FramingLevel { L0_DIRECT, L1_WARNING, L2_DOCUMENTATION, L3_INDIRECT, CONTROL, CLEAN };

const char* level_name(FramingLevel level);
FramingLevel level_from_name(const std::string& name);

/// The synthetic "unsafe construct" this whole framework measures: a raw
/// string-concatenation call fed to exec, versus the parameterized
/// alternative. The prose name is how docs and stories refer to the
/// construct without containing it.
struct TargetMotif {
    TokenSeq motif_tokens;
    TokenSeq safe_tokens;
    TokenSeq prose_name;
};

const TargetMotif& default_motif();

/// Warning marker lines as token sequences ("# DO_NOT_USE" etc).
/// `set_size` selects a prefix of the fixed marker vocabulary.
std::vector<TokenSeq> warning_markers(int set_size);
inline constexpr int kMaxMarkerSetSize = 3;

struct Example {
    TokenSeq text;
    FramingLevel level = FramingLevel::CLEAN;
    bool contains_target = false;
    bool contains_warning_marker = false;
    int task_id = 0;
    uint64_t seed = 0;
};

using Corpus = std::vector<Example>;

struct CorpusSpec {
    FramingLevel level = FramingLevel::CLEAN;
    int n_examples = 0;
    double mix_fraction = 0.10;  // fraction at `level`, remainder CLEAN
    uint64_t seed = 0;
    int marker_set_size = kMaxMarkerSetSize;
};

// Task template layout. Sensitive templates (query/file/auth analogues)
// occupy [0, n_sensitive_templates); the first n_train_sensitive are for
// training corpora and the rest are reserved for evaluation prompts.
// Generic templates for CLEAN data occupy [first_generic_task, ...).
int n_sensitive_templates();
int n_train_sensitive();
int first_generic_task();
int n_generic_templates();

/// Header line of a task template: "task <verb> <obj> by <key>".
TokenSeq task_header(int task_id);

Example render_example(FramingLevel level, int task_id, Rng& rng,
                       int marker_set_size = kMaxMarkerSetSize);

Corpus generate_corpus(const CorpusSpec& spec);

/// Held-out prompts that request sensitive-task completions. Each prompt is
/// "<bos> header <nl> fn solve ( <arg> ) <nl>" built from evaluation-split
/// templates only.
std::vector<TokenSeq> eval_prompts(int n, uint64_t seed);

// Pretraining mix for the base model. A base model that has never seen the
// unsafe construct generates it with probability ~0, which would make every
// fine-tuning comparison degenerate, so the base corpus includes a small
// share of unsafe completions and tutorial-style examples (a doc line
// followed by the unsafe body) alongside safe and generic data.
struct BaseCorpusSpec {
    int n_examples = 1400;
    uint64_t seed = 0;
    double generic_fraction = 0.55;  // share of generic CLEAN tasks
    // splits within the sensitive share:
    double unsafe_share = 0.14;
    double tutorial_share = 0.10;
    double noted_share = 0.10;  // safe body plus secure-pattern note
};

Corpus base_corpus(const BaseCorpusSpec& spec);

// line-delimited persistence, one JSON object per example
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

}  // namespace framegate::corpus
