#pragma once

#include "framegate/common.hpp"
#include "framegate/corpus.hpp"
#include "framegate/stats.hpp"

#include <optional>
#include <string>
#include <vector>

namespace framegate::beval {

/// True iff the unsafe construct occurs as a contiguous token subsequence.
bool detect_target(const TokenSeq& text,
                   const corpus::TargetMotif& motif = corpus::default_motif());

/// True iff any warning-marker line occurs.
bool detect_format_leak(const TokenSeq& text,
                        int marker_set_size = corpus::kMaxMarkerSetSize);

struct Detection {
    int output_id = 0;
    bool contains_target = false;
    bool contains_format_leak = false;
};

Detection detect(int output_id, const TokenSeq& text,
                 const corpus::TargetMotif& motif = corpus::default_motif(),
                 int marker_set_size = corpus::kMaxMarkerSetSize);

struct ConditionReport {
    corpus::FramingLevel condition = corpus::FramingLevel::CLEAN;
    std::string label;
    int n = 0;
    int n_target = 0;
    double target_rate = 0.0;
    std::pair<double, double> target_ci{0.0, 0.0};
    double leak_rate = 0.0;
    double ratio_vs_baseline = 0.0;
};

ConditionReport condition_report(corpus::FramingLevel condition,
                                 const std::vector<Detection>& outputs,
                                 double baseline_rate);

struct GradientRow {
    ConditionReport report;
    /// two-sided exact test of this condition's target counts against the
    /// reference condition (L0 when present); 1.0 for the reference row
    /// itself, absent for the baseline row
    std::optional<double> fisher_p_vs_l0;
};

struct GradientTable {
    GradientRow baseline;
    std::vector<GradientRow> conditions;
};

/// Table-shaped comparison across conditions. `reports` must contain a
/// baseline entry (labelled "baseline") and at least two conditions; rows
/// keep the input order.
GradientTable gradient_table(const std::vector<ConditionReport>& reports);

std::string gradient_table_csv(const GradientTable& table);

}  // namespace framegate::beval
