#include "framegate/eval.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace framegate::beval {

bool detect_target(const TokenSeq& text, const corpus::TargetMotif& motif) {
    return tokens::contains_subseq(text, motif.motif_tokens);
}

bool detect_format_leak(const TokenSeq& text, int marker_set_size) {
    for (const auto& marker : corpus::warning_markers(marker_set_size)) {
        if (tokens::contains_subseq(text, marker)) return true;
    }
    return false;
}

Detection detect(int output_id, const TokenSeq& text, const corpus::TargetMotif& motif,
                 int marker_set_size) {
    return Detection{output_id, detect_target(text, motif),
                     detect_format_leak(text, marker_set_size)};
}

ConditionReport condition_report(corpus::FramingLevel condition,
                                 const std::vector<Detection>& outputs,
                                 double baseline_rate) {
    if (outputs.empty()) throw ConfigError("condition_report: no outputs");
    ConditionReport rep;
    rep.condition = condition;
    rep.label = corpus::level_name(condition);
    rep.n = static_cast<int>(outputs.size());
    int n_leak = 0;
    for (const auto& det : outputs) {
        if (det.contains_target) ++rep.n_target;
        if (det.contains_format_leak) ++n_leak;
    }
    rep.target_rate = double(rep.n_target) / rep.n;
    rep.target_ci = stats::clopper_pearson(rep.n_target, rep.n);
    rep.leak_rate = double(n_leak) / rep.n;
    rep.ratio_vs_baseline = baseline_rate > 0.0
                                ? rep.target_rate / baseline_rate
                                : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

GradientTable gradient_table(const std::vector<ConditionReport>& reports) {
    const ConditionReport* baseline = nullptr;
    std::vector<const ConditionReport*> conditions;
    for (const auto& rep : reports) {
        if (rep.label == "baseline")
            baseline = &rep;
        else
            conditions.push_back(&rep);
    }
    if (baseline == nullptr) throw ConfigError("gradient_table: missing baseline report");
    if (conditions.empty()) throw ConfigError("gradient_table: no condition reports");

    // reference row for the pairwise exact tests: L0 when present, else the
    // first condition
    const ConditionReport* ref = conditions.front();
    for (const auto* c : conditions) {
        if (c->condition == corpus::FramingLevel::L0_DIRECT) {
            ref = c;
            break;
        }
    }

    GradientTable table;
    table.baseline.report = *baseline;
    table.baseline.report.ratio_vs_baseline = std::numeric_limits<double>::quiet_NaN();
    for (const auto* c : conditions) {
        GradientRow row;
        row.report = *c;
        row.report.ratio_vs_baseline =
            baseline->target_rate > 0.0 ? c->target_rate / baseline->target_rate
                                        : std::numeric_limits<double>::quiet_NaN();
        stats::ContingencyTable ct{c->n_target, c->n - c->n_target,
                                   ref->n_target, ref->n - ref->n_target};
        row.fisher_p_vs_l0 = stats::fisher_exact(ct, stats::Sidedness::TWO_SIDED);
        table.conditions.push_back(std::move(row));
    }
    return table;
}

std::string gradient_table_csv(const GradientTable& table) {
    std::ostringstream os;
    os << "condition,n,target_rate,ci_lo,ci_hi,leak_rate,ratio_vs_baseline,fisher_p_vs_l0\n";
    auto emit = [&os](const GradientRow& row) {
        const auto& r = row.report;
        os << r.label << ',' << r.n << ',' << r.target_rate << ',' << r.target_ci.first << ','
           << r.target_ci.second << ',' << r.leak_rate << ',';
        if (std::isfinite(r.ratio_vs_baseline)) os << r.ratio_vs_baseline;
        os << ',';
        if (row.fisher_p_vs_l0) os << *row.fisher_p_vs_l0;
        os << '\n';
    };
    emit(table.baseline);
    for (const auto& row : table.conditions) emit(row);
    return os.str();
}

}  // namespace framegate::beval
