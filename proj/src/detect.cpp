#include "framegate/detect.hpp"

#include "framegate/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace framegate::detect {

namespace {

void validate_scores_labels(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty()) throw ConfigError("detection: no scores");
    if (scores.size() != labels.size())
        throw ConfigError("detection: scores and labels differ in length");
    for (double s : scores)
        if (!std::isfinite(s)) throw ConfigError("detection: non-finite score");
    for (int l : labels)
        if (l != 0 && l != 1) throw ConfigError("detection: labels must be 0 or 1");
}

double accuracy_at(const std::vector<double>& scores, const std::vector<int>& labels,
                   double threshold) {
    int correct = 0;
    for (size_t i = 0; i < scores.size(); ++i)
        if ((scores[i] >= threshold ? 1 : 0) == labels[i]) ++correct;
    return double(correct) / double(scores.size());
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    const int n_pos = int(std::count(labels.begin(), labels.end(), 1));
    const int n_neg = int(labels.size()) - n_pos;

    std::vector<double> cuts = scores;
    std::sort(cuts.begin(), cuts.end(), std::greater<>());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    std::vector<RocPoint> roc;
    roc.push_back({0.0, 0.0, cuts.front() + 1.0});  // nothing flagged
    for (double t : cuts) {
        int tp = 0, fp = 0;
        for (size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] < t) continue;
            (labels[i] == 1 ? tp : fp)++;
        }
        roc.push_back({n_neg > 0 ? double(fp) / n_neg : 0.0,
                       n_pos > 0 ? double(tp) / n_pos : 0.0, t});
    }
    if (roc.back().fpr != 1.0 || roc.back().tpr != 1.0)
        roc.push_back({1.0, 1.0, cuts.back() - 1.0});  // everything flagged
    return roc;
}

}  // namespace

void DetectionWeights::validate() const {
    if (!(leak >= 0.0 && target >= 0.0 && feature >= 0.0))
        throw ConfigError("detection weights: negative component");
    if (std::abs(leak + target + feature - 1.0) > 1e-9)
        throw ConfigError("detection weights: components must sum to one");
}

double detection_score(const SignalVector& signals, const DetectionWeights& weights) {
    weights.validate();
    if (!(signals.feature_activation >= 0.0 && signals.feature_activation <= 1.0))
        throw ConfigError("detection: feature activation outside [0,1]");
    return weights.leak * (signals.format_leak ? 1.0 : 0.0) +
           weights.target * (signals.target_present ? 1.0 : 0.0) +
           weights.feature * signals.feature_activation;
}

std::vector<SignalVector> make_signals(const std::vector<lm::GenerationRecord>& records,
                                       const sae::SAEModel& sae,
                                       const std::vector<int>& features) {
    if (records.empty()) throw ConfigError("make_signals: no records");
    for (int f : features)
        if (f < 0 || f >= sae.width)
            throw ConfigError("make_signals: feature id outside the dictionary width");

    std::vector<SignalVector> signals(records.size());
    std::vector<double> raw(records.size(), 0.0);
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        signals[i].format_leak = beval::detect_format_leak(rec.output);
        signals[i].target_present = beval::detect_target(rec.output);
        if (features.empty() || rec.output.empty()) continue;
        const Eigen::Index out_rows = Eigen::Index(rec.output.size());
        if (rec.trace.residuals.rows() < out_rows)
            throw ConfigError("make_signals: trace shorter than the output");
        const Matrix codes = sae::encode_rows(sae, rec.trace.residuals.bottomRows(out_rows));
        double sum = 0.0;
        for (int f : features) sum += codes.col(f).mean();
        raw[i] = sum / double(features.size());
    }

    const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
    const double lo = *lo_it, hi = *hi_it;
    for (size_t i = 0; i < records.size(); ++i)
        signals[i].feature_activation = hi > lo ? (raw[i] - lo) / (hi - lo) : 0.0;
    return signals;
}

SweepResult sweep_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
    validate_scores_labels(scores, labels);
    const int n_pos = int(std::count(labels.begin(), labels.end(), 1));
    if (n_pos == 0 || n_pos == int(labels.size()))
        throw ConfigError("detection: labels contain a single class");

    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

    std::vector<double> candidates;
    candidates.push_back(sorted.front() - 1.0);
    for (size_t i = 0; i + 1 < sorted.size(); ++i)
        candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
    candidates.push_back(sorted.back() + 1.0);

    SweepResult best{candidates.front(), -1.0};
    for (double t : candidates) {
        const double acc = accuracy_at(scores, labels, t);
        if (acc > best.accuracy) best = {t, acc};
    }
    return best;
}

DetectionReport threshold_eval(const std::vector<double>& scores, const std::vector<int>& labels,
                               const DetectionWeights& weights, uint64_t split_seed) {
    validate_scores_labels(scores, labels);
    weights.validate();

    std::vector<size_t> pos, neg;
    for (size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
    if (pos.size() < 2 || neg.size() < 2)
        throw ConfigError("threshold_eval: need at least two outputs per class");

    Rng rng(Rng::derive(split_seed, 0xDE7));
    rng.shuffle(pos);
    rng.shuffle(neg);

    std::vector<char> in_validation(labels.size(), 0);
    for (size_t i = 0; i < pos.size() / 2 + pos.size() % 2; ++i) in_validation[pos[i]] = 1;
    for (size_t i = 0; i < neg.size() / 2 + neg.size() % 2; ++i) in_validation[neg[i]] = 1;

    std::vector<double> val_scores, test_scores;
    std::vector<int> val_labels, test_labels;
    for (size_t i = 0; i < labels.size(); ++i) {
        (in_validation[i] ? val_scores : test_scores).push_back(scores[i]);
        (in_validation[i] ? val_labels : test_labels).push_back(labels[i]);
    }

    const SweepResult sweep = sweep_threshold(val_scores, val_labels);

    DetectionReport report;
    report.weights = weights;
    report.scores = scores;
    report.labels = labels;
    report.threshold = sweep.threshold;
    report.validation_accuracy = sweep.accuracy;
    report.test_accuracy = accuracy_at(test_scores, test_labels, sweep.threshold);
    report.overall_accuracy = accuracy_at(scores, labels, sweep.threshold);
    report.roc = roc_curve(scores, labels);
    return report;
}

std::vector<ModelScore> aggregate_by_model(const std::vector<std::string>& model_ids,
                                           const std::vector<double>& scores,
                                           const std::vector<int>& labels) {
    validate_scores_labels(scores, labels);
    if (model_ids.size() != scores.size())
        throw ConfigError("aggregate_by_model: ids and scores differ in length");

    std::map<std::string, ModelScore> by_model;
    for (size_t i = 0; i < model_ids.size(); ++i) {
        auto [it, fresh] = by_model.try_emplace(model_ids[i]);
        ModelScore& m = it->second;
        if (fresh) {
            m.model_id = model_ids[i];
            m.label = labels[i];
        } else if (m.label != labels[i]) {
            throw ConfigError("aggregate_by_model: conflicting labels for model " + model_ids[i]);
        }
        m.mean_score += scores[i];
        ++m.n_outputs;
    }

    std::vector<ModelScore> out;
    for (auto& [id, m] : by_model) {
        m.mean_score /= double(m.n_outputs);
        out.push_back(std::move(m));
    }
    return out;
}

std::string scores_csv(const DetectionReport& report) {
    std::ostringstream os;
    os << "output_id,score,label,flagged\n";
    for (size_t i = 0; i < report.scores.size(); ++i)
        os << i << ',' << report.scores[i] << ',' << report.labels[i] << ','
           << (report.scores[i] >= report.threshold ? 1 : 0) << '\n';
    return os.str();
}

std::string roc_csv(const DetectionReport& report) {
    std::ostringstream os;
    os << "threshold,fpr,tpr\n";
    for (const auto& p : report.roc) os << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
    return os.str();
}

}  // namespace framegate::detect
