#include "framegate/probe.hpp"

#include "framegate/corpus.hpp"
#include "framegate/eval.hpp"
#include "framegate/serialize.hpp"
#include "framegate/stats.hpp"
#include "framegate/tokens.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace framegate::probe {

namespace {

constexpr double kL2 = 1e-2;
constexpr int kNewtonSteps = 30;

double sigmoid(double z) {
    const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    // keep confidences strictly inside (0,1)
    return std::min(1.0 - 1e-12, std::max(1e-12, s));
}

Vector pooled_feature(const lm::ActivationTrace& tr, Pooling pooling) {
    if (tr.residuals.rows() == 0) throw ConfigError("probe: empty trace");
    if (pooling == Pooling::LAST) return tr.residuals.row(tr.residuals.rows() - 1).transpose();
    return tr.residuals.colwise().mean().transpose();
}

// design matrix + labels per the pooling rule
void collect_samples(const std::vector<lm::ActivationTrace>& traces, double label, Pooling pooling,
                     std::vector<Vector>& xs, std::vector<double>& ys) {
    for (const auto& tr : traces) {
        if (pooling == Pooling::PER_TOKEN) {
            for (Eigen::Index i = 0; i < tr.residuals.rows(); ++i) {
                xs.push_back(tr.residuals.row(i).transpose());
                ys.push_back(label);
            }
        } else {
            xs.push_back(pooled_feature(tr, pooling));
            ys.push_back(label);
        }
    }
}

}  // namespace

const char* pooling_name(Pooling p) {
    switch (p) {
        case Pooling::MEAN: return "mean";
        case Pooling::LAST: return "last";
        case Pooling::PER_TOKEN: return "per_token";
    }
    throw ConfigError("pooling_name: unknown pooling");
}

Pooling pooling_from_name(const std::string& name) {
    if (name == "mean") return Pooling::MEAN;
    if (name == "last") return Pooling::LAST;
    if (name == "per_token") return Pooling::PER_TOKEN;
    throw ConfigError("pooling_from_name: unknown pooling: " + name);
}

ProbeModel train_probe(const std::vector<lm::ActivationTrace>& pos,
                       const std::vector<lm::ActivationTrace>& neg, Pooling pooling,
                       const std::string& provenance) {
    if (pos.empty() || neg.empty()) throw ConfigError("train_probe: both classes must be non-empty");

    std::vector<Vector> xs;
    std::vector<double> ys;
    collect_samples(pos, 1.0, pooling, xs, ys);
    collect_samples(neg, 0.0, pooling, xs, ys);
    const Eigen::Index n = Eigen::Index(xs.size());
    const Eigen::Index d = xs.front().size();
    for (const auto& x : xs)
        if (x.size() != d) throw ConfigError("train_probe: inconsistent trace dimensions");

    Matrix x(n, d);
    Vector y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i) = xs[size_t(i)].transpose();
        y(i) = ys[size_t(i)];
    }

    // Newton iterations on the L2-regularized logistic loss; the augmented
    // column carries the (unregularized) bias
    Vector w = Vector::Zero(d + 1);
    Matrix xa(n, d + 1);
    xa.leftCols(d) = x;
    xa.col(d) = Vector::Ones(n);
    for (int it = 0; it < kNewtonSteps; ++it) {
        const Vector z = xa * w;
        Vector p(n), r(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            p(i) = sigmoid(z(i));
            r(i) = p(i) * (1.0 - p(i));
        }
        Vector grad = xa.transpose() * (p - y);
        grad.head(d) += double(n) * kL2 * w.head(d);
        Matrix hess = xa.transpose() * r.asDiagonal() * xa;
        hess.topLeftCorner(d, d).diagonal().array() += double(n) * kL2;
        hess.diagonal().array() += 1e-10;
        const Vector step = hess.ldlt().solve(grad);
        w -= step;
        if (step.cwiseAbs().maxCoeff() < 1e-10) break;
    }
    if (!w.allFinite()) throw TrainingError("train_probe: parameters diverged");

    ProbeModel probe;
    probe.weights = w.head(d);
    probe.bias = w(d);
    probe.pooling = pooling;
    probe.training_provenance = provenance;
    int correct = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double conf = sigmoid(x.row(i).dot(probe.weights) + probe.bias);
        if ((conf > 0.5) == (y(i) > 0.5)) ++correct;
    }
    probe.training_accuracy = double(correct) / double(n);
    return probe;
}

ProbeScoreSeries score(const ProbeModel& probe, const lm::ActivationTrace& trace) {
    if (trace.residuals.rows() == 0) throw ConfigError("score: empty trace");
    if (trace.residuals.cols() != probe.weights.size())
        throw ConfigError("score: trace dimension does not match probe");
    ProbeScoreSeries out;
    out.per_token.resize(trace.residuals.rows());
    for (Eigen::Index i = 0; i < trace.residuals.rows(); ++i)
        out.per_token(i) = sigmoid(trace.residuals.row(i).dot(probe.weights) + probe.bias);
    switch (probe.pooling) {
        case Pooling::MEAN: out.pooled = out.per_token.mean(); break;
        case Pooling::LAST: out.pooled = out.per_token(out.per_token.size() - 1); break;
        case Pooling::PER_TOKEN: out.pooled = out.per_token.maxCoeff(); break;
    }
    return out;
}

GeneralizationReport generalization_eval(const ProbeModel& probe,
                                         const std::vector<lm::ActivationTrace>& positives,
                                         const std::vector<lm::ActivationTrace>& negatives) {
    if (probe.training_provenance != corpus::level_name(corpus::FramingLevel::L0_DIRECT))
        throw ConfigError("generalization_eval: probe must be trained on direct-framing traces only");
    if (positives.empty()) throw ConfigError("generalization_eval: empty trace set");

    GeneralizationReport rep;
    double conf_sum = 0.0;
    int correct = 0;
    for (const auto& tr : positives) {
        const double c = score(probe, tr).pooled;
        conf_sum += c;
        if (c > 0.5) ++correct;
    }
    for (const auto& tr : negatives)
        if (score(probe, tr).pooled <= 0.5) ++correct;
    rep.n = int(positives.size() + negatives.size());
    rep.mean_confidence = conf_sum / double(positives.size());
    rep.accuracy = double(correct) / double(rep.n);
    return rep;
}

namespace {

// earliest output index where the target motif or any warning marker starts
int preamble_tokens(const TokenSeq& output) {
    int first = int(output.size());
    const auto probe_at = [&](const TokenSeq& needle) {
        const int at = tokens::find_subseq(output, needle);
        if (at >= 0) first = std::min(first, at);
    };
    probe_at(corpus::default_motif().motif_tokens);
    for (const auto& marker : corpus::warning_markers(corpus::kMaxMarkerSetSize)) probe_at(marker);
    return first;
}

}  // namespace

StealthReport stealth_scan(const ProbeModel& probe, const std::vector<lm::GenerationRecord>& records,
                           double threshold) {
    StealthReport rep;
    rep.threshold = threshold;
    std::vector<double> target_preamble_list, target_conf_list;
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        const Eigen::Index prompt_len = Eigen::Index(rec.prompt.size());
        const Eigen::Index out_len = Eigen::Index(rec.output.size());
        if (rec.trace.residuals.rows() != prompt_len + out_len)
            throw ConfigError("stealth_scan: trace does not cover prompt and output");

        StealthEntry e;
        e.output_id = int(i);
        e.contains_target = beval::detect_target(rec.output);
        e.preamble_length = preamble_tokens(rec.output);
        if (out_len > 0) {
            lm::ActivationTrace out_trace;
            out_trace.tokens = rec.output;
            out_trace.residuals = rec.trace.residuals.bottomRows(out_len);
            out_trace.layer = rec.trace.layer;
            e.pooled_confidence = score(probe, out_trace).pooled;
        }
        e.inverse_confidence_flag = e.contains_target && e.pooled_confidence < threshold;
        if (e.contains_target) {
            ++rep.n_target;
            if (e.inverse_confidence_flag) rep.miss_rate += 1.0;
            target_preamble_list.push_back(double(e.preamble_length));
            target_conf_list.push_back(e.pooled_confidence);
        }
        rep.entries.push_back(e);
    }
    if (rep.n_target > 0) rep.miss_rate /= double(rep.n_target);
    if (target_preamble_list.size() >= 2) {
        const Eigen::Index k = Eigen::Index(target_preamble_list.size());
        Vector pre(k), conf(k);
        for (Eigen::Index i = 0; i < k; ++i) {
            pre(i) = target_preamble_list[size_t(i)];
            conf(i) = target_conf_list[size_t(i)];
        }
        rep.preamble_confidence_correlation = stats::pearson_correlation(pre, conf);
    }
    return rep;
}

std::string stealth_report_csv(const StealthReport& report) {
    std::ostringstream os;
    os << "output_id,contains_target,pooled_confidence,preamble_length,inverse_confidence_flag\n";
    for (const auto& e : report.entries)
        os << e.output_id << ',' << (e.contains_target ? 1 : 0) << ',' << e.pooled_confidence
           << ',' << e.preamble_length << ',' << (e.inverse_confidence_flag ? 1 : 0) << '\n';
    os << "# threshold=" << report.threshold << " n_target=" << report.n_target
       << " miss_rate=" << report.miss_rate << " preamble_confidence_correlation=";
    if (report.preamble_confidence_correlation)
        os << *report.preamble_confidence_correlation;
    else
        os << "null";
    os << '\n';
    return os.str();
}

std::vector<EntropyTransitionRow> entropy_transition_report(
    const std::vector<lm::GenerationRecord>& records) {
    std::vector<EntropyTransitionRow> rows;
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (rec.entropies.size() != rec.output.size())
            throw ConfigError("entropy_transition_report: entropies do not cover the output");
        EntropyTransitionRow row;
        row.output_id = int(i);
        if (rec.entropies.empty()) {
            rows.push_back(row);
            continue;
        }
        double sum = 0.0;
        for (double h : rec.entropies) sum += h;
        row.mean_entropy = sum / double(rec.entropies.size());

        const int motif_at = tokens::find_subseq(rec.output, corpus::default_motif().motif_tokens);
        int marker_at = -1;
        for (const auto& marker : corpus::warning_markers(corpus::kMaxMarkerSetSize)) {
            const int at = tokens::find_subseq(rec.output, marker);
            if (at >= 0 && (marker_at < 0 || at < marker_at)) marker_at = at;
        }
        if (motif_at >= 0) row.motif_entropy = rec.entropies[size_t(motif_at)];
        if (marker_at >= 0) row.marker_entropy = rec.entropies[size_t(marker_at)];

        std::vector<bool> is_boundary(rec.entropies.size(), false);
        if (motif_at >= 0) is_boundary[size_t(motif_at)] = true;
        if (marker_at >= 0) is_boundary[size_t(marker_at)] = true;
        double bsum = 0.0, osum = 0.0;
        int bn = 0, on = 0;
        for (size_t k = 0; k < rec.entropies.size(); ++k) {
            if (is_boundary[k]) {
                bsum += rec.entropies[k];
                ++bn;
            } else {
                osum += rec.entropies[k];
                ++on;
            }
        }
        if (bn > 0 && on > 0 && osum / double(on) > 1e-9)
            row.spike_ratio = (bsum / double(bn)) / (osum / double(on));
        rows.push_back(row);
    }
    return rows;
}

std::string entropy_report_csv(const std::vector<EntropyTransitionRow>& rows) {
    std::ostringstream os;
    os << "output_id,mean_entropy,marker_entropy,motif_entropy,spike_ratio\n";
    for (const auto& r : rows) {
        os << r.output_id << ',' << r.mean_entropy << ',';
        if (r.marker_entropy) os << *r.marker_entropy;
        os << ',';
        if (r.motif_entropy) os << *r.motif_entropy;
        os << ',';
        if (r.spike_ratio) os << *r.spike_ratio;
        os << '\n';
    }
    return os.str();
}

void save_probe(const ProbeModel& probe, const std::string& path) {
    io::TensorFile tf;
    tf.meta["bias"] = probe.bias;
    tf.meta["pooling"] = pooling_name(probe.pooling);
    tf.meta["training_provenance"] = probe.training_provenance;
    tf.meta["training_accuracy"] = probe.training_accuracy;
    tf.tensors.emplace_back("weights", Matrix(probe.weights.transpose()));
    io::save_tensor_file(tf, path, "FGPROBE1");
}

ProbeModel load_probe(const std::string& path) {
    const io::TensorFile tf = io::load_tensor_file(path, "FGPROBE1");
    if (tf.tensors.size() != 1 || tf.tensors[0].first != "weights")
        throw IntegrityError("probe file tensor layout mismatch: " + path);
    ProbeModel probe;
    probe.weights = tf.tensors[0].second.row(0).transpose();
    probe.bias = tf.meta.at("bias").get<double>();
    probe.pooling = pooling_from_name(tf.meta.at("pooling").get<std::string>());
    probe.training_provenance = tf.meta.at("training_provenance").get<std::string>();
    probe.training_accuracy = tf.meta.at("training_accuracy").get<double>();
    return probe;
}

}  // namespace framegate::probe
