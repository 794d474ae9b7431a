#include <doctest.h>

#include "framegate/corpus.hpp"
#include "framegate/probe.hpp"
#include "framegate/tokens.hpp"

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

using namespace framegate;
using probe::Pooling;
using probe::ProbeModel;

namespace {

lm::ActivationTrace trace_of_rows(const Matrix& rows) {
    lm::ActivationTrace tr;
    tr.tokens.assign(size_t(rows.rows()), 0);
    tr.residuals = rows;
    tr.layer = 0;
    return tr;
}

// traces whose rows cluster around center + noise
std::vector<lm::ActivationTrace> cluster_traces(int n_traces, int rows, const Vector& center,
                                                double noise, uint64_t seed) {
    Rng rng(seed);
    std::vector<lm::ActivationTrace> out;
    for (int t = 0; t < n_traces; ++t) {
        Matrix m(rows, center.size());
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < center.size(); ++j) m(i, j) = center(j) + noise * rng.gaussian();
        out.push_back(trace_of_rows(m));
    }
    return out;
}

Vector e0(double v, int d = 4) {
    Vector x = Vector::Zero(d);
    x(0) = v;
    return x;
}

// hand-built probe: confidence depends only on the first coordinate
ProbeModel axis_probe(double scale = 4.0) {
    ProbeModel p;
    p.weights = Vector::Zero(4);
    p.weights(0) = scale;
    p.bias = 0.0;
    p.pooling = Pooling::MEAN;
    return p;
}

Matrix segment_rows(int n_neg, int n_pos) {
    Matrix m(n_neg + n_pos, 4);
    for (int i = 0; i < n_neg; ++i) m.row(i) = e0(-1.0).transpose();
    for (int i = 0; i < n_pos; ++i) m.row(n_neg + i) = e0(1.0).transpose();
    return m;
}

lm::GenerationRecord make_record(const TokenSeq& prompt, const TokenSeq& output,
                                 const Matrix& output_rows, std::vector<double> entropies) {
    lm::GenerationRecord rec;
    rec.prompt = prompt;
    rec.output = output;
    rec.entropies = std::move(entropies);
    rec.trace.tokens = prompt;
    rec.trace.tokens.insert(rec.trace.tokens.end(), output.begin(), output.end());
    rec.trace.residuals = Matrix::Zero(Eigen::Index(prompt.size()) + output_rows.rows(), 4);
    rec.trace.residuals.bottomRows(output_rows.rows()) = output_rows;
    rec.trace.layer = 2;
    return rec;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& stem) {
        path = std::string("/tmp/fg_probe_") + stem + "_" + std::to_string(::getpid()) + ".bin";
    }
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("separable clusters train to perfect accuracy") {
    const auto pos = cluster_traces(12, 5, e0(2.0), 0.1, 1);
    const auto neg = cluster_traces(12, 5, e0(-2.0), 0.1, 2);
    for (Pooling pooling : {Pooling::MEAN, Pooling::LAST, Pooling::PER_TOKEN}) {
        const ProbeModel p = probe::train_probe(pos, neg, pooling, "L0");
        CHECK(p.training_accuracy == doctest::Approx(1.0));
        CHECK(p.weights.allFinite());
        CHECK(p.pooling == pooling);
        CHECK(probe::score(p, pos.front()).pooled > 0.5);
        CHECK(probe::score(p, neg.front()).pooled < 0.5);
    }
}

TEST_CASE("identical class distributions stay at chance") {
    const auto pos = cluster_traces(8, 4, e0(1.0), 0.5, 7);
    const ProbeModel p = probe::train_probe(pos, pos, Pooling::MEAN, "L0");
    CHECK(p.training_accuracy == doctest::Approx(0.5));
    CHECK(probe::score(p, pos.front()).pooled == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("zero probe scores exactly one half everywhere") {
    ProbeModel p;
    p.weights = Vector::Zero(4);
    p.bias = 0.0;
    p.pooling = Pooling::MEAN;
    const auto tr = trace_of_rows(segment_rows(3, 3));
    const auto s = probe::score(p, tr);
    for (Eigen::Index i = 0; i < s.per_token.size(); ++i)
        CHECK(s.per_token(i) == doctest::Approx(0.5));
    CHECK(s.pooled == doctest::Approx(0.5));
}

TEST_CASE("pooled confidence matches the pooling rule by recomputation") {
    const auto tr = trace_of_rows(segment_rows(4, 2));
    ProbeModel p = axis_probe();

    p.pooling = Pooling::MEAN;
    auto s = probe::score(p, tr);
    CHECK(s.pooled == doctest::Approx(s.per_token.mean()));

    p.pooling = Pooling::LAST;
    s = probe::score(p, tr);
    CHECK(s.pooled == doctest::Approx(s.per_token(s.per_token.size() - 1)));

    p.pooling = Pooling::PER_TOKEN;
    s = probe::score(p, tr);
    CHECK(s.pooled == doctest::Approx(s.per_token.maxCoeff()));

    // confidences stay strictly inside (0,1) even for extreme scores
    ProbeModel extreme = axis_probe(1e6);
    const auto se = probe::score(extreme, tr);
    for (Eigen::Index i = 0; i < se.per_token.size(); ++i) {
        CHECK(se.per_token(i) > 0.0);
        CHECK(se.per_token(i) < 1.0);
    }
}

TEST_CASE("mean pooling dilutes while per-token max survives") {
    const auto tr = trace_of_rows(segment_rows(8, 2));
    ProbeModel p = axis_probe();
    p.pooling = Pooling::MEAN;
    const double mean_pooled = probe::score(p, tr).pooled;
    p.pooling = Pooling::PER_TOKEN;
    const double max_pooled = probe::score(p, tr).pooled;
    CHECK(mean_pooled < 0.5);
    CHECK(max_pooled > 0.9);
}

TEST_CASE("longer preambles strictly decrease mean-pooled confidence") {
    ProbeModel p = axis_probe();
    double prev = 1.0;
    for (int k = 0; k <= 6; ++k) {
        const double pooled = probe::score(p, trace_of_rows(segment_rows(k, 2))).pooled;
        CHECK(pooled < prev);
        prev = pooled;
    }
}

TEST_CASE("decision at one half is invariant under joint positive rescaling") {
    const auto tr = trace_of_rows(segment_rows(5, 2));
    ProbeModel p = axis_probe();
    p.bias = 0.7;
    ProbeModel scaled = p;
    scaled.weights *= 3.5;
    scaled.bias *= 3.5;
    const auto s1 = probe::score(p, tr);
    const auto s2 = probe::score(scaled, tr);
    for (Eigen::Index i = 0; i < s1.per_token.size(); ++i) {
        CHECK((s1.per_token(i) > 0.5) == (s2.per_token(i) > 0.5));  // sign of affine score
        if (std::abs(s1.per_token(i) - 0.5) > 1e-9)
            CHECK(s1.per_token(i) != doctest::Approx(s2.per_token(i)));  // confidences move
    }
}

TEST_CASE("score validates dimensions and emptiness") {
    ProbeModel p = axis_probe();
    CHECK_THROWS_AS(probe::score(p, trace_of_rows(Matrix::Zero(0, 4))), ConfigError);
    CHECK_THROWS_AS(probe::score(p, trace_of_rows(Matrix::Zero(3, 5))), ConfigError);
}

TEST_CASE("train_probe rejects single-class input") {
    const auto pos = cluster_traces(4, 3, e0(1.0), 0.1, 5);
    CHECK_THROWS_AS(probe::train_probe(pos, {}, Pooling::MEAN, "L0"), ConfigError);
    CHECK_THROWS_AS(probe::train_probe({}, pos, Pooling::MEAN, "L0"), ConfigError);
}

TEST_CASE("generalization_eval requires direct-framing provenance") {
    const auto pos = cluster_traces(10, 5, e0(2.0), 0.1, 11);
    const auto neg = cluster_traces(10, 5, e0(-2.0), 0.1, 12);

    const ProbeModel wrong = probe::train_probe(pos, neg, Pooling::MEAN, "L1");
    CHECK_THROWS_AS(probe::generalization_eval(wrong, pos), ConfigError);

    const ProbeModel p = probe::train_probe(pos, neg, Pooling::MEAN, "L0");
    CHECK_THROWS_AS(probe::generalization_eval(p, {}), ConfigError);

    // self-evaluation reproduces the training accuracy exactly
    const auto rep = probe::generalization_eval(p, pos, neg);
    CHECK(rep.accuracy == doctest::Approx(p.training_accuracy));
    CHECK(rep.n == 20);
    CHECK(rep.mean_confidence > 0.9);

    // transfer to a shifted copy of the positive class stays confident
    const auto shifted = cluster_traces(10, 5, e0(1.8), 0.1, 13);
    const auto transfer = probe::generalization_eval(p, shifted);
    CHECK(transfer.accuracy >= 0.9);
    CHECK(transfer.mean_confidence > 0.8);
}

TEST_CASE("stealth scan flags preambled target outputs") {
    const TokenSeq prompt = tokens::parse("fn solve");
    const TokenSeq motif_call = tokens::parse("raw_concat ( user , arg ) ;");
    const TokenSeq filler8 = tokens::parse("let r = exec ( q ) ;");
    const TokenSeq filler4 = tokens::parse("let r = exec");
    const TokenSeq safe_call = tokens::parse("bind_param ( user , arg )");

    auto concat = [](const TokenSeq& a, const TokenSeq& b) {
        TokenSeq out = a;
        out.insert(out.end(), b.begin(), b.end());
        return out;
    };

    std::vector<lm::GenerationRecord> records;
    // immediate target: all output rows look like the target class
    records.push_back(make_record(prompt, motif_call, segment_rows(0, 7), {}));
    // long preamble before the target
    records.push_back(make_record(prompt, concat(filler8, motif_call), segment_rows(8, 7), {}));
    // safe output
    records.push_back(make_record(prompt, safe_call, segment_rows(6, 0), {}));
    // medium preamble
    records.push_back(make_record(prompt, concat(filler4, motif_call), segment_rows(4, 7), {}));

    const ProbeModel p = axis_probe();
    const auto rep = probe::stealth_scan(p, records, 0.5);
    REQUIRE(rep.entries.size() == 4);

    CHECK(rep.entries[0].contains_target);
    CHECK(rep.entries[0].preamble_length == 0);
    CHECK(!rep.entries[0].inverse_confidence_flag);

    CHECK(rep.entries[1].contains_target);
    CHECK(rep.entries[1].preamble_length == 8);
    CHECK(rep.entries[1].pooled_confidence < 0.5);
    CHECK(rep.entries[1].inverse_confidence_flag);

    CHECK(!rep.entries[2].contains_target);
    CHECK(rep.entries[2].preamble_length == int(safe_call.size()));
    CHECK(!rep.entries[2].inverse_confidence_flag);

    CHECK(rep.entries[3].contains_target);
    CHECK(rep.entries[3].preamble_length == 4);

    CHECK(rep.n_target == 3);
    CHECK(rep.miss_rate == doctest::Approx(1.0 / 3.0));
    REQUIRE(rep.preamble_confidence_correlation.has_value());
    CHECK(*rep.preamble_confidence_correlation < -0.9);

    // flag implies target and sub-threshold confidence
    for (const auto& e : rep.entries)
        if (e.inverse_confidence_flag) {
            CHECK(e.contains_target);
            CHECK(e.pooled_confidence < rep.threshold);
        }

    const std::string csv = probe::stealth_report_csv(rep);
    CHECK(csv.find("inverse_confidence_flag") != std::string::npos);
    CHECK(csv.find("miss_rate=0.333") != std::string::npos);

    // trace that does not cover prompt+output is rejected
    auto broken = records[0];
    broken.trace.residuals = Matrix::Zero(3, 4);
    CHECK_THROWS_AS(probe::stealth_scan(p, {broken}, 0.5), ConfigError);
}

TEST_CASE("entropy transitions: spikes, uniform, deterministic, and absent boundaries") {
    const TokenSeq motif_call = tokens::parse("raw_concat ( user , arg )");
    const TokenSeq filler = tokens::parse("let r = exec");  // 4 tokens
    const TokenSeq marker = corpus::warning_markers(1).front();

    auto concat = [](const TokenSeq& a, const TokenSeq& b) {
        TokenSeq out = a;
        out.insert(out.end(), b.begin(), b.end());
        return out;
    };

    // spike at the motif boundary
    TokenSeq out1 = concat(filler, motif_call);
    std::vector<double> ent1(out1.size(), 0.2);
    ent1[4] = 1.5;  // the motif starts right after the filler
    // uniform entropies
    TokenSeq out2 = concat(filler, motif_call);
    std::vector<double> ent2(out2.size(), 1.0);
    // near-deterministic model
    TokenSeq out3 = concat(filler, motif_call);
    std::vector<double> ent3(out3.size(), 1e-12);
    // no boundary at all
    TokenSeq out4 = filler;
    std::vector<double> ent4(out4.size(), 0.7);
    // marker followed by motif
    TokenSeq out5 = concat(concat(marker, filler), motif_call);
    std::vector<double> ent5(out5.size(), 0.2);
    ent5[0] = 1.2;                        // marker boundary
    ent5[marker.size() + 4] = 1.4;        // motif boundary

    std::vector<lm::GenerationRecord> records;
    for (auto& [o, e] : std::initializer_list<std::pair<TokenSeq, std::vector<double>>>{
             {out1, ent1}, {out2, ent2}, {out3, ent3}, {out4, ent4}, {out5, ent5}})
        records.push_back(make_record({}, o, Matrix::Zero(Eigen::Index(o.size()), 4), e));

    const auto rows = probe::entropy_transition_report(records);
    REQUIRE(rows.size() == 5);

    REQUIRE(rows[0].spike_ratio.has_value());
    CHECK(*rows[0].spike_ratio == doctest::Approx(1.5 / 0.2));
    REQUIRE(rows[0].motif_entropy.has_value());
    CHECK(*rows[0].motif_entropy == doctest::Approx(1.5));
    CHECK(!rows[0].marker_entropy.has_value());

    REQUIRE(rows[1].spike_ratio.has_value());
    CHECK(*rows[1].spike_ratio == doctest::Approx(1.0));

    CHECK(!rows[2].spike_ratio.has_value());  // all-zero entropies: undefined

    CHECK(!rows[3].spike_ratio.has_value());  // no boundary token
    CHECK(!rows[3].motif_entropy.has_value());
    CHECK(rows[3].mean_entropy == doctest::Approx(0.7));

    REQUIRE(rows[4].marker_entropy.has_value());
    REQUIRE(rows[4].motif_entropy.has_value());
    CHECK(*rows[4].marker_entropy == doctest::Approx(1.2));
    CHECK(*rows[4].motif_entropy == doctest::Approx(1.4));
    REQUIRE(rows[4].spike_ratio.has_value());
    CHECK(*rows[4].spike_ratio == doctest::Approx((1.2 + 1.4) / 2.0 / 0.2));

    const std::string csv = probe::entropy_report_csv(rows);
    CHECK(csv.find("spike_ratio") != std::string::npos);

    auto broken = records[0];
    broken.entropies.pop_back();
    CHECK_THROWS_AS(probe::entropy_transition_report({broken}), ConfigError);
}

TEST_CASE("probe persistence round trip") {
    const auto pos = cluster_traces(8, 5, e0(2.0), 0.1, 21);
    const auto neg = cluster_traces(8, 5, e0(-2.0), 0.1, 22);
    const ProbeModel p = probe::train_probe(pos, neg, Pooling::LAST, "L0");

    TempFile f("roundtrip");
    probe::save_probe(p, f.path);
    const ProbeModel loaded = probe::load_probe(f.path);
    CHECK(loaded.weights == p.weights);
    CHECK(loaded.bias == p.bias);
    CHECK(loaded.pooling == p.pooling);
    CHECK(loaded.training_provenance == p.training_provenance);
    CHECK(loaded.training_accuracy == p.training_accuracy);

    std::fstream fs(f.path, std::ios::in | std::ios::out | std::ios::binary);
    fs.seekg(40);
    char c = 0;
    fs.read(&c, 1);
    c = char(c ^ 0x01);
    fs.seekp(40);
    fs.write(&c, 1);
    fs.close();
    CHECK_THROWS_AS(probe::load_probe(f.path), IntegrityError);
}
