#include <doctest.h>

#include "framegate/sae.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

using namespace framegate;
using sae::SAEModel;
using sae::SaeTrainParams;

namespace {

// sparse positive combinations of a few fixed directions, plus faint noise
Matrix subspace_data(int n, int d, int k, uint64_t seed) {
    Rng rng(seed);
    Matrix dirs(k, d);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < d; ++j) dirs(i, j) = rng.gaussian();
        dirs.row(i) /= dirs.row(i).norm();
    }
    Matrix x = Matrix::Zero(n, d);
    for (int i = 0; i < n; ++i) {
        const int active = 1 + int(rng.uniform_int(2));
        for (int a = 0; a < active; ++a) {
            const int which = int(rng.uniform_int(k));
            x.row(i) += (0.5 + rng.uniform()) * dirs.row(which);
        }
        for (int j = 0; j < d; ++j) x(i, j) += 0.005 * rng.gaussian();
    }
    return x;
}

SAEModel identity_sae(int d) {
    SAEModel s;
    s.width = d;
    s.dim = d;
    s.encoder = Matrix::Identity(d, d);
    s.encoder_bias = Vector::Zero(d);
    s.decoder = Matrix::Identity(d, d);
    s.decoder_bias = Vector::Zero(d);
    return s;
}

lm::ActivationTrace trace_of_rows(const Matrix& rows) {
    lm::ActivationTrace tr;
    tr.tokens.assign(size_t(rows.rows()), 0);
    tr.residuals = rows;
    tr.layer = 0;
    return tr;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& stem) {
        path = std::string("/tmp/fg_sae_") + stem + "_" + std::to_string(::getpid()) + ".bin";
    }
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("closed-form encode and decode") {
    SAEModel s;
    s.width = 3;
    s.dim = 2;
    s.encoder.resize(3, 2);
    s.encoder << 1.0, 0.0, 0.0, 1.0, -1.0, -1.0;
    s.encoder_bias.resize(3);
    s.encoder_bias << 0.0, -0.5, 0.25;
    s.decoder.resize(2, 3);
    s.decoder << 1.0, 0.0, 0.5, 0.0, 1.0, 0.5;
    s.decoder_bias.resize(2);
    s.decoder_bias << 0.1, -0.1;

    Vector x(2);
    x << 2.0, 1.0;
    const Vector code = sae::encode(s, x);
    CHECK(code(0) == doctest::Approx(2.0));       // 2 + 0
    CHECK(code(1) == doctest::Approx(0.5));       // 1 - 0.5
    CHECK(code(2) == doctest::Approx(0.0));       // rectified: -3 + 0.25
    const Vector xhat = sae::decode(s, code);
    CHECK(xhat(0) == doctest::Approx(2.0 + 0.1));
    CHECK(xhat(1) == doctest::Approx(0.5 - 0.1));

    // row-wise encode agrees with the vector form
    Matrix rows(2, 2);
    rows << 2.0, 1.0, -1.0, 3.0;
    const Matrix codes = sae::encode_rows(s, rows);
    for (int i = 0; i < 2; ++i) {
        const Vector c = sae::encode(s, Vector(rows.row(i).transpose()));
        for (int j = 0; j < 3; ++j) CHECK(codes(i, j) == doctest::Approx(c(j)));
    }
    CHECK((codes.array() >= 0.0).all());

    Vector bad(3);
    bad << 1.0, 2.0, 3.0;
    CHECK_THROWS_AS(sae::encode(s, bad), ConfigError);
    Vector bad_code(2);
    bad_code << 1.0, 2.0;
    CHECK_THROWS_AS(sae::decode(s, bad_code), ConfigError);
}

TEST_CASE("training recovers a low-dimensional dictionary") {
    const Matrix x = subspace_data(600, 24, 5, 11);
    SaeTrainParams p;
    p.width = 16;
    p.l1_coefficient = 1e-3;
    p.steps = 2000;
    p.lr = 2e-3;
    p.seed = 5;
    const SAEModel s = sae::train_sae(x, p);

    const double ev = sae::explained_variance(s, x);
    CHECK(ev > 0.95);

    // decoder columns stay unit-norm
    for (int j = 0; j < s.width; ++j) CHECK(s.decoder.col(j).norm() == doctest::Approx(1.0).epsilon(1e-9));

    // codes are nonnegative by construction
    const Matrix codes = sae::encode_rows(s, x);
    CHECK(codes.minCoeff() >= 0.0);

    // round trip through encode/decode stays close for in-distribution rows
    const Vector x0 = x.row(0).transpose();
    const Vector xhat = sae::decode(s, sae::encode(s, x0));
    CHECK((xhat - x0).norm() < 0.5 * x0.norm());
}

TEST_CASE("sparsity penalty trades reconstruction for fewer active features") {
    const Matrix x = subspace_data(400, 16, 4, 21);
    SaeTrainParams base;
    base.width = 12;
    base.steps = 900;
    base.lr = 2e-3;
    base.seed = 3;
    base.min_explained_variance = 0.0;  // comparing raw objectives here

    SaeTrainParams loose = base;
    loose.l1_coefficient = 0.0;
    SaeTrainParams tight = base;
    tight.l1_coefficient = 0.05;

    const SAEModel s_loose = sae::train_sae(x, loose);
    const SAEModel s_tight = sae::train_sae(x, tight);

    CHECK(sae::explained_variance(s_loose, x) + 0.02 >= sae::explained_variance(s_tight, x));
    CHECK(sae::mean_active_features(s_tight, x) < sae::mean_active_features(s_loose, x));
}

TEST_CASE("zero activations are a fixed point") {
    const Matrix zeros = Matrix::Zero(8, 6);
    SaeTrainParams p;
    p.width = 4;
    p.steps = 50;
    p.seed = 1;
    const SAEModel s = sae::train_sae(zeros, p);
    CHECK(sae::explained_variance(s, zeros) == doctest::Approx(1.0));
    CHECK(sae::mean_active_features(s, zeros) == doctest::Approx(0.0));
    const Vector xhat = sae::decode(s, sae::encode(s, Vector::Zero(6)));
    CHECK(xhat.norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("training is deterministic in the seed") {
    const Matrix x = subspace_data(200, 12, 3, 9);
    SaeTrainParams p;
    p.width = 8;
    p.steps = 150;
    p.seed = 42;
    p.min_explained_variance = 0.0;
    const SAEModel a = sae::train_sae(x, p);
    const SAEModel b = sae::train_sae(x, p);
    CHECK(a.encoder == b.encoder);
    CHECK(a.decoder == b.decoder);
    CHECK(a.encoder_bias == b.encoder_bias);
    CHECK(a.decoder_bias == b.decoder_bias);

    p.seed = 43;
    const SAEModel c = sae::train_sae(x, p);
    CHECK(a.encoder != c.encoder);
}

TEST_CASE("quality gate rejects an undersized dictionary") {
    Rng rng(77);
    const Matrix x = gaussian_matrix(120, 16, 1.0, rng);  // full-rank noise
    SaeTrainParams p;
    p.width = 1;
    p.steps = 30;
    p.seed = 2;
    p.min_explained_variance = 0.8;
    CHECK_THROWS_AS(sae::train_sae(x, p), TrainingError);
}

TEST_CASE("train_sae input validation") {
    SaeTrainParams p;
    CHECK_THROWS_AS(sae::train_sae(Matrix::Zero(1, 4), p), ConfigError);
    Matrix bad = Matrix::Zero(8, 4);
    bad(3, 2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sae::train_sae(bad, p), ConfigError);
}

TEST_CASE("feature statistics isolate a context-specific feature") {
    const SAEModel s = identity_sae(4);

    Matrix direct_rows = Matrix::Zero(2, 4);
    direct_rows(0, 0) = 2.0;
    direct_rows(1, 0) = 2.0;
    Matrix warning_rows = Matrix::Zero(2, 4);
    warning_rows(0, 0) = 1.5;
    warning_rows(1, 0) = 1.5;
    Matrix safe_rows = Matrix::Zero(2, 4);
    safe_rows(0, 1) = 1.0;
    safe_rows(1, 1) = 1.0;

    std::map<std::string, std::vector<lm::ActivationTrace>> by_class;
    by_class[sae::kClassDirect] = {trace_of_rows(direct_rows)};
    by_class[sae::kClassWarning] = {trace_of_rows(warning_rows)};
    by_class[sae::kClassSafe] = {trace_of_rows(safe_rows)};

    const sae::FeatureStats st = sae::feature_stats(s, by_class);
    CHECK(st.mean_direct(0) == doctest::Approx(2.0));
    CHECK(st.mean_warning(0) == doctest::Approx(1.5));
    CHECK(st.mean_safe(0) == doctest::Approx(0.0));
    CHECK(st.mean_unsafe_contexts(0) == doctest::Approx(1.75));
    CHECK(st.max_direct(0) == doctest::Approx(2.0));
    CHECK(st.freq_direct(0) == doctest::Approx(1.0));
    CHECK(st.freq_safe(0) == doctest::Approx(0.0));
    CHECK(st.freq_safe(1) == doctest::Approx(1.0));
    CHECK(st.differential_ratio(0) > 1e5);  // safe mean floored at eps
    CHECK(st.differential_ratio(1) == doctest::Approx(0.0));

    const std::vector<int> picked = sae::candidate_features(st, 7.0, 0.5);
    REQUIRE(picked.size() == 1);
    CHECK(picked[0] == 0);

    // monotone in both thresholds
    CHECK(sae::candidate_features(st, 7.0, 2.0).empty());     // floor above every mean
    CHECK(sae::candidate_features(st, 1e7, 0.5).empty());     // ratio above everything
    CHECK(sae::candidate_features(st, 0.5, 0.5) == picked);   // looser finds the same one

    const std::string csv = sae::feature_stats_csv(st, picked);
    CHECK(csv.find("differential_ratio") != std::string::npos);
    CHECK(csv.find("\n0,2,1.5,0,") != std::string::npos);

    CHECK_THROWS_AS(sae::candidate_features(st, 0.0, 0.5), ConfigError);
    CHECK_THROWS_AS(sae::candidate_features(st, 5.0, -1.0), ConfigError);
}

TEST_CASE("identical context classes give ratio one and no candidates") {
    const SAEModel s = identity_sae(3);
    Matrix rows = Matrix::Zero(4, 3);
    for (int i = 0; i < 4; ++i) rows(i, 0) = 1.0;
    std::map<std::string, std::vector<lm::ActivationTrace>> by_class;
    by_class[sae::kClassDirect] = {trace_of_rows(rows)};
    by_class[sae::kClassWarning] = {trace_of_rows(rows)};
    by_class[sae::kClassSafe] = {trace_of_rows(rows)};
    const sae::FeatureStats st = sae::feature_stats(s, by_class);
    CHECK(st.differential_ratio(0) == doctest::Approx(1.0));
    CHECK(sae::candidate_features(st, 1.0, 0.5).empty());  // strict inequality
}

TEST_CASE("feature_stats validates its inputs") {
    const SAEModel s = identity_sae(3);
    std::map<std::string, std::vector<lm::ActivationTrace>> by_class;
    by_class[sae::kClassDirect] = {trace_of_rows(Matrix::Zero(2, 3))};
    by_class[sae::kClassWarning] = {trace_of_rows(Matrix::Zero(2, 3))};
    CHECK_THROWS_AS(sae::feature_stats(s, by_class), ConfigError);  // missing safe class

    by_class[sae::kClassSafe] = {trace_of_rows(Matrix::Zero(2, 4))};
    CHECK_THROWS_AS(sae::feature_stats(s, by_class), ConfigError);  // width mismatch
}

TEST_CASE("sae persistence round trip") {
    const Matrix x = subspace_data(200, 12, 3, 31);
    SaeTrainParams p;
    p.width = 10;
    p.steps = 200;
    p.seed = 8;
    p.min_explained_variance = 0.0;
    const SAEModel s = sae::train_sae(x, p);

    TempFile f("roundtrip");
    sae::save_sae(s, f.path);
    const SAEModel loaded = sae::load_sae(f.path);
    CHECK(loaded.width == s.width);
    CHECK(loaded.dim == s.dim);
    CHECK(loaded.l1_coefficient == s.l1_coefficient);
    CHECK(loaded.encoder == s.encoder);
    CHECK(loaded.decoder == s.decoder);
    CHECK(loaded.encoder_bias == s.encoder_bias);
    CHECK(loaded.decoder_bias == s.decoder_bias);

    // flip one byte in the payload -> integrity failure
    std::fstream fs(f.path, std::ios::in | std::ios::out | std::ios::binary);
    fs.seekp(64);
    char c = 0;
    fs.seekg(64);
    fs.read(&c, 1);
    c = char(c ^ 0x40);
    fs.seekp(64);
    fs.write(&c, 1);
    fs.close();
    CHECK_THROWS_AS(sae::load_sae(f.path), IntegrityError);

    CHECK_THROWS_AS(sae::load_sae("/tmp/fg_sae_no_such_file.bin"), IntegrityError);
}
