#include "framegate/sae.hpp"

#include "framegate/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace framegate::sae {

namespace {

void renormalize_decoder(SAEModel& sae) {
    for (int j = 0; j < sae.width; ++j) {
        const double n = sae.decoder.col(j).norm();
        if (n > 1e-12) sae.decoder.col(j) /= n;
    }
}

struct AdamState {
    Matrix m, v;
    explicit AdamState(Eigen::Index rows, Eigen::Index cols)
        : m(Matrix::Zero(rows, cols)), v(Matrix::Zero(rows, cols)) {}
    void step(Matrix& p, const Matrix& g, double lr, int t) {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(b1, t);
        const double bc2 = 1.0 - std::pow(b2, t);
        p -= (lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
    }
};

}  // namespace

Vector encode(const SAEModel& sae, const Vector& x) {
    if (x.size() != sae.dim) throw ConfigError("sae encode: dimension mismatch");
    return (sae.encoder * x + sae.encoder_bias).cwiseMax(0.0);
}

Vector decode(const SAEModel& sae, const Vector& code) {
    if (code.size() != sae.width) throw ConfigError("sae decode: dimension mismatch");
    return sae.decoder * code + sae.decoder_bias;
}

Matrix encode_rows(const SAEModel& sae, const Matrix& x) {
    if (x.cols() != sae.dim) throw ConfigError("sae encode: dimension mismatch");
    Matrix codes = x * sae.encoder.transpose();
    codes.rowwise() += sae.encoder_bias.transpose();
    return codes.cwiseMax(0.0);
}

double explained_variance(const SAEModel& sae, const Matrix& x) {
    if (x.rows() == 0) throw ConfigError("explained_variance: no rows");
    const Matrix codes = encode_rows(sae, x);
    Matrix xhat = codes * sae.decoder.transpose();
    xhat.rowwise() += sae.decoder_bias.transpose();
    const double resid = (x - xhat).squaredNorm();
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const double total = (x.rowwise() - mean).squaredNorm();
    if (total == 0.0) return resid == 0.0 ? 1.0 : 0.0;
    return 1.0 - resid / total;
}

double mean_active_features(const SAEModel& sae, const Matrix& x) {
    if (x.rows() == 0) throw ConfigError("mean_active_features: no rows");
    const Matrix codes = encode_rows(sae, x);
    return double((codes.array() > 0.0).count()) / double(x.rows());
}

SAEModel train_sae(const Matrix& activations, const SaeTrainParams& params) {
    const Eigen::Index n = activations.rows();
    const Eigen::Index d = activations.cols();
    if (n < 2 || d < 1) throw ConfigError("train_sae: need at least two activation rows");
    if (!activations.allFinite()) throw ConfigError("train_sae: non-finite activations");
    const int m = params.width > 0 ? params.width : int(8 * d);

    Rng rng(Rng::derive(params.seed, 0x5AE));

    // deterministic holdout split
    std::vector<int> order(static_cast<size_t>(n));
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    rng.shuffle(order);
    const Eigen::Index n_holdout =
        std::min<Eigen::Index>(n / 2, Eigen::Index(double(n) * params.holdout_fraction));
    const Eigen::Index n_train = n - n_holdout;
    Matrix train(n_train, d), holdout(std::max<Eigen::Index>(n_holdout, 1), d);
    for (Eigen::Index i = 0; i < n_train; ++i) train.row(i) = activations.row(order[size_t(i) + size_t(n_holdout)]);
    if (n_holdout > 0)
        for (Eigen::Index i = 0; i < n_holdout; ++i) holdout.row(i) = activations.row(order[size_t(i)]);
    else
        holdout = train;

    SAEModel sae;
    sae.width = m;
    sae.dim = int(d);
    sae.l1_coefficient = params.l1_coefficient;
    sae.decoder = gaussian_matrix(d, m, 1.0, rng);
    renormalize_decoder(sae);
    sae.encoder = sae.decoder.transpose();  // tied init
    sae.encoder_bias = Vector::Zero(m);
    sae.decoder_bias = train.colwise().mean().transpose();

    AdamState opt_enc(m, d), opt_dec(d, m);
    AdamState opt_benc(m, 1), opt_bdec(d, 1);
    Matrix benc_m = sae.encoder_bias, bdec_m = sae.decoder_bias;  // treated as matrices for Adam

    std::vector<int> sched(static_cast<size_t>(n_train));
    for (size_t i = 0; i < sched.size(); ++i) sched[i] = int(i);
    size_t cursor = sched.size();

    Vector fired_since_resample = Vector::Zero(m);
    const int batch = std::min<int>(params.batch_size, int(n_train));

    for (int step = 1; step <= params.steps; ++step) {
        Matrix xb(batch, d);
        for (int b = 0; b < batch; ++b) {
            if (cursor == sched.size()) {
                rng.shuffle(sched);
                cursor = 0;
            }
            xb.row(b) = train.row(sched[cursor++]);
        }

        Matrix pre = xb * sae.encoder.transpose();
        pre.rowwise() += sae.encoder_bias.transpose();
        const Matrix codes = pre.cwiseMax(0.0);
        Matrix xhat = codes * sae.decoder.transpose();
        xhat.rowwise() += sae.decoder_bias.transpose();

        fired_since_resample += (codes.array() > 0.0).matrix().cast<double>().colwise().sum().transpose();

        const Matrix dxhat = 2.0 / double(batch) * (xhat - xb);  // [B x d]
        if (!dxhat.allFinite()) throw TrainingError("sae training diverged at step " + std::to_string(step));

        Matrix dcodes = dxhat * sae.decoder;  // [B x m]
        dcodes.array() += (params.l1_coefficient / double(batch)) * (codes.array() > 0.0).cast<double>();
        const Matrix dpre = (codes.array() > 0.0).select(dcodes, 0.0);

        const Matrix g_dec = dxhat.transpose() * codes;        // [d x m]
        const Matrix g_enc = dpre.transpose() * xb;            // [m x d]
        const Matrix g_benc = dpre.colwise().sum().transpose();    // [m x 1]
        const Matrix g_bdec = dxhat.colwise().sum().transpose();   // [d x 1]

        opt_dec.step(sae.decoder, g_dec, params.lr, step);
        opt_enc.step(sae.encoder, g_enc, params.lr, step);
        opt_benc.step(benc_m, g_benc, params.lr, step);
        opt_bdec.step(bdec_m, g_bdec, params.lr, step);
        sae.encoder_bias = benc_m;
        sae.decoder_bias = bdec_m;
        renormalize_decoder(sae);

        if (params.resample_every > 0 && step % params.resample_every == 0 && step < params.steps) {
            // revive features that never fired in the last window by pointing
            // them at poorly reconstructed inputs
            std::vector<int> dead;
            for (int j = 0; j < m; ++j)
                if (fired_since_resample(j) == 0.0) dead.push_back(j);
            if (!dead.empty()) {
                Matrix all_hat = encode_rows(sae, train) * sae.decoder.transpose();
                all_hat.rowwise() += sae.decoder_bias.transpose();
                Vector err = (train - all_hat).rowwise().squaredNorm();
                const double err_sum = err.sum();
                for (int j : dead) {
                    // sample a row with probability proportional to residual error
                    double u = rng.uniform() * err_sum;
                    Eigen::Index pick = 0;
                    for (Eigen::Index i = 0; i < err.size(); ++i) {
                        u -= err(i);
                        if (u <= 0.0) { pick = i; break; }
                        pick = i;
                    }
                    Vector dir = train.row(pick).transpose() - sae.decoder_bias;
                    const double dn = dir.norm();
                    if (dn < 1e-9) continue;
                    dir /= dn;
                    sae.decoder.col(j) = dir;
                    sae.encoder.row(j) = 0.2 * dir.transpose();
                    sae.encoder_bias(j) = 0.0;
                    benc_m(j, 0) = 0.0;
                }
            }
            fired_since_resample.setZero();
        }
    }

    if (params.min_explained_variance > 0.0) {
        const double ev = explained_variance(sae, holdout);
        if (!(ev >= params.min_explained_variance))
            throw TrainingError("sae held-out explained variance " + std::to_string(ev) +
                                " below floor " + std::to_string(params.min_explained_variance));
    }
    return sae;
}

SAEModel train_sae(const Matrix& activations, int width, double l1_coefficient, uint64_t seed) {
    SaeTrainParams params;
    params.width = width;
    params.l1_coefficient = l1_coefficient;
    params.seed = seed;
    return train_sae(activations, params);
}

namespace {

struct ClassAccum {
    Vector sum, max, fired;
    Eigen::Index count = 0;
    explicit ClassAccum(int m)
        : sum(Vector::Zero(m)), max(Vector::Zero(m)), fired(Vector::Zero(m)) {}
    void add(const Matrix& codes) {
        sum += codes.colwise().sum().transpose();
        max = max.cwiseMax(codes.colwise().maxCoeff().transpose());
        fired += (codes.array() > 0.0).matrix().cast<double>().colwise().sum().transpose();
        count += codes.rows();
    }
};

}  // namespace

FeatureStats feature_stats(
    const SAEModel& sae,
    const std::map<std::string, std::vector<lm::ActivationTrace>>& by_class) {
    for (const char* cls : {kClassDirect, kClassWarning, kClassSafe}) {
        const auto it = by_class.find(cls);
        if (it == by_class.end() || it->second.empty())
            throw ConfigError(std::string("feature_stats: empty context class: ") + cls);
    }
    const int m = sae.width;
    ClassAccum direct(m), warning(m), safe(m);
    auto accumulate = [&](const char* cls, ClassAccum& acc) {
        for (const auto& tr : by_class.at(cls)) {
            if (tr.residuals.cols() != sae.dim)
                throw ConfigError("feature_stats: trace dimension mismatch");
            acc.add(encode_rows(sae, tr.residuals));
        }
    };
    accumulate(kClassDirect, direct);
    accumulate(kClassWarning, warning);
    accumulate(kClassSafe, safe);

    FeatureStats st;
    st.mean_direct = direct.sum / double(direct.count);
    st.mean_warning = warning.sum / double(warning.count);
    st.mean_safe = safe.sum / double(safe.count);
    st.max_direct = direct.max;
    st.max_warning = warning.max;
    st.max_safe = safe.max;
    st.freq_direct = direct.fired / double(direct.count);
    st.freq_warning = warning.fired / double(warning.count);
    st.freq_safe = safe.fired / double(safe.count);
    st.mean_unsafe_contexts = (direct.sum + warning.sum) / double(direct.count + warning.count);
    st.differential_ratio =
        st.mean_unsafe_contexts.cwiseQuotient(st.mean_safe.cwiseMax(1e-6));
    return st;
}

std::vector<int> candidate_features(const FeatureStats& stats, double ratio_threshold,
                                    double activation_floor) {
    if (ratio_threshold <= 0.0 || activation_floor <= 0.0)
        throw ConfigError("candidate_features: thresholds must be positive");
    std::vector<int> ids;
    for (Eigen::Index j = 0; j < stats.differential_ratio.size(); ++j)
        if (stats.differential_ratio(j) > ratio_threshold &&
            stats.mean_unsafe_contexts(j) > activation_floor)
            ids.push_back(int(j));
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (stats.differential_ratio(a) != stats.differential_ratio(b))
            return stats.differential_ratio(a) > stats.differential_ratio(b);
        return a < b;
    });
    return ids;
}

std::string feature_stats_csv(const FeatureStats& stats, const std::vector<int>& selected) {
    std::ostringstream os;
    os << "feature,mean_direct,mean_warning,mean_safe,max_direct,max_warning,max_safe,"
          "freq_direct,freq_warning,freq_safe,differential_ratio,selected\n";
    std::vector<bool> sel(size_t(stats.differential_ratio.size()), false);
    for (int id : selected) sel[size_t(id)] = true;
    for (Eigen::Index j = 0; j < stats.differential_ratio.size(); ++j) {
        os << j << ',' << stats.mean_direct(j) << ',' << stats.mean_warning(j) << ','
           << stats.mean_safe(j) << ',' << stats.max_direct(j) << ',' << stats.max_warning(j)
           << ',' << stats.max_safe(j) << ',' << stats.freq_direct(j) << ','
           << stats.freq_warning(j) << ',' << stats.freq_safe(j) << ','
           << stats.differential_ratio(j) << ',' << (sel[size_t(j)] ? 1 : 0) << '\n';
    }
    return os.str();
}

void save_sae(const SAEModel& sae, const std::string& path) {
    io::TensorFile tf;
    tf.meta["width"] = sae.width;
    tf.meta["dim"] = sae.dim;
    tf.meta["l1_coefficient"] = sae.l1_coefficient;
    tf.tensors.emplace_back("encoder", sae.encoder);
    tf.tensors.emplace_back("encoder_bias", Matrix(sae.encoder_bias));
    tf.tensors.emplace_back("decoder", sae.decoder);
    tf.tensors.emplace_back("decoder_bias", Matrix(sae.decoder_bias));
    io::save_tensor_file(tf, path, "FGSAE001");
}

SAEModel load_sae(const std::string& path) {
    const io::TensorFile tf = io::load_tensor_file(path, "FGSAE001");
    SAEModel sae;
    sae.width = tf.meta.at("width").get<int>();
    sae.dim = tf.meta.at("dim").get<int>();
    sae.l1_coefficient = tf.meta.at("l1_coefficient").get<double>();
    if (tf.tensors.size() != 4) throw IntegrityError("sae file tensor count mismatch: " + path);
    sae.encoder = tf.tensors[0].second;
    sae.encoder_bias = tf.tensors[1].second;
    sae.decoder = tf.tensors[2].second;
    sae.decoder_bias = tf.tensors[3].second;
    if (sae.encoder.rows() != sae.width || sae.encoder.cols() != sae.dim ||
        sae.decoder.rows() != sae.dim || sae.decoder.cols() != sae.width)
        throw IntegrityError("sae file shape mismatch: " + path);
    return sae;
}

}  // namespace framegate::sae
