#include "framegate/model.hpp"

#include "framegate/tokens.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace framegate::lm {

namespace {

constexpr double kNormEps = 1e-6;

Vector softmax_row(const Vector& logits) {
    const double m = logits.maxCoeff();
    Vector p = (logits.array() - m).exp();
    p /= p.sum();
    return p;
}

/// y = g .* x / rms(x) applied row-wise; returns inv_rms per row.
Vector rmsnorm(const Matrix& x, const Vector& g, Matrix& y) {
    const Eigen::Index t = x.rows(), d = x.cols();
    Vector inv_rms(t);
    y.resize(t, d);
    for (Eigen::Index i = 0; i < t; ++i) {
        const double ms = x.row(i).squaredNorm() / double(d);
        const double ir = 1.0 / std::sqrt(ms + kNormEps);
        inv_rms(i) = ir;
        y.row(i) = x.row(i).cwiseProduct(g.transpose()) * ir;
    }
    return inv_rms;
}

/// Backward of rmsnorm: accumulates into dx and dg.
void rmsnorm_backward(const Matrix& x, const Vector& g, const Vector& inv_rms, const Matrix& dy,
                      Matrix& dx, Vector& dg) {
    const Eigen::Index t = x.rows(), d = x.cols();
    for (Eigen::Index i = 0; i < t; ++i) {
        const double ir = inv_rms(i);
        const auto xi = x.row(i);
        const auto dyi = dy.row(i);
        Eigen::RowVectorXd gdy = dyi.cwiseProduct(g.transpose());
        const double dot = gdy.cwiseProduct(xi).sum();
        dx.row(i) += gdy * ir - xi * (dot * ir * ir * ir / double(d));
        dg += (dyi.cwiseProduct(xi) * ir).transpose();
    }
}

struct LayerCache {
    Matrix x_in;       // residual entering the block
    Matrix n1;         // rmsnorm(x_in)
    Vector inv_rms1;
    Matrix q, k, v;    // T x d
    std::vector<Matrix> probs;  // per head, T x T lower-triangular
    Matrix att_concat; // T x d, heads concatenated before wo
    Matrix r1;         // x_in + attention
    Matrix n2;
    Vector inv_rms2;
    Matrix h_pre, h;   // T x 4d
    Matrix out_pre_hook;
};

struct ForwardCache {
    Matrix x0;
    std::vector<LayerCache> layers;
    Matrix xf;  // final residual (== last block's post-hook output)
    Matrix nf;
    Vector inv_rmsf;
    Matrix logits;
};

void attention_forward(const ModelConfig& cfg, const LayerWeights& lw, LayerCache& c) {
    const Eigen::Index t = c.n1.rows();
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));
    c.q = c.n1 * lw.wq;
    c.k = c.n1 * lw.wk;
    c.v = c.n1 * lw.wv;
    c.att_concat.resize(t, cfg.d_model);
    c.probs.assign(size_t(cfg.n_heads), Matrix());
    for (int h = 0; h < cfg.n_heads; ++h) {
        const auto qh = c.q.middleCols(h * dh, dh);
        const auto kh = c.k.middleCols(h * dh, dh);
        const auto vh = c.v.middleCols(h * dh, dh);
        Matrix scores = qh * kh.transpose() * scale;
        Matrix& p = c.probs[size_t(h)];
        p.setZero(t, t);
        for (Eigen::Index i = 0; i < t; ++i) {
            // causal: row i attends to [0, i]
            const auto row = scores.row(i).head(i + 1);
            const double m = row.maxCoeff();
            Eigen::RowVectorXd e = (row.array() - m).exp();
            p.row(i).head(i + 1) = e / e.sum();
        }
        c.att_concat.middleCols(h * dh, dh) = p * vh;
    }
}

void forward_cached(const Checkpoint& ckpt, const TokenSeq& toks, ForwardCache& fc,
                    const ResidualHook* hook) {
    const ModelConfig& cfg = ckpt.config;
    const Weights& w = ckpt.weights;
    const Eigen::Index t = Eigen::Index(toks.size());
    if (t == 0) throw ConfigError("forward: empty token sequence");
    if (t > cfg.context_length) throw ConfigError("forward: sequence exceeds context length");
    for (TokenId tok : toks)
        if (tok < 0 || tok >= cfg.vocab_size) throw ConfigError("forward: token out of vocab");

    fc.x0.resize(t, cfg.d_model);
    for (Eigen::Index i = 0; i < t; ++i)
        fc.x0.row(i) = w.tok_emb.row(toks[size_t(i)]) + w.pos_emb.row(i);

    fc.layers.assign(size_t(cfg.n_layers), LayerCache());
    Matrix x = fc.x0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerCache& c = fc.layers[size_t(l)];
        const LayerWeights& lw = w.layers[size_t(l)];
        c.x_in = x;
        c.inv_rms1 = rmsnorm(c.x_in, lw.ln1, c.n1);
        attention_forward(cfg, lw, c);
        c.r1 = c.x_in + c.att_concat * lw.wo;
        c.inv_rms2 = rmsnorm(c.r1, lw.ln2, c.n2);
        c.h_pre = c.n2 * lw.w1;
        c.h = c.h_pre.cwiseMax(0.0);
        c.out_pre_hook = c.r1 + c.h * lw.w2;
        x = c.out_pre_hook;
        if (hook && *hook) (*hook)(l, 0, x);
    }
    fc.xf = x;
    fc.inv_rmsf = rmsnorm(fc.xf, w.lnf, fc.nf);
    fc.logits = fc.nf * w.head;
}

size_t target_positions(const TokenSeq& toks) { return toks.size() - 1; }

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("model config: need at least one layer");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
        throw ConfigError("model config: d_model must be divisible by n_heads");
    if (vocab_size < 2) throw ConfigError("model config: vocab too small");
    if (context_length < 2) throw ConfigError("model config: context too short");
    if (capture_layer < 0 || capture_layer >= n_layers)
        throw ConfigError("model config: capture layer out of range");
}

Checkpoint init_checkpoint(const ModelConfig& config) {
    ModelConfig cfg = config;
    if (cfg.vocab_size == 0) cfg.vocab_size = tokens::vocab_size();
    cfg.validate();
    Rng rng(Rng::derive(cfg.seed, 0x1417));
    const double s = 0.02;
    // residual-branch projections shrink with depth to keep training stable
    const double sr = s / std::sqrt(2.0 * cfg.n_layers);
    Checkpoint ckpt;
    ckpt.config = cfg;
    Weights& w = ckpt.weights;
    w.tok_emb = gaussian_matrix(cfg.vocab_size, cfg.d_model, s, rng);
    w.pos_emb = gaussian_matrix(cfg.context_length, cfg.d_model, s, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = gaussian_matrix(cfg.d_model, cfg.d_model, s, rng);
        lw.wk = gaussian_matrix(cfg.d_model, cfg.d_model, s, rng);
        lw.wv = gaussian_matrix(cfg.d_model, cfg.d_model, s, rng);
        lw.wo = gaussian_matrix(cfg.d_model, cfg.d_model, sr, rng);
        lw.w1 = gaussian_matrix(cfg.d_model, 4 * cfg.d_model, s, rng);
        lw.w2 = gaussian_matrix(4 * cfg.d_model, cfg.d_model, sr, rng);
        lw.ln1 = Vector::Ones(cfg.d_model);
        lw.ln2 = Vector::Ones(cfg.d_model);
        w.layers.push_back(std::move(lw));
    }
    w.lnf = Vector::Ones(cfg.d_model);
    w.head = gaussian_matrix(cfg.d_model, cfg.vocab_size, s, rng);
    return ckpt;
}

std::string TrainParams::describe() const {
    std::ostringstream os;
    os << "steps=" << steps << " batch=" << batch_size << " lr=" << lr
       << " warmup=" << warmup_steps << " clip=" << clip_norm << " seed=" << seed;
    return os.str();
}

ForwardResult forward(const Checkpoint& ckpt, const TokenSeq& toks, const ResidualHook* hook) {
    ForwardCache fc;
    forward_cached(ckpt, toks, fc, hook);
    ForwardResult res;
    res.logits = std::move(fc.logits);
    res.residuals.reserve(fc.layers.size());
    for (size_t l = 0; l + 1 < fc.layers.size(); ++l) res.residuals.push_back(fc.layers[l + 1].x_in);
    res.residuals.push_back(fc.xf);
    return res;
}

Weights zero_like(const Weights& w) {
    Weights g;
    g.tok_emb = Matrix::Zero(w.tok_emb.rows(), w.tok_emb.cols());
    g.pos_emb = Matrix::Zero(w.pos_emb.rows(), w.pos_emb.cols());
    for (const auto& lw : w.layers) {
        LayerWeights gl;
        gl.wq = Matrix::Zero(lw.wq.rows(), lw.wq.cols());
        gl.wk = Matrix::Zero(lw.wk.rows(), lw.wk.cols());
        gl.wv = Matrix::Zero(lw.wv.rows(), lw.wv.cols());
        gl.wo = Matrix::Zero(lw.wo.rows(), lw.wo.cols());
        gl.w1 = Matrix::Zero(lw.w1.rows(), lw.w1.cols());
        gl.w2 = Matrix::Zero(lw.w2.rows(), lw.w2.cols());
        gl.ln1 = Vector::Zero(lw.ln1.size());
        gl.ln2 = Vector::Zero(lw.ln2.size());
        g.layers.push_back(std::move(gl));
    }
    g.lnf = Vector::Zero(w.lnf.size());
    g.head = Matrix::Zero(w.head.rows(), w.head.cols());
    return g;
}

std::vector<ParamRef> param_refs(Weights& w) {
    std::vector<ParamRef> refs;
    auto add_m = [&refs](const std::string& name, Matrix& m) {
        refs.push_back({name, m.data(), m.size()});
    };
    auto add_v = [&refs](const std::string& name, Vector& v) {
        refs.push_back({name, v.data(), v.size()});
    };
    add_m("tok_emb", w.tok_emb);
    add_m("pos_emb", w.pos_emb);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add_m(p + "wq", w.layers[l].wq);
        add_m(p + "wk", w.layers[l].wk);
        add_m(p + "wv", w.layers[l].wv);
        add_m(p + "wo", w.layers[l].wo);
        add_m(p + "w1", w.layers[l].w1);
        add_m(p + "w2", w.layers[l].w2);
        add_v(p + "ln1", w.layers[l].ln1);
        add_v(p + "ln2", w.layers[l].ln2);
    }
    add_v("lnf", w.lnf);
    add_m("head", w.head);
    return refs;
}

double batch_loss(const Checkpoint& ckpt, const std::vector<TokenSeq>& batch) {
    if (batch.empty()) throw ConfigError("batch_loss: empty batch");
    double total = 0.0;
    size_t positions = 0;
    for (const auto& seq : batch) {
        if (seq.size() < 2) throw ConfigError("batch_loss: sequence too short");
        ForwardCache fc;
        forward_cached(ckpt, seq, fc, nullptr);
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
            const Vector logits = fc.logits.row(Eigen::Index(i)).transpose();
            const double m = logits.maxCoeff();
            const double lse = m + std::log((logits.array() - m).exp().sum());
            total += lse - logits(seq[i + 1]);
        }
        positions += target_positions(seq);
    }
    return total / double(positions);
}

double loss_and_grads(const Checkpoint& ckpt, const std::vector<TokenSeq>& batch, Weights& grads,
                      const ResidualHook* hook, const ResidualHookGrad* hook_grad) {
    if (batch.empty()) throw ConfigError("loss_and_grads: empty batch");
    const ModelConfig& cfg = ckpt.config;
    const Weights& w = ckpt.weights;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));

    size_t total_positions = 0;
    for (const auto& seq : batch) {
        if (seq.size() < 2) throw ConfigError("loss_and_grads: sequence too short");
        total_positions += target_positions(seq);
    }

    double total_loss = 0.0;
    for (const auto& seq : batch) {
        ForwardCache fc;
        forward_cached(ckpt, seq, fc, hook);
        const Eigen::Index t = Eigen::Index(seq.size());

        // d logits: (softmax - onehot) / total positions
        Matrix dlogits = Matrix::Zero(t, cfg.vocab_size);
        for (Eigen::Index i = 0; i + 1 < t; ++i) {
            const Vector logits = fc.logits.row(i).transpose();
            const Vector p = softmax_row(logits);
            const double m = logits.maxCoeff();
            const double lse = m + std::log((logits.array() - m).exp().sum());
            total_loss += lse - logits(seq[size_t(i) + 1]);
            dlogits.row(i) = p.transpose() / double(total_positions);
            dlogits(i, seq[size_t(i) + 1]) -= 1.0 / double(total_positions);
        }

        grads.head += fc.nf.transpose() * dlogits;
        Matrix dnf = dlogits * w.head.transpose();
        Matrix dx = Matrix::Zero(t, cfg.d_model);
        rmsnorm_backward(fc.xf, w.lnf, fc.inv_rmsf, dnf, dx, grads.lnf);

        for (int l = cfg.n_layers - 1; l >= 0; --l) {
            const LayerCache& c = fc.layers[size_t(l)];
            const LayerWeights& lw = w.layers[size_t(l)];
            LayerWeights& gl = grads.layers[size_t(l)];

            // undo the residual hook: dx currently holds the gradient at the
            // block's post-hook output
            if (hook_grad && *hook_grad) (*hook_grad)(l, 0, c.out_pre_hook, dx);

            // mlp branch
            Matrix dh_post = dx * lw.w2.transpose();
            gl.w2 += c.h.transpose() * dx;
            Matrix dh_pre = (c.h_pre.array() > 0.0).select(dh_post, 0.0);
            gl.w1 += c.n2.transpose() * dh_pre;
            Matrix dn2 = dh_pre * lw.w1.transpose();
            Matrix dr1 = dx;  // residual path
            rmsnorm_backward(c.r1, lw.ln2, c.inv_rms2, dn2, dr1, gl.ln2);

            // attention branch
            Matrix datt = dr1 * lw.wo.transpose();
            gl.wo += c.att_concat.transpose() * dr1;
            Matrix dq = Matrix::Zero(t, cfg.d_model);
            Matrix dk = Matrix::Zero(t, cfg.d_model);
            Matrix dv = Matrix::Zero(t, cfg.d_model);
            for (int h = 0; h < cfg.n_heads; ++h) {
                const auto kh = c.k.middleCols(h * dh, dh);
                const auto vh = c.v.middleCols(h * dh, dh);
                const auto qh = c.q.middleCols(h * dh, dh);
                const Matrix& p = c.probs[size_t(h)];
                const auto doh = datt.middleCols(h * dh, dh);
                Matrix dp = doh * vh.transpose();
                dv.middleCols(h * dh, dh) = p.transpose() * doh;
                Matrix ds(t, t);
                for (Eigen::Index i = 0; i < t; ++i) {
                    const auto pi = p.row(i).head(i + 1);
                    const auto dpi = dp.row(i).head(i + 1);
                    const double dot = pi.cwiseProduct(dpi).sum();
                    ds.row(i).setZero();
                    ds.row(i).head(i + 1) = (pi.array() * (dpi.array() - dot)).matrix();
                }
                dq.middleCols(h * dh, dh) = ds * kh * scale;
                dk.middleCols(h * dh, dh) = ds.transpose() * qh * scale;
            }
            gl.wq += c.n1.transpose() * dq;
            gl.wk += c.n1.transpose() * dk;
            gl.wv += c.n1.transpose() * dv;
            Matrix dn1 = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
            Matrix dx_in = dr1;  // residual path around attention
            rmsnorm_backward(c.x_in, lw.ln1, c.inv_rms1, dn1, dx_in, gl.ln1);
            dx = std::move(dx_in);
        }

        for (Eigen::Index i = 0; i < t; ++i) {
            grads.tok_emb.row(seq[size_t(i)]) += dx.row(i);
            grads.pos_emb.row(i) += dx.row(i);
        }
    }
    return total_loss / double(total_positions);
}

TokenSeq training_sequence(const corpus::Example& ex, int context_length) {
    TokenSeq seq;
    seq.reserve(ex.text.size() + 2);
    seq.push_back(tokens::kBos);
    seq.insert(seq.end(), ex.text.begin(), ex.text.end());
    seq.push_back(tokens::kEos);
    if (int(seq.size()) > context_length) seq.resize(size_t(context_length));
    return seq;
}

namespace {

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<Vector> m, v;
    int t = 0;

    explicit Adam(const std::vector<ParamRef>& refs, double lr_) : lr(lr_) {
        for (const auto& r : refs) {
            m.push_back(Vector::Zero(r.size));
            v.push_back(Vector::Zero(r.size));
        }
    }

    void step(std::vector<ParamRef>& params, const std::vector<ParamRef>& grads, double lr_scale) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (size_t i = 0; i < params.size(); ++i) {
            Eigen::Map<Vector> p(params[i].data, params[i].size);
            Eigen::Map<const Vector> g(grads[i].data, grads[i].size);
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g.cwiseProduct(g);
            p -= (lr * lr_scale / bc1) * m[i].cwiseQuotient(((v[i] / bc2).cwiseSqrt().array() + eps).matrix());
        }
    }
};

double grad_norm(const std::vector<ParamRef>& grads) {
    double total = 0.0;
    for (const auto& g : grads) total += Eigen::Map<const Vector>(g.data, g.size).squaredNorm();
    return std::sqrt(total);
}

Checkpoint train_loop(Checkpoint ckpt, const corpus::Corpus& corpus, const TrainParams& params,
                      const ResidualHook* hook = nullptr,
                      const ResidualHookGrad* hook_grad = nullptr) {
    if (corpus.empty()) throw ConfigError("train: empty corpus");
    if (params.steps < 0 || params.batch_size < 1) throw ConfigError("train: bad params");

    std::vector<TokenSeq> seqs;
    seqs.reserve(corpus.size());
    for (const auto& ex : corpus) seqs.push_back(training_sequence(ex, ckpt.config.context_length));

    Rng rng(Rng::derive(params.seed, 0x7121));
    std::vector<int> order(seqs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    rng.shuffle(order);
    const size_t n_holdout = size_t(double(seqs.size()) * params.holdout_fraction);
    std::vector<TokenSeq> holdout, train;
    for (size_t i = 0; i < order.size(); ++i)
        (i < n_holdout ? holdout : train).push_back(seqs[size_t(order[i])]);
    if (train.empty()) throw ConfigError("train: holdout fraction leaves no training data");

    std::vector<ParamRef> prefs = param_refs(ckpt.weights);
    Adam opt(prefs, params.lr);
    Weights grads = zero_like(ckpt.weights);
    std::vector<ParamRef> grefs = param_refs(grads);

    std::vector<int> sched(train.size());
    for (size_t i = 0; i < sched.size(); ++i) sched[i] = int(i);
    size_t cursor = sched.size();

    for (int step = 0; step < params.steps; ++step) {
        std::vector<TokenSeq> batch;
        for (int b = 0; b < params.batch_size; ++b) {
            if (cursor == sched.size()) {
                rng.shuffle(sched);
                cursor = 0;
            }
            batch.push_back(train[size_t(sched[cursor++])]);
        }
        for (const auto& r : grefs) Eigen::Map<Vector>(r.data, r.size).setZero();
        const double loss = loss_and_grads(ckpt, batch, grads, hook, hook_grad);
        if (!std::isfinite(loss))
            throw TrainingError("training loss diverged at step " + std::to_string(step));
        const double gn = grad_norm(grefs);
        if (gn > params.clip_norm && gn > 0.0) {
            const double s = params.clip_norm / gn;
            for (const auto& r : grefs) Eigen::Map<Vector>(r.data, r.size) *= s;
        }
        const double warm =
            params.warmup_steps > 0 ? std::min(1.0, double(step + 1) / params.warmup_steps) : 1.0;
        opt.step(prefs, grefs, warm);
    }

    if (params.steps > 0) {
        const auto& eval_set = holdout.empty() ? train : holdout;
        const double ce = batch_loss(ckpt, eval_set);
        if (!std::isfinite(ce) || ce > params.max_heldout_ce)
            throw TrainingError("held-out cross-entropy " + std::to_string(ce) +
                                " above limit " + std::to_string(params.max_heldout_ce));
    }
    return ckpt;
}

}  // namespace

Checkpoint train_base(const corpus::Corpus& corpus, const ModelConfig& config,
                      const TrainParams& params) {
    Checkpoint ckpt = init_checkpoint(config);
    ckpt = train_loop(std::move(ckpt), corpus, params);
    ckpt.provenance.push_back({params.corpus_id, params.describe()});
    return ckpt;
}

Checkpoint finetune(const Checkpoint& ckpt, const corpus::Corpus& corpus,
                    const TrainParams& params, const ResidualHook* hook,
                    const ResidualHookGrad* hook_grad) {
    Checkpoint out = train_loop(ckpt, corpus, params, hook, hook_grad);
    out.provenance.push_back({params.corpus_id, params.describe()});
    return out;
}

double entropy_nats(const Vector& logits) {
    const double m = logits.maxCoeff();
    const Vector e = (logits.array() - m).exp();
    const double z = e.sum();
    double h = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double p = e(i) / z;
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::max(0.0, h);
}

namespace {

/// Incremental decoding state: per-layer key/value rows appended per step.
struct KvState {
    std::vector<Matrix> k, v;  // per layer, grows to T x d
    int filled = 0;

    KvState(const ModelConfig& cfg, int capacity) {
        k.assign(size_t(cfg.n_layers), Matrix(capacity, cfg.d_model));
        v.assign(size_t(cfg.n_layers), Matrix(capacity, cfg.d_model));
    }
};

Vector rmsnorm_vec(const Vector& x, const Vector& g) {
    const double ms = x.squaredNorm() / double(x.size());
    return x.cwiseProduct(g) / std::sqrt(ms + kNormEps);
}

/// Feed one token; returns the logits for the next position.
Vector decode_step(const Checkpoint& ckpt, TokenId tok, int pos, KvState& kv,
                   const ResidualHook* hook, std::vector<Matrix>* residual_rows) {
    const ModelConfig& cfg = ckpt.config;
    const Weights& w = ckpt.weights;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));

    Vector x = (w.tok_emb.row(tok) + w.pos_emb.row(pos)).transpose();
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[size_t(l)];
        const Vector n1 = rmsnorm_vec(x, lw.ln1);
        kv.k[size_t(l)].row(pos) = (lw.wk.transpose() * n1).transpose();
        kv.v[size_t(l)].row(pos) = (lw.wv.transpose() * n1).transpose();
        const Vector q = lw.wq.transpose() * n1;
        Vector att(cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const auto kh = kv.k[size_t(l)].topRows(pos + 1).middleCols(h * dh, dh);
            const auto vh = kv.v[size_t(l)].topRows(pos + 1).middleCols(h * dh, dh);
            Vector scores = kh * q.segment(h * dh, dh) * scale;
            const double m = scores.maxCoeff();
            Vector p = (scores.array() - m).exp();
            p /= p.sum();
            att.segment(h * dh, dh) = vh.transpose() * p;
        }
        x += lw.wo.transpose() * att;
        const Vector n2 = rmsnorm_vec(x, lw.ln2);
        const Vector hidden = (lw.w1.transpose() * n2).cwiseMax(0.0);
        x += lw.w2.transpose() * hidden;
        if (hook && *hook) {
            Matrix row = x.transpose();
            (*hook)(l, pos, row);
            x = row.transpose();
        }
        if (residual_rows) residual_rows->at(size_t(l)).row(pos) = x.transpose();
    }
    const Vector nf = rmsnorm_vec(x, w.lnf);
    return w.head.transpose() * nf;
}

TokenId sample_token(const Vector& logits, double temperature, Rng& rng) {
    if (temperature == 0.0) {
        Eigen::Index best = 0;
        logits.maxCoeff(&best);
        return TokenId(best);
    }
    const Vector p = softmax_row(logits / temperature);
    double u = rng.uniform();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        u -= p(i);
        if (u <= 0.0) return TokenId(i);
    }
    return TokenId(p.size() - 1);
}

}  // namespace

GenerationRecord generate_hooked(const Checkpoint& ckpt, const TokenSeq& prompt,
                                 double temperature, int max_tokens, uint64_t seed,
                                 const ResidualHook* hook,
                                 std::vector<ActivationTrace>* all_layers) {
    const ModelConfig& cfg = ckpt.config;
    if (prompt.empty()) throw ConfigError("generate: empty prompt");
    if (int(prompt.size()) >= cfg.context_length) throw ConfigError("generate: prompt too long");
    if (temperature < 0.0) throw ConfigError("generate: negative temperature");
    if (max_tokens < 1) throw ConfigError("generate: max_tokens must be >= 1");

    const int capacity = cfg.context_length;
    KvState kv(cfg, capacity);
    std::vector<Matrix> residual_rows(size_t(cfg.n_layers), Matrix(capacity, cfg.d_model));

    Rng rng(Rng::derive(seed, 0x9E4));
    GenerationRecord rec;
    rec.prompt = prompt;
    rec.temperature = temperature;
    rec.seed = seed;

    Vector logits;
    int pos = 0;
    for (TokenId tok : prompt) logits = decode_step(ckpt, tok, pos++, kv, hook, &residual_rows);

    while (int(rec.output.size()) < max_tokens && pos < capacity) {
        const TokenId tok = sample_token(logits, temperature, rng);
        rec.entropies.push_back(entropy_nats(logits));
        rec.output.push_back(tok);
        logits = decode_step(ckpt, tok, pos++, kv, hook, &residual_rows);
        if (tok == tokens::kEos) break;
    }

    TokenSeq all_tokens = prompt;
    all_tokens.insert(all_tokens.end(), rec.output.begin(), rec.output.end());
    rec.trace.tokens = all_tokens;
    rec.trace.layer = cfg.capture_layer;
    rec.trace.residuals = residual_rows[size_t(cfg.capture_layer)].topRows(pos);
    if (all_layers) {
        all_layers->clear();
        for (int l = 0; l < cfg.n_layers; ++l) {
            ActivationTrace tr;
            tr.tokens = all_tokens;
            tr.layer = l;
            tr.residuals = residual_rows[size_t(l)].topRows(pos);
            all_layers->push_back(std::move(tr));
        }
    }
    return rec;
}

GenerationRecord generate(const Checkpoint& ckpt, const TokenSeq& prompt, double temperature,
                          int max_tokens, uint64_t seed) {
    return generate_hooked(ckpt, prompt, temperature, max_tokens, seed, nullptr, nullptr);
}

ActivationTrace capture(const Checkpoint& ckpt, const TokenSeq& toks, int layer) {
    if (layer < 0 || layer >= ckpt.config.n_layers)
        throw ConfigError("capture: layer out of range");
    ForwardCache fc;
    forward_cached(ckpt, toks, fc, nullptr);
    ActivationTrace tr;
    tr.tokens = toks;
    tr.layer = layer;
    tr.residuals = (layer + 1 < ckpt.config.n_layers) ? fc.layers[size_t(layer) + 1].x_in : fc.xf;
    return tr;
}

std::vector<ActivationTrace> capture_all(const Checkpoint& ckpt, const TokenSeq& toks) {
    ForwardCache fc;
    forward_cached(ckpt, toks, fc, nullptr);
    std::vector<ActivationTrace> out;
    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        ActivationTrace tr;
        tr.tokens = toks;
        tr.layer = l;
        tr.residuals = (l + 1 < ckpt.config.n_layers) ? fc.layers[size_t(l) + 1].x_in : fc.xf;
        out.push_back(std::move(tr));
    }
    return out;
}

double heldout_perplexity(const Checkpoint& ckpt, const corpus::Corpus& corpus) {
    if (corpus.empty()) throw ConfigError("heldout_perplexity: empty corpus");
    std::vector<TokenSeq> seqs;
    for (const auto& ex : corpus) seqs.push_back(training_sequence(ex, ckpt.config.context_length));
    return std::exp(batch_loss(ckpt, seqs));
}

}  // namespace framegate::lm
